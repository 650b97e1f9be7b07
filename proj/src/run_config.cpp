#include "dms2f/run_config.hpp"

#include <json.hpp>

#include <cmath>

namespace dms2f {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

[[noreturn]] void bad(const std::string& field, const std::string& what) {
  throw std::invalid_argument(field + ": " + what);
}

Index as_index(const json& v, const std::string& field) {
  if (!v.is_number_integer()) bad(field, "expected an integer, got " + v.dump());
  return v.get<Index>();
}

double as_real(const json& v, const std::string& field) {
  if (!v.is_number()) bad(field, "expected a number, got " + v.dump());
  const double x = v.get<double>();
  if (!std::isfinite(x)) bad(field, "must be finite");
  return x;
}

std::uint64_t as_seed(const json& v, const std::string& field) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    bad(field, "expected a non-negative integer, got " + v.dump());
  }
  return v.get<std::uint64_t>();
}

const json& object_or_empty(const json& j, const char* section) {
  static const json empty = json::object();
  if (!j.contains(section)) return empty;
  if (!j[section].is_object()) bad(section, "section must be a JSON object");
  return j[section];
}

void read_train(const json& j, TrainConfig& t) {
  for (const auto& [key, v] : j.items()) {
    const std::string f = "train." + key;
    if (key == "lr") t.lr = as_real(v, f);
    else if (key == "weight_decay") t.weight_decay = as_real(v, f);
    else if (key == "epochs") t.epochs = as_index(v, f);
    else if (key == "batch_size") t.batch_size = as_index(v, f);
    else if (key == "val_fraction") t.val_fraction = as_real(v, f);
    else if (key == "stride") t.stride = as_index(v, f);
    else if (key == "seed") t.seed = as_seed(v, f);
    else bad(f, "unknown field");
  }
}

void read_mask(const json& j, MaskSpec& m) {
  for (const auto& [key, v] : j.items()) {
    const std::string f = "mask." + key;
    if (key == "probability") m.probability = as_real(v, f);
    else if (key == "min_side") m.min_side = as_index(v, f);
    else if (key == "max_side") m.max_side = as_index(v, f);
    else if (key == "fill") m.fill = as_real(v, f);
    else bad(f, "unknown field");
  }
}

void read_scene(const json& j, SceneSpec& s) {
  for (const auto& [key, v] : j.items()) {
    const std::string f = "scene." + key;
    if (key == "height") s.height = as_index(v, f);
    else if (key == "width") s.width = as_index(v, f);
    else if (key == "bands") s.bands = as_index(v, f);
    else if (key == "endmembers") s.endmembers = as_index(v, f);
    else if (key == "anomalies") s.anomalies = as_index(v, f);
    else if (key == "min_size") s.min_size = as_index(v, f);
    else if (key == "max_size") s.max_size = as_index(v, f);
    else if (key == "contrast") s.contrast = as_real(v, f);
    else if (key == "noise") s.noise = as_real(v, f);
    else if (key == "seed") s.seed = as_seed(v, f);
    else bad(f, "unknown field");
  }
}

void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) bad(assignment, "override must look like section.field=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &root;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) bad(path, "empty path component");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    if (!node->is_object()) bad(path.substr(0, dot), "is not a section");
    start = dot + 1;
  }
}

ordered_json to_json(const TrainConfig& t) {
  ordered_json j;
  j["lr"] = t.lr;
  j["weight_decay"] = t.weight_decay;
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["val_fraction"] = t.val_fraction;
  j["stride"] = t.stride;
  j["seed"] = t.seed;
  return j;
}

ordered_json to_json(const MaskSpec& m) {
  ordered_json j;
  j["probability"] = m.probability;
  j["min_side"] = m.min_side;
  j["max_side"] = m.max_side;
  j["fill"] = m.fill;
  return j;
}

ordered_json to_json(const SceneSpec& s) {
  ordered_json j;
  j["height"] = s.height;
  j["width"] = s.width;
  j["bands"] = s.bands;
  j["endmembers"] = s.endmembers;
  j["anomalies"] = s.anomalies;
  j["min_size"] = s.min_size;
  j["max_size"] = s.max_size;
  j["contrast"] = s.contrast;
  j["noise"] = s.noise;
  j["seed"] = s.seed;
  return j;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text, const std::vector<std::string>& overrides) {
  json root = json::object();
  if (!json_text.empty()) {
    try {
      root = json::parse(json_text);
    } catch (const json::parse_error& e) {
      throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
    }
    if (!root.is_object()) throw std::invalid_argument("config must be a JSON object");
  }
  for (const std::string& o : overrides) apply_override(root, o);
  for (const auto& [key, v] : root.items()) {
    if (key != "model" && key != "train" && key != "mask" && key != "scene") bad(key, "unknown section");
  }

  RunConfig config;
  config.model = config_from_json(object_or_empty(root, "model").dump());
  read_train(object_or_empty(root, "train"), config.train);
  read_mask(object_or_empty(root, "mask"), config.train.mask);
  read_scene(object_or_empty(root, "scene"), config.scene);
  return config;
}

void validate(const RunConfig& config) {
  ModelConfig model = config.model;
  if (model.bands == 0) model.bands = config.scene.bands;
  model.validate();
  config.train.validate(model.patch);
  config.scene.validate();
}

std::string run_config_json(const RunConfig& config) {
  ordered_json j;
  j["model"] = ordered_json::parse(config_json(config.model));
  j["train"] = to_json(config.train);
  j["mask"] = to_json(config.train.mask);
  j["scene"] = to_json(config.scene);
  return j.dump(2);
}

}  // namespace dms2f
