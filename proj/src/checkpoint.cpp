#include "dms2f/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

namespace dms2f {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

ordered_json mamba_to_json(const MambaConfig& m) {
  ordered_json j;
  j["d_model"] = m.d_model;
  j["d_state"] = m.d_state;
  j["d_conv"] = m.d_conv;
  j["expand"] = m.expand;
  return j;
}

ordered_json config_to_json(const ModelConfig& c) {
  ordered_json j;
  j["bands"] = c.bands;
  j["patch"] = c.patch;
  j["c1"] = c.c1;
  j["c2"] = c.c2;
  j["k"] = c.k;
  j["spatial"] = mamba_to_json(c.spatial);
  j["spectral"] = mamba_to_json(c.spectral);
  j["decoder"] = mamba_to_json(c.decoder);
  j["fusion"] = std::string(to_string(c.fusion));
  return j;
}

Index read_index(const json& j, const std::string& where) {
  if (!j.is_number_integer()) throw std::invalid_argument(where + " must be an integer, got " + j.dump());
  return j.get<Index>();
}

void read_mamba(const json& j, MambaConfig& m, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    const std::string field = where + "." + key;
    if (key == "d_model") m.d_model = read_index(value, field);
    else if (key == "d_state") m.d_state = read_index(value, field);
    else if (key == "d_conv") m.d_conv = read_index(value, field);
    else if (key == "expand") m.expand = read_index(value, field);
    else throw std::invalid_argument("unknown field " + field);
  }
}

ModelConfig config_from(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  ModelConfig c;
  // c1 first so that explicit block widths override the derived ones.
  if (j.contains("c1")) c.set_embed(read_index(j["c1"], "model.c1"));
  for (const auto& [key, value] : j.items()) {
    const std::string field = "model." + key;
    if (key == "c1") continue;
    if (key == "bands") c.bands = read_index(value, field);
    else if (key == "patch") c.patch = read_index(value, field);
    else if (key == "c2") c.c2 = read_index(value, field);
    else if (key == "k") c.k = read_index(value, field);
    else if (key == "spatial") read_mamba(value, c.spatial, field);
    else if (key == "spectral") read_mamba(value, c.spectral, field);
    else if (key == "decoder") read_mamba(value, c.decoder, field);
    else if (key == "fusion") {
      if (!value.is_string()) throw std::invalid_argument(field + " must be a string");
      c.fusion = parse_fusion(value.get<std::string>());
    } else {
      throw std::invalid_argument("unknown field " + field);
    }
  }
  return c;
}

void append_le(std::string& out, const Tensor<float>& t) {
  const std::size_t at = out.size();
  out.resize(at + std::size_t(t.size()) * 4);
  for (Index i = 0; i < t.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(t.data()[i]);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(&out[at + std::size_t(i) * 4], &bits, 4);
  }
}

template <typename Scalar>
void copy_named(const std::vector<NamedTensor>& from, const std::vector<std::pair<std::string, Matrix<Scalar>*>>& to,
                const char* kind) {
  if (from.size() != to.size()) {
    throw ShapeError(std::string("checkpoint holds ") + std::to_string(from.size()) + " " + kind + ", model has " +
                     std::to_string(to.size()));
  }
  for (std::size_t i = 0; i < to.size(); ++i) {
    const NamedTensor& src = from[i];
    Matrix<Scalar>& dst = *to[i].second;
    if (src.name != to[i].first) {
      throw ShapeError(std::string(kind) + " " + std::to_string(i) + " is '" + src.name + "' in the checkpoint but '" +
                       to[i].first + "' in the model");
    }
    if (src.value.rows() != dst.rows() || src.value.cols() != dst.cols()) {
      throw ShapeError("checkpoint entry '" + src.name + "' has shape " + to_string(src.value.shape()) +
                       " which does not fit the model");
    }
    dst = src.value.matrix().template cast<Scalar>();
  }
}

template <typename Scalar>
std::vector<std::pair<std::string, Matrix<Scalar>*>> parameter_slots(Dms2fModel<Scalar>& model) {
  std::vector<std::pair<std::string, Matrix<Scalar>*>> out;
  for (Parameter<Scalar>* p : model.parameters()) out.emplace_back(p->name(), &p->value().matrix());
  return out;
}

}  // namespace

std::string config_json(const ModelConfig& config) { return config_to_json(config).dump(); }

ModelConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("model config is not valid JSON: ") + e.what());
  }
  return config_from(j);
}

std::string config_hash(const ModelConfig& config) { return fnv1a_hex(config_json(config)); }

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename Scalar>
Checkpoint capture(Dms2fModel<Scalar>& model, std::uint64_t seed, Index epoch, double val_loss) {
  Checkpoint ck;
  ck.config = model.config();
  ck.seed = seed;
  ck.epoch = epoch;
  ck.val_loss = val_loss;
  for (const Parameter<Scalar>* p : model.parameters()) {
    ck.parameters.push_back({p->name(), p->value().template cast<float>()});
  }
  for (const auto& [name, m] : model.buffers()) {
    ck.buffers.push_back({name, Tensor<float>({m->cols()}, m->template cast<float>())});
  }
  return ck;
}

template <typename Scalar>
void restore(const Checkpoint& checkpoint, Dms2fModel<Scalar>& model) {
  if (!(checkpoint.config == model.config())) {
    throw ShapeError("checkpoint config " + config_json(checkpoint.config) + " differs from the model's " +
                     config_json(model.config()));
  }
  copy_named(checkpoint.parameters, parameter_slots(model), "parameters");
  copy_named(checkpoint.buffers, model.buffers(), "buffers");
}

template <typename Scalar>
std::unique_ptr<Dms2fModel<Scalar>> instantiate(const Checkpoint& checkpoint) {
  auto model = std::make_unique<Dms2fModel<Scalar>>(checkpoint.config, checkpoint.seed);
  restore(checkpoint, *model);
  return model;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  ordered_json manifest;
  manifest["format"] = "dms2f-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = config_to_json(ck.config);
  manifest["seed"] = ck.seed;
  manifest["epoch"] = ck.epoch;
  manifest["val_loss"] = ck.val_loss;
  std::string payload;
  for (const char* kind : {"parameters", "buffers"}) {
    const auto& list = std::string(kind) == "parameters" ? ck.parameters : ck.buffers;
    ordered_json entries = ordered_json::array();
    for (const NamedTensor& t : list) {
      entries.push_back({{"name", t.name}, {"shape", t.value.shape()}});
      append_le(payload, t.value);
    }
    manifest[kind] = std::move(entries);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << manifest.dump() << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty checkpoint");
  Checkpoint ck;
  std::vector<std::pair<std::vector<NamedTensor>*, json>> sections;
  json manifest;
  try {
    manifest = json::parse(line);
    if (manifest.value("format", "") != "dms2f-checkpoint") throw FormatError(path.string() + ": not a checkpoint");
    if (manifest.at("version") != 1) {
      throw FormatError(path.string() + ": unsupported checkpoint version " + manifest.at("version").dump());
    }
    ck.config = config_from(manifest.at("config"));
    ck.seed = manifest.at("seed").get<std::uint64_t>();
    ck.epoch = manifest.at("epoch").get<Index>();
    ck.val_loss = manifest.at("val_loss").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                    : manifest.at("val_loss").get<double>();
    sections = {{&ck.parameters, manifest.at("parameters")}, {&ck.buffers, manifest.at("buffers")}};
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed checkpoint manifest (" + e.what() + ")");
  } catch (const std::invalid_argument& e) {
    throw FormatError(path.string() + ": bad config in checkpoint (" + e.what() + ")");
  }
  for (auto& [list, entries] : sections) {
    for (const json& e : entries) {
      Shape shape;
      std::string name;
      try {
        name = e.at("name").get<std::string>();
        shape = e.at("shape").get<Shape>();
      } catch (const json::exception& err) {
        throw FormatError(path.string() + ": malformed tensor entry (" + err.what() + ")");
      }
      Tensor<float> t(shape);
      std::vector<char> bytes(std::size_t(t.size()) * 4);
      in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
        throw FormatError(path.string() + ": payload ends inside tensor '" + name + "'");
      }
      for (Index i = 0; i < t.size(); ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, &bytes[std::size_t(i) * 4], 4);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        t.data()[i] = std::bit_cast<float>(bits);
      }
      list->push_back({std::move(name), std::move(t)});
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after payload");
  return ck;
}

#define DMS2F_INSTANTIATE(S)                                                          \
  template Checkpoint capture<S>(Dms2fModel<S>&, std::uint64_t, Index, double);      \
  template void restore<S>(const Checkpoint&, Dms2fModel<S>&);                        \
  template std::unique_ptr<Dms2fModel<S>> instantiate<S>(const Checkpoint&);

DMS2F_INSTANTIATE(float)
DMS2F_INSTANTIATE(double)
#undef DMS2F_INSTANTIATE

}  // namespace dms2f
