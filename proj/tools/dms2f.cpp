// Command-line front end: synth, train, detect, eval, bench, info.
// Log level comes from DMS2F_LOG (trace, debug, info, warn, error, off).

#include "dms2f/detection.hpp"
#include "dms2f/eval.hpp"
#include "dms2f/run_config.hpp"
#include "dms2f/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace dms2f;

namespace {

// Raised when an artifact cannot be read back as written.
struct VerifyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigArgs {
  std::string path;
  std::vector<std::string> sets;
  std::string fusion;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args, bool with_fusion) {
  cmd->add_option("--config", args.path, "JSON config with model/train/mask/scene sections")->check(CLI::ExistingFile);
  cmd->add_option("--set", args.sets, "Override a field, e.g. --set train.lr=1e-3 (repeatable)");
  if (with_fusion) {
    cmd->add_option("--fusion", args.fusion, "Fusion variant")
        ->check(CLI::IsMember({"gated", "addition", "spatial_only", "spectral_only"}));
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

RunConfig load_config(const ConfigArgs& args, std::vector<std::string> extra) {
  std::vector<std::string> sets = args.sets;
  if (!args.fusion.empty()) sets.push_back("model.fusion=" + args.fusion);
  sets.insert(sets.end(), extra.begin(), extra.end());
  RunConfig config = parse_run_config(args.path.empty() ? std::string() : read_text(args.path), sets);
  validate(config);
  spdlog::debug("config:\n{}", run_config_json(config));
  return config;
}

fs::path with_suffix(const fs::path& path, const std::string& suffix) {
  fs::path p = path;
  p.replace_extension();
  return p.string() + suffix;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void report_written(const fs::path& path) { spdlog::info("wrote {}", path.string()); }

int run_synth(const ConfigArgs& args, const std::optional<std::uint64_t>& seed, const fs::path& out) {
  std::vector<std::string> extra;
  if (seed) extra.push_back("scene.seed=" + std::to_string(*seed));
  const RunConfig config = load_config(args, extra);
  const HsiCube cube = synth_scene(config.scene);
  save_cube(cube, out);
  save_mask(*cube.mask, mask_path_for(out));
  if (!(load_cube(out).pixels == cube.pixels) || !(load_mask(mask_path_for(out)) == *cube.mask).all()) {
    throw VerifyError("synth: artifacts did not read back identically");
  }
  spdlog::info("scene {}x{}x{}, {} anomalous pixels", cube.height, cube.width, cube.bands, cube.mask->count());
  report_written(out);
  report_written(mask_path_for(out));
  return 0;
}

struct TrainArgs {
  fs::path cube;
  fs::path out = "model.ckpt";
  fs::path history;
  std::optional<std::uint64_t> seed;
  std::optional<Index> epochs;
};

int run_train(const ConfigArgs& args, const TrainArgs& t) {
  std::vector<std::string> extra;
  if (t.seed) extra.push_back("train.seed=" + std::to_string(*t.seed));
  if (t.epochs) extra.push_back("train.epochs=" + std::to_string(*t.epochs));
  RunConfig config = load_config(args, extra);
  const HsiCube cube = normalize(load_cube(t.cube));
  if (config.model.bands == 0) config.model.bands = cube.bands;

  const auto start = std::chrono::steady_clock::now();
  const FitResult result = fit(cube, config.model, config.train, [&](const EpochRecord& r) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    spdlog::info("epoch {}/{} train {:.6f} val {:.6f} ({:.1f}s)", r.epoch, config.train.epochs, r.train_loss,
                 r.val_loss, secs);
  });
  const fs::path history = t.history.empty() ? with_suffix(t.out, ".history.csv") : t.history;
  save_checkpoint(result.checkpoint, t.out);
  write_history_csv(result.history, history);
  if (load_checkpoint(t.out).val_loss != result.checkpoint.val_loss) {
    throw VerifyError("train: checkpoint did not read back identically");
  }
  spdlog::info("kept epoch {} (val loss {:.6f})", result.checkpoint.epoch, result.checkpoint.val_loss);
  report_written(t.out);
  report_written(history);
  return 0;
}

struct DetectArgs {
  fs::path cube;
  fs::path checkpoint;
  std::string detector = "model";
  Index stride = 0;
  fs::path out = "scores.csv";
  fs::path pgm;
};

int run_detect(const DetectArgs& d) {
  const HsiCube cube = normalize(load_cube(d.cube));
  ScoreMap map;
  if (d.detector == "rx") {
    map = rx_score(cube);
  } else {
    if (d.checkpoint.empty()) throw std::invalid_argument("--checkpoint: required for the model detector");
    const Checkpoint ck = load_checkpoint(d.checkpoint);
    const Index stride = d.stride > 0 ? d.stride : std::max<Index>(1, ck.config.patch / 2);
    spdlog::info("scoring with stride {}", stride);
    map = detect(cube, ck, stride);
  }
  const fs::path pgm = d.pgm.empty() ? with_suffix(d.out, ".pgm") : d.pgm;
  write_score_csv(map, d.out);
  write_score_pgm(map, pgm);
  if (!(read_score_csv(d.out).scores == map.scores)) throw VerifyError("detect: score CSV did not read back");
  report_written(d.out);
  report_written(pgm);
  return 0;
}

int run_eval(const fs::path& scores, const fs::path& mask, const fs::path& out, const fs::path& roc) {
  const EvalReport report = roc_auc(read_score_csv(scores), load_mask(mask));
  const std::string json = report_json(report);
  std::cout << json << '\n';
  if (!out.empty()) {
    write_text(out, json + "\n");
    report_written(out);
  }
  if (!roc.empty()) {
    write_roc_csv(report.roc, roc);
    report_written(roc);
  }
  return 0;
}

struct BenchArgs {
  std::vector<Index> lengths{1024, 2048};
  int reps = 5;
  Index inner = 64;
  Index state = 16;
  fs::path out = "bench.csv";
};

int run_bench(const BenchArgs& b) {
  const std::vector<BenchRow> rows = bench_scan(b.lengths, b.reps, b.inner, b.state);
  write_bench_csv(rows, b.out);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    spdlog::info("L {} -> {}: scan x{:.2f}, attention x{:.2f}", rows[i - 1].length, rows[i].length,
                 rows[i].scan_ms / rows[i - 1].scan_ms, rows[i].attn_ms / rows[i - 1].attn_ms);
  }
  report_written(b.out);
  return 0;
}

int run_info(const ConfigArgs& args, Index bands, const fs::path& out) {
  RunConfig config = load_config(args, {});
  if (bands > 0) config.model.bands = bands;
  if (config.model.bands == 0) config.model.bands = config.scene.bands;
  config.model.validate();
  const double macs = forward_macs(config.model);
  nlohmann::ordered_json j;
  j["parameters"] = parameter_count(config.model);
  j["forward_macs_per_patch"] = macs;
  j["forward_flops_per_patch"] = 2.0 * macs;
  j["config"] = nlohmann::ordered_json::parse(run_config_json(config));
  const std::string text = j.dump(2);
  std::cout << text << '\n';
  if (!out.empty()) {
    write_text(out, text + "\n");
    report_written(out);
  }
  return 0;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_st("dms2f");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* level = std::getenv("DMS2F_LOG")) {
    const auto parsed = spdlog::level::from_str(level);
    // from_str maps unknown names to off; only honour it when asked for.
    if (parsed != spdlog::level::off || std::string(level) == "off") {
      spdlog::set_level(parsed);
    } else {
      spdlog::warn("DMS2F_LOG='{}' not recognised, using info", level);
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Hyperspectral anomaly detection with dual-branch selective-scan reconstruction"};
  app.require_subcommand(1);

  ConfigArgs synth_cfg, train_cfg, info_cfg;
  std::optional<std::uint64_t> synth_seed;
  fs::path synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene and its anomaly mask");
  add_config_options(synth, synth_cfg, false);
  synth->add_option("--seed", synth_seed, "Scene seed (overrides scene.seed)");
  synth->add_option("--out", synth_out, "Output cube; the mask goes to <name>.mask.hsic")->required();

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Fit a model on a cube and write the best checkpoint");
  add_config_options(train, train_cfg, true);
  train->add_option("--cube", train_args.cube, "Input HSIC cube")->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_args.out, "Checkpoint path")->capture_default_str();
  train->add_option("--history", train_args.history, "History CSV (default <out>.history.csv)");
  train->add_option("--seed", train_args.seed, "Training seed (overrides train.seed)");
  train->add_option("--epochs", train_args.epochs, "Overrides train.epochs");

  DetectArgs detect_args;
  auto* det = app.add_subcommand("detect", "Score every pixel of a cube");
  det->add_option("--cube", detect_args.cube, "Input HSIC cube")->required()->check(CLI::ExistingFile);
  det->add_option("--checkpoint", detect_args.checkpoint, "Trained model")->check(CLI::ExistingFile);
  det->add_option("--detector", detect_args.detector, "model or rx")
      ->check(CLI::IsMember({"model", "rx"}))
      ->capture_default_str();
  det->add_option("--stride", detect_args.stride, "Window stride (default patch/2)")->check(CLI::PositiveNumber);
  det->add_option("--out", detect_args.out, "Score CSV")->capture_default_str();
  det->add_option("--pgm", detect_args.pgm, "Score image (default <out>.pgm)");

  fs::path eval_scores, eval_mask, eval_out, eval_roc;
  auto* ev = app.add_subcommand("eval", "ROC/AUC of a score map against a mask");
  ev->add_option("--scores", eval_scores, "Score CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--mask", eval_mask, "Mask HSIC")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", eval_out, "Report JSON (also printed)");
  ev->add_option("--roc", eval_roc, "ROC CSV");

  BenchArgs bench_args;
  auto* bench = app.add_subcommand("bench", "Selective scan vs attention timing over sequence lengths");
  bench->add_option("--lengths", bench_args.lengths, "Sequence lengths, each >= 64")->delimiter(',')->capture_default_str();
  bench->add_option("--reps", bench_args.reps, "Timed repetitions per length")->capture_default_str();
  bench->add_option("--inner", bench_args.inner, "Channel width")->capture_default_str();
  bench->add_option("--state", bench_args.state, "Scan state size")->capture_default_str();
  bench->add_option("--out", bench_args.out, "Output CSV")->capture_default_str();

  Index info_bands = 0;
  fs::path info_out;
  auto* info = app.add_subcommand("info", "Parameter count, FLOP estimate and resolved config");
  add_config_options(info, info_cfg, true);
  info->add_option("--bands", info_bands, "Input bands (default model.bands, else scene.bands)");
  info->add_option("--out", info_out, "Also write the JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth) return run_synth(synth_cfg, synth_seed, synth_out);
    if (*train) return run_train(train_cfg, train_args);
    if (*det) return run_detect(detect_args);
    if (*ev) return run_eval(eval_scores, eval_mask, eval_out, eval_roc);
    if (*bench) return run_bench(bench_args);
    if (*info) return run_info(info_cfg, info_bands, info_out);
  } catch (const std::invalid_argument& e) {
    spdlog::error("invalid configuration: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
