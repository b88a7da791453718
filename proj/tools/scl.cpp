// Command-line front end: dataset generation, training, evaluation, kernel
// fusion, micro-benchmarks and the numerical self-checks.
//
// Exit codes: 0 success, 1 usage error, 2 data/IO error, 3 numerical-check
// failure.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "scl/bench.hpp"
#include "scl/checkpoint.hpp"
#include "scl/data.hpp"
#include "scl/gradcheck.hpp"
#include "scl/rng.hpp"
#include "scl/selftest.hpp"
#include "scl/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Everything a run needs, after defaults and overrides.
struct RunConfig {
  std::uint64_t seed = 1;

  int input_channels = 4;
  int num_classes = 6;
  int width = 16;

  scl::TrainConfig train;

  std::string data_path;
  bool generate = false;
  int gen_train_n = 800;
  int gen_test_n = 200;
  std::uint64_t gen_seed = 7;
  double gen_shift_train_lo = 0.0, gen_shift_train_hi = 1.0;
  double gen_shift_test_lo = 2.5, gen_shift_test_hi = 3.5;
  int gen_height = 64, gen_width = 64;

  std::vector<int> trimap_widths = {1, 2, 3, 4, 6, 8};
};

void require_keys(const json& j, const std::set<std::string>& allowed,
                  const std::string& context) {
  if (!j.is_object()) throw ConfigError("config section '" + context + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key))
      throw ConfigError("unknown key '" + key + "' in config section '" + context + "'");
  }
}

scl::LayerKind parse_layer_kind(const std::string& s) {
  if (s == "vanilla" || s == "conv") return scl::LayerKind::conv;
  if (s == "shapeconv") return scl::LayerKind::shapeconv;
  throw ConfigError("layer kind must be 'vanilla' or 'shapeconv', got '" + s + "'");
}

RunConfig load_config(const std::string& path) {
  RunConfig cfg;
  cfg.train.layer_kind = scl::LayerKind::shapeconv;
  if (path.empty()) return cfg;

  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config JSON: " + std::string(e.what()));
  }

  require_keys(j, {"seed", "model", "train", "data", "eval"}, "<root>");
  cfg.seed = j.value("seed", cfg.seed);

  if (j.contains("model")) {
    const json& m = j["model"];
    require_keys(m, {"input_channels", "num_classes", "width"}, "model");
    cfg.input_channels = m.value("input_channels", cfg.input_channels);
    cfg.num_classes = m.value("num_classes", cfg.num_classes);
    cfg.width = m.value("width", cfg.width);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    require_keys(t,
                 {"epochs", "batch_size", "learning_rate", "momentum", "weight_decay",
                  "layer", "freeze_wb", "freeze_ws"},
                 "train");
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
    cfg.train.momentum = t.value("momentum", cfg.train.momentum);
    cfg.train.weight_decay = t.value("weight_decay", cfg.train.weight_decay);
    if (t.contains("layer")) cfg.train.layer_kind = parse_layer_kind(t["layer"]);
    cfg.train.freeze_base_weight = t.value("freeze_wb", cfg.train.freeze_base_weight);
    cfg.train.freeze_shape_weight = t.value("freeze_ws", cfg.train.freeze_shape_weight);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    require_keys(d, {"path", "generate"}, "data");
    if (d.contains("path") && d.contains("generate"))
      throw ConfigError("config data section takes either 'path' or 'generate', not both");
    if (d.contains("path")) cfg.data_path = d["path"].get<std::string>();
    if (d.contains("generate")) {
      const json& g = d["generate"];
      require_keys(g, {"train_n", "test_n", "seed", "shift_train", "shift_test", "height", "width"},
                   "data.generate");
      cfg.generate = true;
      cfg.gen_train_n = g.value("train_n", cfg.gen_train_n);
      cfg.gen_test_n = g.value("test_n", cfg.gen_test_n);
      cfg.gen_seed = g.value("seed", cfg.gen_seed);
      if (g.contains("shift_train")) {
        const auto v = g["shift_train"].get<std::vector<double>>();
        if (v.size() != 2) throw ConfigError("shift_train must be [lo, hi]");
        cfg.gen_shift_train_lo = v[0];
        cfg.gen_shift_train_hi = v[1];
      }
      if (g.contains("shift_test")) {
        const auto v = g["shift_test"].get<std::vector<double>>();
        if (v.size() != 2) throw ConfigError("shift_test must be [lo, hi]");
        cfg.gen_shift_test_lo = v[0];
        cfg.gen_shift_test_hi = v[1];
      }
      cfg.gen_height = g.value("height", cfg.gen_height);
      cfg.gen_width = g.value("width", cfg.gen_width);
    }
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    require_keys(e, {"trimap_widths"}, "eval");
    if (e.contains("trimap_widths"))
      cfg.trimap_widths = e["trimap_widths"].get<std::vector<int>>();
  }
  return cfg;
}

json effective_config_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["model"] = {{"input_channels", cfg.input_channels},
                {"num_classes", cfg.num_classes},
                {"width", cfg.width}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"learning_rate", cfg.train.learning_rate},
                {"momentum", cfg.train.momentum},
                {"weight_decay", cfg.train.weight_decay},
                {"layer", scl::to_string(cfg.train.layer_kind)},
                {"freeze_wb", cfg.train.freeze_base_weight},
                {"freeze_ws", cfg.train.freeze_shape_weight}};
  if (cfg.generate) {
    j["data"]["generate"] = {{"train_n", cfg.gen_train_n},
                             {"test_n", cfg.gen_test_n},
                             {"seed", cfg.gen_seed},
                             {"shift_train", {cfg.gen_shift_train_lo, cfg.gen_shift_train_hi}},
                             {"shift_test", {cfg.gen_shift_test_lo, cfg.gen_shift_test_hi}},
                             {"height", cfg.gen_height},
                             {"width", cfg.gen_width}};
  } else {
    j["data"] = {{"path", cfg.data_path}};
  }
  j["eval"] = {{"trimap_widths", cfg.trimap_widths}};
  return j;
}

std::string timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

// <out>/<timestamp>-seed<seed>, suffixed if it already exists.
fs::path make_run_dir(const std::string& out, std::uint64_t seed) {
  const std::string base = timestamp() + "-seed" + std::to_string(seed);
  fs::path dir = fs::path(out) / base;
  for (int k = 1; fs::exists(dir); ++k) dir = fs::path(out) / (base + "-" + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

void parse_range(const std::string& s, double& lo, double& hi) {
  const auto colon = s.find(':');
  if (colon == std::string::npos)
    throw CLI::ValidationError("range", "expected lo:hi, got '" + s + "'");
  try {
    lo = std::stod(s.substr(0, colon));
    hi = std::stod(s.substr(colon + 1));
  } catch (const std::exception&) {
    throw CLI::ValidationError("range", "expected lo:hi, got '" + s + "'");
  }
}

void write_metrics_csv(const fs::path& path, const scl::FcnMetrics& m) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  char buf[64];
  os << "metric,value\n";
  std::snprintf(buf, sizeof buf, "pixel_acc,%.17g\n", m.pixel_acc);
  os << buf;
  std::snprintf(buf, sizeof buf, "mean_acc,%.17g\n", m.mean_acc);
  os << buf;
  std::snprintf(buf, sizeof buf, "mean_iou,%.17g\n", m.mean_iou);
  os << buf;
  std::snprintf(buf, sizeof buf, "fw_iou,%.17g\n", m.fw_iou);
  os << buf;
}

void write_trimap_csv(const fs::path& path, const scl::TrimapCurve& curve) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "width,fraction\n";
  char buf[64];
  for (size_t i = 0; i < curve.widths.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%d,%.17g\n", curve.widths[i], curve.fractions[i]);
    os << buf;
  }
}

scl::Dataset obtain_dataset(const RunConfig& cfg) {
  if (!cfg.data_path.empty()) return scl::read_dataset(cfg.data_path);
  if (cfg.generate) {
    return scl::generate_dataset(cfg.gen_train_n, cfg.gen_test_n, cfg.gen_seed,
                                 cfg.gen_shift_train_lo, cfg.gen_shift_train_hi,
                                 cfg.gen_shift_test_lo, cfg.gen_shift_test_hi,
                                 cfg.gen_height, cfg.gen_width);
  }
  throw ConfigError("no dataset: pass --data or a config data section");
}

int cmd_gen_data(const std::string& out, std::uint64_t seed, int train_n, int test_n,
                 const std::string& shift_train, const std::string& shift_test,
                 int height, int width) {
  double tr_lo, tr_hi, te_lo, te_hi;
  parse_range(shift_train, tr_lo, tr_hi);
  parse_range(shift_test, te_lo, te_hi);

  const scl::Dataset dataset =
      scl::generate_dataset(train_n, test_n, seed, tr_lo, tr_hi, te_lo, te_hi, height, width);
  scl::write_dataset(out, dataset);

  json echo;
  echo["seed"] = seed;
  echo["train_n"] = train_n;
  echo["test_n"] = test_n;
  echo["shift_train"] = {tr_lo, tr_hi};
  echo["shift_test"] = {te_lo, te_hi};
  echo["height"] = height;
  echo["width"] = width;
  std::ofstream os(fs::path(out) / "gen_config.json");
  os << echo.dump(2) << "\n";

  std::printf("wrote %d train / %d test samples to %s (depth mean %.4f, std %.4f)\n",
              train_n, test_n, out.c_str(), dataset.meta.depth_mean, dataset.meta.depth_std);
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& data_flag,
              const std::string& out, const std::string& layer_flag, bool freeze_wb,
              bool freeze_ws) {
  RunConfig cfg = load_config(config_path);
  if (!data_flag.empty()) {
    cfg.data_path = data_flag;
    cfg.generate = false;
  }
  if (!layer_flag.empty()) cfg.train.layer_kind = parse_layer_kind(layer_flag);
  if (freeze_wb) cfg.train.freeze_base_weight = true;
  if (freeze_ws) cfg.train.freeze_shape_weight = true;
  cfg.train.seed = cfg.seed;

  if (cfg.input_channels != 3 && cfg.input_channels != 4)
    throw ConfigError("model.input_channels must be 3 (rgb only) or 4 (rgb + depth)");

  const scl::Dataset dataset = obtain_dataset(cfg);
  if (dataset.meta.num_classes != cfg.num_classes)
    throw ConfigError("model.num_classes (" + std::to_string(cfg.num_classes) +
                      ") does not match the dataset (" +
                      std::to_string(dataset.meta.num_classes) + ")");

  const fs::path run_dir = make_run_dir(out, cfg.seed);
  {
    std::ofstream os(run_dir / "effective_config.json");
    os << effective_config_json(cfg).dump(2) << "\n";
  }

  const scl::ModelSpec spec = scl::ModelSpec::toy(cfg.input_channels, cfg.num_classes,
                                                  cfg.width, cfg.train.layer_kind);
  scl::Model<float> model = scl::build_model<float>(spec, cfg.seed);
  std::printf("training %s model: %lld parameters, %d epochs, run dir %s\n",
              scl::to_string(cfg.train.layer_kind),
              static_cast<long long>(scl::count_parameters(spec)), cfg.train.epochs,
              run_dir.string().c_str());

  const std::vector<scl::EpochLog> logs = scl::train(model, dataset, cfg.train,
                                                     nullptr, &std::cout);
  scl::write_train_log_csv((run_dir / "train_log.csv").string(), logs);
  scl::save_checkpoint(model, (run_dir / "checkpoint.sckp").string());

  const scl::EvalResult result =
      scl::evaluate(model, dataset.test, dataset.meta, cfg.trimap_widths);
  write_metrics_csv(run_dir / "metrics.csv", result.metrics);
  write_trimap_csv(run_dir / "trimap.csv", result.trimap);
  std::printf("final: pixel_acc %.4f  mean_acc %.4f  mean_iou %.4f  fw_iou %.4f\n",
              result.metrics.pixel_acc, result.metrics.mean_acc, result.metrics.mean_iou,
              result.metrics.fw_iou);
  return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& widths_flag,
             const std::string& out) {
  std::vector<int> widths;
  for (const auto& part : CLI::detail::split(widths_flag, ','))
    widths.push_back(std::stoi(part));

  scl::CheckpointInfo info;
  scl::Model<float> model = scl::load_checkpoint<float>(ckpt, nullptr, &info);
  const scl::Dataset dataset = scl::read_dataset(data);

  const fs::path run_dir = make_run_dir(out, info.seed);
  const scl::EvalResult result = scl::evaluate(model, dataset.test, dataset.meta, widths);
  write_metrics_csv(run_dir / "metrics.csv", result.metrics);
  write_trimap_csv(run_dir / "trimap.csv", result.trimap);

  std::printf("pixel_acc %.6f\nmean_acc  %.6f\nmean_iou  %.6f\nfw_iou    %.6f\n",
              result.metrics.pixel_acc, result.metrics.mean_acc, result.metrics.mean_iou,
              result.metrics.fw_iou);
  for (size_t i = 0; i < result.trimap.widths.size(); ++i)
    std::printf("trimap w=%d  %.6f\n", result.trimap.widths[i], result.trimap.fractions[i]);
  std::printf("wrote %s\n", run_dir.string().c_str());
  return kExitOk;
}

int cmd_fuse(const std::string& ckpt, const std::string& out) {
  scl::CheckpointInfo info;
  scl::Model<float> model = scl::load_checkpoint<float>(ckpt, nullptr, &info);

  // Deterministic probe batch for the drift report.
  scl::Xoshiro256 rng(scl::derive_seed(info.seed, 0xF00Dull));
  scl::Tensor<float> probe({2, model.spec.input_channels, 32, 32});
  for (scl::i64 i = 0; i < probe.size(); ++i)
    probe[i] = static_cast<float>(rng.normal());
  const scl::Tensor<float> base_logits = model.forward(probe);

  for (size_t l = 0; l < model.layers.size(); ++l) {
    if (!model.layers[l].sc) continue;
    scl::Model<float> partial = model;
    scl::FusedConv<float> fused = scl::fuse(*partial.layers[l].sc);
    partial.layers[l].sc.reset();
    partial.layers[l].spec.kind = scl::LayerKind::conv;
    partial.spec.layers[l].kind = scl::LayerKind::conv;
    partial.layers[l].kernel = std::move(fused.kernel);
    partial.layers[l].bias = std::move(fused.bias);
    const double drift = scl::max_abs_diff(partial.forward(probe), base_logits);
    std::printf("layer %2zu (%s): max |logit| drift after fusing %.3e\n", l,
                scl::to_string(model.spec.layers[l].kind), drift);
  }

  scl::Model<float> fused = scl::fuse_model(model);
  const double total_drift = scl::max_abs_diff(fused.forward(probe), base_logits);
  std::printf("fully fused: max |logit| drift %.3e\n", total_drift);

  scl::save_checkpoint(fused, out, nullptr, /*fused=*/true);
  std::printf("wrote fused checkpoint %s\n", out.c_str());
  return kExitOk;
}

int cmd_bench(const std::string& dims, int kernel, int cout_channels, int runs,
              const std::string& out) {
  const auto parts = CLI::detail::split(dims, ',');
  if (parts.size() != 4) throw ConfigError("--dims expects N,C,H,W");
  scl::BenchCase bc;
  bc.batch = std::stoll(parts[0]);
  const int c_in = std::stoi(parts[1]);
  bc.height = std::stoll(parts[2]);
  bc.width = std::stoll(parts[3]);
  bc.cfg = scl::ConvConfig{kernel, kernel, 1, 1, kernel / 2, kernel / 2,
                           c_in, cout_channels, true};
  bc.runs = runs;
  bc.name = dims + "-k" + std::to_string(kernel) + "-co" + std::to_string(cout_channels);

  const std::vector<scl::BenchEntry> entries = scl::bench_forward(bc, 42);
  for (const auto& e : entries)
    std::printf("%-24s %-18s median %10.1f us  iqr %8.1f us  flops %lld  params %lld\n",
                e.case_name.c_str(), scl::to_string(e.kind), e.median_us, e.iqr_us,
                static_cast<long long>(e.flops), static_cast<long long>(e.params));
  scl::append_bench_csv(out, entries);
  std::printf("appended to %s\n", out.c_str());
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, double eps, double tol, int instances) {
  std::printf("%-10s %-10s %-10s %-10s %-10s %-10s %s\n", "instance", "kernel", "wb", "ws",
              "bias", "input", "status");
  bool ok = true;
  for (int i = 0; i < instances; ++i) {
    const scl::LayerGradCheck r =
        scl::gradcheck_shapeconv_layer(seed + static_cast<std::uint64_t>(i), eps);
    const bool pass = r.worst() <= tol;
    ok = ok && pass;
    std::printf("%-10d %-10.2e %-10.2e %-10.2e %-10.2e %-10.2e %s\n", i, r.kernel,
                r.base_weight, r.shape_weight, r.bias, r.input, pass ? "pass" : "FAIL");
  }
  for (const scl::LayerKind kind : {scl::LayerKind::shapeconv, scl::LayerKind::conv}) {
    const double worst = scl::gradcheck_network(seed + 1000, eps, kind);
    const bool pass = worst <= tol;
    ok = ok && pass;
    std::printf("%-10s %-54.2e %s\n",
                kind == scl::LayerKind::shapeconv ? "net-sc" : "net-conv", worst,
                pass ? "pass" : "FAIL");
  }
  return ok ? kExitOk : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ShapeConv: shape-aware convolution library tools"};
  app.require_subcommand(1);

  int exit_code = kExitOk;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic RGB-D dataset");
  std::string gen_out;
  std::uint64_t gen_seed = 7;
  int gen_train_n = 800, gen_test_n = 200, gen_h = 64, gen_w = 64;
  std::string gen_shift_train = "0:1", gen_shift_test = "2.5:3.5";
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--train-n", gen_train_n, "Training samples");
  gen->add_option("--test-n", gen_test_n, "Test samples");
  gen->add_option("--shift-train", gen_shift_train, "Train depth-offset range lo:hi");
  gen->add_option("--shift-test", gen_shift_test, "Test depth-offset range lo:hi");
  gen->add_option("--height", gen_h, "Raster height");
  gen->add_option("--width", gen_w, "Raster width");
  gen->callback([&] {
    exit_code = cmd_gen_data(gen_out, gen_seed, gen_train_n, gen_test_n, gen_shift_train,
                             gen_shift_test, gen_h, gen_w);
  });

  // train
  auto* tr = app.add_subcommand("train", "Train a segmentation model");
  std::string tr_config, tr_data, tr_out, tr_layer;
  bool tr_freeze_wb = false, tr_freeze_ws = false;
  tr->add_option("--config", tr_config, "Run config JSON");
  tr->add_option("--data", tr_data, "Dataset directory (overrides config)");
  tr->add_option("--out", tr_out, "Output directory for the run")->required();
  tr->add_option("--layer", tr_layer, "Layer kind: vanilla or shapeconv");
  tr->add_flag("--freeze-wb", tr_freeze_wb, "Freeze the base weight");
  tr->add_flag("--freeze-ws", tr_freeze_ws, "Freeze the shape weight");
  tr->callback([&] {
    exit_code = cmd_train(tr_config, tr_data, tr_out, tr_layer, tr_freeze_wb, tr_freeze_ws);
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset's test split");
  std::string ev_ckpt, ev_data, ev_widths = "1,2,3,4,6,8", ev_out = ".";
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--trimap-widths", ev_widths, "Comma-separated band widths");
  ev->add_option("--out", ev_out, "Output directory");
  ev->callback([&] { exit_code = cmd_eval(ev_ckpt, ev_data, ev_widths, ev_out); });

  // fuse
  auto* fu = app.add_subcommand("fuse", "Fold shapeconv layers into plain convolutions");
  std::string fu_ckpt, fu_out;
  fu->add_option("--ckpt", fu_ckpt, "Checkpoint file")->required();
  fu->add_option("--out", fu_out, "Fused checkpoint path")->required();
  fu->callback([&] { exit_code = cmd_fuse(fu_ckpt, fu_out); });

  // bench
  auto* be = app.add_subcommand("bench", "Time vanilla vs shapeconv forward passes");
  std::string be_dims = "1,32,64,64", be_out = "bench.csv";
  int be_kernel = 3, be_cout = 32, be_runs = 50;
  be->add_option("--dims", be_dims, "Input as N,C,H,W");
  be->add_option("--kernel", be_kernel, "Kernel extent");
  be->add_option("--cout", be_cout, "Output channels");
  be->add_option("--runs", be_runs, "Timed runs per kind (>= 30)");
  be->add_option("--out", be_out, "CSV report path (appended)");
  be->callback([&] { exit_code = cmd_bench(be_dims, be_kernel, be_cout, be_runs, be_out); });

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  std::uint64_t gc_seed = 1;
  double gc_eps = 1e-5, gc_tol = 1e-4;
  int gc_instances = 20;
  gc->add_option("--seed", gc_seed, "Base seed");
  gc->add_option("--eps", gc_eps, "Central-difference step");
  gc->add_option("--tol", gc_tol, "Relative error tolerance");
  gc->add_option("--instances", gc_instances, "Random layer instances");
  gc->callback([&] { exit_code = cmd_gradcheck(gc_seed, gc_eps, gc_tol, gc_instances); });

  // selftest
  auto* st = app.add_subcommand("selftest", "Run the numerical property suite");
  st->callback([&] { exit_code = scl::run_selftest(std::cout) ? kExitOk : kExitNumerical; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return exit_code;
}
