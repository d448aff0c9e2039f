#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cmfd/checkpoint.hpp"
#include "cmfd/config.hpp"
#include "cmfd/image_io.hpp"
#include "cmfd/metrics.hpp"
#include "cmfd/oracles/selfcheck.hpp"
#include "cmfd/synth.hpp"
#include "cmfd/train.hpp"

namespace fs = std::filesystem;
using namespace cmfd;

namespace {

constexpr int kExitSelfcheck = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

Tensor<float> resize_chw(const Tensor<float>& x, int h, int w) {
  if (x.dim(x.rank() - 2) == h && x.dim(x.rank() - 1) == w) return x;
  const int c = x.rank() == 3 ? x.dim(0) : 1;
  Graph<float> g(false);
  auto v = g.constant(x.reshaped({1, c, x.dim(x.rank() - 2), x.dim(x.rank() - 1)}));
  auto out = resize_bilinear(v, h, w).value();
  return x.rank() == 3 ? out.reshaped({c, h, w}) : out.reshaped({h, w});
}

Tensor<float> binarize(Tensor<float> x) {
  for (float& v : x.data()) v = v >= 0.5f ? 1.0f : 0.0f;
  return x;
}

Sample fit_sample(Sample s, int size) {
  s.image = resize_chw(s.image, size, size);
  s.mask = binarize(resize_chw(s.mask, size, size));
  return s;
}

void write_json(const fs::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<std::string> split_ids(const Manifest& m, const std::string& split) {
  if (split == "train") return m.train;
  if (split == "test") return m.test;
  std::vector<std::string> all = m.test;
  all.insert(all.end(), m.train.begin(), m.train.end());
  return all;
}

// Probability map at the image's own resolution.
Tensor<float> predict_full(const Model<float>& model, const Tensor<float>& image) {
  const int size = model.config().input_size;
  const int h = image.dim(1), w = image.dim(2);
  auto in = resize_chw(image, size, size).reshaped({1, 3, size, size});
  auto prob = model.predict(in).reshaped({size, size});
  return resize_chw(prob, h, w);
}

struct SynthArgs {
  std::string spec, config, out;
  std::optional<int> count, size;
  std::optional<std::uint64_t> seed;
  bool print_defaults = false;
};

int run_synth(const SynthArgs& a) {
  if (a.print_defaults) {
    std::cout << to_json(desk_defaults()).dump(2) << '\n';
    return 0;
  }
  CliConfig cfg = a.config.empty() ? desk_defaults() : load_cli_config(a.config);
  DatasetSpec spec = cfg.data;
  if (!a.spec.empty()) {
    std::ifstream in(a.spec);
    if (!in) throw ConfigError("cannot read spec " + a.spec);
    Json j;
    try {
      j = Json::parse(in);
    } catch (const Json::parse_error& e) {
      throw ConfigError(std::string("malformed spec: ") + e.what());
    }
    spec = dataset_spec_from_json(j, spec);
  }
  if (a.count) spec.count = *a.count;
  if (a.size) spec.image_size = *a.size;
  if (a.seed) spec.seed = *a.seed;
  spec.validate();
  const std::string out = !a.out.empty() ? a.out : cfg.data_dir;
  if (out.empty()) throw ConfigError("no output directory (--out)");
  std::cout << synth_generate(spec, out).string() << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, data, out, attention;
  bool no_cmd = false, no_msa = false, no_fd = false, quiet = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps, epochs;
};

int run_train(const TrainArgs& a) {
  CliConfig cfg = a.config.empty() ? desk_defaults() : load_cli_config(a.config);
  if (!a.data.empty()) cfg.data_dir = a.data;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.no_cmd) cfg.model.use_cmd = false;
  if (a.no_msa) cfg.model.use_msa = false;
  if (a.no_fd) cfg.model.use_fd = false;
  if (a.attention == "cbam") cfg.model.attention = AttentionKind::cbam;
  if (a.attention == "gab") cfg.model.attention = AttentionKind::gab;
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.steps) cfg.train.max_steps = *a.steps;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  cfg.validate();
  if (cfg.data_dir.empty() || !fs::is_directory(cfg.data_dir)) throw ConfigError("data directory not found: " + cfg.data_dir);
  if (cfg.out_dir.empty()) throw ConfigError("no output directory (--out)");

  const Manifest manifest = read_manifest(cfg.data_dir);
  const int size = cfg.model.input_size;
  auto load = [&](const std::vector<std::string>& ids) {
    auto samples = load_split(cfg.data_dir, ids);
    for (auto& s : samples) s = fit_sample(std::move(s), size);
    return samples;
  };
  const auto train = load(manifest.train);
  const auto val = load(manifest.test);

  fs::create_directories(cfg.out_dir);
  const fs::path out = cfg.out_dir;
  write_json(out / "config.json", to_json(cfg));

  Model<float> model(cfg.model, cfg.train.seed);
  TrainOutputs outputs;
  outputs.best_checkpoint = out / "best.ckpt";
  outputs.last_checkpoint = out / "last.ckpt";
  outputs.log = out / "train_log.jsonl";
  const auto t0 = std::chrono::steady_clock::now();
  if (!a.quiet) {
    outputs.on_epoch = [&](const EpochLog& e) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cout << "epoch " << e.epoch << "  lr " << e.lr << "  loss " << e.mean_loss << "  train_mdice "
                << e.train_mdice << "  val_mdice " << e.val_mdice << "  (" << s << "s)" << std::endl;
    };
  }
  const auto result = train_loop(model, train, val, cfg.train, cfg.augment, outputs);
  std::cout << "steps " << result.steps << "  best epoch " << result.best_epoch << "  best val_mdice "
            << result.best_val_mdice << '\n';
  return 0;
}

struct EvalArgs {
  std::string model, predictions, config, data, split = "test", report;
};

int run_eval(const EvalArgs& a) {
  if (a.model.empty() == a.predictions.empty()) throw ConfigError("exactly one of --model or --predictions is required");
  std::optional<CliConfig> cfg;
  if (!a.config.empty()) cfg = load_cli_config(a.config);
  std::string data = a.data;
  if (data.empty() && cfg) data = cfg->data_dir;
  if (data.empty() || !fs::is_directory(data)) throw ConfigError("data directory not found: " + data);

  std::unique_ptr<Model<float>> model;
  if (!a.model.empty()) {
    model = load_model(a.model);
    if (cfg && !(cfg->model == model->config()))
      throw ConfigError("checkpoint config does not match --config model section (checkpoint " +
                        to_json(model->config()).dump() + ")");
  }

  const Manifest manifest = read_manifest(data);
  const auto ids = split_ids(manifest, a.split);
  std::vector<Tensor<double>> preds, gts;
  for (const auto& id : ids) {
    const Sample s = load_sample(data, id);
    Tensor<float> pred;
    if (model) {
      pred = predict_full(*model, s.image);
    } else {
      pred = read_pgm(fs::path(a.predictions) / (id + ".pgm"));
      pred = resize_chw(pred, s.mask.dim(0), s.mask.dim(1));
    }
    preds.push_back(pred.cast<double>());
    gts.push_back(s.mask.cast<double>());
  }
  const auto report = evaluate_dataset(preds, gts, ids);
  if (!a.report.empty()) {
    std::ofstream out(a.report);
    if (!out) throw IoError("cannot write " + a.report);
    out << report.to_json() << '\n';
  }
  std::cout << report.to_table();
  return 0;
}

struct InferArgs {
  std::string model, image, out, prob;
};

int run_infer(const InferArgs& a) {
  const auto model = load_model(a.model);
  const Tensor<float> image = read_ppm(a.image);
  const Tensor<float> prob = predict_full(*model, image);
  write_mask(a.out, binarize(prob));
  if (!a.prob.empty()) write_pgm(a.prob, prob);
  return 0;
}

int run_selfcheck(bool corrupt) {
  const auto results = oracle::run_selfcheck(corrupt);
  std::cout << oracle::format_results(results);
  bool ok = true;
  for (const auto& r : results) ok = ok && r.passed;
  std::cout << (ok ? "selfcheck passed\n" : "selfcheck FAILED\n");
  return ok ? 0 : kExitSelfcheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Polyp segmentation: synthesis, training, evaluation and inference"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic lesion dataset");
  synth->add_flag("--print-defaults", sa.print_defaults, "print the default configuration JSON and exit");
  synth->add_option("--spec", sa.spec, "dataset spec JSON")->check(CLI::ExistingFile);
  synth->add_option("--config", sa.config, "configuration JSON (data section and paths)")->check(CLI::ExistingFile);
  synth->add_option("--count", sa.count, "number of samples");
  synth->add_option("--size", sa.size, "image side in pixels");
  synth->add_option("--seed", sa.seed, "dataset seed");
  synth->add_option("--out", sa.out, "output directory");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", ta.config, "configuration JSON")->check(CLI::ExistingFile);
  train->add_option("--data", ta.data, "dataset directory");
  train->add_option("--out", ta.out, "output directory");
  train->add_flag("--no-cmd", ta.no_cmd, "replace the CMD blocks with additive fusion");
  train->add_flag("--no-msa", ta.no_msa, "drop the MSA blocks");
  train->add_flag("--no-fd", ta.no_fd, "drop the FD block");
  train->add_option("--attention", ta.attention, "attention block")->check(CLI::IsMember({"gab", "cbam"}));
  train->add_option("--seed", ta.seed, "training seed");
  train->add_option("--steps", ta.steps, "optimiser step budget (0: unlimited)");
  train->add_option("--epochs", ta.epochs, "epoch count");
  train->add_flag("--quiet", ta.quiet, "no per-epoch output");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or a directory of predicted masks");
  eval->add_option("--model", ea.model, "checkpoint")->check(CLI::ExistingFile);
  eval->add_option("--predictions", ea.predictions, "directory of <id>.pgm prediction maps")->check(CLI::ExistingDirectory);
  eval->add_option("--config", ea.config, "configuration JSON the checkpoint must match")->check(CLI::ExistingFile);
  eval->add_option("--data", ea.data, "dataset directory");
  eval->add_option("--split", ea.split, "split to evaluate")->check(CLI::IsMember({"train", "test", "all"}));
  eval->add_option("--report", ea.report, "JSON report path");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "segment one image");
  infer->add_option("--model", ia.model, "checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--image", ia.image, "input PPM image")->required();
  infer->add_option("--out", ia.out, "output binary mask (PGM)")->required();
  infer->add_option("--prob", ia.prob, "optional probability map (PGM)");

  bool corrupt = false;
  auto* selfcheck = app.add_subcommand("selfcheck", "run the built-in oracle checks");
  selfcheck->add_flag("--corrupt-scan-table", corrupt, "test hook: corrupt one scan table first");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*synth) return run_synth(sa);
    if (*train) return run_train(ta);
    if (*eval) return run_eval(ea);
    if (*infer) return run_infer(ia);
    if (*selfcheck) return run_selfcheck(corrupt);
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}
