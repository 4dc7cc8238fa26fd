// vitdf: prepare / train / eval / predict front end.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vitdf/checkpoint.hpp"
#include "vitdf/data.hpp"
#include "vitdf/image.hpp"
#include "vitdf/trainer.hpp"
#include "vitdf/vit.hpp"

namespace fs = std::filesystem;
using namespace vitdf;

namespace {

// Fills options of `cmd` that were not given on the command line from a flat
// JSON object keyed by long flag name, e.g. {"epochs": 3, "batch-size": 8}.
// CLI11's own config support only runs for the top-level app.
void apply_json_config(CLI::App* cmd, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config '" + path + "' must be a flat JSON object");
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = key == "config" ? nullptr : cmd->get_option_no_throw("--" + key);
    if (!opt) throw ConfigError("unknown config key '" + key + "'");
    if (opt->count() > 0) continue;
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_boolean()) {
      text = value.get<bool>() ? "true" : "false";
    } else if (value.is_number()) {
      text = value.dump();
    } else {
      throw ConfigError("config key '" + key + "' must be a string, number or boolean");
    }
    try {
      opt->add_result(text);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// ---- prepare -----------------------------------------------------------------

struct PrepareArgs {
  std::string data_dir;
  std::string out;
  std::uint64_t seed = 0;
  std::string ratio = "14:4:1";
  bool oversample = false;
};

void print_counts(const DatasetManifest& m) {
  std::cout << "class  train    val   test\n";
  for (Label l : {Label::Real, Label::Fake}) {
    char line[96];
    std::snprintf(line, sizeof(line), "%-5s %6zu %6zu %6zu\n", std::string(label_key(l)).c_str(),
                  m.count(l, Split::Train), m.count(l, Split::Val), m.count(l, Split::Test));
    std::cout << line;
  }
}

int run_prepare(const PrepareArgs& a) {
  const SplitRatio ratio = SplitRatio::parse(a.ratio);
  DatasetManifest m = scan_dataset(a.data_dir);
  for (const auto& w : m.warnings) std::cerr << "warning: skipped " << w << "\n";
  m = stratified_split(std::move(m), ratio, a.seed);
  if (a.oversample) {
    const std::size_t before = m.records.size();
    m = oversample(std::move(m), a.seed);
    std::cout << "oversampled train: " << (m.records.size() - before) << " duplicates added\n";
  }
  m.save(a.out);
  print_counts(m);
  std::cout << "manifest: " << a.out << "\n";
  return 0;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string preset = "vit-base-patch16-224";
  std::size_t epochs = 2;
  double lr = OptimizerConfig{}.learning_rate;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::string out_dir = "vitdf-run";
  bool augment = true;
  std::optional<std::size_t> max_steps;
  std::size_t eval_threads = 1;
  double weight_decay = 0.0;
  double clip_norm = 0.0;
  std::string lr_schedule = "constant";
  std::optional<double> dropout;
  std::optional<std::size_t> image_size, patch_size, embed_dim, heads, layers, mlp_dim;
};

ViTConfig resolve_config(const TrainArgs& a) {
  ViTConfig c = ViTConfig::preset(a.preset);
  const bool custom = a.image_size || a.patch_size || a.embed_dim || a.heads || a.layers || a.mlp_dim;
  if (a.image_size) c.image_size = *a.image_size;
  if (a.patch_size) c.patch_size = *a.patch_size;
  if (a.embed_dim) c.embed_dim = *a.embed_dim;
  if (a.heads) c.num_heads = *a.heads;
  if (a.layers) c.num_layers = *a.layers;
  if (a.mlp_dim) c.mlp_dim = *a.mlp_dim;
  if (a.dropout) c.dropout_rate = *a.dropout;
  if (custom) c.name = a.preset + "-custom";
  c.validate();
  return c;
}

int run_train(const TrainArgs& a) {
  const ViTConfig config = resolve_config(a);
  TrainRunConfig run;
  run.optimizer.learning_rate = a.lr;
  run.optimizer.weight_decay = a.weight_decay;
  run.optimizer.clip_norm = a.clip_norm;
  run.optimizer.validate();
  if (a.lr_schedule == "linear") {
    run.schedule = LrSchedule::Linear;
  } else if (a.lr_schedule != "constant") {
    throw ConfigError("lr-schedule must be 'constant' or 'linear'");
  }
  if (a.batch_size == 0) throw ConfigError("batch-size must be at least 1");
  run.epochs = a.epochs;
  run.batch_size = a.batch_size;
  run.seed = a.seed;
  run.max_steps = a.max_steps;
  run.eval_threads = a.eval_threads;

  const DatasetManifest manifest = DatasetManifest::load(a.manifest);
  SampleSet::Options train_opts{config.image_size, std::nullopt, a.seed};
  if (a.augment) train_opts.augmentation = AugmentationSpec::standard();
  const SampleSet train_set = SampleSet::from_manifest(manifest, Split::Train, train_opts);
  const SampleSet val_set = SampleSet::from_manifest(manifest, Split::Val, {config.image_size, std::nullopt, a.seed});

  fs::create_directories(a.out_dir);
  const fs::path checkpoint = fs::path(a.out_dir) / "checkpoint.vitc";
  const fs::path metrics = fs::path(a.out_dir) / "metrics.jsonl";
  fs::remove(checkpoint);
  std::ofstream(metrics, std::ios::trunc).close();
  run.checkpoint_path = checkpoint;
  run.metrics_log_path = metrics;

  std::cout << "model " << config.name << " (" << config.parameter_count() << " parameters), " << train_set.size()
            << " train / " << val_set.size() << " val samples\n";
  std::cout << "Epoch | Training Loss | Validation Loss\n";
  TrainCallbacks cb;
  cb.on_epoch = [](const MetricsRecord& m) {
    char line[96];
    std::snprintf(line, sizeof(line), "%5zu | %13s | %15s\n", m.epoch,
                  m.train_loss ? fixed(*m.train_loss, 6).c_str() : "-", m.val_loss ? fixed(*m.val_loss, 6).c_str() : "-");
    std::cout << line << std::flush;
  };
  const TrainResult result = train(config, init_parameters(config, RandomSource(a.seed)), train_set, val_set, run, cb);

  std::cout << "steps: " << result.steps << "\n";
  if (result.best_epoch) {
    std::cout << "best epoch: " << *result.best_epoch << "\ncheckpoint: " << checkpoint.string() << "\n";
  } else {
    std::cout << "no checkpoint written\n";
  }
  std::cout << "metrics: " << metrics.string() << "\n";
  return 0;
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split = "test";
  std::size_t batch_size = 16;
  std::size_t threads = 1;
  std::string metrics_log;
};

int run_eval(const EvalArgs& a) {
  const Split split = [&] {
    try {
      return split_from_key(a.split);
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  }();
  if (a.batch_size == 0) throw ConfigError("batch-size must be at least 1");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const DatasetManifest manifest = DatasetManifest::load(a.manifest);
  const SampleSet samples = SampleSet::from_manifest(manifest, split, {ck.config.image_size, std::nullopt, manifest.seed});
  MetricsRecord m = evaluate(ck.config, ck.params, samples, a.batch_size, a.threads);
  m.split = a.split;

  const fs::path log = a.metrics_log.empty() ? fs::path(a.checkpoint).parent_path() / "metrics.jsonl" : fs::path(a.metrics_log);
  append_metrics_line(log, m);

  std::cout << "Split: " << a.split << " (" << m.samples << " samples, " << m.correct << " correct)\n";
  std::cout << "Evaluation Accuracy: " << fixed(*m.accuracy, 6) << "\n";
  std::cout << "Evaluation Loss: " << fixed(*m.val_loss, 6) << "\n";
  std::cout << "Samples/sec: " << fixed(m.samples_per_sec, 3) << "\n";
  std::cout << "Steps per second: " << fixed(m.steps_per_sec, 3) << "\n";
  std::cout << "Evaluation Runtime (s): " << fixed(m.eval_runtime_sec, 6) << "\n";
  return 0;
}

// ---- predict -----------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::vector<std::string> images;
};

std::optional<Label> label_from_layout(const fs::path& p) {
  const std::string dir = p.parent_path().filename().string();
  if (dir == "real") return Label::Real;
  if (dir == "fake") return Label::Fake;
  return std::nullopt;
}

int run_predict(const PredictArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    const fs::path path = a.images[i];
    const ClassProbabilities cp = predict(preprocess(read_image(path), ck.config.image_size), ck.config, ck.params);
    if (i > 0) std::cout << "\n";
    if (auto original = label_from_layout(path)) std::cout << "Original Label: " << label_name(*original) << "\n";
    std::cout << "Real Prob: " << fixed(cp.real_prob, 4) << "\n";
    std::cout << "Fake Prob: " << fixed(cp.fake_prob, 4) << "\n";
    std::cout << "Predicted Label: " << label_name(cp.predicted_label) << "\n";
    std::cout << "Model: " << ck.config.name << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision Transformer real/fake face image classifier"};
  app.require_subcommand(1);

  PrepareArgs prep;
  CLI::App* prepare = app.add_subcommand("prepare", "Scan <dir>/real and <dir>/fake, split and write a manifest");
  prepare->add_option("--data-dir", prep.data_dir, "Dataset root")->required();
  prepare->add_option("--out", prep.out, "Manifest JSON to write")->required();
  prepare->add_option("--seed", prep.seed, "Shuffle seed")->capture_default_str();
  prepare->add_option("--ratio", prep.ratio, "Train:val:test ratio")->capture_default_str();
  prepare->add_flag("--oversample", prep.oversample, "Duplicate minority-class train records until balanced");

  TrainArgs tr;
  CLI::App* train_cmd = app.add_subcommand("train", "Train from a manifest; writes checkpoint and metrics log");
  std::string train_config;
  train_cmd->add_option("--config", train_config, "Flat JSON file of flag values (flags override it)");
  train_cmd->add_option("--manifest", tr.manifest, "Manifest JSON (required here or in --config)");
  train_cmd->add_option("--preset", tr.preset, "Model preset: " + CLI::detail::join(ViTConfig::preset_names(), ", "))
      ->capture_default_str();
  train_cmd->add_option("--epochs", tr.epochs)->capture_default_str();
  train_cmd->add_option("--lr", tr.lr, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--batch-size", tr.batch_size)->capture_default_str();
  train_cmd->add_option("--seed", tr.seed, "Seed for initialization, shuffling and augmentation")->capture_default_str();
  train_cmd->add_option("--out-dir", tr.out_dir)->capture_default_str();
  train_cmd->add_flag("--augment,!--no-augment", tr.augment, "Augment training images (default on)");
  train_cmd->add_option("--max-steps", tr.max_steps, "Stop after this many optimizer steps");
  train_cmd->add_option("--eval-threads", tr.eval_threads, "Threads for validation passes")->capture_default_str();
  train_cmd->add_option("--weight-decay", tr.weight_decay)->capture_default_str();
  train_cmd->add_option("--clip-norm", tr.clip_norm, "Global gradient-norm clip, 0 disables")->capture_default_str();
  train_cmd->add_option("--lr-schedule", tr.lr_schedule, "constant or linear")->capture_default_str();
  train_cmd->add_option("--dropout", tr.dropout, "Dropout rate on attention and MLP branches");
  train_cmd->add_option("--image-size", tr.image_size);
  train_cmd->add_option("--patch-size", tr.patch_size);
  train_cmd->add_option("--embed-dim", tr.embed_dim);
  train_cmd->add_option("--heads", tr.heads);
  train_cmd->add_option("--layers", tr.layers);
  train_cmd->add_option("--mlp-dim", tr.mlp_dim);

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on one manifest split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--manifest", ev.manifest)->required();
  eval_cmd->add_option("--split", ev.split, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--batch-size", ev.batch_size)->capture_default_str();
  eval_cmd->add_option("--threads", ev.threads)->capture_default_str();
  eval_cmd->add_option("--metrics-log", ev.metrics_log, "Defaults to metrics.jsonl next to the checkpoint");

  PredictArgs pr;
  CLI::App* predict_cmd = app.add_subcommand("predict", "Classify images as Real or Fake");
  predict_cmd->add_option("--checkpoint", pr.checkpoint)->required();
  predict_cmd->add_option("images", pr.images, "Image paths (PNG or JPEG)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (prepare->parsed()) return run_prepare(prep);
    if (train_cmd->parsed()) {
      if (!train_config.empty()) apply_json_config(train_cmd, train_config);
      if (tr.manifest.empty()) throw ConfigError("--manifest is required");
      return run_train(tr);
    }
    if (eval_cmd->parsed()) return run_eval(ev);
    if (predict_cmd->parsed()) return run_predict(pr);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\nRun with --help for more information.\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
