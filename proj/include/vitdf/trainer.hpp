#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitdf/autodiff.hpp"
#include "vitdf/data.hpp"
#include "vitdf/vit.hpp"

namespace vitdf {

inline constexpr double kProbabilityFloor = 1e-12;

/// Exactly one entry is 1, the rest 0.
class OneHotTarget {
 public:
  /// Throws DataError when `y` is not a one-hot vector.
  explicit OneHotTarget(Tensor y);
  static OneHotTarget of(Label label, std::size_t num_classes = 2);
  static OneHotTarget of_index(std::size_t index, std::size_t num_classes);

  const Tensor& tensor() const { return y_; }
  std::size_t index() const { return index_; }
  std::size_t num_classes() const { return y_.size(); }

 private:
  Tensor y_;
  std::size_t index_ = 0;
};

/// L = -sum_i y_i log(max(p_i, 1e-12)).
double cross_entropy(const Tensor& probs, const OneHotTarget& target);
Var cross_entropy(const Var& probs, const OneHotTarget& target);

struct OptimizerConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// L2 penalty folded into the gradient; 0 disables.
  double weight_decay = 0.0;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;

  void validate() const;
};

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update on raw storage. `t` is the step number
/// after incrementing (1 for the first update).
void adam_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::uint64_t t, const OptimizerConfig& cfg);

/// Updates every parameter named in `params` from `grads`. Gradients are
/// validated before anything changes: a missing, misshapen or non-finite
/// gradient aborts the step with parameters and state untouched.
void adam_step(ModelParameters& params, const GradientMap& grads, AdamState& state, const OptimizerConfig& cfg);

struct MetricsRecord {
  std::size_t epoch = 0;
  std::string split;  // split the evaluation figures refer to
  std::optional<double> train_loss;
  std::optional<double> val_loss;
  std::optional<double> accuracy;
  double samples_per_sec = 0.0;
  double steps_per_sec = 0.0;
  double eval_runtime_sec = 0.0;
  std::size_t samples = 0;
  std::size_t correct = 0;

  nlohmann::ordered_json to_json() const;
};

/// Appends `record` as one JSON line.
void append_metrics_line(const std::filesystem::path& path, const MetricsRecord& record);

enum class LrSchedule { Constant, Linear };

struct TrainRunConfig {
  OptimizerConfig optimizer;
  LrSchedule schedule = LrSchedule::Constant;
  std::size_t epochs = 2;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  /// Stop after this many optimizer steps, if set.
  std::optional<std::size_t> max_steps;
  /// Worker threads for validation passes.
  std::size_t eval_threads = 1;
  /// Best-validation-loss checkpoint destination, if any.
  std::optional<std::filesystem::path> checkpoint_path;
  /// Per-epoch JSON-lines metrics log, if any.
  std::optional<std::filesystem::path> metrics_log_path;
};

struct TrainResult {
  std::vector<MetricsRecord> history;
  ModelParameters params;
  std::optional<std::size_t> best_epoch;
  std::size_t steps = 0;
};

struct TrainCallbacks {
  std::function<void(const MetricsRecord&)> on_epoch;
  std::function<void(std::size_t step, double batch_loss)> on_step;
};

/// Mean cross-entropy of one batch and its parameter gradients (averaged
/// over samples, one tape per sample).
struct BatchGradients {
  double loss = 0.0;
  std::size_t correct = 0;
  GradientMap grads;
};
BatchGradients batch_gradients(const ViTConfig& config, const ModelParameters& params, const Batch& batch,
                               RandomSource* dropout_rng = nullptr);

TrainResult train(const ViTConfig& config, ModelParameters params, const SampleSet& train_set, const SampleSet& val_set,
                  const TrainRunConfig& run, const TrainCallbacks& callbacks = {});

/// Accuracy (argmax, ties to class 0), mean cross-entropy and wall-clock
/// throughput over `samples`. Batches may be sharded across `threads`; the
/// reduction order is fixed so results do not depend on the thread count.
MetricsRecord evaluate(const ViTConfig& config, const ModelParameters& params, const SampleSet& samples,
                       std::size_t batch_size = 16, std::size_t threads = 1);

}  // namespace vitdf
