#include "vitdf/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <thread>

#include "vitdf/checkpoint.hpp"
#include "vitdf/ops.hpp"

namespace vitdf {

// ---- loss ------------------------------------------------------------------

OneHotTarget::OneHotTarget(Tensor y) : y_(std::move(y)) {
  if (y_.rank() != 1 || y_.size() < 2) throw DataError("one-hot target must be a vector of length >= 2, got " + y_.shape_string());
  std::size_t ones = 0;
  for (std::size_t i = 0; i < y_.size(); ++i) {
    if (y_[i] == 1.0) {
      ++ones;
      index_ = i;
    } else if (y_[i] != 0.0) {
      throw DataError("one-hot target entries must be 0 or 1");
    }
  }
  if (ones != 1) throw DataError("one-hot target must contain exactly one 1, found " + std::to_string(ones));
}

OneHotTarget OneHotTarget::of_index(std::size_t index, std::size_t num_classes) {
  if (index >= num_classes) throw DataError("class index " + std::to_string(index) + " out of range");
  Tensor y(Shape{num_classes});
  y[index] = 1.0;
  return OneHotTarget(std::move(y));
}

OneHotTarget OneHotTarget::of(Label label, std::size_t num_classes) {
  return of_index(static_cast<std::size_t>(label), num_classes);
}

double cross_entropy(const Tensor& probs, const OneHotTarget& target) {
  if (probs.size() != target.num_classes()) {
    throw ShapeError("cross_entropy: probabilities " + probs.shape_string() + " vs " +
                     std::to_string(target.num_classes()) + " classes");
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double y = target.tensor()[i];
    if (y != 0.0) loss -= y * std::log(std::max(probs[i], kProbabilityFloor));
  }
  return loss;
}

Var cross_entropy(const Var& probs, const OneHotTarget& target) {
  if (probs.value().size() != target.num_classes()) {
    throw ShapeError("cross_entropy: probabilities " + probs.value().shape_string() + " vs " +
                     std::to_string(target.num_classes()) + " classes");
  }
  Var y = probs.tape().constant(target.tensor().reshaped(probs.shape()));
  return scale(sum(mul(y, log_clamped(probs, kProbabilityFloor))), -1.0);
}

// ---- optimizer -------------------------------------------------------------

void OptimizerConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("invalid optimizer config: " + m); };
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be finite and >= 0");
  if (!(beta1 > 0.0 && beta1 < 1.0)) fail("beta1 must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) fail("beta2 must lie in (0, 1)");
  if (!(epsilon > 0.0)) fail("epsilon must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(clip_norm >= 0.0)) fail("clip_norm must be >= 0");
}

void adam_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::uint64_t t, const OptimizerConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad[i];
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    theta[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
  }
}

void adam_step(ModelParameters& params, const GradientMap& grads, AdamState& state, const OptimizerConfig& cfg) {
  cfg.validate();
  double norm_sq = 0.0;
  params.for_each([&](const std::string& name, const Tensor& p) {
    auto it = grads.grads.find(name);
    if (it == grads.grads.end()) throw Error("adam_step: no gradient for parameter '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw ShapeError("adam_step: gradient for '" + name + "' has shape " + it->second.shape_string() +
                       ", parameter is " + p.shape_string());
    }
    if (!it->second.all_finite()) throw NonFiniteGradientError(name);
    norm_sq += it->second.array().square().sum();
  });

  double clip_scale = 1.0;
  if (cfg.clip_norm > 0.0) {
    const double norm = std::sqrt(norm_sq);
    if (norm > cfg.clip_norm) clip_scale = cfg.clip_norm / norm;
  }

  ++state.t;
  params.for_each([&](const std::string& name, Tensor& p) {
    Tensor g = grads.grads.at(name);
    if (clip_scale != 1.0) g.array() *= clip_scale;
    if (cfg.weight_decay > 0.0) g.array() += cfg.weight_decay * p.array();
    auto [mit, m_new] = state.m.try_emplace(name, Tensor::zeros(p.shape()));
    auto [vit, v_new] = state.v.try_emplace(name, Tensor::zeros(p.shape()));
    adam_update(p.data(), g.data(), mit->second.data(), vit->second.data(), state.t, cfg);
  });
}

// ---- metrics ---------------------------------------------------------------

nlohmann::ordered_json MetricsRecord::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  return nlohmann::ordered_json{{"epoch", epoch},
                                {"split", split},
                                {"train_loss", opt(train_loss)},
                                {"val_loss", opt(val_loss)},
                                {"accuracy", opt(accuracy)},
                                {"samples_per_sec", samples_per_sec},
                                {"steps_per_sec", steps_per_sec},
                                {"eval_runtime_sec", eval_runtime_sec},
                                {"samples", samples},
                                {"correct", correct}};
}

void append_metrics_line(const std::filesystem::path& path, const MetricsRecord& record) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw Error("cannot append to metrics log '" + path.string() + "'");
  out << record.to_json().dump() << '\n';
}

// ---- training --------------------------------------------------------------

namespace {

std::size_t argmax(const Tensor& p) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i)
    if (p[i] > p[best]) best = i;
  return best;
}

}  // namespace

BatchGradients batch_gradients(const ViTConfig& config, const ModelParameters& params, const Batch& batch,
                               RandomSource* dropout_rng) {
  BatchGradients out;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Tape tape;
    ModelVars vars = bind(tape, params, true);
    std::optional<RandomSource> sample_rng;
    if (dropout_rng) sample_rng = dropout_rng->substream(b);
    Var probs = forward(tape, batch.image(b), config, vars, sample_rng ? &*sample_rng : nullptr);
    const OneHotTarget target(batch.target(b));
    Var loss = cross_entropy(probs, target);
    if (argmax(probs.value()) == target.index()) ++out.correct;
    out.loss += loss.value().item() * inv_n;
    GradientMap g = tape.backward(loss);
    if (b == 0) {
      out.grads.grads = std::move(g.grads);
      for (auto& [name, t] : out.grads.grads) t.array() *= inv_n;
    } else {
      for (auto& [name, t] : g.grads) out.grads.grads.at(name).array() += t.array() * inv_n;
    }
    out.grads.connected = out.grads.connected || g.connected;
  }
  return out;
}

MetricsRecord evaluate(const ViTConfig& config, const ModelParameters& params, const SampleSet& samples,
                       std::size_t batch_size, std::size_t threads) {
  if (samples.empty()) throw DataError("cannot evaluate an empty split");
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  config.validate();

  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = samples.size();
  const std::size_t num_batches = (n + batch_size - 1) / batch_size;
  std::vector<double> loss_sums(num_batches, 0.0);
  std::vector<std::size_t> corrects(num_batches, 0);

  auto run_batch = [&](std::size_t k) {
    const std::size_t lo = k * batch_size, hi = std::min(n, lo + batch_size);
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t i = lo; i < hi; ++i) {
      const Tensor probs = forward(samples.load(i), config, params);
      const OneHotTarget target = OneHotTarget::of(samples.label(i), config.num_classes);
      loss += cross_entropy(probs, target);
      if (argmax(probs) == target.index()) ++correct;
    }
    loss_sums[k] = loss;
    corrects[k] = correct;
  };

  threads = std::max<std::size_t>(1, std::min(threads, num_batches));
  if (threads == 1) {
    for (std::size_t k = 0; k < num_batches; ++k) run_batch(k);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    {
      std::vector<std::jthread> workers;
      for (std::size_t w = 0; w < threads; ++w) {
        workers.emplace_back([&, w] {
          try {
            for (std::size_t k = w; k < num_batches; k += threads) run_batch(k);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  double total_loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t k = 0; k < num_batches; ++k) {
    total_loss += loss_sums[k];
    correct += corrects[k];
  }
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  MetricsRecord rec;
  rec.samples = n;
  rec.correct = correct;
  rec.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  rec.val_loss = total_loss / static_cast<double>(n);
  rec.eval_runtime_sec = elapsed;
  rec.samples_per_sec = elapsed > 0.0 ? static_cast<double>(n) / elapsed : 0.0;
  rec.steps_per_sec = elapsed > 0.0 ? static_cast<double>(num_batches) / elapsed : 0.0;
  return rec;
}

TrainResult train(const ViTConfig& config, ModelParameters params, const SampleSet& train_set, const SampleSet& val_set,
                  const TrainRunConfig& run, const TrainCallbacks& callbacks) {
  config.validate();
  run.optimizer.validate();
  check_parameters(config, params);
  if (run.batch_size == 0) throw ConfigError("batch size must be at least 1");

  TrainResult result;
  if (run.epochs == 0) {
    result.params = std::move(params);
    return result;
  }
  if (train_set.empty()) throw DataError("cannot train on an empty split");

  const RandomSource root(run.seed);
  const std::size_t steps_per_epoch = (train_set.size() + run.batch_size - 1) / run.batch_size;
  std::size_t total_steps = steps_per_epoch * run.epochs;
  if (run.max_steps) total_steps = std::min(total_steps, *run.max_steps);

  AdamState state;
  double best = std::numeric_limits<double>::infinity();
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= run.epochs; ++epoch) {
    if (run.max_steps && step >= *run.max_steps) break;
    BatchStream stream = make_batches(train_set, run.batch_size, true, root, epoch, config.num_classes);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::size_t batch_index = 0;
    while (auto batch = stream.next()) {
      if (run.max_steps && step >= *run.max_steps) break;
      OptimizerConfig opt = run.optimizer;
      if (run.schedule == LrSchedule::Linear) {
        opt.learning_rate *= 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
      }
      std::optional<RandomSource> dropout_rng;
      if (config.dropout_rate > 0.0) dropout_rng = root.substream("dropout").substream(step);
      try {
        BatchGradients bg = batch_gradients(config, params, *batch, dropout_rng ? &*dropout_rng : nullptr);
        adam_step(params, bg.grads, state, opt);
        loss_sum += bg.loss * static_cast<double>(batch->size());
        seen += batch->size();
        if (callbacks.on_step) callbacks.on_step(step, bg.loss);
      } catch (const NonFiniteGradientError&) {
        throw;
      } catch (const Error& e) {
        throw Error("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) + ": " + e.what());
      }
      ++step;
      ++batch_index;
    }

    MetricsRecord rec;
    if (!val_set.empty()) {
      rec = evaluate(config, params, val_set, run.batch_size, run.eval_threads);
      rec.split = "val";
    }
    rec.epoch = epoch;
    if (seen > 0) rec.train_loss = loss_sum / static_cast<double>(seen);

    const std::optional<double> key = rec.val_loss ? rec.val_loss : rec.train_loss;
    if (key && *key < best) {
      best = *key;
      result.best_epoch = epoch;
      if (run.checkpoint_path) save_checkpoint(params, config, *run.checkpoint_path);
    }
    if (run.metrics_log_path) append_metrics_line(*run.metrics_log_path, rec);
    if (callbacks.on_epoch) callbacks.on_epoch(rec);
    result.history.push_back(std::move(rec));
  }
  result.steps = step;
  result.params = std::move(params);
  return result;
}

}  // namespace vitdf
