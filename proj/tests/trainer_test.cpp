#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "test_support.hpp"
#include "vitdf/checkpoint.hpp"
#include "vitdf/ops.hpp"
#include "vitdf/trainer.hpp"

using namespace vitdf;
using namespace vitdf::testing;
namespace fs = std::filesystem;

namespace {

bool same_parameters(const ModelParameters& a, const ModelParameters& b) {
  bool same = true;
  std::vector<const Tensor*> bs;
  b.for_each([&](const std::string&, const Tensor& t) { bs.push_back(&t); });
  std::size_t k = 0;
  a.for_each([&](const std::string&, const Tensor& t) { same = same && k < bs.size() && t == *bs[k++]; });
  return same && k == bs.size();
}

SampleSet constant_samples(std::size_t real, std::size_t fake, std::size_t size) {
  std::vector<Tensor> images;
  std::vector<Label> labels;
  for (std::size_t i = 0; i < real + fake; ++i) {
    images.push_back(formula_image(3, size));
    labels.push_back(i < real ? Label::Real : Label::Fake);
  }
  return SampleSet::from_tensors(std::move(images), std::move(labels));
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

}  // namespace

// ---- cross-entropy -------------------------------------------------------------

TEST(CrossEntropy, ClosedForms) {
  EXPECT_EQ(cross_entropy(Tensor::vector({1.0, 0.0}), OneHotTarget::of(Label::Real)), 0.0);
  EXPECT_NEAR(cross_entropy(Tensor::vector({0.5, 0.5}), OneHotTarget::of(Label::Real)), std::log(2.0), 1e-15);
  EXPECT_NEAR(cross_entropy(Tensor::vector({0.9115, 0.0885}), OneHotTarget::of(Label::Real)), 0.09266368486341935,
              1e-12);
  EXPECT_NEAR(cross_entropy(Tensor::vector({1.0, 0.0}), OneHotTarget::of(Label::Fake)), -std::log(1e-12), 1e-9);
}

TEST(CrossEntropy, MalformedTargetsRejected) {
  EXPECT_THROW(OneHotTarget(Tensor::vector({1.0, 1.0})), DataError);
  EXPECT_THROW(OneHotTarget(Tensor::vector({0.0, 0.0})), DataError);
  EXPECT_THROW(OneHotTarget(Tensor::vector({0.5, 0.5})), DataError);
  EXPECT_THROW(OneHotTarget(Tensor::vector({1.0})), DataError);
  EXPECT_THROW(OneHotTarget::of_index(2, 2), DataError);
  EXPECT_THROW(cross_entropy(Tensor::vector({0.2, 0.3, 0.5}), OneHotTarget::of(Label::Real)), ShapeError);
}

TEST(CrossEntropy, NonNegativeAndZeroOnlyAtCertainty) {
  RandomSource rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor logits = random_tensor({2}, rng, 3.0);
    Tensor p = softmax(logits, 0);
    const double l = cross_entropy(p, OneHotTarget::of_index(rng.index(2), 2));
    EXPECT_GE(l, 0.0);
  }
  EXPECT_GT(cross_entropy(Tensor::vector({0.999999, 0.000001}), OneHotTarget::of(Label::Real)), 0.0);
}

TEST(CrossEntropy, SoftmaxCompositeGradientIsProbabilityMinusTarget) {
  RandomSource rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 2 + rng.index(4);
    Tensor logits = random_tensor({c}, rng, 2.0);
    const OneHotTarget target = OneHotTarget::of_index(rng.index(c), c);
    Tape tape;
    Var z = tape.parameter("z", logits);
    GradientMap g = tape.backward(cross_entropy(softmax(z, 0), target));
    Tensor expected = softmax(logits, 0);
    expected.array() -= target.tensor().array();
    Tensor numeric = numeric_gradient(
        [&](const Tensor& x) { return cross_entropy(softmax(x, 0), target); }, logits, 1e-5);
    for (std::size_t i = 0; i < c; ++i) {
      EXPECT_NEAR(g.at("z")[i], expected[i], 1e-12);
      EXPECT_NEAR(g.at("z")[i], numeric[i], 1e-6);
    }
  }
}

// ---- Adam ----------------------------------------------------------------------

TEST(Adam, FirstStepMatchesHandComputation) {
  OptimizerConfig cfg;
  cfg.learning_rate = 1e-3;
  std::vector<double> theta{0.5}, m{0.0}, v{0.0};
  const std::vector<double> g{0.2};
  adam_update(theta, g, m, v, 1, cfg);
  EXPECT_NEAR(theta[0], 0.49900000005, 1e-12);
  EXPECT_NEAR(m[0], 0.02, 1e-15);
  EXPECT_NEAR(v[0], 0.00004, 1e-18);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ViTConfig cfg = tiny_config();
  ModelParameters p = init_parameters(cfg, RandomSource(2));
  const ModelParameters before = p;
  GradientMap zero;
  p.for_each([&](const std::string& name, const Tensor& t) { zero.grads[name] = Tensor::zeros(t.shape()); });
  AdamState state;
  for (int step = 1; step <= 5; ++step) {
    adam_step(p, zero, state, OptimizerConfig{});
    EXPECT_EQ(state.t, static_cast<std::uint64_t>(step));
  }
  EXPECT_TRUE(same_parameters(p, before));
}

TEST(Adam, NonFiniteGradientAbortsWithName) {
  ViTConfig cfg = tiny_config();
  ModelParameters p = init_parameters(cfg, RandomSource(2));
  const ModelParameters before = p;
  GradientMap grads;
  p.for_each([&](const std::string& name, const Tensor& t) { grads.grads[name] = Tensor::ones(t.shape()); });
  grads.grads["layers.1.mlp.fc1.bias"][3] = std::numeric_limits<double>::quiet_NaN();
  AdamState state;
  try {
    adam_step(p, grads, state, OptimizerConfig{});
    FAIL();
  } catch (const NonFiniteGradientError& e) {
    EXPECT_EQ(e.parameter(), "layers.1.mlp.fc1.bias");
    EXPECT_NE(std::string(e.what()).find("layers.1.mlp.fc1.bias"), std::string::npos);
  }
  EXPECT_EQ(state.t, 0u);
  EXPECT_TRUE(state.m.empty());
  EXPECT_TRUE(same_parameters(p, before));
}

TEST(Adam, ShapeAndPresenceChecked) {
  ViTConfig cfg = tiny_config();
  ModelParameters p = zero_parameters(cfg);
  GradientMap grads;
  p.for_each([&](const std::string& name, const Tensor& t) { grads.grads[name] = Tensor::zeros(t.shape()); });
  GradientMap wrong = grads;
  wrong.grads["head.bias"] = Tensor::zeros({3});
  AdamState state;
  EXPECT_THROW(adam_step(p, wrong, state, OptimizerConfig{}), ShapeError);
  GradientMap missing = grads;
  missing.grads.erase("class_token");
  EXPECT_THROW(adam_step(p, missing, state, OptimizerConfig{}), Error);
  OptimizerConfig bad;
  bad.beta1 = 1.0;
  EXPECT_THROW(adam_step(p, grads, state, bad), ConfigError);
}

TEST(Adam, ClipNormBoundsTheStepInput) {
  ModelParameters p = zero_parameters(tiny_config());
  GradientMap grads;
  p.for_each([&](const std::string& name, const Tensor& t) { grads.grads[name] = Tensor::ones(t.shape()); });
  grads.grads["head.bias"] = Tensor::vector({1000.0, 0.0});
  OptimizerConfig cfg;
  cfg.clip_norm = 1.0;
  AdamState state;
  adam_step(p, grads, state, cfg);
  double norm_sq = 0.0;
  for (const auto& [name, m] : state.m) norm_sq += m.array().square().sum();
  // m after one step is (1 - beta1) * clipped gradient.
  EXPECT_NEAR(std::sqrt(norm_sq), 0.1, 1e-12);
}

// ---- batch gradients -------------------------------------------------------------

TEST(BatchGradients, MeanOfPerSampleGradients) {
  ViTConfig cfg = tiny_config();
  ModelParameters params = random_parameters(cfg, RandomSource(4), 0.2);
  SampleSet samples = synthetic_samples(2, 8, 6);
  Batch batch = *make_batches(samples, 4, false, RandomSource(0), 0).next();

  Tape tape;
  ModelVars vars = bind(tape, params, true);
  std::vector<Var> losses;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    losses.push_back(cross_entropy(forward(tape, batch.image(b), cfg, vars), OneHotTarget(batch.target(b))));
  }
  Var mean = scale(add_n(losses), 1.0 / static_cast<double>(batch.size()));
  GradientMap joint = tape.backward(mean);

  BatchGradients bg = batch_gradients(cfg, params, batch);
  EXPECT_NEAR(bg.loss, mean.value()[0], 1e-12);
  for (const auto& [name, g] : joint.grads) {
    EXPECT_LT(max_abs_diff(g, bg.grads.at(name)), 1e-12) << name;
  }
}

// ---- training loop ----------------------------------------------------------------

TEST(Train, ZeroEpochsReturnsInitialParameters) {
  ViTConfig cfg = tiny_config();
  ModelParameters init = init_parameters(cfg, RandomSource(1));
  TrainRunConfig run;
  run.epochs = 0;
  TrainResult r = train(cfg, init, synthetic_samples(2, 8, 1), SampleSet::from_tensors({}, {}), run);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.steps, 0u);
  EXPECT_TRUE(same_parameters(r.params, init));
}

TEST(Train, ZeroLearningRateKeepsParametersBitIdentical) {
  ViTConfig cfg = tiny_config();
  ModelParameters init = init_parameters(cfg, RandomSource(1));
  TrainRunConfig run;
  run.epochs = 2;
  run.batch_size = 3;
  run.optimizer.learning_rate = 0.0;
  TrainResult r = train(cfg, init, synthetic_samples(4, 8, 1), synthetic_samples(1, 8, 2), run);
  EXPECT_EQ(r.steps, 6u);
  EXPECT_TRUE(same_parameters(r.params, init));
  ASSERT_EQ(r.history.size(), 2u);
  EXPECT_EQ(*r.history[0].val_loss, *r.history[1].val_loss);
}

TEST(Train, DeterministicAcrossRuns) {
  ViTConfig cfg = tiny_config();
  cfg.dropout_rate = 0.1;
  TrainRunConfig run;
  run.epochs = 2;
  run.batch_size = 4;
  run.seed = 9;
  run.optimizer.learning_rate = 1e-3;
  auto once = [&] {
    return train(cfg, init_parameters(cfg, RandomSource(9)), synthetic_samples(5, 8, 3), synthetic_samples(2, 8, 4),
                 run);
  };
  TrainResult a = once(), b = once();
  EXPECT_TRUE(same_parameters(a.params, b.params));
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
    EXPECT_EQ(a.history[e].val_loss, b.history[e].val_loss);
    EXPECT_EQ(a.history[e].accuracy, b.history[e].accuracy);
  }
}

TEST(Train, LossDecreasesOnSeparableData) {
  ViTConfig cfg = tiny_config();
  TrainRunConfig run;
  run.epochs = 2;
  run.batch_size = 4;
  run.seed = 1;
  run.optimizer.learning_rate = 1e-3;
  TrainResult r = train(cfg, init_parameters(cfg, RandomSource(1)), synthetic_samples(8, 8, 5),
                        SampleSet::from_tensors({}, {}), run);
  ASSERT_EQ(r.history.size(), 2u);
  EXPECT_LT(*r.history[1].train_loss, *r.history[0].train_loss);
  // No validation set: selection falls back to training loss.
  EXPECT_EQ(r.best_epoch, std::optional<std::size_t>(2));
}

TEST(Train, WritesMetricsAndBestCheckpoint) {
  fs::path dir = scratch_dir("train_outputs");
  ViTConfig cfg = tiny_config();
  TrainRunConfig run;
  run.epochs = 3;
  run.batch_size = 4;
  run.optimizer.learning_rate = 1e-3;
  run.checkpoint_path = dir / "best.vitc";
  run.metrics_log_path = dir / "metrics.jsonl";
  std::vector<std::size_t> seen_epochs;
  std::size_t steps_seen = 0;
  TrainCallbacks cb{[&](const MetricsRecord& m) { seen_epochs.push_back(m.epoch); },
                    [&](std::size_t, double) { ++steps_seen; }};
  TrainResult r = train(cfg, init_parameters(cfg, RandomSource(3)), synthetic_samples(4, 8, 3),
                        synthetic_samples(2, 8, 8), run, cb);
  EXPECT_EQ(seen_epochs, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(steps_seen, r.steps);
  auto lines = read_lines(dir / "metrics.jsonl");
  ASSERT_EQ(lines.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    auto j = nlohmann::json::parse(lines[i]);
    EXPECT_EQ(j["epoch"], i + 1);
    EXPECT_EQ(j["split"], "val");
    EXPECT_TRUE(j["train_loss"].is_number());
    EXPECT_TRUE(j["val_loss"].is_number());
    EXPECT_GE(j["accuracy"].get<double>(), 0.0);
    EXPECT_LE(j["accuracy"].get<double>(), 1.0);
    EXPECT_GT(j["samples_per_sec"].get<double>(), 0.0);
  }
  ASSERT_TRUE(r.best_epoch.has_value());
  double best = std::numeric_limits<double>::infinity();
  for (const auto& m : r.history) best = std::min(best, *m.val_loss);
  EXPECT_EQ(*r.history[*r.best_epoch - 1].val_loss, best);
  Checkpoint ck = load_checkpoint(dir / "best.vitc");
  EXPECT_EQ(ck.config, cfg);
  if (*r.best_epoch == 3) EXPECT_TRUE(same_parameters(ck.params, quantize_f32(r.params)));
}

TEST(Train, MaxStepsAndLinearSchedule) {
  ViTConfig cfg = tiny_config();
  TrainRunConfig run;
  run.epochs = 5;
  run.batch_size = 2;
  run.max_steps = 3;
  run.schedule = LrSchedule::Linear;
  run.optimizer.learning_rate = 1e-3;
  TrainResult r = train(cfg, init_parameters(cfg, RandomSource(3)), synthetic_samples(2, 8, 3),
                        SampleSet::from_tensors({}, {}), run);
  EXPECT_EQ(r.steps, 3u);
  EXPECT_EQ(r.history.size(), 2u);
}

TEST(Train, ErrorsCarryBatchContext) {
  ViTConfig cfg = tiny_config();
  std::vector<Tensor> images{formula_image(3, 8), formula_image(3, 8), formula_image(3, 16)};
  SampleSet bad = SampleSet::from_tensors(images, {Label::Real, Label::Fake, Label::Real});
  TrainRunConfig run;
  run.epochs = 1;
  run.batch_size = 1;
  try {
    train(cfg, zero_parameters(cfg), bad, SampleSet::from_tensors({}, {}), run);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, batch"), std::string::npos) << e.what();
  }
}

TEST(Train, NonFiniteInputAbortsNamingAParameter) {
  ViTConfig cfg = tiny_config();
  Tensor img = formula_image(3, 8);
  img[5] = std::numeric_limits<double>::quiet_NaN();
  SampleSet bad = SampleSet::from_tensors({img}, {Label::Fake});
  TrainRunConfig run;
  run.epochs = 1;
  EXPECT_THROW(train(cfg, init_parameters(cfg, RandomSource(1)), bad, SampleSet::from_tensors({}, {}), run),
               NonFiniteGradientError);
}

// ---- evaluation ---------------------------------------------------------------------

TEST(Evaluate, AccuracyArithmetic) {
  ViTConfig cfg = tiny_config();
  // The zero model is undecided, so ties send every sample to Real.
  MetricsRecord all = evaluate(cfg, zero_parameters(cfg), constant_samples(8, 0, 8));
  EXPECT_EQ(*all.accuracy, 1.0);
  MetricsRecord most = evaluate(cfg, zero_parameters(cfg), constant_samples(792, 8, 8), 16);
  EXPECT_EQ(most.samples, 800u);
  EXPECT_EQ(most.correct, 792u);
  EXPECT_DOUBLE_EQ(*most.accuracy, 0.99);
  EXPECT_NEAR(*most.val_loss, std::log(2.0), 1e-12);
  EXPECT_GT(most.eval_runtime_sec, 0.0);
  EXPECT_NEAR(most.samples_per_sec * most.eval_runtime_sec, 800.0, 1e-6);
  EXPECT_NEAR(most.steps_per_sec * most.eval_runtime_sec, 50.0, 1e-6);
}

TEST(Evaluate, ThreadCountDoesNotChangeResults) {
  ViTConfig cfg = tiny_config();
  ModelParameters p = init_parameters(cfg, RandomSource(5));
  SampleSet s = synthetic_samples(11, 8, 5);
  MetricsRecord one = evaluate(cfg, p, s, 3, 1);
  for (std::size_t threads : {2u, 3u, 8u}) {
    MetricsRecord many = evaluate(cfg, p, s, 3, threads);
    EXPECT_EQ(*many.val_loss, *one.val_loss);
    EXPECT_EQ(many.correct, one.correct);
  }
}

TEST(Evaluate, EmptySplitIsAnError) {
  ViTConfig cfg = tiny_config();
  EXPECT_THROW(evaluate(cfg, zero_parameters(cfg), SampleSet::from_tensors({}, {})), DataError);
}

TEST(Metrics, JsonFieldOrder) {
  MetricsRecord m;
  m.epoch = 1;
  m.train_loss = 0.5;
  const nlohmann::ordered_json j = m.to_json();
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"epoch", "split", "train_loss", "val_loss", "accuracy", "samples_per_sec",
                                            "steps_per_sec", "eval_runtime_sec", "samples", "correct"}));
  EXPECT_TRUE(j["val_loss"].is_null());
}
