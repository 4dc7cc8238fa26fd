#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitdf/autodiff.hpp"
#include "vitdf/ops.hpp"
#include "vitdf/random.hpp"
#include "vitdf/tensor.hpp"

namespace vitdf {

/// Class index order used by every head, target and report.
enum class Label : int { Real = 0, Fake = 1 };

std::string_view label_name(Label l);  // "Real" / "Fake"
std::string_view label_key(Label l);   // "real" / "fake"
Label label_from_key(std::string_view key);

struct ViTConfig {
  std::string name = "custom";
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t channels = 3;
  std::size_t embed_dim = 768;
  std::size_t num_heads = 12;
  std::size_t num_layers = 12;
  std::size_t mlp_dim = 3072;
  std::size_t num_classes = 2;
  double dropout_rate = 0.0;
  double layer_norm_eps = 1e-6;

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;

  std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t sequence_length() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return embed_dim / num_heads; }

  /// Closed-form count of trainable scalars.
  std::size_t parameter_count() const;

  /// Known presets: "vit-base-patch16-224", "vit-tiny" (desk scale, s=8 p=4).
  static ViTConfig preset(std::string_view name);
  static std::vector<std::string> preset_names();

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

void to_json(nlohmann::ordered_json& j, const ViTConfig& c);
void from_json(const nlohmann::ordered_json& j, ViTConfig& c);

// Parameter structs are templated on the leaf type so the same layout serves
// stored weights (Tensor), recorded graph leaves (Var) and optimizer moments.

template <typename T>
struct BasicLinear {
  T weight;  // [in x out]
  T bias;    // [out]
};

template <typename T>
struct BasicLayerNorm {
  T gamma;
  T beta;
};

template <typename T>
struct BasicAttention {
  BasicLinear<T> query, key, value, output;
};

template <typename T>
struct BasicEncoderLayer {
  BasicLayerNorm<T> norm1;
  BasicAttention<T> attention;
  BasicLayerNorm<T> norm2;
  BasicLinear<T> fc1;
  BasicLinear<T> fc2;
};

template <typename T>
struct BasicModelParameters {
  BasicLinear<T> patch_projection;
  T class_token;       // [embed_dim]
  T positional_table;  // [(N+1) x embed_dim]
  std::vector<BasicEncoderLayer<T>> layers;
  BasicLayerNorm<T> final_norm;
  BasicLinear<T> head;  // [embed_dim x num_classes]

  /// Visits every leaf with its stable dotted name, in serialization order.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    auto linear = [&f](const std::string& prefix, auto& l) {
      f(prefix + ".weight", l.weight);
      f(prefix + ".bias", l.bias);
    };
    auto norm = [&f](const std::string& prefix, auto& n) {
      f(prefix + ".gamma", n.gamma);
      f(prefix + ".beta", n.beta);
    };
    linear("patch_projection", self.patch_projection);
    f(std::string("class_token"), self.class_token);
    f(std::string("positional_table"), self.positional_table);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& layer = self.layers[i];
      const std::string p = "layers." + std::to_string(i);
      norm(p + ".norm1", layer.norm1);
      linear(p + ".attention.query", layer.attention.query);
      linear(p + ".attention.key", layer.attention.key);
      linear(p + ".attention.value", layer.attention.value);
      linear(p + ".attention.output", layer.attention.output);
      norm(p + ".norm2", layer.norm2);
      linear(p + ".mlp.fc1", layer.fc1);
      linear(p + ".mlp.fc2", layer.fc2);
    }
    norm("final_norm", self.final_norm);
    linear("head", self.head);
  }
};

using ModelParameters = BasicModelParameters<Tensor>;
using ModelVars = BasicModelParameters<Var>;
using LinearParams = BasicLinear<Tensor>;
using AttentionParams = BasicAttention<Tensor>;
using EncoderLayerParams = BasicEncoderLayer<Tensor>;
using AttentionVars = BasicAttention<Var>;
using EncoderLayerVars = BasicEncoderLayer<Var>;

/// Parameters with every weight zero and layer-norm gains one.
ModelParameters zero_parameters(const ViTConfig& config);

/// Truncated-normal (std 0.02) projections and positional table, zero biases
/// and class token, unit norm gains. Each leaf draws from its own named
/// substream of `rng`.
ModelParameters init_parameters(const ViTConfig& config, const RandomSource& rng);

std::size_t parameter_count(const ModelParameters& params);

/// Throws ShapeError naming the first leaf whose shape disagrees with `config`.
void check_parameters(const ViTConfig& config, const ModelParameters& params);

/// Places every parameter on `tape` by reference (no copy), trainable when
/// `trainable` is set. `params` must outlive the tape.
ModelVars bind(Tape& tape, const ModelParameters& params, bool trainable);

// ---- forward pipeline ------------------------------------------------------

/// [channels x s x s] image to [N x p*p*channels]; patches follow the
/// row-major patch grid, each flattened as (row, column, channel).
Tensor patchify(const Tensor& image, std::size_t patch_size);
Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t image_size);

/// Class-token row followed by projected patches, plus positional table.
Var embed(const Var& patches, const ModelVars& vars);

/// Optional capture of intermediate values for inspection.
struct ForwardTrace {
  /// One [(N+1) x (N+1)] matrix per layer and head, layer-major.
  std::vector<Tensor> attention;
};

Var multi_head_attention(const Var& x, const AttentionVars& attn, std::size_t num_heads,
                         ForwardTrace* trace = nullptr);

/// Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(x)). Dropout is applied to
/// the attention and MLP branches only when `dropout_rng` is given.
Var encoder_block(const Var& x, const EncoderLayerVars& layer, const ViTConfig& config,
                  RandomSource* dropout_rng = nullptr, ForwardTrace* trace = nullptr);

/// Head logits [num_classes] for one preprocessed image.
Var forward_logits(Tape& tape, const Tensor& image, const ViTConfig& config, const ModelVars& vars,
                   RandomSource* dropout_rng = nullptr, ForwardTrace* trace = nullptr);

/// Class probabilities [num_classes].
Var forward(Tape& tape, const Tensor& image, const ViTConfig& config, const ModelVars& vars,
            RandomSource* dropout_rng = nullptr, ForwardTrace* trace = nullptr);

/// Inference-only convenience that records on a private tape.
Tensor forward(const Tensor& image, const ViTConfig& config, const ModelParameters& params,
               ForwardTrace* trace = nullptr);

struct ClassProbabilities {
  double real_prob = 0.5;
  double fake_prob = 0.5;
  Label predicted_label = Label::Real;
};

/// Argmax with ties going to Real.
ClassProbabilities classify(const Tensor& probabilities);
ClassProbabilities predict(const Tensor& image, const ViTConfig& config, const ModelParameters& params);

}  // namespace vitdf
