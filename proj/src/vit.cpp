#include "vitdf/vit.hpp"

#include <cmath>
#include <map>

namespace vitdf {

std::string_view label_name(Label l) { return l == Label::Real ? "Real" : "Fake"; }
std::string_view label_key(Label l) { return l == Label::Real ? "real" : "fake"; }

Label label_from_key(std::string_view key) {
  if (key == "real" || key == "Real") return Label::Real;
  if (key == "fake" || key == "Fake") return Label::Fake;
  throw DataError("unknown label '" + std::string(key) + "'");
}

// ---- config ----------------------------------------------------------------

void ViTConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid ViT config: " + msg); };
  if (image_size == 0 || patch_size == 0 || channels == 0) fail("image_size, patch_size and channels must be positive");
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (embed_dim == 0 || num_heads == 0 || mlp_dim == 0) fail("embed_dim, num_heads and mlp_dim must be positive");
  if (embed_dim % num_heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0, 1)");
  if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
}

std::size_t ViTConfig::parameter_count() const {
  const std::size_t d = embed_dim;
  const std::size_t per_layer = 4 * (d * d + d)             // q, k, v, output
                                + 4 * d                     // two norms
                                + (d * mlp_dim + mlp_dim)   // fc1
                                + (mlp_dim * d + d);        // fc2
  return (patch_dim() * d + d) + d + sequence_length() * d + num_layers * per_layer + 2 * d +
         (d * num_classes + num_classes);
}

ViTConfig ViTConfig::preset(std::string_view name) {
  ViTConfig c;
  if (name == "vit-base-patch16-224") {
    c.name = "vit-base-patch16-224";
    return c;
  }
  if (name == "vit-tiny") {
    c.name = "vit-tiny";
    c.image_size = 8;
    c.patch_size = 4;
    c.embed_dim = 16;
    c.num_heads = 2;
    c.num_layers = 2;
    c.mlp_dim = 32;
    return c;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

std::vector<std::string> ViTConfig::preset_names() { return {"vit-base-patch16-224", "vit-tiny"}; }

void to_json(nlohmann::ordered_json& j, const ViTConfig& c) {
  j = nlohmann::ordered_json{{"name", c.name},
                             {"image_size", c.image_size},
                             {"patch_size", c.patch_size},
                             {"channels", c.channels},
                             {"embed_dim", c.embed_dim},
                             {"num_heads", c.num_heads},
                             {"num_layers", c.num_layers},
                             {"mlp_dim", c.mlp_dim},
                             {"num_classes", c.num_classes},
                             {"dropout_rate", c.dropout_rate},
                             {"layer_norm_eps", c.layer_norm_eps}};
}

void from_json(const nlohmann::ordered_json& j, ViTConfig& c) {
  ViTConfig d;
  c.name = j.value("name", d.name);
  c.image_size = j.value("image_size", d.image_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.channels = j.value("channels", d.channels);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.mlp_dim = j.value("mlp_dim", d.mlp_dim);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.dropout_rate = j.value("dropout_rate", d.dropout_rate);
  c.layer_norm_eps = j.value("layer_norm_eps", d.layer_norm_eps);
}

// ---- parameters ------------------------------------------------------------

ModelParameters zero_parameters(const ViTConfig& config) {
  config.validate();
  const std::size_t d = config.embed_dim;
  auto linear = [](std::size_t in, std::size_t out) { return LinearParams{Tensor::zeros({in, out}), Tensor::zeros({out})}; };
  auto norm = [d] { return BasicLayerNorm<Tensor>{Tensor::ones({d}), Tensor::zeros({d})}; };

  ModelParameters p;
  p.patch_projection = linear(config.patch_dim(), d);
  p.class_token = Tensor::zeros({d});
  p.positional_table = Tensor::zeros({config.sequence_length(), d});
  p.layers.reserve(config.num_layers);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    EncoderLayerParams layer;
    layer.norm1 = norm();
    layer.attention = {linear(d, d), linear(d, d), linear(d, d), linear(d, d)};
    layer.norm2 = norm();
    layer.fc1 = linear(d, config.mlp_dim);
    layer.fc2 = linear(config.mlp_dim, d);
    p.layers.push_back(std::move(layer));
  }
  p.final_norm = norm();
  p.head = linear(d, config.num_classes);
  return p;
}

ModelParameters init_parameters(const ViTConfig& config, const RandomSource& rng) {
  ModelParameters p = zero_parameters(config);
  constexpr double kStd = 0.02;
  p.for_each([&rng](const std::string& name, Tensor& t) {
    const bool random = name.ends_with(".weight") || name == "positional_table";
    if (!random) return;
    RandomSource stream = rng.substream("init/" + name);
    for (auto& v : t.data()) v = stream.truncated_normal(kStd);
  });
  return p;
}

std::size_t parameter_count(const ModelParameters& params) {
  std::size_t n = 0;
  params.for_each([&n](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

void check_parameters(const ViTConfig& config, const ModelParameters& params) {
  std::map<std::string, Shape> expected;
  zero_parameters(config).for_each([&](const std::string& name, const Tensor& t) { expected[name] = t.shape(); });
  std::size_t seen = 0;
  params.for_each([&](const std::string& name, const Tensor& t) {
    ++seen;
    auto it = expected.find(name);
    if (it == expected.end()) throw ShapeError("unexpected parameter '" + name + "'");
    if (it->second != t.shape()) {
      throw ShapeError("parameter '" + name + "' has shape " + t.shape_string() + ", config expects " +
                       to_string(it->second));
    }
  });
  if (seen != expected.size()) {
    throw ShapeError("parameter set has " + std::to_string(seen) + " tensors, config expects " +
                     std::to_string(expected.size()));
  }
}

ModelVars bind(Tape& tape, const ModelParameters& params, bool trainable) {
  ModelVars vars;
  vars.layers.resize(params.layers.size());
  // Walk both structures in the same order; the visitor on `vars` receives the
  // leaves positionally.
  std::vector<std::pair<std::string, const Tensor*>> leaves;
  params.for_each([&](const std::string& name, const Tensor& t) { leaves.emplace_back(name, &t); });
  std::size_t i = 0;
  vars.for_each([&](const std::string& name, Var& v) {
    const auto& [leaf_name, tensor] = leaves[i++];
    if (leaf_name != name) throw Error("parameter layout mismatch at '" + name + "'");
    v = tape.reference(name, *tensor, trainable);
  });
  return vars;
}

// ---- forward ---------------------------------------------------------------

Tensor patchify(const Tensor& image, std::size_t patch_size) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw ShapeError("patchify: expected a square [channels x s x s] image, got " + image.shape_string());
  }
  const std::size_t c = image.dim(0), s = image.dim(1), p = patch_size;
  if (p == 0 || s % p != 0) {
    throw ShapeError("patchify: image size " + std::to_string(s) + " is not divisible by patch size " +
                     std::to_string(p));
  }
  const std::size_t grid = s / p;
  Tensor out(Shape{grid * grid, p * p * c});
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      const std::size_t patch = gy * grid + gx;
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            out.at(patch, (y * p + x) * c + ch) = image[(ch * s + gy * p + y) * s + gx * p + x];
          }
        }
      }
    }
  }
  return out;
}

Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t image_size) {
  if (patches.rank() != 2 || channels == 0) throw ShapeError("unpatchify: expected [N x p*p*c], got " + patches.shape_string());
  const std::size_t n = patches.dim(0), s = image_size;
  const auto grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (grid * grid != n || grid == 0 || s % grid != 0) {
    throw ShapeError("unpatchify: " + std::to_string(n) + " patches do not tile a " + std::to_string(s) + " image");
  }
  const std::size_t p = s / grid;
  if (patches.dim(1) != p * p * channels) {
    throw ShapeError("unpatchify: patch width " + std::to_string(patches.dim(1)) + " != " +
                     std::to_string(p * p * channels));
  }
  Tensor image(Shape{channels, s, s});
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t ch = 0; ch < channels; ++ch)
            image[(ch * s + gy * p + y) * s + gx * p + x] = patches.at(gy * grid + gx, (y * p + x) * channels + ch);
  return image;
}

namespace {

Var linear(const Var& x, const BasicLinear<Var>& l) { return add_bias(matmul(x, l.weight), l.bias); }

template <typename F>
auto with_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ShapeError& e) {
    throw ShapeError(std::string(stage) + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(stage) + ": " + e.what());
  }
}

}  // namespace

Var embed(const Var& patches, const ModelVars& vars) {
  Var projected = linear(patches, vars.patch_projection);
  Var tokens = concat_rows({vars.class_token, projected});
  return add(tokens, vars.positional_table);
}

Var multi_head_attention(const Var& x, const AttentionVars& attn, std::size_t num_heads, ForwardTrace* trace) {
  const std::size_t d = x.value().dim(1);
  if (num_heads == 0 || d % num_heads != 0) {
    throw ShapeError("multi_head_attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(num_heads) + " heads");
  }
  const std::size_t dh = d / num_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = linear(x, attn.query);
  Var k = linear(x, attn.key);
  Var v = linear(x, attn.value);
  std::vector<Var> heads;
  heads.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    Var qh = slice_cols(q, h * dh, dh);
    Var kh = slice_cols(k, h * dh, dh);
    Var vh = slice_cols(v, h * dh, dh);
    Var weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), 1);
    if (trace) trace->attention.push_back(weights.value());
    heads.push_back(matmul(weights, vh));
  }
  Var merged = num_heads == 1 ? heads.front() : concat_cols(heads);
  return linear(merged, attn.output);
}

Var encoder_block(const Var& x, const EncoderLayerVars& layer, const ViTConfig& config, RandomSource* dropout_rng,
                  ForwardTrace* trace) {
  auto maybe_dropout = [&](const Var& v) {
    return dropout_rng && config.dropout_rate > 0.0 ? dropout(v, config.dropout_rate, *dropout_rng) : v;
  };
  Var attended = multi_head_attention(layer_norm(x, layer.norm1.gamma, layer.norm1.beta, config.layer_norm_eps),
                                      layer.attention, config.num_heads, trace);
  Var h = add(x, maybe_dropout(attended));
  Var hidden = gelu(linear(layer_norm(h, layer.norm2.gamma, layer.norm2.beta, config.layer_norm_eps), layer.fc1));
  return add(h, maybe_dropout(linear(hidden, layer.fc2)));
}

Var forward_logits(Tape& tape, const Tensor& image, const ViTConfig& config, const ModelVars& vars,
                   RandomSource* dropout_rng, ForwardTrace* trace) {
  config.validate();
  if (image.shape() != Shape{config.channels, config.image_size, config.image_size}) {
    throw ShapeError("forward: image " + image.shape_string() + " does not match config " +
                     to_string({config.channels, config.image_size, config.image_size}));
  }
  Var patches = with_stage("patchify", [&] { return tape.constant(patchify(image, config.patch_size)); });
  Var x = with_stage("embed", [&] { return embed(patches, vars); });
  for (std::size_t i = 0; i < vars.layers.size(); ++i) {
    const std::string stage = "encoder layer " + std::to_string(i);
    x = with_stage(stage.c_str(), [&] { return encoder_block(x, vars.layers[i], config, dropout_rng, trace); });
  }
  return with_stage("head", [&] {
    Var normed = layer_norm(x, vars.final_norm.gamma, vars.final_norm.beta, config.layer_norm_eps);
    Var cls = reshape(row(normed, 0), {1, config.embed_dim});
    return reshape(linear(cls, vars.head), {config.num_classes});
  });
}

Var forward(Tape& tape, const Tensor& image, const ViTConfig& config, const ModelVars& vars, RandomSource* dropout_rng,
            ForwardTrace* trace) {
  return softmax(forward_logits(tape, image, config, vars, dropout_rng, trace), 0);
}

Tensor forward(const Tensor& image, const ViTConfig& config, const ModelParameters& params, ForwardTrace* trace) {
  Tape tape;
  ModelVars vars = bind(tape, params, false);
  return forward(tape, image, config, vars, nullptr, trace).value();
}

ClassProbabilities classify(const Tensor& probabilities) {
  if (probabilities.size() != 2) {
    throw ShapeError("classify: expected two class probabilities, got " + probabilities.shape_string());
  }
  ClassProbabilities out;
  out.real_prob = probabilities[0];
  out.fake_prob = probabilities[1];
  out.predicted_label = out.fake_prob > out.real_prob ? Label::Fake : Label::Real;
  return out;
}

ClassProbabilities predict(const Tensor& image, const ViTConfig& config, const ModelParameters& params) {
  return classify(forward(image, config, params));
}

}  // namespace vitdf
