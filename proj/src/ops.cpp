#include "vitdf/ops.hpp"

#include <cmath>
#include <numbers>

namespace vitdf {

namespace {

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + x.shape_string());
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return normal_cdf(x) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

}  // namespace

double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + a.shape_string() + " and " + b.shape_string());
  }
  RowMajorMatrix<double> out = a.matrix() * b.matrix();
  return Tensor::from_matrix(out);
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  RowMajorMatrix<double> out = x.matrix().transpose();
  return Tensor::from_matrix(out);
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + x.shape_string());
  }
  auto s = split_at(x.shape(), axis);
  Tensor out(x.shape());
  const auto in = x.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t base = o * s.extent * s.inner + i;
      double mx = in[base];
      for (std::size_t k = 1; k < s.extent; ++k) mx = std::max(mx, in[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        double e = std::exp(in[base + k * s.inner] - mx);
        dst[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) dst[base + k * s.inner] /= total;
    }
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  std::size_t n = x.shape().back();
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw ShapeError("layer_norm: gamma " + gamma.shape_string() + " / beta " + beta.shape_string() +
                     " must be [" + std::to_string(n) + "] for input " + x.shape_string());
  }
  if (!(eps > 0.0)) throw ShapeError("layer_norm: eps must be positive");
  Tensor out(x.shape());
  auto in = x.matrix();
  auto dst = out.matrix();
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    auto row = in.row(r).array();
    double mu = row.mean();
    double var = (row - mu).square().mean();
    double inv = 1.0 / std::sqrt(var + eps);
    dst.row(r).array() = (row - mu) * inv * gamma.array().transpose() + beta.array().transpose();
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * normal_cdf(x[i]);
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() == 0 || bias.shape() != Shape{x.shape().back()}) {
    throw ShapeError("add_bias: bias " + bias.shape_string() + " does not match " + x.shape_string());
  }
  Tensor out = x;
  out.set_requires_grad(false);
  out.matrix().rowwise() += bias.matrix().row(0);
  return out;
}

// ---- recorded operators ----------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  return a.tape().record(matmul(a.value(), b.value()), {a, b}, [](BackwardContext& ctx) {
    const auto& g = ctx.grad();
    if (ctx.needs(0)) {
      RowMajorMatrix<double> ga = g.matrix() * ctx.input(1).matrix().transpose();
      ctx.accumulate(0, Tensor::from_matrix(ga));
    }
    if (ctx.needs(1)) {
      RowMajorMatrix<double> gb = ctx.input(0).matrix().transpose() * g.matrix();
      ctx.accumulate(1, Tensor::from_matrix(gb));
    }
  });
}

Var transpose(const Var& x) {
  return x.tape().record(transpose(x.value()), {x},
                         [](BackwardContext& ctx) { ctx.accumulate(0, transpose(ctx.grad())); });
}

Var softmax(const Var& x, std::size_t axis) {
  return x.tape().record(softmax(x.value(), axis), {x}, [axis](BackwardContext& ctx) {
    const Tensor& y = ctx.output();
    const Tensor& g = ctx.grad();
    auto s = split_at(y.shape(), axis);
    Tensor dx(y.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        std::size_t base = o * s.extent * s.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.extent; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          std::size_t j = base + k * s.inner;
          dx[j] = y[j] * (g[j] - dot);
        }
      }
    }
    ctx.accumulate(0, dx);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Tensor y = layer_norm(x.value(), gamma.value(), beta.value(), eps);
  return x.tape().record(std::move(y), {x, gamma, beta}, [eps](BackwardContext& ctx) {
    const Tensor& in = ctx.input(0);
    const Tensor& gamma_t = ctx.input(1);
    const Tensor& g = ctx.grad();
    const auto n = static_cast<Eigen::Index>(in.shape().back());
    Tensor dx(in.shape());
    Eigen::ArrayXd dgamma = Eigen::ArrayXd::Zero(n);
    Eigen::ArrayXd dbeta = Eigen::ArrayXd::Zero(n);
    auto xm = in.matrix();
    auto gm = g.matrix();
    auto dxm = dx.matrix();
    for (Eigen::Index r = 0; r < xm.rows(); ++r) {
      Eigen::ArrayXd row = xm.row(r).transpose().array();
      double mu = row.mean();
      double inv = 1.0 / std::sqrt((row - mu).square().mean() + eps);
      Eigen::ArrayXd xhat = (row - mu) * inv;
      Eigen::ArrayXd grow = gm.row(r).transpose().array();
      dgamma += grow * xhat;
      dbeta += grow;
      Eigen::ArrayXd dxhat = grow * gamma_t.array();
      dxm.row(r) = (inv * (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean())).matrix().transpose();
    }
    ctx.accumulate(0, dx);
    ctx.accumulate(1, Tensor(Shape{static_cast<std::size_t>(n)}, std::vector<double>(dgamma.begin(), dgamma.end())));
    ctx.accumulate(2, Tensor(Shape{static_cast<std::size_t>(n)}, std::vector<double>(dbeta.begin(), dbeta.end())));
  });
}

Var gelu(const Var& x) {
  return x.tape().record(gelu(x.value()), {x}, [](BackwardContext& ctx) {
    const Tensor& in = ctx.input(0);
    Tensor dx(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) dx[i] = ctx.grad()[i] * gelu_grad(in[i]);
    ctx.accumulate(0, dx);
  });
}

Var add_bias(const Var& x, const Var& bias) {
  return x.tape().record(add_bias(x.value(), bias.value()), {x, bias}, [](BackwardContext& ctx) {
    ctx.accumulate(0, ctx.grad());
    if (ctx.needs(1)) {
      Eigen::RowVectorXd colsum = ctx.grad().matrix().colwise().sum();
      ctx.accumulate(1, Tensor(ctx.input(1).shape(), std::vector<double>(colsum.data(), colsum.data() + colsum.size())));
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.shape());
  out.array() = a.value().array() + b.value().array();
  return a.tape().record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    ctx.accumulate(0, ctx.grad());
    ctx.accumulate(1, ctx.grad());
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.shape());
  out.array() = a.value().array() - b.value().array();
  return a.tape().record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    ctx.accumulate(0, ctx.grad());
    if (ctx.needs(1)) {
      Tensor neg(ctx.grad().shape());
      neg.array() = -ctx.grad().array();
      ctx.accumulate(1, neg);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.shape());
  out.array() = a.value().array() * b.value().array();
  return a.tape().record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    Tensor d(ctx.grad().shape());
    if (ctx.needs(0)) {
      d.array() = ctx.grad().array() * ctx.input(1).array();
      ctx.accumulate(0, d);
    }
    if (ctx.needs(1)) {
      d.array() = ctx.grad().array() * ctx.input(0).array();
      ctx.accumulate(1, d);
    }
  });
}

Var scale(const Var& x, double factor) {
  Tensor out(x.shape());
  out.array() = x.value().array() * factor;
  return x.tape().record(std::move(out), {x}, [factor](BackwardContext& ctx) {
    Tensor d(ctx.grad().shape());
    d.array() = ctx.grad().array() * factor;
    ctx.accumulate(0, d);
  });
}

Var add_n(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("add_n: no operands");
  Tensor out = xs.front().value();
  out.set_requires_grad(false);
  for (std::size_t i = 1; i < xs.size(); ++i) {
    require_same_shape(out, xs[i].value(), "add_n");
    out.array() += xs[i].value().array();
  }
  return xs.front().tape().record(std::move(out), xs, [n = xs.size()](BackwardContext& ctx) {
    for (std::size_t i = 0; i < n; ++i) ctx.accumulate(i, ctx.grad());
  });
}

Var sum(const Var& x) {
  return x.tape().record(Tensor::scalar(x.value().array().sum()), {x}, [](BackwardContext& ctx) {
    ctx.accumulate(0, Tensor(ctx.input(0).shape(), ctx.grad().item()));
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  return x.tape().record(Tensor::scalar(x.value().array().sum() / n), {x}, [n](BackwardContext& ctx) {
    ctx.accumulate(0, Tensor(ctx.input(0).shape(), ctx.grad().item() / n));
  });
}

Var reshape(const Var& x, Shape shape) {
  return x.tape().record(x.value().reshaped(std::move(shape)), {x},
                         [](BackwardContext& ctx) { ctx.accumulate(0, ctx.grad()); });
}

Var slice_cols(const Var& x, std::size_t start, std::size_t count) {
  const Tensor& in = x.value();
  require_rank(in, 2, "slice_cols");
  if (count == 0 || start + count > in.dim(1)) {
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + in.shape_string());
  }
  const auto s = static_cast<Eigen::Index>(start);
  const auto c = static_cast<Eigen::Index>(count);
  RowMajorMatrix<double> out = in.matrix().middleCols(s, c);
  return x.tape().record(Tensor::from_matrix(out), {x}, [s, c](BackwardContext& ctx) {
    Tensor dx(ctx.input(0).shape());
    dx.matrix().middleCols(s, c) = ctx.grad().matrix();
    ctx.accumulate(0, dx);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  std::size_t rows = parts.front().value().dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_rank(p.value(), 2, "concat_cols");
    if (p.value().dim(0) != rows) throw ShapeError("concat_cols: row mismatch at " + p.value().shape_string());
    cols += p.value().dim(1);
  }
  Tensor out(Shape{rows, cols});
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    auto w = static_cast<Eigen::Index>(p.value().dim(1));
    out.matrix().middleCols(offset, w) = p.value().matrix();
    offset += w;
  }
  return parts.front().tape().record(std::move(out), parts, [n = parts.size()](BackwardContext& ctx) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      auto w = static_cast<Eigen::Index>(ctx.input(i).dim(1));
      if (ctx.needs(i)) {
        RowMajorMatrix<double> gi = ctx.grad().matrix().middleCols(off, w);
        ctx.accumulate(i, Tensor::from_matrix(gi));
      }
      off += w;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const std::size_t cols = parts.front().value().shape().back();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    if (v.rank() < 1 || v.rank() > 2 || v.shape().back() != cols) {
      throw ShapeError("concat_rows: cannot stack " + v.shape_string() + " with width " + std::to_string(cols));
    }
    rows += v.size() / cols;
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return parts.front().tape().record(Tensor(Shape{rows, cols}, std::move(data)), parts,
                                     [n = parts.size()](BackwardContext& ctx) {
                                       std::size_t off = 0;
                                       const auto g = ctx.grad().data();
                                       for (std::size_t i = 0; i < n; ++i) {
                                         const Tensor& in = ctx.input(i);
                                         if (ctx.needs(i)) {
                                           ctx.accumulate(i, Tensor(in.shape(), std::vector<double>(
                                                                                    g.begin() + off,
                                                                                    g.begin() + off + in.size())));
                                         }
                                         off += in.size();
                                       }
                                     });
}

Var row(const Var& x, std::size_t r) {
  const Tensor& in = x.value();
  require_rank(in, 2, "row");
  if (r >= in.dim(0)) throw ShapeError("row: index " + std::to_string(r) + " out of range for " + in.shape_string());
  const std::size_t n = in.dim(1);
  std::vector<double> data(in.data().begin() + r * n, in.data().begin() + (r + 1) * n);
  return x.tape().record(Tensor(Shape{n}, std::move(data)), {x}, [r, n](BackwardContext& ctx) {
    Tensor dx(ctx.input(0).shape());
    std::copy(ctx.grad().data().begin(), ctx.grad().data().end(), dx.data().begin() + r * n);
    ctx.accumulate(0, dx);
  });
}

Var log_clamped(const Var& x, double floor) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(x.value()[i], floor));
  return x.tape().record(std::move(out), {x}, [floor](BackwardContext& ctx) {
    const Tensor& in = ctx.input(0);
    Tensor dx(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) dx[i] = in[i] > floor ? ctx.grad()[i] / in[i] : 0.0;
    ctx.accumulate(0, dx);
  });
}

Var dropout(const Var& x, double rate, RandomSource& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  Tensor mask(x.shape());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor out(x.shape());
  out.array() = x.value().array() * mask.array();
  return x.tape().record(std::move(out), {x}, [mask = std::move(mask)](BackwardContext& ctx) {
    Tensor d(mask.shape());
    d.array() = ctx.grad().array() * mask.array();
    ctx.accumulate(0, d);
  });
}

}  // namespace vitdf
