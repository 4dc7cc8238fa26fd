#pragma once

#include <cstddef>
#include <vector>

#include "vitdf/autodiff.hpp"
#include "vitdf/random.hpp"
#include "vitdf/tensor.hpp"

// Differentiable operators. Each operator exists in two forms: a plain
// Tensor -> Tensor kernel, and a Var overload that evaluates the kernel and
// records the matching backward rule on the operands' tape.

namespace vitdf {

// ---- plain kernels ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
Tensor gelu(const Tensor& x);

/// x[..., n] + bias[n], broadcast over leading dimensions.
Tensor add_bias(const Tensor& x, const Tensor& bias);

/// Exact Gaussian CDF.
double normal_cdf(double x);

// ---- recorded operators ----------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);
Var softmax(const Var& x, std::size_t axis);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var gelu(const Var& x);
Var add_bias(const Var& x, const Var& bias);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var add_n(const std::vector<Var>& xs);

Var sum(const Var& x);
Var mean(const Var& x);
Var reshape(const Var& x, Shape shape);

/// Columns [start, start + count) of a matrix.
Var slice_cols(const Var& x, std::size_t start, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);
/// Stacks matrices (or vectors, treated as one row) vertically.
Var concat_rows(const std::vector<Var>& parts);
/// Row `r` of a matrix as a vector.
Var row(const Var& x, std::size_t r);

/// log(max(x, floor)); the gradient is zero where the floor is active.
Var log_clamped(const Var& x, double floor);

/// Inverted dropout. Identity when `rate == 0`.
Var dropout(const Var& x, double rate, RandomSource& rng);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }

}  // namespace vitdf
