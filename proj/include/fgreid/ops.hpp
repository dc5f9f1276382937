#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fgreid/autograd.hpp"

namespace fgreid::inline FGREID_PRECISION {

/// 1x1 convolution: weight (c_in x c_out), bias (c_out).
struct ProjectionParams {
  Var weight;
  Var bias;

  bool defined() const { return weight.defined(); }
  std::size_t c_in() const { return weight.shape().at(0); }
  std::size_t c_out() const { return weight.shape().at(1); }
  std::size_t parameter_count() const { return weight.value().size() + bias.value().size(); }
  void validate() const;
};

struct BatchNormParams {
  Var gamma;
  Var beta;
  Tensor running_mean;
  Tensor running_var;
  Real momentum = Real(0.1);
  Real epsilon = Real(1e-5);

  static BatchNormParams identity(std::size_t channels);
  bool defined() const { return gamma.defined(); }
  std::size_t channels() const { return gamma.value().size(); }
  void validate() const;
};

enum class BnMode { train, infer };

Var constant(Tensor value);

// Elementwise, operands of identical shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var minimum(const Var& a, const Var& b);

Var neg(const Var& a);
Var add_scalar(const Var& a, Real s);
Var scale(const Var& a, Real s);
Var exp(const Var& a);
Var square(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
/// log(max(a, floor)); zero gradient where clamped.
Var log_clamped(const Var& a, Real floor = Real(1e-12));
/// sqrt(max(a, floor)); zero gradient where clamped.
Var sqrt_clamped(const Var& a, Real floor);

Var sum(const Var& a);
Var mean(const Var& a);
/// Sums over the listed axes, removing them from the shape.
Var reduce_sum(const Var& a, std::vector<std::size_t> axes);
/// Arithmetic mean over the listed axes, removing them from the shape.
Var mean_pool(const Var& a, std::vector<std::size_t> axes);

/// Numpy-style broadcast to `target` (trailing alignment, size-1 dims stretch).
Var expand(const Var& a, const Shape& target);
Var reshape(const Var& a, Shape shape);
Var transpose(const Var& a);
Var matmul(const Var& a, const Var& b);

/// Softmax along `axis`, max-subtracted.
Var softmax_axis(const Var& x, std::size_t axis);
/// v / max(||v||, eps) along the last axis.
Var l2_normalize(const Var& x, Real eps = Real(1e-12));
/// out[..., :] = weight^T x[..., :] + bias over the last axis.
Var channel_project(const Var& x, const ProjectionParams& p);
/// x is (batch, c). Train mode uses batch statistics and updates the running
/// statistics in `p`; requires batch >= 2.
Var batch_norm(const Var& x, BatchNormParams& p, BnMode mode);
/// Scalar minimum over every element; gradient goes to the first argmin.
Var global_min(const Var& x);

/// Gathers rows along axis 0.
Var index_rows(const Var& x, std::span<const std::size_t> rows);
/// out[i] = x[i, cols[i]] for x of shape (n, m).
Var pick(const Var& x, std::span<const std::size_t> cols);
/// Stacks equally shaped values along a new leading axis.
Var stack(std::span<const Var> parts);
/// Concatenates along the last axis; leading dims must agree.
Var concat_last(std::span<const Var> parts);
/// Row-wise max (min) over entries where mask != 0; every row needs one.
Var masked_row_max(const Var& x, const Tensor& mask);
Var masked_row_min(const Var& x, const Tensor& mask);

/// NHWC convolution. weight (kh, kw, c_in, c_out), bias (c_out); zero padding.
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t padding);

}  // namespace fgreid::inline FGREID_PRECISION
