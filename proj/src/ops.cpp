#include "fgreid/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fgreid::inline FGREID_PRECISION {

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename Forward, typename Backward>
Var unary(const Var& a, Forward forward, Backward derivative) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = forward(x[i]);
  Tensor saved_out = a.requires_grad() ? out : Tensor();
  Tensor saved_in = a.requires_grad() ? x : Tensor();
  return make_result(std::move(out), {a},
                     [derivative, saved_in = std::move(saved_in), saved_out = std::move(saved_out)](Node& self) {
                       Tensor& g = self.parents[0]->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         g[i] += self.grad[i] * derivative(saved_in[i], saved_out[i]);
                       }
                     });
}

// Row-major strides of `shape`.
std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// For every element of a tensor shaped `outer`, the flat index of the element
// of `inner` it corresponds to, where `inner_strides` carry 0 on axes that do
// not advance `inner`.
std::vector<std::size_t> gather_map(const Shape& outer, const std::vector<std::size_t>& inner_strides) {
  const std::size_t n = numel(outer);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(outer.size(), 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = off;
    for (std::size_t ax = outer.size(); ax-- > 0;) {
      if (++idx[ax] < outer[ax]) {
        off += inner_strides[ax];
        break;
      }
      off -= inner_strides[ax] * (outer[ax] - 1);
      idx[ax] = 0;
    }
  }
  return map;
}

std::size_t row_count(const Shape& shape) {
  if (shape.empty()) return 1;
  return numel(shape) / shape.back();
}

}  // namespace

void ProjectionParams::validate() const {
  if (!weight || !bias) throw ShapeError("projection parameters are not initialised");
  if (weight.shape().size() != 2 || bias.shape().size() != 1 || bias.shape()[0] != weight.shape()[1]) {
    throw ShapeError("projection expects weight (c_in, c_out) and bias (c_out), got " + to_string(weight.shape()) +
                     " and " + to_string(bias.shape()));
  }
  if (!weight.value().all_finite() || !bias.value().all_finite()) {
    throw std::domain_error("projection parameters contain non-finite values");
  }
}

BatchNormParams BatchNormParams::identity(std::size_t channels) {
  BatchNormParams p;
  p.gamma = Var::parameter(Tensor({channels}, Real(1)));
  p.beta = Var::parameter(Tensor({channels}, Real(0)));
  p.running_mean = Tensor({channels}, Real(0));
  p.running_var = Tensor({channels}, Real(1));
  return p;
}

void BatchNormParams::validate() const {
  const std::size_t c = channels();
  if (beta.value().size() != c || running_mean.size() != c || running_var.size() != c) {
    throw ShapeError("batch norm parameter lengths disagree");
  }
  if (!(epsilon > 0)) throw std::invalid_argument("batch norm epsilon must be > 0");
  for (Real v : running_var.data()) {
    if (!(v >= 0)) throw std::domain_error("batch norm running variance must be >= 0");
  }
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (auto& parent : self.parents) {
      if (!parent->requires_grad) continue;
      Tensor& g = parent->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& x = self.parents[0]->value;
    const Tensor& y = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& x = self.parents[0]->value;
    const Tensor& y = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / y[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * x[i] / (y[i] * y[i]);
    }
  });
}

Var minimum(const Var& a, const Var& b) {
  require_same_shape(a, b, "minimum");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.value()[i], b.value()[i]);
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& x = self.parents[0]->value;
    const Tensor& y = self.parents[1]->value;
    // Ties route the gradient to the first operand.
    if (self.parents[0]->requires_grad) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] <= y[i]) g[i] += self.grad[i];
      }
    }
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (y[i] < x[i]) g[i] += self.grad[i];
      }
    }
  });
}

Var neg(const Var& a) { return scale(a, Real(-1)); }

Var add_scalar(const Var& a, Real s) {
  return unary(a, [s](Real x) { return x + s; }, [](Real, Real) { return Real(1); });
}

Var scale(const Var& a, Real s) {
  return unary(a, [s](Real x) { return x * s; }, [s](Real, Real) { return s; });
}

Var exp(const Var& a) {
  return unary(a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

Var square(const Var& a) {
  return unary(a, [](Real x) { return x * x; }, [](Real x, Real) { return Real(2) * x; });
}

Var relu(const Var& a) {
  return unary(a, [](Real x) { return x < 0 ? Real(0) : x; }, [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](Real x) {
        if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
        const Real e = std::exp(x);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Var log_clamped(const Var& a, Real floor) {
  return unary(
      a, [floor](Real x) { return std::log(std::max(x, floor)); },
      [floor](Real x, Real) { return x > floor ? Real(1) / x : Real(0); });
}

Var sqrt_clamped(const Var& a, Real floor) {
  return unary(
      a, [floor](Real x) { return std::sqrt(std::max(x, floor)); },
      [floor](Real x, Real y) { return x > floor ? Real(0.5) / y : Real(0); });
}

Var sum(const Var& a) {
  double acc = 0;
  for (Real v : a.value().data()) acc += v;
  return make_result(Tensor::scalar(static_cast<Real>(acc)), {a}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const Real s = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s;
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), Real(1) / static_cast<Real>(a.value().size()));
}

Var reduce_sum(const Var& a, std::vector<std::size_t> axes) {
  const Shape& in_shape = a.shape();
  std::vector<bool> reduced(in_shape.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= in_shape.size()) throw ShapeError("reduce axis " + std::to_string(ax) + " out of range for " + to_string(in_shape));
    if (reduced[ax]) throw ShapeError("reduce axis listed twice");
    reduced[ax] = true;
  }
  Shape out_shape;
  for (std::size_t ax = 0; ax < in_shape.size(); ++ax) {
    if (!reduced[ax]) out_shape.push_back(in_shape[ax]);
  }
  // Stride of each input axis into the output (0 on reduced axes).
  const auto out_strides = strides_of(out_shape);
  std::vector<std::size_t> proj(in_shape.size(), 0);
  for (std::size_t ax = 0, o = 0; ax < in_shape.size(); ++ax) {
    if (!reduced[ax]) proj[ax] = out_strides[o++];
  }
  auto map = gather_map(in_shape, proj);
  std::vector<double> acc(numel(out_shape), 0.0);
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) acc[map[i]] += x[i];
  Tensor out(out_shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Real>(acc[i]);
  if (!a.requires_grad()) map.clear();
  return make_result(std::move(out), {a}, [map = std::move(map)](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[map[i]];
  });
}

Var mean_pool(const Var& a, std::vector<std::size_t> axes) {
  std::size_t count = 1;
  for (std::size_t ax : axes) count *= a.value().dim(ax);
  if (count == 0) throw ShapeError("mean_pool over an empty axis");
  return scale(reduce_sum(a, std::move(axes)), Real(1) / static_cast<Real>(count));
}

Var expand(const Var& a, const Shape& target) {
  const Shape& in_shape = a.shape();
  if (in_shape.size() > target.size()) {
    throw ShapeError("cannot expand " + to_string(in_shape) + " to " + to_string(target));
  }
  const std::size_t lead = target.size() - in_shape.size();
  const auto in_strides = strides_of(in_shape);
  std::vector<std::size_t> proj(target.size(), 0);
  for (std::size_t i = 0; i < in_shape.size(); ++i) {
    const std::size_t t = target[lead + i];
    if (in_shape[i] == t) {
      proj[lead + i] = in_strides[i];
    } else if (in_shape[i] != 1) {
      throw ShapeError("cannot expand " + to_string(in_shape) + " to " + to_string(target));
    }
  }
  auto map = gather_map(target, proj);
  Tensor out(target);
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[map[i]];
  if (!a.requires_grad()) map.clear();
  return make_result(std::move(out), {a}, [map = std::move(map)](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[map[i]] += self.grad[i];
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), {a}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var transpose(const Var& a) {
  if (a.shape().size() != 2) throw ShapeError("transpose expects a matrix, got " + to_string(a.shape()));
  const std::size_t rows = a.shape()[0];
  const std::size_t cols = a.shape()[1];
  Tensor out({cols, rows});
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = x[i * cols + j];
  }
  return make_result(std::move(out), {a}, [rows, cols](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += self.grad[j * rows + i];
    }
  });
}

namespace {

// out (m x n) += a (m x k) * b (k x n), accumulated in double.
void gemm_accumulate(std::span<const Real> a, std::span<const Real> b, std::span<Real> out, std::size_t m,
                     std::size_t k, std::size_t n) {
  std::vector<double> row(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const Real* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
    Real* orow = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] += static_cast<Real>(row[j]);
  }
}

// out (k x n) += a^T * g for a (m x k), g (m x n).
void gemm_at_b_accumulate(std::span<const Real> a, std::span<const Real> g, std::span<Real> out, std::size_t m,
                          std::size_t k, std::size_t n) {
  std::vector<double> acc(k * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const Real* grow = g.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* arow = acc.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) arow[j] += av * grow[j];
    }
  }
  for (std::size_t i = 0; i < k * n; ++i) out[i] += static_cast<Real>(acc[i]);
}

// out (m x k) += g (m x n) * b^T for b (k x n).
void gemm_a_bt_accumulate(std::span<const Real> g, std::span<const Real> b, std::span<Real> out, std::size_t m,
                          std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* grow = g.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real* brow = b.data() + p * n;
      double acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(grow[j]) * brow[j];
      out[i * k + p] += static_cast<Real>(acc);
    }
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul shape mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t m = a.shape()[0];
  const std::size_t k = a.shape()[1];
  const std::size_t n = b.shape()[1];
  Tensor out({m, n});
  gemm_accumulate(a.value().data(), b.value().data(), out.data(), m, k, n);
  return make_result(std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (pa->requires_grad) gemm_a_bt_accumulate(self.grad.data(), pb->value.data(), pa->grad_buffer().data(), m, k, n);
    if (pb->requires_grad) gemm_at_b_accumulate(pa->value.data(), self.grad.data(), pb->grad_buffer().data(), m, k, n);
  });
}

Var softmax_axis(const Var& x, std::size_t axis) {
  const Shape& shape = x.shape();
  if (axis >= shape.size()) throw ShapeError("softmax axis out of range for " + to_string(shape));
  const std::size_t n = shape[axis];
  if (n == 0) throw ShapeError("softmax over an empty axis");
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];

  const Tensor& in = x.value();
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      Real peak = in[base];
      for (std::size_t i = 1; i < n; ++i) peak = std::max(peak, in[base + i * inner]);
      double total = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(static_cast<double>(in[base + i * inner]) - peak);
        out[base + i * inner] = static_cast<Real>(e);
        total += e;
      }
      for (std::size_t i = 0; i < n; ++i) {
        out[base + i * inner] = static_cast<Real>(out[base + i * inner] / total);
      }
    }
  }
  Tensor saved = x.requires_grad() ? out : Tensor();
  return make_result(std::move(out), {x}, [saved = std::move(saved), outer, inner, n](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t base = o * n * inner + j;
        double dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += static_cast<double>(self.grad[base + i * inner]) * saved[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t k = base + i * inner;
          g[k] += static_cast<Real>(saved[k] * (self.grad[k] - dot));
        }
      }
    }
  });
}

Var l2_normalize(const Var& x, Real eps) {
  if (!(eps > 0)) throw std::invalid_argument("l2_normalize epsilon must be > 0");
  if (x.shape().empty()) throw ShapeError("l2_normalize needs at least one axis");
  const std::size_t d = x.shape().back();
  const std::size_t rows = row_count(x.shape());
  const Tensor& in = x.value();
  Tensor out(x.shape());
  std::vector<Real> denom(rows);
  std::vector<bool> clamped(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0;
    for (std::size_t i = 0; i < d; ++i) ss += static_cast<double>(in[r * d + i]) * in[r * d + i];
    const double norm = std::sqrt(ss);
    clamped[r] = norm < eps;
    denom[r] = static_cast<Real>(clamped[r] ? static_cast<double>(eps) : norm);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = in[r * d + i] / denom[r];
  }
  Tensor saved = x.requires_grad() ? out : Tensor();
  return make_result(std::move(out), {x},
                     [saved = std::move(saved), denom = std::move(denom), clamped = std::move(clamped), rows, d](Node& self) {
                       Tensor& g = self.parents[0]->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0;
                         if (!clamped[r]) {
                           for (std::size_t i = 0; i < d; ++i) dot += static_cast<double>(self.grad[r * d + i]) * saved[r * d + i];
                         }
                         for (std::size_t i = 0; i < d; ++i) {
                           const std::size_t k = r * d + i;
                           g[k] += static_cast<Real>((self.grad[k] - saved[k] * dot) / denom[r]);
                         }
                       }
                     });
}

Var channel_project(const Var& x, const ProjectionParams& p) {
  p.validate();
  if (x.shape().empty() || x.shape().back() != p.c_in()) {
    throw ShapeError("channel_project: input channels " + (x.shape().empty() ? std::string("?") : std::to_string(x.shape().back())) +
                     " do not match projection input " + std::to_string(p.c_in()));
  }
  const std::size_t rows = row_count(x.shape());
  const std::size_t c_in = p.c_in();
  const std::size_t c_out = p.c_out();
  Shape out_shape = x.shape();
  out_shape.back() = c_out;
  Tensor out(out_shape);
  const Tensor& bias = p.bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < c_out; ++j) out[r * c_out + j] = bias[j];
  }
  gemm_accumulate(x.value().data(), p.weight.value().data(), out.data(), rows, c_in, c_out);
  return make_result(std::move(out), {x, p.weight, p.bias}, [rows, c_in, c_out](Node& self) {
    const auto& px = self.parents[0];
    const auto& pw = self.parents[1];
    const auto& pb = self.parents[2];
    if (px->requires_grad) gemm_a_bt_accumulate(self.grad.data(), pw->value.data(), px->grad_buffer().data(), rows, c_in, c_out);
    if (pw->requires_grad) gemm_at_b_accumulate(px->value.data(), self.grad.data(), pw->grad_buffer().data(), rows, c_in, c_out);
    if (pb->requires_grad) {
      Tensor& gb = pb->grad_buffer();
      std::vector<double> acc(c_out, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c_out; ++j) acc[j] += self.grad[r * c_out + j];
      }
      for (std::size_t j = 0; j < c_out; ++j) gb[j] += static_cast<Real>(acc[j]);
    }
  });
}

Var batch_norm(const Var& x, BatchNormParams& p, BnMode mode) {
  p.validate();
  if (x.shape().size() != 2 || x.shape()[1] != p.channels()) {
    throw ShapeError("batch_norm expects (batch, " + std::to_string(p.channels()) + "), got " + to_string(x.shape()));
  }
  const std::size_t batch = x.shape()[0];
  const std::size_t c = x.shape()[1];
  if (mode == BnMode::train && batch < 2) throw std::invalid_argument("batch_norm in train mode needs batch size >= 2");

  const Tensor& in = x.value();
  std::vector<double> mu(c, 0.0);
  std::vector<double> var(c, 0.0);
  if (mode == BnMode::train) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < c; ++j) mu[j] += in[b * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) mu[j] /= static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < c; ++j) {
        const double dv = in[b * c + j] - mu[j];
        var[j] += dv * dv;
      }
    }
    for (std::size_t j = 0; j < c; ++j) var[j] /= static_cast<double>(batch);
    const double m = p.momentum;
    const double unbias = static_cast<double>(batch) / static_cast<double>(batch - 1);
    for (std::size_t j = 0; j < c; ++j) {
      p.running_mean[j] = static_cast<Real>((1 - m) * p.running_mean[j] + m * mu[j]);
      p.running_var[j] = static_cast<Real>((1 - m) * p.running_var[j] + m * var[j] * unbias);
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mu[j] = p.running_mean[j];
      var[j] = p.running_var[j];
    }
  }

  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + p.epsilon);
  Tensor xhat({batch, c});
  Tensor out({batch, c});
  const Tensor& gamma = p.gamma.value();
  const Tensor& beta = p.beta.value();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (in[b * c + j] - mu[j]) * inv_std[j];
      xhat[b * c + j] = static_cast<Real>(h);
      out[b * c + j] = static_cast<Real>(gamma[j] * h + beta[j]);
    }
  }
  const bool train = mode == BnMode::train;
  return make_result(std::move(out), {x, p.gamma, p.beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), batch, c, train](Node& self) {
                       const auto& px = self.parents[0];
                       const auto& pg = self.parents[1];
                       const auto& pb = self.parents[2];
                       const Tensor& gamma = pg->value;
                       std::vector<double> sum_g(c, 0.0);
                       std::vector<double> sum_gh(c, 0.0);
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t j = 0; j < c; ++j) {
                           sum_g[j] += self.grad[b * c + j];
                           sum_gh[j] += static_cast<double>(self.grad[b * c + j]) * xhat[b * c + j];
                         }
                       }
                       if (pg->requires_grad) {
                         Tensor& g = pg->grad_buffer();
                         for (std::size_t j = 0; j < c; ++j) g[j] += static_cast<Real>(sum_gh[j]);
                       }
                       if (pb->requires_grad) {
                         Tensor& g = pb->grad_buffer();
                         for (std::size_t j = 0; j < c; ++j) g[j] += static_cast<Real>(sum_g[j]);
                       }
                       if (!px->requires_grad) return;
                       Tensor& g = px->grad_buffer();
                       const double n = static_cast<double>(batch);
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t j = 0; j < c; ++j) {
                           const std::size_t k = b * c + j;
                           double dx;
                           if (train) {
                             dx = gamma[j] * inv_std[j] * (self.grad[k] - sum_g[j] / n - xhat[k] * sum_gh[j] / n);
                           } else {
                             dx = gamma[j] * inv_std[j] * self.grad[k];
                           }
                           g[k] += static_cast<Real>(dx);
                         }
                       }
                     });
}

Var global_min(const Var& x) {
  const Tensor& in = x.value();
  if (in.size() == 0) throw ShapeError("global_min of an empty tensor");
  std::size_t arg = 0;
  for (std::size_t i = 1; i < in.size(); ++i) {
    if (in[i] < in[arg]) arg = i;
  }
  return make_result(Tensor::scalar(in[arg]), {x}, [arg](Node& self) {
    self.parents[0]->grad_buffer()[arg] += self.grad[0];
  });
}

Var index_rows(const Var& x, std::span<const std::size_t> rows) {
  if (x.shape().empty()) throw ShapeError("index_rows needs rank >= 1");
  const std::size_t n = x.shape()[0];
  const std::size_t stride = x.value().size() / std::max<std::size_t>(n, 1);
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  Tensor out(out_shape);
  std::vector<std::size_t> picked(rows.begin(), rows.end());
  for (std::size_t r = 0; r < picked.size(); ++r) {
    if (picked[r] >= n) throw ShapeError("index_rows: row " + std::to_string(picked[r]) + " out of range");
    std::copy_n(x.value().data().begin() + static_cast<std::ptrdiff_t>(picked[r] * stride), stride,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * stride));
  }
  return make_result(std::move(out), {x}, [picked = std::move(picked), stride](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < picked.size(); ++r) {
      for (std::size_t i = 0; i < stride; ++i) g[picked[r] * stride + i] += self.grad[r * stride + i];
    }
  });
}

Var pick(const Var& x, std::span<const std::size_t> cols) {
  if (x.shape().size() != 2 || x.shape()[0] != cols.size()) {
    throw ShapeError("pick expects (n, m) with n indices, got " + to_string(x.shape()));
  }
  const std::size_t m = x.shape()[1];
  std::vector<std::size_t> flat(cols.size());
  Tensor out({cols.size()});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= m) throw ShapeError("pick: column " + std::to_string(cols[i]) + " out of range");
    flat[i] = i * m + cols[i];
    out[i] = x.value()[flat[i]];
  }
  return make_result(std::move(out), {x}, [flat = std::move(flat)](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < flat.size(); ++i) g[flat[i]] += self.grad[i];
  });
}

Var stack(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("stack of nothing");
  const Shape& part_shape = parts[0].shape();
  const std::size_t part_size = numel(part_shape);
  Shape out_shape{parts.size()};
  out_shape.insert(out_shape.end(), part_shape.begin(), part_shape.end());
  Tensor out(out_shape);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].shape() != part_shape) throw ShapeError("stack: parts differ in shape");
    std::copy(parts[i].value().data().begin(), parts[i].value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(i * part_size));
  }
  return make_result(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [part_size](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (!self.parents[i]->requires_grad) continue;
      Tensor& g = self.parents[i]->grad_buffer();
      for (std::size_t k = 0; k < part_size; ++k) g[k] += self.grad[i * part_size + k];
    }
  });
}

Var concat_last(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape lead = parts[0].shape();
  if (lead.empty()) throw ShapeError("concat_last needs rank >= 1");
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    Shape s = p.shape();
    if (s.empty()) throw ShapeError("concat_last needs rank >= 1");
    widths.push_back(s.back());
    total += s.back();
    s.pop_back();
    if (s != lead) throw ShapeError("concat_last: leading dims disagree");
  }
  const std::size_t rows = numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      for (std::size_t j = 0; j < widths[i]; ++j) out[r * total + off + j] = parts[i].value()[r * widths[i] + j];
      off += widths[i];
    }
  }
  return make_result(std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                     [widths = std::move(widths), rows, total](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t i = 0; i < self.parents.size(); ++i) {
                         if (self.parents[i]->requires_grad) {
                           Tensor& g = self.parents[i]->grad_buffer();
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < widths[i]; ++j) g[r * widths[i] + j] += self.grad[r * total + off + j];
                           }
                         }
                         off += widths[i];
                       }
                     });
}

namespace {

template <typename Better>
Var masked_row_extreme(const Var& x, const Tensor& mask, Better better, const char* name) {
  if (x.shape().size() != 2 || mask.shape() != x.shape()) {
    throw ShapeError(std::string(name) + " expects a matrix and a mask of equal shape");
  }
  const std::size_t rows = x.shape()[0];
  const std::size_t cols = x.shape()[1];
  std::vector<std::size_t> arg(rows);
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    bool found = false;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t k = r * cols + c;
      if (mask[k] == 0) continue;
      if (!found || better(x.value()[k], x.value()[arg[r]])) arg[r] = k;
      found = true;
    }
    if (!found) throw std::invalid_argument(std::string(name) + ": row " + std::to_string(r) + " has no admissible entry");
    out[r] = x.value()[arg[r]];
  }
  return make_result(std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < arg.size(); ++r) g[arg[r]] += self.grad[r];
  });
}

}  // namespace

Var masked_row_max(const Var& x, const Tensor& mask) {
  return masked_row_extreme(x, mask, [](Real a, Real b) { return a > b; }, "masked_row_max");
}

Var masked_row_min(const Var& x, const Tensor& mask) {
  return masked_row_extreme(x, mask, [](Real a, Real b) { return a < b; }, "masked_row_min");
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t padding) {
  if (x.shape().size() != 4) throw ShapeError("conv2d expects NHWC input, got " + to_string(x.shape()));
  if (weight.shape().size() != 4 || weight.shape()[2] != x.shape()[3] || bias.shape().size() != 1 ||
      bias.shape()[0] != weight.shape()[3]) {
    throw ShapeError("conv2d weight " + to_string(weight.shape()) + " incompatible with input " + to_string(x.shape()));
  }
  if (stride == 0) throw std::invalid_argument("conv2d stride must be >= 1");
  const std::size_t n = x.shape()[0];
  const std::size_t in_h = x.shape()[1];
  const std::size_t in_w = x.shape()[2];
  const std::size_t c_in = x.shape()[3];
  const std::size_t kh = weight.shape()[0];
  const std::size_t kw = weight.shape()[1];
  const std::size_t c_out = weight.shape()[3];
  if (in_h + 2 * padding < kh || in_w + 2 * padding < kw) throw ShapeError("conv2d input smaller than kernel");
  const std::size_t out_h = (in_h + 2 * padding - kh) / stride + 1;
  const std::size_t out_w = (in_w + 2 * padding - kw) / stride + 1;

  const Tensor& in = x.value();
  const Tensor& w = weight.value();
  Tensor out({n, out_h, out_w, c_out});
  std::vector<double> acc(c_out);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        for (std::size_t co = 0; co < c_out; ++co) acc[co] = bias.value()[co];
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
            const Real* px = in.data().data() + ((b * in_h + static_cast<std::size_t>(iy)) * in_w + static_cast<std::size_t>(ix)) * c_in;
            const Real* pw = w.data().data() + (ky * kw + kx) * c_in * c_out;
            for (std::size_t ci = 0; ci < c_in; ++ci) {
              const double xv = px[ci];
              if (xv == 0.0) continue;
              const Real* wrow = pw + ci * c_out;
              for (std::size_t co = 0; co < c_out; ++co) acc[co] += xv * wrow[co];
            }
          }
        }
        Real* po = out.data().data() + ((b * out_h + oy) * out_w + ox) * c_out;
        for (std::size_t co = 0; co < c_out; ++co) po[co] = static_cast<Real>(acc[co]);
      }
    }
  }

  return make_result(std::move(out), {x, weight, bias},
                     [n, in_h, in_w, c_in, kh, kw, c_out, out_h, out_w, stride, padding](Node& self) {
                       const auto& px_node = self.parents[0];
                       const auto& pw_node = self.parents[1];
                       const auto& pb_node = self.parents[2];
                       const Tensor& in = px_node->value;
                       const Tensor& w = pw_node->value;
                       const bool need_x = px_node->requires_grad;
                       const bool need_w = pw_node->requires_grad;
                       Real* gx = need_x ? px_node->grad_buffer().data().data() : nullptr;
                       std::vector<double> gw(need_w ? w.size() : 0, 0.0);
                       std::vector<double> gb(c_out, 0.0);
                       for (std::size_t b = 0; b < n; ++b) {
                         for (std::size_t oy = 0; oy < out_h; ++oy) {
                           for (std::size_t ox = 0; ox < out_w; ++ox) {
                             const Real* g = self.grad.data().data() + ((b * out_h + oy) * out_w + ox) * c_out;
                             for (std::size_t co = 0; co < c_out; ++co) gb[co] += g[co];
                             for (std::size_t ky = 0; ky < kh; ++ky) {
                               const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                               if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
                               for (std::size_t kx = 0; kx < kw; ++kx) {
                                 const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                                 if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
                                 const std::size_t in_off = ((b * in_h + static_cast<std::size_t>(iy)) * in_w + static_cast<std::size_t>(ix)) * c_in;
                                 const std::size_t w_off = (ky * kw + kx) * c_in * c_out;
                                 for (std::size_t ci = 0; ci < c_in; ++ci) {
                                   const Real* wrow = w.data().data() + w_off + ci * c_out;
                                   if (need_x) {
                                     double acc = 0;
                                     for (std::size_t co = 0; co < c_out; ++co) acc += static_cast<double>(g[co]) * wrow[co];
                                     gx[in_off + ci] += static_cast<Real>(acc);
                                   }
                                   if (need_w) {
                                     const double xv = in[in_off + ci];
                                     if (xv == 0.0) continue;
                                     double* gwrow = gw.data() + w_off + ci * c_out;
                                     for (std::size_t co = 0; co < c_out; ++co) gwrow[co] += xv * g[co];
                                   }
                                 }
                               }
                             }
                           }
                         }
                       }
                       if (need_w) {
                         Tensor& gwt = pw_node->grad_buffer();
                         for (std::size_t i = 0; i < gw.size(); ++i) gwt[i] += static_cast<Real>(gw[i]);
                       }
                       if (pb_node->requires_grad) {
                         Tensor& gbt = pb_node->grad_buffer();
                         for (std::size_t co = 0; co < c_out; ++co) gbt[co] += static_cast<Real>(gb[co]);
                       }
                     });
}

}  // namespace fgreid::inline FGREID_PRECISION
