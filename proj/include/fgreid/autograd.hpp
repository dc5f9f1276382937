#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fgreid/tensor.hpp"

namespace fgreid::inline FGREID_PRECISION {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows back
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer of this node, allocated (zeroed) on first use.
  Tensor& grad_buffer();
};

/// Handle to a value in the reverse-mode graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var parameter(Tensor value) { return Var(std::move(value), true); }

  bool defined() const { return node_ != nullptr; }
  explicit operator bool() const { return defined(); }

  const Tensor& value() const { return node_->value; }
  /// In-place access for optimizers; never call while a graph using it is alive.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Accumulated gradient; a zero tensor if nothing reached this node.
  Tensor grad() const;
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Records a result node. Parents and the backward closure are dropped when no
/// parent needs a gradient or recording is disabled.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Runs reverse accumulation from a single-element root, seeding d(root) = 1.
void backward(const Var& root);

bool grad_enabled();

/// Disables graph recording in its scope (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace fgreid::inline FGREID_PRECISION
