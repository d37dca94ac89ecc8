#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace copywriter::nn {

using Matrix = Eigen::MatrixXd;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Pushes this node's grad into its parents' grads.
  std::function<void(Node&)> backward;

  Matrix& ensure_grad() {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }
};

// Handle to a node in a reverse-mode computation graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  double scalar() const { return node_->value(0, 0); }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool defined() const { return node_ != nullptr; }

  void zero_grad() { node_->grad.resize(0, 0); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var parameter(Matrix value);
Var constant(Matrix value);
Var scalar_constant(double value);

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// `loss` must be 1x1.
void backward(const Var& loss);

// While alive on a thread, ops produce no graph edges.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
// a (n x m) plus column b (n x 1) broadcast over columns.
Var add_col(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var transpose(const Var& a);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);
Var gather_cols(const Var& table, std::span<const int> ids);
Var mean_cols(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var add_n(std::span<const Var> terms);
// Softmax down each column.
Var softmax(const Var& a);
Var log_softmax(const Var& a);
Var pick(const Var& a, Eigen::Index row, Eigen::Index col = 0);
Var clamp(const Var& a, double lo, double hi);
Var minimum(const Var& a, const Var& b);
// Mean over elements of softplus(z) - y * z, the stable logistic loss.
Var bce_with_logits(const Var& logits, const Matrix& targets);

}  // namespace copywriter::nn
