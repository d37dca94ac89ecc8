#include "copywriter/nn/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace copywriter::nn {

namespace {

thread_local bool g_grad_enabled = true;

using Parents = std::vector<std::shared_ptr<Node>>;

Var make(Matrix value, Parents parents, std::function<void(Node&)> backward) {
  Var out(std::move(value), false);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    Node& n = *out.node();
    n.requires_grad = true;
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  return out;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

void accumulate(const std::shared_ptr<Node>& target, const Matrix& delta) {
  if (target->requires_grad) target->ensure_grad() += delta;
}

}  // namespace

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var parameter(Matrix value) { return Var(std::move(value), true); }
Var constant(Matrix value) { return Var(std::move(value), false); }
Var scalar_constant(double value) { return Var(Matrix::Constant(1, 1, value), false); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw std::invalid_argument("backward: loss must be 1x1");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  auto pa = a.node(), pb = b.node();
  return make(a.value() * b.value(), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->ensure_grad().noalias() += self.grad * pb->value.transpose();
    if (pb->requires_grad) pb->ensure_grad().noalias() += pa->value.transpose() * self.grad;
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  auto pa = a.node(), pb = b.node();
  return make(a.value() + b.value(), {pa, pb}, [pa, pb](Node& self) {
    accumulate(pa, self.grad);
    accumulate(pb, self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  auto pa = a.node(), pb = b.node();
  return make(a.value() - b.value(), {pa, pb}, [pa, pb](Node& self) {
    accumulate(pa, self.grad);
    accumulate(pb, -self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  auto pa = a.node(), pb = b.node();
  return make(a.value().cwiseProduct(b.value()), {pa, pb}, [pa, pb](Node& self) {
    accumulate(pa, self.grad.cwiseProduct(pb->value));
    accumulate(pb, self.grad.cwiseProduct(pa->value));
  });
}

Var add_col(const Var& a, const Var& b) {
  if (b.cols() != 1 || b.rows() != a.rows()) throw std::invalid_argument("add_col: shape mismatch");
  auto pa = a.node(), pb = b.node();
  Matrix value = a.value().colwise() + b.value().col(0);
  return make(std::move(value), {pa, pb}, [pa, pb](Node& self) {
    accumulate(pa, self.grad);
    accumulate(pb, self.grad.rowwise().sum());
  });
}

Var scale(const Var& a, double factor) {
  auto pa = a.node();
  return make(a.value() * factor, {pa},
              [pa, factor](Node& self) { accumulate(pa, self.grad * factor); });
}

Var add_scalar(const Var& a, double offset) {
  auto pa = a.node();
  return make(a.value().array() + offset, {pa}, [pa](Node& self) { accumulate(pa, self.grad); });
}

Var tanh(const Var& a) {
  auto pa = a.node();
  Matrix value = a.value().array().tanh();
  return make(std::move(value), {pa}, [pa](Node& self) {
    accumulate(pa, self.grad.cwiseProduct((1.0 - self.value.array().square()).matrix()));
  });
}

Var sigmoid(const Var& a) {
  auto pa = a.node();
  Matrix value = a.value().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return make(std::move(value), {pa}, [pa](Node& self) {
    accumulate(pa, self.grad.cwiseProduct(
                       (self.value.array() * (1.0 - self.value.array())).matrix()));
  });
}

Var exp(const Var& a) {
  auto pa = a.node();
  Matrix value = a.value().array().exp();
  return make(std::move(value), {pa},
              [pa](Node& self) { accumulate(pa, self.grad.cwiseProduct(self.value)); });
}

Var transpose(const Var& a) {
  auto pa = a.node();
  return make(a.value().transpose(), {pa},
              [pa](Node& self) { accumulate(pa, self.grad.transpose()); });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  Parents parents;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
    parents.push_back(p.node());
  }
  Matrix value(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    value.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  return make(std::move(value), parents, [](Node& self) {
    Eigen::Index off = 0;
    for (const auto& p : self.parents) {
      const Eigen::Index r = p->value.rows();
      if (p->requires_grad) p->ensure_grad() += self.grad.middleRows(off, r);
      off += r;
    }
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  auto pa = a.node();
  return make(a.value().middleRows(start, count), {pa}, [pa, start, count](Node& self) {
    if (pa->requires_grad) pa->ensure_grad().middleRows(start, count) += self.grad;
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  Parents parents;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    parents.push_back(p.node());
  }
  Matrix value(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    value.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return make(std::move(value), parents, [](Node& self) {
    Eigen::Index off = 0;
    for (const auto& p : self.parents) {
      const Eigen::Index c = p->value.cols();
      if (p->requires_grad) p->ensure_grad() += self.grad.middleCols(off, c);
      off += c;
    }
  });
}

Var gather_cols(const Var& table, std::span<const int> ids) {
  if (ids.empty()) throw std::invalid_argument("gather_cols: no ids");
  Matrix value(table.rows(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.cols()) throw std::out_of_range("gather_cols: id out of range");
    value.col(static_cast<Eigen::Index>(i)) = table.value().col(ids[i]);
  }
  auto pt = table.node();
  std::vector<int> idx(ids.begin(), ids.end());
  return make(std::move(value), {pt}, [pt, idx = std::move(idx)](Node& self) {
    if (!pt->requires_grad) return;
    Matrix& g = pt->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) g.col(idx[i]) += self.grad.col(static_cast<Eigen::Index>(i));
  });
}

Var mean_cols(const Var& a) {
  auto pa = a.node();
  const double n = static_cast<double>(a.cols());
  return make(a.value().rowwise().mean(), {pa}, [pa, n](Node& self) {
    if (pa->requires_grad) pa->ensure_grad().colwise() += self.grad.col(0) / n;
  });
}

Var sum(const Var& a) {
  auto pa = a.node();
  return make(Matrix::Constant(1, 1, a.value().sum()), {pa}, [pa](Node& self) {
    if (pa->requires_grad) pa->ensure_grad().array() += self.grad(0, 0);
  });
}

Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw std::invalid_argument("add_n: no inputs");
  Matrix value = terms.front().value();
  Parents parents{terms.front().node()};
  for (std::size_t i = 1; i < terms.size(); ++i) {
    if (terms[i].rows() != value.rows() || terms[i].cols() != value.cols()) {
      throw std::invalid_argument("add_n: shape mismatch");
    }
    value += terms[i].value();
    parents.push_back(terms[i].node());
  }
  return make(std::move(value), parents, [](Node& self) {
    for (const auto& p : self.parents) {
      if (p->requires_grad) p->ensure_grad() += self.grad;
    }
  });
}

namespace {

Matrix column_log_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double m = x.col(c).maxCoeff();
    const double lse = m + std::log((x.col(c).array() - m).exp().sum());
    out.col(c) = x.col(c).array() - lse;
  }
  return out;
}

}  // namespace

Var softmax(const Var& a) {
  auto pa = a.node();
  Matrix value = column_log_softmax(a.value()).array().exp();
  return make(std::move(value), {pa}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    Matrix& g = pa->ensure_grad();
    for (Eigen::Index c = 0; c < self.value.cols(); ++c) {
      const double dot = self.grad.col(c).dot(self.value.col(c));
      g.col(c).array() += self.value.col(c).array() * (self.grad.col(c).array() - dot);
    }
  });
}

Var log_softmax(const Var& a) {
  auto pa = a.node();
  return make(column_log_softmax(a.value()), {pa}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    Matrix& g = pa->ensure_grad();
    for (Eigen::Index c = 0; c < self.value.cols(); ++c) {
      const double total = self.grad.col(c).sum();
      g.col(c).array() += self.grad.col(c).array() - self.value.col(c).array().exp() * total;
    }
  });
}

Var pick(const Var& a, Eigen::Index row, Eigen::Index col) {
  if (row < 0 || row >= a.rows() || col < 0 || col >= a.cols()) throw std::out_of_range("pick");
  auto pa = a.node();
  return make(Matrix::Constant(1, 1, a.value()(row, col)), {pa}, [pa, row, col](Node& self) {
    if (pa->requires_grad) pa->ensure_grad()(row, col) += self.grad(0, 0);
  });
}

Var clamp(const Var& a, double lo, double hi) {
  auto pa = a.node();
  Matrix value = a.value().cwiseMax(lo).cwiseMin(hi);
  return make(std::move(value), {pa}, [pa, lo, hi](Node& self) {
    if (!pa->requires_grad) return;
    const Matrix mask =
        ((pa->value.array() >= lo) && (pa->value.array() <= hi)).cast<double>().matrix();
    pa->ensure_grad() += self.grad.cwiseProduct(mask);
  });
}

Var minimum(const Var& a, const Var& b) {
  check_same_shape(a, b, "minimum");
  auto pa = a.node(), pb = b.node();
  return make(a.value().cwiseMin(b.value()), {pa, pb}, [pa, pb](Node& self) {
    // Ties route the gradient to `a`.
    const Matrix take_a = (pa->value.array() <= pb->value.array()).cast<double>().matrix();
    accumulate(pa, self.grad.cwiseProduct(take_a));
    accumulate(pb, self.grad.cwiseProduct((1.0 - take_a.array()).matrix()));
  });
}

Var bce_with_logits(const Var& logits, const Matrix& targets) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw std::invalid_argument("bce_with_logits: shape mismatch");
  }
  const Matrix& z = logits.value();
  const double n = static_cast<double>(z.size());
  const Matrix softplus = z.unaryExpr([](double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  });
  const double loss = (softplus - targets.cwiseProduct(z)).sum() / n;
  auto pz = logits.node();
  return make(Matrix::Constant(1, 1, loss), {pz}, [pz, targets, n](Node& self) {
    if (!pz->requires_grad) return;
    const Matrix p = pz->value.unaryExpr([](double x) {
      if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
      const double e = std::exp(x);
      return e / (1.0 + e);
    });
    pz->ensure_grad() += (p - targets) * (self.grad(0, 0) / n);
  });
}

}  // namespace copywriter::nn
