#include "doctest.h"

#include <cmath>
#include <functional>

#include "copywriter/nn/autograd.hpp"
#include "copywriter/nn/layers.hpp"
#include "copywriter/random.hpp"

using namespace copywriter;
using namespace copywriter::nn;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, 1.0);
  return m;
}

// Compares analytic gradients against central differences for every leaf.
void check_gradients(std::vector<Var> leaves, const std::function<Var()>& loss_fn, double tol = 1e-6) {
  for (auto& leaf : leaves) leaf.zero_grad();
  backward(loss_fn());
  for (auto& leaf : leaves) {
    const Matrix analytic = leaf.grad();
    REQUIRE(analytic.size() == leaf.value().size());
    for (Eigen::Index i = 0; i < leaf.value().size(); ++i) {
      const double h = 1e-6;
      const double saved = leaf.value().data()[i];
      leaf.mutable_value().data()[i] = saved + h;
      const double up = loss_fn().scalar();
      leaf.mutable_value().data()[i] = saved - h;
      const double down = loss_fn().scalar();
      leaf.mutable_value().data()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      CHECK(analytic.data()[i] == doctest::Approx(numeric).epsilon(tol).scale(1.0));
    }
  }
}

}  // namespace

TEST_CASE("elementwise and matrix ops have correct gradients") {
  Rng rng(1);
  Var a = parameter(random_matrix(3, 4, rng));
  Var b = parameter(random_matrix(4, 2, rng));
  Var c = parameter(random_matrix(3, 1, rng));
  check_gradients({a, b, c}, [&] {
    Var h = tanh(add_col(matmul(a, b), c));
    Var g = sigmoid(scale(h, 1.5));
    return sum(mul(exp(scale(g, 0.5)), add_scalar(h, 2.0)));
  });
}

TEST_CASE("structural ops have correct gradients") {
  Rng rng(2);
  Var a = parameter(random_matrix(4, 3, rng));
  Var b = parameter(random_matrix(2, 3, rng));
  Var table = parameter(random_matrix(3, 6, rng));
  const std::vector<int> ids = {5, 0, 5, 2};
  check_gradients({a, b, table}, [&] {
    const std::vector<Var> rows = {a, b};
    Var stacked = concat_rows(rows);
    Var top = slice_rows(stacked, 1, 3);
    Var emb = gather_cols(table, ids);
    Var pooled = mean_cols(emb);
    const std::vector<Var> cols = {top, pooled};
    Var wide = concat_cols(cols);
    Var t = transpose(wide);
    const std::vector<Var> terms = {mean(t), sum(mul(wide, wide)), pick(t, 1, 2)};
    return add_n(terms);
  });
}

TEST_CASE("softmax family gradients") {
  Rng rng(3);
  Var z = parameter(random_matrix(5, 3, rng));
  check_gradients({z}, [&] {
    Var lp = log_softmax(z);
    Var p = softmax(z);
    const std::vector<Var> terms = {pick(lp, 2, 0), pick(lp, 4, 2), scale(pick(p, 1, 1), 3.0)};
    return add_n(terms);
  });
  Matrix targets(1, 3);
  targets << 1.0, 0.0, 1.0;
  Var logits = parameter(random_matrix(1, 3, rng));
  check_gradients({logits}, [&] { return bce_with_logits(logits, targets); });
}

TEST_CASE("log_softmax columns are normalized") {
  Rng rng(4);
  const Var lp = log_softmax(constant(random_matrix(7, 3, rng) * 20.0));
  for (Eigen::Index c = 0; c < 3; ++c) CHECK(lp.value().col(c).array().exp().sum() == doctest::Approx(1.0));
}

TEST_CASE("clamp and minimum route gradients to the active branch") {
  Var a = parameter(Matrix::Constant(1, 2, 0.0));
  a.mutable_value() << 0.5, 3.0;
  Var b = parameter(Matrix::Constant(1, 2, 1.0));
  backward(sum(minimum(clamp(a, 0.0, 2.0), b)));
  CHECK(a.grad()(0, 0) == 1.0);
  CHECK(a.grad()(0, 1) == 0.0);
  CHECK(b.grad()(0, 0) == 0.0);
  CHECK(b.grad()(0, 1) == 1.0);
}

TEST_CASE("no-grad guard builds no graph") {
  Var a = parameter(Matrix::Ones(2, 2));
  {
    NoGradGuard guard;
    Var y = sum(mul(a, a));
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(grad_enabled());
}

TEST_CASE("GRU cell and linear layer gradients") {
  Rng rng(5);
  GruCell cell(3, 4, rng);
  Linear head(4, 2, rng);
  NamedParameters params;
  cell.collect("gru", params);
  head.collect("head", params);
  Var x = constant(random_matrix(3, 1, rng));
  Var h0 = constant(random_matrix(4, 1, rng));
  check_gradients(values(params), [&] {
    Var h = cell(x, cell(x, h0));
    return pick(log_softmax(head(h)), 1);
  });
}

TEST_CASE("adam minimizes a quadratic and parameter helpers round-trip") {
  Rng rng(6);
  Var w = parameter(random_matrix(3, 1, rng));
  NamedParameters params = {{"w", w}};
  const std::string digest = parameter_digest(params);
  const auto saved = snapshot(params);
  Adam opt(values(params), AdamConfig{.lr = 0.05});
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    backward(sum(mul(add_scalar(w, -1.0), add_scalar(w, -1.0))));
    opt.step();
  }
  CHECK((w.value().array() - 1.0).abs().maxCoeff() < 1e-3);
  CHECK(parameter_digest(params) != digest);
  const auto j = parameters_to_json(params);
  restore(params, saved);
  CHECK(parameter_digest(params) == digest);
  parameters_from_json(j, params);
  CHECK((w.value().array() - 1.0).abs().maxCoeff() < 1e-3);
}
