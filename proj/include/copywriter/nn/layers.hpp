#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "copywriter/nn/autograd.hpp"
#include "copywriter/random.hpp"

namespace copywriter::nn {

using NamedParameters = std::vector<std::pair<std::string, Var>>;

// Xavier/Glorot uniform initialization.
Matrix xavier(Eigen::Index rows, Eigen::Index cols, Rng& rng);

struct Linear {
  Var weight;
  Var bias;

  Linear() = default;
  Linear(Eigen::Index in, Eigen::Index out, Rng& rng);

  // x is in x m; returns out x m.
  Var operator()(const Var& x) const { return add_col(matmul(weight, x), bias); }
  void collect(const std::string& prefix, NamedParameters& out) const;
};

struct Embedding {
  Var table;  // dim x vocab

  Embedding() = default;
  Embedding(Eigen::Index vocab, Eigen::Index dim, Rng& rng);

  Var operator()(std::span<const int> ids) const { return gather_cols(table, ids); }
  void collect(const std::string& prefix, NamedParameters& out) const;
};

struct GruCell {
  Linear input_gates;   // x -> [z; r; n]
  Linear hidden_gates;  // h -> [z; r; n]
  Eigen::Index hidden = 0;

  GruCell() = default;
  GruCell(Eigen::Index in, Eigen::Index hidden, Rng& rng);

  Var operator()(const Var& x, const Var& h) const;
  void collect(const std::string& prefix, NamedParameters& out) const;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

class Adam {
 public:
  Adam(std::vector<Var> params, AdamConfig config);

  void zero_grad();
  // Returns the pre-clip global gradient norm.
  double step();
  void set_lr(double lr) { config_.lr = lr; }

 private:
  std::vector<Var> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  AdamConfig config_;
  long long t_ = 0;
};

std::vector<Var> values(const NamedParameters& params);

nlohmann::json parameters_to_json(const NamedParameters& params);
// Copies values into existing parameters; names and shapes must match.
void parameters_from_json(const nlohmann::json& j, const NamedParameters& params);

// Deep copy of parameter values, for snapshots.
std::vector<Matrix> snapshot(const NamedParameters& params);
void restore(const NamedParameters& params, const std::vector<Matrix>& values);

// SHA-256 over the raw bytes of every parameter, in order.
std::string parameter_digest(const NamedParameters& params);

}  // namespace copywriter::nn
