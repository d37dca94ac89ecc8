#include "copywriter/nn/layers.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

#include "copywriter/digest.hpp"

namespace copywriter::nn {

Matrix xavier(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = (2.0 * rng.uniform() - 1.0) * bound;
  }
  return m;
}

Linear::Linear(Eigen::Index in, Eigen::Index out, Rng& rng)
    : weight(parameter(xavier(out, in, rng))), bias(parameter(Matrix::Zero(out, 1))) {}

void Linear::collect(const std::string& prefix, NamedParameters& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

Embedding::Embedding(Eigen::Index vocab, Eigen::Index dim, Rng& rng) {
  Matrix m(dim, vocab);
  for (Eigen::Index c = 0; c < vocab; ++c) {
    for (Eigen::Index r = 0; r < dim; ++r) m(r, c) = rng.normal(0.0, 0.3);
  }
  table = parameter(std::move(m));
}

void Embedding::collect(const std::string& prefix, NamedParameters& out) const {
  out.emplace_back(prefix + ".table", table);
}

GruCell::GruCell(Eigen::Index in, Eigen::Index hidden_size, Rng& rng)
    : input_gates(in, 3 * hidden_size, rng),
      hidden_gates(hidden_size, 3 * hidden_size, rng),
      hidden(hidden_size) {}

Var GruCell::operator()(const Var& x, const Var& h) const {
  const Var gx = input_gates(x);
  const Var gh = hidden_gates(h);
  auto rows = [this](const Var& v, Eigen::Index block) {
    return slice_rows(v, block * hidden, hidden);
  };
  const Var z = sigmoid(add(rows(gx, 0), rows(gh, 0)));
  const Var r = sigmoid(add(rows(gx, 1), rows(gh, 1)));
  const Var n = tanh(add(rows(gx, 2), mul(r, rows(gh, 2))));
  // h' = (1 - z) * n + z * h
  return add(n, mul(z, sub(h, n)));
}

void GruCell::collect(const std::string& prefix, NamedParameters& out) const {
  input_gates.collect(prefix + ".input", out);
  hidden_gates.collect(prefix + ".hidden", out);
}

Adam::Adam(std::vector<Var> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double Adam::step() {
  double sq = 0.0;
  for (const auto& p : params_) {
    if (p.grad().size() != 0) sq += p.grad().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  const double clip =
      (config_.clip_norm > 0.0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.grad().size() == 0) continue;
    const Matrix g = p.grad() * clip;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    p.mutable_value().array() -=
        config_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps);
  }
  return norm;
}

std::vector<Var> values(const NamedParameters& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const auto& [_, v] : params) out.push_back(v);
  return out;
}

nlohmann::json parameters_to_json(const NamedParameters& params) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, v] : params) {
    const Matrix& m = v.value();
    std::vector<double> data(m.data(), m.data() + m.size());
    j[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
  }
  return j;
}

void parameters_from_json(const nlohmann::json& j, const NamedParameters& params) {
  for (const auto& [name, v] : params) {
    if (!j.contains(name)) throw std::runtime_error("checkpoint missing parameter " + name);
    const auto& entry = j.at(name);
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    const auto data = entry.at("data").get<std::vector<double>>();
    if (rows != v.rows() || cols != v.cols() || static_cast<Eigen::Index>(data.size()) != rows * cols) {
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    }
    Var handle = v;
    handle.mutable_value() = Eigen::Map<const Matrix>(data.data(), rows, cols);
  }
}

std::vector<Matrix> snapshot(const NamedParameters& params) {
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (const auto& [_, v] : params) out.push_back(v.value());
  return out;
}

void restore(const NamedParameters& params, const std::vector<Matrix>& vals) {
  if (vals.size() != params.size()) throw std::invalid_argument("restore: size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var handle = params[i].second;
    handle.mutable_value() = vals[i];
  }
}

std::string parameter_digest(const NamedParameters& params) {
  std::string bytes;
  for (const auto& [name, v] : params) {
    bytes += name;
    const Matrix& m = v.value();
    bytes.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  return sha256_hex(bytes);
}

}  // namespace copywriter::nn
