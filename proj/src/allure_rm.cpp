#include "copywriter/allure_rm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include <spdlog/spdlog.h>

#include "copywriter/random.hpp"

namespace copywriter::allure {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void append_metrics(const std::filesystem::path& path, const EpochMetrics& m, ModelKind kind) {
  std::filesystem::create_directories(path.parent_path());
  nlohmann::ordered_json j;
  j["v"] = kSchemaVersion;
  j["model"] = to_string(kind);
  j["epoch"] = m.epoch;
  j["train_loss"] = m.train_loss;
  j["dev_rmse"] = m.dev_rmse;
  j["dev_accuracy"] = m.dev_accuracy;
  std::ofstream out(path, std::ios::app);
  out << j.dump() << '\n';
}

void check_finite(double loss, int epoch, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw std::runtime_error("non-finite allure loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step));
  }
}

std::vector<std::size_t> order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  return idx;
}

class Recorder {
 public:
  Recorder(const TrainConfig& config, ModelKind kind) : kind_(kind) {
    if (!config.run_dir) return;
    dir_ = *config.run_dir / "allure";
    std::filesystem::create_directories(dir_);
    std::filesystem::remove(dir_ / "metrics.jsonl");
  }
  void epoch(const EpochMetrics& m, const AllureModel& model, bool is_best) {
    if (dir_.empty()) return;
    append_metrics(dir_ / "metrics.jsonl", m, kind_);
    model.save(dir_ / "last");
    if (is_best) model.save(dir_ / "best");
  }

 private:
  std::filesystem::path dir_;
  ModelKind kind_;
};

}  // namespace

std::string_view to_string(ModelKind kind) {
  return kind == ModelKind::kRegression ? "regression" : "siamese";
}

AllureModel::AllureModel(ModelKind kind, Vocabulary vocab, EncoderConfig config, std::uint64_t seed)
    : kind_(kind), vocab_(std::move(vocab)), config_(config) {
  if (config_.max_tokens < 2) throw std::invalid_argument("max_tokens must be at least 2");
  Rng rng(seed);
  embed_ = nn::Embedding(vocab_.size(), config_.embed_dim, rng);
  proj_ = nn::Linear(config_.embed_dim, config_.hidden, rng);
  head_ = nn::Linear(config_.hidden, 1, rng);
}

std::vector<int> AllureModel::encode(const Aspect& aspect, std::string_view text, bool* truncated) const {
  std::vector<int> ids = vocab_.encode(aspect.surface);
  ids.push_back(Vocabulary::kSep);
  const auto body = vocab_.encode(text);
  const std::size_t budget = static_cast<std::size_t>(config_.max_tokens);
  const std::size_t room = ids.size() >= budget ? 0 : budget - ids.size();
  const bool cut = body.size() > room;
  ids.insert(ids.end(), body.begin(), body.begin() + static_cast<std::ptrdiff_t>(std::min(room, body.size())));
  if (truncated) *truncated = cut;
  return ids;
}

nn::Var AllureModel::raw(const std::vector<std::vector<int>>& batch) const {
  std::vector<nn::Var> pooled;
  pooled.reserve(batch.size());
  for (const auto& ids : batch) pooled.push_back(nn::mean_cols(embed_(ids)));
  const nn::Var x = nn::concat_cols(pooled);
  return head_(nn::tanh(proj_(x)));
}

ScoreResult AllureModel::score(const Aspect& aspect, std::string_view text) const {
  if (text.empty()) throw std::invalid_argument("score_allure: empty text");
  nn::NoGradGuard guard;
  ScoreResult r;
  const auto ids = encode(aspect, text, &r.truncated);
  r.value = sigmoid(raw({ids}).scalar());
  return r;
}

double AllureModel::pair_probability(const Aspect& aspect, std::string_view a, std::string_view b) const {
  nn::NoGradGuard guard;
  const auto out = raw({encode(aspect, a), encode(aspect, b)}).value();
  return sigmoid(out(0, 0) - out(0, 1));
}

nn::NamedParameters AllureModel::parameters() const {
  nn::NamedParameters params;
  embed_.collect("embed", params);
  proj_.collect("proj", params);
  head_.collect("head", params);
  return params;
}

AllureModel AllureModel::clone() const {
  AllureModel copy(kind_, vocab_, config_, 0);
  nn::restore(copy.parameters(), nn::snapshot(parameters()));
  return copy;
}

void AllureModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["v"] = kSchemaVersion;
  j["kind"] = to_string(kind_);
  j["encoder"] = {{"embed_dim", config_.embed_dim}, {"hidden", config_.hidden}, {"max_tokens", config_.max_tokens}};
  j["vocab"] = vocab_.to_json();
  j["params"] = nn::parameters_to_json(parameters());
  std::ofstream out(dir / "model.json");
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "model.json").string());
}

AllureModel AllureModel::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw std::runtime_error("no allure checkpoint at " + dir.string());
  const auto j = nlohmann::json::parse(in);
  const std::string kind = j.at("kind");
  EncoderConfig cfg;
  cfg.embed_dim = j.at("encoder").at("embed_dim");
  cfg.hidden = j.at("encoder").at("hidden");
  cfg.max_tokens = j.at("encoder").at("max_tokens");
  AllureModel model(kind == "siamese" ? ModelKind::kSiamese : ModelKind::kRegression,
                    Vocabulary::from_json(j.at("vocab")), cfg, 0);
  nn::parameters_from_json(j.at("params"), model.parameters());
  return model;
}

Vocabulary build_vocabulary(const std::vector<AllureExample>& examples, const std::vector<PairExample>& pairs) {
  std::vector<std::string> texts;
  for (const auto& e : examples) {
    texts.push_back(e.aspect.surface);
    texts.push_back(e.text);
  }
  for (const auto& p : pairs) {
    texts.push_back(p.aspect.surface);
    texts.push_back(p.winner_text);
    texts.push_back(p.loser_text);
  }
  return Vocabulary::build(texts, true);
}

FitResult fit_regression(const std::vector<AllureExample>& train, const std::vector<AllureExample>& dev,
                         const TrainConfig& config, const EncoderConfig& encoder,
                         std::optional<Vocabulary> vocab) {
  if (train.empty()) throw std::invalid_argument("fit_regression: empty training set");
  for (const auto& e : train) {
    if (!(e.label >= 0.0 && e.label <= 1.0)) throw std::invalid_argument("labels must lie in [0,1]");
  }
  if (dev.empty()) spdlog::warn("fit_regression: empty dev set, selecting on training RMSE");
  AllureModel model(ModelKind::kRegression, vocab ? *vocab : build_vocabulary(train), encoder, config.seed);
  nn::Adam opt(nn::values(model.parameters()), {.lr = config.lr, .clip_norm = config.clip_norm});
  Rng rng(config.seed ^ 0x5eedULL);
  Recorder recorder(config, ModelKind::kRegression);
  const auto& selection = dev.empty() ? train : dev;

  FitResult result{model.clone(), model.clone(), {}, 0};
  double best = std::numeric_limits<double>::infinity();
  std::size_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto idx = order(train.size(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(config.batch)) {
      const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(config.batch));
      std::vector<std::vector<int>> batch;
      nn::Matrix labels(1, static_cast<Eigen::Index>(end - start));
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(model.encode(train[idx[k]].aspect, train[idx[k]].text));
        labels(0, static_cast<Eigen::Index>(k - start)) = train[idx[k]].label;
      }
      opt.zero_grad();
      const nn::Var diff = nn::sub(nn::sigmoid(model.raw(batch)), nn::constant(labels));
      const nn::Var loss = nn::mean(nn::mul(diff, diff));
      check_finite(loss.scalar(), epoch, ++step);
      nn::backward(loss);
      opt.step();
      loss_sum += loss.scalar();
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(batches);
    m.dev_rmse = evaluate_rm(as_score_fn(model), {}, selection).rmse;
    result.history.push_back(m);
    const bool is_best = m.dev_rmse < best;
    if (is_best) {
      best = m.dev_rmse;
      result.best = model.clone();
      result.best_epoch = epoch;
    }
    recorder.epoch(m, model, is_best);
    spdlog::debug("regression epoch {} loss {:.5f} dev rmse {:.5f}", epoch, m.train_loss, m.dev_rmse);
  }
  result.last = model.clone();
  return result;
}

FitResult fit_siamese(const std::vector<PairExample>& train, const std::vector<PairExample>& dev,
                      const TrainConfig& config, const EncoderConfig& encoder, std::optional<Vocabulary> vocab) {
  if (train.empty()) throw std::invalid_argument("fit_siamese: empty training set");
  for (const auto& p : train) {
    if (p.winner_text.empty() || p.loser_text.empty()) throw std::invalid_argument("empty pair text");
  }
  if (dev.empty()) spdlog::warn("fit_siamese: empty dev set, selecting on training accuracy");
  AllureModel model(ModelKind::kSiamese, vocab ? *vocab : build_vocabulary({}, train), encoder, config.seed);
  nn::Adam opt(nn::values(model.parameters()), {.lr = config.lr, .clip_norm = config.clip_norm});
  Rng rng(config.seed ^ 0x5eedULL);
  Recorder recorder(config, ModelKind::kSiamese);
  const auto& selection = dev.empty() ? train : dev;

  FitResult result{model.clone(), model.clone(), {}, 0};
  double best = -1.0;
  std::size_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto idx = order(train.size(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(config.batch)) {
      const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(config.batch));
      const auto n = static_cast<Eigen::Index>(end - start);
      std::vector<std::vector<int>> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(model.encode(train[idx[k]].aspect, train[idx[k]].winner_text));
      for (std::size_t k = start; k < end; ++k) batch.push_back(model.encode(train[idx[k]].aspect, train[idx[k]].loser_text));
      opt.zero_grad();
      const nn::Var raw = nn::transpose(model.raw(batch));  // 2n x 1
      const nn::Var logits = nn::sub(nn::slice_rows(raw, 0, n), nn::slice_rows(raw, n, n));
      const nn::Var loss = nn::bce_with_logits(logits, nn::Matrix::Ones(n, 1));
      check_finite(loss.scalar(), epoch, ++step);
      nn::backward(loss);
      opt.step();
      loss_sum += loss.scalar();
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(batches);
    m.dev_accuracy = evaluate_rm(as_score_fn(model), selection, {}).pairwise_accuracy;
    result.history.push_back(m);
    const bool is_best = m.dev_accuracy > best;
    if (is_best) {
      best = m.dev_accuracy;
      result.best = model.clone();
      result.best_epoch = epoch;
    }
    recorder.epoch(m, model, is_best);
    spdlog::debug("siamese epoch {} loss {:.5f} dev acc {:.4f}", epoch, m.train_loss, m.dev_accuracy);
  }
  result.last = model.clone();
  return result;
}

double score_allure(const AllureModel& model, const Aspect& aspect, std::string_view text) {
  return model.score(aspect, text).value;
}

ScoreFn as_score_fn(const AllureModel& model) {
  return [&model](const Aspect& aspect, const std::string& text) { return model.score(aspect, text).value; };
}

RmMetrics evaluate_rm(const ScoreFn& scorer, const std::vector<PairExample>& comparisons,
                      const std::vector<AllureExample>& examples) {
  if (comparisons.empty() && examples.empty()) throw std::invalid_argument("evaluate_rm: empty test set");
  RmMetrics m;
  if (!comparisons.empty()) {
    double agree = 0.0;
    for (const auto& c : comparisons) {
      const double w = scorer(c.aspect, c.winner_text);
      const double l = scorer(c.aspect, c.loser_text);
      agree += w > l ? 1.0 : (w == l ? 0.5 : 0.0);
    }
    m.pairwise_accuracy = agree / static_cast<double>(comparisons.size());
  }
  if (!examples.empty()) {
    // Sorted accumulation keeps the result independent of input order.
    std::vector<double> sq;
    sq.reserve(examples.size());
    for (const auto& e : examples) {
      const double d = scorer(e.aspect, e.text) - e.label;
      sq.push_back(d * d);
    }
    std::sort(sq.begin(), sq.end());
    double total = 0.0;
    for (double v : sq) total += v;
    m.rmse = std::sqrt(total / static_cast<double>(sq.size()));
  }
  return m;
}

SweepResult sweep_regression(const std::vector<AllureExample>& train, const std::vector<AllureExample>& dev,
                             const TrainConfig& config, const std::vector<double>& lrs,
                             const EncoderConfig& encoder) {
  if (lrs.empty()) throw std::invalid_argument("sweep_regression: empty learning-rate grid");
  std::optional<SweepResult> best;
  double best_rmse = std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, double>> table;
  for (double lr : lrs) {
    TrainConfig cfg = config;
    cfg.lr = lr;
    cfg.run_dir.reset();
    auto fit = fit_regression(train, dev, cfg, encoder);
    const double rmse = fit.history.at(static_cast<std::size_t>(fit.best_epoch - 1)).dev_rmse;
    spdlog::info("lr {:g}: best dev rmse {:.5f}", lr, rmse);
    table.emplace_back(lr, rmse);
    if (!best || rmse < best_rmse) {
      best_rmse = rmse;
      best = SweepResult{lr, {}, std::move(fit)};
    }
  }
  best->dev_rmse_by_lr = std::move(table);
  if (config.run_dir) {
    const auto dir = *config.run_dir / "allure";
    best->fit.best.save(dir / "best");
    best->fit.last.save(dir / "last");
  }
  return *best;
}

}  // namespace copywriter::allure
