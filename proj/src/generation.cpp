#include "copywriter/generation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include <spdlog/spdlog.h>

#include "copywriter/random.hpp"

namespace copywriter::gen {

namespace {

nn::Matrix sigmoid(const nn::Matrix& x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); }

nn::Matrix affine(const nn::Linear& l, const nn::Matrix& x) {
  return (l.weight.value() * x).colwise() + l.bias.value().col(0);
}

nn::Matrix log_softmax_col(const nn::Matrix& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return (logits.array() - lse).matrix();
}

struct Hypothesis {
  std::vector<int> ids;
  nn::Matrix h;
  double log_prob = 0.0;
  bool done = false;
};

Generation decode(const Seq2SeqModel& model, const std::vector<int>& source, const DecodeConfig& dc) {
  if (dc.max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be positive");
  const EncoderState enc = model.encode(source);
  Generation g;
  if (dc.mode == DecodeMode::kBeam) {
    const int width = std::max(1, dc.beam_width);
    std::vector<Hypothesis> beams{{{}, enc.h0, 0.0, false}};
    for (int t = 0; t < dc.max_new_tokens; ++t) {
      std::vector<Hypothesis> next;
      for (const auto& b : beams) {
        if (b.done) {
          next.push_back(b);
          continue;
        }
        nn::Matrix h = b.h;
        const int prev = b.ids.empty() ? Vocabulary::kBos : b.ids.back();
        const nn::Matrix lp = log_softmax_col(model.step_logits(enc, h, prev));
        std::vector<int> order(static_cast<std::size_t>(lp.rows()));
        std::iota(order.begin(), order.end(), 0);
        const auto keep = std::min<std::size_t>(static_cast<std::size_t>(width), order.size());
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                          [&](int a, int c) { return lp(a, 0) > lp(c, 0) || (lp(a, 0) == lp(c, 0) && a < c); });
        for (std::size_t k = 0; k < keep; ++k) {
          Hypothesis n{b.ids, h, b.log_prob + lp(order[k], 0), order[k] == Vocabulary::kEos};
          if (!n.done) n.ids.push_back(order[k]);
          next.push_back(std::move(n));
        }
      }
      std::stable_sort(next.begin(), next.end(),
                       [](const Hypothesis& a, const Hypothesis& b) { return a.log_prob > b.log_prob; });
      if (next.size() > static_cast<std::size_t>(width)) next.resize(static_cast<std::size_t>(width));
      beams = std::move(next);
      if (std::all_of(beams.begin(), beams.end(), [](const Hypothesis& b) { return b.done; })) break;
    }
    g.ids = beams.front().ids;
    g.log_prob = beams.front().log_prob;
    g.eos = beams.front().done;
  } else {
    Rng rng(dc.seed);
    nn::Matrix h = enc.h0;
    int prev = Vocabulary::kBos;
    for (int t = 0; t < dc.max_new_tokens; ++t) {
      const nn::Matrix logits = model.step_logits(enc, h, prev);
      const nn::Matrix lp = log_softmax_col(logits);
      int pick = 0;
      if (dc.mode == DecodeMode::kGreedy) {
        lp.col(0).maxCoeff(&pick);
      } else {
        const nn::Matrix scaled = log_softmax_col(logits / std::max(dc.temperature, 1e-6));
        double u = rng.uniform();
        pick = static_cast<int>(scaled.rows()) - 1;
        for (Eigen::Index i = 0; i < scaled.rows(); ++i) {
          u -= std::exp(scaled(i, 0));
          if (u < 0.0) {
            pick = static_cast<int>(i);
            break;
          }
        }
      }
      g.log_prob += lp(pick, 0);
      if (pick == Vocabulary::kEos) {
        g.eos = true;
        break;
      }
      g.ids.push_back(pick);
      prev = pick;
    }
  }
  g.text = model.vocab().decode(g.ids);
  return g;
}

}  // namespace

std::vector<int> encode_input(const Aspect& aspect, const Review& review, const Vocabulary& vocab,
                              int max_source_tokens) {
  const auto report = validate(aspect);
  if (!report.ok()) throw std::invalid_argument("invalid aspect: " + report.violations.front().message);
  std::vector<int> ids = vocab.encode(aspect.surface);
  ids.push_back(Vocabulary::kSep);
  if (static_cast<int>(ids.size()) > max_source_tokens) {
    throw std::invalid_argument("aspect does not fit in the source budget");
  }
  const auto body = vocab.encode(review.text);
  const std::size_t room = static_cast<std::size_t>(max_source_tokens) - ids.size();
  ids.insert(ids.end(), body.begin(), body.begin() + static_cast<std::ptrdiff_t>(std::min(room, body.size())));
  return ids;
}

Seq2SeqModel::Seq2SeqModel(Vocabulary vocab, ModelConfig config, std::uint64_t seed)
    : vocab_(std::move(vocab)), config_(config) {
  Rng rng(seed);
  embed_ = nn::Embedding(vocab_.size(), config_.embed_dim, rng);
  enc_proj_ = nn::Linear(config_.embed_dim, config_.hidden, rng);
  init_ = nn::Linear(config_.hidden, config_.hidden, rng);
  gru_ = nn::GruCell(config_.embed_dim, config_.hidden, rng);
  out_ = nn::Linear(2 * config_.hidden, vocab_.size(), rng);
}

nn::Var Seq2SeqModel::token_log_probs(const std::vector<int>& source, const std::vector<int>& target) const {
  if (source.empty()) throw std::invalid_argument("empty source");
  if (target.empty()) throw std::invalid_argument("empty target");
  const nn::Var enc = nn::tanh(enc_proj_(embed_(source)));
  nn::Var h = nn::tanh(init_(nn::mean_cols(enc)));
  std::vector<nn::Var> hs;
  hs.reserve(target.size());
  int prev = Vocabulary::kBos;
  for (int id : target) {
    const int one[] = {prev};
    h = gru_(embed_(one), h);
    hs.push_back(h);
    prev = id;
  }
  const nn::Var H = nn::concat_cols(hs);
  const nn::Var attn = nn::softmax(nn::matmul(nn::transpose(enc), H));
  const nn::Var ctx = nn::matmul(enc, attn);
  const std::vector<nn::Var> parts = {H, ctx};
  const nn::Var lp = nn::log_softmax(out_(nn::concat_rows(parts)));
  nn::Matrix onehot = nn::Matrix::Zero(vocab_.size(), static_cast<Eigen::Index>(target.size()));
  for (std::size_t t = 0; t < target.size(); ++t) onehot(target[t], static_cast<Eigen::Index>(t)) = 1.0;
  const nn::Var ones = nn::constant(nn::Matrix::Ones(1, vocab_.size()));
  return nn::matmul(ones, nn::mul(lp, nn::constant(onehot)));
}

nn::Var Seq2SeqModel::sequence_nll(const std::vector<int>& source, const std::vector<int>& target) const {
  return nn::scale(nn::mean(token_log_probs(source, target)), -1.0);
}

EncoderState Seq2SeqModel::encode(const std::vector<int>& source) const {
  if (source.empty()) throw std::invalid_argument("empty source");
  EncoderState s;
  nn::Matrix emb(config_.embed_dim, static_cast<Eigen::Index>(source.size()));
  for (std::size_t i = 0; i < source.size(); ++i) emb.col(static_cast<Eigen::Index>(i)) = embed_.table.value().col(source[i]);
  s.states = affine(enc_proj_, emb).array().tanh().matrix();
  s.h0 = affine(init_, s.states.rowwise().mean()).array().tanh().matrix();
  return s;
}

nn::Matrix Seq2SeqModel::step_logits(const EncoderState& enc, nn::Matrix& h, int prev) const {
  const Eigen::Index H = config_.hidden;
  const nn::Matrix x = embed_.table.value().col(prev);
  const nn::Matrix gx = affine(gru_.input_gates, x);
  const nn::Matrix gh = affine(gru_.hidden_gates, h);
  const nn::Matrix z = sigmoid(gx.middleRows(0, H) + gh.middleRows(0, H));
  const nn::Matrix r = sigmoid(gx.middleRows(H, H) + gh.middleRows(H, H));
  const nn::Matrix n = (gx.middleRows(2 * H, H).array() + r.array() * gh.middleRows(2 * H, H).array()).tanh().matrix();
  h = (n.array() + z.array() * (h.array() - n.array())).matrix();
  nn::Matrix scores = enc.states.transpose() * h;
  scores = (scores.array() - scores.maxCoeff()).exp().matrix();
  scores /= scores.sum();
  nn::Matrix joined(2 * H, 1);
  joined << h, enc.states * scores;
  return affine(out_, joined);
}

nn::NamedParameters Seq2SeqModel::parameters() const {
  nn::NamedParameters params;
  embed_.collect("embed", params);
  enc_proj_.collect("enc_proj", params);
  init_.collect("init", params);
  gru_.collect("gru", params);
  out_.collect("out", params);
  return params;
}

std::unique_ptr<Seq2SeqModel> Seq2SeqModel::clone() const {
  auto copy = std::make_unique<Seq2SeqModel>(vocab_, config_, 0);
  nn::restore(copy->parameters(), nn::snapshot(parameters()));
  return copy;
}

void Seq2SeqModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["v"] = kSchemaVersion;
  j["config"] = {{"embed_dim", config_.embed_dim},
                 {"hidden", config_.hidden},
                 {"max_source_tokens", config_.max_source_tokens}};
  j["vocab"] = vocab_.to_json();
  j["params"] = nn::parameters_to_json(parameters());
  std::ofstream out(dir / "model.json");
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "model.json").string());
}

std::unique_ptr<Seq2SeqModel> Seq2SeqModel::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw std::runtime_error("no generator checkpoint at " + dir.string());
  const auto j = nlohmann::json::parse(in);
  ModelConfig cfg;
  cfg.embed_dim = j.at("config").at("embed_dim");
  cfg.hidden = j.at("config").at("hidden");
  cfg.max_source_tokens = j.at("config").at("max_source_tokens");
  auto model = std::make_unique<Seq2SeqModel>(Vocabulary::from_json(j.at("vocab")), cfg, 0);
  nn::parameters_from_json(j.at("params"), model->parameters());
  return model;
}

PolicyHandle::PolicyHandle(std::unique_ptr<Seq2SeqModel> model) : model_(std::move(model)) {
  if (!model_) throw std::invalid_argument("null model");
}

Seq2SeqModel& PolicyHandle::mutable_model() {
  if (role_ == Role::kReference) throw std::logic_error("reference policy is frozen");
  return *model_;
}

PolicyHandle PolicyHandle::frozen_copy() const {
  PolicyHandle copy(model_->clone());
  copy.role_ = Role::kReference;
  copy.frozen_digest_ = copy.digest();
  return copy;
}

PolicyHandle PolicyHandle::clone() const {
  PolicyHandle copy(model_->clone());
  copy.role_ = role_;
  copy.frozen_digest_ = frozen_digest_;
  return copy;
}

bool PolicyHandle::frozen_intact() const { return role_ == Role::kPolicy || digest() == frozen_digest_; }

std::string PolicyHandle::digest() const { return nn::parameter_digest(model_->parameters()); }

std::vector<int> target_ids(const Vocabulary& vocab, const std::string& reference) {
  std::vector<int> ids = vocab.encode(reference);
  ids.push_back(Vocabulary::kEos);
  return ids;
}

Vocabulary build_vocabulary(const std::vector<SftExample>& corpus) {
  std::vector<std::string> texts;
  for (const auto& e : corpus) {
    texts.push_back(e.aspect.surface);
    texts.push_back(e.review.text);
    texts.push_back(e.reference);
  }
  return Vocabulary::build(texts, false);
}

nn::Var sft_loss(const Seq2SeqModel& model, const std::vector<const SftExample*>& batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  std::vector<nn::Var> terms;
  terms.reserve(batch.size());
  for (const auto* e : batch) {
    const auto src = encode_input(e->aspect, e->review, model.vocab(), model.config().max_source_tokens);
    terms.push_back(model.sequence_nll(src, target_ids(model.vocab(), e->reference)));
  }
  return nn::scale(nn::add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

double mean_loss(const Seq2SeqModel& model, const std::vector<SftExample>& data) {
  if (data.empty()) throw std::invalid_argument("mean_loss: empty data");
  nn::NoGradGuard guard;
  double total = 0.0;
  for (const auto& e : data) total += sft_loss(model, {&e}).scalar();
  return total / static_cast<double>(data.size());
}

SftResult train_sft(PolicyHandle& policy, const std::vector<SftExample>& train,
                    const std::vector<SftExample>& dev, const SftConfig& config) {
  if (train.empty()) throw std::invalid_argument("train_sft: empty corpus");
  Seq2SeqModel& model = policy.mutable_model();
  const auto params = model.parameters();
  nn::Adam opt(nn::values(params), {.lr = config.lr, .clip_norm = config.clip_norm});
  Rng rng(config.seed);
  std::filesystem::path dir;
  if (config.run_dir) {
    dir = *config.run_dir / "sft";
    std::filesystem::create_directories(dir);
    std::filesystem::remove(dir / "metrics.jsonl");
  }

  SftResult result;
  result.best_loss = std::numeric_limits<double>::infinity();
  std::vector<nn::Matrix> best = nn::snapshot(params);
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  bool stop = false;
  for (int epoch = 1; epoch <= config.epochs && !stop; ++epoch) {
    rng.shuffle(idx);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < idx.size() && !stop; start += static_cast<std::size_t>(config.batch)) {
      std::vector<const SftExample*> batch;
      for (std::size_t k = start; k < std::min(idx.size(), start + static_cast<std::size_t>(config.batch)); ++k) {
        batch.push_back(&train[idx[k]]);
      }
      opt.zero_grad();
      const nn::Var loss = sft_loss(model, batch);
      if (!std::isfinite(loss.scalar())) {
        throw std::runtime_error("non-finite SFT loss at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(result.steps + 1));
      }
      nn::backward(loss);
      opt.step();
      loss_sum += loss.scalar();
      ++batches;
      ++result.steps;
      if (config.max_steps > 0 && result.steps >= config.max_steps) stop = true;
    }
    SftEpoch m;
    m.epoch = epoch;
    m.steps = result.steps;
    m.train_loss = loss_sum / batches;
    if (!dev.empty()) m.dev_loss = mean_loss(model, dev);
    const double selection = m.dev_loss.value_or(m.train_loss);
    const bool is_best = selection < result.best_loss;
    if (is_best) {
      result.best_loss = selection;
      result.best_epoch = epoch;
      best = nn::snapshot(params);
    }
    result.history.push_back(m);
    if (!dir.empty()) {
      nlohmann::ordered_json j;
      j["v"] = kSchemaVersion;
      j["epoch"] = epoch;
      j["steps"] = m.steps;
      j["train_loss"] = m.train_loss;
      if (m.dev_loss) j["dev_loss"] = *m.dev_loss;
      std::ofstream(dir / "metrics.jsonl", std::ios::app) << j.dump() << '\n';
      model.save(dir / "last");
      if (is_best) model.save(dir / "best");
    }
    spdlog::debug("sft epoch {} loss {:.5f}", epoch, m.train_loss);
    if (config.target_loss > 0.0 && m.train_loss < config.target_loss) stop = true;
  }
  nn::restore(params, best);
  return result;
}

std::string_view to_string(DecodeMode mode) {
  switch (mode) {
    case DecodeMode::kGreedy: return "greedy";
    case DecodeMode::kSample: return "sample";
    case DecodeMode::kBeam: return "beam";
  }
  return "beam";
}

DecodeMode parse_decode_mode(std::string_view name) {
  if (name == "greedy") return DecodeMode::kGreedy;
  if (name == "sample") return DecodeMode::kSample;
  if (name == "beam") return DecodeMode::kBeam;
  throw std::invalid_argument("unknown decode mode: " + std::string(name));
}

Generation generate_from_ids(const Seq2SeqModel& model, const std::vector<int>& source, const DecodeConfig& dc) {
  Generation g = decode(model, source, dc);
  if (g.text.empty() && dc.mode != DecodeMode::kGreedy) {
    DecodeConfig greedy = dc;
    greedy.mode = DecodeMode::kGreedy;
    g = decode(model, source, greedy);
    g.retried_greedy = true;
  }
  g.empty = g.text.empty();
  if (g.empty) spdlog::warn("empty generation after greedy retry");
  return g;
}

Generation generate(const PolicyHandle& policy, const Aspect& aspect, const Review& review, const DecodeConfig& dc) {
  const auto& model = policy.model();
  return generate_from_ids(model, encode_input(aspect, review, model.vocab(), model.config().max_source_tokens), dc);
}

}  // namespace copywriter::gen
