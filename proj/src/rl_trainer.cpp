#include "copywriter/rl_trainer.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"
#include <spdlog/spdlog.h>

#include "copywriter/digest.hpp"
#include "copywriter/random.hpp"

namespace copywriter::rl {

namespace {

struct Sample {
  std::vector<int> source;
  std::vector<int> tokens;
  nn::Matrix old_log_probs;  // 1 x T under the rollout policy
  nn::Matrix kl_per_token;   // 1 x T
  RewardBundle bundle;
};

std::uint64_t rollout_seed(std::uint64_t seed, int epoch, std::size_t prompt, int rollout) {
  return stable_hash64(std::to_string(seed) + ":" + std::to_string(epoch) + ":" + std::to_string(prompt) + ":" +
                       std::to_string(rollout));
}

void whiten(std::vector<nn::Matrix>& advantages) {
  double n = 0.0, sum = 0.0;
  for (const auto& a : advantages) {
    sum += a.sum();
    n += static_cast<double>(a.size());
  }
  if (n == 0.0) return;
  const double mean = sum / n;
  double var = 0.0;
  for (const auto& a : advantages) var += (a.array() - mean).square().sum();
  const double sd = std::sqrt(var / n);
  for (auto& a : advantages) {
    a = (a.array() - mean).matrix();
    if (sd > 1e-8) a /= sd;
  }
}

std::vector<nn::Matrix> advantages(const std::vector<Sample>& samples, bool per_token_kl) {
  std::vector<nn::Matrix> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const auto T = static_cast<Eigen::Index>(s.tokens.size());
    if (!per_token_kl) {
      out.push_back(nn::Matrix::Constant(1, T, s.bundle.total));
      continue;
    }
    // Per-step reward -kl_t, with the task reward paid on the last step;
    // the advantage is the undiscounted return from each step.
    nn::Matrix r = -s.kl_per_token;
    r(0, T - 1) += s.bundle.total + s.bundle.kl_penalty;
    nn::Matrix ret(1, T);
    double acc = 0.0;
    for (Eigen::Index t = T - 1; t >= 0; --t) ret(0, t) = acc += r(0, t);
    out.push_back(ret);
  }
  whiten(out);
  return out;
}

void write_metrics(const std::filesystem::path& dir, const EpochStats& s) {
  nlohmann::ordered_json j;
  j["v"] = kSchemaVersion;
  j["epoch"] = s.epoch;
  j["samples"] = s.samples;
  j["skipped"] = s.skipped;
  j["mean_r_a"] = s.mean_r_a;
  j["mean_r_v"] = s.mean_r_v;
  j["mean_r_i"] = s.mean_r_i;
  j["mean_kl"] = s.mean_kl;
  j["mean_total"] = s.mean_total;
  std::ofstream(dir / "metrics.jsonl", std::ios::app) << j.dump() << '\n';
}

}  // namespace

void validate(const RLConfig& cfg) {
  const auto& w = cfg.weights;
  if (!std::isfinite(w.alpha) || !std::isfinite(w.beta) || !std::isfinite(w.gamma)) {
    throw std::invalid_argument("reward weights must be finite");
  }
  if (cfg.batch < 1 || cfg.epochs < 0 || cfg.rollouts_per_prompt < 1) {
    throw std::invalid_argument("batch and rollouts_per_prompt must be positive");
  }
  if (!(cfg.clip_ratio > 0.0)) throw std::invalid_argument("clip_ratio must be positive");
}

RewardBundle composite_reward(double r_a, double r_v, double r_i, double logprob_new, double logprob_old,
                              const RLConfig& cfg) {
  for (double x : {r_a, r_v, r_i, logprob_new, logprob_old}) {
    if (!std::isfinite(x)) throw std::invalid_argument("composite_reward: non-finite input");
  }
  validate(cfg);
  RewardBundle b;
  b.weights = cfg.weights;
  b.r_a = cfg.use_allure ? r_a : 0.0;
  b.r_v = cfg.use_veracity ? r_v : 0.0;
  b.r_i = cfg.use_information ? r_i : 0.0;
  b.kl_penalty = logprob_new - logprob_old;
  b.total = cfg.weights.alpha * b.r_a + cfg.weights.beta * b.r_v + cfg.weights.gamma * b.r_i - b.kl_penalty;
  return b;
}

RlResult ppo_train(gen::PolicyHandle& policy, const gen::PolicyHandle& reference, const RewardModels& rewards,
                   const std::vector<Prompt>& prompts, const RLConfig& cfg) {
  validate(cfg);
  if (prompts.empty()) throw std::invalid_argument("ppo_train: no prompts");
  if (reference.role() != gen::Role::kReference) throw std::invalid_argument("reference handle must be frozen");
  if ((cfg.use_allure && !rewards.allure) || (cfg.use_veracity && !rewards.veracity) ||
      (cfg.use_information && !rewards.information)) {
    throw std::invalid_argument("an enabled reward has no scorer");
  }
  gen::Seq2SeqModel& model = policy.mutable_model();
  const gen::Seq2SeqModel& ref = reference.model();
  const auto params = model.parameters();
  nn::Adam opt(nn::values(params), {.lr = cfg.lr, .clip_norm = cfg.clip_norm});
  Rng rng(cfg.seed);

  std::filesystem::path dir;
  if (cfg.run_dir) {
    dir = *cfg.run_dir / "rl";
    std::filesystem::create_directories(dir);
    std::filesystem::remove(dir / "metrics.jsonl");
    std::filesystem::remove(dir / "rewards.jsonl");
  }

  std::vector<std::vector<int>> sources;
  sources.reserve(prompts.size());
  for (const auto& p : prompts) {
    sources.push_back(gen::encode_input(p.aspect, p.review, model.vocab(), model.config().max_source_tokens));
  }

  std::vector<EpochStats> history;
  int best_epoch = 0;
  double best_total = -std::numeric_limits<double>::infinity();
  std::vector<nn::Matrix> best = nn::snapshot(params);
  std::vector<std::size_t> order(prompts.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    EpochStats stats;
    stats.epoch = epoch;
    double abs_kl = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<Sample> batch;
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t pi = order[k];
        const Prompt& prompt = prompts[pi];
        for (int r = 0; r < cfg.rollouts_per_prompt; ++r) {
          gen::DecodeConfig dc = cfg.rollout;
          dc.seed = rollout_seed(cfg.seed, epoch, pi, r);
          const gen::Generation g = gen::generate_from_ids(model, sources[pi], dc);
          if (g.empty) {
            ++stats.skipped;
            continue;
          }
          Sample s;
          s.source = sources[pi];
          s.tokens = g.ids;
          if (g.eos) s.tokens.push_back(Vocabulary::kEos);
          double r_a = 0.0, r_v = 0.0, r_i = 0.0;
          try {
            if (cfg.use_allure) r_a = rewards.allure(prompt.aspect, g.text);
            if (cfg.use_veracity) r_v = rewards.veracity(prompt.review.text, g.text);
            if (cfg.use_information) r_i = rewards.information(prompt.aspect, prompt.review.text, g.text);
          } catch (const std::exception& e) {
            spdlog::warn("reward scoring failed for review {} aspect '{}': {}", prompt.review.id,
                         prompt.aspect.surface, e.what());
            ++stats.skipped;
            continue;
          }
          nn::Matrix ref_log_probs;
          {
            nn::NoGradGuard guard;
            s.old_log_probs = model.token_log_probs(s.source, s.tokens).value();
            ref_log_probs = ref.token_log_probs(s.source, s.tokens).value();
          }
          s.kl_per_token = s.old_log_probs - ref_log_probs;
          s.bundle = composite_reward(r_a, r_v, r_i, s.old_log_probs.sum(), ref_log_probs.sum(), cfg);
          stats.mean_r_a += s.bundle.r_a;
          stats.mean_r_v += s.bundle.r_v;
          stats.mean_r_i += s.bundle.r_i;
          stats.mean_kl += s.bundle.kl_penalty;
          stats.mean_total += s.bundle.total;
          abs_kl += std::abs(s.bundle.kl_penalty);
          ++stats.samples;
          batch.push_back(std::move(s));
        }
      }
      if (batch.empty()) continue;
      if (!dir.empty()) {
        std::ofstream out(dir / "rewards.jsonl", std::ios::app);
        for (const auto& s : batch) out << to_line(s.bundle) << '\n';
      }

      const auto adv = advantages(batch, cfg.per_token_kl);
      std::vector<nn::Var> terms;
      double tokens = 0.0;
      opt.zero_grad();
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& s = batch[i];
        const nn::Var lp = model.token_log_probs(s.source, s.tokens);
        const nn::Var ratio = nn::exp(nn::sub(lp, nn::constant(s.old_log_probs)));
        const nn::Var a = nn::constant(adv[i]);
        const nn::Var clipped = nn::clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
        terms.push_back(nn::sum(nn::minimum(nn::mul(ratio, a), nn::mul(clipped, a))));
        tokens += static_cast<double>(s.tokens.size());
      }
      const nn::Var loss = nn::scale(nn::add_n(terms), -1.0 / tokens);
      if (!std::isfinite(loss.scalar())) throw DivergenceError("non-finite PPO loss at epoch " + std::to_string(epoch));
      nn::backward(loss);
      opt.step();
    }

    if (stats.samples > 0) {
      const double n = stats.samples;
      stats.mean_r_a /= n;
      stats.mean_r_v /= n;
      stats.mean_r_i /= n;
      stats.mean_kl /= n;
      stats.mean_total /= n;
      abs_kl /= n;
    }
    history.push_back(stats);
    spdlog::info("rl epoch {} samples {} total {:.4f} r_a {:.4f} r_v {:.4f} r_i {:.4f} kl {:.4f}", epoch,
                 stats.samples, stats.mean_total, stats.mean_r_a, stats.mean_r_v, stats.mean_r_i, stats.mean_kl);
    if (!dir.empty()) write_metrics(dir, stats);
    if (abs_kl > cfg.kl_ceiling) {
      throw DivergenceError("mean |kl_penalty| " + std::to_string(abs_kl) + " exceeds ceiling at epoch " +
                            std::to_string(epoch));
    }
    const bool is_best = stats.samples > 0 && stats.mean_total > best_total;
    if (is_best) {
      best_total = stats.mean_total;
      best_epoch = epoch;
      best = nn::snapshot(params);
    }
    if (!dir.empty()) {
      model.save(dir / "last");
      if (is_best) model.save(dir / "best");
    }
  }

  if (!reference.frozen_intact()) throw std::logic_error("reference policy changed during training");
  gen::PolicyHandle best_handle = policy.clone();
  nn::restore(best_handle.mutable_model().parameters(), best);
  return RlResult{std::move(history), best_epoch, best_epoch > 0 ? best_total : 0.0, std::move(best_handle)};
}

}  // namespace copywriter::rl
