#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "copywriter/generation.hpp"
#include "copywriter/records.hpp"

namespace copywriter::rl {

struct RLConfig {
  double lr = 1e-6;
  int batch = 32;
  int epochs = 20;
  RewardWeights weights;
  bool use_allure = true;
  bool use_veracity = true;
  bool use_information = true;
  gen::DecodeConfig rollout = {gen::DecodeMode::kSample, 1.0, 1, 30, 0};
  std::uint64_t seed = 1;
  double clip_ratio = 0.2;
  // Samples drawn per prompt in each epoch.
  int rollouts_per_prompt = 1;
  // Distribute the KL term over tokens as per-step rewards.
  bool per_token_kl = false;
  // Abort when an epoch's mean |kl_penalty| exceeds this.
  double kl_ceiling = 50.0;
  double clip_norm = 1.0;
  std::optional<std::filesystem::path> run_dir;
};

// Throws std::invalid_argument when weights are not finite.
void validate(const RLConfig& cfg);

// kl_penalty = logprob_new - logprob_old; total = a*r_a + b*r_v + c*r_i - kl.
// Disabled rewards are stored and counted as 0. Throws std::invalid_argument
// on non-finite inputs.
RewardBundle composite_reward(double r_a, double r_v, double r_i, double logprob_new, double logprob_old,
                              const RLConfig& cfg);

// Frozen reward functions. Any may throw; the sample is then skipped.
struct RewardModels {
  std::function<double(const Aspect&, const std::string& text)> allure;
  std::function<double(const std::string& review, const std::string& text)> veracity;
  std::function<double(const Aspect&, const std::string& review, const std::string& text)> information;
};

struct Prompt {
  Review review;
  Aspect aspect;
};

struct EpochStats {
  int epoch = 0;
  int samples = 0;
  int skipped = 0;
  double mean_r_a = 0.0;
  double mean_r_v = 0.0;
  double mean_r_i = 0.0;
  double mean_kl = 0.0;
  double mean_total = 0.0;
};

struct RlResult {
  std::vector<EpochStats> history;
  int best_epoch = 0;
  double best_mean_total = 0.0;
  gen::PolicyHandle best;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Clipped-surrogate PPO with one optimization pass per batch and whitened
// advantages. The policy is updated in place and holds the final weights;
// the best-mean-reward weights are returned. With a run_dir, writes
// rl/metrics.jsonl, rl/rewards.jsonl (one RewardBundle per sample) and
// rl/{best,last}.
RlResult ppo_train(gen::PolicyHandle& policy, const gen::PolicyHandle& reference, const RewardModels& rewards,
                   const std::vector<Prompt>& prompts, const RLConfig& cfg);

}  // namespace copywriter::rl
