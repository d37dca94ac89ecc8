#pragma once

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "copywriter/generation.hpp"
#include "copywriter/rl_trainer.hpp"
#include "copywriter/text.hpp"

namespace oracle {

// 64 prompts over 8 aspects. Each prompt has two references, one that
// opens with the aspect and one that never names it, so a short SFT leaves
// the policy emitting the aspect about half the time.
struct ToyTask {
  std::vector<copywriter::rl::Prompt> prompts;
  std::vector<copywriter::gen::SftExample> sft;
};

inline ToyTask toy_task() {
  static const char* foods[] = {"steak", "sushi", "pasta", "tacos", "pizza", "ramen", "pancakes", "coffee"};
  static const char* frames[] = {"the %s was good and the service was fine",
                                 "we loved the %s and the room",
                                 "great %s near the station",
                                 "the %s came quickly with fresh sides",
                                 "friendly staff and tasty %s tonight",
                                 "our %s was warm",
                                 "cozy place with %s on the menu",
                                 "try the %s here"};
  ToyTask t;
  for (int i = 0; i < 64; ++i) {
    char buf[128];
    std::snprintf(buf, sizeof buf, frames[i / 8], foods[i % 8]);
    t.prompts.push_back({copywriter::Review{"toy" + std::to_string(i), buf, {}},
                         copywriter::Aspect::from_surface(foods[i % 8])});
    t.sft.push_back({t.prompts.back().review, t.prompts.back().aspect, std::string(foods[i % 8]) + " is nice"});
    t.sft.push_back({t.prompts.back().review, t.prompts.back().aspect, "the place is nice"});
  }
  return t;
}

// Pays 1 when the aspect appears as a word of the text.
inline double aspect_stub(const copywriter::Aspect& a, const std::string& text) {
  for (const auto& w : copywriter::whitespace_tokens(text)) {
    if (w == a.surface) return 1.0;
  }
  return 0.0;
}

inline copywriter::gen::PolicyHandle toy_policy(const ToyTask& task, std::uint64_t seed) {
  copywriter::gen::ModelConfig mc;
  mc.embed_dim = 16;
  mc.hidden = 32;
  mc.max_source_tokens = 32;
  copywriter::gen::PolicyHandle policy(
      std::make_unique<copywriter::gen::Seq2SeqModel>(copywriter::gen::build_vocabulary(task.sft), mc, seed));
  copywriter::gen::SftConfig sc;
  sc.lr = 0.01;
  sc.batch = 16;
  sc.epochs = 5;
  sc.seed = seed;
  copywriter::gen::train_sft(policy, task.sft, {}, sc);
  return policy;
}

inline copywriter::rl::RLConfig toy_rl_config(std::uint64_t seed) {
  copywriter::rl::RLConfig cfg;
  cfg.lr = 0.01;
  cfg.use_veracity = false;
  cfg.use_information = false;
  cfg.rollouts_per_prompt = 4;
  cfg.rollout.max_new_tokens = 4;
  cfg.seed = seed;
  return cfg;
}

}  // namespace oracle
