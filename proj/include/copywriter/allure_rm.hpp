#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "copywriter/nn/layers.hpp"
#include "copywriter/records.hpp"
#include "copywriter/vocabulary.hpp"

namespace copywriter::allure {

enum class ModelKind { kRegression, kSiamese };

std::string_view to_string(ModelKind kind);

struct AllureExample {
  Aspect aspect;
  std::string text;
  double label = 0.0;  // win rate
  Split split = Split::kTrain;
};

struct PairExample {
  Aspect aspect;
  std::string winner_text;
  std::string loser_text;
};

struct EncoderConfig {
  int embed_dim = 32;
  int hidden = 32;
  // Budget for aspect + separator + text ids; the text is cut from the right.
  int max_tokens = 128;
};

struct TrainConfig {
  double lr = 2e-5;
  int batch = 32;
  int epochs = 5;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  // When set, metrics.jsonl and {best,last} checkpoints go under run_dir/allure.
  std::optional<std::filesystem::path> run_dir;
};

struct ScoreResult {
  double value = 0.0;
  bool truncated = false;
};

// Tiny bag-of-embeddings encoder: embed, mean-pool, tanh projection, scalar
// head. Both model kinds share the architecture and squash the head with a
// logistic function for scoring.
class AllureModel {
 public:
  AllureModel(ModelKind kind, Vocabulary vocab, EncoderConfig config, std::uint64_t seed);

  ModelKind kind() const { return kind_; }
  const Vocabulary& vocab() const { return vocab_; }
  const EncoderConfig& config() const { return config_; }

  // aspect ids, separator, text ids.
  std::vector<int> encode(const Aspect& aspect, std::string_view text, bool* truncated = nullptr) const;

  // Pre-squash head outputs for a batch of encoded inputs, 1 x batch.
  nn::Var raw(const std::vector<std::vector<int>>& batch) const;

  // r_a in [0,1]. Throws std::invalid_argument on empty text.
  ScoreResult score(const Aspect& aspect, std::string_view text) const;

  // Siamese view: P(a beats b) = sigmoid(raw(a) - raw(b)).
  double pair_probability(const Aspect& aspect, std::string_view a, std::string_view b) const;

  nn::NamedParameters parameters() const;
  AllureModel clone() const;

  void save(const std::filesystem::path& dir) const;
  static AllureModel load(const std::filesystem::path& dir);

 private:
  ModelKind kind_;
  Vocabulary vocab_;
  EncoderConfig config_;
  nn::Embedding embed_;
  nn::Linear proj_;
  nn::Linear head_;
};

// Builds a lowercase vocabulary over aspects and texts.
Vocabulary build_vocabulary(const std::vector<AllureExample>& examples,
                            const std::vector<PairExample>& pairs = {});

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double dev_rmse = 0.0;
  double dev_accuracy = 0.0;
};

struct FitResult {
  AllureModel best;
  AllureModel last;
  std::vector<EpochMetrics> history;
  int best_epoch = 0;
};

// Mean squared error between squashed score and win rate; best dev RMSE kept.
FitResult fit_regression(const std::vector<AllureExample>& train, const std::vector<AllureExample>& dev,
                         const TrainConfig& config, const EncoderConfig& encoder = {},
                         std::optional<Vocabulary> vocab = std::nullopt);

// Shared-weight twin scoring with logit raw(winner) - raw(loser) and
// logistic cross-entropy; best dev pairwise accuracy kept.
FitResult fit_siamese(const std::vector<PairExample>& train, const std::vector<PairExample>& dev,
                      const TrainConfig& config, const EncoderConfig& encoder = {},
                      std::optional<Vocabulary> vocab = std::nullopt);

double score_allure(const AllureModel& model, const Aspect& aspect, std::string_view text);

using ScoreFn = std::function<double(const Aspect&, const std::string&)>;

struct RmMetrics {
  double pairwise_accuracy = 0.0;
  double rmse = 0.0;
};

// Accuracy: share of pairs with score(winner) > score(loser), equal scores
// counting one half. RMSE against win-rate labels. Either list may be empty
// but not both; the empty side reports 0.
RmMetrics evaluate_rm(const ScoreFn& scorer, const std::vector<PairExample>& comparisons,
                      const std::vector<AllureExample>& examples);

ScoreFn as_score_fn(const AllureModel& model);

inline const std::vector<double> kLearningRateGrid = {1e-5, 3e-5, 5e-5, 7e-5, 9e-5};

struct SweepResult {
  double best_lr = 0.0;
  std::vector<std::pair<double, double>> dev_rmse_by_lr;
  FitResult fit;
};

// Trains one regression model per learning rate and keeps the lowest dev RMSE.
SweepResult sweep_regression(const std::vector<AllureExample>& train,
                             const std::vector<AllureExample>& dev, const TrainConfig& config,
                             const std::vector<double>& lrs = kLearningRateGrid,
                             const EncoderConfig& encoder = {});

}  // namespace copywriter::allure
