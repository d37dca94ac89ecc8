#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "copywriter/nn/layers.hpp"
#include "copywriter/records.hpp"
#include "copywriter/vocabulary.hpp"

namespace copywriter::gen {

struct ModelConfig {
  int embed_dim = 32;
  int hidden = 64;
  int max_source_tokens = 256;
};

// aspect ids, separator, review ids; the review is cut from the right so the
// whole sequence fits in `max_source_tokens`. Throws std::invalid_argument
// if the aspect is not valid.
std::vector<int> encode_input(const Aspect& aspect, const Review& review, const Vocabulary& vocab,
                              int max_source_tokens);

// Encoder state for incremental decoding, plain values.
struct EncoderState {
  nn::Matrix states;  // hidden x source length
  nn::Matrix h0;      // hidden x 1
};

// GRU decoder with dot-product attention over a single-layer embedding
// encoder. Decoding starts from BOS and stops at EOS.
class Seq2SeqModel {
 public:
  Seq2SeqModel(Vocabulary vocab, ModelConfig config, std::uint64_t seed);

  const Vocabulary& vocab() const { return vocab_; }
  const ModelConfig& config() const { return config_; }

  // Teacher-forced log-probability of each target id, 1 x target length.
  nn::Var token_log_probs(const std::vector<int>& source, const std::vector<int>& target) const;

  // Mean negative log-likelihood over target ids.
  nn::Var sequence_nll(const std::vector<int>& source, const std::vector<int>& target) const;

  EncoderState encode(const std::vector<int>& source) const;
  // One decoding step: consumes `prev`, updates `h`, returns next-token logits.
  nn::Matrix step_logits(const EncoderState& enc, nn::Matrix& h, int prev) const;

  nn::NamedParameters parameters() const;
  std::unique_ptr<Seq2SeqModel> clone() const;

  void save(const std::filesystem::path& dir) const;
  static std::unique_ptr<Seq2SeqModel> load(const std::filesystem::path& dir);

 private:
  Vocabulary vocab_;
  ModelConfig config_;
  nn::Embedding embed_;
  nn::Linear enc_proj_;
  nn::Linear init_;
  nn::GruCell gru_;
  nn::Linear out_;
};

enum class Role { kPolicy, kReference };

// Owns a model. A reference handle is frozen: its parameters cannot be
// reached mutably and a digest taken at freeze time detects tampering.
class PolicyHandle {
 public:
  explicit PolicyHandle(std::unique_ptr<Seq2SeqModel> model);

  Role role() const { return role_; }
  const Seq2SeqModel& model() const { return *model_; }
  // Throws std::logic_error on a reference handle.
  Seq2SeqModel& mutable_model();

  // Deep copy with role = reference.
  PolicyHandle frozen_copy() const;
  PolicyHandle clone() const;
  bool frozen_intact() const;
  std::string digest() const;

 private:
  std::shared_ptr<Seq2SeqModel> model_;
  Role role_ = Role::kPolicy;
  std::string frozen_digest_;
};

struct SftExample {
  Review review;
  Aspect aspect;
  std::string reference;
};

// Target ids for a reference: its tokens followed by EOS.
std::vector<int> target_ids(const Vocabulary& vocab, const std::string& reference);

// Builds a case-preserving vocabulary over reviews, aspects and references.
Vocabulary build_vocabulary(const std::vector<SftExample>& corpus);

// Mean over the batch of per-example mean token NLL.
nn::Var sft_loss(const Seq2SeqModel& model, const std::vector<const SftExample*>& batch);

struct SftConfig {
  double lr = 1e-3;
  int batch = 8;
  int epochs = 10;
  // Stop after this many optimizer steps; 0 means run all epochs.
  int max_steps = 0;
  // Stop once the epoch's mean training loss falls below this; 0 disables.
  double target_loss = 0.0;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  std::optional<std::filesystem::path> run_dir;
};

struct SftEpoch {
  int epoch = 0;
  int steps = 0;
  double train_loss = 0.0;
  std::optional<double> dev_loss;
};

struct SftResult {
  std::vector<SftEpoch> history;
  int steps = 0;
  int best_epoch = 0;
  double best_loss = 0.0;
};

// Trains in place and leaves the policy holding the best-dev-loss weights
// (training loss when `dev` is empty). With a run_dir, writes
// sft/metrics.jsonl and sft/{best,last}.
SftResult train_sft(PolicyHandle& policy, const std::vector<SftExample>& train,
                    const std::vector<SftExample>& dev, const SftConfig& config);

double mean_loss(const Seq2SeqModel& model, const std::vector<SftExample>& data);

enum class DecodeMode { kGreedy, kSample, kBeam };

std::string_view to_string(DecodeMode mode);
DecodeMode parse_decode_mode(std::string_view name);

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kBeam;
  double temperature = 1.0;
  int beam_width = 4;
  // Word-level tokens, so this is also the word budget.
  int max_new_tokens = 30;
  std::uint64_t seed = 0;
};

struct Generation {
  std::string text;
  std::vector<int> ids;  // generated ids, EOS excluded
  double log_prob = 0.0;  // under the model at temperature 1, EOS included if emitted
  bool eos = false;       // decoding stopped on EOS rather than the token budget
  bool retried_greedy = false;
  bool empty = false;
};

Generation generate(const PolicyHandle& policy, const Aspect& aspect, const Review& review,
                    const DecodeConfig& dc);
Generation generate_from_ids(const Seq2SeqModel& model, const std::vector<int>& source,
                             const DecodeConfig& dc);

}  // namespace copywriter::gen
