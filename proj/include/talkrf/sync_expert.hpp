#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include <json.hpp>

#include "talkrf/corpus.hpp"
#include "talkrf/geometry.hpp"
#include "talkrf/nn.hpp"

namespace talkrf {

/// Called every `log_every` steps with a flat record of losses.
using TrainLog = std::function<void(const nlohmann::json&)>;

struct SyncExpertConfig {
  /// Conv + batch-norm + ReLU layers per encoder.
  std::size_t layers = 14;
  std::size_t channels = 512;
  std::size_t kernel = 3;
  /// Landmark frames per window; the audio window is twice as long.
  std::size_t window = 5;
  std::size_t feature_dim = 64;
  double eps = 1e-8;

  // Training.
  std::size_t steps = 2000;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::size_t min_offset = 10;
  std::size_t max_offset = 40;
  double cross_utterance = 0.5;
  std::size_t log_every = 100;

  void validate() const;
  nlohmann::json to_json() const;
  static SyncExpertConfig from_json(const nlohmann::json& j);
};

/// Clamped cosine a.l / sqrt(max(|a|^2 |l|^2, eps^2)) in [0, 1], one per row of [B, E].
Tensor clamped_cosine(const Tensor& a, const Tensor& l, double eps);
/// Mean binary cross-entropy of probabilities p [B] against 0/1 labels.
Tensor binary_cross_entropy(const Tensor& p, const std::vector<double>& labels);

/// Audio/landmark synchronization scorer. Landmarks are expected in the
/// corpus-normalized space; each window is centered in time before encoding so
/// static identity offsets do not enter the score.
class SyncExpert {
 public:
  SyncExpert(const SyncExpertConfig& config, std::uint64_t seed);

  /// lm: [B, window, 204] -> [B, channels]
  Tensor landmark_embedding(const Tensor& lm, bool training);
  /// audio: [B, 2 window, D] -> [B, channels]
  Tensor audio_embedding(const Tensor& audio, bool training);
  /// In-sync probability per window, [B].
  Tensor prob(const Tensor& lm, const Tensor& audio, bool training = false);

  /// Mean probability over every stride-1 window of a normalized sequence.
  double sequence_confidence(const LandmarkSequence& normalized, const AudioFeatures& audio);

  const SyncExpertConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const NormalizationStats& normalization() const { return normalization_; }
  void set_normalization(NormalizationStats s) { normalization_ = std::move(s); }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const;
  static std::unique_ptr<SyncExpert> load(const std::filesystem::path& path);

 private:
  Tensor encode(std::vector<Conv1d>& convs, std::vector<BatchNorm>& norms, Linear& head, Tensor x, bool training);

  SyncExpertConfig config_;
  ParamStore params_;
  std::vector<Conv1d> lm_convs_, audio_convs_;
  std::vector<BatchNorm> lm_norms_, audio_norms_;
  Linear lm_head_, audio_head_;
  NormalizationStats normalization_;
};

struct SyncBatch {
  Tensor landmarks;  // [B, window, 204]
  Tensor audio;      // [B, 2 window, D]
  std::vector<double> labels;
};

/// One landmark window and one audio window, both expressed in video frames.
struct SyncPair {
  const Utterance* landmarks = nullptr;
  std::size_t landmark_start = 0;
  const Utterance* audio = nullptr;
  std::size_t audio_start = 0;
};

SyncBatch make_sync_batch(const std::vector<SyncPair>& pairs, const NormalizationStats& stats, std::size_t window,
                          const std::vector<double>& labels);

/// Half positives; negatives split between time shifts of min..max offset
/// frames and cross-utterance pairs.
std::vector<SyncPair> sample_sync_pairs(const std::vector<const Utterance*>& pool, const SyncExpertConfig& cfg,
                                        std::size_t count, Rng& rng, std::vector<double>& labels,
                                        double cross_utterance);

/// Pairs shifted by exactly `shift` frames (0 = aligned), dropping windows
/// that would leave the utterance.
std::vector<SyncPair> shifted_pairs(const std::vector<const Utterance*>& pool, std::size_t window, std::size_t shift,
                                    std::size_t stride);

struct SyncEvaluation {
  double accuracy = 0.0;
  double flipped_accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t windows = 0;
};

/// Held-out accuracy against time-shifted negatives (threshold 0.5).
SyncEvaluation evaluate_sync_expert(SyncExpert& expert, const std::vector<const Utterance*>& pool,
                                    std::size_t windows, std::uint64_t seed);
/// Mean probability over the given pairs, evaluated in batches.
double mean_sync_prob(SyncExpert& expert, const std::vector<SyncPair>& pairs);

struct SyncTrainReport {
  std::vector<double> losses;
  SyncEvaluation heldout;
};

/// Fits the corpus normalization on the training split, trains with BCE, and
/// evaluates on the held-out split.
SyncTrainReport train_sync_expert(SyncExpert& expert, const Corpus& corpus, std::uint64_t seed,
                                  const TrainLog& log = {});

}  // namespace talkrf
