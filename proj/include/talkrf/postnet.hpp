#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include <json.hpp>

#include "talkrf/corpus.hpp"
#include "talkrf/motion_vae.hpp"
#include "talkrf/nn.hpp"
#include "talkrf/sync_expert.hpp"

namespace talkrf {

struct PostNetConfig {
  /// Residual conv blocks between the input and output projections.
  std::size_t postnet_layers = 8;
  std::size_t kernel = 3;
  std::size_t channels = 256;
  /// Linear layers in the discriminator, the last one producing the score.
  std::size_t discriminator_layers = 5;
  std::size_t hidden = 256;
  double dropout = 0.25;

  double adv_weight = 1.0;
  double sync_weight = 0.1;
  double sup_weight = 1.0;

  // Training.
  std::size_t steps = 3000;
  std::size_t batch = 4;
  std::size_t crop = 32;
  std::size_t sync_windows = 8;
  double lr = 1e-3;
  double discriminator_lr = 1e-4;
  /// Both learning rates follow a cosine from 1 down to this fraction.
  double lr_final_fraction = 0.1;
  /// Any loss above this halts training.
  double divergence_limit = 1e3;
  std::size_t log_every = 100;

  void validate() const;
  nlohmann::json to_json() const;
  static PostNetConfig from_json(const nlohmann::json& j);
};

/// Residual temporal conv stack on normalized landmarks: out = x + delta(x).
class PostNet {
 public:
  PostNet(const PostNetConfig& config, std::uint64_t seed);

  /// [B, T, 204] -> [B, T, 204]
  Tensor refine(const Tensor& x) const;
  LandmarkSequence refine(const LandmarkSequence& normalized) const;

  const PostNetConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const;
  static std::unique_ptr<PostNet> load(const std::filesystem::path& path);

 private:
  PostNetConfig config_;
  ParamStore params_;
  Conv1d in_;
  std::vector<Conv1d> blocks_;
  Conv1d out_;
};

/// Frame-level MLP scoring single normalized frames.
class Discriminator {
 public:
  Discriminator(const PostNetConfig& config, std::uint64_t seed);

  /// frames: [N, 204] (or [..., 204]) -> raw scores [N]. Dropout is active only in training.
  Tensor score(const Tensor& frames, bool training);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const;
  static std::unique_ptr<Discriminator> load(const std::filesystem::path& path);

 private:
  PostNetConfig config_;
  ParamStore params_;
  std::vector<Linear> layers_;
  Rng rng_;
};

/// Least-squares GAN discriminator loss: mean(fake^2) + mean((real - 1)^2).
Tensor discriminator_loss(const Tensor& fake_scores, const Tensor& real_scores);
Tensor discriminator_loss(Discriminator& d, const Tensor& refined, const Tensor& target, bool training);

struct PostNetLoss {
  Tensor total;
  double adversarial = 0.0;
  double sync = 0.0;
  double supervised = 0.0;

  nlohmann::json to_json() const;
};

/// adv_weight * mean((D(PN(l)) - 1)^2) + sync_weight * -mean(log clamp(p_sync))
/// + sup_weight * mse(PN(l'), l'). `sync_prob` may be undefined when sync_weight == 0.
PostNetLoss postnet_loss(const Tensor& fake_scores, const Tensor& sync_prob, const Tensor& refined_target,
                         const Tensor& target, const PostNetConfig& weights);

/// Normalized sequences the adaptation trains on. Generated sequences come from
/// the frozen VAE at temperature 0.
struct AdaptationData {
  /// VAE predictions from corpus audio, with that audio.
  std::vector<LandmarkSequence> generated;
  std::vector<AudioFeatures> generated_audio;
  /// VAE predictions from target audio and the matching target ground truth.
  std::vector<LandmarkSequence> target_generated;
  std::vector<LandmarkSequence> target;
};

AdaptationData prepare_adaptation_data(const MotionVAE& vae, const Corpus& corpus, const TargetDomain& target,
                                       const std::string& split);

struct AdaptationReport {
  std::vector<double> discriminator;
  std::vector<double> adversarial;
  std::vector<double> sync;
  std::vector<double> supervised;
};

/// Alternates one discriminator step and one post-net step.
AdaptationReport train_adaptation(PostNet& postnet, Discriminator& disc, const AdaptationData& data,
                                  const SyncScorer& sync, std::uint64_t seed, const TrainLog& log = {});

struct AdaptationEvaluation {
  /// Mean per-point distance to the held-out target landmarks (the
  /// target speaker under the injected shift), raw space.
  double unrefined_error = 0.0;
  double refined_error = 0.0;
  /// Per-point distance between temporal means, same data.
  double unrefined_mean_gap = 0.0;
  double refined_mean_gap = 0.0;
  /// Held-out refined-vs-real accuracy at threshold 0.5.
  double discriminator_accuracy = 0.0;
  double real_score = 0.0;
  double refined_score = 0.0;
  double unrefined_score = 0.0;
  double sync_unrefined = 0.0;
  double sync_refined = 0.0;

  double error_reduction() const { return unrefined_error / refined_error; }
  double mean_gap_reduction() const { return unrefined_mean_gap / refined_mean_gap; }
  double sync_ratio() const { return sync_refined / sync_unrefined; }
  nlohmann::json to_json() const;
};

/// Errors come from held-out target audio against its ground truth; the
/// discriminator and sync scores from held-out corpus audio.
AdaptationEvaluation evaluate_adaptation(const PostNet& postnet, Discriminator& disc, const MotionVAE& vae,
                                         SyncExpert& sync, const Corpus& corpus, const TargetDomain& target);

}  // namespace talkrf
