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
#include "talkrf/sync_expert.hpp"

namespace talkrf {

struct MotionVAEConfig {
  std::size_t encoder_layers = 8;
  std::size_t decoder_layers = 4;
  std::size_t conv_kernel = 5;
  std::size_t channels = 192;
  std::size_t latent_size = 16;
  std::size_t prior_flow_layers = 4;
  std::size_t prior_flow_kernel = 3;
  std::size_t prior_flow_channels = 64;
  /// WaveNet depth inside each coupling layer.
  std::size_t prior_flow_wavenet_layers = 2;
  std::size_t feature_dim = 64;

  double kl_weight = 1.0;
  double sync_loss_weight = 0.1;
  /// Fraction of training over which the KL weight ramps from 0.
  double kl_warmup = 0.1;
  /// Fraction of training after which the sync weight ramps in (over 10% of steps).
  double sync_start = 0.5;
  double smoothing_sigma = 1.0;

  // Training.
  std::size_t steps = 10000;
  std::size_t batch = 4;
  std::size_t crop = 64;
  std::size_t sync_windows = 8;
  double lr = 1e-3;
  std::size_t log_every = 100;

  void validate() const;
  nlohmann::json to_json() const;
  static MotionVAEConfig from_json(const nlohmann::json& j);
};

struct Posterior {
  Tensor mean;    // [B, T, latent]
  Tensor logvar;  // [B, T, latent]
};

struct FlowResult {
  Tensor z;
  /// Per-batch-item log |det J|, [B].
  Tensor log_det;
};

/// Differentiable in-sync probability of landmark windows [B, window, 204]
/// against audio windows [B, 2 window, D], returning [B].
struct SyncScorer {
  std::size_t window = 5;
  std::function<Tensor(const Tensor&, const Tensor&)> prob;
};

/// Scores with a frozen expert in evaluation mode.
SyncScorer frozen_scorer(SyncExpert& expert);

/// Reparameterization noise and sync-window starts, drawn by the caller so
/// the loss is a deterministic function of the parameters.
struct ElboNoise {
  Tensor eps;                        // [B, T, latent]
  std::vector<std::size_t> sync_starts;  // video-frame starts, reused for every batch item
};

struct ElboBreakdown {
  Tensor total;
  double reconstruction = 0.0;
  double kl = 0.0;
  double sync = 0.0;
  Tensor decoded;  // l hat, [B, T, 204]

  nlohmann::json to_json() const;
};

struct ElboWeights {
  double kl = 1.0;
  double sync = 0.0;
};

/// Audio-conditioned VAE over normalized landmark sequences with a coupling
/// flow prior p(z | a). Tensors are [B, T, C]; audio is [B, 2T, D].
class MotionVAE {
 public:
  MotionVAE(const MotionVAEConfig& config, std::uint64_t seed);

  Posterior encode(const Tensor& landmarks, const Tensor& audio) const;
  Tensor decode(const Tensor& z, const Tensor& audio) const;
  /// Base sample z0 -> prior sample z.
  FlowResult flow_forward(const Tensor& z0, const Tensor& audio) const;
  /// Prior sample z -> base z0; log_det is that of the inverse map.
  FlowResult flow_inverse(const Tensor& z, const Tensor& audio) const;
  /// log p(z | a) per batch item, [B].
  Tensor prior_log_prob(const Tensor& z, const Tensor& audio) const;

  /// Monte-Carlo ELBO: reconstruction MSE + w.kl * (log q - log p) + w.sync * (-log D_sync).
  /// KL and reconstruction are per-element means. The scorer may be empty when w.sync == 0.
  ElboBreakdown elbo(const Tensor& landmarks, const Tensor& audio, const ElboNoise& noise, const ElboWeights& w,
                     const SyncScorer& sync) const;
  ElboNoise draw_noise(std::size_t batch, std::size_t frames, std::size_t sync_window, Rng& rng) const;

  /// Normalized-space sample for one utterance, [1, T, 204].
  Tensor sample_normalized(const AudioFeatures& audio, double temperature, std::uint64_t seed) const;
  /// De-normalized landmarks at 25 fps, optionally smoothed.
  LandmarkSequence generate(const AudioFeatures& audio, double temperature, std::uint64_t seed,
                            bool smooth = true) const;
  /// Posterior-mean reconstruction in normalized space.
  Tensor reconstruct(const LandmarkSequence& normalized, const AudioFeatures& audio) const;

  const MotionVAEConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const NormalizationStats& normalization() const { return normalization_; }
  void set_normalization(NormalizationStats s) { normalization_ = std::move(s); }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const;
  static std::unique_ptr<MotionVAE> load(const std::filesystem::path& path);

 private:
  struct Coupling {
    Linear pre;
    WaveNet wn;
    Linear stats;
  };
  Tensor coupling_stats(const Coupling& c, const Tensor& half, const Tensor& cond) const;
  void check_inputs(const Tensor& x, std::size_t channels, const Tensor& audio, const char* who) const;

  MotionVAEConfig config_;
  ParamStore params_;
  // Encoder.
  Conv1d enc_audio_, enc_in_;
  LayerNorm enc_norm_;
  WaveNet enc_wn_;
  Linear enc_out_;
  // Decoder.
  Conv1d dec_audio_;
  Linear dec_in_;
  WaveNet dec_wn_;
  ConvTranspose1d dec_up_;
  LayerNorm dec_norm_;
  Linear dec_out_;
  // Prior flow.
  Conv1d flow_audio_;
  std::vector<Coupling> couplings_;
  NormalizationStats normalization_;
};

struct VaeTrainReport {
  std::vector<double> total;
  std::vector<double> reconstruction;
  std::vector<double> kl;
  std::vector<double> sync;
  double heldout_mse = 0.0;
  double heldout_variance = 0.0;
};

/// Per-step weights under the warm-up and ramp schedule.
ElboWeights elbo_schedule(const MotionVAEConfig& config, std::size_t step);

/// Held-out posterior-mean reconstruction MSE and the variance of the
/// normalized held-out landmarks.
std::pair<double, double> vae_heldout_error(const MotionVAE& vae, const std::vector<const Utterance*>& pool);

/// Trains on the corpus training split; `sync` must be trained and is frozen here.
VaeTrainReport train_motion_vae(MotionVAE& vae, const Corpus& corpus, SyncExpert* sync, std::uint64_t seed,
                                const TrainLog& log = {});

}  // namespace talkrf
