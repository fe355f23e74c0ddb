#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include <json.hpp>

#include "talkrf/corpus.hpp"
#include "talkrf/geometry.hpp"
#include "talkrf/image.hpp"
#include "talkrf/nn.hpp"
#include "talkrf/scene.hpp"
#include "talkrf/sync_expert.hpp"

namespace talkrf {

/// Landmarks of frames t-1, t, t+1 (clamped at the ends), point-wise normalized.
inline constexpr std::size_t kConditionDim = 3 * kLandmarkDim;

struct NerfConfig {
  std::size_t pos_frequencies = 10;
  std::size_t dir_frequencies = 4;
  std::size_t trunk_layers = 11;
  std::size_t trunk_width = 256;
  std::size_t condition_layers = 3;
  std::size_t condition_width = 128;
  std::size_t samples = 64;

  // Training.
  std::size_t rays = 1024;
  std::size_t head_steps = 50000;
  std::size_t torso_steps = 50000;
  double lr = 5e-4;
  double lr_final_fraction = 0.1;
  /// Torso field sees the head render; off for the ablation.
  bool head_aware = true;
  double divergence_limit = 1e3;
  std::size_t log_every = 500;

  void validate() const;
  nlohmann::json to_json() const;
  static NerfConfig from_json(const nlohmann::json& j);
};

/// [x, sin(2^k pi x), cos(2^k pi x)] for k < frequencies, per component.
std::vector<double> positional_encoding(std::span<const double> x, std::size_t frequencies);
inline std::size_t encoding_dim(std::size_t frequencies) { return 3 + 6 * frequencies; }

std::vector<double> landmark_condition(const LandmarkSequence& raw, std::size_t t, const NormalizationStats& stats);

/// Per-sample field outputs for R rays of S samples.
struct FieldOutput {
  Tensor sigma;  // [R, S], >= 0
  Tensor color;  // [R, S, 3], in [0, 1]
};

/// Sample positions and widths along each ray.
struct RaySamples {
  std::size_t rays = 0;
  std::size_t samples = 0;
  std::vector<double> t;       // [R, S]
  std::vector<double> deltas;  // [R, S]
};

/// Stratified samples in [near, far]: one per equal bin, at the bin center
/// when `jitter` is null. delta_i = t_{i+1} - t_i and far - t_S for the last.
RaySamples stratified_samples(std::span<const std::pair<double, double>> intervals, std::size_t samples, Rng* jitter);

struct Composite {
  Tensor rgb;  // [R, 3]
  std::vector<double> weights;   // [R, S]
  std::vector<double> residual;  // [R], transmittance left after the last sample
};

/// Quadrature C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i + T_end * background.
/// Differentiable in sigma, color and background.
Composite volume_render(const Tensor& sigma, const Tensor& color, std::span<const double> deltas,
                        const Tensor& background);

/// Landmark-conditioned radiance field over canonical head space.
class HeadField {
 public:
  HeadField(const NerfConfig& config, double bound, std::uint64_t seed);

  /// points [R, S, 3] canonical, dirs [R, 3] canonical, condition [R, 612].
  FieldOutput operator()(const Tensor& points, const Tensor& dirs, const Tensor& condition) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const NerfConfig& config() const { return config_; }
  double bound() const { return bound_; }

 private:
  NerfConfig config_;
  double bound_;
  ParamStore params_;
  std::vector<Linear> cond_, trunk_;
  Linear cond_in_, sigma_, feature_, view_feature_, view_dir_, rgb_;
};

/// Head-aware torso field: canonical sample points conditioned per ray on the
/// head color, the flattened pose, the fixed view direction and the landmarks.
class TorsoField {
 public:
  TorsoField(const NerfConfig& config, const Vec3& center, double scale, std::uint64_t seed);

  /// points [R, S, 3] canonical, head_color [R, 3], pose [R, 12], condition [R, 612].
  FieldOutput operator()(const Tensor& points, const Tensor& head_color, const Tensor& pose,
                         const Tensor& condition) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const NerfConfig& config() const { return config_; }
  const Vec3& center() const { return center_; }
  double scale() const { return scale_; }

 private:
  NerfConfig config_;
  Vec3 center_;
  double scale_;
  ParamStore params_;
  std::vector<Linear> color_enc_, cond_, trunk_;
  Linear cond_in_, sigma_, feature_, view_feature_, view_dir_, rgb_;
};

/// Fixed torso viewing direction d_0.
inline const Vec3 kTorsoViewDirection = Vec3::UnitZ();

/// Trained head field plus the data it needs at render time.
struct HeadModel {
  SceneSpec scene;
  NormalizationStats condition_stats;
  std::unique_ptr<HeadField> field;

  void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const;
  static HeadModel load(const std::filesystem::path& path);
};

struct TorsoModel {
  std::unique_ptr<TorsoField> field;

  void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const;
  static TorsoModel load(const std::filesystem::path& path);
};

struct RenderOptions {
  /// Samples per ray; 0 keeps the training count.
  std::size_t samples = 0;
  /// Forces torso density to zero.
  bool torso_transparent = false;
  /// Rays evaluated per chunk.
  std::size_t chunk = 512;
};

struct FrameRender {
  Image head;  // head composited over the background (C_head)
  Image full;  // torso composited over C_head
};

/// Renders one frame. `torso` may be null (head pass only).
FrameRender render_frame(const HeadModel& head, const TorsoModel* torso, std::span<const double> condition,
                         const HeadPose& pose, const RenderOptions& options = {});

/// Training frames of the target scene, all in memory.
struct NerfDataset {
  SceneSpec scene;
  std::vector<LandmarkSequence> landmarks;          // raw, per utterance
  std::vector<std::vector<HeadPose>> poses;         // per utterance
  std::vector<std::vector<GroundTruthFrame>> frames;

  std::size_t frame_count() const;
  static NerfDataset from_target(const TargetDomain& target, const std::string& split);
};

struct NerfTrainReport {
  std::vector<double> losses;
};

/// Stage one: head field on head-only targets, rays through the head bound.
NerfTrainReport train_nerf_head(HeadModel& model, const NerfDataset& data, std::uint64_t seed,
                                const TrainLog& log = {});
/// Stage two: torso field over the frozen head render, full-frame targets,
/// rays through the torso box.
NerfTrainReport train_nerf_torso(TorsoModel& torso, const HeadModel& head, const NerfDataset& data,
                                 std::uint64_t seed, const TrainLog& log = {});

/// Fresh models sized by `config`; the condition normalization comes from the data.
HeadModel make_head_model(const NerfConfig& config, const NerfDataset& data, std::uint64_t seed);
TorsoModel make_torso_model(const NerfConfig& config, const SceneSpec& scene, std::uint64_t seed);

/// Mean squared error and PSNR of full renders against ground truth over every frame.
struct RenderScore {
  double mse = 0.0;
  double psnr = 0.0;
  std::size_t frames = 0;
  /// Pixels where the head covers the torso box: the seam the torso field
  /// only gets right by knowing the head render.
  double overlap_mse = 0.0;
  std::size_t overlap_pixels = 0;
};
RenderScore score_renders(const HeadModel& head, const TorsoModel* torso, const NerfDataset& data,
                          std::size_t stride, const RenderOptions& options = {});

/// Mean absolute change of the torso field outputs (density and color) on the
/// torso rays of every `stride`-th frame when C_head is replaced by 1 - C_head.
double head_color_sensitivity(const HeadModel& head, const TorsoModel& torso, const NerfDataset& data,
                              std::size_t stride);

}  // namespace talkrf
