#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "talkrf/container.hpp"
#include "talkrf/rng.hpp"
#include "talkrf/tensor.hpp"

namespace talkrf {

inline constexpr std::size_t kLandmarkPoints = 68;
inline constexpr std::size_t kLandmarkDim = kLandmarkPoints * 3;
inline constexpr double kVideoFps = 25.0;

/// Affine face model: mesh = mean + identity_basis * i + expression_basis * e.
/// Bases are stored row-major as (vertex * 3 + axis) x code.
struct MeshBasis {
  std::size_t vertices = 0;
  std::size_t identity_dims = 0;
  std::size_t expression_dims = 0;
  std::vector<double> mean;
  std::vector<double> identity;
  std::vector<double> expression;

  void validate() const;

  /// Random model whose mean mesh lies on a head-sized ellipsoid.
  static MeshBasis synthetic(std::size_t vertices, std::size_t identity_dims,
                             std::size_t expression_dims, Rng& rng);
};

/// Vertex x 3 positions, flattened.
std::vector<double> assemble_mesh(const MeshBasis& basis, std::span<const double> identity,
                                  std::span<const double> expression);

/// 68 distinct vertex indices picked out of the mesh.
struct LandmarkIndexSet {
  std::array<std::size_t, kLandmarkPoints> indices{};

  void validate(std::size_t vertices) const;
  static LandmarkIndexSet synthetic(std::size_t vertices, Rng& rng);
};

/// Offsets from the mean mesh at the selected vertices, 68 x 3 flattened.
std::vector<double> select_landmarks(std::span<const double> mesh, std::span<const double> mean_mesh,
                                     const LandmarkIndexSet& index);

/// T frames of 68 x 3 mean-relative key points.
class LandmarkSequence {
 public:
  LandmarkSequence() = default;
  explicit LandmarkSequence(std::size_t frames, double fps = kVideoFps);
  LandmarkSequence(std::size_t frames, std::vector<double> data, double fps = kVideoFps);

  std::size_t frames() const { return frames_; }
  double fps() const { return fps_; }
  bool empty() const { return frames_ == 0; }

  double& at(std::size_t t, std::size_t point, std::size_t axis) {
    return data_[t * kLandmarkDim + point * 3 + axis];
  }
  double at(std::size_t t, std::size_t point, std::size_t axis) const {
    return data_[t * kLandmarkDim + point * 3 + axis];
  }
  std::span<double> frame(std::size_t t) { return {data_.data() + t * kLandmarkDim, kLandmarkDim}; }
  std::span<const double> frame(std::size_t t) const {
    return {data_.data() + t * kLandmarkDim, kLandmarkDim};
  }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  /// [1, T, 204] view for the networks.
  Tensor to_tensor() const;
  /// Reads item `batch` of a [B, T, 204] tensor.
  static LandmarkSequence from_tensor(const Tensor& t, std::size_t batch = 0, double fps = kVideoFps);

  bool operator==(const LandmarkSequence&) const = default;

 private:
  std::size_t frames_ = 0;
  double fps_ = kVideoFps;
  std::vector<double> data_;
};

/// Per-coordinate standardization for the 204 landmark coordinates.
struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  double floor = 1e-6;
  /// Coordinates whose spread fell below `floor` and were clamped.
  std::size_t clamped = 0;

  void store(Container& c, const std::string& prefix) const;
  static NormalizationStats restore(const Container& c, const std::string& prefix);
};

NormalizationStats fit_normalization(std::span<const LandmarkSequence> train, double floor = 1e-6);
inline NormalizationStats fit_normalization(const LandmarkSequence& train, double floor = 1e-6) {
  return fit_normalization(std::span<const LandmarkSequence>(&train, 1), floor);
}
LandmarkSequence apply_normalization(const LandmarkSequence& seq, const NormalizationStats& stats);
LandmarkSequence invert_normalization(const LandmarkSequence& seq, const NormalizationStats& stats);

/// Normalized Gaussian taps for offsets -radius..radius, radius = ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);

/// Temporal smoothing of every coordinate; half-sample reflection at the ends.
LandmarkSequence gaussian_smooth(const LandmarkSequence& seq, double sigma);

/// Same filter on a generic [T x width] row-major signal.
std::vector<double> gaussian_smooth_rows(std::span<const double> rows, std::size_t frames,
                                         std::size_t width, double sigma);

/// Binary landmark file: "TRLM", u32 version, u64 frames, f64 fps, u32 points,
/// u32 reserved, then little-endian float64 frames.
void write_landmarks(const std::filesystem::path& path, const LandmarkSequence& seq);
LandmarkSequence read_landmarks(const std::filesystem::path& path);
/// "frame,point,x,y,z" rows for inspection.
void write_landmarks_csv(const std::filesystem::path& path, const LandmarkSequence& seq);

}  // namespace talkrf
