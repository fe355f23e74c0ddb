#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "talkrf/image.hpp"
#include "talkrf/rng.hpp"

namespace talkrf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double near = 0.0;
  double far = 1.0;
};

/// Pinhole camera at the origin looking down +z, y pointing down the image.
struct Camera {
  std::size_t width = 64;
  std::size_t height = 64;
  double focal = 70.0;
  double cx = 32.0;
  double cy = 32.0;

  /// Ray through the center of pixel (px, py), near 0.1 and far 10.
  Ray ray(std::size_t px, std::size_t py) const;
  Eigen::Vector2d project(const Vec3& p) const;
  void validate() const;
};

/// Rigid head transform Π = [R | t]: x_camera = R * x_canonical + t.
struct HeadPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static HeadPose from_euler(double yaw, double pitch, double roll, const Vec3& translation);
  static HeadPose from_flat(std::span<const double> values);

  /// Row-major 3x4.
  std::array<double, 12> flatten() const;
  Vec3 to_camera(const Vec3& x) const { return rotation * x + translation; }
  Vec3 to_canonical(const Vec3& x) const { return rotation.transpose() * (x - translation); }
  Vec3 direction_to_canonical(const Vec3& d) const { return rotation.transpose() * d; }
  /// Throws unless R is orthonormal with det 1 within `tol`.
  void validate(double tol = 1e-8) const;
};

/// Smoothly varying head motion around `rest` (sums of slow sinusoids).
std::vector<HeadPose> smooth_pose_track(std::size_t frames, const Vec3& rest, Rng& rng,
                                        double rotation_amplitude = 0.15,
                                        double translation_amplitude = 0.03);

void write_poses(const std::filesystem::path& path, std::span<const HeadPose> poses);
std::vector<HeadPose> read_poses(const std::filesystem::path& path);

enum class ObjectId : std::uint8_t { Background = 0, Head = 1, Torso = 2 };

/// Analytic stand-in for a recorded portrait: ellipsoid head whose mouth
/// opening follows the landmarks, a box torso behind it, flat background.
struct SceneSpec {
  Camera camera;
  Vec3 background{0.76, 0.80, 0.86};

  // Head in its canonical frame, centered at the origin.
  Vec3 head_radii{0.35, 0.45, 0.35};
  Vec3 head_rest{0.0, -0.15, 2.5};
  Vec3 skin{0.86, 0.66, 0.54};
  Vec3 lip{0.45, 0.10, 0.12};
  Vec3 eye{0.16, 0.12, 0.12};
  /// Inner-lip gap (lower minus upper, y axis) mapped to openness through
  /// tanh((gap - mouth_reference) / mouth_scale).
  double mouth_reference = 0.0;
  double mouth_scale = 1.0;
  /// Bounding sphere radius of the head in canonical space.
  double head_bound = 0.5;

  // Torso box in camera space.
  Vec3 torso_center{0.0, 0.62, 2.9};
  Vec3 torso_half{0.6, 0.3, 0.25};
  Vec3 torso_color{0.26, 0.36, 0.62};
  double torso_margin = 0.05;

  // Scene bounding volume used for ray near/far.
  Vec3 bounds_min{-1.2, -1.0, 1.8};
  Vec3 bounds_max{1.2, 1.3, 3.4};

  void validate() const;
};

nlohmann::json scene_to_json(const SceneSpec& scene);
/// Missing keys keep their defaults.
SceneSpec scene_from_json(const nlohmann::json& j);

/// Inner-lip landmark indices of the 68-point layout.
inline constexpr std::size_t kUpperInnerLip = 62;
inline constexpr std::size_t kLowerInnerLip = 66;

/// Mouth openness in [0, 1] for one 204-value landmark frame.
double mouth_openness(const SceneSpec& scene, std::span<const double> landmarks);
/// Surface color of the head at canonical point x.
Vec3 head_albedo(const SceneSpec& scene, const Vec3& x, double openness);
/// Surface color of the torso at camera-space point x.
Vec3 torso_albedo(const SceneSpec& scene, const Vec3& x);

/// Ray parameters where the ray is inside the volume, if it hits.
std::optional<std::pair<double, double>> intersect_sphere(const Vec3& o, const Vec3& d, double radius);
std::optional<std::pair<double, double>> intersect_box(const Vec3& o, const Vec3& d, const Vec3& lo,
                                                        const Vec3& hi);
/// Head bounding sphere in canonical space, clipped to [ray.near, ray.far].
std::optional<std::pair<double, double>> head_interval(const SceneSpec& scene, const Ray& ray,
                                                       const HeadPose& pose);
/// Torso box (plus margin), clipped to [ray.near, ray.far].
std::optional<std::pair<double, double>> torso_interval(const SceneSpec& scene, const Ray& ray);

struct GroundTruthFrame {
  Image image;
  std::vector<ObjectId> objects;
};

GroundTruthFrame render_ground_truth(const SceneSpec& scene, std::span<const double> landmarks,
                                     const HeadPose& pose);
/// Frame with every non-head pixel replaced by the background.
Image head_only(const GroundTruthFrame& frame, const Vec3& background);
/// Fraction of camera rays that enter the scene bounding volume.
double bounding_coverage(const SceneSpec& scene);

}  // namespace talkrf
