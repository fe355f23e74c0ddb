#include "talkrf/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "talkrf/container.hpp"
#include "talkrf/geometry.hpp"

namespace talkrf {

namespace {

double soft_inside(double r, double edge) { return 1.0 / (1.0 + std::exp((r - 1.0) / edge)); }

}  // namespace

Ray Camera::ray(std::size_t px, std::size_t py) const {
  Ray r;
  r.direction = Vec3((static_cast<double>(px) + 0.5 - cx) / focal, (static_cast<double>(py) + 0.5 - cy) / focal, 1.0)
                    .normalized();
  r.near = 0.1;
  r.far = 10.0;
  return r;
}

Eigen::Vector2d Camera::project(const Vec3& p) const {
  return {focal * p.x() / p.z() + cx, focal * p.y() / p.z() + cy};
}

void Camera::validate() const {
  if (width == 0 || height == 0) throw std::invalid_argument("Camera: resolution must be positive");
  if (!(focal > 0.0)) throw std::invalid_argument("Camera: focal length must be positive");
}

HeadPose HeadPose::from_euler(double yaw, double pitch, double roll, const Vec3& translation) {
  HeadPose p;
  p.rotation = (Eigen::AngleAxisd(yaw, Vec3::UnitY()) * Eigen::AngleAxisd(pitch, Vec3::UnitX()) *
                Eigen::AngleAxisd(roll, Vec3::UnitZ()))
                   .toRotationMatrix();
  p.translation = translation;
  return p;
}

HeadPose HeadPose::from_flat(std::span<const double> v) {
  if (v.size() != 12) throw std::invalid_argument("HeadPose: expected 12 values, got " + std::to_string(v.size()));
  HeadPose p;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = v[r * 4 + c];
    p.translation(r) = v[r * 4 + 3];
  }
  return p;
}

std::array<double, 12> HeadPose::flatten() const {
  std::array<double, 12> out{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out[r * 4 + c] = rotation(r, c);
    out[r * 4 + 3] = translation(r);
  }
  return out;
}

void HeadPose::validate(double tol) const {
  const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
  const double det = rotation.determinant();
  if (!(ortho <= tol) || !(std::abs(det - 1.0) <= tol))
    throw std::invalid_argument("HeadPose: rotation is not orthonormal (|RtR - I| = " + std::to_string(ortho) +
                                ", det = " + std::to_string(det) + ")");
  if (!translation.allFinite()) throw std::invalid_argument("HeadPose: non-finite translation");
}

std::vector<HeadPose> smooth_pose_track(std::size_t frames, const Vec3& rest, Rng& rng, double rotation_amplitude,
                                        double translation_amplitude) {
  // Two slow sinusoids per degree of freedom; periods between 2 and 8 seconds.
  struct Wave {
    double amp, freq, phase;
  };
  std::array<std::array<Wave, 2>, 6> waves{};
  for (std::size_t k = 0; k < 6; ++k) {
    const double scale = k < 3 ? rotation_amplitude * (k == 0 ? 1.0 : 0.5) : translation_amplitude;
    for (auto& w : waves[k]) {
      w.amp = scale * rng.uniform(0.3, 0.7);
      w.freq = 2.0 * std::numbers::pi / (kVideoFps * rng.uniform(2.0, 8.0));
      w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
  }
  std::vector<HeadPose> poses;
  poses.reserve(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    std::array<double, 6> v{};
    for (std::size_t k = 0; k < 6; ++k)
      for (const auto& w : waves[k]) v[k] += w.amp * std::sin(w.freq * static_cast<double>(t) + w.phase);
    poses.push_back(HeadPose::from_euler(v[0], v[1], v[2], rest + Vec3(v[3], v[4], v[5])));
  }
  return poses;
}

void write_poses(const std::filesystem::path& path, std::span<const HeadPose> poses) {
  std::vector<double> flat;
  flat.reserve(poses.size() * 12);
  for (const auto& p : poses) {
    const auto f = p.flatten();
    flat.insert(flat.end(), f.begin(), f.end());
  }
  Container c;
  c.metadata["kind"] = "poses";
  c.put("poses", {poses.size(), 12}, std::move(flat));
  c.save(path);
}

std::vector<HeadPose> read_poses(const std::filesystem::path& path) {
  const auto c = Container::load(path);
  const auto& rec = c.get("poses");
  if (rec.shape.size() != 2 || rec.shape[1] != 12)
    throw std::runtime_error("read_poses: expected [T, 12] in " + path.string());
  std::vector<HeadPose> poses;
  for (std::size_t t = 0; t < rec.shape[0]; ++t) {
    poses.push_back(HeadPose::from_flat(std::span<const double>(rec.values).subspan(t * 12, 12)));
    poses.back().validate(1e-6);
  }
  return poses;
}

void SceneSpec::validate() const {
  camera.validate();
  if ((head_radii.array() <= 0.0).any() || (torso_half.array() <= 0.0).any())
    throw std::invalid_argument("SceneSpec: extents must be positive");
  if (!(mouth_scale > 0.0)) throw std::invalid_argument("SceneSpec: mouth_scale must be positive");
  if (head_bound < head_radii.maxCoeff()) throw std::invalid_argument("SceneSpec: head bound smaller than head");
  if ((bounds_min.array() >= bounds_max.array()).any()) throw std::invalid_argument("SceneSpec: empty bounds");
}

namespace {

nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

void read_vec(const nlohmann::json& j, const char* key, Vec3& v) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3) throw std::invalid_argument(std::string("scene: ") + key + " must have 3 values");
  v = Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
}

template <typename T>
void read_num(const nlohmann::json& j, const char* key, T& v) {
  if (j.contains(key)) v = j.at(key).get<T>();
}

}  // namespace

nlohmann::json scene_to_json(const SceneSpec& s) {
  return {{"width", s.camera.width},
          {"height", s.camera.height},
          {"focal", s.camera.focal},
          {"cx", s.camera.cx},
          {"cy", s.camera.cy},
          {"background", vec_json(s.background)},
          {"head_radii", vec_json(s.head_radii)},
          {"head_rest", vec_json(s.head_rest)},
          {"skin", vec_json(s.skin)},
          {"lip", vec_json(s.lip)},
          {"eye", vec_json(s.eye)},
          {"mouth_reference", s.mouth_reference},
          {"mouth_scale", s.mouth_scale},
          {"head_bound", s.head_bound},
          {"torso_center", vec_json(s.torso_center)},
          {"torso_half", vec_json(s.torso_half)},
          {"torso_color", vec_json(s.torso_color)},
          {"torso_margin", s.torso_margin},
          {"bounds_min", vec_json(s.bounds_min)},
          {"bounds_max", vec_json(s.bounds_max)}};
}

SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  read_num(j, "width", s.camera.width);
  read_num(j, "height", s.camera.height);
  read_num(j, "focal", s.camera.focal);
  read_num(j, "cx", s.camera.cx);
  read_num(j, "cy", s.camera.cy);
  read_vec(j, "background", s.background);
  read_vec(j, "head_radii", s.head_radii);
  read_vec(j, "head_rest", s.head_rest);
  read_vec(j, "skin", s.skin);
  read_vec(j, "lip", s.lip);
  read_vec(j, "eye", s.eye);
  read_num(j, "mouth_reference", s.mouth_reference);
  read_num(j, "mouth_scale", s.mouth_scale);
  read_num(j, "head_bound", s.head_bound);
  read_vec(j, "torso_center", s.torso_center);
  read_vec(j, "torso_half", s.torso_half);
  read_vec(j, "torso_color", s.torso_color);
  read_num(j, "torso_margin", s.torso_margin);
  read_vec(j, "bounds_min", s.bounds_min);
  read_vec(j, "bounds_max", s.bounds_max);
  s.validate();
  return s;
}

double mouth_openness(const SceneSpec& scene, std::span<const double> lm) {
  if (lm.size() != kLandmarkDim) throw std::invalid_argument("mouth_openness: expected 204 values");
  const double gap = lm[kLowerInnerLip * 3 + 1] - lm[kUpperInnerLip * 3 + 1];
  return 0.5 * (1.0 + std::tanh((gap - scene.mouth_reference) / scene.mouth_scale));
}

Vec3 head_albedo(const SceneSpec& scene, const Vec3& x, double openness) {
  const Vec3 u = x.cwiseQuotient(scene.head_radii);
  // Baked lighting from the front-top, fixed to the head.
  const Vec3 n = u.cwiseQuotient(scene.head_radii).normalized();
  const double light = 0.65 + 0.35 * std::max(0.0, -n.z() * 0.9 - n.y() * 0.3);
  Vec3 c = scene.skin * light;
  const double front = 1.0 / (1.0 + std::exp(u.z() / 0.1));  // face side is -z
  const double half_h = 0.05 + 0.16 * openness;
  const double r_mouth = std::hypot(u.x() / 0.38, (u.y() - 0.45) / half_h);
  const double w_mouth = front * soft_inside(r_mouth, 0.12);
  c = c * (1.0 - w_mouth) + scene.lip * w_mouth;
  for (double side : {-1.0, 1.0}) {
    const double r_eye = std::hypot((u.x() - side * 0.36) / 0.14, (u.y() + 0.22) / 0.09);
    const double w_eye = front * soft_inside(r_eye, 0.12);
    c = c * (1.0 - w_eye) + scene.eye * w_eye;
  }
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

Vec3 torso_albedo(const SceneSpec& scene, const Vec3& x) {
  const double v = (x.y() - (scene.torso_center.y() - scene.torso_half.y())) / (2.0 * scene.torso_half.y());
  const double stripe = soft_inside(std::abs(x.x()) / 0.08, 0.15);
  Vec3 c = scene.torso_color * (1.05 - 0.3 * std::clamp(v, 0.0, 1.0));
  c = c * (1.0 - 0.5 * stripe) + Vec3(0.92, 0.92, 0.9) * (0.5 * stripe);
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

std::optional<std::pair<double, double>> intersect_sphere(const Vec3& o, const Vec3& d, double radius) {
  const double a = d.squaredNorm();
  const double b = o.dot(d);
  const double c = o.squaredNorm() - radius * radius;
  const double disc = b * b - a * c;
  if (disc <= 0.0) return std::nullopt;
  const double s = std::sqrt(disc);
  return std::make_pair((-b - s) / a, (-b + s) / a);
}

std::optional<std::pair<double, double>> intersect_box(const Vec3& o, const Vec3& d, const Vec3& lo,
                                                        const Vec3& hi) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d[k]) < 1e-15) {
      if (o[k] < lo[k] || o[k] > hi[k]) return std::nullopt;
      continue;
    }
    double a = (lo[k] - o[k]) / d[k];
    double b = (hi[k] - o[k]) / d[k];
    if (a > b) std::swap(a, b);
    t0 = std::max(t0, a);
    t1 = std::min(t1, b);
  }
  if (!(t0 < t1)) return std::nullopt;
  return std::make_pair(t0, t1);
}

namespace {

std::optional<std::pair<double, double>> clip(std::optional<std::pair<double, double>> hit, const Ray& ray) {
  if (!hit) return hit;
  const double a = std::max(hit->first, ray.near);
  const double b = std::min(hit->second, ray.far);
  if (!(a < b)) return std::nullopt;
  return std::make_pair(a, b);
}

}  // namespace

std::optional<std::pair<double, double>> head_interval(const SceneSpec& scene, const Ray& ray, const HeadPose& pose) {
  // The pose is rigid, so the ray parameter is shared by both frames.
  return clip(intersect_sphere(pose.to_canonical(ray.origin), pose.direction_to_canonical(ray.direction),
                               scene.head_bound),
              ray);
}

std::optional<std::pair<double, double>> torso_interval(const SceneSpec& scene, const Ray& ray) {
  const Vec3 m = Vec3::Constant(scene.torso_margin);
  return clip(intersect_box(ray.origin, ray.direction, scene.torso_center - scene.torso_half - m,
                            scene.torso_center + scene.torso_half + m),
              ray);
}

GroundTruthFrame render_ground_truth(const SceneSpec& scene, std::span<const double> landmarks, const HeadPose& pose) {
  const double openness = mouth_openness(scene, landmarks);
  const auto& cam = scene.camera;
  GroundTruthFrame out{Image(cam.width, cam.height), std::vector<ObjectId>(cam.width * cam.height)};
  for (std::size_t py = 0; py < cam.height; ++py)
    for (std::size_t px = 0; px < cam.width; ++px) {
      const Ray ray = cam.ray(px, py);
      double best = std::numeric_limits<double>::infinity();
      ObjectId id = ObjectId::Background;
      Vec3 color = scene.background;
      // Head: unit sphere after mapping to canonical space and dividing by the radii.
      const Vec3 oc = pose.to_canonical(ray.origin).cwiseQuotient(scene.head_radii);
      const Vec3 dc = pose.direction_to_canonical(ray.direction).cwiseQuotient(scene.head_radii);
      if (auto hit = intersect_sphere(oc, dc, 1.0); hit && hit->first > ray.near) {
        best = hit->first;
        id = ObjectId::Head;
        color = head_albedo(scene, pose.to_canonical(ray.origin + best * ray.direction), openness);
      }
      if (auto hit = intersect_box(ray.origin, ray.direction, scene.torso_center - scene.torso_half,
                                   scene.torso_center + scene.torso_half);
          hit && hit->first > ray.near && hit->first < best) {
        best = hit->first;
        id = ObjectId::Torso;
        color = torso_albedo(scene, ray.origin + best * ray.direction);
      }
      const std::size_t p = py * cam.width + px;
      out.objects[p] = id;
      for (int c = 0; c < 3; ++c) out.image.rgb[p * 3 + c] = color[c];
    }
  return out;
}

Image head_only(const GroundTruthFrame& frame, const Vec3& background) {
  Image img = frame.image;
  for (std::size_t p = 0; p < img.pixels(); ++p)
    if (frame.objects[p] != ObjectId::Head)
      for (int c = 0; c < 3; ++c) img.rgb[p * 3 + c] = background[c];
  return img;
}

double bounding_coverage(const SceneSpec& scene) {
  const auto& cam = scene.camera;
  std::size_t hits = 0;
  for (std::size_t py = 0; py < cam.height; ++py)
    for (std::size_t px = 0; px < cam.width; ++px) {
      const Ray r = cam.ray(px, py);
      if (clip(intersect_box(r.origin, r.direction, scene.bounds_min, scene.bounds_max), r)) ++hits;
    }
  return static_cast<double>(hits) / static_cast<double>(cam.width * cam.height);
}

}  // namespace talkrf
