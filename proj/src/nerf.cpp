#include "talkrf/nerf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

#include "talkrf/container.hpp"
#include "talkrf/optim.hpp"

namespace talkrf {

namespace {

// Raw density outputs are scaled so an opaque surface is reachable early in training.
constexpr double kDensityScale = 10.0;

// PE of (x - offset) / scale for every sample point: [R, S, 3] -> [R, S, E].
Tensor encode_points(const Tensor& points, const Vec3& offset, double scale, std::size_t freqs) {
  const std::size_t n = points.numel() / 3, e = encoding_dim(freqs);
  std::vector<double> out;
  out.reserve(n * e);
  const auto v = points.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double x[3] = {(v[3 * i] - offset.x()) / scale, (v[3 * i + 1] - offset.y()) / scale,
                         (v[3 * i + 2] - offset.z()) / scale};
    const auto pe = positional_encoding(x, freqs);
    out.insert(out.end(), pe.begin(), pe.end());
  }
  Shape shape = points.shape();
  shape.back() = e;
  return Tensor::from(std::move(shape), std::move(out));
}

// PE of unit directions, one row per ray: [R, 3] -> [R, E].
Tensor encode_directions(const Tensor& dirs, std::size_t freqs) {
  return encode_points(dirs, Vec3::Zero(), 1.0, freqs);
}

Tensor mlp(const std::vector<Linear>& layers, Tensor h) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return h;
}

Tensor tile_rows(const Tensor& x, std::size_t rows) {
  if (x.dim(0) == rows) return x;
  if (x.dim(0) != 1) throw ShapeError("nerf: cannot tile " + to_string(x.shape()) + " to " + std::to_string(rows) + " rows");
  return gather_rows(x, std::vector<std::size_t>(rows, 0));
}

void check_samples(const Tensor& points, const char* who) {
  if (points.rank() != 3 || points.dim(2) != 3)
    throw ShapeError(std::string(who) + ": expected points [R, S, 3], got " + to_string(points.shape()));
  for (double v : points.values())
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite sample point");
}

void check_rows(const Tensor& t, std::size_t rays, std::size_t width, const char* who, const char* what) {
  if (t.rank() != 2 || t.dim(1) != width || (t.dim(0) != rays && t.dim(0) != 1))
    throw ShapeError(fmt::format("{}: expected {} [{} or 1, {}], got {}", who, what, rays, width, to_string(t.shape())));
}

// Shared trunk and color head: trunk input is PE(x) plus the broadcast per-ray code.
struct Trunk {
  const std::vector<Linear>& trunk;
  const Linear &sigma, &feature, &view_feature, &view_dir, &rgb;

  FieldOutput operator()(const Tensor& encoded, const Tensor& code, const Tensor& dir_code) const {
    const std::size_t R = encoded.dim(0), S = encoded.dim(1);
    const std::size_t W = code.dim(1);
    Tensor h = relu(trunk[0](encoded) + reshape(code, {code.dim(0), 1, W}));
    for (std::size_t i = 1; i < trunk.size(); ++i) h = relu(trunk[i](h));
    FieldOutput out;
    out.sigma = reshape(softplus(sigma(h)), {R, S}) * kDensityScale;
    const Tensor v = view_dir(dir_code);
    const Tensor f = relu(view_feature(feature(h)) + reshape(v, {v.dim(0), 1, v.dim(1)}));
    out.color = sigmoid(rgb(f));
    return out;
  }
};

std::vector<double> pixel(const Image& img, std::size_t index) {
  return {img.rgb[3 * index], img.rgb[3 * index + 1], img.rgb[3 * index + 2]};
}

}  // namespace

void NerfConfig::validate() const {
  if (pos_frequencies < 1 || trunk_layers < 1 || condition_layers < 1)
    throw std::invalid_argument("nerf: frequencies and layer counts must be >= 1");
  if (trunk_width < 2 || condition_width < 1) throw std::invalid_argument("nerf: trunk_width must be >= 2");
  if (samples < 1 || rays < 1) throw std::invalid_argument("nerf: samples and rays must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("nerf: lr must be > 0");
  if (!(lr_final_fraction > 0.0 && lr_final_fraction <= 1.0))
    throw std::invalid_argument("nerf: lr_final_fraction must be in (0, 1]");
  if (!(divergence_limit > 0.0)) throw std::invalid_argument("nerf: divergence_limit must be > 0");
}

nlohmann::json NerfConfig::to_json() const {
  return {{"pos_frequencies", pos_frequencies},
          {"dir_frequencies", dir_frequencies},
          {"trunk_layers", trunk_layers},
          {"trunk_width", trunk_width},
          {"condition_layers", condition_layers},
          {"condition_width", condition_width},
          {"samples", samples},
          {"rays", rays},
          {"head_steps", head_steps},
          {"torso_steps", torso_steps},
          {"lr", lr},
          {"lr_final_fraction", lr_final_fraction},
          {"head_aware", head_aware},
          {"divergence_limit", divergence_limit},
          {"log_every", log_every}};
}

NerfConfig NerfConfig::from_json(const nlohmann::json& j) {
  NerfConfig c;
  c.pos_frequencies = j.value("pos_frequencies", c.pos_frequencies);
  c.dir_frequencies = j.value("dir_frequencies", c.dir_frequencies);
  c.trunk_layers = j.value("trunk_layers", c.trunk_layers);
  c.trunk_width = j.value("trunk_width", c.trunk_width);
  c.condition_layers = j.value("condition_layers", c.condition_layers);
  c.condition_width = j.value("condition_width", c.condition_width);
  c.samples = j.value("samples", c.samples);
  c.rays = j.value("rays", c.rays);
  c.head_steps = j.value("head_steps", c.head_steps);
  c.torso_steps = j.value("torso_steps", c.torso_steps);
  c.lr = j.value("lr", c.lr);
  c.lr_final_fraction = j.value("lr_final_fraction", c.lr_final_fraction);
  c.head_aware = j.value("head_aware", c.head_aware);
  c.divergence_limit = j.value("divergence_limit", c.divergence_limit);
  c.log_every = j.value("log_every", c.log_every);
  c.validate();
  return c;
}

std::vector<double> positional_encoding(std::span<const double> x, std::size_t frequencies) {
  std::vector<double> out(x.begin(), x.end());
  out.reserve(x.size() * (1 + 2 * frequencies));
  for (std::size_t k = 0; k < frequencies; ++k) {
    const double f = std::ldexp(std::numbers::pi, static_cast<int>(k));
    for (double v : x) out.push_back(std::sin(f * v));
    for (double v : x) out.push_back(std::cos(f * v));
  }
  return out;
}

std::vector<double> landmark_condition(const LandmarkSequence& raw, std::size_t t, const NormalizationStats& stats) {
  if (raw.frames() == 0) throw std::invalid_argument("landmark_condition: empty sequence");
  if (t >= raw.frames()) throw std::out_of_range(fmt::format("landmark_condition: frame {} of {}", t, raw.frames()));
  if (stats.mean.size() != kLandmarkDim || stats.stddev.size() != kLandmarkDim)
    throw std::invalid_argument("landmark_condition: normalization stats must cover 204 coordinates");
  std::vector<double> out;
  out.reserve(kConditionDim);
  for (std::ptrdiff_t o = -1; o <= 1; ++o) {
    const auto f = static_cast<std::size_t>(
        std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(t) + o, 0, static_cast<std::ptrdiff_t>(raw.frames()) - 1));
    const auto frame = raw.frame(f);
    for (std::size_t i = 0; i < kLandmarkDim; ++i) out.push_back((frame[i] - stats.mean[i]) / stats.stddev[i]);
  }
  return out;
}

RaySamples stratified_samples(std::span<const std::pair<double, double>> intervals, std::size_t samples, Rng* jitter) {
  if (samples == 0) throw std::invalid_argument("stratified_samples: samples must be >= 1");
  RaySamples out;
  out.rays = intervals.size();
  out.samples = samples;
  out.t.resize(out.rays * samples);
  out.deltas.resize(out.rays * samples);
  for (std::size_t r = 0; r < out.rays; ++r) {
    const auto [near, far] = intervals[r];
    if (!(std::isfinite(near) && std::isfinite(far) && far >= near))
      throw std::invalid_argument(fmt::format("stratified_samples: bad interval [{}, {}]", near, far));
    const double bin = (far - near) / static_cast<double>(samples);
    double* t = &out.t[r * samples];
    for (std::size_t i = 0; i < samples; ++i) {
      const double u = jitter ? jitter->uniform() : 0.5;
      t[i] = near + (static_cast<double>(i) + u) * bin;
    }
    double* d = &out.deltas[r * samples];
    for (std::size_t i = 0; i + 1 < samples; ++i) d[i] = t[i + 1] - t[i];
    d[samples - 1] = far - t[samples - 1];
  }
  return out;
}

Composite volume_render(const Tensor& sigma, const Tensor& color, std::span<const double> deltas,
                        const Tensor& background) {
  if (sigma.rank() != 2) throw ShapeError("volume_render: sigma must be [R, S], got " + to_string(sigma.shape()));
  const std::size_t R = sigma.dim(0), S = sigma.dim(1);
  if (color.shape() != Shape{R, S, 3})
    throw ShapeError("volume_render: color must be [R, S, 3], got " + to_string(color.shape()));
  if (background.shape() != Shape{R, 3})
    throw ShapeError("volume_render: background must be [R, 3], got " + to_string(background.shape()));
  if (deltas.size() != R * S) throw ShapeError("volume_render: deltas must hold R * S values");

  const auto sv = sigma.values(), cv = color.values(), bv = background.values();
  for (double s : sv)
    if (!std::isfinite(s) || s < 0.0) throw std::invalid_argument("volume_render: density must be finite and >= 0");

  Composite out;
  out.weights.resize(R * S);
  out.residual.resize(R);
  std::vector<double> rgb(R * 3, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    double T = 1.0;
    double* c = &rgb[3 * r];
    for (std::size_t i = 0; i < S; ++i) {
      const std::size_t k = r * S + i;
      // T_{i+1} = T_i - w_i keeps sum(w) + T_end = 1 up to rounding.
      const double w = -T * std::expm1(-sv[k] * deltas[k]);
      out.weights[k] = w;
      T -= w;
      for (std::size_t ch = 0; ch < 3; ++ch) c[ch] += w * cv[3 * k + ch];
    }
    out.residual[r] = T;
    for (std::size_t ch = 0; ch < 3; ++ch) c[ch] += T * bv[3 * r + ch];
  }

  out.rgb = make_result(
      "volume_render", {R, 3}, std::move(rgb), {sigma, color, background},
      [R, S, weights = out.weights, residual = out.residual,
       d = std::vector<double>(deltas.begin(), deltas.end())](Node& self) {
        const auto& g = self.grad;
        Node& ns = *self.parents[0];
        Node& nc = *self.parents[1];
        Node& nb = *self.parents[2];
        const auto& cv = nc.value;
        const auto& bv = nb.value;
        std::vector<double>* gs = ns.requires_grad ? &ns.grad_buffer() : nullptr;
        std::vector<double>* gc = nc.requires_grad ? &nc.grad_buffer() : nullptr;
        std::vector<double>* gb = nb.requires_grad ? &nb.grad_buffer() : nullptr;
        for (std::size_t r = 0; r < R; ++r) {
          const double* gr = &g[3 * r];
          if (gb)
            for (std::size_t ch = 0; ch < 3; ++ch) (*gb)[3 * r + ch] += residual[r] * gr[ch];
          // suffix = sum_{i>k} w_i (g . c_i) + T_end (g . bg)
          double suffix = residual[r] * (gr[0] * bv[3 * r] + gr[1] * bv[3 * r + 1] + gr[2] * bv[3 * r + 2]);
          double T_next = residual[r];
          for (std::size_t i = S; i-- > 0;) {
            const std::size_t k = r * S + i;
            const double gdc = gr[0] * cv[3 * k] + gr[1] * cv[3 * k + 1] + gr[2] * cv[3 * k + 2];
            if (gs) (*gs)[k] += d[k] * (T_next * gdc - suffix);
            if (gc)
              for (std::size_t ch = 0; ch < 3; ++ch) (*gc)[3 * k + ch] += weights[k] * gr[ch];
            suffix += weights[k] * gdc;
            T_next += weights[k];
          }
        }
      });
  return out;
}

// ------------------------------------------------------------------ fields

HeadField::HeadField(const NerfConfig& config, double bound, std::uint64_t seed) : config_(config), bound_(bound) {
  config_.validate();
  if (!(bound > 0.0)) throw std::invalid_argument("HeadField: bound must be > 0");
  Rng rng(seed);
  const std::size_t W = config_.trunk_width, C = config_.condition_width;
  for (std::size_t i = 0; i < config_.condition_layers; ++i)
    cond_.emplace_back(params_, fmt::format("head.cond{}", i), i == 0 ? kConditionDim : C, C, rng);
  cond_in_ = Linear(params_, "head.cond_in", C, W, rng);
  for (std::size_t i = 0; i < config_.trunk_layers; ++i)
    trunk_.emplace_back(params_, fmt::format("head.trunk{}", i), i == 0 ? encoding_dim(config_.pos_frequencies) : W, W,
                        rng);
  sigma_ = Linear(params_, "head.sigma", W, 1, rng);
  feature_ = Linear(params_, "head.feature", W, W, rng);
  view_feature_ = Linear(params_, "head.view_feature", W, W / 2, rng);
  view_dir_ = Linear(params_, "head.view_dir", encoding_dim(config_.dir_frequencies), W / 2, rng);
  rgb_ = Linear(params_, "head.rgb", W / 2, 3, rng);
}

FieldOutput HeadField::operator()(const Tensor& points, const Tensor& dirs, const Tensor& condition) const {
  check_samples(points, "HeadField");
  const std::size_t R = points.dim(0);
  if (dirs.shape() != Shape{R, 3}) throw ShapeError("HeadField: dirs must be [R, 3], got " + to_string(dirs.shape()));
  check_rows(condition, R, kConditionDim, "HeadField", "condition");
  const Tensor code = cond_in_(mlp(cond_, condition));
  const Trunk t{trunk_, sigma_, feature_, view_feature_, view_dir_, rgb_};
  return t(encode_points(points, Vec3::Zero(), bound_, config_.pos_frequencies), code,
           encode_directions(dirs, config_.dir_frequencies));
}

TorsoField::TorsoField(const NerfConfig& config, const Vec3& center, double scale, std::uint64_t seed)
    : config_(config), center_(center), scale_(scale) {
  config_.validate();
  if (!(scale > 0.0)) throw std::invalid_argument("TorsoField: scale must be > 0");
  Rng rng(seed);
  const std::size_t W = config_.trunk_width, C = config_.condition_width;
  const std::size_t E = encoding_dim(config_.pos_frequencies), Ed = encoding_dim(config_.dir_frequencies);
  for (std::size_t i = 0; i < config_.condition_layers; ++i)
    color_enc_.emplace_back(params_, fmt::format("torso.color{}", i), i == 0 ? 3 : C, C, rng);
  for (std::size_t i = 0; i < config_.condition_layers; ++i)
    cond_.emplace_back(params_, fmt::format("torso.cond{}", i), i == 0 ? kConditionDim : C, C, rng);
  cond_in_ = Linear(params_, "torso.cond_in", C + 12 + Ed + C, W, rng);
  for (std::size_t i = 0; i < config_.trunk_layers; ++i)
    trunk_.emplace_back(params_, fmt::format("torso.trunk{}", i), i == 0 ? E : W, W, rng);
  sigma_ = Linear(params_, "torso.sigma", W, 1, rng);
  feature_ = Linear(params_, "torso.feature", W, W, rng);
  view_feature_ = Linear(params_, "torso.view_feature", W, W / 2, rng);
  view_dir_ = Linear(params_, "torso.view_dir", Ed, W / 2, rng);
  rgb_ = Linear(params_, "torso.rgb", W / 2, 3, rng);
}

FieldOutput TorsoField::operator()(const Tensor& points, const Tensor& head_color, const Tensor& pose,
                                   const Tensor& condition) const {
  check_samples(points, "TorsoField");
  const std::size_t R = points.dim(0);
  check_rows(head_color, R, 3, "TorsoField", "head_color");
  check_rows(pose, R, 12, "TorsoField", "pose");
  check_rows(condition, R, kConditionDim, "TorsoField", "condition");
  const Tensor hc = config_.head_aware ? head_color : Tensor::zeros(head_color.shape());
  const Tensor d0 = encode_directions(Tensor::from({1, 3}, {kTorsoViewDirection.x(), kTorsoViewDirection.y(),
                                                            kTorsoViewDirection.z()}),
                                      config_.dir_frequencies);
  const Tensor code = cond_in_(concat({tile_rows(mlp(color_enc_, hc), R), tile_rows(pose, R), tile_rows(d0, R),
                                       tile_rows(mlp(cond_, condition), R)},
                                      1));
  const Trunk t{trunk_, sigma_, feature_, view_feature_, view_dir_, rgb_};
  return t(encode_points(points, center_, scale_, config_.pos_frequencies), code, d0);
}

// ------------------------------------------------------------------ models

void HeadModel::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  if (!field) throw std::logic_error("HeadModel::save: no field");
  nlohmann::json meta = extra;
  meta["kind"] = "nerf-head";
  meta["config"] = field->config().to_json();
  meta["bound"] = field->bound();
  meta["scene"] = scene_to_json(scene);
  Container c = checkpoint_container(field->params(), nullptr, meta);
  condition_stats.store(c, "condition");
  c.save(path);
}

HeadModel HeadModel::load(const std::filesystem::path& path) {
  const Container c = Container::load(path);
  if (c.metadata.value("kind", "") != "nerf-head") throw std::runtime_error(path.string() + " is not a head field checkpoint");
  HeadModel m;
  m.scene = scene_from_json(c.metadata.at("scene"));
  m.condition_stats = NormalizationStats::restore(c, "condition");
  m.field = std::make_unique<HeadField>(NerfConfig::from_json(c.metadata.at("config")),
                                        c.metadata.at("bound").get<double>(), 0);
  restore_checkpoint(c, m.field->params());
  return m;
}

void TorsoModel::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  if (!field) throw std::logic_error("TorsoModel::save: no field");
  nlohmann::json meta = extra;
  meta["kind"] = "nerf-torso";
  meta["config"] = field->config().to_json();
  meta["center"] = {field->center().x(), field->center().y(), field->center().z()};
  meta["scale"] = field->scale();
  checkpoint_container(field->params(), nullptr, meta).save(path);
}

TorsoModel TorsoModel::load(const std::filesystem::path& path) {
  const Container c = Container::load(path);
  if (c.metadata.value("kind", "") != "nerf-torso") throw std::runtime_error(path.string() + " is not a torso field checkpoint");
  const auto ctr = c.metadata.at("center").get<std::vector<double>>();
  TorsoModel m;
  m.field = std::make_unique<TorsoField>(NerfConfig::from_json(c.metadata.at("config")), Vec3(ctr.at(0), ctr.at(1), ctr.at(2)),
                                         c.metadata.at("scale").get<double>(), 0);
  restore_checkpoint(c, m.field->params());
  return m;
}

HeadModel make_head_model(const NerfConfig& config, const NerfDataset& data, std::uint64_t seed) {
  if (data.landmarks.empty()) throw std::invalid_argument("make_head_model: empty dataset");
  HeadModel m;
  m.scene = data.scene;
  m.condition_stats = fit_normalization(data.landmarks);
  m.field = std::make_unique<HeadField>(config, data.scene.head_bound, seed);
  return m;
}

TorsoModel make_torso_model(const NerfConfig& config, const SceneSpec& scene, std::uint64_t seed) {
  // Canonical coordinates of the torso box at the rest pose; the slack covers head motion.
  const Vec3 center = scene.torso_center - scene.head_rest;
  const double scale = scene.torso_half.maxCoeff() + scene.torso_margin + 0.25;
  TorsoModel m;
  m.field = std::make_unique<TorsoField>(config, center, scale, seed);
  return m;
}

// ------------------------------------------------------------------ rendering

namespace {

struct RayBatch {
  std::vector<std::pair<double, double>> intervals;
  std::vector<Vec3> origins, directions;  // frame the samples live in
};

// [R, S, 3] points o + t d from stratified samples.
Tensor sample_points(const RayBatch& b, const RaySamples& s) {
  std::vector<double> v(s.rays * s.samples * 3);
  for (std::size_t r = 0; r < s.rays; ++r)
    for (std::size_t i = 0; i < s.samples; ++i) {
      const Vec3 p = b.origins[r] + s.t[r * s.samples + i] * b.directions[r];
      for (std::size_t k = 0; k < 3; ++k) v[(r * s.samples + i) * 3 + k] = p[k];
    }
  return Tensor::from({s.rays, s.samples, 3}, std::move(v));
}

Tensor direction_rows(const std::vector<Vec3>& dirs) {
  std::vector<double> v;
  v.reserve(dirs.size() * 3);
  for (const auto& d : dirs) v.insert(v.end(), {d.x(), d.y(), d.z()});
  return Tensor::from({dirs.size(), 3}, std::move(v));
}

// Torso samples are generated in camera space and evaluated in canonical space.
Tensor torso_points(const RayBatch& b, const RaySamples& s, const std::vector<HeadPose>& poses) {
  Tensor p = sample_points(b, s);
  auto v = p.mutable_values();
  for (std::size_t r = 0; r < s.rays; ++r)
    for (std::size_t i = 0; i < s.samples; ++i) {
      double* q = &v[(r * s.samples + i) * 3];
      const Vec3 c = poses[r].to_canonical(Vec3(q[0], q[1], q[2]));
      q[0] = c.x();
      q[1] = c.y();
      q[2] = c.z();
    }
  return p;
}

Tensor pose_rows(const std::vector<HeadPose>& poses) {
  std::vector<double> v;
  v.reserve(poses.size() * 12);
  for (const auto& p : poses) {
    const auto f = p.flatten();
    v.insert(v.end(), f.begin(), f.end());
  }
  return Tensor::from({poses.size(), 12}, std::move(v));
}

Tensor render_head_rays(const HeadField& field, const RayBatch& b, const Tensor& condition, const Vec3& background,
                        std::size_t samples, Rng* jitter) {
  const auto s = stratified_samples(b.intervals, samples, jitter);
  const auto out = field(sample_points(b, s), direction_rows(b.directions), condition);
  std::vector<double> bg;
  for (std::size_t r = 0; r < b.intervals.size(); ++r) bg.insert(bg.end(), {background.x(), background.y(), background.z()});
  return volume_render(out.sigma, out.color, s.deltas, Tensor::from({b.intervals.size(), 3}, std::move(bg))).rgb;
}

Tensor render_torso_rays(const TorsoField& field, const RayBatch& b, const std::vector<HeadPose>& poses,
                         const Tensor& head_color, const Tensor& condition, std::size_t samples, Rng* jitter,
                         bool transparent) {
  const auto s = stratified_samples(b.intervals, samples, jitter);
  auto out = field(torso_points(b, s, poses), head_color, pose_rows(poses), condition);
  if (transparent) out.sigma = Tensor::zeros(out.sigma.shape());
  return volume_render(out.sigma, out.color, s.deltas, head_color).rgb;
}

double lr_factor(const NerfConfig& cfg, std::size_t step, std::size_t steps) {
  const double progress = static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(steps, 1));
  return cfg.lr_final_fraction + (1.0 - cfg.lr_final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace

FrameRender render_frame(const HeadModel& head, const TorsoModel* torso, std::span<const double> condition,
                         const HeadPose& pose, const RenderOptions& options) {
  if (!head.field) throw std::invalid_argument("render_frame: head model has no field");
  if (condition.size() != kConditionDim)
    throw std::invalid_argument(fmt::format("render_frame: condition has {} values, expected {}", condition.size(), kConditionDim));
  for (double v : condition)
    if (!std::isfinite(v)) throw std::invalid_argument("render_frame: non-finite condition");
  pose.validate(1e-6);
  if (options.chunk == 0) throw std::invalid_argument("render_frame: chunk must be >= 1");
  const auto& scene = head.scene;
  const auto& cam = scene.camera;
  const std::size_t samples = options.samples ? options.samples : head.field->config().samples;
  const Tensor cond = Tensor::from({1, kConditionDim}, std::vector<double>(condition.begin(), condition.end()));
  NoGradGuard guard;

  FrameRender out{Image(cam.width, cam.height), Image()};
  for (std::size_t i = 0; i < out.head.pixels(); ++i)
    for (std::size_t c = 0; c < 3; ++c) out.head.rgb[3 * i + c] = scene.background[c];

  auto run_chunks = [&](auto&& hits, auto&& render) {
    for (std::size_t start = 0; start < hits.size(); start += options.chunk) {
      const std::size_t end = std::min(hits.size(), start + options.chunk);
      render(std::span(hits).subspan(start, end - start));
    }
  };

  struct Hit {
    std::size_t pixel;
    Ray ray;
    std::pair<double, double> interval;
  };
  std::vector<Hit> head_hits, torso_hits;
  for (std::size_t py = 0; py < cam.height; ++py)
    for (std::size_t px = 0; px < cam.width; ++px) {
      const Ray ray = cam.ray(px, py);
      if (auto iv = head_interval(scene, ray, pose)) head_hits.push_back({py * cam.width + px, ray, *iv});
      if (torso)
        if (auto iv = torso_interval(scene, ray)) torso_hits.push_back({py * cam.width + px, ray, *iv});
    }

  run_chunks(head_hits, [&](std::span<const Hit> hits) {
    RayBatch b;
    for (const auto& h : hits) {
      b.intervals.push_back(h.interval);
      b.origins.push_back(pose.to_canonical(h.ray.origin));
      b.directions.push_back(pose.direction_to_canonical(h.ray.direction));
    }
    const Tensor rgb = render_head_rays(*head.field, b, cond, scene.background, samples, nullptr);
    for (std::size_t r = 0; r < hits.size(); ++r)
      for (std::size_t c = 0; c < 3; ++c) out.head.rgb[3 * hits[r].pixel + c] = rgb[3 * r + c];
  });

  out.full = out.head;
  if (!torso) return out;
  if (!torso->field) throw std::invalid_argument("render_frame: torso model has no field");
  run_chunks(torso_hits, [&](std::span<const Hit> hits) {
    RayBatch b;
    std::vector<double> hc;
    for (const auto& h : hits) {
      b.intervals.push_back(h.interval);
      b.origins.push_back(h.ray.origin);
      b.directions.push_back(h.ray.direction);
      const auto p = pixel(out.head, h.pixel);
      hc.insert(hc.end(), p.begin(), p.end());
    }
    const std::vector<HeadPose> poses(hits.size(), pose);
    const Tensor rgb = render_torso_rays(*torso->field, b, poses, Tensor::from({hits.size(), 3}, std::move(hc)), cond,
                                         samples, nullptr, options.torso_transparent);
    for (std::size_t r = 0; r < hits.size(); ++r)
      for (std::size_t c = 0; c < 3; ++c) out.full.rgb[3 * hits[r].pixel + c] = rgb[3 * r + c];
  });
  return out;
}

// ------------------------------------------------------------------ data and training

std::size_t NerfDataset::frame_count() const {
  std::size_t n = 0;
  for (const auto& f : frames) n += f.size();
  return n;
}

NerfDataset NerfDataset::from_target(const TargetDomain& target, const std::string& split) {
  NerfDataset d;
  d.scene = target.scene;
  for (const auto* u : target.split(split)) {
    if (u->frames.size() != u->landmarks.frames() || u->poses.size() != u->landmarks.frames())
      throw std::invalid_argument(fmt::format("NerfDataset: utterance {} is missing rendered frames or poses", u->id));
    d.landmarks.push_back(u->landmarks);
    d.poses.push_back(u->poses);
    d.frames.push_back(u->frames);
  }
  if (d.frames.empty()) throw std::invalid_argument(fmt::format("NerfDataset: no '{}' utterances", split));
  return d;
}

namespace {

struct FrameRef {
  std::size_t utterance, frame;
};

// Flat frame index plus the normalized condition of every frame.
struct FrameTable {
  std::vector<FrameRef> refs;
  std::vector<std::vector<double>> conditions;

  FrameTable(const NerfDataset& data, const NormalizationStats& stats) {
    for (std::size_t u = 0; u < data.frames.size(); ++u)
      for (std::size_t f = 0; f < data.frames[u].size(); ++f) {
        refs.push_back({u, f});
        conditions.push_back(landmark_condition(data.landmarks[u], f, stats));
      }
  }
};

struct SampledRays {
  RayBatch batch;
  std::vector<std::size_t> frames, pixels;
};

// Rejection-samples (frame, pixel) pairs whose rays hit the volume picked by `hit`.
template <typename Hit>
SampledRays sample_rays(const NerfDataset& data, const FrameTable& table, std::size_t count, Rng& rng, Hit&& hit) {
  const auto& cam = data.scene.camera;
  SampledRays s;
  std::size_t attempts = 0;
  while (s.frames.size() < count) {
    if (++attempts > 1000 * count + 100000) throw std::runtime_error("nerf training: rays never hit the sampling volume");
    const auto fi = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(table.refs.size()) - 1));
    const auto px = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(cam.width) - 1));
    const auto py = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(cam.height) - 1));
    const Ray ray = cam.ray(px, py);
    const auto& ref = table.refs[fi];
    if (hit(s.batch, ray, data.poses[ref.utterance][ref.frame])) {
      s.frames.push_back(fi);
      s.pixels.push_back(py * cam.width + px);
    }
  }
  return s;
}

Tensor condition_rows(const FrameTable& table, const std::vector<std::size_t>& frames) {
  std::vector<double> v;
  v.reserve(frames.size() * kConditionDim);
  for (auto f : frames) v.insert(v.end(), table.conditions[f].begin(), table.conditions[f].end());
  return Tensor::from({frames.size(), kConditionDim}, std::move(v));
}

void check_loss(double loss, const NerfConfig& cfg, const char* stage, std::size_t step) {
  if (!std::isfinite(loss) || loss > cfg.divergence_limit)
    throw std::runtime_error(fmt::format("train_nerf_{}: diverged at step {}: loss {}", stage, step, loss));
}

}  // namespace

NerfTrainReport train_nerf_head(HeadModel& model, const NerfDataset& data, std::uint64_t seed, const TrainLog& log) {
  if (!model.field) throw std::invalid_argument("train_nerf_head: no field");
  const auto& cfg = model.field->config();
  const auto& scene = data.scene;
  const FrameTable table(data, model.condition_stats);
  Adam adam(AdamOptions{cfg.lr});
  Rng rng(seed);
  NerfTrainReport report;

  for (std::size_t step = 0; step < cfg.head_steps; ++step) {
    adam.options().lr = cfg.lr * lr_factor(cfg, step, cfg.head_steps);
    auto rays = sample_rays(data, table, cfg.rays, rng, [&](RayBatch& b, const Ray& ray, const HeadPose& pose) {
      const auto iv = head_interval(scene, ray, pose);
      if (!iv) return false;
      b.intervals.push_back(*iv);
      b.origins.push_back(pose.to_canonical(ray.origin));
      b.directions.push_back(pose.direction_to_canonical(ray.direction));
      return true;
    });
    std::vector<double> target;
    target.reserve(cfg.rays * 3);
    for (std::size_t r = 0; r < cfg.rays; ++r) {
      const auto& ref = table.refs[rays.frames[r]];
      const auto& gt = data.frames[ref.utterance][ref.frame];
      const auto p = rays.pixels[r];
      for (std::size_t c = 0; c < 3; ++c)
        target.push_back(gt.objects[p] == ObjectId::Head ? gt.image.rgb[3 * p + c] : scene.background[c]);
    }
    const Tensor rgb = render_head_rays(*model.field, rays.batch, condition_rows(table, rays.frames), scene.background,
                                        cfg.samples, &rng);
    const Tensor loss = mse(rgb, Tensor::from({cfg.rays, 3}, std::move(target)));
    const double l = loss.item();
    check_loss(l, cfg, "head", step);
    model.field->params().zero_grad();
    loss.backward();
    adam.step(model.field->params());
    report.losses.push_back(l);
    if (log && cfg.log_every > 0 && (step + 1) % cfg.log_every == 0)
      log({{"stage", "nerf-head"}, {"step", step + 1}, {"loss", l}});
  }
  model.field->params().zero_grad();
  return report;
}

NerfTrainReport train_nerf_torso(TorsoModel& torso, const HeadModel& head, const NerfDataset& data, std::uint64_t seed,
                                 const TrainLog& log) {
  if (!torso.field || !head.field) throw std::invalid_argument("train_nerf_torso: missing field");
  const auto& cfg = torso.field->config();
  const auto& scene = data.scene;
  const FrameTable table(data, head.condition_stats);
  Adam adam(AdamOptions{cfg.lr});
  Rng rng(seed);
  NerfTrainReport report;
  const std::size_t head_samples = head.field->config().samples;

  for (std::size_t step = 0; step < cfg.torso_steps; ++step) {
    adam.options().lr = cfg.lr * lr_factor(cfg, step, cfg.torso_steps);
    std::vector<HeadPose> poses;
    std::vector<Ray> cam_rays;
    auto rays = sample_rays(data, table, cfg.rays, rng, [&](RayBatch& b, const Ray& ray, const HeadPose& pose) {
      const auto iv = torso_interval(scene, ray);
      if (!iv) return false;
      b.intervals.push_back(*iv);
      b.origins.push_back(ray.origin);
      b.directions.push_back(ray.direction);
      poses.push_back(pose);
      cam_rays.push_back(ray);
      return true;
    });
    const Tensor cond = condition_rows(table, rays.frames);

    // Head color behind each torso ray from the frozen head field.
    std::vector<double> hc(cfg.rays * 3);
    {
      NoGradGuard guard;
      RayBatch hb;
      std::vector<std::size_t> rows;
      for (std::size_t r = 0; r < cfg.rays; ++r) {
        for (std::size_t c = 0; c < 3; ++c) hc[3 * r + c] = scene.background[c];
        if (auto iv = head_interval(scene, cam_rays[r], poses[r])) {
          hb.intervals.push_back(*iv);
          hb.origins.push_back(poses[r].to_canonical(cam_rays[r].origin));
          hb.directions.push_back(poses[r].direction_to_canonical(cam_rays[r].direction));
          rows.push_back(r);
        }
      }
      if (!rows.empty()) {
        const Tensor rgb = render_head_rays(*head.field, hb, gather_rows(cond, rows), scene.background, head_samples, nullptr);
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t c = 0; c < 3; ++c) hc[3 * rows[i] + c] = rgb[3 * i + c];
      }
    }

    std::vector<double> target;
    target.reserve(cfg.rays * 3);
    for (std::size_t r = 0; r < cfg.rays; ++r) {
      const auto& ref = table.refs[rays.frames[r]];
      const auto& img = data.frames[ref.utterance][ref.frame].image;
      for (std::size_t c = 0; c < 3; ++c) target.push_back(img.rgb[3 * rays.pixels[r] + c]);
    }
    const Tensor rgb = render_torso_rays(*torso.field, rays.batch, poses, Tensor::from({cfg.rays, 3}, std::move(hc)),
                                         cond, cfg.samples, &rng, false);
    const Tensor loss = mse(rgb, Tensor::from({cfg.rays, 3}, std::move(target)));
    const double l = loss.item();
    check_loss(l, cfg, "torso", step);
    torso.field->params().zero_grad();
    loss.backward();
    adam.step(torso.field->params());
    report.losses.push_back(l);
    if (log && cfg.log_every > 0 && (step + 1) % cfg.log_every == 0)
      log({{"stage", "nerf-torso"}, {"step", step + 1}, {"loss", l}});
  }
  torso.field->params().zero_grad();
  return report;
}

RenderScore score_renders(const HeadModel& head, const TorsoModel* torso, const NerfDataset& data, std::size_t stride,
                          const RenderOptions& options) {
  if (stride == 0) throw std::invalid_argument("score_renders: stride must be >= 1");
  RenderScore score;
  double psnr_sum = 0.0;
  std::size_t index = 0;
  for (std::size_t u = 0; u < data.frames.size(); ++u)
    for (std::size_t f = 0; f < data.frames[u].size(); ++f, ++index) {
      if (index % stride != 0) continue;
      const auto cond = landmark_condition(data.landmarks[u], f, head.condition_stats);
      const auto r = render_frame(head, torso, cond, data.poses[u][f], options);
      const auto& frame = data.frames[u][f];
      const auto& gt = frame.image.rgb;
      double e = 0.0;
      for (std::size_t p = 0; p < frame.objects.size(); ++p) {
        double pe = 0.0;
        for (std::size_t k = 0; k < 3; ++k) pe += std::pow(r.full.rgb[3 * p + k] - gt[3 * p + k], 2);
        e += pe;
        if (frame.objects[p] != ObjectId::Head) continue;
        const auto& cam = data.scene.camera;
        if (!torso_interval(data.scene, cam.ray(p % cam.width, p / cam.width))) continue;
        score.overlap_mse += pe / 3.0;
        ++score.overlap_pixels;
      }
      e /= static_cast<double>(gt.size());
      score.mse += e;
      psnr_sum += e > 0.0 ? -10.0 * std::log10(e) : std::numeric_limits<double>::infinity();
      ++score.frames;
    }
  if (score.frames == 0) throw std::invalid_argument("score_renders: no frames");
  score.mse /= static_cast<double>(score.frames);
  if (score.overlap_pixels) score.overlap_mse /= static_cast<double>(score.overlap_pixels);
  score.psnr = psnr_sum / static_cast<double>(score.frames);
  return score;
}

double head_color_sensitivity(const HeadModel& head, const TorsoModel& torso, const NerfDataset& data,
                              std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("head_color_sensitivity: stride must be >= 1");
  const auto& scene = data.scene;
  const auto& cam = scene.camera;
  const std::size_t samples = torso.field->config().samples;
  NoGradGuard guard;
  double total = 0.0;
  std::size_t count = 0, index = 0;
  for (std::size_t u = 0; u < data.frames.size(); ++u)
    for (std::size_t f = 0; f < data.frames[u].size(); ++f, ++index) {
      if (index % stride != 0) continue;
      const auto cond = landmark_condition(data.landmarks[u], f, head.condition_stats);
      const auto& pose = data.poses[u][f];
      const auto base = render_frame(head, nullptr, cond, pose);
      RayBatch b;
      std::vector<double> hc, flipped;
      for (std::size_t p = 0; p < base.head.pixels(); ++p) {
        const Ray ray = cam.ray(p % cam.width, p / cam.width);
        const auto iv = torso_interval(scene, ray);
        if (!iv) continue;
        b.intervals.push_back(*iv);
        b.origins.push_back(ray.origin);
        b.directions.push_back(ray.direction);
        for (std::size_t c = 0; c < 3; ++c) {
          hc.push_back(base.head.rgb[3 * p + c]);
          flipped.push_back(1.0 - base.head.rgb[3 * p + c]);
        }
      }
      const std::size_t R = b.intervals.size();
      if (R == 0) continue;
      const std::vector<HeadPose> poses(R, pose);
      const auto s = stratified_samples(b.intervals, samples, nullptr);
      const Tensor points = torso_points(b, s, poses);
      const Tensor pr = pose_rows(poses);
      const Tensor cr = Tensor::from({1, kConditionDim}, cond);
      const auto a = (*torso.field)(points, Tensor::from({R, 3}, std::move(hc)), pr, cr);
      const auto z = (*torso.field)(points, Tensor::from({R, 3}, std::move(flipped)), pr, cr);
      for (std::size_t i = 0; i < a.sigma.numel(); ++i) total += std::abs(a.sigma[i] - z.sigma[i]);
      for (std::size_t i = 0; i < a.color.numel(); ++i) total += std::abs(a.color[i] - z.color[i]);
      count += a.sigma.numel() + a.color.numel();
    }
  if (count == 0) throw std::invalid_argument("head_color_sensitivity: no torso rays");
  return total / static_cast<double>(count);
}

}  // namespace talkrf
