#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>

#include "gradcheck.hpp"
#include "talkrf/nerf.hpp"

using namespace talkrf;
using talkrf::testing::check_gradients;
using talkrf::testing::random_tensor;

namespace {

NerfConfig tiny_config() {
  NerfConfig c;
  c.pos_frequencies = 3;
  c.dir_frequencies = 2;
  c.trunk_layers = 2;
  c.trunk_width = 16;
  c.condition_layers = 1;
  c.condition_width = 8;
  c.samples = 8;
  c.rays = 16;
  c.head_steps = 6;
  c.torso_steps = 6;
  c.log_every = 0;
  return c;
}

const TargetDomain& tiny_target() {
  static const TargetDomain t = [] {
    CorpusOptions o;
    o.speakers = 2;
    o.utterances = 2;
    o.frames = 12;
    o.feature_dim = 6;
    o.vertices = 100;
    o.identity_dims = 4;
    o.expression_dims = 4;
    const auto subset = gen_unseen_speaker(o, 3, 2, 12);
    Rng rng(4);
    return gen_target_domain(subset, DomainShift::random(rng), SceneSpec{}, 5, true);
  }();
  return t;
}

// C = (1 - e^{-sigma L}) c + e^{-sigma L} bg for a homogeneous slab of length L.
double slab_oracle(double sigma, double length, double c, double bg) {
  const double T = std::exp(-sigma * length);
  return (1.0 - T) * c + T * bg;
}

double slab_error(std::size_t samples, double sigma, double length, double c, double bg) {
  const std::vector<std::pair<double, double>> iv{{1.0, 1.0 + length}};
  const auto s = stratified_samples(iv, samples, nullptr);
  const auto out = volume_render(Tensor::full({1, samples}, sigma), Tensor::full({1, samples, 3}, c), s.deltas,
                                 Tensor::full({1, 3}, bg));
  return std::abs(out.rgb[0] - slab_oracle(sigma, length, c, bg));
}

void randomize(ParamStore& store, double amplitude, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& e : store.entries()) {
    Tensor t = e.tensor;
    for (auto& v : t.mutable_values()) v = rng.uniform(-amplitude, amplitude);
  }
}

}  // namespace

TEST_CASE("positional encoding layout") {
  const std::vector<double> x{0.25, -0.5, 0.0};
  const auto pe = positional_encoding(x, 2);
  REQUIRE(pe.size() == encoding_dim(2));
  CHECK(pe[0] == 0.25);
  CHECK(pe[3] == doctest::Approx(std::sin(std::numbers::pi * 0.25)));
  CHECK(pe[4] == doctest::Approx(-1.0));
  CHECK(pe[6] == doctest::Approx(std::cos(std::numbers::pi * 0.25)));
  CHECK(pe[9] == doctest::Approx(1.0).epsilon(1e-12));   // sin(2 pi 0.25)
  CHECK(pe[14] == doctest::Approx(1.0).epsilon(1e-12));  // cos(2 pi 0)
  CHECK(encoding_dim(10) == 63);
  CHECK(encoding_dim(4) == 27);
}

TEST_CASE("landmark condition is 612 wide and clamps at the sequence ends") {
  Rng rng(1);
  LandmarkSequence seq(5);
  for (auto& v : seq.data()) v = rng.normal();
  const auto stats = fit_normalization(seq);
  const auto norm = apply_normalization(seq, stats);
  const auto first = landmark_condition(seq, 0, stats);
  REQUIRE(first.size() == 612);
  for (std::size_t i = 0; i < kLandmarkDim; ++i) {
    CHECK(first[i] == doctest::Approx(norm.frame(0)[i]));
    CHECK(first[kLandmarkDim + i] == doctest::Approx(norm.frame(0)[i]));
    CHECK(first[2 * kLandmarkDim + i] == doctest::Approx(norm.frame(1)[i]));
  }
  const auto last = landmark_condition(seq, 4, stats);
  for (std::size_t i = 0; i < kLandmarkDim; ++i) {
    CHECK(last[i] == doctest::Approx(norm.frame(3)[i]));
    CHECK(last[2 * kLandmarkDim + i] == doctest::Approx(norm.frame(4)[i]));
  }
  CHECK_THROWS_AS(landmark_condition(seq, 5, stats), std::out_of_range);
}

TEST_CASE("stratified samples stay inside their bins") {
  Rng rng(2);
  const std::vector<std::pair<double, double>> iv{{0.5, 1.5}, {2.0, 2.0}, {1.0, 4.0}};
  const auto s = stratified_samples(iv, 16, &rng);
  for (std::size_t r = 0; r < iv.size(); ++r) {
    const double bin = (iv[r].second - iv[r].first) / 16.0;
    double total = 0.0;
    for (std::size_t i = 0; i < 16; ++i) {
      const double t = s.t[r * 16 + i];
      CHECK(t >= iv[r].first + i * bin - 1e-12);
      CHECK(t <= iv[r].first + (i + 1) * bin + 1e-12);
      CHECK(s.deltas[r * 16 + i] >= 0.0);
      total += s.deltas[r * 16 + i];
    }
    CHECK(total == doctest::Approx(iv[r].second - s.t[r * 16]).epsilon(1e-12));
  }
  const std::vector<std::pair<double, double>> bad{{2.0, 1.0}};
  CHECK_THROWS(stratified_samples(bad, 4, nullptr));
}

TEST_CASE("zero density returns the background exactly") {
  Rng rng(3);
  const auto color = random_tensor({5, 7, 3}, rng, 1.0, false);
  const auto bg = random_tensor({5, 3}, rng, 1.0, false);
  const std::vector<double> deltas(35, 0.1);
  const auto out = volume_render(Tensor::zeros({5, 7}), color, deltas, bg);
  for (std::size_t i = 0; i < 15; ++i) CHECK(out.rgb[i] == bg[i]);
  for (double w : out.weights) CHECK(w == 0.0);
  for (double t : out.residual) CHECK(t == 1.0);
}

TEST_CASE("constant density matches the closed form and refines with more samples") {
  for (double sigma : {0.5, 2.0, 8.0}) {
    CHECK(slab_error(128, sigma, 1.0, 0.9, 0.1) / slab_oracle(sigma, 1.0, 0.9, 0.1) < 0.01);
    double previous = std::numeric_limits<double>::infinity();
    for (std::size_t s = 4; s <= 512; s *= 2) {
      const double e = slab_error(s, sigma, 1.0, 0.9, 0.1);
      CHECK(e <= previous);
      previous = e;
    }
  }
}

TEST_CASE("compositing weights are non-negative and partition unity") {
  Rng rng(4);
  const std::size_t R = 10000, S = 12;
  std::vector<double> sigma(R * S), deltas(R * S);
  for (std::size_t i = 0; i < R * S; ++i) {
    // Mix of transparent, moderate and saturating densities.
    sigma[i] = std::pow(10.0, rng.uniform(-4.0, 4.0));
    deltas[i] = rng.uniform(0.0, 0.2);
  }
  const auto out = volume_render(Tensor::from({R, S}, sigma), Tensor::full({R, S, 3}, 0.5), deltas,
                                 Tensor::full({R, 3}, 0.2));
  double worst = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    double total = out.residual[r];
    for (std::size_t i = 0; i < S; ++i) {
      REQUIRE(out.weights[r * S + i] >= 0.0);
      total += out.weights[r * S + i];
    }
    worst = std::max(worst, std::abs(total - 1.0));
  }
  CHECK(worst < 1e-9);
  std::vector<double> negative(sigma);
  negative[3] = -1.0;
  CHECK_THROWS(volume_render(Tensor::from({R, S}, negative), Tensor::full({R, S, 3}, 0.5), deltas,
                             Tensor::full({R, 3}, 0.2)));
}

TEST_CASE("volume rendering gradients") {
  Rng rng(5);
  Tensor sigma = Tensor::zeros({4, 6}, true);
  for (auto& v : sigma.mutable_values()) v = rng.uniform(0.0, 5.0);
  const auto color = random_tensor({4, 6, 3}, rng);
  const auto bg = random_tensor({4, 3}, rng);
  const auto w = random_tensor({4, 3}, rng, 1.0, false);
  std::vector<double> deltas(24);
  for (auto& d : deltas) d = rng.uniform(0.05, 0.3);
  auto loss = [&] { return sum(volume_render(sigma, color, deltas, bg).rgb * w); };
  const auto r = check_gradients(loss, {{"sigma", sigma}, {"color", color}, {"background", bg}}, 1e-6);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("field activations keep density non-negative and colors in range") {
  const auto cfg = tiny_config();
  HeadField head(cfg, 0.5, 6);
  TorsoField torso(cfg, Vec3(0, 0.8, 0.4), 0.9, 7);
  randomize(head.params(), 3.0, 8);
  randomize(torso.params(), 3.0, 9);
  Rng rng(10);
  const std::size_t R = 100, S = 100;
  const auto points = random_tensor({R, S, 3}, rng, 2.0, false);
  const auto dirs = random_tensor({R, 3}, rng, 1.0, false);
  const auto cond = random_tensor({R, kConditionDim}, rng, 3.0, false);
  for (const auto& out : {head(points, dirs, cond), torso(points, random_tensor({R, 3}, rng, 1.0, false),
                                                         random_tensor({R, 12}, rng, 1.0, false), cond)}) {
    REQUIRE(out.sigma.shape() == Shape{R, S});
    REQUIRE(out.color.shape() == Shape{R, S, 3});
    for (double s : out.sigma.values()) CHECK(s >= 0.0);
    for (double c : out.color.values()) CHECK((c >= 0.0 && c <= 1.0));
  }
  CHECK_THROWS_AS(head(points, dirs, random_tensor({R, 611}, rng, 1.0, false)), ShapeError);
  auto bad = points.clone();
  bad.mutable_values()[7] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS(head(bad, dirs, cond));
}

TEST_CASE("photometric loss gradients through both fields") {
  const auto cfg = tiny_config();
  HeadField head(cfg, 0.5, 11);
  TorsoField torso(cfg, Vec3(0, 0.8, 0.4), 0.9, 12);
  Rng rng(13);
  const std::size_t R = 3, S = 5;
  const auto points = random_tensor({R, S, 3}, rng, 0.3, false);
  const auto dirs = random_tensor({R, 3}, rng, 1.0, false);
  const auto cond = random_tensor({R, kConditionDim}, rng, 1.0, false);
  const auto pose = random_tensor({R, 12}, rng, 1.0, false);
  const auto target = random_tensor({R, 3}, rng, 0.3, false);
  std::vector<double> deltas(R * S, 0.08);

  auto loss = [&] {
    const auto h = head(points, dirs, cond);
    const auto ch = volume_render(h.sigma, h.color, deltas, Tensor::full({R, 3}, 0.7)).rgb;
    const auto t = torso(points, ch, pose, cond);
    return mse(volume_render(t.sigma, t.color, deltas, ch).rgb, target);
  };
  std::vector<std::pair<std::string, Tensor>> probe;
  for (auto name : {"head.trunk0.weight", "head.cond0.weight", "head.sigma.bias", "head.rgb.weight", "head.view_dir.weight",
                    "torso.trunk1.weight", "torso.color0.weight", "torso.cond_in.weight", "torso.sigma.weight"})
    probe.emplace_back(name, head.params().contains(name) ? head.params().get(name) : torso.params().get(name));
  const auto r = check_gradients(loss, probe, 1e-6, 24);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("head-unaware torso ignores the head color") {
  auto cfg = tiny_config();
  cfg.head_aware = false;
  TorsoField torso(cfg, Vec3(0, 0.8, 0.4), 0.9, 14);
  Rng rng(15);
  const auto points = random_tensor({2, 4, 3}, rng, 0.3, false);
  const auto pose = random_tensor({2, 12}, rng, 1.0, false);
  const auto cond = random_tensor({2, kConditionDim}, rng, 1.0, false);
  const auto a = torso(points, random_tensor({2, 3}, rng, 1.0, false), pose, cond);
  const auto b = torso(points, random_tensor({2, 3}, rng, 1.0, false), pose, cond);
  for (std::size_t i = 0; i < a.color.numel(); ++i) CHECK(a.color[i] == b.color[i]);
}

TEST_CASE("training, rendering and checkpoints") {
  const auto& target = tiny_target();
  const auto data = NerfDataset::from_target(target, "train");
  CHECK(data.frame_count() == 12);
  const auto cfg = tiny_config();

  auto head = make_head_model(cfg, data, 16);
  auto head2 = make_head_model(cfg, data, 16);
  const auto ra = train_nerf_head(head, data, 17), rb = train_nerf_head(head2, data, 17);
  CHECK(ra.losses == rb.losses);
  CHECK(ra.losses.size() == cfg.head_steps);
  auto torso = make_torso_model(cfg, data.scene, 18);
  const auto rt = train_nerf_torso(torso, head, data, 19);
  for (double l : rt.losses) CHECK(std::isfinite(l));

  const auto cond = landmark_condition(data.landmarks[0], 3, head.condition_stats);
  const auto& pose = data.poses[0][3];
  const auto r1 = render_frame(head, &torso, cond, pose);
  const auto r2 = render_frame(head, &torso, cond, pose);
  CHECK(r1.full == r2.full);
  CHECK(r1.full.width == data.scene.camera.width);
  CHECK(r1.full.height == data.scene.camera.height);
  for (double v : r1.full.rgb) CHECK((v >= 0.0 && v <= 1.0));

  // A transparent torso leaves the head render untouched.
  RenderOptions transparent;
  transparent.torso_transparent = true;
  const auto rt1 = render_frame(head, &torso, cond, pose, transparent);
  CHECK(rt1.full == rt1.head);
  CHECK(rt1.head == r1.head);
  CHECK(render_frame(head, nullptr, cond, pose).full == r1.head);
  // Background pixels outside both volumes are exact.
  CHECK(r1.full.at(0, 0, 0) == data.scene.background.x());

  auto bad = cond;
  bad[5] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS(render_frame(head, &torso, bad, pose));
  CHECK_THROWS(render_frame(head, &torso, std::vector<double>(611, 0.0), pose));

  const auto dir = std::filesystem::temp_directory_path();
  head.save(dir / "talkrf_head.trfc");
  torso.save(dir / "talkrf_torso.trfc");
  const auto head_l = HeadModel::load(dir / "talkrf_head.trfc");
  const auto torso_l = TorsoModel::load(dir / "talkrf_torso.trfc");
  CHECK(render_frame(head_l, &torso_l, cond, pose).full == r1.full);
  CHECK_THROWS(TorsoModel::load(dir / "talkrf_head.trfc"));
  std::filesystem::remove(dir / "talkrf_head.trfc");
  std::filesystem::remove(dir / "talkrf_torso.trfc");

  const auto score = score_renders(head, &torso, data, 5);
  CHECK(score.frames == 3);
  CHECK(score.psnr > 0.0);
  CHECK(score.overlap_pixels > 0);
  CHECK(score.overlap_mse >= 0.0);

  auto tight = cfg;
  tight.divergence_limit = 1e-12;
  auto diverging = make_head_model(tight, data, 20);
  CHECK_THROWS_WITH_AS(train_nerf_head(diverging, data, 21), doctest::Contains("diverged"), std::runtime_error);
}

TEST_CASE("head training reduces the photometric loss") {
  const auto data = NerfDataset::from_target(tiny_target(), "train");
  auto cfg = tiny_config();
  cfg.trunk_width = 32;
  cfg.rays = 64;
  cfg.head_steps = 150;
  cfg.lr = 5e-3;
  auto head = make_head_model(cfg, data, 22);
  const auto r = train_nerf_head(head, data, 23);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    first += r.losses[i];
    last += r.losses[r.losses.size() - 1 - i];
  }
  INFO("first " << first / 20 << " last " << last / 20);
  CHECK(last < 0.5 * first);
}
