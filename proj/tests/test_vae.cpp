#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "gradcheck.hpp"
#include "talkrf/motion_vae.hpp"

using namespace talkrf;
using talkrf::testing::check_gradients;
using talkrf::testing::random_tensor;

namespace {

MotionVAEConfig tiny_config() {
  MotionVAEConfig c;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.channels = 8;
  c.latent_size = 4;
  c.prior_flow_layers = 2;
  c.prior_flow_channels = 6;
  c.feature_dim = 6;
  c.steps = 6;
  c.batch = 2;
  c.crop = 16;
  c.sync_windows = 3;
  return c;
}

void randomize(MotionVAE& vae, const std::string& prefix, double amplitude, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& e : vae.params().entries())
    if (e.name.rfind(prefix, 0) == 0) {
      Tensor t = e.tensor;
      for (auto& v : t.mutable_values()) v = rng.uniform(-amplitude, amplitude);
    }
}

CorpusOptions tiny_corpus() {
  CorpusOptions o;
  o.speakers = 2;
  o.utterances = 2;
  o.frames = 40;
  o.feature_dim = 6;
  o.vertices = 100;
  o.identity_dims = 4;
  o.expression_dims = 4;
  return o;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("encoder keeps the landmark length and processes the whole sequence") {
  MotionVAE vae(tiny_config(), 1);
  Rng rng(2);
  for (std::size_t T : {7u, 64u, 311u}) {
    const auto q = vae.encode(random_tensor({1, T, kLandmarkDim}, rng, 1.0, false),
                              random_tensor({1, 2 * T, 6}, rng, 1.0, false));
    CHECK(q.mean.shape() == Shape{1, T, 4});
    CHECK(q.logvar.shape() == Shape{1, T, 4});
    for (double v : q.logvar.values()) CHECK(std::isfinite(v));
  }
  const auto lm = random_tensor({1, 20, kLandmarkDim}, rng, 1.0, false);
  const auto au = random_tensor({1, 40, 6}, rng, 1.0, false);
  const auto lm2 = concat({lm, lm}, 1), au2 = concat({au, au}, 1);
  CHECK(vae.encode(lm2, au2).mean.dim(1) == 2 * vae.encode(lm, au).mean.dim(1));
  CHECK(vae.decode(Tensor::zeros({1, 40, 4}), au2).dim(1) == 40);

  CHECK_THROWS_AS(vae.encode(lm, random_tensor({1, 39, 6}, rng, 1.0, false)), ShapeError);
  CHECK_THROWS_AS(vae.decode(Tensor::zeros({1, 20, 4}), random_tensor({1, 41, 6}, rng, 1.0, false)), ShapeError);
}

TEST_CASE("decoder starts from a constant output and is deterministic") {
  MotionVAE vae(tiny_config(), 3);
  Rng rng(4);
  const auto z = random_tensor({2, 9, 4}, rng, 1.0, false);
  const auto a = random_tensor({2, 18, 6}, rng, 1.0, false);
  const auto out = vae.decode(z, a);
  CHECK(out.shape() == Shape{2, 9, kLandmarkDim});
  for (double v : out.values()) CHECK(v == out[0]);
  randomize(vae, "dec.out", 0.2, 5);
  CHECK(vae.decode(z, a).values()[0] == vae.decode(z, a).values()[0]);
  CHECK(max_abs_diff(vae.decode(z, a), vae.decode(z, a)) == 0.0);
}

TEST_CASE("odd latent size is rejected") {
  auto c = tiny_config();
  c.latent_size = 5;
  CHECK_THROWS_AS(MotionVAE(c, 1), std::invalid_argument);
  c.latent_size = 0;
  CHECK_THROWS_AS(MotionVAE(c, 1), std::invalid_argument);
}

TEST_CASE("prior flow is the identity at init and invertible once randomized") {
  MotionVAE vae(tiny_config(), 6);
  Rng rng(7);
  const auto z0 = random_tensor({2, 13, 4}, rng, 1.0, false);
  const auto a = random_tensor({2, 26, 6}, rng, 1.0, false);
  // Two couplings means two flips: the identity map overall.
  const auto id = vae.flow_forward(z0, a);
  CHECK(max_abs_diff(id.z, z0) == 0.0);
  for (double v : id.log_det.values()) CHECK(v == 0.0);

  randomize(vae, "flow.", 0.5, 8);
  const auto fwd = vae.flow_forward(z0, a);
  CHECK(max_abs_diff(fwd.z, z0) > 1e-3);
  const auto back = vae.flow_inverse(fwd.z, a);
  CHECK(max_abs_diff(back.z, z0) < 1e-6);
  for (std::size_t b = 0; b < 2; ++b) CHECK(back.log_det[b] == doctest::Approx(-fwd.log_det[b]).epsilon(1e-12));
}

TEST_CASE("coupling log-determinant matches a dense finite-difference Jacobian") {
  MotionVAE vae(tiny_config(), 9);
  randomize(vae, "flow.", 0.6, 10);
  Rng rng(11);
  const auto a = random_tensor({1, 2, 6}, rng, 1.0, false);
  const auto z0 = random_tensor({1, 1, 4}, rng, 1.0, false);
  NoGradGuard guard;
  const double h = 1e-6;
  Eigen::Matrix4d J;
  for (int j = 0; j < 4; ++j) {
    auto up = z0.clone(), down = z0.clone();
    up.mutable_values()[j] += h;
    down.mutable_values()[j] -= h;
    const auto fu = vae.flow_forward(up, a).z, fd = vae.flow_forward(down, a).z;
    for (int i = 0; i < 4; ++i) J(i, j) = (fu[i] - fd[i]) / (2 * h);
  }
  const double numeric = std::log(std::abs(J.determinant()));
  CHECK(std::abs(numeric) > 1e-2);
  CHECK(std::abs(vae.flow_forward(z0, a).log_det[0] - numeric) < 1e-4);
}

TEST_CASE("KL estimate vanishes when the posterior equals the prior") {
  MotionVAE vae(tiny_config(), 12);
  for (auto name : {"enc.out.weight", "enc.out.bias"}) {
    Tensor t = vae.params().get(name);
    for (auto& v : t.mutable_values()) v = 0.0;
  }
  Rng rng(13);
  const auto x = random_tensor({2, 10, kLandmarkDim}, rng, 1.0, false);
  const auto a = random_tensor({2, 20, 6}, rng, 1.0, false);
  const auto noise = vae.draw_noise(2, 10, 0, rng);
  const auto parts = vae.elbo(x, a, noise, {1.0, 0.0}, {});
  CHECK(std::abs(parts.kl) < 1e-12);
}

TEST_CASE("sync term is zero for a scorer that always answers one") {
  MotionVAE vae(tiny_config(), 14);
  Rng rng(15);
  const auto x = random_tensor({2, 10, kLandmarkDim}, rng, 1.0, false);
  const auto a = random_tensor({2, 20, 6}, rng, 1.0, false);
  const SyncScorer ones{5, [](const Tensor& lm, const Tensor&) { return Tensor::full({lm.dim(0)}, 1.0); }};
  const auto noise = vae.draw_noise(2, 10, 5, rng);
  REQUIRE(noise.sync_starts.size() == 3);
  const auto parts = vae.elbo(x, a, noise, {1.0, 0.5}, ones);
  CHECK(parts.sync == 0.0);
  CHECK(parts.total.item() == doctest::Approx(parts.reconstruction + parts.kl).epsilon(1e-12));
  CHECK_THROWS(vae.elbo(x, a, noise, {1.0, 0.5}, {}));
}

TEST_CASE("ELBO components match a straight-line oracle") {
  MotionVAE vae(tiny_config(), 16);
  randomize(vae, "flow.", 0.4, 17);
  randomize(vae, "dec.out", 0.2, 18);
  Rng rng(19);
  const std::size_t B = 2, T = 10, L = 4;
  const auto x = random_tensor({B, T, kLandmarkDim}, rng, 1.0, false);
  const auto a = random_tensor({B, 2 * T, 6}, rng, 1.0, false);
  const auto noise = vae.draw_noise(B, T, 5, rng);
  // A smooth scorer: sigmoid of the mean of the landmark window times the audio mean.
  const SyncScorer scorer{5, [](const Tensor& lm, const Tensor& au) {
                            const std::size_t n = lm.dim(0);
                            return sigmoid(mean_axis(reshape(lm, {n, lm.numel() / n}), 1) *
                                           mean_axis(reshape(au, {n, au.numel() / n}), 1));
                          }};
  const ElboWeights w{0.7, 0.3};
  const auto parts = vae.elbo(x, a, noise, w, scorer);

  const auto q = vae.encode(x, a);
  std::vector<double> z(B * T * L);
  double log_q = 0.0;
  const double c = 0.5 * std::log(2 * std::numbers::pi);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double sd = std::sqrt(std::exp(q.logvar[i]));
    const double e = noise.eps[i];
    z[i] = q.mean[i] + sd * e;
    const double u = (z[i] - q.mean[i]) / sd;
    log_q += -0.5 * u * u - std::log(sd) - c;
  }
  const auto zt = Tensor::from({B, T, L}, z);
  const auto inv = vae.flow_inverse(zt, a);
  double log_p = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) log_p += -0.5 * inv.z[i] * inv.z[i] - c;
  for (std::size_t b = 0; b < B; ++b) log_p += inv.log_det[b];
  const double kl = (log_q - log_p) / static_cast<double>(z.size());

  const auto xhat = vae.decode(zt, a);
  double rec = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) rec += (xhat[i] - x[i]) * (xhat[i] - x[i]);
  rec /= static_cast<double>(x.numel());

  double sync = 0.0;
  std::size_t count = 0;
  for (std::size_t s : noise.sync_starts)
    for (std::size_t b = 0; b < B; ++b) {
      double ml = 0.0, ma = 0.0;
      for (std::size_t t = s; t < s + 5; ++t)
        for (std::size_t k = 0; k < kLandmarkDim; ++k) ml += xhat[(b * T + t) * kLandmarkDim + k];
      for (std::size_t t = 2 * s; t < 2 * s + 10; ++t)
        for (std::size_t k = 0; k < 6; ++k) ma += a[(b * 2 * T + t) * 6 + k];
      ml /= 5.0 * kLandmarkDim;
      ma /= 60.0;
      const double p = 1.0 / (1.0 + std::exp(-ml * ma));
      sync -= std::log(std::clamp(p, 1e-7, 1.0));
      ++count;
    }
  sync /= static_cast<double>(count);

  CHECK(std::abs(parts.reconstruction - rec) < 1e-8);
  CHECK(std::abs(parts.kl - kl) < 1e-8);
  CHECK(std::abs(parts.sync - sync) < 1e-8);
  CHECK(std::abs(parts.total.item() - (rec + w.kl * kl + w.sync * sync)) < 1e-8);
}

TEST_CASE("ELBO gradients match finite differences") {
  MotionVAE vae(tiny_config(), 20);
  randomize(vae, "flow.", 0.3, 21);
  randomize(vae, "dec.out", 0.2, 22);
  SyncExpertConfig sc;
  sc.layers = 2;
  sc.channels = 8;
  sc.feature_dim = 6;
  SyncExpert expert(sc, 23);
  expert.params().set_requires_grad(false);
  Rng rng(24);
  const auto x = random_tensor({2, 8, kLandmarkDim}, rng, 1.0, false);
  const auto a = random_tensor({2, 16, 6}, rng, 1.0, false);
  const auto noise = vae.draw_noise(2, 8, 5, rng);
  const auto scorer = frozen_scorer(expert);
  std::vector<std::pair<std::string, Tensor>> probe;
  for (auto name : {"enc.in.weight", "enc.wn.layer0.in.weight", "enc.out.bias", "dec.wn.layer1.res_skip.weight",
                    "dec.out.weight", "flow.0.stats.weight", "flow.1.wn.layer0.cond.weight", "flow.audio.weight"})
    probe.emplace_back(name, vae.params().get(name));
  const auto r = check_gradients([&] { return vae.elbo(x, a, noise, {0.8, 0.3}, scorer).total; }, probe, 1e-6, 24);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("generation is deterministic at temperature zero and diverse at one") {
  MotionVAE vae(tiny_config(), 25);
  randomize(vae, "dec.out", 0.2, 26);
  NormalizationStats stats;
  stats.mean.assign(kLandmarkDim, 0.1);
  stats.stddev.assign(kLandmarkDim, 2.0);
  vae.set_normalization(stats);
  Rng rng(27);
  AudioFeatures audio(30, 6);
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t d = 0; d < 6; ++d) audio.at(i, d) = rng.normal();

  const auto g0 = vae.generate(audio, 0.0, 1);
  CHECK(g0.frames() == 15);
  CHECK(g0.fps() == 25.0);
  CHECK(vae.generate(audio, 0.0, 1) == g0);
  CHECK(vae.generate(audio, 0.0, 99) == g0);
  const auto g1 = vae.generate(audio, 1.0, 1);
  const auto g2 = vae.generate(audio, 1.0, 2);
  CHECK(vae.generate(audio, 1.0, 1) == g1);
  double gap = 0.0;
  for (std::size_t t = 0; t < 15; ++t) {
    double d = 0.0;
    for (std::size_t i = 0; i < kLandmarkDim; ++i) d += std::pow(g1.frame(t)[i] - g2.frame(t)[i], 2);
    gap += std::sqrt(d);
  }
  CHECK(gap / 15.0 > 0.0);
  CHECK_THROWS(vae.generate(AudioFeatures(7, 6), 0.0, 1));
}

TEST_CASE("schedule warms up KL and ramps the sync term late") {
  auto c = tiny_config();
  c.steps = 1000;
  CHECK(elbo_schedule(c, 0).kl == doctest::Approx(0.01));
  CHECK(elbo_schedule(c, 99).kl == doctest::Approx(1.0));
  CHECK(elbo_schedule(c, 500).kl == 1.0);
  CHECK(elbo_schedule(c, 499).sync == 0.0);
  CHECK(elbo_schedule(c, 500).sync == doctest::Approx(0.001));
  CHECK(elbo_schedule(c, 599).sync == doctest::Approx(0.1));
  CHECK(elbo_schedule(c, 999).sync == doctest::Approx(0.1));
}

TEST_CASE("training runs, keeps the flow invertible, and checkpoints round trip") {
  const auto corpus = gen_corpus(tiny_corpus(), 4);
  auto c = tiny_config();
  c.sync_loss_weight = 0.0;
  MotionVAE vae(c, 28);
  const auto report = train_motion_vae(vae, corpus, nullptr, 29);
  REQUIRE(report.total.size() == 6);
  for (double v : report.total) CHECK(std::isfinite(v));
  CHECK(report.heldout_variance > 0.0);

  Rng rng(30);
  const auto z0 = random_tensor({1, 12, 4}, rng, 1.0, false);
  const auto a = random_tensor({1, 24, 6}, rng, 1.0, false);
  CHECK(max_abs_diff(vae.flow_inverse(vae.flow_forward(z0, a).z, a).z, z0) < 1e-6);

  c.sync_loss_weight = 0.1;
  MotionVAE needs_sync(c, 28);
  CHECK_THROWS(train_motion_vae(needs_sync, corpus, nullptr, 29));

  const auto path = std::filesystem::temp_directory_path() / "talkrf_vae.trfc";
  vae.save(path);
  auto back = MotionVAE::load(path);
  const auto& u = corpus.utterances[0];
  CHECK(back->generate(u.audio, 0.7, 5) == vae.generate(u.audio, 0.7, 5));
  CHECK(back->normalization().mean == vae.normalization().mean);
  std::filesystem::remove(path);
}
