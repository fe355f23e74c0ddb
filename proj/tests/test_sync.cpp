#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "talkrf/sync_expert.hpp"

using namespace talkrf;
using talkrf::testing::check_gradients;
using talkrf::testing::random_tensor;

namespace {

SyncExpertConfig tiny_config() {
  SyncExpertConfig c;
  c.layers = 2;
  c.channels = 8;
  c.feature_dim = 6;
  c.window = 5;
  c.steps = 5;
  c.batch = 8;
  return c;
}

CorpusOptions tiny_corpus() {
  CorpusOptions o;
  o.speakers = 2;
  o.utterances = 2;
  o.frames = 60;
  o.feature_dim = 6;
  o.vertices = 100;
  o.identity_dims = 4;
  o.expression_dims = 4;
  return o;
}

}  // namespace

TEST_CASE("clamped cosine edge cases") {
  const auto unit = Tensor::from({1, 3}, {0.6, 0.8, 0.0});
  CHECK(clamped_cosine(unit, unit, 1e-8).item() == doctest::Approx(1.0).epsilon(1e-12));
  const auto ortho = Tensor::from({1, 3}, {0.0, 0.0, 1.0});
  CHECK(clamped_cosine(unit, ortho, 1e-8).item() == 0.0);
  const auto anti = Tensor::from({1, 3}, {-0.6, -0.8, 0.0});
  CHECK(clamped_cosine(unit, anti, 1e-8).item() == 0.0);
  const auto zero = Tensor::zeros({1, 3});
  const double z = clamped_cosine(unit, zero, 1e-8).item();
  CHECK(std::isfinite(z));
  CHECK(z == 0.0);
  CHECK_THROWS_AS(clamped_cosine(unit, Tensor::zeros({1, 4}), 1e-8), ShapeError);
}

TEST_CASE("clamped cosine and BCE gradients match finite differences") {
  Rng rng(1);
  // Positive embeddings keep the cosine strictly inside (0, 1).
  auto a = Tensor::from({4, 5}, [&] {
    std::vector<double> v(20);
    for (auto& x : v) x = rng.uniform(0.1, 1.0);
    return v;
  }(), true);
  auto l = Tensor::from({4, 5}, [&] {
    std::vector<double> v(20);
    for (auto& x : v) x = rng.uniform(0.1, 1.0);
    return v;
  }(), true);
  const std::vector<double> labels{1, 0, 1, 0};
  auto r = check_gradients([&] { return binary_cross_entropy(clamped_cosine(a, l, 1e-8), labels); }, {{"a", a}, {"l", l}});
  CHECK(r.max_rel_error < 1e-6);

  // Below the floor the denominator is the constant eps.
  auto s = Tensor::from({1, 2}, {1e-5, 2e-5}, true);
  auto t = Tensor::from({1, 2}, {3e-5, 1e-5}, true);
  auto rf = check_gradients([&] { return sum(clamped_cosine(s, t, 1e-8)); }, {{"s", s}, {"t", t}}, 1e-8);
  CHECK(rf.max_rel_error < 1e-5);
}

TEST_CASE("binary cross-entropy of a perfect classifier is zero") {
  const auto p = Tensor::from({4}, {1.0, 0.0, 1.0, 0.0});
  CHECK(binary_cross_entropy(p, {1, 0, 1, 0}).item() < 1e-6);
  CHECK(binary_cross_entropy(p, {0, 1, 0, 1}).item() > 10.0);
}

TEST_CASE("sync probability stays in [0, 1] and never NaN") {
  SyncExpert e(tiny_config(), 3);
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto lm = random_tensor({6, 5, kLandmarkDim}, rng, 3.0, false);
    const auto au = random_tensor({6, 10, 6}, rng, 3.0, false);
    const Tensor probs = e.prob(lm, au);
    for (double p : probs.values()) {
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
    }
  }
  const Tensor zero_probs = e.prob(Tensor::zeros({2, 5, kLandmarkDim}), Tensor::zeros({2, 10, 6}));
  for (double p : zero_probs.values()) {
    CHECK(std::isfinite(p));
  }
  CHECK_THROWS_AS(e.prob(Tensor::zeros({2, 4, kLandmarkDim}), Tensor::zeros({2, 10, 6})), ShapeError);
}

TEST_CASE("sync expert input gradients match finite differences") {
  SyncExpert e(tiny_config(), 5);
  e.params().set_requires_grad(false);
  Rng rng(6);
  auto lm = random_tensor({3, 5, kLandmarkDim}, rng, 1.0, true);
  auto au = random_tensor({3, 10, 6}, rng, 1.0, true);
  auto r = check_gradients([&] { return mean(log(e.prob(lm, au) + 0.1)); }, {{"lm", lm}, {"audio", au}});
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("window sampling respects the negative offset range") {
  const auto corpus = gen_corpus(tiny_corpus(), 2);
  const auto pool = corpus.split("train");
  auto cfg = tiny_config();
  Rng rng(7);
  std::vector<double> labels;
  const auto pairs = sample_sync_pairs(pool, cfg, 200, rng, labels, 0.0);
  REQUIRE(pairs.size() == 200);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    const auto gap = static_cast<long>(p.audio_start) - static_cast<long>(p.landmark_start);
    if (labels[i] == 1.0) {
      CHECK(gap == 0);
      CHECK(p.audio == p.landmarks);
    } else {
      CHECK(std::labs(gap) >= static_cast<long>(cfg.min_offset));
      CHECK(std::labs(gap) <= static_cast<long>(cfg.max_offset));
    }
    CHECK(p.audio_start + cfg.window <= p.audio->landmarks.frames());
  }
}

TEST_CASE("training rejects a single-utterance corpus and checkpoints round trip") {
  auto o = tiny_corpus();
  o.speakers = 1;
  o.utterances = 1;
  SyncExpert e(tiny_config(), 8);
  CHECK_THROWS(train_sync_expert(e, gen_corpus(o, 1), 1));

  const auto corpus = gen_corpus(tiny_corpus(), 3);
  const auto report = train_sync_expert(e, corpus, 9);
  CHECK(report.losses.size() == 5);
  CHECK(report.heldout.accuracy + report.heldout.flipped_accuracy == doctest::Approx(1.0));

  const auto path = std::filesystem::temp_directory_path() / "talkrf_sync.trfc";
  e.save(path);
  auto back = SyncExpert::load(path);
  const auto& u = corpus.utterances[0];
  const auto norm = apply_normalization(u.landmarks, e.normalization());
  const double a = e.sequence_confidence(norm, u.audio);
  CHECK(back->sequence_confidence(norm, u.audio) == a);
  CHECK(e.sequence_confidence(norm, u.audio) == a);
  CHECK(a >= 0.0);
  CHECK(a <= 1.0);
  CHECK_THROWS(e.sequence_confidence(LandmarkSequence(3), u.audio.window(0, 6)));
  std::filesystem::remove(path);
}
