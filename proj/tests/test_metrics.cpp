#include <doctest.h>

#include <cmath>

#include "talkrf/metrics.hpp"

using namespace talkrf;

namespace {

LandmarkSequence random_sequence(std::size_t frames, Rng& rng) {
  LandmarkSequence s(frames);
  for (auto& v : s.data()) v = rng.normal();
  return s;
}

LandmarkSequence frames_of(const LandmarkSequence& s, std::size_t start, std::size_t count) {
  LandmarkSequence out(count, s.fps());
  for (std::size_t t = 0; t < count; ++t) std::copy_n(s.frame(start + t).data(), kLandmarkDim, out.frame(t).data());
  return out;
}

}  // namespace

TEST_CASE("landmark distances: zero, constant offset, naive oracle, symmetry") {
  Rng rng(1);
  const auto a = random_sequence(9, rng);
  CHECK(lmd(a, a) == 0.0);
  CHECK(landmark_l2(a, a) == 0.0);

  auto shifted = a;
  for (auto& v : shifted.data()) v += 0.3;
  CHECK(lmd(shifted, a) == doctest::Approx(0.3 * std::sqrt(3.0)).epsilon(1e-12));
  CHECK(landmark_l2(shifted, a) == doctest::Approx(0.09).epsilon(1e-12));

  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_sequence(7, rng), g = random_sequence(7, rng);
    double dist = 0.0, sq = 0.0;
    for (std::size_t t = 0; t < 7; ++t)
      for (std::size_t k = 0; k < kLandmarkPoints; ++k) {
        double d2 = 0.0;
        for (std::size_t ax = 0; ax < 3; ++ax) {
          const double d = p.at(t, k, ax) - g.at(t, k, ax);
          d2 += d * d;
          sq += d * d;
        }
        dist += std::sqrt(d2);
      }
    CHECK(std::abs(lmd(p, g) - dist / (7.0 * kLandmarkPoints)) < 1e-12);
    CHECK(std::abs(landmark_l2(p, g) - sq / (7.0 * kLandmarkDim)) < 1e-12);
    CHECK(lmd(p, g) == lmd(g, p));
    CHECK(landmark_l2(p, g) == landmark_l2(g, p));
  }
  CHECK_THROWS(lmd(a, random_sequence(8, rng)));
  CHECK_THROWS(landmark_l2(a, random_sequence(8, rng)));
}

TEST_CASE("psnr: identical sentinel, closed form, naive oracle, symmetry") {
  Image a(4, 3, 0.5), b(4, 3, 0.6);
  CHECK(psnr(a, a) == kPsnrIdentical);
  CHECK(std::isinf(psnr(a, a)));
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-12));
  Rng rng(2);
  for (auto& v : a.rgb) v = rng.uniform();
  for (auto& v : b.rgb) v = rng.uniform();
  double e = 0.0;
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t c = 0; c < 3; ++c) e += std::pow(a.at(y, x, c) - b.at(y, x, c), 2);
  CHECK(std::abs(psnr(a, b) - 10.0 * std::log10(36.0 / e)) < 1e-12);
  CHECK(psnr(a, b) == psnr(b, a));
  CHECK_THROWS(psnr(a, Image(3, 4)));
}

TEST_CASE("sync confidence ranks aligned pairs above shifted ones") {
  CorpusOptions o;
  o.speakers = 4;
  o.utterances = 3;
  o.frames = 120;
  o.feature_dim = 16;
  const auto corpus = gen_corpus(o, 3);
  SyncExpertConfig c;
  c.layers = 2;
  c.channels = 32;
  c.feature_dim = 16;
  c.steps = 600;
  c.batch = 32;
  c.log_every = 0;
  SyncExpert expert(c, 4);
  train_sync_expert(expert, corpus, 5);

  constexpr std::size_t kShift = 20;
  double aligned = 0.0, shifted = 0.0;
  const auto heldout = corpus.split("test");
  REQUIRE(!heldout.empty());
  for (const auto* u : heldout) {
    const std::size_t n = u->landmarks.frames() - kShift;
    const auto audio = u->audio.window(0, 2 * n);
    const double p = sync_confidence(frames_of(u->landmarks, 0, n), audio, expert);
    CHECK((p >= 0.0 && p <= 1.0));
    CHECK(p == sync_confidence(frames_of(u->landmarks, 0, n), audio, expert));
    aligned += p;
    shifted += sync_confidence(frames_of(u->landmarks, kShift, n), audio, expert);
  }
  INFO("aligned " << aligned << " shifted " << shifted);
  CHECK(aligned > shifted);
  CHECK_THROWS(sync_confidence(LandmarkSequence(3), corpus.utterances[0].audio.window(0, 6), expert));
}
