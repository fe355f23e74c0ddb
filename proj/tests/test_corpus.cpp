#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "talkrf/corpus.hpp"

using namespace talkrf;

namespace {

CorpusOptions small_options() {
  CorpusOptions o;
  o.speakers = 4;
  o.utterances = 3;
  o.frames = 40;
  o.feature_dim = 16;
  o.vertices = 120;
  o.identity_dims = 6;
  o.expression_dims = 6;
  return o;
}

std::filesystem::path scratch(const char* name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  return p;
}

std::vector<double> frame_mean(const LandmarkSequence& s) {
  std::vector<double> m(kLandmarkDim, 0.0);
  for (std::size_t t = 0; t < s.frames(); ++t)
    for (std::size_t i = 0; i < kLandmarkDim; ++i) m[i] += s.frame(t)[i] / static_cast<double>(s.frames());
  return m;
}

}  // namespace

TEST_CASE("corpus generation is deterministic per seed") {
  const auto a = gen_corpus(small_options(), 11);
  const auto b = gen_corpus(small_options(), 11);
  const auto c = gen_corpus(small_options(), 12);
  REQUIRE(a.utterances.size() == 12);
  for (std::size_t i = 0; i < a.utterances.size(); ++i) {
    CHECK(a.utterances[i].audio == b.utterances[i].audio);
    CHECK(a.utterances[i].landmarks == b.utterances[i].landmarks);
  }
  CHECK_FALSE(a.utterances[0].landmarks == c.utterances[0].landmarks);
}

TEST_CASE("audio and landmarks are aligned two to one with a held-out utterance per speaker") {
  const auto c = gen_corpus(small_options(), 1);
  for (const auto& u : c.utterances) {
    CHECK(u.audio.frames() == 2 * u.landmarks.frames());
    CHECK(u.audio.rate() == 50.0);
    CHECK(u.landmarks.fps() == 25.0);
    CHECK_NOTHROW(check_aligned(u.audio, u.landmarks, "test"));
  }
  CHECK(c.split("test").size() == 4);
  CHECK(c.split("train").size() == 8);
  CHECK_THROWS_AS(check_aligned(c.utterances[0].audio.window(0, 10), c.utterances[0].landmarks, "test"), ShapeError);
  CHECK_THROWS(gen_corpus([] { auto o = small_options(); o.speakers = 0; return o; }(), 1));
}

TEST_CASE("zero features give the identity offset") {
  const auto c = gen_corpus(small_options(), 2);
  const auto& spk = c.speakers[1];
  const auto lm = spk.articulate(AudioFeatures(20, 16));
  for (std::size_t t = 0; t < lm.frames(); ++t)
    for (std::size_t i = 0; i < kLandmarkDim; ++i) CHECK(lm.frame(t)[i] == spk.offset[i]);
}

TEST_CASE("per-speaker mean landmarks are separated") {
  const auto o = small_options();
  const auto c = gen_corpus(o, 3);
  std::vector<std::vector<double>> means(o.speakers, std::vector<double>(kLandmarkDim, 0.0));
  std::vector<double> counts(o.speakers, 0.0);
  for (const auto& u : c.utterances) {
    for (std::size_t t = 0; t < u.landmarks.frames(); ++t)
      for (std::size_t i = 0; i < kLandmarkDim; ++i) means[u.speaker][i] += u.landmarks.frame(t)[i];
    counts[u.speaker] += static_cast<double>(u.landmarks.frames());
  }
  for (std::size_t s = 0; s < o.speakers; ++s)
    for (auto& v : means[s]) v /= counts[s];
  for (std::size_t s = 0; s < o.speakers; ++s)
    for (std::size_t r = s + 1; r < o.speakers; ++r) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < kLandmarkDim; ++i) d2 += std::pow(means[s][i] - means[r][i], 2);
      CHECK(std::sqrt(d2) >= o.offset_separation);
    }
}

TEST_CASE("articulation maps are Lipschitz-bounded") {
  const auto c = gen_corpus(small_options(), 4);
  Rng rng(5);
  for (const auto& spk : c.speakers) {
    CHECK(spk.spectral_norm() <= 1.0 + 1e-9);
    const auto& audio = c.utterances[spk.id * 3].audio;
    const auto base = spk.articulate(audio);
    for (int trial = 0; trial < 5; ++trial) {
      auto perturbed = audio;
      const auto t = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(audio.frames()) - 1));
      double dn = 0.0;
      for (std::size_t d = 0; d < audio.dim(); ++d) {
        const double delta = rng.normal(0.0, 0.3);
        perturbed.at(t, d) += delta;
        dn += delta * delta;
      }
      const auto moved = spk.articulate(perturbed);
      double change = 0.0;
      for (std::size_t i = 0; i < base.data().size(); ++i) change += std::pow(moved.data()[i] - base.data()[i], 2);
      // Averaging halves the perturbation; tanh and the smoothing taps do not amplify it.
      CHECK(std::sqrt(change) <= spk.spectral_norm() * 0.5 * std::sqrt(dn) + 1e-12);
    }
  }
}

TEST_CASE("identity shift reproduces the source subset") {
  const auto c = gen_corpus(small_options(), 5);
  std::vector<Utterance> subset(c.utterances.begin(), c.utterances.begin() + 2);
  const auto t = gen_target_domain(subset, DomainShift{}, SceneSpec{}, 9, false);
  REQUIRE(t.utterances.size() == 2);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(t.utterances[k].landmarks == subset[k].landmarks);
    CHECK(t.utterances[k].audio == subset[k].audio);
  }
  CHECK(t.utterances[1].split == "test");
}

TEST_CASE("shifted target moments follow the affine map") {
  const auto c = gen_corpus(small_options(), 6);
  std::vector<Utterance> subset(c.utterances.begin(), c.utterances.begin() + 3);
  Rng rng(7);
  const auto shift = DomainShift::random(rng);
  const auto t = gen_target_domain(subset, shift, SceneSpec{}, 9, true);
  for (std::size_t k = 0; k < subset.size(); ++k) {
    const auto src = frame_mean(subset[k].landmarks);
    const auto dst = frame_mean(t.utterances[k].landmarks);
    const auto expected = shift.apply_frame(src);
    for (std::size_t i = 0; i < kLandmarkDim; ++i) CHECK(std::abs(dst[i] - expected[i]) < 1e-9);
    CHECK(t.utterances[k].frames.size() == t.utterances[k].landmarks.frames());
    CHECK(t.utterances[k].poses.size() == t.utterances[k].landmarks.frames());
  }
}

TEST_CASE("injected shift is recoverable by point-wise affine regression") {
  const auto c = gen_corpus(small_options(), 7);
  Rng rng(8);
  const auto shift = DomainShift::random(rng);
  const auto& src = c.utterances[0].landmarks;
  const auto dst = shift.apply(src);
  // Shared A, per-point b: regress on per-point centered data, then recover b.
  Eigen::MatrixXd X(src.frames() * kLandmarkPoints, 3), Y(src.frames() * kLandmarkPoints, 3);
  const auto ms = frame_mean(src), md = frame_mean(dst);
  for (std::size_t t = 0; t < src.frames(); ++t)
    for (std::size_t k = 0; k < kLandmarkPoints; ++k)
      for (int a = 0; a < 3; ++a) {
        X(t * kLandmarkPoints + k, a) = src.at(t, k, a) - ms[k * 3 + a];
        Y(t * kLandmarkPoints + k, a) = dst.at(t, k, a) - md[k * 3 + a];
      }
  const Eigen::Matrix3d At = X.colPivHouseholderQr().solve(Y);
  CHECK((At.transpose() - shift.A).cwiseAbs().maxCoeff() < 1e-8);
  for (std::size_t k = 0; k < kLandmarkPoints; ++k) {
    const Vec3 b = Vec3(md[k * 3], md[k * 3 + 1], md[k * 3 + 2]) - At.transpose() * Vec3(ms[k * 3], ms[k * 3 + 1], ms[k * 3 + 2]);
    for (int a = 0; a < 3; ++a) CHECK(std::abs(b[a] - shift.b[k * 3 + a]) < 1e-8);
  }
}

TEST_CASE("singular shifts are rejected") {
  DomainShift s;
  s.A(2, 2) = 0.0;
  CHECK_THROWS(s.validate());
  const auto c = gen_corpus(small_options(), 8);
  CHECK_THROWS(gen_target_domain(std::span<const Utterance>(c.utterances.data(), 1), s, SceneSpec{}, 1, false));
}

TEST_CASE("corpus and target directories round trip") {
  const auto c = gen_corpus(small_options(), 9);
  const auto dir = scratch("talkrf_corpus_io");
  save_corpus(dir / "corpus", c);
  const auto back = load_corpus(dir / "corpus");
  REQUIRE(back.utterances.size() == c.utterances.size());
  for (std::size_t i = 0; i < back.utterances.size(); ++i) {
    CHECK(back.utterances[i].id == c.utterances[i].id);
    CHECK(back.utterances[i].split == c.utterances[i].split);
    CHECK(back.utterances[i].audio == c.utterances[i].audio);
    CHECK(back.utterances[i].landmarks == c.utterances[i].landmarks);
  }

  Rng rng(3);
  const auto shift = DomainShift::random(rng);
  std::vector<Utterance> subset(c.utterances.begin(), c.utterances.begin() + 2);
  const auto t = gen_target_domain(subset, shift, SceneSpec{}, 4, true);
  save_target(dir / "target", t, &shift);
  const auto tb = load_target(dir / "target");
  REQUIRE(tb.utterances.size() == 2);
  CHECK(tb.scene.mouth_scale == t.scene.mouth_scale);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(tb.utterances[k].landmarks == t.utterances[k].landmarks);
    CHECK(tb.utterances[k].frames.size() == t.utterances[k].frames.size());
    CHECK(tb.utterances[k].frames[3].objects == t.utterances[k].frames[3].objects);
    for (std::size_t i = 0; i < t.utterances[k].frames[3].image.rgb.size(); ++i)
      CHECK(std::abs(tb.utterances[k].frames[3].image.rgb[i] - t.utterances[k].frames[3].image.rgb[i]) <= 0.5 / 255.0 + 1e-12);
  }
  // The training-side manifest never mentions the shift.
  std::ifstream in(dir / "target" / "manifest.json");
  const std::string manifest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(manifest.find("shift") == std::string::npos);
  const auto sb = load_domain_shift(dir / "target");
  CHECK(sb.A == shift.A);
  CHECK(sb.b == shift.b);
  std::filesystem::remove_all(dir);
}

TEST_CASE("features import from text files") {
  const auto dir = scratch("talkrf_features_io");
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "f.csv");
    out << "1,2,3\n4,5,6\n\n";
  }
  const auto f = read_features(dir / "f.csv");
  CHECK(f.frames() == 2);
  CHECK(f.dim() == 3);
  CHECK(f.at(1, 2) == 6.0);
  {
    std::ofstream out(dir / "bad.txt");
    out << "1 2 3\n4 5\n";
  }
  CHECK_THROWS(read_features(dir / "bad.txt"));
  write_features(dir / "f.feat", f);
  CHECK(read_features(dir / "f.feat") == f);
  std::filesystem::remove_all(dir);
}
