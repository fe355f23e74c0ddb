#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "talkrf/geometry.hpp"

using namespace talkrf;

namespace {

MeshBasis small_basis(Rng& rng) { return MeshBasis::synthetic(120, 4, 5, rng); }

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

LandmarkSequence random_sequence(std::size_t frames, Rng& rng, double scale = 1.0) {
  LandmarkSequence s(frames);
  for (auto& v : s.data()) v = rng.normal(0.0, scale);
  return s;
}

double roughness(const LandmarkSequence& s) {
  double r = 0.0;
  for (std::size_t t = 1; t + 1 < s.frames(); ++t)
    for (std::size_t i = 0; i < kLandmarkDim; ++i) {
      const double d = s.frame(t + 1)[i] - 2.0 * s.frame(t)[i] + s.frame(t - 1)[i];
      r += d * d;
    }
  return r;
}

}  // namespace

TEST_CASE("assemble_mesh at zero codes is the mean mesh") {
  Rng rng(1);
  auto basis = small_basis(rng);
  auto mesh = assemble_mesh(basis, std::vector<double>(4, 0.0), std::vector<double>(5, 0.0));
  CHECK(mesh == basis.mean);
}

TEST_CASE("assemble_mesh matches a naive triple loop and is linear") {
  Rng rng(2);
  auto basis = small_basis(rng);
  auto id = random_vec(4, rng), e1 = random_vec(5, rng), e2 = random_vec(5, rng);
  auto mesh = assemble_mesh(basis, id, e1);
  for (std::size_t v = 0; v < basis.vertices; ++v)
    for (std::size_t a = 0; a < 3; ++a) {
      double ref = basis.mean[v * 3 + a];
      for (std::size_t k = 0; k < 4; ++k) ref += basis.identity[(v * 3 + a) * 4 + k] * id[k];
      for (std::size_t k = 0; k < 5; ++k) ref += basis.expression[(v * 3 + a) * 5 + k] * e1[k];
      CHECK(std::abs(mesh[v * 3 + a] - ref) < 1e-12);
    }
  // assemble(i, e1) + (assemble(0, e2 - e1) - mean) == assemble(i, e2)
  std::vector<double> de(5);
  for (std::size_t k = 0; k < 5; ++k) de[k] = e2[k] - e1[k];
  auto delta = assemble_mesh(basis, std::vector<double>(4, 0.0), de);
  auto target = assemble_mesh(basis, id, e2);
  for (std::size_t r = 0; r < mesh.size(); ++r) {
    CHECK(std::abs(mesh[r] + delta[r] - basis.mean[r] - target[r]) < 1e-12);
  }
  // Superposition in the identity code.
  auto i2 = random_vec(4, rng);
  std::vector<double> isum(4);
  for (std::size_t k = 0; k < 4; ++k) isum[k] = id[k] + i2[k];
  auto zero_e = std::vector<double>(5, 0.0);
  auto a = assemble_mesh(basis, id, zero_e), b = assemble_mesh(basis, i2, zero_e), c = assemble_mesh(basis, isum, zero_e);
  for (std::size_t r = 0; r < a.size(); ++r) CHECK(std::abs(a[r] + b[r] - basis.mean[r] - c[r]) < 1e-12);
}

TEST_CASE("assemble_mesh rejects mismatched codes") {
  Rng rng(3);
  auto basis = small_basis(rng);
  CHECK_THROWS_AS(assemble_mesh(basis, std::vector<double>(3, 0.0), std::vector<double>(5, 0.0)), ShapeError);
}

TEST_CASE("select_landmarks extracts mean-relative offsets") {
  Rng rng(4);
  auto basis = small_basis(rng);
  auto index = LandmarkIndexSet::synthetic(basis.vertices, rng);
  auto zeros = select_landmarks(basis.mean, basis.mean, index);
  CHECK(zeros.size() == 68 * 3);
  for (double v : zeros) CHECK(v == 0.0);

  auto mesh = random_vec(basis.vertices * 3, rng);
  auto lm = select_landmarks(mesh, basis.mean, index);
  for (std::size_t k = 0; k < 68; ++k)
    for (std::size_t a = 0; a < 3; ++a)
      CHECK(lm[k * 3 + a] == mesh[index.indices[k] * 3 + a] - basis.mean[index.indices[k] * 3 + a]);

  auto at_origin = assemble_mesh(basis, std::vector<double>(4, 0.0), std::vector<double>(5, 0.0));
  for (double v : select_landmarks(at_origin, basis.mean, index)) CHECK(v == 0.0);

  index.indices[10] = basis.vertices + 3;
  CHECK_THROWS_AS(select_landmarks(mesh, basis.mean, index), std::out_of_range);
}

TEST_CASE("normalization of a constant sequence clamps every std") {
  LandmarkSequence s(10);
  for (auto& v : s.data()) v = 0.7;
  auto stats = fit_normalization(s);
  CHECK(stats.clamped == kLandmarkDim);
  for (double v : stats.stddev) CHECK(v == stats.floor);
  const auto normalized = apply_normalization(s, stats);
  for (double v : normalized.data()) CHECK(v == 0.0);
}

TEST_CASE("normalization round trip and fitted moments") {
  Rng rng(5);
  auto s = random_sequence(50, rng, 0.3);
  for (std::size_t t = 0; t < 50; ++t) s.frame(t)[7] = 1.25;  // one degenerate coordinate
  auto stats = fit_normalization(s);
  CHECK(stats.clamped == 1);
  auto n = apply_normalization(s, stats);
  auto back = invert_normalization(n, stats);
  for (std::size_t i = 0; i < s.data().size(); ++i) CHECK(std::abs(back.data()[i] - s.data()[i]) < 1e-10);
  for (std::size_t i = 0; i < kLandmarkDim; ++i) {
    double m = 0.0, v = 0.0;
    for (std::size_t t = 0; t < 50; ++t) m += n.frame(t)[i];
    m /= 50.0;
    for (std::size_t t = 0; t < 50; ++t) v += (n.frame(t)[i] - m) * (n.frame(t)[i] - m);
    v = std::sqrt(v / 50.0);
    CHECK(std::abs(m) < 1e-9);
    if (i != 7) CHECK(std::abs(v - 1.0) < 1e-6);
  }
  CHECK_THROWS(fit_normalization(LandmarkSequence(1)));
}

TEST_CASE("gaussian smoothing") {
  SUBCASE("constant sequence is unchanged") {
    LandmarkSequence s(12);
    for (auto& v : s.data()) v = -2.5;
    auto out = gaussian_smooth(s, 1.0);
    for (double v : out.data()) CHECK(v == doctest::Approx(-2.5).epsilon(1e-14));
  }
  SUBCASE("impulse response is the centered kernel") {
    LandmarkSequence s(21);
    s.at(10, 5, 1) = 1.0;
    auto out = gaussian_smooth(s, 1.0);
    // Direct oracle: exp(-d^2 / 2) normalized over |d| <= 3.
    double norm = 0.0;
    for (int d = -3; d <= 3; ++d) norm += std::exp(-0.5 * d * d);
    for (int d = -3; d <= 3; ++d) {
      CHECK(out.at(static_cast<std::size_t>(10 + d), 5, 1) == doctest::Approx(std::exp(-0.5 * d * d) / norm).epsilon(1e-12));
    }
    CHECK(out.at(6, 5, 1) == 0.0);
    CHECK(out.at(10, 5, 0) == 0.0);
  }
  SUBCASE("roughness strictly decreases on non-linear sequences") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      auto s = random_sequence(40, rng);
      CHECK(roughness(gaussian_smooth(s, 1.0)) < roughness(s));
    }
  }
  SUBCASE("commutes with constant shifts") {
    Rng rng(7);
    auto s = random_sequence(30, rng);
    auto shifted = s;
    for (std::size_t t = 0; t < 30; ++t)
      for (std::size_t i = 0; i < kLandmarkDim; ++i) shifted.frame(t)[i] += 0.1 * static_cast<double>(i % 5);
    auto a = gaussian_smooth(shifted, 1.5), b = gaussian_smooth(s, 1.5);
    for (std::size_t t = 0; t < 30; ++t)
      for (std::size_t i = 0; i < kLandmarkDim; ++i)
        CHECK(std::abs(a.frame(t)[i] - b.frame(t)[i] - 0.1 * static_cast<double>(i % 5)) < 1e-12);
  }
  SUBCASE("short sequences and invalid arguments") {
    LandmarkSequence one(1);
    one.at(0, 0, 0) = 3.0;
    CHECK(gaussian_smooth(one, 2.0).at(0, 0, 0) == doctest::Approx(3.0));
    CHECK_THROWS(gaussian_smooth(LandmarkSequence(0), 1.0));
    CHECK_THROWS(gaussian_smooth(one, 0.0));
  }
}

TEST_CASE("landmark files round trip and export csv") {
  Rng rng(8);
  auto s = random_sequence(9, rng);
  const auto dir = std::filesystem::temp_directory_path() / "talkrf_geometry_io";
  write_landmarks(dir / "a.trlm", s);
  auto back = read_landmarks(dir / "a.trlm");
  CHECK(back == s);
  CHECK(std::filesystem::file_size(dir / "a.trlm") == 32 + 9 * 204 * 8);
  write_landmarks_csv(dir / "a.csv", s);
  std::ifstream in(dir / "a.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "frame,point,x,y,z");
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  CHECK(lines == 9 * 68);
  std::filesystem::remove_all(dir);
}
