#include "talkrf/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "talkrf/detail/little_endian.hpp"

namespace talkrf {

void MeshBasis::validate() const {
  if (identity_dims < 1 || expression_dims < 1) {
    throw std::invalid_argument("MeshBasis: identity and expression dims must be >= 1");
  }
  if (mean.size() != vertices * 3 || identity.size() != vertices * 3 * identity_dims ||
      expression.size() != vertices * 3 * expression_dims) {
    throw ShapeError("MeshBasis: array sizes do not match vertex/code counts");
  }
  auto finite = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  if (!finite(mean) || !finite(identity) || !finite(expression)) {
    throw std::invalid_argument("MeshBasis: non-finite entries");
  }
}

MeshBasis MeshBasis::synthetic(std::size_t vertices, std::size_t identity_dims,
                               std::size_t expression_dims, Rng& rng) {
  MeshBasis b;
  b.vertices = vertices;
  b.identity_dims = identity_dims;
  b.expression_dims = expression_dims;
  b.mean.resize(vertices * 3);
  // Fibonacci sphere stretched to head proportions.
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t v = 0; v < vertices; ++v) {
    const double y = 1.0 - 2.0 * (static_cast<double>(v) + 0.5) / static_cast<double>(vertices);
    const double r = std::sqrt(1.0 - y * y);
    const double phi = golden * static_cast<double>(v);
    b.mean[v * 3 + 0] = 0.35 * r * std::cos(phi);
    b.mean[v * 3 + 1] = 0.45 * y;
    b.mean[v * 3 + 2] = 0.35 * r * std::sin(phi);
  }
  b.identity.resize(vertices * 3 * identity_dims);
  for (auto& x : b.identity) x = rng.normal(0.0, 0.02);
  b.expression.resize(vertices * 3 * expression_dims);
  for (auto& x : b.expression) x = rng.normal(0.0, 0.02);
  return b;
}

std::vector<double> assemble_mesh(const MeshBasis& basis, std::span<const double> identity,
                                  std::span<const double> expression) {
  if (identity.size() != basis.identity_dims || expression.size() != basis.expression_dims) {
    throw ShapeError("assemble_mesh: code sizes (" + std::to_string(identity.size()) + ", " +
                     std::to_string(expression.size()) + ") do not match basis (" +
                     std::to_string(basis.identity_dims) + ", " + std::to_string(basis.expression_dims) + ")");
  }
  std::vector<double> mesh = basis.mean;
  for (std::size_t r = 0; r < mesh.size(); ++r) {
    const double* id_row = basis.identity.data() + r * basis.identity_dims;
    const double* ex_row = basis.expression.data() + r * basis.expression_dims;
    mesh[r] += std::inner_product(identity.begin(), identity.end(), id_row, 0.0) +
               std::inner_product(expression.begin(), expression.end(), ex_row, 0.0);
  }
  return mesh;
}

void LandmarkIndexSet::validate(std::size_t vertices) const {
  std::vector<std::size_t> sorted(indices.begin(), indices.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw std::invalid_argument("LandmarkIndexSet: indices must be distinct");
  }
  if (sorted.back() >= vertices) {
    throw std::out_of_range("LandmarkIndexSet: index " + std::to_string(sorted.back()) +
                            " out of range for " + std::to_string(vertices) + " vertices");
  }
}

LandmarkIndexSet LandmarkIndexSet::synthetic(std::size_t vertices, Rng& rng) {
  if (vertices < kLandmarkPoints) throw std::invalid_argument("LandmarkIndexSet: mesh too small");
  std::vector<std::size_t> all(vertices);
  std::iota(all.begin(), all.end(), 0);
  std::shuffle(all.begin(), all.end(), rng.engine());
  LandmarkIndexSet s;
  std::copy_n(all.begin(), kLandmarkPoints, s.indices.begin());
  return s;
}

std::vector<double> select_landmarks(std::span<const double> mesh, std::span<const double> mean_mesh,
                                     const LandmarkIndexSet& index) {
  if (mesh.size() != mean_mesh.size() || mesh.size() % 3 != 0) {
    throw ShapeError("select_landmarks: mesh and mean mesh sizes differ");
  }
  index.validate(mesh.size() / 3);
  std::vector<double> out(kLandmarkDim);
  for (std::size_t k = 0; k < kLandmarkPoints; ++k) {
    const std::size_t v = index.indices[k];
    for (std::size_t a = 0; a < 3; ++a) out[k * 3 + a] = mesh[v * 3 + a] - mean_mesh[v * 3 + a];
  }
  return out;
}

// ------------------------------------------------------------ LandmarkSequence

LandmarkSequence::LandmarkSequence(std::size_t frames, double fps)
    : frames_(frames), fps_(fps), data_(frames * kLandmarkDim, 0.0) {}

LandmarkSequence::LandmarkSequence(std::size_t frames, std::vector<double> data, double fps)
    : frames_(frames), fps_(fps), data_(std::move(data)) {
  if (data_.size() != frames_ * kLandmarkDim) {
    throw ShapeError("LandmarkSequence: " + std::to_string(data_.size()) + " values for " +
                     std::to_string(frames_) + " frames");
  }
}

Tensor LandmarkSequence::to_tensor() const { return Tensor::from({1, frames_, kLandmarkDim}, data_); }

LandmarkSequence LandmarkSequence::from_tensor(const Tensor& t, std::size_t batch, double fps) {
  if (t.rank() != 3 || t.dim(2) != kLandmarkDim || batch >= t.dim(0)) {
    throw ShapeError("LandmarkSequence::from_tensor: expected [B, T, 204], got " + to_string(t.shape()));
  }
  const std::size_t frames = t.dim(1);
  const auto first = t.values().begin() + static_cast<std::ptrdiff_t>(batch * frames * kLandmarkDim);
  return LandmarkSequence(frames, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(frames * kLandmarkDim)), fps);
}

// --------------------------------------------------------------- normalization

void NormalizationStats::store(Container& c, const std::string& prefix) const {
  c.put(prefix + "/mean", {kLandmarkDim}, mean);
  c.put(prefix + "/std", {kLandmarkDim}, stddev);
  c.metadata[prefix] = {{"floor", floor}, {"clamped", clamped}};
}

NormalizationStats NormalizationStats::restore(const Container& c, const std::string& prefix) {
  NormalizationStats s;
  s.mean = c.get(prefix + "/mean").values;
  s.stddev = c.get(prefix + "/std").values;
  if (c.metadata.contains(prefix)) {
    s.floor = c.metadata[prefix].value("floor", 1e-6);
    s.clamped = c.metadata[prefix].value("clamped", std::size_t{0});
  }
  return s;
}

NormalizationStats fit_normalization(std::span<const LandmarkSequence> train, double floor) {
  if (floor <= 0.0) throw std::invalid_argument("fit_normalization: floor must be positive");
  std::size_t frames = 0;
  for (const auto& s : train) frames += s.frames();
  if (frames < 2) throw std::invalid_argument("fit_normalization: need at least 2 frames");
  NormalizationStats st;
  st.floor = floor;
  st.mean.assign(kLandmarkDim, 0.0);
  st.stddev.assign(kLandmarkDim, 0.0);
  for (const auto& s : train)
    for (std::size_t t = 0; t < s.frames(); ++t)
      for (std::size_t i = 0; i < kLandmarkDim; ++i) st.mean[i] += s.frame(t)[i];
  for (auto& m : st.mean) m /= static_cast<double>(frames);
  // Second pass removes the rounding left by the plain sum.
  std::vector<double> residual(kLandmarkDim, 0.0);
  for (const auto& s : train)
    for (std::size_t t = 0; t < s.frames(); ++t)
      for (std::size_t i = 0; i < kLandmarkDim; ++i) residual[i] += s.frame(t)[i] - st.mean[i];
  for (std::size_t i = 0; i < kLandmarkDim; ++i) st.mean[i] += residual[i] / static_cast<double>(frames);
  for (const auto& s : train)
    for (std::size_t t = 0; t < s.frames(); ++t)
      for (std::size_t i = 0; i < kLandmarkDim; ++i) {
        const double d = s.frame(t)[i] - st.mean[i];
        st.stddev[i] += d * d;
      }
  for (auto& v : st.stddev) {
    v = std::sqrt(v / static_cast<double>(frames));
    if (v < floor) {
      v = floor;
      ++st.clamped;
    }
  }
  return st;
}

LandmarkSequence apply_normalization(const LandmarkSequence& seq, const NormalizationStats& stats) {
  LandmarkSequence out = seq;
  for (std::size_t t = 0; t < seq.frames(); ++t) {
    auto f = out.frame(t);
    for (std::size_t i = 0; i < kLandmarkDim; ++i) f[i] = (f[i] - stats.mean[i]) / stats.stddev[i];
  }
  return out;
}

LandmarkSequence invert_normalization(const LandmarkSequence& seq, const NormalizationStats& stats) {
  LandmarkSequence out = seq;
  for (std::size_t t = 0; t < seq.frames(); ++t) {
    auto f = out.frame(t);
    for (std::size_t i = 0; i < kLandmarkDim; ++i) f[i] = f[i] * stats.stddev[i] + stats.mean[i];
  }
  return out;
}

// ------------------------------------------------------------------- smoothing

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be > 0");
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (auto& v : k) v /= total;
  return k;
}

namespace {

// Half-sample symmetric reflection (a b c | c b a ...), repeated as needed.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(n) ? m : period - 1 - m);
}

}  // namespace

std::vector<double> gaussian_smooth_rows(std::span<const double> rows, std::size_t frames,
                                         std::size_t width, double sigma) {
  if (frames == 0) throw std::invalid_argument("gaussian_smooth: empty sequence");
  if (rows.size() != frames * width) throw ShapeError("gaussian_smooth: size mismatch");
  const auto kernel = gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  std::vector<double> out(rows.size(), 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    double* dst = out.data() + t * width;
    for (std::ptrdiff_t j = -radius; j <= radius; ++j) {
      const double w = kernel[static_cast<std::size_t>(j + radius)];
      const std::size_t src_t = reflect_index(static_cast<std::ptrdiff_t>(t) + j, frames);
      const double* src = rows.data() + src_t * width;
      for (std::size_t i = 0; i < width; ++i) dst[i] += w * src[i];
    }
  }
  return out;
}

LandmarkSequence gaussian_smooth(const LandmarkSequence& seq, double sigma) {
  return LandmarkSequence(seq.frames(),
                          gaussian_smooth_rows(seq.data(), seq.frames(), kLandmarkDim, sigma),
                          seq.fps());
}

// -------------------------------------------------------------------------- io

namespace {
constexpr char kLandmarkMagic[4] = {'T', 'R', 'L', 'M'};
constexpr std::uint32_t kLandmarkVersion = 1;
constexpr std::size_t kLandmarkHeader = 32;
}  // namespace

void write_landmarks(const std::filesystem::path& path, const LandmarkSequence& seq) {
  std::string bytes(kLandmarkMagic, 4);
  detail::put_le<std::uint32_t>(bytes, kLandmarkVersion);
  detail::put_le<std::uint64_t>(bytes, seq.frames());
  detail::put_le<double>(bytes, seq.fps());
  detail::put_le<std::uint32_t>(bytes, kLandmarkPoints);
  detail::put_le<std::uint32_t>(bytes, 0);
  for (double v : seq.data()) detail::put_le<double>(bytes, v);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_landmarks: cannot open " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

LandmarkSequence read_landmarks(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_landmarks: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < kLandmarkHeader || std::memcmp(bytes.data(), kLandmarkMagic, 4) != 0) {
    throw std::runtime_error("read_landmarks: not a landmark file: " + path.string());
  }
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kLandmarkVersion) {
    throw std::runtime_error("read_landmarks: unsupported version " + std::to_string(version));
  }
  const auto frames = detail::get_le<std::uint64_t>(bytes.data() + 8);
  const auto fps = detail::get_le<double>(bytes.data() + 16);
  const auto points = detail::get_le<std::uint32_t>(bytes.data() + 24);
  if (points != kLandmarkPoints) throw std::runtime_error("read_landmarks: expected 68 points");
  if (bytes.size() != kLandmarkHeader + frames * kLandmarkDim * 8) {
    throw std::runtime_error("read_landmarks: truncated file " + path.string());
  }
  std::vector<double> data(frames * kLandmarkDim);
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = detail::get_le<double>(bytes.data() + kLandmarkHeader + i * 8);
  }
  LandmarkSequence seq(frames, std::move(data), fps);
  for (double v : seq.data()) {
    if (std::isnan(v)) throw std::runtime_error("read_landmarks: NaN in " + path.string());
  }
  return seq;
}

void write_landmarks_csv(const std::filesystem::path& path, const LandmarkSequence& seq) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_landmarks_csv: cannot open " + path.string());
  out.precision(17);
  out << "frame,point,x,y,z\n";
  for (std::size_t t = 0; t < seq.frames(); ++t)
    for (std::size_t p = 0; p < kLandmarkPoints; ++p)
      out << t << ',' << p << ',' << seq.at(t, p, 0) << ',' << seq.at(t, p, 1) << ',' << seq.at(t, p, 2) << '\n';
}

}  // namespace talkrf
