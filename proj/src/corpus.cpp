#include "talkrf/corpus.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

#include "talkrf/container.hpp"

namespace talkrf {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double spectral_norm_of(const std::vector<double>& m, std::size_t rows, std::size_t cols) {
  Eigen::Map<const RowMatrix> map(m.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(map);
  return svd.singularValues()(0);
}

std::string lower_extension(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

}  // namespace

AudioFeatures::AudioFeatures(std::size_t frames, std::size_t dim, std::vector<double> values, double rate)
    : frames_(frames), dim_(dim), rate_(rate), values_(std::move(values)) {
  if (values_.size() != frames_ * dim_)
    throw ShapeError(fmt::format("AudioFeatures: {} values for {} x {}", values_.size(), frames_, dim_));
}

Tensor AudioFeatures::to_tensor() const { return Tensor::from({1, frames_, dim_}, values_); }

AudioFeatures AudioFeatures::window(std::size_t start, std::size_t count) const {
  if (start + count > frames_) throw std::out_of_range("AudioFeatures::window: past the end");
  return AudioFeatures(count, dim_,
                       std::vector<double>(values_.begin() + static_cast<std::ptrdiff_t>(start * dim_),
                                           values_.begin() + static_cast<std::ptrdiff_t>((start + count) * dim_)),
                       rate_);
}

void check_aligned(const AudioFeatures& audio, const LandmarkSequence& landmarks, const char* who) {
  if (audio.frames() != 2 * landmarks.frames())
    throw ShapeError(fmt::format("{}: audio has {} frames but {} landmark frames need {}", who, audio.frames(),
                                 landmarks.frames(), 2 * landmarks.frames()));
}

void write_features(const std::filesystem::path& path, const AudioFeatures& audio) {
  Container c;
  c.metadata["kind"] = "features";
  c.metadata["rate"] = audio.rate();
  c.put("features", {audio.frames(), audio.dim()}, audio.values());
  c.save(path);
}

AudioFeatures read_features(const std::filesystem::path& path) {
  const auto ext = lower_extension(path);
  if (ext == ".csv" || ext == ".txt") {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_features: cannot open " + path.string());
    std::vector<double> values;
    std::size_t rows = 0, dim = 0;
    for (std::string line; std::getline(in, line);) {
      std::replace(line.begin(), line.end(), ',', ' ');
      std::istringstream ls(line);
      std::size_t n = 0;
      for (double v; ls >> v; ++n) values.push_back(v);
      if (n == 0) continue;
      if (dim == 0) dim = n;
      if (n != dim) throw std::runtime_error(fmt::format("read_features: row {} has {} values, expected {}", rows, n, dim));
      ++rows;
    }
    if (rows == 0) throw std::runtime_error("read_features: no rows in " + path.string());
    return AudioFeatures(rows, dim, std::move(values));
  }
  const auto c = Container::load(path);
  const auto& rec = c.get("features");
  if (rec.shape.size() != 2) throw std::runtime_error("read_features: expected [T_a, D] in " + path.string());
  for (double v : rec.values)
    if (!std::isfinite(v)) throw std::runtime_error("read_features: non-finite value in " + path.string());
  return AudioFeatures(rec.shape[0], rec.shape[1], rec.values, c.metadata.value("rate", kAudioRate));
}

void CorpusOptions::validate() const {
  if (speakers < 1 || utterances < 1) throw std::invalid_argument("corpus: speaker and utterance counts must be >= 1");
  if (frames < 2) throw std::invalid_argument("corpus: utterances need at least 2 frames");
  if (feature_dim < 1 || phonemes < 1) throw std::invalid_argument("corpus: feature_dim and phonemes must be >= 1");
  if (min_segment < 1 || min_segment > max_segment) throw std::invalid_argument("corpus: bad segment range");
  if (!(articulation_gain > 0.0 && articulation_gain <= 1.0))
    throw std::invalid_argument("corpus: articulation_gain must be in (0, 1]");
  if (!(saturation > 0.0) || !(smoothing_sigma > 0.0)) throw std::invalid_argument("corpus: saturation and sigma must be > 0");
}

CorpusWorld make_world(const CorpusOptions& options, std::uint64_t seed) {
  options.validate();
  Rng rng(seed);
  CorpusWorld w;
  w.options = options;
  w.basis = MeshBasis::synthetic(options.vertices, options.identity_dims, options.expression_dims, rng);
  w.index = LandmarkIndexSet::synthetic(options.vertices, rng);
  w.prototypes.resize(options.phonemes * options.feature_dim);
  for (auto& v : w.prototypes) v = rng.normal();
  w.common_articulation.resize(options.expression_dims * options.feature_dim);
  for (auto& v : w.common_articulation) v = rng.normal();
  return w;
}

LandmarkSequence SpeakerProfile::articulate(const AudioFeatures& audio) const {
  if (audio.dim() != feature_dim)
    throw ShapeError(fmt::format("articulate: feature dim {} but speaker expects {}", audio.dim(), feature_dim));
  if (audio.frames() < 2 || audio.frames() % 2 != 0)
    throw ShapeError("articulate: audio frame count must be a positive even number");
  const std::size_t T = audio.frames() / 2;
  Eigen::Map<const RowMatrix> W(articulation.data(), kLandmarkDim, static_cast<Eigen::Index>(feature_dim));
  LandmarkSequence raw(T);
  Eigen::VectorXd abar(feature_dim);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t d = 0; d < feature_dim; ++d) abar(d) = 0.5 * (audio.at(2 * t, d) + audio.at(2 * t + 1, d));
    const Eigen::VectorXd y = W * abar;
    auto f = raw.frame(t);
    for (std::size_t i = 0; i < kLandmarkDim; ++i) f[i] = saturation * std::tanh(y(i) / saturation);
  }
  LandmarkSequence out = gaussian_smooth(raw, smoothing_sigma);
  for (std::size_t t = 0; t < T; ++t) {
    auto f = out.frame(t);
    for (std::size_t i = 0; i < kLandmarkDim; ++i) f[i] += offset[i];
  }
  return out;
}

double SpeakerProfile::spectral_norm() const { return spectral_norm_of(articulation, kLandmarkDim, feature_dim); }

SpeakerProfile make_speaker(const CorpusWorld& world, std::size_t id, Rng& rng) {
  const auto& o = world.options;
  SpeakerProfile s;
  s.id = id;
  s.feature_dim = o.feature_dim;
  s.saturation = o.saturation;
  s.smoothing_sigma = o.smoothing_sigma;

  std::vector<double> code(o.identity_dims);
  for (auto& v : code) v = rng.normal(0.0, o.identity_scale);
  const auto mesh = assemble_mesh(world.basis, code, std::vector<double>(o.expression_dims, 0.0));
  s.offset = select_landmarks(mesh, world.basis.mean, world.index);

  // W = B_exp[I] * (common + variation * own), rescaled to the target spectral norm.
  RowMatrix bexp(kLandmarkDim, o.expression_dims);
  for (std::size_t k = 0; k < kLandmarkPoints; ++k)
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t e = 0; e < o.expression_dims; ++e)
        bexp(k * 3 + a, e) = world.basis.expression[(world.index.indices[k] * 3 + a) * o.expression_dims + e];
  RowMatrix r(o.expression_dims, o.feature_dim);
  for (std::size_t e = 0; e < o.expression_dims; ++e)
    for (std::size_t d = 0; d < o.feature_dim; ++d)
      r(e, d) = world.common_articulation[e * o.feature_dim + d] + o.speaker_variation * rng.normal();
  RowMatrix w = bexp * r;
  s.articulation.assign(w.data(), w.data() + w.size());
  const double norm = spectral_norm_of(s.articulation, kLandmarkDim, o.feature_dim);
  for (auto& v : s.articulation) v *= o.articulation_gain / norm;
  return s;
}

AudioFeatures synth_audio(const CorpusWorld& world, std::size_t video_frames, Rng& rng) {
  const auto& o = world.options;
  const std::size_t Ta = 2 * video_frames, D = o.feature_dim;
  std::vector<double> raw(Ta * D, 0.0);
  for (std::size_t t = 0; t < Ta;) {
    const auto len = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(o.min_segment),
                                                          static_cast<std::int64_t>(o.max_segment)));
    const bool silence = rng.bernoulli(0.15);
    const auto p = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(o.phonemes) - 1));
    for (std::size_t k = 0; k < len && t < Ta; ++k, ++t)
      if (!silence)
        for (std::size_t d = 0; d < D; ++d) raw[t * D + d] = o.phoneme_scale * world.prototypes[p * D + d];
  }
  auto smooth = gaussian_smooth_rows(raw, Ta, D, 1.5);
  std::vector<double> noise(Ta * D);
  for (auto& v : noise) v = rng.normal(0.0, o.noise_scale);
  const auto filtered = gaussian_smooth_rows(noise, Ta, D, 1.0);
  for (std::size_t i = 0; i < smooth.size(); ++i) smooth[i] += filtered[i];
  return AudioFeatures(Ta, D, std::move(smooth));
}

std::vector<const Utterance*> Corpus::split(const std::string& name) const {
  std::vector<const Utterance*> out;
  for (const auto& u : utterances)
    if (u.split == name) out.push_back(&u);
  return out;
}

std::vector<LandmarkSequence> Corpus::landmarks(const std::string& split_name) const {
  std::vector<LandmarkSequence> out;
  for (const auto* u : split(split_name)) out.push_back(u->landmarks);
  return out;
}

std::vector<Utterance> gen_speaker_utterances(const CorpusWorld& world, const SpeakerProfile& speaker,
                                              std::size_t count, std::size_t frames, Rng& rng,
                                              const std::string& prefix) {
  std::vector<Utterance> out;
  for (std::size_t k = 0; k < count; ++k) {
    Rng local = rng.fork(k);
    Utterance u;
    u.id = fmt::format("{}_{:02d}", prefix, k);
    u.speaker = speaker.id;
    u.audio = synth_audio(world, frames, local);
    u.landmarks = speaker.articulate(u.audio);
    out.push_back(std::move(u));
  }
  return out;
}

Corpus gen_corpus(const CorpusOptions& options, std::uint64_t seed) {
  const CorpusWorld world = make_world(options, seed);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Corpus corpus;
  corpus.feature_dim = options.feature_dim;
  for (std::size_t s = 0; s < options.speakers; ++s) {
    SpeakerProfile profile;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 1000) throw std::runtime_error("gen_corpus: cannot place identity offsets with the requested separation");
      profile = make_speaker(world, s, rng);
      bool far = true;
      for (const auto& other : corpus.speakers) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < kLandmarkDim; ++i) d2 += std::pow(profile.offset[i] - other.offset[i], 2);
        far = far && std::sqrt(d2) >= options.offset_separation;
      }
      if (far) break;
    }
    Rng urng = rng.fork(1000 + s);
    auto utts = gen_speaker_utterances(world, profile, options.utterances, options.frames, urng, fmt::format("s{:03d}", s));
    if (options.utterances > 1) utts.back().split = "test";
    for (auto& u : utts) corpus.utterances.push_back(std::move(u));
    corpus.speakers.push_back(std::move(profile));
  }
  return corpus;
}

std::vector<Utterance> gen_unseen_speaker(const CorpusOptions& options, std::uint64_t seed, std::size_t count,
                                          std::size_t frames) {
  const CorpusWorld world = make_world(options, seed);
  Rng rng(seed ^ 0x5851f42d4c957f2dULL);
  const SpeakerProfile profile = make_speaker(world, options.speakers, rng);
  Rng urng = rng.fork(7);
  return gen_speaker_utterances(world, profile, count, frames, urng, "target");
}

void DomainShift::validate() const {
  if (!A.allFinite() || std::abs(A.determinant()) < 1e-9) throw std::invalid_argument("DomainShift: A must be invertible");
  if (b.size() != kLandmarkDim) throw ShapeError("DomainShift: b must have 204 values");
}

std::vector<double> DomainShift::apply_frame(std::span<const double> f) const {
  std::vector<double> out(kLandmarkDim);
  for (std::size_t k = 0; k < kLandmarkPoints; ++k) {
    const Vec3 p = A * Vec3(f[k * 3], f[k * 3 + 1], f[k * 3 + 2]);
    for (int a = 0; a < 3; ++a) out[k * 3 + a] = p[a] + b[k * 3 + a];
  }
  return out;
}

LandmarkSequence DomainShift::apply(const LandmarkSequence& seq) const {
  validate();
  LandmarkSequence out(seq.frames(), seq.fps());
  for (std::size_t t = 0; t < seq.frames(); ++t) {
    const auto f = apply_frame(seq.frame(t));
    std::copy(f.begin(), f.end(), out.frame(t).begin());
  }
  return out;
}

DomainShift DomainShift::random(Rng& rng, double scale, double angle, double offset) {
  DomainShift s;
  const Vec3 axis = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
  const Mat3 rot = Eigen::AngleAxisd(rng.uniform(-angle, angle), axis).toRotationMatrix();
  const Vec3 stretch(1.0 + rng.uniform(-scale, scale), 1.0 + rng.uniform(-scale, scale), 1.0 + rng.uniform(-scale, scale));
  s.A = stretch.asDiagonal() * rot;
  const Vec3 global(rng.normal(0.0, offset), rng.normal(0.0, offset), rng.normal(0.0, offset));
  for (std::size_t k = 0; k < kLandmarkPoints; ++k)
    for (int a = 0; a < 3; ++a) s.b[k * 3 + a] = global[a] + rng.normal(0.0, 0.5 * offset);
  return s;
}

std::vector<const TargetUtterance*> TargetDomain::split(const std::string& name) const {
  std::vector<const TargetUtterance*> out;
  for (const auto& u : utterances)
    if (u.split == name) out.push_back(&u);
  return out;
}

TargetDomain gen_target_domain(std::span<const Utterance> subset, const DomainShift& shift,
                               const SceneSpec& base_scene, std::uint64_t seed, bool render) {
  if (subset.empty()) throw std::invalid_argument("gen_target_domain: empty subset");
  shift.validate();
  base_scene.validate();
  Rng rng(seed);
  TargetDomain target;
  target.scene = base_scene;
  std::size_t total = 0;
  for (const auto& u : subset) total += u.landmarks.frames();
  const auto track = smooth_pose_track(total, base_scene.head_rest, rng);

  std::vector<double> gaps;
  std::size_t cursor = 0;
  for (std::size_t k = 0; k < subset.size(); ++k) {
    TargetUtterance t;
    t.id = subset[k].id;
    t.split = (subset.size() > 1 && k + 1 == subset.size()) ? "test" : "train";
    t.audio = subset[k].audio;
    t.landmarks = shift.apply(subset[k].landmarks);
    t.poses.assign(track.begin() + static_cast<std::ptrdiff_t>(cursor),
                   track.begin() + static_cast<std::ptrdiff_t>(cursor + t.landmarks.frames()));
    cursor += t.landmarks.frames();
    for (std::size_t f = 0; f < t.landmarks.frames(); ++f)
      gaps.push_back(t.landmarks.at(f, kLowerInnerLip, 1) - t.landmarks.at(f, kUpperInnerLip, 1));
    target.utterances.push_back(std::move(t));
  }
  double mean = 0.0, var = 0.0;
  for (double g : gaps) mean += g;
  mean /= static_cast<double>(gaps.size());
  for (double g : gaps) var += (g - mean) * (g - mean);
  target.scene.mouth_reference = mean;
  target.scene.mouth_scale = std::max(std::sqrt(var / static_cast<double>(gaps.size())), 1e-6);

  if (render)
    for (auto& t : target.utterances)
      for (std::size_t f = 0; f < t.landmarks.frames(); ++f)
        t.frames.push_back(render_ground_truth(target.scene, t.landmarks.frame(f), t.poses[f]));
  return target;
}

namespace {

nlohmann::json read_manifest(const std::filesystem::path& dir, const char* kind) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing manifest.json in " + dir.string());
  const auto j = nlohmann::json::parse(in);
  if (j.value("kind", "") != kind)
    throw std::runtime_error(fmt::format("{} is not a {} directory", dir.string(), kind));
  return j;
}

void write_manifest(const std::filesystem::path& dir, const nlohmann::json& j) {
  std::ofstream out(dir / "manifest.json");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
}

}  // namespace

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = {{"kind", "corpus"}, {"version", 1}, {"feature_dim", corpus.feature_dim},
                      {"fps", kVideoFps}, {"audio_rate", kAudioRate}};
  auto& list = j["utterances"] = nlohmann::json::array();
  for (const auto& u : corpus.utterances) {
    write_features(dir / (u.id + ".feat"), u.audio);
    write_landmarks(dir / (u.id + ".trlm"), u.landmarks);
    list.push_back({{"id", u.id}, {"speaker", u.speaker}, {"split", u.split}, {"frames", u.landmarks.frames()},
                    {"features", u.id + ".feat"}, {"landmarks", u.id + ".trlm"}});
  }
  write_manifest(dir, j);
}

Corpus load_corpus(const std::filesystem::path& dir) {
  const auto j = read_manifest(dir, "corpus");
  Corpus corpus;
  corpus.feature_dim = j.at("feature_dim").get<std::size_t>();
  for (const auto& e : j.at("utterances")) {
    Utterance u;
    u.id = e.at("id").get<std::string>();
    u.speaker = e.at("speaker").get<std::size_t>();
    u.split = e.at("split").get<std::string>();
    u.audio = read_features(dir / e.at("features").get<std::string>());
    u.landmarks = read_landmarks(dir / e.at("landmarks").get<std::string>());
    check_aligned(u.audio, u.landmarks, "load_corpus");
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

void save_target(const std::filesystem::path& dir, const TargetDomain& target, const DomainShift* shift) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = {{"kind", "target"}, {"version", 1}, {"scene", scene_to_json(target.scene)}};
  auto& list = j["utterances"] = nlohmann::json::array();
  const std::size_t pixels = target.scene.camera.width * target.scene.camera.height;
  for (const auto& u : target.utterances) {
    write_features(dir / (u.id + ".feat"), u.audio);
    write_landmarks(dir / (u.id + ".trlm"), u.landmarks);
    write_poses(dir / (u.id + ".pose"), u.poses);
    const auto frame_dir = std::filesystem::path("frames") / u.id;
    std::vector<double> ids;
    ids.reserve(u.frames.size() * pixels);
    for (std::size_t f = 0; f < u.frames.size(); ++f) {
      write_png(dir / frame_dir / fmt::format("{:06d}.png", f), u.frames[f].image);
      for (auto id : u.frames[f].objects) ids.push_back(static_cast<double>(id));
    }
    Container objects;
    objects.metadata["kind"] = "objects";
    objects.put("objects", {u.frames.size(), pixels}, std::move(ids), DType::F32);
    objects.save(dir / (u.id + ".obj"));
    list.push_back({{"id", u.id}, {"split", u.split}, {"frames", u.landmarks.frames()}, {"rendered", u.frames.size()},
                    {"features", u.id + ".feat"}, {"landmarks", u.id + ".trlm"}, {"poses", u.id + ".pose"},
                    {"objects", u.id + ".obj"}, {"frame_dir", frame_dir.string()}});
  }
  write_manifest(dir, j);
  if (shift) {
    Container c;
    c.metadata["kind"] = "domain-shift";
    c.metadata["note"] = "evaluation only";
    const Eigen::Matrix<double, 3, 3, Eigen::RowMajor> a = shift->A;
    c.put("A", {3, 3}, std::vector<double>(a.data(), a.data() + 9));
    c.put("b", {kLandmarkPoints, 3}, shift->b);
    c.save(dir / "eval" / "shift.trfc");
  }
}

TargetDomain load_target(const std::filesystem::path& dir) {
  const auto j = read_manifest(dir, "target");
  TargetDomain target;
  target.scene = scene_from_json(j.at("scene"));
  const std::size_t pixels = target.scene.camera.width * target.scene.camera.height;
  for (const auto& e : j.at("utterances")) {
    TargetUtterance u;
    u.id = e.at("id").get<std::string>();
    u.split = e.at("split").get<std::string>();
    u.audio = read_features(dir / e.at("features").get<std::string>());
    u.landmarks = read_landmarks(dir / e.at("landmarks").get<std::string>());
    u.poses = read_poses(dir / e.at("poses").get<std::string>());
    check_aligned(u.audio, u.landmarks, "load_target");
    if (u.poses.size() != u.landmarks.frames()) throw std::runtime_error("load_target: pose count mismatch for " + u.id);
    const auto rendered = e.at("rendered").get<std::size_t>();
    const auto objects = Container::load(dir / e.at("objects").get<std::string>());
    const auto& ids = objects.get("objects");
    if (ids.shape != Shape{rendered, pixels}) throw std::runtime_error("load_target: object map shape for " + u.id);
    const std::filesystem::path frame_dir = dir / e.at("frame_dir").get<std::string>();
    for (std::size_t f = 0; f < rendered; ++f) {
      GroundTruthFrame g;
      g.image = read_png(frame_dir / fmt::format("{:06d}.png", f));
      if (g.image.pixels() != pixels) throw std::runtime_error("load_target: frame size mismatch in " + u.id);
      g.objects.resize(pixels);
      for (std::size_t p = 0; p < pixels; ++p) g.objects[p] = static_cast<ObjectId>(ids.values[f * pixels + p]);
      u.frames.push_back(std::move(g));
    }
    target.utterances.push_back(std::move(u));
  }
  return target;
}

DomainShift load_domain_shift(const std::filesystem::path& dir) {
  const auto c = Container::load(dir / "eval" / "shift.trfc");
  DomainShift s;
  const auto& a = c.get("A").values;
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) s.A(r, k) = a[r * 3 + k];
  s.b = c.get("b").values;
  s.validate();
  return s;
}

}  // namespace talkrf
