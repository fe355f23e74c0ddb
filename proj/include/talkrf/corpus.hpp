#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "talkrf/geometry.hpp"
#include "talkrf/rng.hpp"
#include "talkrf/scene.hpp"
#include "talkrf/tensor.hpp"

namespace talkrf {

inline constexpr double kAudioRate = 50.0;

/// T_a x D acoustic features at 50 Hz; two feature frames per video frame.
class AudioFeatures {
 public:
  AudioFeatures() = default;
  AudioFeatures(std::size_t frames, std::size_t dim, double rate = kAudioRate)
      : frames_(frames), dim_(dim), rate_(rate), values_(frames * dim, 0.0) {}
  AudioFeatures(std::size_t frames, std::size_t dim, std::vector<double> values, double rate = kAudioRate);

  std::size_t frames() const { return frames_; }
  std::size_t dim() const { return dim_; }
  double rate() const { return rate_; }
  double& at(std::size_t t, std::size_t d) { return values_[t * dim_ + d]; }
  double at(std::size_t t, std::size_t d) const { return values_[t * dim_ + d]; }
  std::span<const double> row(std::size_t t) const { return {values_.data() + t * dim_, dim_}; }
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

  /// [1, T_a, D]
  Tensor to_tensor() const;
  /// Frames [start, start + count).
  AudioFeatures window(std::size_t start, std::size_t count) const;

  bool operator==(const AudioFeatures&) const = default;

 private:
  std::size_t frames_ = 0;
  std::size_t dim_ = 0;
  double rate_ = kAudioRate;
  std::vector<double> values_;
};

/// Throws unless the audio has exactly two frames per landmark frame.
void check_aligned(const AudioFeatures& audio, const LandmarkSequence& landmarks, const char* who);

/// Container file with a "features" [T_a, D] record. Files ending in .csv or
/// .txt are read as one comma- or space-separated row per feature frame, which
/// is the path for externally computed features.
void write_features(const std::filesystem::path& path, const AudioFeatures& audio);
AudioFeatures read_features(const std::filesystem::path& path);

struct CorpusOptions {
  std::size_t speakers = 32;
  std::size_t utterances = 8;
  std::size_t frames = 200;
  std::size_t feature_dim = 64;
  std::size_t phonemes = 24;
  std::size_t vertices = 468;
  std::size_t identity_dims = 16;
  std::size_t expression_dims = 16;
  /// Audio frames per phoneme segment.
  std::size_t min_segment = 6;
  std::size_t max_segment = 20;
  double phoneme_scale = 0.5;
  double noise_scale = 0.1;
  /// Spectral norm of every articulation map.
  double articulation_gain = 1.0;
  /// Share of the speaker-specific part of the articulation map.
  double speaker_variation = 0.3;
  /// Output saturation: kappa * tanh(W a / kappa).
  double saturation = 0.3;
  double identity_scale = 0.5;
  /// Minimum pairwise L2 distance between identity offsets.
  double offset_separation = 0.3;
  double smoothing_sigma = 1.0;

  void validate() const;
};

/// Shared ingredients of every synthetic speaker.
struct CorpusWorld {
  CorpusOptions options;
  MeshBasis basis;
  LandmarkIndexSet index;
  /// phonemes x D prototypes.
  std::vector<double> prototypes;
  /// K_e x D articulation common to all speakers.
  std::vector<double> common_articulation;
};

CorpusWorld make_world(const CorpusOptions& options, std::uint64_t seed);

struct SpeakerProfile {
  std::size_t id = 0;
  /// 204 x D, spectral norm equal to the configured gain.
  std::vector<double> articulation;
  std::size_t feature_dim = 0;
  double saturation = 1.0;
  double smoothing_sigma = 1.0;
  /// 204 mean-relative landmark offsets from the identity code.
  std::vector<double> offset;

  /// smooth(kappa * tanh(W abar / kappa)) + offset, abar averaging audio frame pairs.
  LandmarkSequence articulate(const AudioFeatures& audio) const;
  double spectral_norm() const;
};

SpeakerProfile make_speaker(const CorpusWorld& world, std::size_t id, Rng& rng);
/// Phoneme-segment features for `video_frames` frames (2x as many audio frames).
AudioFeatures synth_audio(const CorpusWorld& world, std::size_t video_frames, Rng& rng);

struct Utterance {
  std::string id;
  std::size_t speaker = 0;
  std::string split = "train";
  AudioFeatures audio;
  LandmarkSequence landmarks;
};

struct Corpus {
  std::size_t feature_dim = 0;
  std::vector<Utterance> utterances;
  /// Present after generation only; not persisted.
  std::vector<SpeakerProfile> speakers;

  std::vector<const Utterance*> split(const std::string& name) const;
  std::vector<LandmarkSequence> landmarks(const std::string& split_name) const;
};

/// Speakers are drawn with pairwise identity offsets at least
/// `offset_separation` apart. The last utterance of each speaker is held out.
Corpus gen_corpus(const CorpusOptions& options, std::uint64_t seed);
/// Utterances of one speaker, named "<prefix>_<k>".
std::vector<Utterance> gen_speaker_utterances(const CorpusWorld& world, const SpeakerProfile& speaker,
                                              std::size_t count, std::size_t frames, Rng& rng,
                                              const std::string& prefix);
/// Utterances of a speaker outside the corpus (same world as gen_corpus with
/// this seed), named "target_<k>".
std::vector<Utterance> gen_unseen_speaker(const CorpusOptions& options, std::uint64_t seed, std::size_t count,
                                          std::size_t frames);

/// Point-wise affine shift l' = A l + b between landmark domains.
struct DomainShift {
  Mat3 A = Mat3::Identity();
  /// 68 x 3 per-point offsets, flattened.
  std::vector<double> b = std::vector<double>(kLandmarkDim, 0.0);

  void validate() const;
  LandmarkSequence apply(const LandmarkSequence& seq) const;
  std::vector<double> apply_frame(std::span<const double> frame) const;
  /// Mild scale/rotation and an offset of size `offset` per coordinate.
  static DomainShift random(Rng& rng, double scale = 0.08, double angle = 0.1, double offset = 0.15);
};

struct TargetUtterance {
  std::string id;
  std::string split = "train";
  AudioFeatures audio;
  /// Shifted landmarks in the raw (de-normalized) space.
  LandmarkSequence landmarks;
  std::vector<HeadPose> poses;
  std::vector<GroundTruthFrame> frames;
};

struct TargetDomain {
  SceneSpec scene;
  std::vector<TargetUtterance> utterances;

  std::vector<const TargetUtterance*> split(const std::string& name) const;
};

/// Applies `shift` to the subset, draws a continuous head-pose track, fits the
/// scene's mouth mapping to the shifted data, and renders every frame. The last
/// utterance is held out.
TargetDomain gen_target_domain(std::span<const Utterance> subset, const DomainShift& shift,
                               const SceneSpec& base_scene, std::uint64_t seed, bool render = true);

/// Directory layout: manifest.json, <id>.feat (features), <id>.trlm (landmarks).
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

/// Directory layout: manifest.json (scene and utterances), per utterance
/// features, landmarks, poses, object ids and frames/<id>/NNNNNN.png. The shift
/// goes to eval/shift.trfc and is never read by load_target.
void save_target(const std::filesystem::path& dir, const TargetDomain& target, const DomainShift* shift);
TargetDomain load_target(const std::filesystem::path& dir);
DomainShift load_domain_shift(const std::filesystem::path& dir);

}  // namespace talkrf
