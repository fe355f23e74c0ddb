#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "talkrf/corpus.hpp"
#include "talkrf/motion_vae.hpp"
#include "talkrf/nerf.hpp"
#include "talkrf/postnet.hpp"
#include "talkrf/scene.hpp"
#include "talkrf/sync_expert.hpp"

namespace talkrf {

/// The unseen target speaker and the landmark shift injected into it.
struct TargetOptions {
  std::size_t utterances = 8;
  std::size_t frames = 200;
  double shift_scale = 0.08;
  double shift_angle = 0.1;
  double shift_offset = 0.15;

  void validate() const;
  nlohmann::json to_json() const;
  static TargetOptions from_json(const nlohmann::json& j);
};

struct RunOptions {
  std::uint64_t seed = 1;
  /// Every n-th frame is rendered when scoring images.
  std::size_t render_stride = 10;
  /// Frames written by the render stage per held-out utterance (0 = all).
  std::size_t render_frames = 0;
  /// Sampling temperature of motion inference.
  double temperature = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  static RunOptions from_json(const nlohmann::json& j);
};

nlohmann::json corpus_options_to_json(const CorpusOptions& o);
CorpusOptions corpus_options_from_json(const nlohmann::json& j);

/// Every stage configuration of one run. INI sections: run, corpus, target,
/// scene, sync, vae, postnet, nerf; keys are the field names.
struct RunConfig {
  RunOptions run;
  CorpusOptions corpus;
  TargetOptions target;
  SceneSpec scene;
  SyncExpertConfig sync;
  MotionVAEConfig vae;
  PostNetConfig postnet;
  NerfConfig nerf;

  nlohmann::json to_json() const;
  std::string to_ini() const;
  static RunConfig from_json(const nlohmann::json& j);
};

/// All problems found in a config file, one message per key.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> errors);
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

/// Parses INI text over the defaults. Unknown sections or keys, malformed
/// values and failed invariants are all reported together. `overrides` are
/// "section.key=value" strings applied after the file.
RunConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {});
RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

}  // namespace talkrf
