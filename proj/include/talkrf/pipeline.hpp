#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "talkrf/config.hpp"

namespace talkrf {

enum class Stage {
  GenData,
  TrainSync,
  TrainVae,
  TrainPostnet,
  TrainNerfHead,
  TrainNerfTorso,
  InferMotion,
  Render,
  Metrics,
};

inline constexpr Stage kAllStages[] = {Stage::GenData,       Stage::TrainSync,      Stage::TrainVae,
                                       Stage::TrainPostnet,  Stage::TrainNerfHead,  Stage::TrainNerfTorso,
                                       Stage::InferMotion,   Stage::Render,         Stage::Metrics};

const char* stage_name(Stage s);
/// Accepts stage names; "train-nerf" means the head stage.
std::optional<Stage> parse_stage(const std::string& name);
/// Stages whose outputs `s` reads.
std::vector<Stage> stage_inputs(Stage s);

/// A failed stage: its name and the last log lines it produced.
class StageError : public std::runtime_error {
 public:
  StageError(Stage stage, const std::string& what, std::vector<std::string> tail);
  Stage stage() const { return stage_; }
  const std::vector<std::string>& tail() const { return tail_; }

 private:
  Stage stage_;
  std::vector<std::string> tail_;
};

/// Runs stages inside one run directory. Stage outputs live in
/// <root>/<stage>-<hash>, where the hash covers the seed, the config sections
/// the stage reads and the hashes of its inputs. A stage directory with a
/// done.json marker is complete and is reused.
class Pipeline {
 public:
  using Sink = std::function<void(const std::string&)>;

  Pipeline(RunConfig config, std::filesystem::path root, Sink sink = {});

  const RunConfig& config() const { return config_; }
  const std::filesystem::path& root() const { return root_; }

  std::string stage_hash(Stage s) const;
  std::filesystem::path stage_dir(Stage s) const;
  bool completed(Stage s) const;
  std::uint64_t stage_seed(Stage s) const;

  /// Runs one stage; inputs must be complete. A complete stage is skipped
  /// unless `force`.
  void run_stage(Stage s, bool force = false);
  /// Every stage in order. Complete stages are reused, except `from` and
  /// everything after it, which are rerun (earlier stages must then exist).
  void run_all(std::optional<Stage> from = std::nullopt);

  nlohmann::json stage_report(Stage s) const;

 private:
  void execute(Stage s);
  void log_line(const std::string& line);
  void record(Stage s, const std::string& status, double seconds);

  RunConfig config_;
  std::filesystem::path root_;
  Sink sink_;
  std::deque<std::string> tail_;
};

/// Post-net refinement of raw landmarks, in the VAE's normalized space.
LandmarkSequence refine_motion(const PostNet& postnet, const MotionVAE& vae, const LandmarkSequence& raw);

/// Writes <dir>/NNNNNN.png for the first `limit` frames (0 = all). Returns the count.
std::size_t render_sequence(const HeadModel& head, const TorsoModel* torso, const LandmarkSequence& raw,
                            std::span<const HeadPose> poses, const std::filesystem::path& dir, std::size_t limit = 0);

/// lmd and landmark_l2 against `gt`, plus sync confidence when an expert is given.
nlohmann::json landmark_report(const LandmarkSequence& pred, const LandmarkSequence& gt,
                               const AudioFeatures* audio = nullptr, SyncExpert* sync = nullptr);

}  // namespace talkrf
