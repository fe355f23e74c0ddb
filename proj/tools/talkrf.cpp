// talkrf: command-line driver for the talking-portrait pipeline.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "talkrf/metrics.hpp"
#include "talkrf/pipeline.hpp"

namespace fs = std::filesystem;
using namespace talkrf;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/default";
  std::vector<std::string> overrides;
  bool force = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "INI config file (defaults apply to anything missing)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Run seed (overrides [run] seed)");
  cmd->add_option("--out", c.out, "Run directory")->capture_default_str();
  cmd->add_option("--set", c.overrides, "Config override section.key=value (repeatable)");
  cmd->add_flag("--force", c.force, "Rerun even if the stage checkpoint exists");
  cmd->add_flag("-q,--quiet", c.quiet, "Only print errors and the final summary");
}

RunConfig resolve_config(const Common& c) {
  RunConfig config = c.config.empty() ? parse_config("", c.overrides) : load_config(c.config, c.overrides);
  if (c.seed) config.run.seed = *c.seed;
  return config;
}

Pipeline make_pipeline(const Common& c) {
  auto config = resolve_config(c);
  fs::create_directories(c.out);
  std::ofstream(fs::path(c.out) / "config.ini") << config.to_ini();
  Pipeline::Sink sink;
  if (!c.quiet) sink = [](const std::string& line) { std::cerr << line << "\n"; };
  return Pipeline(std::move(config), c.out, sink);
}

void run_one(const Common& c, Stage s) {
  auto p = make_pipeline(c);
  p.run_stage(s, c.force);
  std::cout << p.stage_dir(s).string() << "\n";
}

void write_report(const std::string& path, const nlohmann::json& j) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-driven talking-portrait pipeline"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus and the target-speaker scene");
  add_common(gen, common);
  auto* sync = app.add_subcommand("train-syncexpert", "Train the landmark/audio sync expert");
  add_common(sync, common);
  auto* vae = app.add_subcommand("train-vae", "Train the motion VAE with its flow prior");
  add_common(vae, common);
  auto* postnet = app.add_subcommand("train-postnet", "Adapt the post-net to the target speaker");
  add_common(postnet, common);

  auto* nerf = app.add_subcommand("train-nerf", "Train the head or the torso radiance field");
  add_common(nerf, common);
  std::string nerf_stage = "head";
  nerf->add_option("--stage", nerf_stage, "head or torso")->check(CLI::IsMember({"head", "torso"}))->capture_default_str();

  auto* infer = app.add_subcommand("infer-motion", "Generate landmarks from audio");
  add_common(infer, common);
  std::string audio_path, output_path, vae_path, postnet_path;
  double temperature = 0.0;
  std::uint64_t sample_seed = 0;
  infer->add_option("--audio", audio_path, "Standalone: audio feature file (.feat)")->check(CLI::ExistingFile);
  infer->add_option("--output", output_path, "Standalone: landmark output (.trlm)");
  infer->add_option("--vae", vae_path, "Standalone: VAE checkpoint")->check(CLI::ExistingFile);
  infer->add_option("--postnet", postnet_path, "Standalone: refine with this post-net checkpoint")->check(CLI::ExistingFile);
  infer->add_option("--temperature", temperature, "Standalone: prior sampling temperature")->capture_default_str();
  infer->add_option("--sample-seed", sample_seed, "Standalone: sampling seed")->capture_default_str();

  auto* render = app.add_subcommand("render", "Render frames from landmarks and head poses");
  add_common(render, common);
  std::string lm_path, poses_path, frames_dir, head_path, torso_path;
  std::size_t limit = 0;
  render->add_option("--landmarks", lm_path, "Standalone: raw landmarks (.trlm)")->check(CLI::ExistingFile);
  render->add_option("--poses", poses_path, "Standalone: head poses")->check(CLI::ExistingFile);
  render->add_option("--frames", frames_dir, "Standalone: output directory for PNG frames");
  render->add_option("--head", head_path, "Standalone: head field checkpoint")->check(CLI::ExistingFile);
  render->add_option("--torso", torso_path, "Standalone: torso field checkpoint (head only if omitted)")
      ->check(CLI::ExistingFile);
  render->add_option("--limit", limit, "Standalone: frames to render (0 = all)")->capture_default_str();

  auto* metrics = app.add_subcommand("metrics", "Score generated landmarks and renders");
  add_common(metrics, common);
  std::string pred_path, gt_path, sync_path, report_path, feat_path;
  metrics->add_option("--pred", pred_path, "Standalone: predicted landmarks (.trlm)")->check(CLI::ExistingFile);
  metrics->add_option("--gt", gt_path, "Standalone: ground-truth landmarks (.trlm)")->check(CLI::ExistingFile);
  metrics->add_option("--sync", sync_path, "Standalone: sync expert checkpoint")->check(CLI::ExistingFile);
  metrics->add_option("--audio", feat_path, "Standalone: audio features for sync confidence")->check(CLI::ExistingFile);
  metrics->add_option("--report", report_path, "Standalone: JSON output path (stdout if omitted)");

  auto* all = app.add_subcommand("run-all", "Run every stage, reusing completed checkpoints");
  add_common(all, common);
  std::string from_stage;
  all->add_option("--from-stage", from_stage, "Rerun this stage and everything after it");

  auto* show = app.add_subcommand("show-config", "Print the resolved config as INI");
  add_common(show, common);

  CLI11_PARSE(app, argc, argv);

  try {
    if (show->parsed()) std::cout << resolve_config(common).to_ini();
    if (gen->parsed()) run_one(common, Stage::GenData);
    if (sync->parsed()) run_one(common, Stage::TrainSync);
    if (vae->parsed()) run_one(common, Stage::TrainVae);
    if (postnet->parsed()) run_one(common, Stage::TrainPostnet);
    if (nerf->parsed()) run_one(common, nerf_stage == "head" ? Stage::TrainNerfHead : Stage::TrainNerfTorso);

    if (infer->parsed()) {
      if (audio_path.empty()) {
        run_one(common, Stage::InferMotion);
      } else {
        if (output_path.empty() || vae_path.empty()) throw CLI::ValidationError("--audio needs --output and --vae");
        const auto model = MotionVAE::load(vae_path);
        auto lm = model->generate(read_features(audio_path), temperature, sample_seed);
        if (!postnet_path.empty()) lm = refine_motion(*PostNet::load(postnet_path), *model, lm);
        write_landmarks(output_path, lm);
        std::cout << output_path << "\n";
      }
    }

    if (render->parsed()) {
      if (lm_path.empty()) {
        run_one(common, Stage::Render);
      } else {
        if (poses_path.empty() || frames_dir.empty() || head_path.empty())
          throw CLI::ValidationError("--landmarks needs --poses, --frames and --head");
        const auto head = HeadModel::load(head_path);
        std::optional<TorsoModel> torso;
        if (!torso_path.empty()) torso = TorsoModel::load(torso_path);
        const auto poses = read_poses(poses_path);
        const auto n = render_sequence(head, torso ? &*torso : nullptr, read_landmarks(lm_path), poses, frames_dir, limit);
        std::cout << fmt::format("{} frames -> {}\n", n, frames_dir);
      }
    }

    if (metrics->parsed()) {
      if (pred_path.empty()) {
        run_one(common, Stage::Metrics);
      } else {
        if (gt_path.empty()) throw CLI::ValidationError("--pred needs --gt");
        std::unique_ptr<SyncExpert> expert;
        std::optional<AudioFeatures> audio;
        if (!sync_path.empty() || !feat_path.empty()) {
          if (sync_path.empty() || feat_path.empty()) throw CLI::ValidationError("--sync and --audio go together");
          expert = SyncExpert::load(sync_path);
          audio = read_features(feat_path);
        }
        write_report(report_path, landmark_report(read_landmarks(pred_path), read_landmarks(gt_path),
                                                  audio ? &*audio : nullptr, expert.get()));
      }
    }

    if (all->parsed()) {
      std::optional<Stage> from;
      if (!from_stage.empty()) {
        from = parse_stage(from_stage);
        if (!from) throw CLI::ValidationError("--from-stage", "unknown stage '" + from_stage + "'");
      }
      auto p = make_pipeline(common);
      p.run_all(from);
      std::cout << (p.stage_dir(Stage::Metrics) / "metrics.json").string() << "\n";
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
