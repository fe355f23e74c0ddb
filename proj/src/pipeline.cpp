#include "talkrf/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "talkrf/metrics.hpp"

namespace talkrf {

namespace {

constexpr std::size_t kTailLines = 20;

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return nlohmann::json::parse(in);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

nlohmann::json without(nlohmann::json j, std::initializer_list<const char*> keys) {
  for (const char* k : keys) j.erase(k);
  return j;
}

// JSON has no infinity; identical images are reported as the string "inf".
nlohmann::json psnr_json(double v) { return std::isinf(v) ? nlohmann::json("inf") : nlohmann::json(v); }

std::vector<const TargetUtterance*> heldout_target(const TargetDomain& target) {
  auto u = target.split("test");
  if (u.empty()) throw std::runtime_error("target has no held-out utterances");
  return u;
}

}  // namespace

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::GenData: return "gen-data";
    case Stage::TrainSync: return "train-syncexpert";
    case Stage::TrainVae: return "train-vae";
    case Stage::TrainPostnet: return "train-postnet";
    case Stage::TrainNerfHead: return "train-nerf-head";
    case Stage::TrainNerfTorso: return "train-nerf-torso";
    case Stage::InferMotion: return "infer-motion";
    case Stage::Render: return "render";
    case Stage::Metrics: return "metrics";
  }
  return "?";
}

std::optional<Stage> parse_stage(const std::string& name) {
  if (name == "train-nerf") return Stage::TrainNerfHead;
  for (Stage s : kAllStages)
    if (name == stage_name(s)) return s;
  return std::nullopt;
}

std::vector<Stage> stage_inputs(Stage s) {
  switch (s) {
    case Stage::GenData: return {};
    case Stage::TrainSync: return {Stage::GenData};
    case Stage::TrainVae: return {Stage::GenData, Stage::TrainSync};
    case Stage::TrainPostnet: return {Stage::GenData, Stage::TrainSync, Stage::TrainVae};
    case Stage::TrainNerfHead: return {Stage::GenData};
    case Stage::TrainNerfTorso: return {Stage::GenData, Stage::TrainNerfHead};
    case Stage::InferMotion: return {Stage::GenData, Stage::TrainVae, Stage::TrainPostnet};
    case Stage::Render: return {Stage::GenData, Stage::TrainNerfHead, Stage::TrainNerfTorso, Stage::InferMotion};
    case Stage::Metrics:
      return {Stage::GenData,        Stage::TrainSync,   Stage::TrainVae, Stage::TrainPostnet, Stage::TrainNerfHead,
              Stage::TrainNerfTorso, Stage::InferMotion, Stage::Render};
  }
  return {};
}

StageError::StageError(Stage stage, const std::string& what, std::vector<std::string> tail)
    : std::runtime_error([&] {
        std::string msg = fmt::format("stage {} failed: {}", stage_name(stage), what);
        if (!tail.empty()) msg += "\nlast log lines:";
        for (const auto& l : tail) msg += "\n  " + l;
        return msg;
      }()),
      stage_(stage),
      tail_(std::move(tail)) {}

Pipeline::Pipeline(RunConfig config, std::filesystem::path root, Sink sink)
    : config_(std::move(config)), root_(std::move(root)), sink_(std::move(sink)) {}

std::string Pipeline::stage_hash(Stage s) const {
  const auto& c = config_;
  nlohmann::json key;
  switch (s) {
    case Stage::GenData:
      key = {{"corpus", corpus_options_to_json(c.corpus)}, {"target", c.target.to_json()}, {"scene", scene_to_json(c.scene)}};
      break;
    case Stage::TrainSync: key = c.sync.to_json(); break;
    case Stage::TrainVae: key = c.vae.to_json(); break;
    case Stage::TrainPostnet: key = c.postnet.to_json(); break;
    case Stage::TrainNerfHead: key = without(c.nerf.to_json(), {"head_aware", "torso_steps"}); break;
    case Stage::TrainNerfTorso: key = without(c.nerf.to_json(), {"head_steps"}); break;
    case Stage::InferMotion: key = {{"temperature", c.run.temperature}}; break;
    case Stage::Render: key = {{"render_frames", c.run.render_frames}}; break;
    case Stage::Metrics: key = {{"render_stride", c.run.render_stride}}; break;
  }
  key["stage"] = stage_name(s);
  key["seed"] = c.run.seed;
  for (Stage in : stage_inputs(s)) key["inputs"].push_back(stage_hash(in));
  return fmt::format("{:016x}", fnv1a(key.dump()));
}

std::filesystem::path Pipeline::stage_dir(Stage s) const {
  return root_ / fmt::format("{}-{}", stage_name(s), stage_hash(s));
}

bool Pipeline::completed(Stage s) const { return std::filesystem::exists(stage_dir(s) / "done.json"); }

std::uint64_t Pipeline::stage_seed(Stage s) const {
  return fnv1a(stage_name(s), 0xcbf29ce484222325ULL ^ (config_.run.seed * 0x9e3779b97f4a7c15ULL));
}

nlohmann::json Pipeline::stage_report(Stage s) const { return read_json(stage_dir(s) / "report.json"); }

void Pipeline::log_line(const std::string& line) {
  tail_.push_back(line);
  while (tail_.size() > kTailLines) tail_.pop_front();
  if (sink_) sink_(line);
}

void Pipeline::record(Stage s, const std::string& status, double seconds) {
  std::filesystem::create_directories(root_);
  const auto path = root_ / "manifest.json";
  nlohmann::json m = std::filesystem::exists(path) ? read_json(path) : nlohmann::json::object();
  m["seed"] = config_.run.seed;
  m["config_hash"] = fmt::format("{:016x}", fnv1a(config_.to_json().dump()));
  m["config"] = config_.to_json();
  const auto dir = stage_dir(s).filename().string();
  m["stages"][dir] = {{"stage", stage_name(s)},
                      {"hash", stage_hash(s)},
                      {"seed", stage_seed(s)},
                      {"status", status},
                      {"seconds", seconds}};
  write_json(path, m);
}

void Pipeline::run_stage(Stage s, bool force) {
  if (completed(s) && !force) {
    log_line(fmt::format("{}: complete, reusing {}", stage_name(s), stage_dir(s).string()));
    return;
  }
  for (Stage in : stage_inputs(s))
    if (!completed(in))
      throw StageError(s, fmt::format("input stage {} has not completed (expected {})", stage_name(in), stage_dir(in).string()),
                       {});
  tail_.clear();
  const auto start = std::chrono::steady_clock::now();
  const auto seconds = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  log_line(fmt::format("{}: running in {}", stage_name(s), stage_dir(s).string()));
  try {
    execute(s);
  } catch (const StageError&) {
    record(s, "failed", seconds());
    throw;
  } catch (const std::exception& e) {
    record(s, "failed", seconds());
    throw StageError(s, e.what(), {tail_.begin(), tail_.end()});
  }
  record(s, "complete", seconds());
  log_line(fmt::format("{}: done in {:.1f}s", stage_name(s), seconds()));
}

void Pipeline::run_all(std::optional<Stage> from) {
  bool rerun = false;
  for (Stage s : kAllStages) {
    if (from && s == *from) rerun = true;
    if (from && !rerun && !completed(s))
      throw StageError(s, fmt::format("--from-stage {} needs a completed {} checkpoint", stage_name(*from), stage_name(s)), {});
    run_stage(s, rerun);
  }
}

void Pipeline::execute(Stage s) {
  const auto dir = stage_dir(s);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  std::ofstream log_file(dir / "log.jsonl");
  const TrainLog log = [&](const nlohmann::json& rec) {
    const auto line = rec.dump();
    log_file << line << "\n";
    log_file.flush();
    log_line(line);
  };
  const auto& c = config_;
  const std::uint64_t seed = stage_seed(s);
  const auto data_dir = stage_dir(Stage::GenData);
  nlohmann::json report;

  switch (s) {
    case Stage::GenData: {
      const Corpus corpus = gen_corpus(c.corpus, seed);
      save_corpus(dir / "corpus", corpus);
      const auto subset = gen_unseen_speaker(c.corpus, seed, c.target.utterances, c.target.frames);
      Rng shift_rng(seed ^ 0x5a17);
      const auto shift = DomainShift::random(shift_rng, c.target.shift_scale, c.target.shift_angle, c.target.shift_offset);
      const TargetDomain target = gen_target_domain(subset, shift, c.scene, seed + 1, true);
      save_target(dir / "target", target, &shift);
      report = {{"corpus_utterances", corpus.utterances.size()},
                {"target_utterances", target.utterances.size()},
                {"target_frames", c.target.frames}};
      break;
    }
    case Stage::TrainSync: {
      const Corpus corpus = load_corpus(data_dir / "corpus");
      SyncExpert expert(c.sync, seed);
      const auto r = train_sync_expert(expert, corpus, seed + 1, log);
      expert.save(dir / "sync.trfc");
      const auto heldout = corpus.split("test");
      nlohmann::json decay;
      for (std::size_t shift : {0u, 5u, 20u})
        decay[std::to_string(shift)] = mean_sync_prob(expert, shifted_pairs(heldout, c.sync.window, shift, 1));
      report = {{"accuracy", r.heldout.accuracy},
                {"flipped_accuracy", r.heldout.flipped_accuracy},
                {"mean_loss", r.heldout.mean_loss},
                {"windows", r.heldout.windows},
                {"shift_prob", decay},
                {"final_loss", r.losses.empty() ? 0.0 : r.losses.back()}};
      break;
    }
    case Stage::TrainVae: {
      const Corpus corpus = load_corpus(data_dir / "corpus");
      auto sync = SyncExpert::load(stage_dir(Stage::TrainSync) / "sync.trfc");
      MotionVAE vae(c.vae, seed);
      const auto r = train_motion_vae(vae, corpus, sync.get(), seed + 1, log);
      vae.save(dir / "vae.trfc");
      const auto& audio = corpus.split("test").front()->audio;
      const bool deterministic = vae.generate(audio, 0.0, 1) == vae.generate(audio, 0.0, 2);
      const bool diverse = !(vae.generate(audio, 1.0, 1) == vae.generate(audio, 1.0, 2));
      report = {{"heldout_mse", r.heldout_mse},
                {"heldout_variance", r.heldout_variance},
                {"heldout_ratio", r.heldout_mse / r.heldout_variance},
                {"steps", c.vae.steps},
                {"final_reconstruction", r.reconstruction.empty() ? 0.0 : r.reconstruction.back()},
                {"temperature0_deterministic", deterministic},
                {"temperature1_seeds_differ", diverse}};
      break;
    }
    case Stage::TrainPostnet: {
      const Corpus corpus = load_corpus(data_dir / "corpus");
      const TargetDomain target = load_target(data_dir / "target");
      auto sync = SyncExpert::load(stage_dir(Stage::TrainSync) / "sync.trfc");
      sync->params().set_requires_grad(false);
      const auto vae = MotionVAE::load(stage_dir(Stage::TrainVae) / "vae.trfc");
      const auto data = prepare_adaptation_data(*vae, corpus, target, "train");
      PostNet postnet(c.postnet, seed);
      Discriminator disc(c.postnet, seed + 1);
      train_adaptation(postnet, disc, data, frozen_scorer(*sync), seed + 2, log);
      postnet.save(dir / "postnet.trfc");
      disc.save(dir / "discriminator.trfc");
      report = evaluate_adaptation(postnet, disc, *vae, *sync, corpus, target).to_json();
      break;
    }
    case Stage::TrainNerfHead: {
      const auto data = NerfDataset::from_target(load_target(data_dir / "target"), "train");
      auto head = make_head_model(c.nerf, data, seed);
      const auto r = train_nerf_head(head, data, seed + 1, log);
      head.save(dir / "head.trfc");
      report = {{"steps", r.losses.size()}, {"final_loss", r.losses.empty() ? 0.0 : r.losses.back()}};
      break;
    }
    case Stage::TrainNerfTorso: {
      const TargetDomain target = load_target(data_dir / "target");
      const auto train = NerfDataset::from_target(target, "train");
      const auto test = NerfDataset::from_target(target, "test");
      const auto head = HeadModel::load(stage_dir(Stage::TrainNerfHead) / "head.trfc");
      auto torso = make_torso_model(c.nerf, train.scene, seed);
      const auto r = train_nerf_torso(torso, head, train, seed + 1, log);
      torso.save(dir / "torso.trfc");
      const auto heldin = score_renders(head, &torso, train, c.run.render_stride);
      const auto heldout = score_renders(head, &torso, test, c.run.render_stride);
      bool transparent = true;
      RenderOptions clear;
      clear.torso_transparent = true;
      for (std::size_t f = 0; f < test.frames[0].size(); f += c.run.render_stride) {
        const auto cond = landmark_condition(test.landmarks[0], f, head.condition_stats);
        const auto out = render_frame(head, &torso, cond, test.poses[0][f], clear);
        transparent = transparent && out.full == out.head;
      }
      report = {{"head_aware", c.nerf.head_aware},
                {"steps", r.losses.size()},
                {"final_loss", r.losses.empty() ? 0.0 : r.losses.back()},
                {"heldin_mse", heldin.mse},
                {"heldin_psnr", psnr_json(heldin.psnr)},
                {"heldin_frames", heldin.frames},
                {"heldout_mse", heldout.mse},
                {"heldout_psnr", psnr_json(heldout.psnr)},
                {"heldout_frames", heldout.frames},
                {"heldout_overlap_mse", heldout.overlap_mse},
                {"heldout_overlap_pixels", heldout.overlap_pixels},
                {"transparent_matches_head", transparent},
                {"head_color_sensitivity", head_color_sensitivity(head, torso, test, c.run.render_stride)}};
      break;
    }
    case Stage::InferMotion: {
      const TargetDomain target = load_target(data_dir / "target");
      const auto vae = MotionVAE::load(stage_dir(Stage::TrainVae) / "vae.trfc");
      const auto postnet = PostNet::load(stage_dir(Stage::TrainPostnet) / "postnet.trfc");
      std::filesystem::create_directories(dir / "unrefined");
      std::filesystem::create_directories(dir / "refined");
      std::size_t n = 0;
      for (const auto* u : heldout_target(target)) {
        const auto gen = vae->generate(u->audio, c.run.temperature, seed);
        write_landmarks(dir / "unrefined" / (u->id + ".trlm"), gen);
        write_landmarks(dir / "refined" / (u->id + ".trlm"), refine_motion(*postnet, *vae, gen));
        ++n;
      }
      report = {{"utterances", n}, {"temperature", c.run.temperature}};
      break;
    }
    case Stage::Render: {
      const TargetDomain target = load_target(data_dir / "target");
      const auto head = HeadModel::load(stage_dir(Stage::TrainNerfHead) / "head.trfc");
      const auto torso = TorsoModel::load(stage_dir(Stage::TrainNerfTorso) / "torso.trfc");
      std::size_t frames = 0;
      for (const auto* u : heldout_target(target)) {
        const auto lm = read_landmarks(stage_dir(Stage::InferMotion) / "refined" / (u->id + ".trlm"));
        frames += render_sequence(head, &torso, lm, u->poses, dir / "frames" / u->id, c.run.render_frames);
      }
      report = {{"frames", frames}};
      break;
    }
    case Stage::Metrics: {
      const TargetDomain target = load_target(data_dir / "target");
      auto sync = SyncExpert::load(stage_dir(Stage::TrainSync) / "sync.trfc");
      nlohmann::json per;
      double psnr_sum = 0.0;
      std::size_t psnr_frames = 0;
      for (const auto* u : heldout_target(target)) {
        nlohmann::json entry;
        for (const char* kind : {"unrefined", "refined"}) {
          const auto lm = read_landmarks(stage_dir(Stage::InferMotion) / kind / (u->id + ".trlm"));
          entry[kind] = landmark_report(lm, u->landmarks, &u->audio, sync.get());
        }
        entry["ground_truth"] = {{"sync", sync_confidence(u->landmarks, u->audio, *sync)}};
        const auto frame_dir = stage_dir(Stage::Render) / "frames" / u->id;
        for (std::size_t f = 0; f < u->frames.size(); ++f) {
          const auto path = frame_dir / fmt::format("{:06d}.png", f);
          if (!std::filesystem::exists(path)) break;
          const double p = psnr(read_png(path), u->frames[f].image);
          psnr_sum += std::isinf(p) ? 100.0 : p;
          ++psnr_frames;
        }
        per[u->id] = entry;
      }
      report = {{"utterances", per},
                {"render", {{"frames", psnr_frames},
                            {"psnr_vs_ground_truth", psnr_frames ? psnr_sum / static_cast<double>(psnr_frames) : 0.0}}},
                {"sync_expert", stage_report(Stage::TrainSync)},
                {"vae", stage_report(Stage::TrainVae)},
                {"adaptation", stage_report(Stage::TrainPostnet)},
                {"nerf", stage_report(Stage::TrainNerfTorso)}};
      write_json(dir / "metrics.json", report);
      break;
    }
  }
  write_json(dir / "report.json", report);
  write_json(dir / "done.json", {{"stage", stage_name(s)}, {"hash", stage_hash(s)}, {"seed", seed}});
}

LandmarkSequence refine_motion(const PostNet& postnet, const MotionVAE& vae, const LandmarkSequence& raw) {
  const auto& stats = vae.normalization();
  return invert_normalization(postnet.refine(apply_normalization(raw, stats)), stats);
}

std::size_t render_sequence(const HeadModel& head, const TorsoModel* torso, const LandmarkSequence& raw,
                            std::span<const HeadPose> poses, const std::filesystem::path& dir, std::size_t limit) {
  if (poses.size() < raw.frames())
    throw std::invalid_argument(fmt::format("render: {} landmark frames but only {} poses", raw.frames(), poses.size()));
  std::filesystem::create_directories(dir);
  const std::size_t n = limit ? std::min(limit, raw.frames()) : raw.frames();
  for (std::size_t f = 0; f < n; ++f) {
    const auto cond = landmark_condition(raw, f, head.condition_stats);
    write_png(dir / fmt::format("{:06d}.png", f), render_frame(head, torso, cond, poses[f]).full);
  }
  return n;
}

nlohmann::json landmark_report(const LandmarkSequence& pred, const LandmarkSequence& gt, const AudioFeatures* audio,
                               SyncExpert* sync) {
  nlohmann::json j = {{"lmd", lmd(pred, gt)}, {"landmark_l2", landmark_l2(pred, gt)}};
  if (audio && sync) j["sync"] = sync_confidence(pred, *audio, *sync);
  return j;
}

}  // namespace talkrf
