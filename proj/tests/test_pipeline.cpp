#include <doctest.h>

#include <fstream>
#include <sstream>

#include "talkrf/pipeline.hpp"

using namespace talkrf;
namespace fs = std::filesystem;

namespace {

RunConfig smoke(std::vector<std::string> overrides = {}) {
  return load_config(fs::path(TALKRF_SOURCE_DIR) / "configs" / "smoke.ini", overrides);
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("talkrf_" + name)) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("stage names parse back") {
  for (Stage s : kAllStages) CHECK(parse_stage(stage_name(s)) == s);
  CHECK(parse_stage("train-nerf") == Stage::TrainNerfHead);
  CHECK_FALSE(parse_stage("train-everything"));
  CHECK(stage_inputs(Stage::GenData).empty());
  CHECK(stage_inputs(Stage::Metrics).size() == 8);
}

TEST_CASE("stage hashes follow the config sections each stage reads") {
  const Pipeline base(smoke(), "/tmp/unused");
  const Pipeline ablate(smoke({"nerf.head_aware=false"}), "/tmp/unused");
  CHECK(base.stage_hash(Stage::TrainNerfHead) == ablate.stage_hash(Stage::TrainNerfHead));
  CHECK(base.stage_hash(Stage::TrainNerfTorso) != ablate.stage_hash(Stage::TrainNerfTorso));
  CHECK(base.stage_hash(Stage::Render) != ablate.stage_hash(Stage::Render));
  CHECK(base.stage_hash(Stage::TrainVae) == ablate.stage_hash(Stage::TrainVae));

  const Pipeline vae(smoke({"vae.steps=21"}), "/tmp/unused");
  CHECK(base.stage_hash(Stage::TrainSync) == vae.stage_hash(Stage::TrainSync));
  CHECK(base.stage_hash(Stage::TrainNerfHead) == vae.stage_hash(Stage::TrainNerfHead));
  for (Stage s : {Stage::TrainVae, Stage::TrainPostnet, Stage::InferMotion, Stage::Metrics})
    CHECK(base.stage_hash(s) != vae.stage_hash(s));

  const Pipeline seeded(smoke({"run.seed=2"}), "/tmp/unused");
  for (Stage s : kAllStages) CHECK(base.stage_hash(s) != seeded.stage_hash(s));
  CHECK(base.stage_dir(Stage::GenData).filename().string().starts_with("gen-data-"));
}

TEST_CASE("run-all produces every artifact and resumes") {
  TempDir dir("pipeline_run");
  std::vector<std::string> lines;
  Pipeline p(smoke(), dir.path, [&](const std::string& l) { lines.push_back(l); });
  p.run_all();
  for (Stage s : kAllStages) {
    CHECK(p.completed(s));
    CHECK(fs::exists(p.stage_dir(s) / "report.json"));
    CHECK(fs::exists(p.stage_dir(s) / "log.jsonl"));
  }
  CHECK(fs::exists(p.stage_dir(Stage::Metrics) / "metrics.json"));
  CHECK(fs::exists(p.stage_dir(Stage::TrainNerfTorso) / "torso.trfc"));
  CHECK(fs::exists(p.stage_dir(Stage::Render) / "frames" / "target_02" / "000000.png"));

  const auto manifest = nlohmann::json::parse(slurp(dir.path / "manifest.json"));
  CHECK(manifest["seed"] == 1);
  CHECK(manifest["stages"].size() == std::size(kAllStages));
  for (const auto& [name, entry] : manifest["stages"].items()) CHECK(entry["status"] == "complete");

  const auto metrics = nlohmann::json::parse(slurp(p.stage_dir(Stage::Metrics) / "metrics.json"));
  CHECK(metrics["utterances"].contains("target_02"));
  CHECK(metrics["nerf"]["transparent_matches_head"] == true);

  // Second pass reuses everything; --from-stage reruns the tail only.
  lines.clear();
  p.run_all();
  std::size_t reused = 0;
  for (const auto& l : lines) reused += l.find("reusing") != std::string::npos;
  CHECK(reused == std::size(kAllStages));

  const auto before = fs::last_write_time(p.stage_dir(Stage::TrainVae) / "done.json");
  lines.clear();
  p.run_all(Stage::TrainNerfHead);
  CHECK(fs::last_write_time(p.stage_dir(Stage::TrainVae) / "done.json") == before);
  std::size_t reran = 0;
  for (const auto& l : lines) reran += l.find("running") != std::string::npos;
  CHECK(reran == 5);
}

TEST_CASE("identical config and seed give identical outputs") {
  TempDir a("pipeline_det_a"), b("pipeline_det_b");
  Pipeline pa(smoke(), a.path), pb(smoke(), b.path);
  pa.run_all();
  pb.run_all();
  const auto metrics = [](const Pipeline& p) { return slurp(p.stage_dir(Stage::Metrics) / "metrics.json"); };
  CHECK(metrics(pa) == metrics(pb));
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(pa.stage_dir(Stage::InferMotion))) {
    if (e.path().extension() != ".trlm") continue;
    const auto rel = fs::relative(e.path(), pa.stage_dir(Stage::InferMotion));
    CHECK(slurp(e.path()) == slurp(pb.stage_dir(Stage::InferMotion) / rel));
    ++files;
  }
  CHECK(files == 2);
}

TEST_CASE("failures name the stage") {
  TempDir dir("pipeline_fail");
  {
    Pipeline p(smoke(), dir.path);
    CHECK_THROWS_WITH_AS(p.run_stage(Stage::TrainVae), doctest::Contains("gen-data"), StageError);
    CHECK_THROWS_AS(p.run_all(Stage::TrainNerfHead), StageError);
  }
  std::vector<std::string> lines;
  Pipeline p(smoke({"nerf.divergence_limit=1e-12"}), dir.path, [&](const std::string& l) { lines.push_back(l); });
  p.run_stage(Stage::GenData);
  try {
    p.run_stage(Stage::TrainNerfHead);
    FAIL("expected a stage failure");
  } catch (const StageError& e) {
    CHECK(e.stage() == Stage::TrainNerfHead);
    CHECK(std::string(e.what()).find("train-nerf-head") != std::string::npos);
    CHECK(std::string(e.what()).find("diverged") != std::string::npos);
    CHECK_FALSE(e.tail().empty());
  }
  CHECK_FALSE(p.completed(Stage::TrainNerfHead));
  const auto manifest = nlohmann::json::parse(slurp(dir.path / "manifest.json"));
  CHECK(manifest["stages"][p.stage_dir(Stage::TrainNerfHead).filename().string()]["status"] == "failed");
}
