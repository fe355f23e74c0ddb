#include <doctest.h>

#include "talkrf/config.hpp"

using namespace talkrf;

TEST_CASE("empty config yields the defaults") {
  const auto c = parse_config("");
  CHECK(c.to_json() == RunConfig{}.to_json());
  CHECK(parse_config("; comment only\n\n").to_json() == RunConfig{}.to_json());
}

TEST_CASE("default hyper-parameters") {
  const auto j = parse_config("").to_json();
  CHECK(j["vae"]["encoder_layers"] == 8);
  CHECK(j["vae"]["decoder_layers"] == 4);
  CHECK(j["vae"]["conv_kernel"] == 5);
  CHECK(j["vae"]["channels"] == 192);
  CHECK(j["vae"]["latent_size"] == 16);
  CHECK(j["vae"]["prior_flow_layers"] == 4);
  CHECK(j["vae"]["prior_flow_kernel"] == 3);
  CHECK(j["vae"]["prior_flow_channels"] == 64);
  CHECK(j["sync"]["layers"] == 14);
  CHECK(j["sync"]["channels"] == 512);
  CHECK(j["postnet"]["postnet_layers"] == 8);
  CHECK(j["postnet"]["kernel"] == 3);
  CHECK(j["postnet"]["channels"] == 256);
  CHECK(j["postnet"]["discriminator_layers"] == 5);
  CHECK(j["postnet"]["hidden"] == 256);
  CHECK(j["postnet"]["dropout"] == 0.25);
  CHECK(j["nerf"]["trunk_layers"] == 11);
  CHECK(j["nerf"]["trunk_width"] == 256);
  CHECK(j["nerf"]["condition_layers"] == 3);
  CHECK(j["nerf"]["condition_width"] == 128);
}

TEST_CASE("values override defaults and the INI dump round trips") {
  const auto c = parse_config(R"(
[run]
seed = 42
[vae]
channels = 64
kl_weight = 0.5
[nerf]
head_aware = false
[scene]
torso_center = 0, 0.5, 2.9
)");
  CHECK(c.run.seed == 42);
  CHECK(c.vae.channels == 64);
  CHECK(c.vae.kl_weight == 0.5);
  CHECK_FALSE(c.nerf.head_aware);
  CHECK(c.scene.torso_center.y() == 0.5);
  CHECK(parse_config(c.to_ini()).to_json() == c.to_json());
  CHECK(parse_config(RunConfig{}.to_ini()).to_json() == RunConfig{}.to_json());
}

TEST_CASE("every problem is reported with its key") {
  try {
    parse_config(R"(
[vae]
chanels = 64
steps = -3
[nerf]
head_aware = maybe
[bogus]
x = 1
[scene]
torso_center = 1, 2
)");
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    const auto& errs = e.errors();
    REQUIRE(errs.size() == 5);
    const std::string all = e.what();
    CHECK(all.find("chanels") != std::string::npos);
    CHECK(all.find("steps") != std::string::npos);
    CHECK(all.find("head_aware") != std::string::npos);
    CHECK(all.find("[bogus]") != std::string::npos);
    CHECK(all.find("torso_center") != std::string::npos);
  }
}

TEST_CASE("invariants are checked after parsing") {
  CHECK_THROWS_WITH_AS(parse_config("[vae]\nlatent_size = 15\n"), doctest::Contains("latent_size"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("[postnet]\ndropout = 1.5\n"), doctest::Contains("dropout"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("[sync]\nfeature_dim = 32\n"), doctest::Contains("feature_dim"), ConfigError);
  CHECK_THROWS_AS(parse_config("[vae\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[vae]\nsteps = 1\nsteps = 2\n"), ConfigError);
  CHECK_THROWS(load_config("/nonexistent/run.ini"));
}

TEST_CASE("command-line overrides apply after the file") {
  const auto c = parse_config("[nerf]\nhead_aware = true\nsamples = 16\n", {"nerf.head_aware=false", "run.seed = 7"});
  CHECK_FALSE(c.nerf.head_aware);
  CHECK(c.nerf.samples == 16);
  CHECK(c.run.seed == 7);
  try {
    parse_config("", {"nerf.bogus=1", "noequals", "vae.steps=abc"});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.errors().size() == 3);
  }
}

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
}
