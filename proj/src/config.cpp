#include "talkrf/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

namespace talkrf {

namespace {

constexpr const char* kSections[] = {"run", "corpus", "target", "scene", "sync", "vae", "postnet", "nerf"};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

// Parses `raw` into the type of `slot` (the default value).
std::optional<std::string> assign(nlohmann::json& slot, const std::string& raw) {
  const std::string s = trim(raw);
  if (slot.is_boolean()) {
    if (s == "true" || s == "1" || s == "yes") slot = true;
    else if (s == "false" || s == "0" || s == "no") slot = false;
    else return "expected true or false";
  } else if (slot.is_number_unsigned() || slot.is_number_integer()) {
    std::uint64_t v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size() || s.empty()) return "expected a non-negative integer";
    slot = v;
  } else if (slot.is_number_float()) {
    const auto v = parse_double(s);
    if (!v) return "expected a number";
    slot = *v;
  } else if (slot.is_array()) {
    nlohmann::json arr = nlohmann::json::array();
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
      const auto v = parse_double(trim(item));
      if (!v) return "expected comma-separated numbers";
      arr.push_back(*v);
    }
    if (arr.size() != slot.size()) return fmt::format("expected {} comma-separated numbers", slot.size());
    slot = arr;
  } else {
    slot = s;
  }
  return std::nullopt;
}

std::string ini_value(const nlohmann::json& v) {
  if (v.is_array()) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + v[i].dump();
    return out;
  }
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

template <typename F>
void collect(std::vector<std::string>& errors, const char* section, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    errors.push_back(fmt::format("[{}] {}", section, e.what()));
  }
}

}  // namespace

void TargetOptions::validate() const {
  if (utterances < 2) throw std::invalid_argument("target: utterances must be >= 2 (one is held out)");
  if (frames < 16) throw std::invalid_argument("target: frames must be >= 16");
  if (!(shift_scale >= 0.0 && shift_angle >= 0.0 && shift_offset >= 0.0))
    throw std::invalid_argument("target: shift magnitudes must be >= 0");
}

nlohmann::json TargetOptions::to_json() const {
  return {{"utterances", utterances},
          {"frames", frames},
          {"shift_scale", shift_scale},
          {"shift_angle", shift_angle},
          {"shift_offset", shift_offset}};
}

TargetOptions TargetOptions::from_json(const nlohmann::json& j) {
  TargetOptions o;
  o.utterances = j.value("utterances", o.utterances);
  o.frames = j.value("frames", o.frames);
  o.shift_scale = j.value("shift_scale", o.shift_scale);
  o.shift_angle = j.value("shift_angle", o.shift_angle);
  o.shift_offset = j.value("shift_offset", o.shift_offset);
  o.validate();
  return o;
}

void RunOptions::validate() const {
  if (render_stride < 1) throw std::invalid_argument("run: render_stride must be >= 1");
  if (!(temperature >= 0.0)) throw std::invalid_argument("run: temperature must be >= 0");
}

nlohmann::json RunOptions::to_json() const {
  return {{"seed", seed}, {"render_stride", render_stride}, {"render_frames", render_frames}, {"temperature", temperature}};
}

RunOptions RunOptions::from_json(const nlohmann::json& j) {
  RunOptions o;
  o.seed = j.value("seed", o.seed);
  o.render_stride = j.value("render_stride", o.render_stride);
  o.render_frames = j.value("render_frames", o.render_frames);
  o.temperature = j.value("temperature", o.temperature);
  o.validate();
  return o;
}

nlohmann::json corpus_options_to_json(const CorpusOptions& o) {
  return {{"speakers", o.speakers},
          {"utterances", o.utterances},
          {"frames", o.frames},
          {"feature_dim", o.feature_dim},
          {"phonemes", o.phonemes},
          {"vertices", o.vertices},
          {"identity_dims", o.identity_dims},
          {"expression_dims", o.expression_dims},
          {"min_segment", o.min_segment},
          {"max_segment", o.max_segment},
          {"phoneme_scale", o.phoneme_scale},
          {"noise_scale", o.noise_scale},
          {"articulation_gain", o.articulation_gain},
          {"speaker_variation", o.speaker_variation},
          {"saturation", o.saturation},
          {"identity_scale", o.identity_scale},
          {"offset_separation", o.offset_separation},
          {"smoothing_sigma", o.smoothing_sigma}};
}

CorpusOptions corpus_options_from_json(const nlohmann::json& j) {
  CorpusOptions o;
  o.speakers = j.value("speakers", o.speakers);
  o.utterances = j.value("utterances", o.utterances);
  o.frames = j.value("frames", o.frames);
  o.feature_dim = j.value("feature_dim", o.feature_dim);
  o.phonemes = j.value("phonemes", o.phonemes);
  o.vertices = j.value("vertices", o.vertices);
  o.identity_dims = j.value("identity_dims", o.identity_dims);
  o.expression_dims = j.value("expression_dims", o.expression_dims);
  o.min_segment = j.value("min_segment", o.min_segment);
  o.max_segment = j.value("max_segment", o.max_segment);
  o.phoneme_scale = j.value("phoneme_scale", o.phoneme_scale);
  o.noise_scale = j.value("noise_scale", o.noise_scale);
  o.articulation_gain = j.value("articulation_gain", o.articulation_gain);
  o.speaker_variation = j.value("speaker_variation", o.speaker_variation);
  o.saturation = j.value("saturation", o.saturation);
  o.identity_scale = j.value("identity_scale", o.identity_scale);
  o.offset_separation = j.value("offset_separation", o.offset_separation);
  o.smoothing_sigma = j.value("smoothing_sigma", o.smoothing_sigma);
  o.validate();
  return o;
}

nlohmann::json RunConfig::to_json() const {
  return {{"run", run.to_json()},         {"corpus", corpus_options_to_json(corpus)},
          {"target", target.to_json()},   {"scene", scene_to_json(scene)},
          {"sync", sync.to_json()},       {"vae", vae.to_json()},
          {"postnet", postnet.to_json()}, {"nerf", nerf.to_json()}};
}

std::string RunConfig::to_ini() const {
  const auto j = to_json();
  std::string out;
  for (const char* section : kSections) {
    out += fmt::format("{}[{}]\n", out.empty() ? "" : "\n", section);
    for (const auto& [key, value] : j.at(section).items()) out += fmt::format("{} = {}\n", key, ini_value(value));
  }
  return out;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  std::vector<std::string> errors;
  RunConfig c;
  collect(errors, "run", [&] { c.run = RunOptions::from_json(j.value("run", nlohmann::json::object())); });
  collect(errors, "corpus", [&] { c.corpus = corpus_options_from_json(j.value("corpus", nlohmann::json::object())); });
  collect(errors, "target", [&] { c.target = TargetOptions::from_json(j.value("target", nlohmann::json::object())); });
  collect(errors, "scene", [&] {
    c.scene = scene_from_json(j.value("scene", nlohmann::json::object()));
    c.scene.validate();
  });
  collect(errors, "sync", [&] { c.sync = SyncExpertConfig::from_json(j.value("sync", nlohmann::json::object())); });
  collect(errors, "vae", [&] { c.vae = MotionVAEConfig::from_json(j.value("vae", nlohmann::json::object())); });
  collect(errors, "postnet", [&] { c.postnet = PostNetConfig::from_json(j.value("postnet", nlohmann::json::object())); });
  collect(errors, "nerf", [&] { c.nerf = NerfConfig::from_json(j.value("nerf", nlohmann::json::object())); });
  if (errors.empty()) {
    // Stage interfaces that must agree.
    if (c.sync.feature_dim != c.corpus.feature_dim)
      errors.push_back(fmt::format("[sync] feature_dim {} must equal corpus feature_dim {}", c.sync.feature_dim,
                                   c.corpus.feature_dim));
    if (c.vae.feature_dim != c.corpus.feature_dim)
      errors.push_back(fmt::format("[vae] feature_dim {} must equal corpus feature_dim {}", c.vae.feature_dim,
                                   c.corpus.feature_dim));
  }
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return c;
}

ConfigError::ConfigError(std::vector<std::string> errors)
    : std::invalid_argument([&] {
        std::string msg = "invalid config:";
        for (const auto& e : errors) msg += "\n  " + e;
        return msg;
      }()),
      errors_(std::move(errors)) {}

RunConfig parse_config(const std::string& text, const std::vector<std::string>& overrides) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError({fmt::format("line {}: {}", e.line(), e.message())});
  }
  nlohmann::json j = RunConfig{}.to_json();
  std::vector<std::string> errors;
  for (const auto& [section, keys] : tree) {
    if (keys.empty()) {
      errors.push_back(fmt::format("key '{}' is outside any section", section));
      continue;
    }
    if (!j.contains(section)) {
      errors.push_back(fmt::format("unknown section [{}]", section));
      continue;
    }
    for (const auto& [key, value] : keys) {
      if (!j[section].contains(key)) {
        errors.push_back(fmt::format("[{}] unknown key '{}'", section, key));
        continue;
      }
      if (auto err = assign(j[section][key], value.data()))
        errors.push_back(fmt::format("[{}] {}: {}, got '{}'", section, key, *err, value.data()));
    }
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      errors.push_back(fmt::format("override '{}' is not section.key=value", o));
      continue;
    }
    const auto section = trim(o.substr(0, dot));
    const auto key = trim(o.substr(dot + 1, eq - dot - 1));
    const auto value = trim(o.substr(eq + 1));
    if (!j.contains(section) || !j[section].contains(key)) {
      errors.push_back(fmt::format("override '{}': unknown key {}.{}", o, section, key));
      continue;
    }
    if (auto err = assign(j[section][key], value))
      errors.push_back(fmt::format("override {}.{}: {}, got '{}'", section, key, *err, value));
  }
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return RunConfig::from_json(j);
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

std::uint64_t fnv1a(const std::string& bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace talkrf
