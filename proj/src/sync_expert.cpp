#include "talkrf/sync_expert.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "talkrf/container.hpp"
#include "talkrf/optim.hpp"

namespace talkrf {

void SyncExpertConfig::validate() const {
  if (layers < 1 || channels < 1 || kernel < 1 || window < 1 || feature_dim < 1)
    throw std::invalid_argument("sync expert: layers, channels, kernel, window, feature_dim must be >= 1");
  if (!(eps > 0.0)) throw std::invalid_argument("sync expert: eps must be > 0");
  if (min_offset < 1 || min_offset > max_offset) throw std::invalid_argument("sync expert: bad negative offset range");
  if (!(cross_utterance >= 0.0 && cross_utterance <= 1.0))
    throw std::invalid_argument("sync expert: cross_utterance must be in [0, 1]");
}

nlohmann::json SyncExpertConfig::to_json() const {
  return {{"layers", layers}, {"channels", channels}, {"kernel", kernel},       {"window", window},
          {"feature_dim", feature_dim}, {"eps", eps},   {"steps", steps},         {"batch", batch},
          {"lr", lr},           {"min_offset", min_offset}, {"max_offset", max_offset},
          {"cross_utterance", cross_utterance}, {"log_every", log_every}};
}

SyncExpertConfig SyncExpertConfig::from_json(const nlohmann::json& j) {
  SyncExpertConfig c;
  c.layers = j.value("layers", c.layers);
  c.channels = j.value("channels", c.channels);
  c.kernel = j.value("kernel", c.kernel);
  c.window = j.value("window", c.window);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.eps = j.value("eps", c.eps);
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.min_offset = j.value("min_offset", c.min_offset);
  c.max_offset = j.value("max_offset", c.max_offset);
  c.cross_utterance = j.value("cross_utterance", c.cross_utterance);
  c.log_every = j.value("log_every", c.log_every);
  c.validate();
  return c;
}

Tensor clamped_cosine(const Tensor& a, const Tensor& l, double eps) {
  if (a.rank() != 2 || a.shape() != l.shape())
    throw ShapeError("clamped_cosine: expected matching [B, E] inputs, got " + to_string(a.shape()) + " and " +
                     to_string(l.shape()));
  const std::size_t B = a.dim(0), E = a.dim(1);
  std::vector<double> out(B), dot(B), na(B), nl(B);
  const auto av = a.values(), lv = l.values();
  for (std::size_t b = 0; b < B; ++b) {
    double d = 0.0, x = 0.0, y = 0.0;
    for (std::size_t e = 0; e < E; ++e) {
      d += av[b * E + e] * lv[b * E + e];
      x += av[b * E + e] * av[b * E + e];
      y += lv[b * E + e] * lv[b * E + e];
    }
    dot[b] = d;
    na[b] = x;
    nl[b] = y;
    out[b] = std::clamp(d / std::sqrt(std::max(x * y, eps * eps)), 0.0, 1.0);
  }
  return make_result("clamped_cosine", {B}, std::move(out), {a, l},
                     [a, l, eps, B, E, dot, na, nl](Node& self) {
                       const auto av = a.values(), lv = l.values();
                       auto* ga = a.requires_grad() ? &a.node().grad_buffer() : nullptr;
                       auto* gl = l.requires_grad() ? &l.node().grad_buffer() : nullptr;
                       for (std::size_t b = 0; b < B; ++b) {
                         const double q = na[b] * nl[b];
                         const bool floored = q <= eps * eps;
                         const double s = floored ? eps : std::sqrt(q);
                         const double c = dot[b] / s;
                         if (!(c > 0.0 && c < 1.0)) continue;  // clamped
                         const double g = self.grad[b];
                         for (std::size_t e = 0; e < E; ++e) {
                           const double ai = av[b * E + e], li = lv[b * E + e];
                           if (ga) (*ga)[b * E + e] += g * (floored ? li / s : li / s - dot[b] * nl[b] * ai / (s * s * s));
                           if (gl) (*gl)[b * E + e] += g * (floored ? ai / s : ai / s - dot[b] * na[b] * li / (s * s * s));
                         }
                       }
                     });
}

Tensor binary_cross_entropy(const Tensor& p, const std::vector<double>& labels) {
  if (p.rank() != 1 || p.numel() != labels.size())
    throw ShapeError("binary_cross_entropy: " + to_string(p.shape()) + " probabilities for " +
                     std::to_string(labels.size()) + " labels");
  constexpr double kFloor = 1e-7;
  const Tensor y = Tensor::from({labels.size()}, labels);
  const Tensor one_minus_y = Tensor::from({labels.size()}, [&] {
    std::vector<double> v(labels.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 - labels[i];
    return v;
  }());
  const Tensor pc = clamp(p, kFloor, 1.0 - kFloor);
  return -mean(y * log(pc) + one_minus_y * log(1.0 - pc));
}

SyncExpert::SyncExpert(const SyncExpertConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto& c = config_;
  for (std::size_t i = 0; i < c.layers; ++i) {
    lm_convs_.emplace_back(params_, fmt::format("lm.conv{}", i), i == 0 ? kLandmarkDim : c.channels, c.channels, c.kernel,
                           ConvOptions{}, rng);
    lm_norms_.emplace_back(params_, fmt::format("lm.bn{}", i), c.channels);
    ConvOptions opt;
    opt.stride = i == 0 ? 2 : 1;  // 50 Hz audio down to the video rate
    audio_convs_.emplace_back(params_, fmt::format("audio.conv{}", i), i == 0 ? c.feature_dim : c.channels, c.channels,
                              c.kernel, opt, rng);
    audio_norms_.emplace_back(params_, fmt::format("audio.bn{}", i), c.channels);
  }
  lm_head_ = Linear(params_, "lm.head", c.channels, c.channels, rng);
  audio_head_ = Linear(params_, "audio.head", c.channels, c.channels, rng);
}

Tensor SyncExpert::encode(std::vector<Conv1d>& convs, std::vector<BatchNorm>& norms, Linear& head, Tensor x,
                          bool training) {
  for (std::size_t i = 0; i < convs.size(); ++i) x = relu(norms[i](convs[i](x), training));
  return relu(head(mean_axis(x, 1)));
}

Tensor SyncExpert::landmark_embedding(const Tensor& lm, bool training) {
  if (lm.rank() != 3 || lm.dim(1) != config_.window || lm.dim(2) != kLandmarkDim)
    throw ShapeError(fmt::format("sync expert: landmark window must be [B, {}, 204], got {}", config_.window,
                                 to_string(lm.shape())));
  const std::size_t B = lm.dim(0);
  const Tensor centered = lm - reshape(mean_axis(lm, 1), {B, 1, kLandmarkDim});
  return encode(lm_convs_, lm_norms_, lm_head_, centered, training);
}

Tensor SyncExpert::audio_embedding(const Tensor& audio, bool training) {
  if (audio.rank() != 3 || audio.dim(1) != 2 * config_.window || audio.dim(2) != config_.feature_dim)
    throw ShapeError(fmt::format("sync expert: audio window must be [B, {}, {}], got {}", 2 * config_.window,
                                 config_.feature_dim, to_string(audio.shape())));
  return encode(audio_convs_, audio_norms_, audio_head_, audio, training);
}

Tensor SyncExpert::prob(const Tensor& lm, const Tensor& audio, bool training) {
  if (lm.dim(0) != audio.dim(0)) throw ShapeError("sync expert: batch sizes differ");
  return clamped_cosine(audio_embedding(audio, training), landmark_embedding(lm, training), config_.eps);
}

double SyncExpert::sequence_confidence(const LandmarkSequence& normalized, const AudioFeatures& audio) {
  check_aligned(audio, normalized, "sync_confidence");
  const std::size_t w = config_.window;
  if (normalized.frames() < w)
    throw std::invalid_argument(fmt::format("sync_confidence: sequence of {} frames is shorter than the {}-frame window",
                                            normalized.frames(), w));
  NoGradGuard guard;
  const std::size_t n = normalized.frames() - w + 1;
  double total = 0.0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t count = std::min(kChunk, n - start);
    std::vector<double> lm(count * w * kLandmarkDim), au(count * 2 * w * audio.dim());
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t s = start + k;
      std::copy_n(normalized.frame(s).data(), w * kLandmarkDim, lm.begin() + static_cast<std::ptrdiff_t>(k * w * kLandmarkDim));
      std::copy_n(audio.row(2 * s).data(), 2 * w * audio.dim(),
                  au.begin() + static_cast<std::ptrdiff_t>(k * 2 * w * audio.dim()));
    }
    const auto p = prob(Tensor::from({count, w, kLandmarkDim}, std::move(lm)),
                        Tensor::from({count, 2 * w, audio.dim()}, std::move(au)), false);
    for (double v : p.values()) total += v;
  }
  return total / static_cast<double>(n);
}

void SyncExpert::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json meta = extra;
  meta["kind"] = "sync-expert";
  meta["config"] = config_.to_json();
  Container c = checkpoint_container(params_, nullptr, meta);
  normalization_.store(c, "normalization");
  c.save(path);
}

std::unique_ptr<SyncExpert> SyncExpert::load(const std::filesystem::path& path) {
  const Container c = Container::load(path);
  if (c.metadata.value("kind", "") != "sync-expert")
    throw std::runtime_error(path.string() + " is not a sync-expert checkpoint");
  auto expert = std::make_unique<SyncExpert>(SyncExpertConfig::from_json(c.metadata.at("config")), 0);
  restore_checkpoint(c, expert->params_);
  expert->normalization_ = NormalizationStats::restore(c, "normalization");
  return expert;
}

SyncBatch make_sync_batch(const std::vector<SyncPair>& pairs, const NormalizationStats& stats, std::size_t window,
                          const std::vector<double>& labels) {
  if (pairs.empty()) throw std::invalid_argument("make_sync_batch: no pairs");
  const std::size_t B = pairs.size(), D = pairs[0].audio->audio.dim();
  std::vector<double> lm(B * window * kLandmarkDim), au(B * 2 * window * D);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& p = pairs[b];
    for (std::size_t t = 0; t < window; ++t) {
      const auto f = p.landmarks->landmarks.frame(p.landmark_start + t);
      for (std::size_t i = 0; i < kLandmarkDim; ++i)
        lm[(b * window + t) * kLandmarkDim + i] = (f[i] - stats.mean[i]) / stats.stddev[i];
    }
    const auto& a = p.audio->audio;
    std::copy_n(a.row(2 * p.audio_start).data(), 2 * window * D, au.begin() + static_cast<std::ptrdiff_t>(b * 2 * window * D));
  }
  return {Tensor::from({B, window, kLandmarkDim}, std::move(lm)), Tensor::from({B, 2 * window, D}, std::move(au)), labels};
}

std::vector<SyncPair> sample_sync_pairs(const std::vector<const Utterance*>& pool, const SyncExpertConfig& cfg,
                                        std::size_t count, Rng& rng, std::vector<double>& labels,
                                        double cross_utterance) {
  const std::size_t w = cfg.window;
  for (const auto* u : pool)
    if (u->landmarks.frames() < w) throw std::invalid_argument("sync expert: utterance " + u->id + " is shorter than the window");
  auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(n) - 1)); };
  std::vector<SyncPair> pairs;
  labels.clear();
  for (std::size_t i = 0; i < count; ++i) {
    const Utterance* u = pool[pick(pool.size())];
    const std::size_t span = u->landmarks.frames() - w + 1;
    std::size_t s = pick(span);
    if (i % 2 == 0) {
      pairs.push_back({u, s, u, s});
      labels.push_back(1.0);
      continue;
    }
    labels.push_back(0.0);
    bool placed = false;
    if (!(pool.size() > 1 && rng.bernoulli(cross_utterance))) {
      for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
        const auto delta = static_cast<std::int64_t>(
            rng.integer(static_cast<std::int64_t>(cfg.min_offset), static_cast<std::int64_t>(cfg.max_offset)));
        const std::int64_t sign = rng.bernoulli(0.5) ? 1 : -1;
        for (std::int64_t dir : {sign, -sign}) {
          const std::int64_t a = static_cast<std::int64_t>(s) + dir * delta;
          if (a >= 0 && a < static_cast<std::int64_t>(span)) {
            pairs.push_back({u, s, u, static_cast<std::size_t>(a)});
            placed = true;
            break;
          }
        }
        if (!placed) s = pick(span);
      }
    }
    if (!placed) {
      if (pool.size() < 2) throw std::invalid_argument("sync expert: cannot form a negative pair from this corpus");
      const Utterance* v = u;
      while (v == u) v = pool[pick(pool.size())];
      if (v->landmarks.frames() < w) throw std::invalid_argument("sync expert: utterance too short");
      pairs.push_back({u, s, v, pick(v->landmarks.frames() - w + 1)});
    }
  }
  return pairs;
}

std::vector<SyncPair> shifted_pairs(const std::vector<const Utterance*>& pool, std::size_t window, std::size_t shift,
                                    std::size_t stride) {
  std::vector<SyncPair> pairs;
  for (const auto* u : pool) {
    const std::size_t T = u->landmarks.frames();
    if (T < window + shift) continue;
    for (std::size_t s = 0; s + shift + window <= T; s += stride) pairs.push_back({u, s, u, s + shift});
  }
  return pairs;
}

double mean_sync_prob(SyncExpert& expert, const std::vector<SyncPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("mean_sync_prob: no pairs");
  NoGradGuard guard;
  double total = 0.0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
    std::vector<SyncPair> chunk(pairs.begin() + static_cast<std::ptrdiff_t>(start),
                                pairs.begin() + static_cast<std::ptrdiff_t>(std::min(pairs.size(), start + kChunk)));
    const auto batch = make_sync_batch(chunk, expert.normalization(), expert.config().window, {});
    const Tensor p = expert.prob(batch.landmarks, batch.audio, false);
    for (double v : p.values()) total += v;
  }
  return total / static_cast<double>(pairs.size());
}

SyncEvaluation evaluate_sync_expert(SyncExpert& expert, const std::vector<const Utterance*>& pool, std::size_t windows,
                                    std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> labels;
  const auto pairs = sample_sync_pairs(pool, expert.config(), windows, rng, labels, 0.0);
  NoGradGuard guard;
  SyncEvaluation ev;
  ev.windows = pairs.size();
  std::size_t correct = 0;
  double loss = 0.0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
    const std::size_t end = std::min(pairs.size(), start + kChunk);
    std::vector<SyncPair> chunk(pairs.begin() + static_cast<std::ptrdiff_t>(start), pairs.begin() + static_cast<std::ptrdiff_t>(end));
    std::vector<double> chunk_labels(labels.begin() + static_cast<std::ptrdiff_t>(start), labels.begin() + static_cast<std::ptrdiff_t>(end));
    const auto batch = make_sync_batch(chunk, expert.normalization(), expert.config().window, chunk_labels);
    const auto p = expert.prob(batch.landmarks, batch.audio, false);
    loss += binary_cross_entropy(p, chunk_labels).item() * static_cast<double>(chunk.size());
    for (std::size_t k = 0; k < chunk.size(); ++k) correct += ((p[k] > 0.5) == (chunk_labels[k] > 0.5));
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(pairs.size());
  ev.flipped_accuracy = 1.0 - ev.accuracy;
  ev.mean_loss = loss / static_cast<double>(pairs.size());
  return ev;
}

SyncTrainReport train_sync_expert(SyncExpert& expert, const Corpus& corpus, std::uint64_t seed, const TrainLog& log) {
  const auto train = corpus.split("train");
  if (train.size() < 2) throw std::invalid_argument("train_sync_expert: need at least two training utterances");
  const auto& cfg = expert.config();
  expert.set_normalization(fit_normalization(corpus.landmarks("train")));
  Adam adam(AdamOptions{cfg.lr});
  Rng rng(seed);
  SyncTrainReport report;
  std::vector<double> labels;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto pairs = sample_sync_pairs(train, cfg, cfg.batch, rng, labels, cfg.cross_utterance);
    const auto batch = make_sync_batch(pairs, expert.normalization(), cfg.window, labels);
    const Tensor loss = binary_cross_entropy(expert.prob(batch.landmarks, batch.audio, true), labels);
    if (!std::isfinite(loss.item()))
      throw std::runtime_error(fmt::format("train_sync_expert: non-finite loss at step {}", step));
    expert.params().zero_grad();
    loss.backward();
    adam.step(expert.params());
    report.losses.push_back(loss.item());
    if (log && cfg.log_every > 0 && (step + 1) % cfg.log_every == 0)
      log({{"stage", "sync"}, {"step", step + 1}, {"bce", loss.item()}});
  }
  auto heldout = corpus.split("test");
  if (heldout.empty()) heldout = train;
  report.heldout = evaluate_sync_expert(expert, heldout, 2000, seed + 1);
  return report;
}

}  // namespace talkrf
