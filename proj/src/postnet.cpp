#include "talkrf/postnet.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

#include "talkrf/container.hpp"
#include "talkrf/optim.hpp"

namespace talkrf {

namespace {

LandmarkSequence vae_prediction(const MotionVAE& vae, const AudioFeatures& audio) {
  return apply_normalization(vae.generate(audio, 0.0, 0), vae.normalization());
}

// Row-major [B, crop, C] batch from fixed windows of several sequences.
Tensor stack_windows(const std::vector<std::span<const double>>& rows, std::size_t crop, std::size_t channels) {
  std::vector<double> v;
  v.reserve(rows.size() * crop * channels);
  for (auto r : rows) v.insert(v.end(), r.begin(), r.begin() + static_cast<std::ptrdiff_t>(crop * channels));
  return Tensor::from({rows.size(), crop, channels}, std::move(v));
}

double mean_point_distance(const LandmarkSequence& a, const LandmarkSequence& b) {
  double total = 0.0;
  for (std::size_t t = 0; t < a.frames(); ++t)
    for (std::size_t p = 0; p < kLandmarkPoints; ++p) {
      double d = 0.0;
      for (std::size_t k = 0; k < 3; ++k) d += std::pow(a.at(t, p, k) - b.at(t, p, k), 2);
      total += std::sqrt(d);
    }
  return total / static_cast<double>(a.frames() * kLandmarkPoints);
}

LandmarkSequence temporal_mean(const LandmarkSequence& seq) {
  LandmarkSequence out(1, seq.fps());
  for (std::size_t t = 0; t < seq.frames(); ++t)
    for (std::size_t i = 0; i < kLandmarkDim; ++i) out.frame(0)[i] += seq.frame(t)[i];
  for (auto& v : out.data()) v /= static_cast<double>(seq.frames());
  return out;
}

}  // namespace

void PostNetConfig::validate() const {
  if (postnet_layers < 1 || kernel < 1 || channels < 1 || discriminator_layers < 1 || hidden < 1)
    throw std::invalid_argument("post-net: layer counts, kernel, channels and hidden must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("post-net: dropout must be in [0, 1)");
  if (!(adv_weight >= 0.0 && sync_weight >= 0.0 && sup_weight >= 0.0))
    throw std::invalid_argument("post-net: loss weights must be >= 0");
  if (batch < 1 || crop < 1) throw std::invalid_argument("post-net: batch and crop must be >= 1");
  if (!(lr > 0.0 && discriminator_lr > 0.0)) throw std::invalid_argument("post-net: learning rates must be > 0");
  if (!(lr_final_fraction > 0.0 && lr_final_fraction <= 1.0))
    throw std::invalid_argument("post-net: lr_final_fraction must be in (0, 1]");
  if (!(divergence_limit > 0.0)) throw std::invalid_argument("post-net: divergence_limit must be > 0");
}

nlohmann::json PostNetConfig::to_json() const {
  return {{"postnet_layers", postnet_layers},
          {"kernel", kernel},
          {"channels", channels},
          {"discriminator_layers", discriminator_layers},
          {"hidden", hidden},
          {"dropout", dropout},
          {"adv_weight", adv_weight},
          {"sync_weight", sync_weight},
          {"sup_weight", sup_weight},
          {"steps", steps},
          {"batch", batch},
          {"crop", crop},
          {"sync_windows", sync_windows},
          {"lr", lr},
          {"discriminator_lr", discriminator_lr},
          {"lr_final_fraction", lr_final_fraction},
          {"divergence_limit", divergence_limit},
          {"log_every", log_every}};
}

PostNetConfig PostNetConfig::from_json(const nlohmann::json& j) {
  PostNetConfig c;
  c.postnet_layers = j.value("postnet_layers", c.postnet_layers);
  c.kernel = j.value("kernel", c.kernel);
  c.channels = j.value("channels", c.channels);
  c.discriminator_layers = j.value("discriminator_layers", c.discriminator_layers);
  c.hidden = j.value("hidden", c.hidden);
  c.dropout = j.value("dropout", c.dropout);
  c.adv_weight = j.value("adv_weight", c.adv_weight);
  c.sync_weight = j.value("sync_weight", c.sync_weight);
  c.sup_weight = j.value("sup_weight", c.sup_weight);
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.crop = j.value("crop", c.crop);
  c.sync_windows = j.value("sync_windows", c.sync_windows);
  c.lr = j.value("lr", c.lr);
  c.discriminator_lr = j.value("discriminator_lr", c.discriminator_lr);
  c.lr_final_fraction = j.value("lr_final_fraction", c.lr_final_fraction);
  c.divergence_limit = j.value("divergence_limit", c.divergence_limit);
  c.log_every = j.value("log_every", c.log_every);
  c.validate();
  return c;
}

PostNet::PostNet(const PostNetConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  in_ = Conv1d(params_, "postnet.in", kLandmarkDim, config_.channels, config_.kernel, ConvOptions{}, rng);
  for (std::size_t i = 0; i < config_.postnet_layers; ++i)
    blocks_.emplace_back(params_, fmt::format("postnet.block{}", i), config_.channels, config_.channels, config_.kernel,
                         ConvOptions{}, rng);
  out_ = Conv1d(params_, "postnet.out", config_.channels, kLandmarkDim, config_.kernel, ConvOptions{}, rng, true);
}

Tensor PostNet::refine(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(2) != kLandmarkDim)
    throw ShapeError("post-net: expected [B, T, 204], got " + to_string(x.shape()));
  Tensor h = relu(in_(x));
  for (const auto& b : blocks_) h = h + relu(b(h));
  return x + out_(h);
}

LandmarkSequence PostNet::refine(const LandmarkSequence& normalized) const {
  NoGradGuard guard;
  return LandmarkSequence::from_tensor(refine(normalized.to_tensor()), 0, normalized.fps());
}

void PostNet::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json meta = extra;
  meta["kind"] = "postnet";
  meta["config"] = config_.to_json();
  checkpoint_container(params_, nullptr, meta).save(path);
}

std::unique_ptr<PostNet> PostNet::load(const std::filesystem::path& path) {
  const Container c = Container::load(path);
  if (c.metadata.value("kind", "") != "postnet") throw std::runtime_error(path.string() + " is not a post-net checkpoint");
  auto net = std::make_unique<PostNet>(PostNetConfig::from_json(c.metadata.at("config")), 0);
  restore_checkpoint(c, net->params_);
  return net;
}

Discriminator::Discriminator(const PostNetConfig& config, std::uint64_t seed) : config_(config), rng_(seed ^ 0xd15c) {
  config_.validate();
  Rng rng(seed);
  for (std::size_t i = 0; i < config_.discriminator_layers; ++i) {
    const std::size_t in = i == 0 ? kLandmarkDim : config_.hidden;
    const std::size_t out = i + 1 == config_.discriminator_layers ? 1 : config_.hidden;
    layers_.emplace_back(params_, fmt::format("disc.fc{}", i), in, out, rng);
  }
}

Tensor Discriminator::score(const Tensor& frames, bool training) {
  if (frames.rank() < 1 || frames.shape().back() != kLandmarkDim)
    throw ShapeError("discriminator: expected [..., 204] frames, got " + to_string(frames.shape()));
  const std::size_t n = frames.numel() / kLandmarkDim;
  Tensor h = reshape(frames, {n, kLandmarkDim});
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) h = dropout(relu(layers_[i](h)), config_.dropout, rng_, training);
  return reshape(layers_.back()(h), {n});
}

void Discriminator::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json meta = extra;
  meta["kind"] = "discriminator";
  meta["config"] = config_.to_json();
  checkpoint_container(params_, nullptr, meta).save(path);
}

std::unique_ptr<Discriminator> Discriminator::load(const std::filesystem::path& path) {
  const Container c = Container::load(path);
  if (c.metadata.value("kind", "") != "discriminator")
    throw std::runtime_error(path.string() + " is not a discriminator checkpoint");
  auto d = std::make_unique<Discriminator>(PostNetConfig::from_json(c.metadata.at("config")), 0);
  restore_checkpoint(c, d->params_);
  return d;
}

Tensor discriminator_loss(const Tensor& fake_scores, const Tensor& real_scores) {
  if (fake_scores.numel() == 0 || real_scores.numel() == 0)
    throw std::invalid_argument("discriminator_loss: empty batch");
  return mean(square(fake_scores)) + mean(square(real_scores - 1.0));
}

Tensor discriminator_loss(Discriminator& d, const Tensor& refined, const Tensor& target, bool training) {
  return discriminator_loss(d.score(refined, training), d.score(target, training));
}

nlohmann::json PostNetLoss::to_json() const {
  return {{"total", total.defined() ? total.item() : 0.0},
          {"adversarial", adversarial},
          {"sync", sync},
          {"supervised", supervised}};
}

PostNetLoss postnet_loss(const Tensor& fake_scores, const Tensor& sync_prob, const Tensor& refined_target,
                         const Tensor& target, const PostNetConfig& weights) {
  if (refined_target.shape() != target.shape())
    throw ShapeError("postnet_loss: refined " + to_string(refined_target.shape()) + " vs target " +
                     to_string(target.shape()));
  PostNetLoss out;
  const Tensor adv = mean(square(fake_scores - 1.0));
  const Tensor sup = mse(refined_target, target);
  out.adversarial = adv.item();
  out.supervised = sup.item();
  Tensor total = adv * weights.adv_weight + sup * weights.sup_weight;
  if (weights.sync_weight > 0.0) {
    if (!sync_prob.defined()) throw std::invalid_argument("postnet_loss: sync probabilities required");
    const Tensor s = -mean(log(clamp(sync_prob, 1e-7, 1.0)));
    out.sync = s.item();
    total = total + s * weights.sync_weight;
  }
  out.total = total;
  return out;
}

AdaptationData prepare_adaptation_data(const MotionVAE& vae, const Corpus& corpus, const TargetDomain& target,
                                       const std::string& split) {
  AdaptationData data;
  for (const auto* u : corpus.split(split)) {
    data.generated.push_back(vae_prediction(vae, u->audio));
    data.generated_audio.push_back(u->audio);
  }
  for (const auto* u : target.split(split)) {
    data.target_generated.push_back(vae_prediction(vae, u->audio));
    data.target.push_back(apply_normalization(u->landmarks, vae.normalization()));
  }
  if (data.generated.empty() || data.target.empty())
    throw std::invalid_argument(fmt::format("prepare_adaptation_data: no '{}' utterances in the corpus or target", split));
  return data;
}

AdaptationReport train_adaptation(PostNet& postnet, Discriminator& disc, const AdaptationData& data,
                                  const SyncScorer& sync, std::uint64_t seed, const TrainLog& log) {
  const auto& cfg = postnet.config();
  if (data.generated.empty() || data.target.empty() || data.generated.size() != data.generated_audio.size() ||
      data.target.size() != data.target_generated.size())
    throw std::invalid_argument("train_adaptation: inconsistent adaptation data");
  if (cfg.sync_weight > 0.0 && !sync.prob)
    throw std::invalid_argument("train_adaptation: a sync scorer is required when sync_weight > 0");
  std::size_t crop = cfg.crop;
  for (const auto& s : data.generated) crop = std::min(crop, s.frames());
  for (const auto& s : data.target) crop = std::min(crop, s.frames());
  const bool use_sync = cfg.sync_weight > 0.0 && crop >= sync.window;

  Adam adam_g(AdamOptions{cfg.lr});
  Adam adam_d(AdamOptions{cfg.discriminator_lr});
  Rng rng(seed);
  auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(n) - 1)); };
  const std::size_t D = data.generated_audio[0].dim();
  AdaptationReport report;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double progress = static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(cfg.steps, 1));
    const double factor =
        cfg.lr_final_fraction + (1.0 - cfg.lr_final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    adam_g.options().lr = cfg.lr * factor;
    adam_d.options().lr = cfg.discriminator_lr * factor;
    std::vector<std::span<const double>> gen_rows, gen_audio, tgen_rows, tgt_rows;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t k = pick(data.generated.size());
      const std::size_t s = pick(data.generated[k].frames() - crop + 1);
      gen_rows.push_back(data.generated[k].frame(s));
      gen_audio.push_back(data.generated_audio[k].row(2 * s));
      const std::size_t j = pick(data.target.size());
      const std::size_t r = pick(data.target[j].frames() - crop + 1);
      tgen_rows.push_back(data.target_generated[j].frame(r));
      tgt_rows.push_back(data.target[j].frame(r));
    }
    const Tensor gen = stack_windows(gen_rows, crop, kLandmarkDim);
    const Tensor audio = stack_windows(gen_audio, 2 * crop, D);
    const Tensor tgen = stack_windows(tgen_rows, crop, kLandmarkDim);
    const Tensor tgt = stack_windows(tgt_rows, crop, kLandmarkDim);

    // Discriminator step on detached refinements.
    Tensor refined_fixed;
    {
      NoGradGuard guard;
      refined_fixed = postnet.refine(gen);
    }
    const Tensor d_loss = discriminator_loss(disc, refined_fixed, tgt, true);
    disc.params().zero_grad();
    d_loss.backward();
    adam_d.step(disc.params());

    // Post-net step.
    const Tensor refined = postnet.refine(gen);
    Tensor sync_prob;
    if (use_sync) {
      std::vector<Tensor> lm, au;
      for (std::size_t w = 0; w < cfg.sync_windows; ++w) {
        const std::size_t s = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(crop - sync.window)));
        lm.push_back(slice(refined, 1, s, sync.window));
        au.push_back(slice(audio, 1, 2 * s, 2 * sync.window));
      }
      sync_prob = sync.prob(concat(lm, 0), concat(au, 0));
    }
    PostNetConfig weights = cfg;
    if (!use_sync) weights.sync_weight = 0.0;
    const auto parts = postnet_loss(disc.score(refined, true), sync_prob, postnet.refine(tgen), tgt, weights);

    const double dl = d_loss.item(), gl = parts.total.item();
    if (!std::isfinite(dl) || !std::isfinite(gl) || dl > cfg.divergence_limit || gl > cfg.divergence_limit) {
      auto diag = parts.to_json();
      diag["discriminator"] = dl;
      throw std::runtime_error(fmt::format("train_adaptation: diverged at step {}: {}", step, diag.dump()));
    }
    postnet.params().zero_grad();
    parts.total.backward();
    adam_g.step(postnet.params());

    report.discriminator.push_back(dl);
    report.adversarial.push_back(parts.adversarial);
    report.sync.push_back(parts.sync);
    report.supervised.push_back(parts.supervised);
    if (log && cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
      auto rec = parts.to_json();
      rec["stage"] = "postnet";
      rec["step"] = step + 1;
      rec["discriminator"] = dl;
      log(rec);
    }
  }
  disc.params().zero_grad();
  return report;
}

nlohmann::json AdaptationEvaluation::to_json() const {
  return {{"unrefined_error", unrefined_error},
          {"refined_error", refined_error},
          {"error_reduction", error_reduction()},
          {"unrefined_mean_gap", unrefined_mean_gap},
          {"refined_mean_gap", refined_mean_gap},
          {"mean_gap_reduction", mean_gap_reduction()},
          {"discriminator_accuracy", discriminator_accuracy},
          {"real_score", real_score},
          {"refined_score", refined_score},
          {"unrefined_score", unrefined_score},
          {"sync_unrefined", sync_unrefined},
          {"sync_refined", sync_refined},
          {"sync_ratio", sync_ratio()}};
}

AdaptationEvaluation evaluate_adaptation(const PostNet& postnet, Discriminator& disc, const MotionVAE& vae,
                                         SyncExpert& sync, const Corpus& corpus, const TargetDomain& target) {
  const auto heldout = corpus.split("test");
  const auto real = target.split("test");
  if (heldout.empty() || real.empty()) throw std::invalid_argument("evaluate_adaptation: missing held-out data");
  NoGradGuard guard;
  AdaptationEvaluation ev;

  double real_correct = 0.0, real_score = 0.0;
  std::size_t real_frames = 0;
  for (const auto* u : real) {
    const auto gen = vae_prediction(vae, u->audio);
    const auto raw_gen = invert_normalization(gen, vae.normalization());
    const auto raw_ref = invert_normalization(postnet.refine(gen), vae.normalization());
    ev.unrefined_error += mean_point_distance(raw_gen, u->landmarks);
    ev.refined_error += mean_point_distance(raw_ref, u->landmarks);
    ev.unrefined_mean_gap += mean_point_distance(temporal_mean(raw_gen), temporal_mean(u->landmarks));
    ev.refined_mean_gap += mean_point_distance(temporal_mean(raw_ref), temporal_mean(u->landmarks));

    const auto norm = apply_normalization(u->landmarks, vae.normalization());
    const Tensor scores = disc.score(norm.to_tensor(), false);
    for (double s : scores.values()) {
      real_correct += s > 0.5;
      real_score += s;
    }
    real_frames += norm.frames();
  }
  const double nt = static_cast<double>(real.size());
  ev.unrefined_error /= nt;
  ev.refined_error /= nt;
  ev.unrefined_mean_gap /= nt;
  ev.refined_mean_gap /= nt;
  ev.real_score = real_score / static_cast<double>(real_frames);

  double fake_correct = 0.0, refined_score = 0.0, unrefined_score = 0.0;
  std::size_t fake_frames = 0;
  for (const auto* u : heldout) {
    const auto gen = vae_prediction(vae, u->audio);
    const auto refined = postnet.refine(gen);
    const Tensor refined_scores = disc.score(refined.to_tensor(), false);
    for (double s : refined_scores.values()) {
      fake_correct += s < 0.5;
      refined_score += s;
    }
    const Tensor gen_scores = disc.score(gen.to_tensor(), false);
    for (double s : gen_scores.values()) unrefined_score += s;
    fake_frames += gen.frames();
    const auto raw_gen = invert_normalization(gen, vae.normalization());
    const auto raw_ref = invert_normalization(refined, vae.normalization());
    ev.sync_unrefined += sync.sequence_confidence(apply_normalization(raw_gen, sync.normalization()), u->audio);
    ev.sync_refined += sync.sequence_confidence(apply_normalization(raw_ref, sync.normalization()), u->audio);
  }
  const double nc = static_cast<double>(heldout.size());
  ev.sync_unrefined /= nc;
  ev.sync_refined /= nc;
  ev.refined_score = refined_score / static_cast<double>(fake_frames);
  ev.unrefined_score = unrefined_score / static_cast<double>(fake_frames);
  // Balanced over the two populations.
  ev.discriminator_accuracy =
      0.5 * (fake_correct / static_cast<double>(fake_frames) + real_correct / static_cast<double>(real_frames));
  return ev;
}

}  // namespace talkrf
