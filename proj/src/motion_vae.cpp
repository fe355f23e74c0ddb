#include "talkrf/motion_vae.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

#include "talkrf/container.hpp"
#include "talkrf/optim.hpp"

namespace talkrf {

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

ConvOptions strided(std::size_t stride) {
  ConvOptions o;
  o.stride = stride;
  return o;
}

// Standard-normal log density summed over [T, C] per batch item, [B].
Tensor normal_log_prob(const Tensor& z) {
  const std::size_t B = z.dim(0);
  const auto per_item = reshape(z, {B, z.numel() / B});
  const double n = static_cast<double>(z.numel() / B);
  return add_scalar(scale(sum_axis(square(per_item), 1), -0.5), -kHalfLog2Pi * n);
}

}  // namespace

void MotionVAEConfig::validate() const {
  for (auto [name, v] : {std::pair{"encoder_layers", encoder_layers}, {"decoder_layers", decoder_layers},
                         {"conv_kernel", conv_kernel}, {"channels", channels}, {"latent_size", latent_size},
                         {"prior_flow_layers", prior_flow_layers}, {"prior_flow_kernel", prior_flow_kernel},
                         {"prior_flow_channels", prior_flow_channels},
                         {"prior_flow_wavenet_layers", prior_flow_wavenet_layers}, {"feature_dim", feature_dim},
                         {"batch", batch}, {"crop", crop}})
    if (v < 1) throw std::invalid_argument(fmt::format("motion vae: {} must be >= 1", name));
  if (latent_size % 2 != 0)
    throw std::invalid_argument(fmt::format("motion vae: latent_size must be even for the coupling split, got {}",
                                            latent_size));
  if (!(kl_weight > 0.0) || !(sync_loss_weight >= 0.0))
    throw std::invalid_argument("motion vae: kl_weight must be > 0 and sync_loss_weight >= 0");
  if (!(kl_warmup >= 0.0 && kl_warmup <= 1.0) || !(sync_start >= 0.0 && sync_start <= 1.0))
    throw std::invalid_argument("motion vae: schedule fractions must be in [0, 1]");
  if (!(smoothing_sigma >= 0.0)) throw std::invalid_argument("motion vae: smoothing_sigma must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("motion vae: lr must be > 0");
}

nlohmann::json MotionVAEConfig::to_json() const {
  return {{"encoder_layers", encoder_layers},
          {"decoder_layers", decoder_layers},
          {"conv_kernel", conv_kernel},
          {"channels", channels},
          {"latent_size", latent_size},
          {"prior_flow_layers", prior_flow_layers},
          {"prior_flow_kernel", prior_flow_kernel},
          {"prior_flow_channels", prior_flow_channels},
          {"prior_flow_wavenet_layers", prior_flow_wavenet_layers},
          {"feature_dim", feature_dim},
          {"kl_weight", kl_weight},
          {"sync_loss_weight", sync_loss_weight},
          {"kl_warmup", kl_warmup},
          {"sync_start", sync_start},
          {"smoothing_sigma", smoothing_sigma},
          {"steps", steps},
          {"batch", batch},
          {"crop", crop},
          {"sync_windows", sync_windows},
          {"lr", lr},
          {"log_every", log_every}};
}

MotionVAEConfig MotionVAEConfig::from_json(const nlohmann::json& j) {
  MotionVAEConfig c;
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.conv_kernel = j.value("conv_kernel", c.conv_kernel);
  c.channels = j.value("channels", c.channels);
  c.latent_size = j.value("latent_size", c.latent_size);
  c.prior_flow_layers = j.value("prior_flow_layers", c.prior_flow_layers);
  c.prior_flow_kernel = j.value("prior_flow_kernel", c.prior_flow_kernel);
  c.prior_flow_channels = j.value("prior_flow_channels", c.prior_flow_channels);
  c.prior_flow_wavenet_layers = j.value("prior_flow_wavenet_layers", c.prior_flow_wavenet_layers);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  c.sync_loss_weight = j.value("sync_loss_weight", c.sync_loss_weight);
  c.kl_warmup = j.value("kl_warmup", c.kl_warmup);
  c.sync_start = j.value("sync_start", c.sync_start);
  c.smoothing_sigma = j.value("smoothing_sigma", c.smoothing_sigma);
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.crop = j.value("crop", c.crop);
  c.sync_windows = j.value("sync_windows", c.sync_windows);
  c.lr = j.value("lr", c.lr);
  c.log_every = j.value("log_every", c.log_every);
  c.validate();
  return c;
}

nlohmann::json ElboBreakdown::to_json() const {
  return {{"total", total.defined() ? total.item() : 0.0},
          {"reconstruction", reconstruction},
          {"kl", kl},
          {"sync", sync}};
}

SyncScorer frozen_scorer(SyncExpert& expert) {
  return {expert.config().window,
          [&expert](const Tensor& lm, const Tensor& audio) { return expert.prob(lm, audio, false); }};
}

MotionVAE::MotionVAE(const MotionVAEConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto& c = config_;
  const std::size_t ch = c.channels, fc = c.prior_flow_channels, half = c.latent_size / 2;

  enc_audio_ = Conv1d(params_, "enc.audio", c.feature_dim, ch, 3, strided(2), rng);
  enc_in_ = Conv1d(params_, "enc.in", kLandmarkDim, ch, c.conv_kernel, ConvOptions{}, rng);
  enc_norm_ = LayerNorm(params_, "enc.norm", ch);
  enc_wn_ = WaveNet(params_, "enc.wn", ch, ch, c.encoder_layers, c.conv_kernel, rng);
  enc_out_ = Linear(params_, "enc.out", ch, 2 * c.latent_size, rng);

  dec_audio_ = Conv1d(params_, "dec.audio", c.feature_dim, ch, 3, strided(2), rng);
  dec_in_ = Linear(params_, "dec.in", c.latent_size, ch, rng);
  dec_wn_ = WaveNet(params_, "dec.wn", ch, ch, c.decoder_layers, c.conv_kernel, rng);
  dec_up_ = ConvTranspose1d(params_, "dec.up", ch, ch, c.conv_kernel, ConvOptions{}, rng);
  dec_norm_ = LayerNorm(params_, "dec.norm", ch);
  dec_out_ = Linear(params_, "dec.out", ch, kLandmarkDim, rng, /*zero_init=*/true);

  flow_audio_ = Conv1d(params_, "flow.audio", c.feature_dim, fc, 3, strided(2), rng);
  for (std::size_t i = 0; i < c.prior_flow_layers; ++i) {
    const auto p = fmt::format("flow.{}", i);
    couplings_.push_back({Linear(params_, p + ".pre", half, fc, rng),
                          WaveNet(params_, p + ".wn", fc, fc, c.prior_flow_wavenet_layers, c.prior_flow_kernel, rng),
                          // Zero init makes every coupling the identity at the start.
                          Linear(params_, p + ".stats", fc, 2 * half, rng, true)});
  }
}

void MotionVAE::check_inputs(const Tensor& x, std::size_t channels, const Tensor& audio, const char* who) const {
  if (x.rank() != 3 || x.dim(2) != channels)
    throw ShapeError(fmt::format("{}: expected [B, T, {}], got {}", who, channels, to_string(x.shape())));
  if (audio.rank() != 3 || audio.dim(2) != config_.feature_dim)
    throw ShapeError(
        fmt::format("{}: expected audio [B, 2T, {}], got {}", who, config_.feature_dim, to_string(audio.shape())));
  if (audio.dim(0) != x.dim(0) || audio.dim(1) != 2 * x.dim(1))
    throw ShapeError(fmt::format("{}: audio {} is not aligned with {} (need 2 audio frames per video frame)", who,
                                 to_string(audio.shape()), to_string(x.shape())));
}

Posterior MotionVAE::encode(const Tensor& landmarks, const Tensor& audio) const {
  check_inputs(landmarks, kLandmarkDim, audio, "encode");
  const Tensor h = enc_norm_(relu(enc_in_(landmarks)));
  const Tensor stats = enc_out_(enc_wn_(h, enc_audio_(audio)));
  const std::size_t L = config_.latent_size;
  return {slice(stats, 2, 0, L), slice(stats, 2, L, L)};
}

Tensor MotionVAE::decode(const Tensor& z, const Tensor& audio) const {
  check_inputs(z, config_.latent_size, audio, "decode");
  const Tensor h = dec_wn_(dec_in_(z), dec_audio_(audio));
  return dec_out_(dec_norm_(relu(dec_up_(h))));
}

Tensor MotionVAE::coupling_stats(const Coupling& c, const Tensor& half, const Tensor& cond) const {
  return c.stats(c.wn(c.pre(half), cond));
}

FlowResult MotionVAE::flow_forward(const Tensor& z0, const Tensor& audio) const {
  check_inputs(z0, config_.latent_size, audio, "prior_flow_forward");
  const std::size_t half = config_.latent_size / 2, B = z0.dim(0);
  const Tensor cond = flow_audio_(audio);
  Tensor z = z0;
  Tensor log_det = Tensor::zeros({B});
  for (const auto& c : couplings_) {
    const Tensor za = slice(z, 2, 0, half), zb = slice(z, 2, half, half);
    const Tensor st = coupling_stats(c, za, cond);
    const Tensor m = slice(st, 2, 0, half), logs = slice(st, 2, half, half);
    z = flip(concat({za, zb * exp(logs) + m}, 2), 2);
    log_det = log_det + sum_axis(reshape(logs, {B, logs.numel() / B}), 1);
  }
  return {z, log_det};
}

FlowResult MotionVAE::flow_inverse(const Tensor& z, const Tensor& audio) const {
  check_inputs(z, config_.latent_size, audio, "prior_flow_inverse");
  const std::size_t half = config_.latent_size / 2, B = z.dim(0);
  const Tensor cond = flow_audio_(audio);
  Tensor x = z;
  Tensor log_det = Tensor::zeros({B});
  for (auto it = couplings_.rbegin(); it != couplings_.rend(); ++it) {
    x = flip(x, 2);
    const Tensor za = slice(x, 2, 0, half), yb = slice(x, 2, half, half);
    const Tensor st = coupling_stats(*it, za, cond);
    const Tensor m = slice(st, 2, 0, half), logs = slice(st, 2, half, half);
    x = concat({za, (yb - m) * exp(-logs)}, 2);
    log_det = log_det - sum_axis(reshape(logs, {B, logs.numel() / B}), 1);
  }
  return {x, log_det};
}

Tensor MotionVAE::prior_log_prob(const Tensor& z, const Tensor& audio) const {
  const auto inv = flow_inverse(z, audio);
  return normal_log_prob(inv.z) + inv.log_det;
}

ElboNoise MotionVAE::draw_noise(std::size_t batch, std::size_t frames, std::size_t sync_window, Rng& rng) const {
  ElboNoise n;
  std::vector<double> eps(batch * frames * config_.latent_size);
  for (auto& e : eps) e = rng.normal();
  n.eps = Tensor::from({batch, frames, config_.latent_size}, std::move(eps));
  if (sync_window > 0 && frames >= sync_window)
    for (std::size_t k = 0; k < config_.sync_windows; ++k)
      n.sync_starts.push_back(static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(frames - sync_window))));
  return n;
}

ElboBreakdown MotionVAE::elbo(const Tensor& landmarks, const Tensor& audio, const ElboNoise& noise,
                              const ElboWeights& w, const SyncScorer& sync) const {
  const auto q = encode(landmarks, audio);
  if (noise.eps.shape() != q.mean.shape())
    throw ShapeError("elbo: noise " + to_string(noise.eps.shape()) + " does not match latent " +
                     to_string(q.mean.shape()));
  const std::size_t B = landmarks.dim(0);
  const Tensor z = q.mean + exp(scale(q.logvar, 0.5)) * noise.eps;
  const Tensor decoded = decode(z, audio);
  const Tensor rec = mse(decoded, landmarks);

  // Single-sample estimate of log q(z) - log p(z | a); (z - mean) / sigma is eps by construction.
  const Tensor log_q = add_scalar(scale(square(noise.eps) + q.logvar, -0.5), -kHalfLog2Pi);
  const Tensor kl = scale(sum(log_q) - sum(prior_log_prob(z, audio)), 1.0 / static_cast<double>(z.numel()));

  ElboBreakdown out;
  out.decoded = decoded;
  out.reconstruction = rec.item();
  out.kl = kl.item();
  Tensor total = rec + kl * w.kl;
  if (w.sync > 0.0) {
    if (!sync.prob) throw std::invalid_argument("elbo: a sync scorer is required when the sync weight is positive");
    if (noise.sync_starts.empty()) throw std::invalid_argument("elbo: no sync windows were drawn");
    const std::size_t win = sync.window;
    std::vector<Tensor> lm, au;
    for (std::size_t s : noise.sync_starts) {
      if (s + win > landmarks.dim(1)) throw std::out_of_range("elbo: sync window leaves the sequence");
      lm.push_back(slice(decoded, 1, s, win));
      au.push_back(slice(audio, 1, 2 * s, 2 * win));
    }
    const Tensor p = sync.prob(concat(lm, 0), concat(au, 0));
    if (p.numel() != B * noise.sync_starts.size()) throw ShapeError("elbo: sync scorer returned the wrong count");
    const Tensor sync_loss = -mean(log(clamp(p, 1e-7, 1.0)));
    out.sync = sync_loss.item();
    total = total + sync_loss * w.sync;
  }
  out.total = total;
  return out;
}

Tensor MotionVAE::sample_normalized(const AudioFeatures& audio, double temperature, std::uint64_t seed) const {
  if (audio.frames() % 2 != 0 || audio.frames() == 0)
    throw std::invalid_argument(fmt::format("generate: need an even, nonzero audio length, got {}", audio.frames()));
  NoGradGuard guard;
  const std::size_t T = audio.frames() / 2;
  Rng rng(seed);
  std::vector<double> z0(T * config_.latent_size);
  for (auto& v : z0) v = temperature * rng.normal();
  const Tensor a = audio.to_tensor();
  const auto prior = flow_forward(Tensor::from({1, T, config_.latent_size}, std::move(z0)), a);
  return decode(prior.z, a);
}

LandmarkSequence MotionVAE::generate(const AudioFeatures& audio, double temperature, std::uint64_t seed,
                                     bool smooth) const {
  auto out = invert_normalization(LandmarkSequence::from_tensor(sample_normalized(audio, temperature, seed)),
                                  normalization_);
  if (smooth && config_.smoothing_sigma > 0.0) out = gaussian_smooth(out, config_.smoothing_sigma);
  return out;
}

Tensor MotionVAE::reconstruct(const LandmarkSequence& normalized, const AudioFeatures& audio) const {
  check_aligned(audio, normalized, "reconstruct");
  NoGradGuard guard;
  const Tensor a = audio.to_tensor();
  return decode(encode(normalized.to_tensor(), a).mean, a);
}

void MotionVAE::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json meta = extra;
  meta["kind"] = "motion-vae";
  meta["config"] = config_.to_json();
  Container c = checkpoint_container(params_, nullptr, meta);
  normalization_.store(c, "normalization");
  c.save(path);
}

std::unique_ptr<MotionVAE> MotionVAE::load(const std::filesystem::path& path) {
  const Container c = Container::load(path);
  if (c.metadata.value("kind", "") != "motion-vae")
    throw std::runtime_error(path.string() + " is not a motion-vae checkpoint");
  auto vae = std::make_unique<MotionVAE>(MotionVAEConfig::from_json(c.metadata.at("config")), 0);
  restore_checkpoint(c, vae->params_);
  vae->normalization_ = NormalizationStats::restore(c, "normalization");
  return vae;
}

ElboWeights elbo_schedule(const MotionVAEConfig& config, std::size_t step) {
  const double n = static_cast<double>(std::max<std::size_t>(config.steps, 1));
  const double t = static_cast<double>(step);
  ElboWeights w;
  const double warm = config.kl_warmup * n;
  w.kl = config.kl_weight * (warm > 0.0 ? std::min(1.0, (t + 1.0) / warm) : 1.0);
  const double start = config.sync_start * n, ramp = 0.1 * n;
  w.sync = t < start ? 0.0 : config.sync_loss_weight * std::min(1.0, (t - start + 1.0) / std::max(ramp, 1.0));
  return w;
}

std::pair<double, double> vae_heldout_error(const MotionVAE& vae, const std::vector<const Utterance*>& pool) {
  if (pool.empty()) throw std::invalid_argument("vae_heldout_error: empty pool");
  double err = 0.0;
  std::size_t count = 0, frames = 0;
  std::vector<double> s1(kLandmarkDim, 0.0), s2(kLandmarkDim, 0.0);
  for (const auto* u : pool) {
    const auto norm = apply_normalization(u->landmarks, vae.normalization());
    const auto rec = vae.reconstruct(norm, u->audio);
    const auto rv = rec.values();
    for (std::size_t i = 0; i < rv.size(); ++i) {
      const double d = rv[i] - norm.data()[i];
      err += d * d;
    }
    count += rv.size();
    for (std::size_t t = 0; t < norm.frames(); ++t)
      for (std::size_t i = 0; i < kLandmarkDim; ++i) {
        const double x = norm.frame(t)[i];
        s1[i] += x;
        s2[i] += x * x;
      }
    frames += norm.frames();
  }
  double var = 0.0;
  const double n = static_cast<double>(frames);
  for (std::size_t i = 0; i < kLandmarkDim; ++i) var += s2[i] / n - (s1[i] / n) * (s1[i] / n);
  return {err / static_cast<double>(count), var / kLandmarkDim};
}

VaeTrainReport train_motion_vae(MotionVAE& vae, const Corpus& corpus, SyncExpert* sync, std::uint64_t seed,
                                const TrainLog& log) {
  const auto& cfg = vae.config();
  const auto train = corpus.split("train");
  if (train.empty()) throw std::invalid_argument("train_motion_vae: no training utterances");
  if (corpus.feature_dim != cfg.feature_dim)
    throw std::invalid_argument(fmt::format("train_motion_vae: corpus features are {}-dim, model expects {}",
                                            corpus.feature_dim, cfg.feature_dim));
  if (cfg.sync_loss_weight > 0.0 && !sync)
    throw std::invalid_argument("train_motion_vae: a trained sync expert is required when sync_loss_weight > 0");
  vae.set_normalization(fit_normalization(corpus.landmarks("train")));
  if (sync) sync->params().set_requires_grad(false);
  const SyncScorer scorer = sync ? frozen_scorer(*sync) : SyncScorer{};

  Adam adam(AdamOptions{cfg.lr});
  Rng rng(seed);
  VaeTrainReport report;
  const std::size_t D = cfg.feature_dim;
  std::vector<LandmarkSequence> normalized;
  for (const auto* u : train) normalized.push_back(apply_normalization(u->landmarks, vae.normalization()));

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::size_t crop = cfg.crop;
    for (const auto* u : train) crop = std::min(crop, u->landmarks.frames());
    std::vector<double> lm(cfg.batch * crop * kLandmarkDim), au(cfg.batch * 2 * crop * D);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto k = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(train.size()) - 1));
      const auto& seq = normalized[k];
      const auto s = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(seq.frames() - crop)));
      std::copy_n(seq.frame(s).data(), crop * kLandmarkDim,
                  lm.begin() + static_cast<std::ptrdiff_t>(b * crop * kLandmarkDim));
      std::copy_n(train[k]->audio.row(2 * s).data(), 2 * crop * D,
                  au.begin() + static_cast<std::ptrdiff_t>(b * 2 * crop * D));
    }
    const Tensor x = Tensor::from({cfg.batch, crop, kLandmarkDim}, std::move(lm));
    const Tensor a = Tensor::from({cfg.batch, 2 * crop, D}, std::move(au));
    const auto noise = vae.draw_noise(cfg.batch, crop, scorer.prob ? scorer.window : 0, rng);
    const auto w = elbo_schedule(cfg, step);
    const auto parts = vae.elbo(x, a, noise, w, scorer);
    if (!std::isfinite(parts.total.item()))
      throw std::runtime_error(fmt::format("train_motion_vae: non-finite loss at step {}: {}", step,
                                           parts.to_json().dump()));
    vae.params().zero_grad();
    parts.total.backward();
    adam.step(vae.params());
    report.total.push_back(parts.total.item());
    report.reconstruction.push_back(parts.reconstruction);
    report.kl.push_back(parts.kl);
    report.sync.push_back(parts.sync);
    if (log && cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
      auto rec = parts.to_json();
      rec["stage"] = "vae";
      rec["step"] = step + 1;
      rec["kl_weight"] = w.kl;
      rec["sync_weight"] = w.sync;
      log(rec);
    }
  }
  if (sync) sync->params().set_requires_grad(true);
  auto heldout = corpus.split("test");
  if (heldout.empty()) heldout = train;
  std::tie(report.heldout_mse, report.heldout_variance) = vae_heldout_error(vae, heldout);
  return report;
}

}  // namespace talkrf
