#include "talkrf/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace talkrf {

namespace {

void check_lengths(const LandmarkSequence& a, const LandmarkSequence& b, const char* who) {
  if (a.frames() != b.frames())
    throw std::invalid_argument(fmt::format("{}: {} predicted frames vs {} ground-truth frames", who, a.frames(), b.frames()));
  if (a.frames() == 0) throw std::invalid_argument(fmt::format("{}: empty sequences", who));
}

}  // namespace

double lmd(const LandmarkSequence& pred, const LandmarkSequence& gt) {
  check_lengths(pred, gt, "lmd");
  const auto a = pred.data(), b = gt.data();
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); i += 3)
    total += std::sqrt((a[i] - b[i]) * (a[i] - b[i]) + (a[i + 1] - b[i + 1]) * (a[i + 1] - b[i + 1]) +
                       (a[i + 2] - b[i + 2]) * (a[i + 2] - b[i + 2]));
  return total / static_cast<double>(a.size() / 3);
}

double landmark_l2(const LandmarkSequence& pred, const LandmarkSequence& gt) {
  check_lengths(pred, gt, "landmark_l2");
  const auto a = pred.data(), b = gt.data();
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  return total / static_cast<double>(a.size());
}

double sync_confidence(const LandmarkSequence& landmarks, const AudioFeatures& audio, SyncExpert& expert) {
  return expert.sequence_confidence(apply_normalization(landmarks, expert.normalization()), audio);
}

double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument(fmt::format("psnr: {}x{} vs {}x{}", a.width, a.height, b.width, b.height));
  if (a.rgb.empty()) throw std::invalid_argument("psnr: empty images");
  double e = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) e += (a.rgb[i] - b.rgb[i]) * (a.rgb[i] - b.rgb[i]);
  e /= static_cast<double>(a.rgb.size());
  return e == 0.0 ? kPsnrIdentical : -10.0 * std::log10(e);
}

}  // namespace talkrf
