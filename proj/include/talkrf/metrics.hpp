#pragma once

#include <limits>

#include "talkrf/corpus.hpp"
#include "talkrf/geometry.hpp"
#include "talkrf/image.hpp"
#include "talkrf/sync_expert.hpp"

namespace talkrf {

/// Mean Euclidean distance per frame and point, raw landmark units.
double lmd(const LandmarkSequence& pred, const LandmarkSequence& gt);

/// Mean squared error over every coordinate.
double landmark_l2(const LandmarkSequence& pred, const LandmarkSequence& gt);

/// Mean in-sync probability over stride-1 windows. `landmarks` are raw; the
/// expert's own normalization is applied.
double sync_confidence(const LandmarkSequence& landmarks, const AudioFeatures& audio, SyncExpert& expert);

/// Reported for identical images.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// 10 log10(1 / mse) for images in [0, 1].
double psnr(const Image& a, const Image& b);

}  // namespace talkrf
