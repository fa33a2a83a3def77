#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ivoct/imaging.hpp"

namespace ivoct {

struct AugmentSpec {
    int n_shifts = 9;
    int increment_alines = 55;

    // Throws ConfigError for non-positive values. Returns a warning when the
    // shifts exceed one frame and therefore alias.
    std::optional<std::string> validate(int alines_per_frame) const;
};

struct AugmentedPullback {
    PolarPullback pullback;
    std::vector<FrameMask> masks;
};

// Re-cuts the concatenated A-line stream of a pullback starting at A-line
// `offset`. The stream is treated as circular, so the frame count is kept and
// every output A-line is a verbatim copy of one input A-line.
AugmentedPullback recut_pullback(const PolarPullback& p, const std::vector<FrameMask>& masks, long long offset);

// Offset-angle augmentation: shifts k = 1..n_shifts by k * increment A-lines.
std::vector<AugmentedPullback> offset_angle_augment(const PolarPullback& p, const std::vector<FrameMask>& masks,
                                                    const AugmentSpec& spec);

}  // namespace ivoct
