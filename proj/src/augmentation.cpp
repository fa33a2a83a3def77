#include "ivoct/augmentation.hpp"

#include <algorithm>

namespace ivoct {

std::optional<std::string> AugmentSpec::validate(int alines_per_frame) const {
    if (n_shifts < 1) throw ConfigError("n_shifts must be >= 1");
    if (increment_alines < 1) throw ConfigError("increment_alines must be >= 1");
    if (static_cast<long long>(n_shifts) * increment_alines > alines_per_frame)
        return "augmentation shifts span more than one frame (" + std::to_string(n_shifts * increment_alines) + " > " +
               std::to_string(alines_per_frame) + " A-lines); shifted frames alias";
    return std::nullopt;
}

namespace {

template <typename T>
std::vector<Grid<T>> recut(const std::vector<Grid<T>>& frames, long long offset) {
    std::vector<Grid<T>> out;
    if (frames.empty()) return out;
    const int A = frames.front().rows();
    const int S = frames.front().cols();
    const long long total = static_cast<long long>(frames.size()) * A;
    long long start = offset % total;
    if (start < 0) start += total;
    out.reserve(frames.size());
    for (std::size_t f = 0; f < frames.size(); ++f) {
        Grid<T> g(A, S);
        for (int a = 0; a < A; ++a) {
            long long src = (start + static_cast<long long>(f) * A + a) % total;
            auto line = frames[static_cast<std::size_t>(src / A)].row(static_cast<int>(src % A));
            std::copy(line.begin(), line.end(), g.row(a).begin());
        }
        out.push_back(std::move(g));
    }
    return out;
}

}  // namespace

AugmentedPullback recut_pullback(const PolarPullback& p, const std::vector<FrameMask>& masks, long long offset) {
    if (!masks.empty() && masks.size() != p.frames.size())
        throw ContractError("masks are not aligned with the pullback frames");
    AugmentedPullback out;
    out.pullback.meta = p.meta;
    out.pullback.segment_id = p.segment_id;
    out.pullback.frames = recut(p.frames, offset);
    out.masks = recut(masks, offset);
    return out;
}

std::vector<AugmentedPullback> offset_angle_augment(const PolarPullback& p, const std::vector<FrameMask>& masks,
                                                    const AugmentSpec& spec) {
    spec.validate(p.meta.alines_per_frame);
    std::vector<AugmentedPullback> out;
    out.reserve(spec.n_shifts);
    for (int k = 1; k <= spec.n_shifts; ++k)
        out.push_back(recut_pullback(p, masks, static_cast<long long>(k) * spec.increment_alines));
    return out;
}

}  // namespace ivoct
