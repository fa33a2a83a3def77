#pragma once

#include <optional>
#include <vector>

#include <json.hpp>

#include "ivoct/imaging.hpp"

namespace ivoct {

struct PreprocessConfig {
    int roi_depth_px = 300;
    int gauss_ksize = 7;
    double gauss_sigma = 1.0;
    double lumen_lambda = 0.5;     // DP smoothness weight per pixel of radial jump
    int lumen_max_step = 15;       // hard bound on |r_a - r_{a-1}|
    int lumen_search_px = 20;      // DP band half-width around the threshold estimate
    int lumen_median_window = 15;  // circular median over threshold candidates
    int gw_window = 30;            // guidewire second-boundary search window (A-lines)
    int gw_smooth = 5;             // circular box smoothing of the A-line energy
    int gw_energy_depth = 100;     // radial samples summed beyond the lumen
    double gw_ratio = 0.5;         // band energy must be below ratio * median energy

    void validate() const;
};

nlohmann::json to_json(const PreprocessConfig& c);
// Overlays the keys of `j` onto `base`; unknown keys raise ConfigError.
PreprocessConfig preprocess_config_from_json(const nlohmann::json& j, PreprocessConfig base = {});

struct LumenContour {
    std::vector<int> radius_px;  // one radial index per A-line
};

// Otsu threshold over [0,1] with 256 bins.
double otsu_threshold(const Image& img);

// Detects the guidewire shadow as a circular A-line band, or nullopt when the
// energy criterion fails.
std::optional<AngularInterval> detect_guidewire(const PolarFrame& frame, const std::optional<LumenContour>& lumen,
                                                const PullbackMeta& meta, const PreprocessConfig& cfg = {});

// Threshold candidates regularised by a circular dynamic program. Throws
// DetectionError when the frame holds no visible boundary.
LumenContour detect_lumen(const PolarFrame& frame, const std::optional<AngularInterval>& shadow,
                          const PullbackMeta& meta, const PreprocessConfig& cfg = {});

struct ShiftedFrame {
    Image pixels;
    std::vector<int> shift_record;
};

// A-line a becomes frame[a, r_a:] starting at column 0, right-padded with zeros.
ShiftedFrame pixel_shift(const PolarFrame& frame, const LumenContour& lumen);
// Inverse of pixel_shift on columns >= r_a; earlier columns come back as zero.
Image pixel_unshift(const Image& shifted, const std::vector<int>& shift_record, int raw_samples);

// Keeps columns [0, depth_px), zero-padding narrower inputs.
template <typename T>
Grid<T> crop_roi(const Grid<T>& img, int depth_px) {
    if (depth_px < 1) throw ContractError("crop_roi: depth_px must be >= 1");
    Grid<T> out(img.rows(), depth_px, T{});
    int keep = std::min(depth_px, img.cols());
    for (int a = 0; a < img.rows(); ++a) {
        auto src = img.row(a);
        std::copy(src.begin(), src.begin() + keep, out.row(a).begin());
    }
    return out;
}

// Normalised 1-D Gaussian taps.
std::vector<double> gaussian_kernel(int ksize, double sigma);
// Separable Gaussian; theta (rows) wraps circularly, r (cols) replicates.
Image gaussian_smooth(const Image& img, int ksize = 7, double sigma = 1.0);

// Geometric bookkeeping needed to map between raw and pre-processed frames.
struct FrameTransform {
    std::vector<int> shift_record;
    std::optional<AngularInterval> shadow;
    int roi_depth_px = 0;
    int raw_samples = 0;

    int alines() const noexcept { return static_cast<int>(shift_record.size()); }
    bool excluded(int aline) const noexcept { return shadow && shadow->contains(aline, alines()); }
};

nlohmann::json to_json(const FrameTransform& t);
FrameTransform transform_from_json(const nlohmann::json& j);

struct PreprocessedFrame {
    Image pixels;  // alines x roi_depth_px
    FrameTransform transform;
    Mask excluded;  // 1 on shadow A-lines
    LumenContour lumen;
};

PreprocessedFrame preprocess_frame(const PolarFrame& frame, const PullbackMeta& meta,
                                   const PreprocessConfig& cfg = {});

// Same shift/crop as the frame, applied to a raw-coordinate label image.
Mask transform_mask(const Mask& raw, const FrameTransform& t);
// Maps a pre-processed label image back to raw polar coordinates.
Mask restore_mask(const Mask& pre, const FrameTransform& t);

}  // namespace ivoct
