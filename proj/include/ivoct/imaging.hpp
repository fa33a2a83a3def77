#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ivoct/grid.hpp"

namespace ivoct {

// Acquisition geometry of one pullback.
struct PullbackMeta {
    int alines_per_frame = 496;
    int samples_per_aline = 300;
    double r_pixel_um = 5.0;        // 1.5 mm over 300 radial samples
    double frame_spacing_mm = 0.2;  // 36 mm/s pullback at 180 frames/s
    int catheter_offset_px = 0;
    // Optional acquisition record; when both are present the frame spacing
    // must equal speed / rate.
    std::optional<double> pullback_speed_mm_s;
    std::optional<double> frame_rate_fps;

    double r_pixel_mm() const noexcept { return r_pixel_um * 1e-3; }
    // Throws ConfigError describing the first violated invariant.
    void validate() const;

    friend bool operator==(const PullbackMeta&, const PullbackMeta&) = default;
};

nlohmann::json to_json(const PullbackMeta& m);
// Throws FormatError naming `source` on missing or invalid fields.
PullbackMeta meta_from_json(const nlohmann::json& j, const std::filesystem::path& source);

using PolarFrame = Image;  // rows = A-lines, cols = radial samples, values in [0,1]
using FrameMask = Mask;    // {0 = other, 1 = microvessel}

struct PolarPullback {
    PullbackMeta meta;
    std::vector<PolarFrame> frames;
    std::string segment_id;

    int frame_count() const noexcept { return static_cast<int>(frames.size()); }
};

// Checks one frame against the geometry: shape and finite intensities in [0,1].
void validate_frame(const PolarFrame& frame, const PullbackMeta& meta);
void validate_mask(const FrameMask& mask, const PolarFrame& frame);

struct LoadedPullback {
    PolarPullback pullback;
    std::vector<FrameMask> masks;  // empty when the directory holds no masks
};

// Directory layout: meta.json, frame_%05d.pgm (16-bit P5), optional mask_%05d.pgm.
LoadedPullback load_pullback(const std::filesystem::path& dir);
void save_pullback(const PolarPullback& pullback, const std::filesystem::path& dir,
                   const std::vector<FrameMask>& masks = {});

// 16-bit quantisation used by the on-disk format.
std::uint16_t quantize16(double v) noexcept;
double dequantize16(std::uint16_t q) noexcept;
PolarFrame quantized(const PolarFrame& frame);

// Raw PGM helpers. 16-bit samples are big-endian.
void write_pgm16(const std::filesystem::path& path, const Image& img);
Image read_pgm16(const std::filesystem::path& path);
void write_pgm8(const std::filesystem::path& path, const Mask& mask);
Mask read_pgm8(const std::filesystem::path& path);

struct CartesianImage {
    Image pixels;  // square
    double mm_per_pixel = 0.0;
};

// Anatomical (x, y) view of a polar frame. Radial sample k sits at radius
// (k + 0.5) * r_pixel; A-line a at angle 2*pi*a/alines. The image centre maps
// to r = 0. `angle_offset_rad` rotates the rendering (theta -> theta + offset).
CartesianImage scan_convert(const PolarFrame& frame, const PullbackMeta& meta, int side_px,
                            double angle_offset_rad = 0.0);

// Bilinear read of a polar frame at fractional (aline, sample); theta wraps,
// r clamps to the sampled range.
double polar_bilinear(const PolarFrame& frame, double aline, double sample) noexcept;

// Rotates a frame along theta: out[a] = in[(a + k) mod alines].
template <typename T>
Grid<T> roll_alines(const Grid<T>& in, int k) {
    Grid<T> out(in.rows(), in.cols());
    for (int a = 0; a < in.rows(); ++a) {
        auto src = in.row(wrap_index(a + k, in.rows()));
        std::copy(src.begin(), src.end(), out.row(a).begin());
    }
    return out;
}

// Bilinear taps for one axis with half-pixel centres: output i reads lo[i] and
// hi[i] with weights (1 - frac[i], frac[i]); the source coordinate is clamped
// to the grid.
struct BilinearTaps {
    std::vector<int> lo, hi;
    std::vector<double> frac;
};
BilinearTaps bilinear_taps(int in_size, int out_size);

// Half-pixel bilinear resampling (no wrap on either axis).
Image resize_bilinear(const Image& img, int rows, int cols);
// Nearest-neighbour resampling with half-pixel centres, for label grids.
Mask resize_nearest(const Mask& m, int rows, int cols);

// Circular interval of A-lines [start, start + width) modulo alines.
struct AngularInterval {
    int start = 0;
    int width = 0;

    bool contains(int aline, int alines) const noexcept {
        return wrap_index(aline - start, alines) < width;
    }
    friend bool operator==(const AngularInterval&, const AngularInterval&) = default;
};

// Intersection-over-union of two circular intervals on a ring of `alines`.
double interval_iou(const AngularInterval& a, const AngularInterval& b, int alines);

}  // namespace ivoct
