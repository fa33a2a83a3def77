#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ivoct/imaging.hpp"

namespace ivoct {

struct PhantomParams {
    int n_frames = 50;
    int alines_per_frame = 496;
    int samples_per_aline = 400;
    double r_pixel_um = 5.0;
    double frame_spacing_mm = 0.2;
    int catheter_offset_px = 0;

    double lumen_radius_px = 80.0;
    double lumen_radius_amp_px = 0.0;  // sinusoidal variation around the circumference
    int lumen_lobes = 1;
    double lumen_phase_step = 0.1;  // radians per frame

    double tissue_mean = 0.5;      // mu_t
    double speckle_contrast = 1.0; // 1 = fully developed (exponential) speckle
    double depth_decay_px = 0.0;   // 0 disables exponential depth attenuation

    int vessel_count = 3;
    double vessel_radius_min_px = 2.0;
    double vessel_radius_max_px = 6.0;
    int vessel_min_frames = 4;
    int vessel_max_frames = 12;
    int vessel_gap_px = 6;  // minimum tissue between lumen boundary and vessel wall

    int guidewire_width_alines = 30;
    int guidewire_start_aline = -1;  // -1 = random
    int guidewire_drift_alines = 2;  // max per-frame drift of the shadow band

    int confounder_count = 4;
    int roi_depth_px = 300;  // vessels are kept inside this depth below the lumen

    std::string segment_id = "phantom";

    PullbackMeta meta() const;
    // Throws ConfigError when the geometry cannot hold a vessel.
    void validate() const;
};

nlohmann::json to_json(const PhantomParams& p);
// Overlays the keys of `j` onto `base`; unknown keys raise ConfigError.
PhantomParams phantom_params_from_json(const nlohmann::json& j, PhantomParams base = {});

// Elliptical cross-section in polar pixel space. The theta distance is circular.
struct EllipseRegion {
    double center_a = 0.0;
    double center_r = 0.0;
    double radius_a = 1.0;
    double radius_r = 1.0;

    bool contains(int aline, int sample, int alines) const noexcept;
    // Number of grid pixels the ellipse covers.
    int raster_area(int alines, int samples) const;
};

struct VesselNode {
    int frame = 0;
    EllipseRegion shape;
};

struct VesselTrackTruth {
    int id = 0;
    std::vector<VesselNode> nodes;  // consecutive frames
};

enum class ConfounderKind { SideBranch, Calcification };

struct ConfounderTruth {
    int frame = 0;
    ConfounderKind kind = ConfounderKind::SideBranch;
    // For side branches center_r is ignored: the region hangs off the lumen
    // boundary with radius_r as its depth.
    EllipseRegion shape;
};

struct GroundTruth {
    std::vector<FrameMask> masks;
    std::vector<std::vector<int>> lumen_radius;  // [frame][aline]
    std::vector<AngularInterval> shadow;         // per frame
    std::vector<VesselTrackTruth> vessel_tracks;
    std::vector<ConfounderTruth> confounders;
};

struct Phantom {
    PolarPullback pullback;
    GroundTruth truth;
};

Phantom generate_phantom(const PhantomParams& params, std::uint64_t seed);

// Per-frame label image of confounder pixels (1 = side branch, 2 = calcification).
Mask rasterize_confounders(const GroundTruth& truth, int frame, int alines, int samples);

nlohmann::json truth_to_json(const GroundTruth& truth);
// Masks are not part of truth.json; they live in the pullback directory.
GroundTruth truth_from_json(const nlohmann::json& j);

// Writes the pullback directory (frames + masks) and truth.json.
void save_phantom(const Phantom& ph, const std::filesystem::path& dir);

}  // namespace ivoct
