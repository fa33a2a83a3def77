#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "ivoct/candidates.hpp"
#include "ivoct/imaging.hpp"
#include "ivoct/preprocess.hpp"

namespace ivoct {

struct TrackNode {
    int frame = 0;
    int candidate = -1;  // index into that frame's candidate list, -1 when synthetic
    double centroid_a = 0.0;
    double centroid_r = 0.0;  // raw radial samples
    double area_mm2 = 0.0;
};

struct MicrovesselTrack {
    int id = 0;
    std::vector<TrackNode> nodes;  // consecutive frames
    double length_mm = 0.0;
    double axial_extent_mm = 0.0;
    double mean_diameter_um = 0.0;

    int frame_count() const noexcept { return static_cast<int>(nodes.size()); }
};

struct TrackConfig {
    double max_dr_px = 10.0;
    double max_dtheta_alines = 12.0;
    int min_frames = 3;

    void validate() const;
};

// Greedy nearest-centroid matching between consecutive frames. Each candidate
// joins at most one track; unmatched candidates open new tracks. Metrics are
// filled in.
std::vector<MicrovesselTrack> link_tracks(const std::vector<std::vector<Candidate>>& per_frame,
                                          const PullbackMeta& meta, const TrackConfig& cfg = {});

// Keeps tracks spanning at least min_frames frames.
std::vector<MicrovesselTrack> filter_min_frames(std::vector<MicrovesselTrack> tracks, int min_frames = 3);

// Clears the pixels of every candidate that is not a node of a kept track.
std::vector<Mask> apply_track_filter(const std::vector<Mask>& masks,
                                     const std::vector<std::vector<Candidate>>& per_frame,
                                     std::span<const MicrovesselTrack> kept);

// Position in mm: x, y in the cross-section (catheter at the origin), z along
// the pullback.
std::array<double, 3> polar_to_mm(int frame, double aline, double sample, const PullbackMeta& meta);

struct TrackMetrics {
    double length_mm = 0.0;        // along the 3-D centroid polyline
    double axial_extent_mm = 0.0;  // (nodes - 1) * frame spacing
    double mean_diameter_um = 0.0;
};

// Needs at least two nodes.
TrackMetrics track_metrics(const MicrovesselTrack& t, const PullbackMeta& meta);

// Diameter of the circle of the same area.
double equivalent_diameter_um(double area_mm2);

// ASCII PLY: one ring of lumen points per frame, then one vertex chain per
// track joined by edges. Units are mm.
void export_ply(std::span<const LumenContour> lumen, std::span<const MicrovesselTrack> tracks,
                const PullbackMeta& meta, const std::filesystem::path& path, int ring_stride = 1);

void write_tracks_csv(const std::filesystem::path& path, std::span<const MicrovesselTrack> tracks);

}  // namespace ivoct
