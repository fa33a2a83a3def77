#include "ivoct/reconstruct3d.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <tuple>

#include "ivoct/error.hpp"

namespace ivoct {

void TrackConfig::validate() const {
    if (!(max_dr_px >= 0.0) || !(max_dtheta_alines >= 0.0)) throw ConfigError("track gates must be >= 0");
    if (min_frames < 1) throw ConfigError("min_frames must be >= 1");
}

namespace {

double circular_distance(double a, double b, int n) {
    double d = std::fmod(std::abs(a - b), static_cast<double>(n));
    return std::min(d, n - d);
}

}  // namespace

std::vector<MicrovesselTrack> link_tracks(const std::vector<std::vector<Candidate>>& per_frame,
                                          const PullbackMeta& meta, const TrackConfig& cfg) {
    cfg.validate();
    const int na = meta.alines_per_frame;
    std::vector<MicrovesselTrack> tracks;
    std::vector<int> open;  // tracks whose last node is in the previous frame

    for (int f = 0; f < static_cast<int>(per_frame.size()); ++f) {
        const auto& cands = per_frame[f];
        struct Pair {
            double cost;
            int track, cand;
        };
        std::vector<Pair> pairs;
        for (int t : open) {
            const auto& last = tracks[t].nodes.back();
            for (int c = 0; c < static_cast<int>(cands.size()); ++c) {
                double dr = std::abs(cands[c].centroid_r_raw - last.centroid_r);
                double da = circular_distance(cands[c].centroid_a, last.centroid_a, na);
                if (dr <= cfg.max_dr_px && da <= cfg.max_dtheta_alines) pairs.push_back({std::hypot(dr, da), t, c});
            }
        }
        std::sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) {
            return std::tie(x.cost, x.track, x.cand) < std::tie(y.cost, y.track, y.cand);
        });

        std::vector<char> track_used(tracks.size(), 0), cand_used(cands.size(), 0);
        std::vector<int> next_open;
        auto node = [&](int c) {
            const auto& cd = cands[c];
            return TrackNode{f, c, cd.centroid_a, cd.centroid_r_raw, cd.area_mm2};
        };
        for (const auto& p : pairs) {
            if (track_used[p.track] || cand_used[p.cand]) continue;
            track_used[p.track] = cand_used[p.cand] = 1;
            tracks[p.track].nodes.push_back(node(p.cand));
            next_open.push_back(p.track);
        }
        for (int c = 0; c < static_cast<int>(cands.size()); ++c) {
            if (cand_used[c]) continue;
            MicrovesselTrack t;
            t.id = static_cast<int>(tracks.size());
            t.nodes.push_back(node(c));
            next_open.push_back(t.id);
            tracks.push_back(std::move(t));
        }
        std::sort(next_open.begin(), next_open.end());
        open = std::move(next_open);
    }

    for (auto& t : tracks) {
        if (t.nodes.size() < 2) {
            t.length_mm = t.axial_extent_mm = 0.0;
            t.mean_diameter_um = equivalent_diameter_um(t.nodes.front().area_mm2);
            continue;
        }
        auto m = track_metrics(t, meta);
        t.length_mm = m.length_mm;
        t.axial_extent_mm = m.axial_extent_mm;
        t.mean_diameter_um = m.mean_diameter_um;
    }
    return tracks;
}

std::vector<MicrovesselTrack> filter_min_frames(std::vector<MicrovesselTrack> tracks, int min_frames) {
    std::erase_if(tracks, [&](const MicrovesselTrack& t) { return t.frame_count() < min_frames; });
    return tracks;
}

std::vector<Mask> apply_track_filter(const std::vector<Mask>& masks,
                                     const std::vector<std::vector<Candidate>>& per_frame,
                                     std::span<const MicrovesselTrack> kept) {
    if (masks.size() != per_frame.size()) throw ContractError("apply_track_filter: masks and candidate lists differ in length");
    std::vector<std::vector<char>> keep(per_frame.size());
    for (std::size_t f = 0; f < per_frame.size(); ++f) keep[f].assign(per_frame[f].size(), 0);
    for (const auto& t : kept)
        for (const auto& n : t.nodes)
            if (n.candidate >= 0) keep.at(n.frame).at(n.candidate) = 1;

    std::vector<Mask> out = masks;
    for (std::size_t f = 0; f < masks.size(); ++f)
        for (std::size_t c = 0; c < per_frame[f].size(); ++c)
            if (!keep[f][c])
                for (auto [a, r] : per_frame[f][c].pixels) out[f](a, r) = 0;
    return out;
}

std::array<double, 3> polar_to_mm(int frame, double aline, double sample, const PullbackMeta& meta) {
    const double rho = (sample + 0.5) * meta.r_pixel_mm();
    const double th = 2.0 * std::numbers::pi * aline / meta.alines_per_frame;
    return {rho * std::cos(th), rho * std::sin(th), frame * meta.frame_spacing_mm};
}

double equivalent_diameter_um(double area_mm2) { return 2.0 * std::sqrt(area_mm2 / std::numbers::pi) * 1000.0; }

TrackMetrics track_metrics(const MicrovesselTrack& t, const PullbackMeta& meta) {
    if (t.nodes.size() < 2) throw ContractError("track_metrics: a track needs at least two nodes");
    TrackMetrics m;
    // Neumaier summation keeps long stationary tracks at their exact chord sum.
    double sum = 0.0, comp = 0.0;
    auto prev = polar_to_mm(t.nodes[0].frame, t.nodes[0].centroid_a, t.nodes[0].centroid_r, meta);
    for (std::size_t i = 1; i < t.nodes.size(); ++i) {
        const auto& n = t.nodes[i];
        if (n.frame != t.nodes[i - 1].frame + 1) throw ContractError("track_metrics: frames must be consecutive");
        auto p = polar_to_mm(n.frame, n.centroid_a, n.centroid_r, meta);
        double step = std::hypot(p[0] - prev[0], p[1] - prev[1], p[2] - prev[2]);
        double s = sum + step;
        comp += std::abs(sum) >= step ? (sum - s) + step : (step - s) + sum;
        sum = s;
        prev = p;
    }
    m.length_mm = sum + comp;
    m.axial_extent_mm = (t.nodes.size() - 1) * meta.frame_spacing_mm;
    double d = 0.0;
    for (const auto& n : t.nodes) d += equivalent_diameter_um(n.area_mm2);
    m.mean_diameter_um = d / t.nodes.size();
    return m;
}

void export_ply(std::span<const LumenContour> lumen, std::span<const MicrovesselTrack> tracks,
                const PullbackMeta& meta, const std::filesystem::path& path, int ring_stride) {
    if (ring_stride < 1) throw ContractError("export_ply: ring_stride must be >= 1");
    struct Vertex {
        std::array<double, 3> p;
        std::array<int, 3> rgb;
    };
    std::vector<Vertex> verts;
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (std::size_t f = 0; f < lumen.size(); ++f) {
        const auto& r = lumen[f].radius_px;
        for (std::size_t a = 0; a < r.size(); a += ring_stride)
            verts.push_back({polar_to_mm(static_cast<int>(f), static_cast<double>(a), r[a], meta), {160, 160, 160}});
    }
    static constexpr std::array<std::array<int, 3>, 6> palette{
        {{230, 25, 75}, {60, 180, 75}, {0, 130, 200}, {245, 130, 48}, {145, 30, 180}, {70, 240, 240}}};
    for (const auto& t : tracks) {
        const auto& rgb = palette[static_cast<std::size_t>(t.id) % palette.size()];
        for (std::size_t i = 0; i < t.nodes.size(); ++i) {
            const auto& n = t.nodes[i];
            if (i > 0) edges.emplace_back(verts.size() - 1, verts.size());
            verts.push_back({polar_to_mm(n.frame, n.centroid_a, n.centroid_r, meta), rgb});
        }
    }

    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "ply\nformat ascii 1.0\ncomment units mm\n"
        << "element vertex " << verts.size() << "\n"
        << "property float x\nproperty float y\nproperty float z\n"
        << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        << "element edge " << edges.size() << "\n"
        << "property int vertex1\nproperty int vertex2\nend_header\n";
    char buf[160];
    for (const auto& v : verts) {
        std::snprintf(buf, sizeof buf, "%.6f %.6f %.6f %d %d %d\n", v.p[0], v.p[1], v.p[2], v.rgb[0], v.rgb[1],
                      v.rgb[2]);
        out << buf;
    }
    for (auto [a, b] : edges) out << a << ' ' << b << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

void write_tracks_csv(const std::filesystem::path& path, std::span<const MicrovesselTrack> tracks) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "track_id,n_frames,length_mm,axial_extent_mm,mean_diameter_um,first_frame\n";
    char buf[200];
    for (const auto& t : tracks) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.6f,%.6f,%.4f,%d\n", t.id, t.frame_count(), t.length_mm,
                      t.axial_extent_mm, t.mean_diameter_um, t.nodes.front().frame);
        out << buf;
    }
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace ivoct
