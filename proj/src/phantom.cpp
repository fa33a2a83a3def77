#include "ivoct/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "ivoct/rng.hpp"

namespace ivoct {

using nlohmann::json;

namespace {

constexpr double kLumenLevel = 0.02;      // lumen and side-branch interior, times texture
constexpr double kVesselLevel = 0.05;     // vessel interior, times local tissue value
constexpr double kShadowLevel = 0.05;     // attenuation behind the guidewire
constexpr double kRidgeBoost = 0.35;
constexpr int kRidgeWidth = 3;
constexpr double kGuidewireLevel = 0.95;
constexpr int kGuidewireGap = 10;         // guidewire sits this far inside the lumen
constexpr double kMaxDriftA = 5.0;
constexpr double kMaxDriftR = 3.0;

double signed_circular(double d, double n) {
    d -= n * std::floor(d / n);
    return d > 0.5 * n ? d - n : d;
}

bool side_branch_contains(const EllipseRegion& e, int a, int r, int lumen_r, int alines) {
    if (r < lumen_r) return false;
    double da = signed_circular(a - e.center_a, alines) / e.radius_a;
    double dr = (r - lumen_r) / e.radius_r;
    return da * da + dr * dr <= 1.0;
}

int lumen_at(const PhantomParams& p, int frame, int a) {
    double phase = p.lumen_phase_step * frame;
    double th = 2.0 * std::numbers::pi * p.lumen_lobes * a / p.alines_per_frame + phase;
    return static_cast<int>(std::lround(p.lumen_radius_px + p.lumen_radius_amp_px * std::sin(th)));
}

// Minimum / maximum lumen radius over the A-lines spanned by an ellipse.
std::pair<int, int> lumen_range(const std::vector<int>& lumen, const EllipseRegion& e) {
    const int n = static_cast<int>(lumen.size());
    int lo = 1 << 30, hi = -(1 << 30);
    int a0 = static_cast<int>(std::floor(e.center_a - e.radius_a)) - 1;
    int a1 = static_cast<int>(std::ceil(e.center_a + e.radius_a)) + 1;
    for (int a = a0; a <= a1; ++a) {
        int v = lumen[wrap_index(a, n)];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    return {lo, hi};
}

bool ellipses_clear(const EllipseRegion& x, const EllipseRegion& y, int alines, double margin) {
    double da = std::abs(signed_circular(x.center_a - y.center_a, alines));
    double dr = std::abs(x.center_r - y.center_r);
    return da > x.radius_a + y.radius_a + margin || dr > x.radius_r + y.radius_r + margin;
}

struct DepthBounds {
    double lo;
    double hi;
};

// Admissible centre radius for an ellipse in one frame.
DepthBounds center_bounds(const PhantomParams& p, const std::vector<int>& lumen, const EllipseRegion& e) {
    auto [lmin, lmax] = lumen_range(lumen, e);
    double lo = lmax + p.vessel_gap_px + e.radius_r;
    double hi = std::min<double>(lmin + p.roi_depth_px, p.samples_per_aline) - 2.0 - e.radius_r;
    return {lo, hi};
}

}  // namespace

PullbackMeta PhantomParams::meta() const {
    PullbackMeta m;
    m.alines_per_frame = alines_per_frame;
    m.samples_per_aline = samples_per_aline;
    m.r_pixel_um = r_pixel_um;
    m.frame_spacing_mm = frame_spacing_mm;
    m.catheter_offset_px = catheter_offset_px;
    return m;
}

void PhantomParams::validate() const {
    meta().validate();
    if (n_frames < 0) throw ConfigError("n_frames must be >= 0");
    if (!(tissue_mean > 0.0 && tissue_mean <= 1.0)) throw ConfigError("tissue_mean must lie in (0,1]");
    if (speckle_contrast < 0.0 || speckle_contrast > 1.0) throw ConfigError("speckle_contrast must lie in [0,1]");
    if (depth_decay_px < 0.0) throw ConfigError("depth_decay_px must be >= 0");
    if (vessel_count < 0 || confounder_count < 0) throw ConfigError("counts must be >= 0");
    if (!(vessel_radius_min_px >= 1.0) || vessel_radius_max_px < vessel_radius_min_px)
        throw ConfigError("vessel radius range must satisfy 1 <= min <= max");
    if (vessel_min_frames < 1 || vessel_max_frames < vessel_min_frames)
        throw ConfigError("vessel frame range must satisfy 1 <= min <= max");
    if (vessel_count > 0 && vessel_min_frames > n_frames)
        throw ConfigError("vessel_min_frames exceeds n_frames");
    if (vessel_gap_px < kRidgeWidth + 1) throw ConfigError("vessel_gap_px must exceed the lumen ridge width");
    if (guidewire_width_alines < 0 || guidewire_width_alines >= alines_per_frame)
        throw ConfigError("guidewire_width_alines must lie in [0, alines_per_frame)");
    if (roi_depth_px < 1) throw ConfigError("roi_depth_px must be >= 1");
    double lmin = lumen_radius_px - std::abs(lumen_radius_amp_px);
    double lmax = lumen_radius_px + std::abs(lumen_radius_amp_px);
    if (lmin <= catheter_offset_px + 1) throw ConfigError("lumen radius collides with the catheter");
    double room = std::min<double>(lmin + roi_depth_px, samples_per_aline) - 2.0 - (lmax + vessel_gap_px);
    // Allow for the lumen varying across the vessel's angular extent.
    double slope = std::abs(lumen_radius_amp_px) * 2.0 * std::numbers::pi * lumen_lobes / alines_per_frame;
    room -= 2.0 * slope * (vessel_radius_max_px + 1.0);
    if (vessel_count > 0 && room < 2.0 * vessel_radius_max_px)
        throw ConfigError("infeasible phantom geometry: a vessel of the maximum radius cannot fit between "
                          "the lumen and the ROI depth");
}

bool EllipseRegion::contains(int a, int r, int alines) const noexcept {
    double da = signed_circular(a - center_a, alines) / radius_a;
    double dr = (r - center_r) / radius_r;
    return da * da + dr * dr <= 1.0;
}

int EllipseRegion::raster_area(int alines, int samples) const {
    int count = 0;
    int a0 = static_cast<int>(std::floor(center_a - radius_a)) - 1;
    int a1 = static_cast<int>(std::ceil(center_a + radius_a)) + 1;
    int r0 = std::max(0, static_cast<int>(std::floor(center_r - radius_r)) - 1);
    int r1 = std::min(samples - 1, static_cast<int>(std::ceil(center_r + radius_r)) + 1);
    for (int a = a0; a <= a1; ++a)
        for (int r = r0; r <= r1; ++r) count += contains(wrap_index(a, alines), r, alines);
    return count;
}

namespace {

struct Geometry {
    std::vector<std::vector<int>> lumen;
    std::vector<AngularInterval> shadow;
    std::vector<VesselTrackTruth> vessels;
    std::vector<ConfounderTruth> confounders;
};

Geometry plan_geometry(const PhantomParams& p, std::uint64_t seed) {
    const int A = p.alines_per_frame;
    Rng rng(derive_seed(seed, 0x5eed0001ULL));
    Geometry g;
    g.lumen.resize(p.n_frames, std::vector<int>(A));
    for (int f = 0; f < p.n_frames; ++f)
        for (int a = 0; a < A; ++a) g.lumen[f][a] = lumen_at(p, f, a);

    int gw = p.guidewire_start_aline >= 0 ? wrap_index(p.guidewire_start_aline, A) : rng.uniform_int(0, A - 1);
    for (int f = 0; f < p.n_frames; ++f) {
        if (f > 0 && p.guidewire_drift_alines > 0)
            gw = wrap_index(gw + rng.uniform_int(-p.guidewire_drift_alines, p.guidewire_drift_alines), A);
        g.shadow.push_back({gw, p.guidewire_width_alines});
    }

    auto clear_of_vessels = [&](const EllipseRegion& e, int frame, double margin) {
        for (const auto& t : g.vessels)
            for (const auto& n : t.nodes)
                if (n.frame == frame && !ellipses_clear(e, n.shape, A, margin)) return false;
        return true;
    };

    for (int v = 0; v < p.vessel_count; ++v) {
        bool placed = false;
        for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
            int len = rng.uniform_int(p.vessel_min_frames, std::min(p.vessel_max_frames, p.n_frames));
            int f0 = rng.uniform_int(0, p.n_frames - len);
            double rho = rng.uniform(p.vessel_radius_min_px, p.vessel_radius_max_px);
            double aspect = rng.uniform(0.8, 1.25);
            EllipseRegion e;
            e.radius_a = std::clamp(rho * aspect, p.vessel_radius_min_px, p.vessel_radius_max_px);
            e.radius_r = std::clamp(rho / aspect, p.vessel_radius_min_px, p.vessel_radius_max_px);
            e.center_a = rng.uniform(0.0, A);
            double frac = rng.uniform();
            VesselTrackTruth track;
            track.id = v;
            bool ok = true;
            double prev_r = 0.0;
            for (int k = 0; k < len && ok; ++k) {
                int f = f0 + k;
                if (k > 0) {
                    e.center_a += rng.uniform(-0.4 * kMaxDriftA, 0.4 * kMaxDriftA);
                    e.center_a -= A * std::floor(e.center_a / A);
                    frac = std::clamp(frac + rng.uniform(-0.05, 0.05), 0.0, 1.0);
                }
                auto b = center_bounds(p, g.lumen[f], e);
                if (b.hi < b.lo) {
                    ok = false;
                    break;
                }
                double target = b.lo + frac * (b.hi - b.lo);
                if (k > 0) target = std::clamp(target, prev_r - kMaxDriftR, prev_r + kMaxDriftR);
                e.center_r = target;
                if (e.center_r < b.lo || e.center_r > b.hi) ok = false;
                if (!clear_of_vessels(e, f, 3.0)) ok = false;
                prev_r = e.center_r;
                track.nodes.push_back({f, e});
            }
            if (ok) {
                g.vessels.push_back(std::move(track));
                placed = true;
            }
        }
        if (!placed) throw ConfigError("could not place vessel " + std::to_string(v) + " without overlap");
    }

    for (int c = 0; c < p.confounder_count; ++c) {
        ConfounderKind kind = (c % 2 == 0) ? ConfounderKind::SideBranch : ConfounderKind::Calcification;
        bool placed = false;
        for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
            int len = rng.uniform_int(1, std::min(4, std::max(1, p.n_frames)));
            if (p.n_frames == 0) break;
            int f0 = rng.uniform_int(0, p.n_frames - len);
            EllipseRegion e;
            e.center_a = rng.uniform(0.0, A);
            double frac = rng.uniform();
            if (kind == ConfounderKind::SideBranch) {
                e.radius_a = rng.uniform(3.0, 6.0);
                e.radius_r = rng.uniform(6.0, 14.0);
            } else {
                e.radius_a = rng.uniform(3.0, 8.0);
                e.radius_r = rng.uniform(3.0, 8.0);
            }
            std::vector<ConfounderTruth> nodes;
            bool ok = true;
            for (int k = 0; k < len && ok; ++k) {
                int f = f0 + k;
                if (k > 0) e.center_a += rng.uniform(-2.0, 2.0);
                e.center_a -= A * std::floor(e.center_a / A);
                EllipseRegion probe = e;
                if (kind == ConfounderKind::SideBranch) {
                    auto [lmin, lmax] = lumen_range(g.lumen[f], e);
                    probe.center_r = 0.5 * (lmin + lmax) + 0.5 * e.radius_r;
                    probe.radius_r = 0.5 * e.radius_r + 0.5 * (lmax - lmin) + 1.0;
                    e.center_r = 0.0;
                } else {
                    auto b = center_bounds(p, g.lumen[f], e);
                    if (b.hi < b.lo) {
                        ok = false;
                        break;
                    }
                    e.center_r = b.lo + frac * (b.hi - b.lo);
                    probe = e;
                }
                if (!clear_of_vessels(probe, f, 3.0)) ok = false;
                nodes.push_back({f, kind, e});
            }
            if (ok) {
                g.confounders.insert(g.confounders.end(), nodes.begin(), nodes.end());
                placed = true;
            }
        }
        if (!placed) throw ConfigError("could not place confounder " + std::to_string(c));
    }
    return g;
}

// Multiplicative speckle: mu_t * s, s ~ Exp(1) blended by the contrast,
// clipped to [0,1], then a 3x3 mean (theta wraps, r replicates).
Image speckle_texture(const PhantomParams& p, Rng& rng) {
    const int A = p.alines_per_frame;
    const int S = p.samples_per_aline;
    Image raw(A, S);
    for (auto& v : raw.data()) {
        double s = 1.0 + p.speckle_contrast * (rng.exponential() - 1.0);
        v = std::clamp(p.tissue_mean * s, 0.0, 1.0);
    }
    Image out(A, S);
    for (int a = 0; a < A; ++a) {
        for (int r = 0; r < S; ++r) {
            double acc = 0.0;
            for (int da = -1; da <= 1; ++da) {
                int aa = wrap_index(a + da, A);
                for (int dr = -1; dr <= 1; ++dr) acc += raw(aa, std::clamp(r + dr, 0, S - 1));
            }
            out(a, r) = acc / 9.0;
        }
    }
    return out;
}

}  // namespace

Mask rasterize_confounders(const GroundTruth& truth, int frame, int alines, int samples) {
    Mask out(alines, samples, 0);
    const auto& lumen = truth.lumen_radius.at(frame);
    for (const auto& c : truth.confounders) {
        if (c.frame != frame) continue;
        const auto& e = c.shape;
        int a0 = static_cast<int>(std::floor(e.center_a - e.radius_a)) - 1;
        int a1 = static_cast<int>(std::ceil(e.center_a + e.radius_a)) + 1;
        for (int aa = a0; aa <= a1; ++aa) {
            int a = wrap_index(aa, alines);
            for (int r = 0; r < samples; ++r) {
                bool in = c.kind == ConfounderKind::SideBranch ? side_branch_contains(e, a, r, lumen[a], alines)
                                                               : e.contains(a, r, alines);
                if (in) out(a, r) = c.kind == ConfounderKind::SideBranch ? 1 : 2;
            }
        }
    }
    return out;
}

Phantom generate_phantom(const PhantomParams& p, std::uint64_t seed) {
    p.validate();
    const int A = p.alines_per_frame;
    const int S = p.samples_per_aline;
    Geometry g = plan_geometry(p, seed);

    Phantom ph;
    ph.pullback.meta = p.meta();
    ph.pullback.segment_id = p.segment_id;
    ph.pullback.frames.resize(p.n_frames);
    ph.truth.masks.resize(p.n_frames);
    ph.truth.lumen_radius = g.lumen;
    ph.truth.shadow = g.shadow;
    ph.truth.vessel_tracks = g.vessels;
    ph.truth.confounders = g.confounders;

#pragma omp parallel for schedule(static)
    for (int f = 0; f < p.n_frames; ++f) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(f)));
        Image tex = speckle_texture(p, rng);
        const auto& lumen = g.lumen[f];
        Mask conf = rasterize_confounders(ph.truth, f, A, S);
        Mask vessel(A, S, 0);
        for (const auto& t : g.vessels) {
            for (const auto& n : t.nodes) {
                if (n.frame != f) continue;
                const auto& e = n.shape;
                int a0 = static_cast<int>(std::floor(e.center_a - e.radius_a)) - 1;
                int a1 = static_cast<int>(std::ceil(e.center_a + e.radius_a)) + 1;
                for (int aa = a0; aa <= a1; ++aa) {
                    int a = wrap_index(aa, A);
                    for (int r = 0; r < S; ++r)
                        if (e.contains(a, r, A)) vessel(a, r) = 1;
                }
            }
        }
        const auto& sh = g.shadow[f];
        Image img(A, S);
        for (int a = 0; a < A; ++a) {
            const int rl = lumen[a];
            const bool shadowed = sh.width > 0 && sh.contains(a, A);
            const int gw_r = std::max(p.catheter_offset_px + 1, rl - kGuidewireGap);
            for (int r = 0; r < S; ++r) {
                double t = tex(a, r);
                double v;
                if (r < rl) {
                    v = kLumenLevel * t;
                } else if (r < rl + kRidgeWidth) {
                    v = std::min(1.0, t + kRidgeBoost);
                } else {
                    v = t;
                    if (p.depth_decay_px > 0.0) v *= std::exp(-(r - rl) / p.depth_decay_px);
                }
                if (conf(a, r) == 1) v = kLumenLevel * t;
                if (conf(a, r) == 2) v = std::min(1.0, 0.7 + 0.3 * t);
                if (vessel(a, r)) v *= kVesselLevel;
                if (shadowed) {
                    if (r >= gw_r && r < gw_r + kRidgeWidth)
                        v = kGuidewireLevel;
                    else if (r >= gw_r + kRidgeWidth)
                        v *= kShadowLevel;
                }
                img(a, r) = std::clamp(v, 0.0, 1.0);
            }
        }
        ph.pullback.frames[f] = std::move(img);
        ph.truth.masks[f] = std::move(vessel);
    }
    return ph;
}

namespace {

json ellipse_json(const EllipseRegion& e) {
    return {{"center_a", e.center_a}, {"center_r", e.center_r}, {"radius_a", e.radius_a}, {"radius_r", e.radius_r}};
}

EllipseRegion ellipse_from(const json& j) {
    EllipseRegion e;
    e.center_a = j.at("center_a").get<double>();
    e.center_r = j.at("center_r").get<double>();
    e.radius_a = j.at("radius_a").get<double>();
    e.radius_r = j.at("radius_r").get<double>();
    return e;
}

}  // namespace

json to_json(const PhantomParams& p) {
    return {
        {"n_frames", p.n_frames},
        {"alines_per_frame", p.alines_per_frame},
        {"samples_per_aline", p.samples_per_aline},
        {"r_pixel_um", p.r_pixel_um},
        {"frame_spacing_mm", p.frame_spacing_mm},
        {"catheter_offset_px", p.catheter_offset_px},
        {"lumen_radius_px", p.lumen_radius_px},
        {"lumen_radius_amp_px", p.lumen_radius_amp_px},
        {"lumen_lobes", p.lumen_lobes},
        {"lumen_phase_step", p.lumen_phase_step},
        {"tissue_mean", p.tissue_mean},
        {"speckle_contrast", p.speckle_contrast},
        {"depth_decay_px", p.depth_decay_px},
        {"vessel_count", p.vessel_count},
        {"vessel_radius_min_px", p.vessel_radius_min_px},
        {"vessel_radius_max_px", p.vessel_radius_max_px},
        {"vessel_min_frames", p.vessel_min_frames},
        {"vessel_max_frames", p.vessel_max_frames},
        {"vessel_gap_px", p.vessel_gap_px},
        {"guidewire_width_alines", p.guidewire_width_alines},
        {"guidewire_start_aline", p.guidewire_start_aline},
        {"guidewire_drift_alines", p.guidewire_drift_alines},
        {"confounder_count", p.confounder_count},
        {"roi_depth_px", p.roi_depth_px},
        {"segment_id", p.segment_id},
    };
}

PhantomParams phantom_params_from_json(const json& j, PhantomParams base) {
    if (!j.is_object()) throw ConfigError("phantom parameters must be a JSON object");
    json merged = to_json(base);
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!merged.contains(it.key())) throw ConfigError("unknown phantom parameter '" + it.key() + "'");
        merged[it.key()] = it.value();
    }
    PhantomParams p;
    try {
        p.n_frames = merged.at("n_frames").get<int>();
        p.alines_per_frame = merged.at("alines_per_frame").get<int>();
        p.samples_per_aline = merged.at("samples_per_aline").get<int>();
        p.r_pixel_um = merged.at("r_pixel_um").get<double>();
        p.frame_spacing_mm = merged.at("frame_spacing_mm").get<double>();
        p.catheter_offset_px = merged.at("catheter_offset_px").get<int>();
        p.lumen_radius_px = merged.at("lumen_radius_px").get<double>();
        p.lumen_radius_amp_px = merged.at("lumen_radius_amp_px").get<double>();
        p.lumen_lobes = merged.at("lumen_lobes").get<int>();
        p.lumen_phase_step = merged.at("lumen_phase_step").get<double>();
        p.tissue_mean = merged.at("tissue_mean").get<double>();
        p.speckle_contrast = merged.at("speckle_contrast").get<double>();
        p.depth_decay_px = merged.at("depth_decay_px").get<double>();
        p.vessel_count = merged.at("vessel_count").get<int>();
        p.vessel_radius_min_px = merged.at("vessel_radius_min_px").get<double>();
        p.vessel_radius_max_px = merged.at("vessel_radius_max_px").get<double>();
        p.vessel_min_frames = merged.at("vessel_min_frames").get<int>();
        p.vessel_max_frames = merged.at("vessel_max_frames").get<int>();
        p.vessel_gap_px = merged.at("vessel_gap_px").get<int>();
        p.guidewire_width_alines = merged.at("guidewire_width_alines").get<int>();
        p.guidewire_start_aline = merged.at("guidewire_start_aline").get<int>();
        p.guidewire_drift_alines = merged.at("guidewire_drift_alines").get<int>();
        p.confounder_count = merged.at("confounder_count").get<int>();
        p.roi_depth_px = merged.at("roi_depth_px").get<int>();
        p.segment_id = merged.at("segment_id").get<std::string>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad phantom parameter type: ") + e.what());
    }
    return p;
}

json truth_to_json(const GroundTruth& t) {
    json j;
    j["lumen_radius"] = t.lumen_radius;
    json shadow = json::array();
    for (const auto& s : t.shadow) shadow.push_back({{"start_aline", s.start}, {"width", s.width}});
    j["shadow"] = shadow;
    json tracks = json::array();
    for (const auto& tr : t.vessel_tracks) {
        json nodes = json::array();
        for (const auto& n : tr.nodes) {
            json node = ellipse_json(n.shape);
            node["frame"] = n.frame;
            nodes.push_back(node);
        }
        tracks.push_back({{"id", tr.id}, {"nodes", nodes}});
    }
    j["tracks"] = tracks;
    json conf = json::array();
    for (const auto& c : t.confounders) {
        json node = ellipse_json(c.shape);
        node["frame"] = c.frame;
        node["kind"] = c.kind == ConfounderKind::SideBranch ? "side_branch" : "calcification";
        conf.push_back(node);
    }
    j["confounders"] = conf;
    return j;
}

GroundTruth truth_from_json(const json& j) {
    GroundTruth t;
    try {
        t.lumen_radius = j.at("lumen_radius").get<std::vector<std::vector<int>>>();
        for (const auto& s : j.at("shadow")) t.shadow.push_back({s.at("start_aline").get<int>(), s.at("width").get<int>()});
        for (const auto& tr : j.at("tracks")) {
            VesselTrackTruth track;
            track.id = tr.at("id").get<int>();
            for (const auto& n : tr.at("nodes")) track.nodes.push_back({n.at("frame").get<int>(), ellipse_from(n)});
            t.vessel_tracks.push_back(std::move(track));
        }
        if (j.contains("confounders")) {
            for (const auto& c : j.at("confounders")) {
                ConfounderTruth ct;
                ct.frame = c.at("frame").get<int>();
                auto kind = c.at("kind").get<std::string>();
                if (kind == "side_branch")
                    ct.kind = ConfounderKind::SideBranch;
                else if (kind == "calcification")
                    ct.kind = ConfounderKind::Calcification;
                else
                    throw FormatError("unknown confounder kind '" + kind + "'");
                ct.shape = ellipse_from(c);
                t.confounders.push_back(ct);
            }
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed truth.json: ") + e.what());
    }
    return t;
}

void save_phantom(const Phantom& ph, const std::filesystem::path& dir) {
    save_pullback(ph.pullback, dir, ph.truth.masks);
    auto path = dir / "truth.json";
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << truth_to_json(ph.truth).dump() << "\n";
    if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace ivoct
