#include "ivoct/preprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

namespace ivoct {

using nlohmann::json;

void PreprocessConfig::validate() const {
    if (roi_depth_px < 1) throw ConfigError("roi_depth_px must be >= 1");
    if (gauss_ksize < 1 || gauss_ksize % 2 == 0) throw ConfigError("gauss_ksize must be odd and positive");
    if (!(gauss_sigma > 0.0)) throw ConfigError("gauss_sigma must be > 0");
    if (lumen_lambda < 0.0) throw ConfigError("lumen_lambda must be >= 0");
    if (lumen_max_step < 1) throw ConfigError("lumen_max_step must be >= 1");
    if (lumen_search_px < 1) throw ConfigError("lumen_search_px must be >= 1");
    if (lumen_median_window < 1 || lumen_median_window % 2 == 0)
        throw ConfigError("lumen_median_window must be odd and positive");
    if (gw_window < 1) throw ConfigError("gw_window must be >= 1");
    if (gw_smooth < 1 || gw_smooth % 2 == 0) throw ConfigError("gw_smooth must be odd and positive");
    if (gw_energy_depth < 1) throw ConfigError("gw_energy_depth must be >= 1");
    if (!(gw_ratio > 0.0)) throw ConfigError("gw_ratio must be > 0");
}

double otsu_threshold(const Image& img) {
    constexpr int kBins = 256;
    std::array<double, kBins> hist{};
    for (double v : img.data()) hist[std::clamp(static_cast<int>(v * kBins), 0, kBins - 1)] += 1.0;
    const double total = static_cast<double>(img.size());
    if (total == 0.0) return 0.5;
    double sum_all = 0.0;
    for (int i = 0; i < kBins; ++i) sum_all += i * hist[i];
    double w0 = 0.0, sum0 = 0.0, best = -1.0;
    int best_i = 0;
    for (int i = 0; i < kBins; ++i) {
        w0 += hist[i];
        sum0 += i * hist[i];
        double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        double m0 = sum0 / w0;
        double m1 = (sum_all - sum0) / w1;
        double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best) {
            best = between;
            best_i = i;
        }
    }
    return (best_i + 1.0) / kBins;
}

namespace {

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    double hi = *mid;
    if (v.size() % 2 == 1) return hi;
    double lo = *std::max_element(v.begin(), mid);
    return 0.5 * (lo + hi);
}

constexpr int kMissing = -1;

// First sample past the catheter above the Otsu threshold, per A-line.
std::vector<int> threshold_candidates(const PolarFrame& f, const PullbackMeta& meta, double thr) {
    std::vector<int> c(f.rows(), kMissing);
    for (int a = 0; a < f.rows(); ++a) {
        auto line = f.row(a);
        for (int r = meta.catheter_offset_px; r < f.cols(); ++r) {
            if (line[r] > thr) {
                c[a] = r;
                break;
            }
        }
    }
    return c;
}

// Circular median over available candidates; gaps filled by the global median.
std::vector<int> median_filter_candidates(const std::vector<int>& c, int window, const std::vector<bool>& ignore) {
    const int n = static_cast<int>(c.size());
    std::vector<double> all;
    for (int a = 0; a < n; ++a)
        if (c[a] != kMissing && !ignore[a]) all.push_back(c[a]);
    const int fallback = static_cast<int>(std::lround(median_of(all)));
    std::vector<int> out(n);
    std::vector<double> buf;
    const int h = window / 2;
    for (int a = 0; a < n; ++a) {
        buf.clear();
        for (int d = -h; d <= h; ++d) {
            int b = wrap_index(a + d, n);
            if (c[b] != kMissing && !ignore[b]) buf.push_back(c[b]);
        }
        out[a] = buf.empty() ? fallback : static_cast<int>(std::lround(median_of(buf)));
    }
    return out;
}

}  // namespace

std::optional<AngularInterval> detect_guidewire(const PolarFrame& f, const std::optional<LumenContour>& lumen,
                                                const PullbackMeta& meta, const PreprocessConfig& cfg) {
    const int A = f.rows();
    const int S = f.cols();
    if (A != meta.alines_per_frame || S != meta.samples_per_aline)
        throw ContractError("detect_guidewire: frame does not match metadata");

    std::vector<int> est;
    if (lumen) {
        if (static_cast<int>(lumen->radius_px.size()) != A) throw ContractError("lumen contour length mismatch");
        est = lumen->radius_px;
    } else {
        auto cand = threshold_candidates(f, meta, otsu_threshold(f));
        est = median_filter_candidates(cand, cfg.lumen_median_window, std::vector<bool>(A, false));
    }

    // Mean intensity beyond the lumen (skipping the boundary ridge).
    constexpr int kRidgeSkip = 4;
    std::vector<double> energy(A, 0.0);
    for (int a = 0; a < A; ++a) {
        int r0 = std::clamp(est[a] + kRidgeSkip, 0, S);
        int r1 = std::min(S, r0 + cfg.gw_energy_depth);
        if (r1 <= r0) continue;
        auto line = f.row(a);
        energy[a] = std::accumulate(line.begin() + r0, line.begin() + r1, 0.0) / (r1 - r0);
    }

    std::vector<double> smooth(A, 0.0);
    const int h = cfg.gw_smooth / 2;
    for (int a = 0; a < A; ++a) {
        double acc = 0.0;
        for (int d = -h; d <= h; ++d) acc += energy[wrap_index(a + d, A)];
        smooth[a] = acc / cfg.gw_smooth;
    }

    // First boundary: global minimum of the smoothed energy.
    int amin = static_cast<int>(std::min_element(smooth.begin(), smooth.end()) - smooth.begin());
    const int W = std::min(cfg.gw_window, A / 4);
    if (W < 1) return std::nullopt;

    // Local background from the ring (W, 2W] around the minimum.
    std::vector<double> ring;
    for (int d = W + 1; d <= 2 * W && d < A / 2; ++d) {
        ring.push_back(smooth[wrap_index(amin + d, A)]);
        ring.push_back(smooth[wrap_index(amin - d, A)]);
    }
    double background = ring.empty() ? median_of(smooth) : median_of(ring);
    double thr = 0.5 * (smooth[amin] + background);

    // Second boundary: expand inside the small window while below the midpoint.
    int left = 0, right = 0;
    while (left < W && smooth[wrap_index(amin - left - 1, A)] <= thr) ++left;
    while (right < W && smooth[wrap_index(amin + right + 1, A)] <= thr) ++right;
    AngularInterval band{wrap_index(amin - left, A), left + right + 1};

    double band_energy = 0.0;
    for (int k = 0; k < band.width; ++k) band_energy += energy[wrap_index(band.start + k, A)];
    band_energy /= band.width;
    double median_energy = median_of(energy);
    if (!(band_energy < cfg.gw_ratio * median_energy)) return std::nullopt;
    return band;
}

namespace {

// Dark-to-bright radial edge strength at (a, r).
double radial_gradient(std::span<const double> line, int r) {
    const int S = static_cast<int>(line.size());
    auto at = [&](int i) { return line[std::clamp(i, 0, S - 1)]; };
    return 0.5 * (at(r) + at(r + 1)) - 0.5 * (at(r - 2) + at(r - 1));
}

struct Band {
    int lo;
    int hi;  // inclusive
    int size() const { return hi - lo + 1; }
};

constexpr double kInf = std::numeric_limits<double>::infinity();

// Viterbi over a chain of A-lines. `order` lists the A-lines visited; when
// `fixed_start` is set the first state is pinned and the closure back to it
// is charged. Returns the cost and fills `path` (indexed like `order`).
double chain_dp(const std::vector<int>& order, const std::vector<Band>& bands,
                const std::vector<std::vector<double>>& cost, double lambda, int max_step,
                std::optional<int> fixed_start, std::vector<int>& path) {
    const std::size_t L = order.size();
    std::vector<std::vector<double>> acc(L);
    std::vector<std::vector<int>> back(L);
    {
        const Band& b = bands[order[0]];
        acc[0].assign(b.size(), kInf);
        for (int s = 0; s < b.size(); ++s)
            if (!fixed_start || b.lo + s == *fixed_start) acc[0][s] = cost[order[0]][s];
    }
    for (std::size_t i = 1; i < L; ++i) {
        const Band& pb = bands[order[i - 1]];
        const Band& b = bands[order[i]];
        acc[i].assign(b.size(), kInf);
        back[i].assign(b.size(), -1);
        for (int s = 0; s < b.size(); ++s) {
            int r = b.lo + s;
            int lo = std::max(pb.lo, r - max_step);
            int hi = std::min(pb.hi, r + max_step);
            double best = kInf;
            int arg = -1;
            for (int rp = lo; rp <= hi; ++rp) {
                double v = acc[i - 1][rp - pb.lo] + lambda * std::abs(r - rp);
                if (v < best) {
                    best = v;
                    arg = rp;
                }
            }
            if (arg >= 0) {
                acc[i][s] = best + cost[order[i]][s];
                back[i][s] = arg;
            }
        }
    }
    const Band& lb = bands[order[L - 1]];
    double best = kInf;
    int arg = -1;
    for (int s = 0; s < lb.size(); ++s) {
        double v = acc[L - 1][s];
        if (fixed_start) {
            int jump = std::abs(lb.lo + s - *fixed_start);
            if (jump > max_step) continue;
            v += lambda * jump;
        }
        if (v < best) {
            best = v;
            arg = lb.lo + s;
        }
    }
    if (arg < 0) return kInf;
    path.assign(L, 0);
    path[L - 1] = arg;
    for (std::size_t i = L - 1; i > 0; --i) path[i - 1] = back[i][path[i] - bands[order[i]].lo];
    return best;
}

}  // namespace

LumenContour detect_lumen(const PolarFrame& f, const std::optional<AngularInterval>& shadow,
                          const PullbackMeta& meta, const PreprocessConfig& cfg) {
    const int A = f.rows();
    const int S = f.cols();
    if (A != meta.alines_per_frame || S != meta.samples_per_aline)
        throw ContractError("detect_lumen: frame does not match metadata");
    const int r_min = meta.catheter_offset_px;

    std::vector<bool> in_shadow(A, false);
    bool has_shadow = shadow && shadow->width > 0 && shadow->width < A - 1;
    if (has_shadow)
        for (int a = 0; a < A; ++a) in_shadow[a] = shadow->contains(a, A);

    auto cand = threshold_candidates(f, meta, otsu_threshold(f));
    int considered = 0, missing = 0;
    for (int a = 0; a < A; ++a) {
        if (in_shadow[a]) continue;
        ++considered;
        missing += cand[a] == kMissing;
    }
    if (considered == 0 || 2 * missing > considered)
        throw DetectionError("no lumen boundary: more than half of the A-lines have no above-threshold sample");

    auto centre = median_filter_candidates(cand, cfg.lumen_median_window, in_shadow);

    std::vector<Band> bands(A);
    std::vector<std::vector<double>> cost(A);
    for (int a = 0; a < A; ++a) {
        bands[a] = {std::clamp(centre[a] - cfg.lumen_search_px, r_min, S - 1),
                    std::clamp(centre[a] + cfg.lumen_search_px, r_min, S - 1)};
        auto line = f.row(a);
        cost[a].resize(bands[a].size());
        for (int s = 0; s < bands[a].size(); ++s) cost[a][s] = -radial_gradient(line, bands[a].lo + s);
    }

    LumenContour out;
    out.radius_px.assign(A, r_min);
    std::vector<int> path;
    auto solve_open = [&](const std::vector<int>& order) {
        if (chain_dp(order, bands, cost, cfg.lumen_lambda, cfg.lumen_max_step, std::nullopt, path) == kInf) {
            // Bands too far apart for the step bound: fall back to the full range.
            std::vector<Band> wide(A, Band{r_min, S - 1});
            std::vector<std::vector<double>> wide_cost(A);
            for (int a = 0; a < A; ++a) {
                auto line = f.row(a);
                wide_cost[a].resize(wide[a].size());
                for (int s = 0; s < wide[a].size(); ++s) wide_cost[a][s] = -radial_gradient(line, r_min + s);
            }
            chain_dp(order, wide, wide_cost, cfg.lumen_lambda, cfg.lumen_max_step, std::nullopt, path);
        }
    };

    if (has_shadow) {
        std::vector<int> order;
        for (int k = 0; k < A - shadow->width; ++k) order.push_back(wrap_index(shadow->start + shadow->width + k, A));
        solve_open(order);
        for (std::size_t i = 0; i < order.size(); ++i) out.radius_px[order[i]] = path[i];
        // Linear interpolation across the shadow band between its edge A-lines.
        int before = wrap_index(shadow->start - 1, A);
        int after = wrap_index(shadow->start + shadow->width, A);
        double r_before = out.radius_px[before];
        double r_after = out.radius_px[after];
        for (int k = 0; k < shadow->width; ++k) {
            double t = (k + 1.0) / (shadow->width + 1.0);
            out.radius_px[wrap_index(shadow->start + k, A)] =
                static_cast<int>(std::lround(r_before + t * (r_after - r_before)));
        }
    } else {
        std::vector<int> order(A);
        std::iota(order.begin(), order.end(), 0);
        double best = kInf;
        std::vector<int> best_path;
        for (int s = bands[0].lo; s <= bands[0].hi; ++s) {
            double v = chain_dp(order, bands, cost, cfg.lumen_lambda, cfg.lumen_max_step, s, path);
            if (v < best) {
                best = v;
                best_path = path;
            }
        }
        if (best == kInf) {
            solve_open(order);
            best_path = path;
        }
        out.radius_px = best_path;
    }
    return out;
}

ShiftedFrame pixel_shift(const PolarFrame& f, const LumenContour& lumen) {
    const int A = f.rows();
    const int S = f.cols();
    if (static_cast<int>(lumen.radius_px.size()) != A) throw ContractError("pixel_shift: contour length mismatch");
    ShiftedFrame out{Image(A, S, 0.0), lumen.radius_px};
    for (int a = 0; a < A; ++a) {
        int k = lumen.radius_px[a];
        if (k < 0 || k >= S) throw ContractError("pixel_shift: lumen radius outside the A-line");
        auto src = f.row(a);
        std::copy(src.begin() + k, src.end(), out.pixels.row(a).begin());
    }
    return out;
}

Image pixel_unshift(const Image& shifted, const std::vector<int>& shift, int raw_samples) {
    const int A = shifted.rows();
    if (static_cast<int>(shift.size()) != A) throw ContractError("pixel_unshift: shift record length mismatch");
    Image out(A, raw_samples, 0.0);
    for (int a = 0; a < A; ++a)
        for (int j = 0; j < shifted.cols() && j + shift[a] < raw_samples; ++j) out(a, j + shift[a]) = shifted(a, j);
    return out;
}

std::vector<double> gaussian_kernel(int ksize, double sigma) {
    if (ksize < 1 || ksize % 2 == 0) throw ContractError("gaussian kernel size must be odd");
    if (!(sigma > 0.0)) throw ContractError("gaussian sigma must be > 0");
    std::vector<double> k(ksize);
    const int c = ksize / 2;
    for (int i = 0; i < ksize; ++i) k[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    double s = std::accumulate(k.begin(), k.end(), 0.0);
    for (auto& v : k) v /= s;
    return k;
}

Image gaussian_smooth(const Image& img, int ksize, double sigma) {
    auto k = gaussian_kernel(ksize, sigma);
    const int c = ksize / 2;
    const int A = img.rows();
    const int S = img.cols();
    Image tmp(A, S), out(A, S);
    for (int a = 0; a < A; ++a) {
        auto line = img.row(a);
        for (int r = 0; r < S; ++r) {
            double acc = 0.0;
            for (int i = 0; i < ksize; ++i) acc += k[i] * line[std::clamp(r + i - c, 0, S - 1)];
            tmp(a, r) = acc;
        }
    }
    for (int a = 0; a < A; ++a) {
        auto dst = out.row(a);
        std::fill(dst.begin(), dst.end(), 0.0);
        for (int i = 0; i < ksize; ++i) {
            auto src = tmp.row(wrap_index(a + i - c, A));
            for (int r = 0; r < S; ++r) dst[r] += k[i] * src[r];
        }
    }
    return out;
}

json to_json(const FrameTransform& t) {
    json j;
    j["shift_record"] = t.shift_record;
    j["shadow"] = t.shadow ? json{{"start_aline", t.shadow->start}, {"width", t.shadow->width}} : json(nullptr);
    j["roi_depth_px"] = t.roi_depth_px;
    j["raw_samples"] = t.raw_samples;
    return j;
}

FrameTransform transform_from_json(const json& j) {
    FrameTransform t;
    try {
        t.shift_record = j.at("shift_record").get<std::vector<int>>();
        if (!j.at("shadow").is_null())
            t.shadow = AngularInterval{j.at("shadow").at("start_aline").get<int>(), j.at("shadow").at("width").get<int>()};
        t.roi_depth_px = j.at("roi_depth_px").get<int>();
        t.raw_samples = j.at("raw_samples").get<int>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed transform record: ") + e.what());
    }
    return t;
}

PreprocessedFrame preprocess_frame(const PolarFrame& frame, const PullbackMeta& meta, const PreprocessConfig& cfg) {
    cfg.validate();
    validate_frame(frame, meta);
    auto shadow = detect_guidewire(frame, std::nullopt, meta, cfg);
    auto lumen = detect_lumen(frame, shadow, meta, cfg);
    auto shifted = pixel_shift(frame, lumen);
    Image smoothed = gaussian_smooth(crop_roi(shifted.pixels, cfg.roi_depth_px), cfg.gauss_ksize, cfg.gauss_sigma);

    PreprocessedFrame out;
    out.transform.shift_record = std::move(shifted.shift_record);
    out.transform.shadow = shadow;
    out.transform.roi_depth_px = cfg.roi_depth_px;
    out.transform.raw_samples = frame.cols();
    out.excluded = Mask(frame.rows(), cfg.roi_depth_px, 0);
    for (int a = 0; a < frame.rows(); ++a) {
        if (!out.transform.excluded(a)) continue;
        auto row = smoothed.row(a);
        std::fill(row.begin(), row.end(), 0.0);
        auto ex = out.excluded.row(a);
        std::fill(ex.begin(), ex.end(), std::uint8_t{1});
    }
    out.pixels = std::move(smoothed);
    out.lumen = std::move(lumen);
    return out;
}

Mask transform_mask(const Mask& raw, const FrameTransform& t) {
    if (raw.rows() != t.alines() || raw.cols() != t.raw_samples)
        throw ContractError("transform_mask: mask does not match the transform");
    Mask out(raw.rows(), t.roi_depth_px, 0);
    for (int a = 0; a < raw.rows(); ++a)
        for (int j = 0; j < t.roi_depth_px && j + t.shift_record[a] < raw.cols(); ++j)
            out(a, j) = raw(a, j + t.shift_record[a]);
    return out;
}

Mask restore_mask(const Mask& pre, const FrameTransform& t) {
    if (pre.rows() != t.alines() || pre.cols() != t.roi_depth_px)
        throw ContractError("restore_mask: mask does not match the transform");
    Mask out(pre.rows(), t.raw_samples, 0);
    for (int a = 0; a < pre.rows(); ++a)
        for (int j = 0; j < pre.cols() && j + t.shift_record[a] < t.raw_samples; ++j)
            out(a, j + t.shift_record[a]) = pre(a, j);
    return out;
}

}  // namespace ivoct

namespace ivoct {

#define IVOCT_PREPROCESS_FIELDS(X)                                                                              \
    X(roi_depth_px) X(gauss_ksize) X(gauss_sigma) X(lumen_lambda) X(lumen_max_step) X(lumen_search_px)          \
        X(lumen_median_window) X(gw_window) X(gw_smooth) X(gw_energy_depth) X(gw_ratio)

nlohmann::json to_json(const PreprocessConfig& c) {
    nlohmann::json j;
#define X(f) j[#f] = c.f;
    IVOCT_PREPROCESS_FIELDS(X)
#undef X
    return j;
}

PreprocessConfig preprocess_config_from_json(const nlohmann::json& j, PreprocessConfig c) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        bool known = false;
#define X(f)                                         \
    if (k == #f) {                                   \
        c.f = it->get<decltype(c.f)>();              \
        known = true;                                \
    }
        IVOCT_PREPROCESS_FIELDS(X)
#undef X
        if (!known) throw ConfigError("preprocess: unknown key '" + k + "'");
    }
    c.validate();
    return c;
}

#undef IVOCT_PREPROCESS_FIELDS

}  // namespace ivoct
