#include "ivoct/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ivoct/rng.hpp"

namespace ivoct {

ConfusionCounts confusion_counts(const Mask& pred, const Mask& truth, const Mask* excluded) {
    if (!pred.same_shape(truth) || (excluded && !excluded->same_shape(truth)))
        throw ContractError("confusion_counts: shape mismatch");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (excluded && excluded->data()[i]) continue;
        const bool p = pred.data()[i] != 0, t = truth.data()[i] != 0;
        if (p && t) ++c.tp;
        else if (p) ++c.fp;
        else if (t) ++c.fn;
        else ++c.tn;
    }
    return c;
}

PixelMetrics pixel_metrics(const ConfusionCounts& c) {
    auto ratio = [](long long num, long long den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return static_cast<double>(num) / static_cast<double>(den);
    };
    return {ratio(c.tp, c.tp + c.fn), ratio(c.tn, c.tn + c.fp), ratio(c.tp + c.tn, c.total()),
            ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)};
}

FoldPlan group_kfold(std::span<const SegmentInfo> segments, int k, double train_ratio, double val_ratio,
                     std::uint64_t seed) {
    const int n = static_cast<int>(segments.size());
    if (k < 2) throw ConfigError("group_kfold: k must be >= 2");
    if (n < k) throw ConfigError("group_kfold: " + std::to_string(n) + " segments cannot fill " + std::to_string(k) + " folds");
    if (!(train_ratio > 0.0) || val_ratio < 0.0) throw ConfigError("group_kfold: invalid ratios");
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, 0xf01d0001));
    rng.shuffle(order);
    // Partition sizes differ by at most one; larger partitions come last.
    std::vector<int> start(k + 1, 0);
    for (int f = 0; f < k; ++f) start[f + 1] = start[f] + n / k + (f >= k - n % k ? 1 : 0);
    FoldPlan plan(k);
    for (int f = 0; f < k; ++f) {
        auto& split = plan[f];
        for (int i = start[f]; i < start[f + 1]; ++i) split.test.push_back(segments[order[i]].id);
        const int rest = n - (start[f + 1] - start[f]);
        int nval = static_cast<int>(std::lround(rest * val_ratio / (train_ratio + val_ratio)));
        nval = std::clamp(nval, 0, std::max(0, rest - 1));
        for (int j = 0; j < rest; ++j) {
            const auto& id = segments[order[(start[f + 1] + j) % n]].id;
            (j < nval ? split.val : split.train).push_back(id);
        }
    }
    return plan;
}

FrameAgreement frame_presence_agreement(const std::vector<bool>& pred, const std::vector<bool>& truth) {
    if (pred.size() != truth.size()) throw ContractError("frame_presence_agreement: frame counts differ");
    FrameAgreement f;
    f.n_frames = static_cast<int>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        f.n_pred += pred[i];
        f.n_truth += truth[i];
        f.fp_frames += pred[i] && !truth[i];
        f.fn_frames += !pred[i] && truth[i];
    }
    if (f.n_truth > 0) {
        f.pct_difference = std::abs(f.n_pred - f.n_truth) * 100.0 / f.n_truth;
        f.fp_pct_of_truth_pos = f.fp_frames * 100.0 / f.n_truth;
        f.fn_pct_of_truth_pos = f.fn_frames * 100.0 / f.n_truth;
    }
    if (f.n_frames > 0) {
        f.fp_pct_of_frames = f.fp_frames * 100.0 / f.n_frames;
        f.fn_pct_of_frames = f.fn_frames * 100.0 / f.n_frames;
    }
    return f;
}

FrameAgreement frame_presence_agreement(std::span<const Mask> pred, std::span<const Mask> truth) {
    if (pred.size() != truth.size()) throw ContractError("frame_presence_agreement: frame counts differ");
    std::vector<bool> p, t;
    auto any = [](const Mask& m) { return std::any_of(m.data().begin(), m.data().end(), [](auto v) { return v != 0; }); };
    for (std::size_t i = 0; i < pred.size(); ++i) {
        p.push_back(any(pred[i]));
        t.push_back(any(truth[i]));
    }
    return frame_presence_agreement(p, t);
}

LinearFit linear_regression(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ContractError("linear_regression: length mismatch");
    if (x.size() < 2) throw ContractError("linear_regression: need at least two points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0) throw ContractError("linear_regression: undefined fit, x is constant");
    LinearFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    double ssr = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = y[i] - (f.intercept + f.slope * x[i]);
        ssr += r * r;
    }
    f.r_squared = syy == 0.0 ? 0.0 : std::clamp(1.0 - ssr / syy, 0.0, 1.0);
    return f;
}

namespace {

std::pair<double, double> mean_and_sd(std::span<const double> a, std::span<const double> b) {
    const std::size_t n = a.size();
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += a[i] - b[i];
    m /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += (a[i] - b[i] - m) * (a[i] - b[i] - m);
    return {m, std::sqrt(ss / static_cast<double>(n - 1))};
}

}  // namespace

BlandAltman bland_altman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ContractError("bland_altman: length mismatch");
    if (a.size() < 2) throw ContractError("bland_altman: need at least two pairs");
    auto [m, sd] = mean_and_sd(a, b);
    return {m, sd, m - 1.96 * sd, m + 1.96 * sd};
}

double incomplete_beta(double a, double b, double x) {
    if (a <= 0.0 || b <= 0.0) throw ContractError("incomplete_beta: parameters must be positive");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    // The continued fraction converges fast for x < (a + 1) / (a + b + 2); use
    // the symmetry I_x(a, b) = 1 - I_{1-x}(b, a) otherwise.
    if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - incomplete_beta(b, a, 1.0 - x);
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    constexpr double tiny = 1e-300, eps = 1e-16;
    // Modified Lentz evaluation.
    double c = 1.0, d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 10000; ++m) {
        const double m2 = 2.0 * m;
        double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + num * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + num / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + num * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + num / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) break;
    }
    return std::exp(ln_front) * h / a;
}

double student_t_cdf(double t, double df) {
    if (!(df > 0.0)) throw ContractError("student_t_cdf: df must be positive");
    if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
    const double tail = 0.5 * incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    return t > 0 ? 1.0 - tail : tail;
}

TTest paired_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ContractError("paired_t_test: length mismatch");
    if (a.size() < 2) throw ContractError("paired_t_test: need at least two pairs");
    auto [m, sd] = mean_and_sd(a, b);
    TTest r;
    r.df = static_cast<int>(a.size()) - 1;
    if (sd == 0.0) {
        if (m == 0.0) return r;  // t = 0, p = 1
        r.t = m > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        r.p = 0.0;
        r.degenerate_variance = true;
        return r;
    }
    r.t = m / (sd / std::sqrt(static_cast<double>(a.size())));
    r.p = incomplete_beta(r.df / 2.0, 0.5, r.df / (r.df + r.t * r.t));
    return r;
}

MeanSd mean_sd(std::span<const std::optional<double>> values) {
    MeanSd r;
    double s = 0.0;
    for (const auto& v : values)
        if (v) {
            s += *v;
            ++r.n;
        }
    if (r.n == 0) return r;
    r.mean = s / r.n;
    if (r.n >= 2) {
        double ss = 0.0;
        for (const auto& v : values)
            if (v) ss += (*v - *r.mean) * (*v - *r.mean);
        r.sd = std::sqrt(ss / (r.n - 1));
    }
    return r;
}

namespace {
nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
}  // namespace

nlohmann::json to_json(const PixelMetrics& m) {
    return {{"sensitivity", opt(m.sensitivity)},
            {"specificity", opt(m.specificity)},
            {"accuracy", opt(m.accuracy)},
            {"dice", opt(m.dice)}};
}

nlohmann::json to_json(const FrameAgreement& f) {
    return {{"n_frames", f.n_frames},
            {"n_pred_frames", f.n_pred},
            {"n_truth_frames", f.n_truth},
            {"fp_frames", f.fp_frames},
            {"fn_frames", f.fn_frames},
            {"pct_difference", opt(f.pct_difference)},
            {"fp_pct_of_frames", f.fp_pct_of_frames},
            {"fn_pct_of_frames", f.fn_pct_of_frames},
            {"fp_pct_of_truth_positive", opt(f.fp_pct_of_truth_pos)},
            {"fn_pct_of_truth_positive", opt(f.fn_pct_of_truth_pos)}};
}

nlohmann::json to_json(const MeanSd& m) { return {{"mean", opt(m.mean)}, {"sd", opt(m.sd)}, {"n", m.n}}; }

}  // namespace ivoct
