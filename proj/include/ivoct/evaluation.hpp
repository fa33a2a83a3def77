#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ivoct/imaging.hpp"

namespace ivoct {

struct ConfusionCounts {
    long long tp = 0, tn = 0, fp = 0, fn = 0;

    long long total() const noexcept { return tp + tn + fp + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
        tp += o.tp;
        tn += o.tn;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

// Pixel tallies over non-excluded pixels. `excluded` may be null.
ConfusionCounts confusion_counts(const Mask& pred, const Mask& truth, const Mask* excluded = nullptr);

// nullopt marks a zero denominator.
struct PixelMetrics {
    std::optional<double> sensitivity, specificity, accuracy, dice;
};
PixelMetrics pixel_metrics(const ConfusionCounts& c);

struct SegmentInfo {
    std::string id;
    int frames = 0;
};

struct FoldSplit {
    std::vector<std::string> test, val, train;
};
using FoldPlan = std::vector<FoldSplit>;

// Seeded shuffle of segments into k near-equal test partitions. The segments
// outside a fold's test partition are split train/val by segment count in the
// ratio train_ratio : val_ratio, validation taken cyclically after the test block.
FoldPlan group_kfold(std::span<const SegmentInfo> segments, int k = 5, double train_ratio = 0.70,
                     double val_ratio = 0.15, std::uint64_t seed = 0);

struct FrameAgreement {
    int n_frames = 0;
    int n_pred = 0;   // frames with >= 1 predicted microvessel pixel
    int n_truth = 0;  // frames with >= 1 truth microvessel pixel
    int fp_frames = 0;
    int fn_frames = 0;
    std::optional<double> pct_difference;       // |n_pred - n_truth| / n_truth * 100
    double fp_pct_of_frames = 0.0;              // fp_frames / n_frames * 100
    double fn_pct_of_frames = 0.0;
    std::optional<double> fp_pct_of_truth_pos;  // fp_frames / n_truth * 100
    std::optional<double> fn_pct_of_truth_pos;
};
FrameAgreement frame_presence_agreement(std::span<const Mask> pred, std::span<const Mask> truth);
FrameAgreement frame_presence_agreement(const std::vector<bool>& pred_positive, const std::vector<bool>& truth_positive);

struct LinearFit {
    double slope = 0.0, intercept = 0.0, r_squared = 0.0;
};
// Ordinary least squares. Constant x has no fit (ContractError); constant y gives R^2 = 0.
LinearFit linear_regression(std::span<const double> x, std::span<const double> y);

struct BlandAltman {
    double mean_bias = 0.0, sd = 0.0, loa_low = 0.0, loa_high = 0.0;
};
BlandAltman bland_altman(std::span<const double> a, std::span<const double> b);

struct TTest {
    double t = 0.0;
    double p = 1.0;
    int df = 0;
    bool degenerate_variance = false;  // all differences equal and non-zero
};
TTest paired_t_test(std::span<const double> a, std::span<const double> b);

// Regularised incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);
// Student-t cumulative distribution.
double student_t_cdf(double t, double df);

struct MeanSd {
    std::optional<double> mean, sd;  // sd with n - 1; undefined entries skipped
    int n = 0;
};
MeanSd mean_sd(std::span<const std::optional<double>> values);

nlohmann::json to_json(const PixelMetrics& m);
nlohmann::json to_json(const FrameAgreement& f);
nlohmann::json to_json(const MeanSd& m);

}  // namespace ivoct
