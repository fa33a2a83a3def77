#include "ivoct/nn/loss.hpp"

#include <algorithm>
#include <cmath>

namespace ivoct::nn {

Tensor softmax_channels(const Tensor& logits) {
    Tensor p(logits.shape());
    const std::size_t ps = logits.plane_size();
    const int ch = logits.c();
    for (int n = 0; n < logits.n(); ++n)
        for (std::size_t q = 0; q < ps; ++q) {
            double mx = logits.plane(n, 0)[q];
            for (int c = 1; c < ch; ++c) mx = std::max(mx, logits.plane(n, c)[q]);
            double s = 0.0;
            for (int c = 0; c < ch; ++c) {
                double e = std::exp(logits.plane(n, c)[q] - mx);
                p.plane(n, c)[q] = e;
                s += e;
            }
            for (int c = 0; c < ch; ++c) p.plane(n, c)[q] /= s;
        }
    return p;
}

LossResult weighted_softmax_ce(const Tensor& logits, std::span<const std::uint8_t> labels,
                               std::span<const std::uint8_t> excluded, std::span<const double> class_weights) {
    const std::size_t ps = logits.plane_size();
    const std::size_t pixels = static_cast<std::size_t>(logits.n()) * ps;
    const int ch = logits.c();
    if (labels.size() != pixels) throw ContractError("weighted_softmax_ce: label count mismatch");
    if (!excluded.empty() && excluded.size() != pixels) throw ContractError("weighted_softmax_ce: flag count mismatch");
    if (class_weights.size() != static_cast<std::size_t>(ch))
        throw ContractError("weighted_softmax_ce: one weight per class required");
    for (double w : class_weights)
        if (!(w > 0.0)) throw ContractError("weighted_softmax_ce: class weights must be positive");

    LossResult r;
    r.grad = Tensor(logits.shape());
    for (std::size_t i = 0; i < pixels; ++i)
        if (excluded.empty() || !excluded[i]) ++r.included;
    if (r.included == 0) return r;

    const double inv = 1.0 / static_cast<double>(r.included);
    std::vector<double> e(ch);
    double total = 0.0;
    for (int n = 0; n < logits.n(); ++n)
        for (std::size_t q = 0; q < ps; ++q) {
            const std::size_t i = static_cast<std::size_t>(n) * ps + q;
            if (!excluded.empty() && excluded[i]) continue;
            const int y = labels[i];
            if (y >= ch) throw ContractError("weighted_softmax_ce: label out of range");
            double mx = logits.plane(n, 0)[q];
            for (int c = 1; c < ch; ++c) mx = std::max(mx, logits.plane(n, c)[q]);
            double s = 0.0;
            for (int c = 0; c < ch; ++c) {
                e[c] = std::exp(logits.plane(n, c)[q] - mx);
                s += e[c];
            }
            const double w = class_weights[y];
            total += w * (std::log(s) - (logits.plane(n, y)[q] - mx));
            for (int c = 0; c < ch; ++c) r.grad.plane(n, c)[q] = w * inv * (e[c] / s - (c == y ? 1.0 : 0.0));
        }
    r.loss = total * inv;
    return r;
}

std::vector<double> median_frequency_weights(std::span<const long long> class_counts) {
    if (class_counts.empty()) throw ConfigError("median_frequency_weights: no classes");
    double total = 0.0;
    for (std::size_t c = 0; c < class_counts.size(); ++c) {
        if (class_counts[c] <= 0)
            throw ConfigError("median_frequency_weights: class " + std::to_string(c) + " has no pixels");
        total += static_cast<double>(class_counts[c]);
    }
    std::vector<double> freq(class_counts.size());
    for (std::size_t c = 0; c < freq.size(); ++c) freq[c] = static_cast<double>(class_counts[c]) / total;
    auto sorted = freq;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t k = sorted.size();
    const double median = k % 2 ? sorted[k / 2] : 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]);
    std::vector<double> w(k);
    for (std::size_t c = 0; c < k; ++c) w[c] = median / freq[c];
    return w;
}

}  // namespace ivoct::nn
