#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ivoct/nn/tensor.hpp"

namespace ivoct::nn {

// Per-pixel softmax across channels.
Tensor softmax_channels(const Tensor& logits);

struct LossResult {
    double loss = 0.0;
    Tensor grad;               // d loss / d logits
    std::size_t included = 0;  // pixels that carried loss
};

// Mean over non-excluded pixels of w[y] * -log softmax(logits)[y]. Labels and
// flags are laid out (n, row, col); an empty `excluded` span includes all pixels.
LossResult weighted_softmax_ce(const Tensor& logits, std::span<const std::uint8_t> labels,
                               std::span<const std::uint8_t> excluded, std::span<const double> class_weights);

// w_c = median(freq) / freq_c. Throws ConfigError naming the first empty class.
std::vector<double> median_frequency_weights(std::span<const long long> class_counts);

}  // namespace ivoct::nn
