#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "ivoct/error.hpp"

namespace ivoct::nn {

// Dense (batch, channels, rows, cols) array of doubles, row-major.
class Tensor {
public:
    Tensor() = default;
    Tensor(int n, int c, int h, int w, double value = 0.0)
        : shape_{n, c, h, w}, data_(static_cast<std::size_t>(n) * c * h * w, value) {
        if (n < 0 || c < 0 || h < 0 || w < 0) throw ContractError("Tensor: negative dimension");
    }
    explicit Tensor(std::array<int, 4> shape, double value = 0.0) : Tensor(shape[0], shape[1], shape[2], shape[3], value) {}

    int n() const noexcept { return shape_[0]; }
    int c() const noexcept { return shape_[1]; }
    int h() const noexcept { return shape_[2]; }
    int w() const noexcept { return shape_[3]; }
    const std::array<int, 4>& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t plane_size() const noexcept { return static_cast<std::size_t>(shape_[2]) * shape_[3]; }

    double& operator()(int n, int c, int h, int w) noexcept { return data_[index(n, c, h, w)]; }
    double operator()(int n, int c, int h, int w) const noexcept { return data_[index(n, c, h, w)]; }
    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double* plane(int n, int c) noexcept { return data_.data() + index(n, c, 0, 0); }
    const double* plane(int n, int c) const noexcept { return data_.data() + index(n, c, 0, 0); }
    // All channels of sample n.
    std::span<double> sample(int n) noexcept { return {plane(n, 0), static_cast<std::size_t>(c()) * plane_size()}; }
    std::span<const double> sample(int n) const noexcept {
        return {plane(n, 0), static_cast<std::size_t>(c()) * plane_size()};
    }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
    bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }
    bool operator==(const Tensor& o) const = default;

    std::string shape_string() const;

private:
    std::size_t index(int n, int c, int h, int w) const noexcept {
        return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    std::array<int, 4> shape_{0, 0, 0, 0};
    std::vector<double> data_;
};

void require_shape(const Tensor& t, const std::array<int, 4>& shape, const char* what);

// Learnable tensor with its gradient accumulator. `decay` marks tensors that
// receive the L2 penalty (conv / linear weights).
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool decay = false;

    void zero_grad() { grad.fill(0.0); }
};

// Concatenate / split along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);
std::pair<Tensor, Tensor> split_channels(const Tensor& t, int channels_a);

// Samples [begin, end) of t.
Tensor slice_batch(const Tensor& t, int begin, int end);

}  // namespace ivoct::nn
