#pragma once

#include <vector>

#include "ivoct/imaging.hpp"
#include "ivoct/nn/tensor.hpp"
#include "ivoct/rng.hpp"

namespace ivoct::nn {

// Every layer caches what its backward pass needs during forward(); backward()
// returns the input gradient and accumulates parameter gradients.

class Conv2d {
public:
    Conv2d() = default;
    // pad < 0 selects "same" padding for stride 1: dilation * (k - 1) / 2.
    Conv2d(std::string name, int in_ch, int out_ch, int kernel, int stride = 1, int dilation = 1, int pad = -1,
           bool bias = true);

    void init(Rng& rng);  // He-normal on fan-in, zero bias
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    std::vector<Param*> params();

    int out_size(int in) const noexcept { return (in + 2 * pad_ - dilation_ * (kernel_ - 1) - 1) / stride_ + 1; }
    int in_channels() const noexcept { return in_ch_; }
    int out_channels() const noexcept { return out_ch_; }
    int kernel() const noexcept { return kernel_; }
    int stride() const noexcept { return stride_; }
    int dilation() const noexcept { return dilation_; }
    int padding() const noexcept { return pad_; }

    Param weight;  // (out, in, k, k)
    Param bias;    // (1, out, 1, 1); empty when disabled

private:
    bool direct() const noexcept { return kernel_ == 1 && stride_ == 1 && pad_ == 0; }
    void im2col(const double* x, int h, int w, int ho, int wo, std::vector<double>& col) const;
    void col2im(const std::vector<double>& col, int h, int w, int ho, int wo, double* dx) const;

    int in_ch_ = 0, out_ch_ = 0, kernel_ = 1, stride_ = 1, dilation_ = 1, pad_ = 0;
    bool has_bias_ = true;
    Tensor x_;
};

class BatchNorm2d {
public:
    BatchNorm2d() = default;
    BatchNorm2d(std::string name, int channels, double momentum = 0.1, double eps = 1e-5);

    Tensor forward(const Tensor& x, bool training);
    Tensor backward(const Tensor& dy);
    std::vector<Param*> params();

    Param gamma, beta;      // (1, C, 1, 1)
    Tensor running_mean;    // (1, C, 1, 1)
    Tensor running_var;     // (1, C, 1, 1), unbiased batch variance
    std::string name;

private:
    double momentum_ = 0.1, eps_ = 1e-5;
    bool training_ = false;
    Tensor xhat_;
    std::vector<double> inv_std_;
};

class ReLU {
public:
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy) const;

private:
    std::vector<unsigned char> active_;
    std::array<int, 4> shape_{};
};

// Window maximum; backward routes to the first maximal element in row-major order.
class MaxPool2d {
public:
    explicit MaxPool2d(int pool = 2, int stride = 2) : pool_(pool), stride_(stride) {}
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy) const;

private:
    int pool_, stride_;
    std::array<int, 4> in_shape_{};
    std::vector<std::size_t> argmax_;
};

// Bilinear resampling with half-pixel centres (source clamped to the grid).
class Resize {
public:
    Resize() = default;
    Resize(int out_h, int out_w) : out_h_(out_h), out_w_(out_w) {}
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy) const;

private:
    int out_h_ = 0, out_w_ = 0;
    std::array<int, 4> in_shape_{};
};

// Mean over rows and cols -> (N, C, 1, 1).
class GlobalAvgPool {
public:
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy) const;

private:
    std::array<int, 4> in_shape_{};
};

// Fully connected over the flattened (C, H, W) features -> (N, out, 1, 1).
class Linear {
public:
    Linear() = default;
    Linear(std::string name, int in_features, int out_features);
    void init(Rng& rng);
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    std::vector<Param*> params();

    Param weight;  // (out, in, 1, 1)
    Param bias;    // (1, out, 1, 1)

private:
    int in_ = 0, out_ = 0;
    Tensor x_;
};

}  // namespace ivoct::nn
