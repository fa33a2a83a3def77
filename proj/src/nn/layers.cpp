#include "ivoct/nn/layers.hpp"

#include <algorithm>
#include <cmath>

namespace ivoct::nn {

namespace {

void he_normal(Tensor& t, int fan_in, Rng& rng) {
    const double sd = std::sqrt(2.0 / fan_in);
    for (double& v : t.values()) v = sd * rng.normal();
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in_ch, int out_ch, int kernel, int stride, int dilation, int pad, bool bias)
    : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride), dilation_(dilation), has_bias_(bias) {
    if (in_ch < 1 || out_ch < 1 || kernel < 1 || stride < 1 || dilation < 1)
        throw ContractError("Conv2d " + name + ": non-positive hyper-parameter");
    pad_ = pad >= 0 ? pad : dilation * (kernel - 1) / 2;
    weight = Param{name + ".weight", Tensor(out_ch, in_ch, kernel, kernel), Tensor(out_ch, in_ch, kernel, kernel), true};
    if (has_bias_) this->bias = Param{name + ".bias", Tensor(1, out_ch, 1, 1), Tensor(1, out_ch, 1, 1), false};
}

void Conv2d::init(Rng& rng) {
    he_normal(weight.value, in_ch_ * kernel_ * kernel_, rng);
    if (has_bias_) bias.value.fill(0.0);
}

std::vector<Param*> Conv2d::params() {
    if (has_bias_) return {&weight, &bias};
    return {&weight};
}

void Conv2d::im2col(const double* x, int h, int w, int ho, int wo, std::vector<double>& col) const {
    const std::size_t p = static_cast<std::size_t>(ho) * wo;
    col.assign(static_cast<std::size_t>(in_ch_) * kernel_ * kernel_ * p, 0.0);
    std::size_t row = 0;
    for (int c = 0; c < in_ch_; ++c) {
        const double* xc = x + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < kernel_; ++ky)
            for (int kx = 0; kx < kernel_; ++kx, ++row) {
                double* dst = col.data() + row * p;
                const int oy = ky * dilation_ - pad_;
                const int ox = kx * dilation_ - pad_;
                for (int i = 0; i < ho; ++i) {
                    const int sy = i * stride_ + oy;
                    if (sy < 0 || sy >= h) continue;
                    const double* src = xc + static_cast<std::size_t>(sy) * w;
                    double* d = dst + static_cast<std::size_t>(i) * wo;
                    for (int j = 0; j < wo; ++j) {
                        const int sx = j * stride_ + ox;
                        if (sx >= 0 && sx < w) d[j] = src[sx];
                    }
                }
            }
    }
}

void Conv2d::col2im(const std::vector<double>& col, int h, int w, int ho, int wo, double* dx) const {
    const std::size_t p = static_cast<std::size_t>(ho) * wo;
    std::size_t row = 0;
    for (int c = 0; c < in_ch_; ++c) {
        double* dc = dx + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < kernel_; ++ky)
            for (int kx = 0; kx < kernel_; ++kx, ++row) {
                const double* src = col.data() + row * p;
                const int oy = ky * dilation_ - pad_;
                const int ox = kx * dilation_ - pad_;
                for (int i = 0; i < ho; ++i) {
                    const int sy = i * stride_ + oy;
                    if (sy < 0 || sy >= h) continue;
                    double* d = dc + static_cast<std::size_t>(sy) * w;
                    const double* s = src + static_cast<std::size_t>(i) * wo;
                    for (int j = 0; j < wo; ++j) {
                        const int sx = j * stride_ + ox;
                        if (sx >= 0 && sx < w) d[sx] += s[j];
                    }
                }
            }
    }
}

Tensor Conv2d::forward(const Tensor& x) {
    if (x.c() != in_ch_)
        throw ContractError(weight.name + ": expected " + std::to_string(in_ch_) + " input channels, got " +
                            x.shape_string());
    const int ho = out_size(x.h()), wo = out_size(x.w());
    if (ho < 1 || wo < 1) throw ContractError(weight.name + ": input " + x.shape_string() + " too small");
    x_ = x;
    Tensor y(x.n(), out_ch_, ho, wo);
    const std::size_t p = static_cast<std::size_t>(ho) * wo;
    const int kk = in_ch_ * kernel_ * kernel_;
    const double* wt = weight.value.plane(0, 0);
    std::vector<double> col;
    for (int n = 0; n < x.n(); ++n) {
        const double* cp = x.plane(n, 0);
        if (!direct()) {
            im2col(x.plane(n, 0), x.h(), x.w(), ho, wo, col);
            cp = col.data();
        }
        double* yn = y.plane(n, 0);
#pragma omp parallel for schedule(static)
        for (int o = 0; o < out_ch_; ++o) {
            double* yo = yn + o * p;
            std::fill(yo, yo + p, has_bias_ ? bias.value[o] : 0.0);
            const double* wrow = wt + static_cast<std::size_t>(o) * kk;
            for (int k = 0; k < kk; ++k) {
                const double wv = wrow[k];
                const double* cr = cp + static_cast<std::size_t>(k) * p;
#pragma omp simd
                for (std::size_t q = 0; q < p; ++q) yo[q] += wv * cr[q];
            }
        }
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
    const int ho = out_size(x_.h()), wo = out_size(x_.w());
    require_shape(dy, {x_.n(), out_ch_, ho, wo}, "Conv2d::backward");
    Tensor dx(x_.shape());
    const std::size_t p = static_cast<std::size_t>(ho) * wo;
    const int kk = in_ch_ * kernel_ * kernel_;
    const double* wt = weight.value.plane(0, 0);
    double* dw = weight.grad.plane(0, 0);
    std::vector<double> col, dcol;
    for (int n = 0; n < x_.n(); ++n) {
        const double* cp = x_.plane(n, 0);
        if (!direct()) {
            im2col(x_.plane(n, 0), x_.h(), x_.w(), ho, wo, col);
            cp = col.data();
        }
        const double* dyn = dy.plane(n, 0);
#pragma omp parallel for schedule(static)
        for (int o = 0; o < out_ch_; ++o) {
            const double* dyo = dyn + o * p;
            for (int k = 0; k < kk; ++k) {
                const double* cr = cp + static_cast<std::size_t>(k) * p;
                double s = 0.0;
#pragma omp simd reduction(+ : s)
                for (std::size_t q = 0; q < p; ++q) s += dyo[q] * cr[q];
                dw[static_cast<std::size_t>(o) * kk + k] += s;
            }
        }
        if (has_bias_) {
            for (int o = 0; o < out_ch_; ++o) {
                const double* dyo = dyn + o * p;
                double s = 0.0;
                for (std::size_t q = 0; q < p; ++q) s += dyo[q];
                bias.grad[o] += s;
            }
        }
        double* target = nullptr;
        if (direct()) {
            target = dx.plane(n, 0);
        } else {
            dcol.assign(static_cast<std::size_t>(kk) * p, 0.0);
            target = dcol.data();
        }
#pragma omp parallel for schedule(static)
        for (int k = 0; k < kk; ++k) {
            double* dc = target + static_cast<std::size_t>(k) * p;
            for (int o = 0; o < out_ch_; ++o) {
                const double wv = wt[static_cast<std::size_t>(o) * kk + k];
                const double* dyo = dyn + o * p;
#pragma omp simd
                for (std::size_t q = 0; q < p; ++q) dc[q] += wv * dyo[q];
            }
        }
        if (!direct()) col2im(dcol, x_.h(), x_.w(), ho, wo, dx.plane(n, 0));
    }
    return dx;
}

// ---------------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string name_, int channels, double momentum, double eps)
    : gamma{name_ + ".gamma", Tensor(1, channels, 1, 1, 1.0), Tensor(1, channels, 1, 1), false},
      beta{name_ + ".beta", Tensor(1, channels, 1, 1), Tensor(1, channels, 1, 1), false},
      running_mean(1, channels, 1, 1, 0.0),
      running_var(1, channels, 1, 1, 1.0),
      name(std::move(name_)),
      momentum_(momentum),
      eps_(eps) {}

std::vector<Param*> BatchNorm2d::params() { return {&gamma, &beta}; }

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
    const int ch = gamma.value.c();
    if (x.c() != ch) throw ContractError(name + ": channel mismatch " + x.shape_string());
    const std::size_t m = static_cast<std::size_t>(x.n()) * x.plane_size();
    if (training && m < 2) throw ContractError(name + ": training mode needs at least 2 values per channel");
    training_ = training;
    xhat_ = Tensor(x.shape());
    inv_std_.assign(ch, 0.0);
    Tensor y(x.shape());
    const std::size_t ps = x.plane_size();
#pragma omp parallel for schedule(static)
    for (int c = 0; c < ch; ++c) {
        double mean, var;
        if (training) {
            double s = 0.0;
            for (int n = 0; n < x.n(); ++n) {
                const double* xp = x.plane(n, c);
                for (std::size_t q = 0; q < ps; ++q) s += xp[q];
            }
            mean = s / static_cast<double>(m);
            double ss = 0.0;
            for (int n = 0; n < x.n(); ++n) {
                const double* xp = x.plane(n, c);
                for (std::size_t q = 0; q < ps; ++q) ss += (xp[q] - mean) * (xp[q] - mean);
            }
            var = ss / static_cast<double>(m);
            running_mean[c] = (1.0 - momentum_) * running_mean[c] + momentum_ * mean;
            running_var[c] = (1.0 - momentum_) * running_var[c] +
                             momentum_ * var * static_cast<double>(m) / static_cast<double>(m - 1);
        } else {
            mean = running_mean[c];
            var = running_var[c];
        }
        const double is = 1.0 / std::sqrt(var + eps_);
        inv_std_[c] = is;
        const double g = gamma.value[c], b = beta.value[c];
        for (int n = 0; n < x.n(); ++n) {
            const double* xp = x.plane(n, c);
            double* hp = xhat_.plane(n, c);
            double* yp = y.plane(n, c);
            for (std::size_t q = 0; q < ps; ++q) {
                hp[q] = (xp[q] - mean) * is;
                yp[q] = g * hp[q] + b;
            }
        }
    }
    return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
    require_shape(dy, xhat_.shape(), "BatchNorm2d::backward");
    const int ch = gamma.value.c();
    const std::size_t ps = dy.plane_size();
    const double m = static_cast<double>(dy.n()) * static_cast<double>(ps);
    Tensor dx(dy.shape());
#pragma omp parallel for schedule(static)
    for (int c = 0; c < ch; ++c) {
        double sdy = 0.0, sdyx = 0.0;
        for (int n = 0; n < dy.n(); ++n) {
            const double* d = dy.plane(n, c);
            const double* h = xhat_.plane(n, c);
            for (std::size_t q = 0; q < ps; ++q) {
                sdy += d[q];
                sdyx += d[q] * h[q];
            }
        }
        gamma.grad[c] += sdyx;
        beta.grad[c] += sdy;
        const double g = gamma.value[c] * inv_std_[c];
        for (int n = 0; n < dy.n(); ++n) {
            const double* d = dy.plane(n, c);
            const double* h = xhat_.plane(n, c);
            double* o = dx.plane(n, c);
            if (training_) {
                for (std::size_t q = 0; q < ps; ++q) o[q] = g / m * (m * d[q] - sdy - h[q] * sdyx);
            } else {
                for (std::size_t q = 0; q < ps; ++q) o[q] = g * d[q];
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------- ReLU

Tensor ReLU::forward(const Tensor& x) {
    shape_ = x.shape();
    active_.resize(x.size());
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        active_[i] = x[i] > 0.0;
        y[i] = active_[i] ? x[i] : 0.0;
    }
    return y;
}

Tensor ReLU::backward(const Tensor& dy) const {
    require_shape(dy, shape_, "ReLU::backward");
    Tensor dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = active_[i] ? dy[i] : 0.0;
    return dx;
}

// ---------------------------------------------------------------- MaxPool2d

Tensor MaxPool2d::forward(const Tensor& x) {
    if (x.h() < pool_ || x.w() < pool_) throw ContractError("MaxPool2d: input " + x.shape_string() + " below pool");
    in_shape_ = x.shape();
    const int ho = (x.h() - pool_) / stride_ + 1, wo = (x.w() - pool_) / stride_ + 1;
    Tensor y(x.n(), x.c(), ho, wo);
    argmax_.assign(y.size(), 0);
    std::size_t k = 0;
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c)
            for (int i = 0; i < ho; ++i)
                for (int j = 0; j < wo; ++j, ++k) {
                    int bi = i * stride_, bj = j * stride_;
                    double best = x(n, c, bi, bj);
                    for (int di = 0; di < pool_; ++di)
                        for (int dj = 0; dj < pool_; ++dj) {
                            double v = x(n, c, i * stride_ + di, j * stride_ + dj);
                            if (v > best) {
                                best = v;
                                bi = i * stride_ + di;
                                bj = j * stride_ + dj;
                            }
                        }
                    y[k] = best;
                    argmax_[k] = ((static_cast<std::size_t>(n) * x.c() + c) * x.h() + bi) * x.w() + bj;
                }
    return y;
}

Tensor MaxPool2d::backward(const Tensor& dy) const {
    if (dy.size() != argmax_.size()) throw ContractError("MaxPool2d::backward: shape mismatch");
    Tensor dx(in_shape_);
    for (std::size_t k = 0; k < dy.size(); ++k) dx[argmax_[k]] += dy[k];
    return dx;
}

// ---------------------------------------------------------------- Resize

Tensor Resize::forward(const Tensor& x) {
    if (out_h_ < 1 || out_w_ < 1) throw ContractError("Resize: output size not set");
    in_shape_ = x.shape();
    if (x.h() == out_h_ && x.w() == out_w_) return x;
    auto ty = bilinear_taps(x.h(), out_h_);
    auto tx = bilinear_taps(x.w(), out_w_);
    Tensor y(x.n(), x.c(), out_h_, out_w_);
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c) {
            const double* xp = x.plane(n, c);
            double* yp = y.plane(n, c);
            for (int i = 0; i < out_h_; ++i) {
                const double* r0 = xp + static_cast<std::size_t>(ty.lo[i]) * x.w();
                const double* r1 = xp + static_cast<std::size_t>(ty.hi[i]) * x.w();
                const double fy = ty.frac[i];
                for (int j = 0; j < out_w_; ++j) {
                    const double fx = tx.frac[j];
                    const double top = (1 - fx) * r0[tx.lo[j]] + fx * r0[tx.hi[j]];
                    const double bot = (1 - fx) * r1[tx.lo[j]] + fx * r1[tx.hi[j]];
                    yp[static_cast<std::size_t>(i) * out_w_ + j] = (1 - fy) * top + fy * bot;
                }
            }
        }
    return y;
}

Tensor Resize::backward(const Tensor& dy) const {
    require_shape(dy, {in_shape_[0], in_shape_[1], out_h_, out_w_}, "Resize::backward");
    if (in_shape_[2] == out_h_ && in_shape_[3] == out_w_) return dy;
    auto ty = bilinear_taps(in_shape_[2], out_h_);
    auto tx = bilinear_taps(in_shape_[3], out_w_);
    Tensor dx(in_shape_);
    const int w = in_shape_[3];
    for (int n = 0; n < dy.n(); ++n)
        for (int c = 0; c < dy.c(); ++c) {
            const double* dp = dy.plane(n, c);
            double* xp = dx.plane(n, c);
            for (int i = 0; i < out_h_; ++i) {
                double* r0 = xp + static_cast<std::size_t>(ty.lo[i]) * w;
                double* r1 = xp + static_cast<std::size_t>(ty.hi[i]) * w;
                const double fy = ty.frac[i];
                for (int j = 0; j < out_w_; ++j) {
                    const double g = dp[static_cast<std::size_t>(i) * out_w_ + j];
                    const double fx = tx.frac[j];
                    r0[tx.lo[j]] += (1 - fy) * (1 - fx) * g;
                    r0[tx.hi[j]] += (1 - fy) * fx * g;
                    r1[tx.lo[j]] += fy * (1 - fx) * g;
                    r1[tx.hi[j]] += fy * fx * g;
                }
            }
        }
    return dx;
}

// ---------------------------------------------------------------- GlobalAvgPool

Tensor GlobalAvgPool::forward(const Tensor& x) {
    in_shape_ = x.shape();
    Tensor y(x.n(), x.c(), 1, 1);
    const std::size_t ps = x.plane_size();
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c) {
            const double* p = x.plane(n, c);
            double s = 0.0;
            for (std::size_t q = 0; q < ps; ++q) s += p[q];
            y(n, c, 0, 0) = s / static_cast<double>(ps);
        }
    return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) const {
    require_shape(dy, {in_shape_[0], in_shape_[1], 1, 1}, "GlobalAvgPool::backward");
    Tensor dx(in_shape_);
    const std::size_t ps = dx.plane_size();
    for (int n = 0; n < dy.n(); ++n)
        for (int c = 0; c < dy.c(); ++c) {
            double g = dy(n, c, 0, 0) / static_cast<double>(ps);
            std::fill(dx.plane(n, c), dx.plane(n, c) + ps, g);
        }
    return dx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in_features, int out_features)
    : weight{name + ".weight", Tensor(out_features, in_features, 1, 1), Tensor(out_features, in_features, 1, 1),
             true},
      bias{name + ".bias", Tensor(1, out_features, 1, 1), Tensor(1, out_features, 1, 1), false},
      in_(in_features),
      out_(out_features) {
    if (in_features < 1 || out_features < 1) throw ContractError("Linear " + name + ": empty layer");
}

void Linear::init(Rng& rng) {
    he_normal(weight.value, in_, rng);
    bias.value.fill(0.0);
}

std::vector<Param*> Linear::params() { return {&weight, &bias}; }

Tensor Linear::forward(const Tensor& x) {
    if (static_cast<std::size_t>(x.c()) * x.plane_size() != static_cast<std::size_t>(in_))
        throw ContractError(weight.name + ": expected " + std::to_string(in_) + " features, got " + x.shape_string());
    x_ = x;
    Tensor y(x.n(), out_, 1, 1);
    for (int n = 0; n < x.n(); ++n) {
        auto xs = x.sample(n);
        for (int o = 0; o < out_; ++o) {
            const double* wr = weight.value.plane(o, 0);
            double s = bias.value[o];
            for (int i = 0; i < in_; ++i) s += wr[i] * xs[i];
            y(n, o, 0, 0) = s;
        }
    }
    return y;
}

Tensor Linear::backward(const Tensor& dy) {
    require_shape(dy, {x_.n(), out_, 1, 1}, "Linear::backward");
    Tensor dx(x_.shape());
    for (int n = 0; n < x_.n(); ++n) {
        auto xs = x_.sample(n);
        auto dxs = dx.sample(n);
        for (int o = 0; o < out_; ++o) {
            const double g = dy(n, o, 0, 0);
            const double* wr = weight.value.plane(o, 0);
            double* gw = weight.grad.plane(o, 0);
            for (int i = 0; i < in_; ++i) {
                gw[i] += g * xs[i];
                dxs[i] += g * wr[i];
            }
            bias.grad[o] += g;
        }
    }
    return dx;
}

}  // namespace ivoct::nn
