#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ivoct/nn/layers.hpp"
#include "ivoct/nn/loss.hpp"

namespace ivoct::test {

using nn::Param;
using nn::Tensor;

inline Tensor random_tensor(std::array<int, 4> shape, Rng& rng, double scale = 1.0) {
    Tensor t(shape);
    for (double& v : t.values()) v = scale * rng.normal();
    return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Relative error ||a - b|| / max(||a||, ||b||, 1e-6). The floor keeps
// gradients that vanish by symmetry (e.g. a bias feeding a training-mode batch
// norm) from turning round-off into a large relative error.
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double den = std::max({std::sqrt(na), std::sqrt(nb), 1e-6});
    return std::sqrt(d) / den;
}

// Central differences of L = <r, forward(x)> against the analytic gradients
// returned by backward(r) for the input and every parameter. Returns the
// worst relative error.
inline double gradient_check(Tensor x, const std::vector<Param*>& params, const std::function<Tensor(const Tensor&)>& fwd,
                             const std::function<Tensor(const Tensor&)>& bwd, Rng& rng, double eps = 1e-5) {
    Tensor y = fwd(x);
    Tensor r = random_tensor(y.shape(), rng);
    for (auto* p : params) p->zero_grad();
    Tensor dx = bwd(r);
    std::vector<double> analytic(dx.values().begin(), dx.values().end());
    std::vector<double> numeric(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + eps;
        const double lp = dot(r, fwd(x));
        x[i] = keep - eps;
        const double lm = dot(r, fwd(x));
        x[i] = keep;
        numeric[i] = (lp - lm) / (2 * eps);
    }
    double worst = rel_error(analytic, numeric);
    for (auto* p : params) {
        std::vector<double> a(p->grad.values().begin(), p->grad.values().end());
        std::vector<double> n(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double keep = p->value[i];
            p->value[i] = keep + eps;
            const double lp = dot(r, fwd(x));
            p->value[i] = keep - eps;
            const double lm = dot(r, fwd(x));
            p->value[i] = keep;
            n[i] = (lp - lm) / (2 * eps);
        }
        worst = std::max(worst, rel_error(a, n));
    }
    return worst;
}

struct GradCase {
    std::string layer;
    std::string shape;
    double error = 0.0;
};

// Randomised suite over every layer type; `rounds` shapes per layer.
inline std::vector<GradCase> gradient_suite(std::uint64_t seed, int rounds) {
    Rng rng(seed);
    std::vector<GradCase> out;
    auto dim = [&](int lo, int hi) { return rng.uniform_int(lo, hi); };
    for (int round = 0; round < rounds; ++round) {
        {
            const int k = rng.uniform_int(0, 1) ? 3 : 1;
            const int stride = dim(1, 2), dil = k == 3 ? dim(1, 2) : 1;
            const int cin = dim(1, 3), cout = dim(1, 3);
            nn::Conv2d conv("c", cin, cout, k, stride, dil, rng.uniform_int(0, 1) ? -1 : 0);
            conv.init(rng);
            for (double& v : conv.bias.value.values()) v = rng.normal();
            const std::array<int, 4> sh{dim(1, 2), cin, dim(5, 8), dim(5, 8)};
            Tensor x = random_tensor(sh, rng);
            double e = gradient_check(
                x, conv.params(), [&](const Tensor& t) { return conv.forward(t); },
                [&](const Tensor& d) { return conv.backward(d); }, rng);
            out.push_back({"conv2d k" + std::to_string(k) + " s" + std::to_string(stride) + " d" + std::to_string(dil),
                           x.shape_string(), e});
        }
        {
            const int ch = dim(1, 3);
            nn::BatchNorm2d bn("bn", ch);
            for (double& v : bn.gamma.value.values()) v = rng.uniform(0.5, 2.0);
            for (double& v : bn.beta.value.values()) v = rng.normal();
            const bool train = round % 2 == 0;
            if (!train)
                for (int c = 0; c < ch; ++c) {
                    bn.running_mean[c] = rng.normal();
                    bn.running_var[c] = rng.uniform(0.5, 2.0);
                }
            Tensor x = random_tensor({dim(1, 3), ch, dim(2, 4), dim(2, 4)}, rng, 2.0);
            double e = gradient_check(
                x, bn.params(), [&](const Tensor& t) { return bn.forward(t, train); },
                [&](const Tensor& d) { return bn.backward(d); }, rng);
            out.push_back({train ? "batchnorm (train)" : "batchnorm (eval)", x.shape_string(), e});
        }
        {
            nn::ReLU relu;
            Tensor x = random_tensor({dim(1, 2), dim(1, 3), dim(2, 5), dim(2, 5)}, rng);
            for (double& v : x.values())
                if (std::abs(v) < 1e-3) v = 0.5;
            double e = gradient_check(
                x, {}, [&](const Tensor& t) { return relu.forward(t); },
                [&](const Tensor& d) { return relu.backward(d); }, rng);
            out.push_back({"relu", x.shape_string(), e});
        }
        {
            nn::MaxPool2d pool(2, 2);
            Tensor x = random_tensor({dim(1, 2), dim(1, 3), dim(2, 7), dim(2, 7)}, rng);
            double e = gradient_check(
                x, {}, [&](const Tensor& t) { return pool.forward(t); },
                [&](const Tensor& d) { return pool.backward(d); }, rng);
            out.push_back({"maxpool2d", x.shape_string(), e});
        }
        {
            nn::Resize rs(dim(2, 9), dim(2, 9));
            Tensor x = random_tensor({dim(1, 2), dim(1, 2), dim(1, 6), dim(1, 6)}, rng);
            double e = gradient_check(
                x, {}, [&](const Tensor& t) { return rs.forward(t); }, [&](const Tensor& d) { return rs.backward(d); },
                rng);
            out.push_back({"bilinear resize", x.shape_string(), e});
        }
        {
            nn::GlobalAvgPool gap;
            Tensor x = random_tensor({dim(1, 2), dim(1, 3), dim(1, 5), dim(1, 5)}, rng);
            double e = gradient_check(
                x, {}, [&](const Tensor& t) { return gap.forward(t); },
                [&](const Tensor& d) { return gap.backward(d); }, rng);
            out.push_back({"global average pool", x.shape_string(), e});
        }
        {
            const std::array<int, 4> sh{dim(1, 3), dim(1, 3), dim(1, 3), dim(1, 3)};
            nn::Linear fc("fc", sh[1] * sh[2] * sh[3], dim(1, 4));
            fc.init(rng);
            for (double& v : fc.bias.value.values()) v = rng.normal();
            Tensor x = random_tensor(sh, rng);
            double e = gradient_check(
                x, fc.params(), [&](const Tensor& t) { return fc.forward(t); },
                [&](const Tensor& d) { return fc.backward(d); }, rng);
            out.push_back({"linear", x.shape_string(), e});
        }
        {
            const int ca = dim(1, 3);
            Tensor x = random_tensor({dim(1, 2), ca + dim(1, 3), dim(1, 4), dim(1, 4)}, rng);
            // split then concat in swapped order: a permutation of channels
            auto f = [&](const Tensor& t) {
                auto [a, b] = nn::split_channels(t, ca);
                return nn::concat_channels(b, a);
            };
            auto g = [&](const Tensor& d) {
                auto [db, da] = nn::split_channels(d, x.c() - ca);
                return nn::concat_channels(da, db);
            };
            out.push_back({"channel concat/split", x.shape_string(), gradient_check(x, {}, f, g, rng)});
        }
        {
            const std::array<int, 4> sh{dim(1, 2), dim(2, 3), dim(2, 5), dim(2, 5)};
            const std::size_t pixels = static_cast<std::size_t>(sh[0]) * sh[2] * sh[3];
            std::vector<std::uint8_t> labels(pixels), excluded(pixels);
            for (auto& l : labels) l = static_cast<std::uint8_t>(rng.uniform_int(0, sh[1] - 1));
            for (auto& e : excluded) e = rng.uniform() < 0.2;
            excluded[0] = 0;
            std::vector<double> w(sh[1]);
            for (double& v : w) v = rng.uniform(0.2, 5.0);
            Tensor x = random_tensor(sh, rng, 2.0);
            // Scalar loss wrapped as a 1x1x1x1 tensor so the generic checker applies.
            auto f = [&](const Tensor& t) {
                Tensor y(1, 1, 1, 1);
                y[0] = nn::weighted_softmax_ce(t, labels, excluded, w).loss;
                return y;
            };
            auto g = [&](const Tensor& d) {
                auto r = nn::weighted_softmax_ce(x, labels, excluded, w);
                for (double& v : r.grad.values()) v *= d[0];
                return r.grad;
            };
            out.push_back({"weighted softmax cross-entropy", x.shape_string(), gradient_check(x, {}, f, g, rng)});
        }
    }
    return out;
}

}  // namespace ivoct::test
