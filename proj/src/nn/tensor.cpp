#include "ivoct/nn/tensor.hpp"

#include <algorithm>
#include <cstring>

namespace ivoct::nn {

std::string Tensor::shape_string() const {
    return "(" + std::to_string(n()) + "," + std::to_string(c()) + "," + std::to_string(h()) + "," +
           std::to_string(w()) + ")";
}

void require_shape(const Tensor& t, const std::array<int, 4>& shape, const char* what) {
    if (t.shape() != shape)
        throw ContractError(std::string(what) + ": expected shape " + Tensor(shape).shape_string() + ", got " +
                            t.shape_string());
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
        throw ContractError("concat_channels: " + a.shape_string() + " vs " + b.shape_string());
    Tensor out(a.n(), a.c() + b.c(), a.h(), a.w());
    for (int n = 0; n < a.n(); ++n) {
        auto sa = a.sample(n);
        auto sb = b.sample(n);
        std::copy(sa.begin(), sa.end(), out.plane(n, 0));
        std::copy(sb.begin(), sb.end(), out.plane(n, a.c()));
    }
    return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& t, int channels_a) {
    if (channels_a < 0 || channels_a > t.c()) throw ContractError("split_channels: bad split");
    Tensor a(t.n(), channels_a, t.h(), t.w());
    Tensor b(t.n(), t.c() - channels_a, t.h(), t.w());
    const std::size_t pa = static_cast<std::size_t>(channels_a) * t.plane_size();
    for (int n = 0; n < t.n(); ++n) {
        auto s = t.sample(n);
        std::copy(s.begin(), s.begin() + pa, a.sample(n).begin());
        std::copy(s.begin() + pa, s.end(), b.sample(n).begin());
    }
    return {std::move(a), std::move(b)};
}

Tensor slice_batch(const Tensor& t, int begin, int end) {
    if (begin < 0 || end > t.n() || begin > end) throw ContractError("slice_batch: bad range");
    Tensor out(end - begin, t.c(), t.h(), t.w());
    if (out.size() > 0) std::memcpy(out.plane(0, 0), t.plane(begin, 0), out.size() * sizeof(double));
    return out;
}

}  // namespace ivoct::nn
