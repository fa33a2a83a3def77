#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "ivoct/error.hpp"

namespace ivoct {

// Dense row-major 2-D grid. In polar frames rows are A-lines (theta) and
// columns are radial samples (r).
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(int rows, int cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(checked_size(rows, cols), fill) {}

    int rows() const noexcept { return rows_; }
    int cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(int r, int c) noexcept { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    const T& operator()(int r, int c) const noexcept {
        return data_[static_cast<std::size_t>(r) * cols_ + c];
    }

    std::span<T> row(int r) noexcept { return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)}; }
    std::span<const T> row(int r) const noexcept {
        return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)};
    }

    std::vector<T>& data() noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }

    bool same_shape(const Grid& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
    template <typename U>
    bool same_shape(const Grid<U>& o) const noexcept { return rows_ == o.rows() && cols_ == o.cols(); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Grid& a, const Grid& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    static std::size_t checked_size(int rows, int cols) {
        if (rows < 0 || cols < 0) throw ContractError("grid dimensions must be non-negative");
        return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> data_;
};

using Image = Grid<double>;
using Mask = Grid<std::uint8_t>;

// Circular index into [0, n).
inline int wrap_index(int i, int n) noexcept {
    int m = i % n;
    return m < 0 ? m + n : m;
}

// Shortest circular distance between two indices modulo n.
inline int circular_distance(int a, int b, int n) noexcept {
    int d = wrap_index(a - b, n);
    return std::min(d, n - d);
}

inline double circular_distance(double a, double b, double n) noexcept {
    double d = a - b;
    d -= n * std::floor(d / n);
    return std::min(d, n - d);
}

}  // namespace ivoct
