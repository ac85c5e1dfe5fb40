#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sfuse/common.hpp"
#include "sfuse/rng.hpp"

namespace sfuse {

// Dense row-major tensor (last index fastest). No strides, no views: every
// tensor owns contiguous storage, which keeps the op surface auditable.
template <class R>
struct Tensor {
    std::vector<int> shape;
    std::vector<R> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<R> d) : shape(std::move(s)), data(std::move(d)) {}

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int e : s) n *= e;
        return n;
    }

    static Tensor zeros(std::vector<int> s) {
        Tensor t;
        t.data.assign(static_cast<std::size_t>(count(s)), R(0));
        t.shape = std::move(s);
        return t;
    }

    static Tensor full(std::vector<int> s, R v) {
        Tensor t;
        t.data.assign(static_cast<std::size_t>(count(s)), v);
        t.shape = std::move(s);
        return t;
    }

    static Tensor scalar(R v) { return Tensor({1}, {v}); }

    static Tensor randn(std::vector<int> s, Rng& rng, double stddev) {
        Tensor t = zeros(std::move(s));
        for (auto& x : t.data) x = static_cast<R>(rng.normal() * stddev);
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int last_dim() const { return shape.empty() ? 1 : shape.back(); }
    std::int64_t outer_count() const { return shape.empty() ? 1 : numel() / last_dim(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <class R2>
    Tensor<R2> cast() const {
        Tensor<R2> t;
        t.shape = shape;
        t.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<R2>(data[i]);
        return t;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline void require_shape(bool ok, const std::string& what, const std::vector<int>& a,
                          const std::vector<int>& b) {
    if (!ok) throw DimensionError(what + ": " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace sfuse
