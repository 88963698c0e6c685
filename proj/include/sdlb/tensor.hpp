#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdlb/rng.hpp"

namespace sdlb {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_count(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

// Dense row-major tensor of 64-bit floats. Plain value type; all training
// state (graphs, optimizers) lives elsewhere.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_count(shape), 0.0) {}
    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (shape_count(shape) != data.size()) {
            throw std::invalid_argument("Tensor: shape " + shape_str(shape) +
                                        " does not match data length " + std::to_string(data.size()));
        }
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, double v) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = stddev * rng.normal();
        return t;
    }

    static Tensor uniform(Shape s, Rng& rng, double lo, double hi) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = rng.uniform(lo, hi);
        return t;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return data.size() == 1; }

    // Rank-2 accessors.
    std::size_t rows() const { return shape.size() >= 1 ? shape[0] : 1; }
    std::size_t cols() const {
        if (shape.size() < 2) return shape.empty() ? 1 : shape[0];
        std::size_t c = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
        return c;
    }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double& at2(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    double at2(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : data) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }

    double sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }

    double sq_norm() const {
        double s = 0.0;
        for (double x : data) s += x * x;
        return s;
    }
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace sdlb
