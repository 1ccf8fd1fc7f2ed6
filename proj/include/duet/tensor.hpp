#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <vector>

#include "duet/common.hpp"

namespace duet {

// Dense row-major tensor of doubles. All model math runs in float64 so the
// finite-difference gradient checks have headroom.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)), data(size_t(count(shape)), 0.0) {}
    Tensor(std::vector<std::int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (std::int64_t(data.size()) != count(shape)) throw config_error("tensor data/shape mismatch");
    }

    static std::int64_t count(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (auto d : s) {
            if (d < 0) throw config_error("negative tensor dimension");
            n *= d;
        }
        return n;
    }

    std::int64_t numel() const { return std::int64_t(data.size()); }
    int ndim() const { return int(shape.size()); }
    std::int64_t dim(int i) const { return shape[size_t(i)]; }

    static Tensor zeros(std::vector<std::int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<std::int64_t> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor randn(std::vector<std::int64_t> s, Rng& rng, double stddev = 1.0, double mean = 0.0) {
        Tensor t(std::move(s));
        std::normal_distribution<double> d(mean, stddev);
        for (auto& v : t.data) v = d(rng);
        return t;
    }

    static Tensor uniform(std::vector<std::int64_t> s, Rng& rng, double lo = 0.0, double hi = 1.0) {
        Tensor t(std::move(s));
        std::uniform_real_distribution<double> d(lo, hi);
        for (auto& v : t.data) v = d(rng);
        return t;
    }

    double& operator[](std::int64_t i) { return data[size_t(i)]; }
    double operator[](std::int64_t i) const { return data[size_t(i)]; }

    double& at(std::int64_t i, std::int64_t j) { return data[size_t(i * shape[1] + j)]; }
    double at(std::int64_t i, std::int64_t j) const { return data[size_t(i * shape[1] + j)]; }
    double& at(std::int64_t i, std::int64_t j, std::int64_t k) {
        return data[size_t((i * shape[1] + j) * shape[2] + k)];
    }
    double at(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return data[size_t((i * shape[1] + j) * shape[2] + k)];
    }
    double& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) {
        return data[size_t(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }
    double at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const {
        return data[size_t(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, std::abs(v));
        return m;
    }

    // Bitwise-exact serialization (little-endian doubles assumed; single-arch artifact).
    void write(std::ostream& os) const {
        std::int64_t nd = ndim();
        os.write(reinterpret_cast<const char*>(&nd), sizeof(nd));
        os.write(reinterpret_cast<const char*>(shape.data()), std::streamsize(sizeof(std::int64_t) * shape.size()));
        os.write(reinterpret_cast<const char*>(data.data()), std::streamsize(sizeof(double) * data.size()));
    }

    static Tensor read(std::istream& is) {
        std::int64_t nd = 0;
        is.read(reinterpret_cast<char*>(&nd), sizeof(nd));
        if (!is || nd < 0 || nd > 8) throw io_error("corrupt tensor header");
        std::vector<std::int64_t> s(static_cast<size_t>(nd));
        is.read(reinterpret_cast<char*>(s.data()), std::streamsize(sizeof(std::int64_t) * s.size()));
        Tensor t(std::move(s));
        is.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(sizeof(double) * t.data.size()));
        if (!is) throw io_error("corrupt tensor payload");
        return t;
    }
};

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace duet
