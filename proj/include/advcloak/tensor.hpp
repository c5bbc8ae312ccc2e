#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <vector>

#include "advcloak/rng.hpp"

namespace advcloak {

// Dense row-major tensor of doubles. Rank <= 4; image batches are NCHW.
struct Tensor {
    std::vector<int> dims;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> d) : dims(std::move(d)) {
        v.assign(numel(), 0.0);
    }
    Tensor(std::vector<int> d, std::vector<double> data)
        : dims(std::move(d)), v(std::move(data)) {
        assert(static_cast<std::size_t>(numel()) == v.size());
    }

    static Tensor scalar(double x) { return Tensor({1}, {x}); }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int d : dims) n *= d;
        return dims.empty() ? 0 : n;
    }
    int rank() const { return static_cast<int>(dims.size()); }
    int dim(int i) const { return dims[static_cast<std::size_t>(i)]; }

    double& at(int i) { return v[static_cast<std::size_t>(i)]; }
    double at(int i) const { return v[static_cast<std::size_t>(i)]; }

    // NCHW addressing.
    double& at4(int n, int c, int h, int w) {
        return v[static_cast<std::size_t>(((n * dims[1] + c) * dims[2] + h) * dims[3] + w)];
    }
    double at4(int n, int c, int h, int w) const {
        return v[static_cast<std::size_t>(((n * dims[1] + c) * dims[2] + h) * dims[3] + w)];
    }
    double& at2(int r, int c) { return v[static_cast<std::size_t>(r * dims[1] + c)]; }
    double at2(int r, int c) const { return v[static_cast<std::size_t>(r * dims[1] + c)]; }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    static Tensor randn(std::vector<int> d, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(d));
        for (auto& x : t.v) x = rng.normal(0.0, stddev);
        return t;
    }

    double l2_norm() const {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    std::uint64_t content_hash(std::uint64_t h = 0xcbf29ce484222325ull) const {
        h = fnv1a64(dims.data(), dims.size() * sizeof(int), h);
        return fnv1a64(v.data(), v.size() * sizeof(double), h);
    }
};

}  // namespace advcloak
