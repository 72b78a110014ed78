#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "m2m/errors.hpp"

namespace m2m {

/// Dense row-major tensor of doubles. All numerics in this project run in
/// 64-bit precision; dataset files store 32-bit floats and are widened on load.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }
    Tensor(std::vector<int64_t> s, std::vector<double> data)
        : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<int64_t>(v.size()) != numel_of(shape))
            throw ShapeError("Tensor: data size does not match shape");
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int64_t> s, double value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw ShapeError("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    // Row-major offsets for the ranks used throughout.
    double& at(int64_t a) { return v[static_cast<size_t>(a)]; }
    double at(int64_t a) const { return v[static_cast<size_t>(a)]; }
    double& at(int64_t a, int64_t b) { return v[static_cast<size_t>(a * shape[1] + b)]; }
    double at(int64_t a, int64_t b) const { return v[static_cast<size_t>(a * shape[1] + b)]; }
    double& at(int64_t a, int64_t b, int64_t c) {
        return v[static_cast<size_t>((a * shape[1] + b) * shape[2] + c)];
    }
    double at(int64_t a, int64_t b, int64_t c) const {
        return v[static_cast<size_t>((a * shape[1] + b) * shape[2] + c)];
    }
    double& at(int64_t a, int64_t b, int64_t c, int64_t d) {
        return v[static_cast<size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }
    double at(int64_t a, int64_t b, int64_t c, int64_t d) const {
        return v[static_cast<size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << ']';
        return os.str();
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

/// Complex buffer used for half-spectrum storage inside spectral ops.
using CVec = std::vector<std::complex<double>>;

}  // namespace m2m
