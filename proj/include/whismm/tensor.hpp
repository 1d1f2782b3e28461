#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "whismm/common.hpp"
#include "whismm/rng.hpp"

namespace whismm {

// Dense row-major tensor. Rank 1 or 2 covers everything in this project
// except conv kernels, which are rank 3 (out_ch, in_ch, width).
template <typename T>
struct Tensor {
    std::vector<size_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> s) : shape(std::move(s)), data(numel_of(shape), T(0)) {}
    Tensor(std::vector<size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        require(data.size() == numel_of(shape), "Tensor: data size does not match shape");
    }

    static size_t numel_of(const std::vector<size_t>& s) {
        size_t n = 1;
        for (size_t d : s) n *= d;
        return n;
    }

    size_t numel() const { return data.size(); }
    size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    T& at(size_t i) { return data[i]; }
    T at(size_t i) const { return data[i]; }
    T& at(size_t r, size_t c) { return data[r * cols() + c]; }
    T at(size_t r, size_t c) const { return data[r * cols() + c]; }

    static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<size_t> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor randn(std::vector<size_t> s, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = static_cast<T>(rng.normal(0.0, 1.0)) * stddev;
        return t;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

}  // namespace whismm
