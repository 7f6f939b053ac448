#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lc/common.hpp"

namespace lc {

class Tape;

/// Dense row-major float tensor. Plain value type; `tape`/`node` link the
/// tensor into an evaluation tape when gradients are wanted.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;
    Tape* tape = nullptr;
    int node = -1;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {}

    int64_t numel() const {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }
    bool on_tape() const { return tape != nullptr && node >= 0; }
    bool is_scalar() const { return numel() == 1; }

    /// Rows/cols of a rank-1 or rank-2 tensor (rank-1 is one row).
    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const { return shape.empty() ? 1 : shape.back(); }

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }
};

std::string shape_str(const std::vector<int>& s);

Tensor zeros(std::vector<int> shape);
Tensor full(std::vector<int> shape, float value);
Tensor scalar(float value);
Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f);

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace lc
