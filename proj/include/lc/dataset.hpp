#pragma once

#include <array>
#include <string>
#include <vector>

#include "lc/tensor.hpp"

namespace lc {

/// Labeled 2-D Gaussian mixture with modes evenly spaced on a circle.
struct GmmSpec {
    int modes = 8;
    double radius = 2.0;
    double sigma = 0.15;

    std::array<double, 2> mean(int mode) const;
};

struct Dataset {
    GmmSpec spec;
    std::vector<int> labels;
    std::vector<std::array<float, 2>> points;

    size_t size() const { return points.size(); }
};

Dataset gen_gmm(const GmmSpec& spec, int n, uint64_t seed);

void save_dataset_csv(const Dataset& data, const std::string& path);
Dataset load_dataset_csv(const std::string& path);

/// Repeats a 2-D point across the model's token axis.
Tensor point_tokens(const std::array<float, 2>& p, int tokens);

/// Token mean of a (tokens, 2) tensor back to a 2-D point.
std::array<float, 2> token_mean(const Tensor& x);

}  // namespace lc
