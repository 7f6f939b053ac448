#include "lc/tensor.hpp"

#include <sstream>

namespace lc {

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

Tensor zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(static_cast<size_t>(t.numel()), 0.0f);
    return t;
}

Tensor full(std::vector<int> shape, float value) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.data) x = value;
    return t;
}

Tensor scalar(float value) { return Tensor({1}, {value}); }

Tensor randn(std::vector<int> shape, Rng& rng, float stddev) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.data) x = static_cast<float>(rng.normal()) * stddev;
    return t;
}

}  // namespace lc
