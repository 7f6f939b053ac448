#include "lc/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace lc {

std::array<double, 2> GmmSpec::mean(int mode) const {
    double angle = 2.0 * 3.14159265358979323846 * mode / modes;
    return {radius * std::cos(angle), radius * std::sin(angle)};
}

Dataset gen_gmm(const GmmSpec& spec, int n, uint64_t seed) {
    if (spec.modes < 1) throw ValidationError("gen-data: modes must be >= 1");
    if (n < 1) throw ValidationError("gen-data: n must be >= 1");
    Dataset d;
    d.spec = spec;
    d.labels.reserve(static_cast<size_t>(n));
    d.points.reserve(static_cast<size_t>(n));
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        int mode = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(spec.modes)));
        auto mu = spec.mean(mode);
        float x = static_cast<float>(mu[0] + spec.sigma * rng.normal());
        float y = static_cast<float>(mu[1] + spec.sigma * rng.normal());
        d.labels.push_back(mode);
        d.points.push_back({x, y});
    }
    return d;
}

void save_dataset_csv(const Dataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("dataset: cannot write " + path);
    out << "label,x,y\n";
    char buf[96];
    for (size_t i = 0; i < data.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", data.labels[i],
                      static_cast<double>(data.points[i][0]),
                      static_cast<double>(data.points[i][1]));
        out << buf;
    }
}

Dataset load_dataset_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("dataset: cannot read " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("label,x,y", 0) != 0)
        throw ValidationError("dataset: missing label,x,y header in " + path);
    Dataset d;
    int max_label = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string tok;
        int label = 0;
        float x = 0, y = 0;
        if (!std::getline(ss, tok, ',')) throw ValidationError("dataset: bad row: " + line);
        label = std::stoi(tok);
        if (!std::getline(ss, tok, ',')) throw ValidationError("dataset: bad row: " + line);
        x = std::stof(tok);
        if (!std::getline(ss, tok, ',')) throw ValidationError("dataset: bad row: " + line);
        y = std::stof(tok);
        d.labels.push_back(label);
        d.points.push_back({x, y});
        max_label = std::max(max_label, label);
    }
    if (d.points.empty()) throw ValidationError("dataset: no rows in " + path);
    d.spec.modes = max_label + 1;
    return d;
}

Tensor point_tokens(const std::array<float, 2>& p, int tokens) {
    Tensor t = zeros({tokens, 2});
    for (int i = 0; i < tokens; ++i) {
        t.data[static_cast<size_t>(i) * 2] = p[0];
        t.data[static_cast<size_t>(i) * 2 + 1] = p[1];
    }
    return t;
}

std::array<float, 2> token_mean(const Tensor& x) {
    if (x.shape.size() != 2 || x.shape[1] != 2)
        throw ShapeError("token_mean: expected (tokens,2), got " + shape_str(x.shape));
    double sx = 0, sy = 0;
    int tokens = x.shape[0];
    for (int i = 0; i < tokens; ++i) {
        sx += x.data[static_cast<size_t>(i) * 2];
        sy += x.data[static_cast<size_t>(i) * 2 + 1];
    }
    return {static_cast<float>(sx / tokens), static_cast<float>(sy / tokens)};
}

}  // namespace lc
