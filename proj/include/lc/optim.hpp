#pragma once

#include <vector>

#include "lc/tensor.hpp"

namespace lc {

struct AdamWConfig {
    float lr = 1e-3f;
    float weight_decay = 0.0f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

/// Decoupled-weight-decay Adam. One state slot per parameter tensor, created
/// lazily on the first step. Rejects non-positive learning rates.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg);

    /// Standard step over all parameters. `grads[i]` matches `params[i]`.
    void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads);

    /// Row-masked step for a single matrix parameter: only `row`'s entries,
    /// moments, and bias-correction counter move. Used when one logit row is
    /// trained per batch.
    void step_row(Tensor& param, const Tensor& grad, int row);

    const AdamWConfig& config() const { return cfg_; }

private:
    struct Slot {
        std::vector<float> m, v;
        int64_t t = 0;
        std::vector<int64_t> row_t;  // per-row counters for step_row
    };
    void update_span(Slot& slot, float* p, const float* g, size_t offset, size_t n, int64_t t);

    AdamWConfig cfg_;
    std::vector<Slot> slots_;
};

}  // namespace lc
