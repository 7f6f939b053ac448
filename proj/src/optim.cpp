#include "lc/optim.hpp"

#include <cmath>

namespace lc {

AdamW::AdamW(AdamWConfig cfg) : cfg_(cfg) {
    if (!(cfg_.lr > 0.0f)) throw ShapeError("adamw: lr must be > 0");
}

void AdamW::update_span(Slot& slot, float* p, const float* g, size_t offset, size_t n, int64_t t) {
    double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t));
    double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t));
    for (size_t i = 0; i < n; ++i) {
        size_t j = offset + i;
        slot.m[j] = cfg_.beta1 * slot.m[j] + (1.0f - cfg_.beta1) * g[i];
        slot.v[j] = cfg_.beta2 * slot.v[j] + (1.0f - cfg_.beta2) * g[i] * g[i];
        double mhat = slot.m[j] / bc1;
        double vhat = slot.v[j] / bc2;
        p[i] -= static_cast<float>(cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps)) +
                                   cfg_.lr * cfg_.weight_decay * p[i]);
    }
}

void AdamW::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) throw ShapeError("adamw: params/grads count mismatch");
    if (slots_.empty()) slots_.resize(params.size());
    if (slots_.size() != params.size()) throw ShapeError("adamw: parameter set changed");
    for (size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = grads[k];
        if (!same_shape(p, g))
            throw ShapeError("adamw: grad shape " + shape_str(g.shape) + " vs param " +
                             shape_str(p.shape));
        Slot& slot = slots_[k];
        if (slot.m.empty()) {
            slot.m.assign(p.data.size(), 0.0f);
            slot.v.assign(p.data.size(), 0.0f);
        }
        ++slot.t;
        update_span(slot, p.data.data(), g.data.data(), 0, p.data.size(), slot.t);
    }
}

void AdamW::step_row(Tensor& param, const Tensor& grad, int row) {
    if (param.shape.size() != 2) throw ShapeError("adamw: step_row needs a matrix param");
    int rows = param.shape[0], cols = param.shape[1];
    if (row < 0 || row >= rows) throw ShapeError("adamw: row out of range");
    if (static_cast<int64_t>(grad.numel()) != cols)
        throw ShapeError("adamw: row grad size " + shape_str(grad.shape));
    if (slots_.empty()) slots_.resize(1);
    Slot& slot = slots_[0];
    if (slot.m.empty()) {
        slot.m.assign(param.data.size(), 0.0f);
        slot.v.assign(param.data.size(), 0.0f);
        slot.row_t.assign(static_cast<size_t>(rows), 0);
    }
    int64_t t = ++slot.row_t[static_cast<size_t>(row)];
    size_t offset = static_cast<size_t>(row) * cols;
    update_span(slot, param.data.data() + offset, grad.data.data(), offset,
                static_cast<size_t>(cols), t);
}

}  // namespace lc
