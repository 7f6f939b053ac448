#pragma once

#include <optional>
#include <vector>

#include "lc/cache.hpp"
#include "lc/dataset.hpp"
#include "lc/model.hpp"
#include "lc/optim.hpp"
#include "lc/schedule.hpp"

namespace lc {

struct RouterTrainConfig {
    double lambda = 1e-2;  // sparsity regularization weight in the training loss
    float lr = 0.01f;
    float weight_decay = 0.0f;
    int steps = 1500;
    int batch = 16;
    float label_drop = 0.1f;
    InterpSettings interp;           // alpha = 0, paper-literal gating by default
    std::optional<int64_t> cost_cap; // documented budget; enforced post hoc via theta
    uint64_t seed = 0;
    int threads = 1;
    int log_every = 50;

    void validate() const {
        if (lambda < 0.0) throw ValidationError("train-router: lambda must be >= 0");
        if (!(lr > 0.0f)) throw ValidationError("train-router: lr must be > 0");
        if (steps < 0 || batch < 1) throw ValidationError("train-router: bad steps/batch");
    }
};

struct RouterTrainLogRow {
    int step;
    double loss;
    double recon_term;
    double penalty_term;
    double mean_sigmoid_beta;
};

struct RouterTrainResult {
    Router router;
    std::vector<RouterTrainLogRow> log;
};

/// Training loss: squared L2 reconstruction error plus lambda times the sum
/// of the (already sigmoided) betas for the sampled cache step. All tape
/// links flow through, so the result is differentiable w.r.t. the logits.
Tensor router_loss(const Tensor& eps_tilde, const Tensor& eps_target, const Tensor& betas,
                   double lambda);

/// Optimizes the router logits against the frozen model: per batch, one
/// (full step s, cache step m) pair is drawn, the full evaluation at s fills
/// the cache, the solver advances to m, and the interpolated evaluation at m
/// with continuous betas is regressed onto the full evaluation at m. Only the
/// sampled row of the logits receives an optimizer update.
RouterTrainResult train_router(const DenoiserModel& model, Router router,
                               const NoiseSchedule& sched, const TimeGrid& grid,
                               const Dataset& data, const RouterTrainConfig& cfg);

/// Layer-dropout ablation: identical loop, but the interpolated layer is
/// h + beta * g * f(h) with no cached substitute.
RouterTrainResult train_drop(const DenoiserModel& model, Router router,
                             const NoiseSchedule& sched, const TimeGrid& grid,
                             const Dataset& data, const RouterTrainConfig& cfg);

void save_train_log_csv(const std::vector<RouterTrainLogRow>& log, const std::string& path);

}  // namespace lc
