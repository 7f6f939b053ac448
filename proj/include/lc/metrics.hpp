#pragma once

#include <array>
#include <string>
#include <vector>

#include "lc/cache.hpp"
#include "lc/model.hpp"
#include "lc/sample.hpp"

namespace lc {

/// Analytic multiply-accumulate model. Sublayer kernels:
///   MHSA: 4 tokens width^2 + 2 tokens^2 width
///   FFN : 2 tokens width ffn_dim
/// Embedding, time/modulation heads, skip merges and the output head are a
/// fixed per-evaluation overhead; cached sublayers contribute zero.
struct MacModel {
    uint64_t mhsa = 0;
    uint64_t ffn = 0;
    uint64_t overhead = 0;

    static MacModel of(const ModelConfig& cfg);
};

struct MacCount {
    uint64_t total = 0;
    uint64_t sublayer = 0;
    uint64_t overhead = 0;
    uint64_t kernel_invocations = 0;  // predicted MHSA+FFN executions
    double speedup = 1.0;             // unmasked total / masked total
    std::vector<uint64_t> per_eval;
};

/// MAC count for one run of `roles.size()` model evaluations under `mask`
/// (mask rows pair with Cache designations in order). An all-compute mask
/// reproduces the unmasked count exactly.
MacCount count_macs(const ModelConfig& cfg, const Mask& mask, const std::vector<EvalRole>& roles);

/// Convenience: cadence from grid + solver, then count.
MacCount count_macs(const ModelConfig& cfg, const Mask& mask, const TimeGrid& grid, Solver solver,
                    bool shifted);

/// Total MACs reconstructed from instrumented kernel counters (plus the fixed
/// per-evaluation overhead); agrees exactly with count_macs for honest runs.
uint64_t macs_from_counters(const ModelConfig& cfg, const KernelCounter& counters, int nfe);

/// sqrt of the biased RBF-kernel MMD^2 with median-heuristic bandwidth.
double mmd(const std::vector<std::array<float, 2>>& a, const std::vector<std::array<float, 2>>& b);

/// Mean squared difference between two same-shape tensors.
double tensor_mse(const Tensor& a, const Tensor& b);

/// Mean over paired runs of the final-state MSE (same seeds, same grid).
double final_sample_mse(const RunResult& a, const RunResult& b);

struct CurveRecord {
    std::string config_id;
    double lambda = 0.0;
    double theta = 0.0;
    double cache_ratio = 0.0;
    double ffn_ratio = 0.0;
    double mhsa_ratio = 0.0;
    uint64_t macs = 0;
    double speedup = 1.0;
    double traj_mse = 0.0;
    double mmd = 0.0;
    int seed_count = 0;
};

void save_curve_csv(const std::vector<CurveRecord>& records, const std::string& path);

/// Evaluates one mask configuration: cached run vs the same-seed full run,
/// MAC count, and MMD of the generated points against `holdout`.
CurveRecord evaluate_mask(const DenoiserModel& model, const NoiseSchedule& sched,
                          const TimeGrid& grid, const Mask& mask, const SampleConfig& cfg,
                          const std::vector<std::array<float, 2>>& holdout);

/// Threshold sweep over one trained router.
std::vector<CurveRecord> sweep_theta(const DenoiserModel& model, const NoiseSchedule& sched,
                                     const TimeGrid& grid, const Router& router,
                                     const std::vector<double>& thetas, const SampleConfig& cfg,
                                     const std::vector<std::array<float, 2>>& holdout);

/// Writes <prefix>.values.csv (sigmoided logits), <prefix>.mask.csv, and a
/// <prefix>.json sidecar with axis labels.
void export_router_heatmap(const Router& router, const std::string& prefix);

}  // namespace lc
