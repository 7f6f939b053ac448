#pragma once

#include <array>
#include <optional>
#include <vector>

#include "lc/cache.hpp"
#include "lc/dataset.hpp"
#include "lc/model.hpp"
#include "lc/schedule.hpp"

namespace lc {

struct SampleConfig {
    Solver solver = Solver::Ddim;
    float guidance = 0.0f;  // w = 0 is unconditional
    std::optional<int> fixed_class;  // default: per-seed random class
    uint64_t seed = 0;
    int n_samples = 1;
    int threads = 1;
    bool log_trajectory = false;
    bool shifted_cache = true;  // DPM-Solver-2 designation shift
    InterpSettings interp;      // cache-step behavior for sample_cached
};

struct TrajectoryRun {
    Tensor x0;                    // final state, (tokens, in_dim)
    std::array<float, 2> point;   // token mean
    int label = 0;
    KernelCounter counters;
    std::vector<Tensor> trajectory;  // per-update snapshots when logging
};

struct RunResult {
    std::vector<TrajectoryRun> runs;
    KernelCounter totals;
    int nfe_per_run = 0;
};

/// Uncached baseline: every evaluation runs the full model.
RunResult sample_full(const DenoiserModel& model, const NoiseSchedule& sched,
                      const TimeGrid& grid, const SampleConfig& cfg);

/// Cached sampling: full evaluations refresh the per-trajectory cache store;
/// cache evaluations apply the interpolated layers with the binary mask row.
/// With an all-compute mask the output is bit-identical to sample_full.
RunResult sample_cached(const DenoiserModel& model, const NoiseSchedule& sched,
                        const TimeGrid& grid, const Mask& mask, const SampleConfig& cfg);

enum class HeuristicKind { TopDown, BottomUp, Random, Metric };

struct Calibration {
    const DenoiserModel* model = nullptr;
    const NoiseSchedule* sched = nullptr;
    const TimeGrid* grid = nullptr;
    const Dataset* data = nullptr;
    int samples = 16;
    uint64_t seed = 0;
};

/// Rule-based cache masks with exactly `budget` cached entries. TopDown
/// caches shallow sublayers first (spread uniformly across cache steps),
/// BottomUp deep first, Random draws seeded entries, Metric caches the
/// entries with the lowest local approximation error averaged over the
/// calibration batch.
Mask heuristic_mask(HeuristicKind kind, int64_t budget, int cache_steps, int sublayers,
                    uint64_t seed, const Calibration* calib = nullptr);

/// Per-sublayer |g(m)| * ||f_j(h^m) - f_j(h^s)||_2^2 from two traced forwards.
std::vector<double> local_error_scores(const DenoiserModel& model, const Tensor& x_s,
                                       const Tensor& x_m, int s, int m, int y);

void save_samples_csv(const RunResult& result, uint64_t base_seed, const std::string& path);

}  // namespace lc
