#include "lc/sample.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace lc {

namespace {

std::vector<double> scores_from_traces(const Trace& trace_m, const Trace& trace_s) {
    if (trace_m.entries.size() != trace_s.entries.size())
        throw ShapeError("local_error: traces have different sublayer counts");
    std::vector<double> scores(trace_m.entries.size(), 0.0);
    for (size_t j = 0; j < scores.size(); ++j) {
        const Tensor& fm = trace_m.entries[j].f_out;
        const Tensor& fs = trace_s.entries[j].f_out;
        double acc = 0.0;
        for (size_t i = 0; i < fm.data.size(); ++i) {
            double d = static_cast<double>(fm.data[i]) - fs.data[i];
            acc += d * d;
        }
        scores[j] = std::abs(static_cast<double>(trace_m.entries[j].gate)) * acc;
    }
    return scores;
}

// One trajectory's evaluation state: cadence position, per-branch cache
// stores, and kernel counters.
struct TrajectoryEvaluator {
    const DenoiserModel& model;
    const NoiseSchedule& sched;
    const Mask* mask;  // null = plain full sampling
    const std::vector<EvalRole>* roles;
    InterpSettings settings;
    float guidance;
    int label;
    KernelCounter counter;
    int eval_idx = 0;
    int cache_row = 0;
    int last_full_t = -1;
    CacheStore store_uncond;
    CacheStore store_cond;

    TrajectoryEvaluator(const DenoiserModel& mdl, const NoiseSchedule& sc)
        : model(mdl), sched(sc), mask(nullptr), roles(nullptr), guidance(0.0f),
          label(mdl.config().null_class()),
          store_uncond(mdl.config().sublayers()),
          store_cond(mdl.config().sublayers()) {}

    Tensor eval(const Tensor& x, int t) {
        bool cached = mask != nullptr && (*roles)[static_cast<size_t>(eval_idx)] == EvalRole::Cache;
        ++eval_idx;
        if (!cached) {
            last_full_t = t;
            return combine(x, t, /*cache_step=*/false);
        }
        Tensor eps = combine(x, t, /*cache_step=*/true);
        ++cache_row;
        return eps;
    }

    Tensor combine(const Tensor& x, int t, bool cache_step) {
        Tensor eps_null = branch(x, t, model.config().null_class(), store_uncond, cache_step);
        if (guidance == 0.0f || label == model.config().null_class()) return eps_null;
        Tensor eps_y = branch(x, t, label, store_cond, cache_step);
        return add(eps_null, scale(sub(eps_y, eps_null), guidance));
    }

    Tensor branch(const Tensor& x, int t, int y, CacheStore& store, bool cache_step) {
        if (!cache_step) {
            bool want_trace = mask != nullptr;  // cadence active: refresh the cache
            ForwardResult fr = model.forward(x, t, y, ForwardCtx{nullptr, &counter, want_trace});
            if (want_trace) model.fill_cache(*fr.trace, store);
            return fr.eps;
        }
        if (store.read(0).provenance != last_full_t)
            throw ValidationError("sample: cache provenance does not match the last full step");
        Tensor beta_row = zeros({mask->sublayers});
        for (int j = 0; j < mask->sublayers; ++j)
            beta_row.data[static_cast<size_t>(j)] = mask->at(cache_row, j);
        return model
            .forward_interp(x, t, y, store, beta_row, settings, ForwardCtx{nullptr, &counter, false})
            .eps;
    }
};

RunResult run_sampler(const DenoiserModel& model, const NoiseSchedule& sched,
                      const TimeGrid& grid, const Mask* mask, const SampleConfig& cfg) {
    const ModelConfig& mc = model.config();
    int nfe = grid.nfe(cfg.solver);
    std::vector<EvalRole> roles;
    if (mask) {
        roles = cache_designations(nfe, cfg.solver, cfg.shifted_cache);
        int cache_rows = static_cast<int>(std::count(roles.begin(), roles.end(), EvalRole::Cache));
        if (mask->cache_steps != cache_rows || mask->sublayers != mc.sublayers())
            throw ValidationError("sample: mask is " + std::to_string(mask->cache_steps) + "x" +
                                  std::to_string(mask->sublayers) + ", cadence needs " +
                                  std::to_string(cache_rows) + "x" +
                                  std::to_string(mc.sublayers()));
    }

    RunResult result;
    result.nfe_per_run = nfe;
    result.runs.resize(static_cast<size_t>(cfg.n_samples));

    parallel_for(cfg.n_samples, cfg.threads, [&](int64_t i) {
        Rng rng(cfg.seed + static_cast<uint64_t>(i));
        int label = cfg.fixed_class ? *cfg.fixed_class
                                    : static_cast<int>(rng.uniform_int(
                                          static_cast<uint64_t>(mc.num_classes)));
        if (cfg.guidance == 0.0f) label = mc.null_class();
        Tensor x = randn({mc.tokens, mc.in_dim}, rng);

        TrajectoryEvaluator ev(model, sched);
        ev.mask = mask;
        ev.roles = &roles;
        ev.settings = cfg.interp;
        ev.guidance = cfg.guidance;
        ev.label = label;

        TrajectoryRun& run = result.runs[static_cast<size_t>(i)];
        if (cfg.log_trajectory) run.trajectory.reserve(static_cast<size_t>(grid.segments()));
        for (int seg = 0; seg < grid.segments(); ++seg) {
            int src = grid.times[static_cast<size_t>(seg)];
            int dst = grid.target(seg);
            if (cfg.solver == Solver::Ddim) {
                Tensor eps = ev.eval(x, src);
                x = ddim_step(sched, x, eps, src, dst);
            } else {
                auto r = dpm_solver2_step(sched, x,
                                          [&](const Tensor& xt, int t) { return ev.eval(xt, t); },
                                          src, dst);
                x = std::move(r.x);
            }
            if (cfg.log_trajectory) run.trajectory.push_back(x);
        }
        if (ev.eval_idx != nfe)
            throw NumericError("sample: evaluation count mismatch");

        run.x0 = std::move(x);
        run.point = token_mean(run.x0);
        run.label = label;
        run.counters = ev.counter;
    });

    for (const auto& run : result.runs) {
        result.totals.mhsa += run.counters.mhsa;
        result.totals.ffn += run.counters.ffn;
    }
    return result;
}

}  // namespace

RunResult sample_full(const DenoiserModel& model, const NoiseSchedule& sched,
                      const TimeGrid& grid, const SampleConfig& cfg) {
    return run_sampler(model, sched, grid, nullptr, cfg);
}

RunResult sample_cached(const DenoiserModel& model, const NoiseSchedule& sched,
                        const TimeGrid& grid, const Mask& mask, const SampleConfig& cfg) {
    return run_sampler(model, sched, grid, &mask, cfg);
}

std::vector<double> local_error_scores(const DenoiserModel& model, const Tensor& x_s,
                                       const Tensor& x_m, int s, int m, int y) {
    ForwardCtx ctx{nullptr, nullptr, true};
    ForwardResult at_s = model.forward(x_s, s, y, ctx);
    ForwardResult at_m = model.forward(x_m, m, y, ctx);
    return scores_from_traces(*at_m.trace, *at_s.trace);
}

Mask heuristic_mask(HeuristicKind kind, int64_t budget, int cache_steps, int sublayers,
                    uint64_t seed, const Calibration* calib) {
    int64_t total = static_cast<int64_t>(cache_steps) * sublayers;
    if (budget < 0 || budget > total)
        throw ShapeError("heuristic_mask: budget " + std::to_string(budget) + " outside [0," +
                         std::to_string(total) + "]");
    Mask mask = Mask::all_compute(cache_steps, sublayers);
    struct Entry {
        int step, j;
    };
    std::vector<Entry> order;
    order.reserve(static_cast<size_t>(total));

    switch (kind) {
        case HeuristicKind::TopDown:
            for (int j = 0; j < sublayers; ++j)
                for (int i = 0; i < cache_steps; ++i) order.push_back({i, j});
            break;
        case HeuristicKind::BottomUp:
            for (int j = sublayers - 1; j >= 0; --j)
                for (int i = 0; i < cache_steps; ++i) order.push_back({i, j});
            break;
        case HeuristicKind::Random: {
            for (int i = 0; i < cache_steps; ++i)
                for (int j = 0; j < sublayers; ++j) order.push_back({i, j});
            Rng rng(seed);
            for (size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[rng.uniform_int(i)]);
            break;
        }
        case HeuristicKind::Metric: {
            if (!calib || !calib->model || !calib->sched || !calib->grid || !calib->data)
                throw ValidationError("heuristic_mask: metric kind needs a calibration context");
            const TimeGrid& grid = *calib->grid;
            if (grid.segments() != 2 * cache_steps)
                throw ValidationError("heuristic_mask: grid does not match cache step count");
            const ModelConfig& mc = calib->model->config();
            std::vector<std::vector<double>> score(
                static_cast<size_t>(cache_steps),
                std::vector<double>(static_cast<size_t>(sublayers), 0.0));
            for (int r = 0; r < cache_steps; ++r) {
                int s = grid.times[static_cast<size_t>(2 * r)];
                int m = grid.times[static_cast<size_t>(2 * r) + 1];
                for (int c = 0; c < calib->samples; ++c) {
                    Rng rng(calib->seed + static_cast<uint64_t>(r) * 7919u +
                            static_cast<uint64_t>(c));
                    size_t idx = rng.uniform_int(calib->data->size());
                    int y = calib->data->labels[idx];
                    Tensor x0 = point_tokens(calib->data->points[idx], mc.tokens);
                    Tensor noise = randn({mc.tokens, mc.in_dim}, rng);
                    Tensor x_s = forward_sample(*calib->sched, x0, s, noise);
                    Tensor eps_s = calib->model->forward(x_s, s, y).eps;
                    Tensor x_m = ddim_step(*calib->sched, x_s, eps_s, s, m);
                    auto sc = local_error_scores(*calib->model, x_s, x_m, s, m, y);
                    for (int j = 0; j < sublayers; ++j)
                        score[static_cast<size_t>(r)][static_cast<size_t>(j)] += sc[static_cast<size_t>(j)];
                }
            }
            struct Scored {
                double v;
                int step, j;
            };
            std::vector<Scored> ranked;
            ranked.reserve(static_cast<size_t>(total));
            for (int i = 0; i < cache_steps; ++i)
                for (int j = 0; j < sublayers; ++j)
                    ranked.push_back({score[static_cast<size_t>(i)][static_cast<size_t>(j)], i, j});
            std::stable_sort(ranked.begin(), ranked.end(), [](const Scored& a, const Scored& b) {
                if (a.v != b.v) return a.v < b.v;
                if (a.step != b.step) return a.step < b.step;
                return a.j < b.j;
            });
            for (int64_t k = 0; k < budget; ++k)
                mask.set(ranked[static_cast<size_t>(k)].step, ranked[static_cast<size_t>(k)].j, 0);
            return mask;
        }
    }
    for (int64_t k = 0; k < budget; ++k)
        mask.set(order[static_cast<size_t>(k)].step, order[static_cast<size_t>(k)].j, 0);
    return mask;
}

void save_samples_csv(const RunResult& result, uint64_t base_seed, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("sample: cannot write " + path);
    out << "seed,class,x,y\n";
    char buf[128];
    for (size_t i = 0; i < result.runs.size(); ++i) {
        const auto& run = result.runs[i];
        std::snprintf(buf, sizeof(buf), "%llu,%d,%.9g,%.9g\n",
                      static_cast<unsigned long long>(base_seed + i), run.label,
                      static_cast<double>(run.point[0]), static_cast<double>(run.point[1]));
        out << buf;
    }
}

}  // namespace lc
