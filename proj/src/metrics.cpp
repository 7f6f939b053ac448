#include "lc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace lc {

MacModel MacModel::of(const ModelConfig& cfg) {
    MacModel m;
    uint64_t tok = static_cast<uint64_t>(cfg.tokens);
    uint64_t w = static_cast<uint64_t>(cfg.width);
    uint64_t ffn = static_cast<uint64_t>(cfg.resolved_ffn_dim());
    uint64_t te = static_cast<uint64_t>(cfg.time_embed_dim);
    m.mhsa = 4 * tok * w * w + 2 * tok * tok * w;
    m.ffn = 2 * tok * w * ffn;
    m.overhead = tok * static_cast<uint64_t>(cfg.in_dim) * w  // input projection
                 + 2 * te * te                                // time MLP
                 + static_cast<uint64_t>(cfg.sublayers()) * te * (2 * w + 1)  // modulation heads
                 + tok * w * static_cast<uint64_t>(cfg.in_dim);              // output head
    if (cfg.long_skip)
        m.overhead += static_cast<uint64_t>(cfg.depth / 2) * tok * 2 * w * w;  // skip merges
    return m;
}

MacCount count_macs(const ModelConfig& cfg, const Mask& mask, const std::vector<EvalRole>& roles) {
    MacModel mm = MacModel::of(cfg);
    int cache_rows = static_cast<int>(std::count(roles.begin(), roles.end(), EvalRole::Cache));
    if (mask.cache_steps != cache_rows || mask.sublayers != cfg.sublayers())
        throw ValidationError("count_macs: mask does not match cadence/model");

    MacCount out;
    out.per_eval.reserve(roles.size());
    int row = 0;
    for (EvalRole role : roles) {
        uint64_t eval_sub = 0;
        for (int j = 0; j < cfg.sublayers(); ++j) {
            bool computed = role == EvalRole::Full || mask.at(row, j) == 1;
            if (!computed) continue;
            eval_sub += sublayer_kind(j) == SublayerKind::Mhsa ? mm.mhsa : mm.ffn;
            ++out.kernel_invocations;
        }
        if (role == EvalRole::Cache) ++row;
        out.sublayer += eval_sub;
        out.overhead += mm.overhead;
        out.per_eval.push_back(eval_sub + mm.overhead);
    }
    out.total = out.sublayer + out.overhead;
    uint64_t full_total =
        static_cast<uint64_t>(roles.size()) *
        (mm.overhead + static_cast<uint64_t>(cfg.depth) * (mm.mhsa + mm.ffn));
    out.speedup = out.total ? static_cast<double>(full_total) / static_cast<double>(out.total) : 1.0;
    return out;
}

MacCount count_macs(const ModelConfig& cfg, const Mask& mask, const TimeGrid& grid, Solver solver,
                    bool shifted) {
    return count_macs(cfg, mask, cache_designations(grid.nfe(solver), solver, shifted));
}

uint64_t macs_from_counters(const ModelConfig& cfg, const KernelCounter& counters, int nfe) {
    MacModel mm = MacModel::of(cfg);
    return counters.mhsa * mm.mhsa + counters.ffn * mm.ffn +
           static_cast<uint64_t>(nfe) * mm.overhead;
}

namespace {

double sqdist(const std::array<float, 2>& a, const std::array<float, 2>& b) {
    double dx = static_cast<double>(a[0]) - b[0];
    double dy = static_cast<double>(a[1]) - b[1];
    return dx * dx + dy * dy;
}

}  // namespace

double mmd(const std::vector<std::array<float, 2>>& a, const std::vector<std::array<float, 2>>& b) {
    if (a.empty() || b.empty()) throw ShapeError("mmd: empty sample set");
    // Median-heuristic bandwidth over the pooled pairwise distances.
    std::vector<std::array<float, 2>> pool;
    pool.reserve(a.size() + b.size());
    pool.insert(pool.end(), a.begin(), a.end());
    pool.insert(pool.end(), b.begin(), b.end());
    std::vector<double> d2;
    d2.reserve(pool.size() * (pool.size() - 1) / 2);
    for (size_t i = 0; i < pool.size(); ++i)
        for (size_t j = i + 1; j < pool.size(); ++j) d2.push_back(sqdist(pool[i], pool[j]));
    std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(d2.size() / 2), d2.end());
    double bw = d2[d2.size() / 2];
    if (bw <= 0.0) bw = 1e-12;

    auto kernel_mean = [&](const std::vector<std::array<float, 2>>& x,
                           const std::vector<std::array<float, 2>>& y) {
        double acc = 0.0;
        for (const auto& xi : x)
            for (const auto& yj : y) acc += std::exp(-sqdist(xi, yj) / bw);
        return acc / (static_cast<double>(x.size()) * static_cast<double>(y.size()));
    };
    double m2 = kernel_mean(a, a) + kernel_mean(b, b) - 2.0 * kernel_mean(a, b);
    return std::sqrt(std::max(0.0, m2));
}

double tensor_mse(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b))
        throw ShapeError("tensor_mse: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - b.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.data.size());
}

double final_sample_mse(const RunResult& a, const RunResult& b) {
    if (a.runs.size() != b.runs.size() || a.runs.empty())
        throw ShapeError("final_sample_mse: run counts differ");
    double acc = 0.0;
    for (size_t i = 0; i < a.runs.size(); ++i) acc += tensor_mse(a.runs[i].x0, b.runs[i].x0);
    return acc / static_cast<double>(a.runs.size());
}

void save_curve_csv(const std::vector<CurveRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("sweep: cannot write " + path);
    out << "config_id,lambda,theta,cache_ratio,ffn_ratio,mhsa_ratio,macs,speedup,traj_mse,mmd,"
           "seed_count\n";
    char buf[320];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%.9g,%.9g,%llu,%.9g,%.9g,%.9g,%d\n",
                      r.config_id.c_str(), r.lambda, r.theta, r.cache_ratio, r.ffn_ratio,
                      r.mhsa_ratio, static_cast<unsigned long long>(r.macs), r.speedup, r.traj_mse,
                      r.mmd, r.seed_count);
        out << buf;
    }
}

CurveRecord evaluate_mask(const DenoiserModel& model, const NoiseSchedule& sched,
                          const TimeGrid& grid, const Mask& mask, const SampleConfig& cfg,
                          const std::vector<std::array<float, 2>>& holdout) {
    RunResult full = sample_full(model, sched, grid, cfg);
    RunResult cached = sample_cached(model, sched, grid, mask, cfg);
    CacheRatios ratios = cache_ratio(mask);
    MacCount macs = count_macs(model.config(), mask, grid, cfg.solver, cfg.shifted_cache);

    CurveRecord rec;
    rec.cache_ratio = ratios.overall;
    rec.ffn_ratio = ratios.ffn;
    rec.mhsa_ratio = ratios.mhsa;
    rec.macs = macs.total;
    rec.speedup = macs.speedup;
    rec.traj_mse = final_sample_mse(cached, full);
    if (!holdout.empty()) {
        std::vector<std::array<float, 2>> points;
        points.reserve(cached.runs.size());
        for (const auto& run : cached.runs) points.push_back(run.point);
        rec.mmd = mmd(points, holdout);
    }
    rec.seed_count = cfg.n_samples;
    return rec;
}

std::vector<CurveRecord> sweep_theta(const DenoiserModel& model, const NoiseSchedule& sched,
                                     const TimeGrid& grid, const Router& router,
                                     const std::vector<double>& thetas, const SampleConfig& cfg,
                                     const std::vector<std::array<float, 2>>& holdout) {
    std::vector<CurveRecord> records;
    for (size_t i = 0; i < thetas.size(); ++i) {
        Mask mask = discretize(router, static_cast<float>(thetas[i]), router.direction);
        CurveRecord rec = evaluate_mask(model, sched, grid, mask, cfg, holdout);
        rec.config_id = "theta" + std::to_string(i);
        rec.theta = thetas[i];
        records.push_back(std::move(rec));
    }
    return records;
}

void export_router_heatmap(const Router& router, const std::string& prefix) {
    int steps = router.cache_steps(), subs = router.sublayers();
    Mask mask = discretize(router);

    std::string values_path = prefix + ".values.csv";
    std::string mask_path = prefix + ".mask.csv";
    {
        std::ofstream out(values_path, std::ios::binary);
        if (!out) throw ValidationError("export-router: cannot write " + values_path);
        char buf[32];
        for (int i = 0; i < steps; ++i) {
            for (int j = 0; j < subs; ++j) {
                double sg = 1.0 / (1.0 + std::exp(-static_cast<double>(router.logits.at(i, j))));
                std::snprintf(buf, sizeof(buf), "%s%.6f", j ? "," : "", sg);
                out << buf;
            }
            out << "\n";
        }
    }
    {
        std::ofstream out(mask_path, std::ios::binary);
        if (!out) throw ValidationError("export-router: cannot write " + mask_path);
        for (int i = 0; i < steps; ++i) {
            for (int j = 0; j < subs; ++j) out << (j ? "," : "") << int(mask.at(i, j));
            out << "\n";
        }
    }
    nlohmann::json sidecar;
    sidecar["rows"] = steps;
    sidecar["cols"] = subs;
    sidecar["row_axis"] = "cache_step";
    sidecar["col_axis"] = "sublayer";
    std::vector<std::string> col_labels;
    for (int j = 0; j < subs; ++j)
        col_labels.push_back((j % 2 == 0 ? "mhsa" : "ffn") + std::to_string(j / 2));
    sidecar["col_labels"] = col_labels;
    sidecar["values"] = values_path;
    sidecar["mask"] = mask_path;
    sidecar["mask_convention"] = "0=cached,1=compute";
    std::ofstream out(prefix + ".json", std::ios::binary);
    if (!out) throw ValidationError("export-router: cannot write " + prefix + ".json");
    out << sidecar.dump(2) << "\n";
}

}  // namespace lc
