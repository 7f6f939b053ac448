#include "lc/cache.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "lc/tape.hpp"

#include "json.hpp"

namespace lc {

Tensor interp_layer(const Tensor& h_m, const std::function<Tensor()>& f_current,
                    const Tensor& gate_m, const CacheEntry& entry, CacheMode mode,
                    const Tensor& beta, float alpha) {
    if (alpha < 0.0f || alpha > 1.0f) throw ShapeError("interp_layer: alpha outside [0,1]");
    if (!beta.is_scalar()) throw ShapeError("interp_layer: beta must be a scalar");

    bool beta_const = !beta.on_tape();
    float b = beta.data[0];
    bool needs_cache = !(beta_const && b == 1.0f) || alpha < 1.0f;
    if (needs_cache && !entry.populated())
        throw ValidationError("interp_layer: cache entry not populated");

    // Endpoint beta = alpha = 1 is the standard layer, evaluated with the
    // exact same op sequence so the results are bit-identical.
    if (beta_const && b == 1.0f && alpha == 1.0f)
        return add(h_m, mul(f_current(), gate_m));

    Tensor skip;
    if (alpha == 1.0f) {
        skip = h_m;
    } else if (alpha == 0.0f) {
        skip = entry.h;
    } else {
        skip = add(scale(h_m, alpha), scale(entry.h, 1.0f - alpha));
    }

    if (beta_const && b == 0.0f) {
        // Fully cached: f(h_m) is never computed.
        Tensor mix = mode == CacheMode::PaperLiteral ? mul(entry.f, gate_m) : entry.gated;
        return add(skip, mix);
    }

    Tensor f_m = f_current();
    Tensor one_minus_beta = add(scale(beta, -1.0f), scalar(1.0f));
    Tensor mix;
    if (mode == CacheMode::PaperLiteral) {
        Tensor blend = add(mul(f_m, beta), mul(entry.f, one_minus_beta));
        mix = mul(blend, gate_m);
    } else {
        mix = add(mul(mul(f_m, gate_m), beta), mul(entry.gated, one_minus_beta));
    }
    return add(skip, mix);
}

Router Router::init(int cache_steps, int sublayers, uint64_t seed) {
    Router r;
    Rng rng(seed);
    r.logits = randn({cache_steps, sublayers}, rng);
    return r;
}

int64_t Mask::cached_count() const {
    return static_cast<int64_t>(compute.size()) -
           std::accumulate(compute.begin(), compute.end(), int64_t{0});
}

Mask Mask::all_compute(int cache_steps, int sublayers) {
    Mask m;
    m.cache_steps = cache_steps;
    m.sublayers = sublayers;
    m.compute.assign(static_cast<size_t>(cache_steps) * sublayers, 1);
    return m;
}

Mask Mask::all_cached(int cache_steps, int sublayers) {
    Mask m = all_compute(cache_steps, sublayers);
    std::fill(m.compute.begin(), m.compute.end(), 0);
    return m;
}

namespace {

double sigmoidd(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Mask discretize(const Router& router, float theta, ThresholdDirection direction) {
    if (!(theta > 0.0f && theta < 1.0f)) throw ShapeError("discretize: theta outside (0,1)");
    Mask m = Mask::all_compute(router.cache_steps(), router.sublayers());
    for (int i = 0; i < m.cache_steps; ++i)
        for (int j = 0; j < m.sublayers; ++j) {
            double sg = sigmoidd(router.logits.at(i, j));
            bool cached = direction == ThresholdDirection::CacheLowSigmoid ? sg <= theta
                                                                           : sg > theta;
            m.set(i, j, cached ? 0 : 1);
        }
    return m;
}

Mask discretize(const Router& router) {
    return discretize(router, router.threshold, router.direction);
}

Mask mask_from_budget(const Router& router, int64_t budget) {
    int64_t total = static_cast<int64_t>(router.cache_steps()) * router.sublayers();
    if (budget < 0 || budget > total) throw ShapeError("mask_from_budget: budget out of range");
    struct Item {
        double key;
        int step, j;
    };
    std::vector<Item> items;
    items.reserve(static_cast<size_t>(total));
    for (int i = 0; i < router.cache_steps(); ++i)
        for (int j = 0; j < router.sublayers(); ++j) {
            double sg = sigmoidd(router.logits.at(i, j));
            double key = router.direction == ThresholdDirection::CacheLowSigmoid ? sg : -sg;
            items.push_back({key, i, j});
        }
    std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
        if (a.key != b.key) return a.key < b.key;
        if (a.step != b.step) return a.step < b.step;
        return a.j < b.j;
    });
    Mask m = Mask::all_compute(router.cache_steps(), router.sublayers());
    for (int64_t k = 0; k < budget; ++k) m.set(items[static_cast<size_t>(k)].step,
                                               items[static_cast<size_t>(k)].j, 0);
    return m;
}

CacheRatios cache_ratio(const Mask& mask) {
    CacheRatios r;
    int64_t total = 0, cached = 0, mhsa_total = 0, mhsa_cached = 0, ffn_total = 0, ffn_cached = 0;
    for (int i = 0; i < mask.cache_steps; ++i)
        for (int j = 0; j < mask.sublayers; ++j) {
            bool is_mhsa = j % 2 == 0;
            bool is_cached = mask.at(i, j) == 0;
            ++total;
            (is_mhsa ? mhsa_total : ffn_total) += 1;
            if (is_cached) {
                ++cached;
                (is_mhsa ? mhsa_cached : ffn_cached) += 1;
            }
        }
    r.overall = total ? static_cast<double>(cached) / total : 0.0;
    r.mhsa = mhsa_total ? static_cast<double>(mhsa_cached) / mhsa_total : 0.0;
    r.ffn = ffn_total ? static_cast<double>(ffn_cached) / ffn_total : 0.0;
    return r;
}

std::vector<EvalRole> cache_designations(int nfe, Solver solver, bool shifted) {
    if (nfe < 2 || nfe % 2 != 0)
        throw ValidationError("cache_designations: evaluation count must be even and >= 2");
    std::vector<EvalRole> roles(static_cast<size_t>(nfe), EvalRole::Full);
    if (solver == Solver::Ddim || !shifted) {
        for (int p = 2; p <= nfe; p += 2) roles[static_cast<size_t>(p) - 1] = EvalRole::Cache;
    } else {
        for (int p = 3; p <= nfe - 1; p += 2) roles[static_cast<size_t>(p) - 1] = EvalRole::Cache;
    }
    return roles;
}

std::vector<EvalRole> shift_cache_schedule(int nfe, Solver solver) {
    return cache_designations(nfe, solver, solver == Solver::Dpm2);
}

// ---- JSON ------------------------------------------------------------------

std::string router_to_json(const Router& router) {
    nlohmann::json j;
    j["cache_steps"] = router.cache_steps();
    j["sublayers"] = router.sublayers();
    j["alpha"] = router.alpha;
    j["threshold"] = router.threshold;
    j["direction"] =
        router.direction == ThresholdDirection::CacheLowSigmoid ? "cache_low" : "cache_high";
    j["logits"] = router.logits.data;
    Mask m = discretize(router);
    std::vector<int> mask_ints(m.compute.begin(), m.compute.end());
    // Stored convention matches discretize: 0 = cached, 1 = compute.
    j["mask"] = mask_ints;
    return j.dump(2);
}

Router router_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("router: bad JSON: ") + e.what());
    }
    Router r;
    try {
        int steps = j.at("cache_steps").get<int>();
        int subs = j.at("sublayers").get<int>();
        r.alpha = j.at("alpha").get<float>();
        r.threshold = j.at("threshold").get<float>();
        if (j.contains("direction"))
            r.direction = j["direction"].get<std::string>() == "cache_high"
                              ? ThresholdDirection::CacheHighSigmoid
                              : ThresholdDirection::CacheLowSigmoid;
        auto logits = j.at("logits").get<std::vector<float>>();
        if (static_cast<int64_t>(logits.size()) != static_cast<int64_t>(steps) * subs)
            throw ValidationError("router: logits size does not match cache_steps x sublayers");
        r.logits = Tensor({steps, subs}, std::move(logits));
        auto mask_ints = j.at("mask").get<std::vector<int>>();
        Mask expect = discretize(r);
        if (mask_ints.size() != expect.compute.size())
            throw ValidationError("router: mask size mismatch");
        for (size_t i = 0; i < mask_ints.size(); ++i)
            if (mask_ints[i] != static_cast<int>(expect.compute[i]))
                throw ValidationError("router: stored mask disagrees with logits + threshold");
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("router: missing or malformed field: ") + e.what());
    }
    return r;
}

void save_router(const Router& router, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("router: cannot write " + path);
    out << router_to_json(router) << "\n";
}

Router load_router(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("router: cannot read " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return router_from_json(text);
}

}  // namespace lc
