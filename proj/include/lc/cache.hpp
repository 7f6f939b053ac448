#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lc/schedule.hpp"
#include "lc/tensor.hpp"

namespace lc {

/// How the cached non-residual contribution is gated at a cache step.
///   PaperLiteral : current gate times cached feature, g(m) * f(h^s).
///   ExactEndpoint: the full gated output saved at the full step,
///                  g(s) * f(h^s), which makes an all-cached evaluation
///                  replay the previous one exactly.
enum class CacheMode { PaperLiteral, ExactEndpoint };

struct CacheEntry {
    Tensor h;      // sublayer input at the full step
    Tensor f;      // non-residual output f(h, s)
    Tensor gated;  // g(s) * f(h, s)
    int provenance = -1;
    bool populated() const { return provenance >= 0; }
};

/// Per-sublayer cached state from the most recent full evaluation. Owned by
/// a single sampling trajectory.
struct CacheStore {
    std::vector<CacheEntry> entries;

    explicit CacheStore(int sublayers = 0) : entries(static_cast<size_t>(sublayers)) {}
    int sublayers() const { return static_cast<int>(entries.size()); }

    const CacheEntry& read(int j) const {
        const CacheEntry& e = entries.at(static_cast<size_t>(j));
        if (!e.populated())
            throw ValidationError("cache: sublayer " + std::to_string(j) + " has no cached entry");
        return e;
    }
};

/// One interpolated layer evaluation:
///   out = h_m - (1-alpha) (h_m - h^s) + mix
/// where mix is g(m) (beta f(h_m) + (1-beta) f(h^s)) in PaperLiteral mode and
/// beta g(m) f(h_m) + (1-beta) [g(s) f(h^s)] in ExactEndpoint mode.
/// `beta` is a one-element tensor; it may be tape-linked for training.
/// `f_current` is invoked lazily and is skipped entirely when beta is the
/// plain constant 0.
Tensor interp_layer(const Tensor& h_m, const std::function<Tensor()>& f_current,
                    const Tensor& gate_m, const CacheEntry& entry, CacheMode mode,
                    const Tensor& beta, float alpha);

enum class ThresholdDirection {
    CacheLowSigmoid,   // cache when sigmoid(logit) <= theta (loss-consistent default)
    CacheHighSigmoid,  // cache when sigmoid(logit) > theta
};

/// Time-variant per-sublayer routing logits: one row per cache step, one
/// column per sublayer. Continuous via sigmoid during training, thresholded
/// to a binary mask at inference.
struct Router {
    Tensor logits;  // (cache_steps, sublayers)
    float alpha = 0.0f;
    float threshold = 0.5f;
    ThresholdDirection direction = ThresholdDirection::CacheLowSigmoid;

    int cache_steps() const { return logits.shape.empty() ? 0 : logits.shape[0]; }
    int sublayers() const { return logits.shape.size() < 2 ? 0 : logits.shape[1]; }

    static Router init(int cache_steps, int sublayers, uint64_t seed);
};

/// Binary compute/cache decisions; compute[i*sublayers+j] == 0 means cached.
struct Mask {
    int cache_steps = 0;
    int sublayers = 0;
    std::vector<uint8_t> compute;

    uint8_t at(int step, int j) const {
        return compute[static_cast<size_t>(step) * sublayers + j];
    }
    void set(int step, int j, uint8_t v) {
        compute[static_cast<size_t>(step) * sublayers + j] = v;
    }
    int64_t cached_count() const;

    static Mask all_compute(int cache_steps, int sublayers);
    static Mask all_cached(int cache_steps, int sublayers);
};

Mask discretize(const Router& router);
Mask discretize(const Router& router, float theta, ThresholdDirection direction);

/// Mask with exactly `budget` cached entries: the most cacheable entries by
/// sigmoid order under the router's direction. Ties break on (step, sublayer).
Mask mask_from_budget(const Router& router, int64_t budget);

struct CacheRatios {
    double overall = 0.0;
    double ffn = 0.0;
    double mhsa = 0.0;
};

/// Cached fraction of cache-step entries, overall and per sublayer kind
/// (even columns are MHSA, odd are FFN).
CacheRatios cache_ratio(const Mask& mask);

enum class EvalRole : uint8_t { Full, Cache };

/// Full/cache designation for each of `nfe` model evaluations (1-based
/// positions in execution order). DDIM caches even positions. DPM-Solver-2
/// with `shifted` caches odd positions from 3 to nfe-1 so the in-step
/// midpoint evaluation stays fresh; unshifted caches even positions.
std::vector<EvalRole> cache_designations(int nfe, Solver solver, bool shifted);

/// The designation the solver should use by default (shifted for DPM-2).
std::vector<EvalRole> shift_cache_schedule(int nfe, Solver solver);

// Router JSON export/import. The stored mask is recomputed from
// logits + threshold on import and must match.
void save_router(const Router& router, const std::string& path);
Router load_router(const std::string& path);
std::string router_to_json(const Router& router);
Router router_from_json(const std::string& text);

}  // namespace lc
