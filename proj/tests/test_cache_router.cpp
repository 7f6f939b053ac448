#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "json.hpp"
#include "lc/cache.hpp"
#include "lc/model.hpp"
#include "lc/sample.hpp"

using namespace lc;

namespace {

Tensor make_randn(std::vector<int> shape, uint64_t seed, float stddev = 1.0f) {
    Rng rng(seed);
    return randn(std::move(shape), rng, stddev);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape == b.shape);
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
    return m;
}

DenoiserModel random_model(ModelConfig cfg, uint64_t seed) {
    DenoiserModel model(cfg, seed);
    Rng rng(seed ^ 0xabcdef);
    model.randomize_all(rng, 0.4f);
    return model;
}

// Forces sublayer j's gate head to output exactly `value` for any condition.
void pin_gate(DenoiserModel& model, int j, float value) {
    std::string base = "block" + std::to_string(j / 2) +
                       (sublayer_kind(j) == SublayerKind::Mhsa ? ".attn" : ".ffn");
    for (size_t i = 0; i < model.param_count(); ++i) {
        if (model.param_name(i) == base + ".mod.w") {
            Tensor& w = model.param(i);
            int cols = w.shape[1];
            for (int r = 0; r < w.shape[0]; ++r) w.at(r, cols - 1) = 0.0f;
        } else if (model.param_name(i) == base + ".mod.b") {
            model.param(i).data.back() = value;
        }
    }
}

Tensor beta_row_of(const std::vector<float>& vals) {
    Tensor t = zeros({static_cast<int>(vals.size())});
    t.data = vals;
    return t;
}

}  // namespace

TEST_CASE("interp endpoints: all-ones is the standard layer, bit-exact") {
    ModelConfig cfg;
    cfg.depth = 3;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.time_embed_dim = 16;
    DenoiserModel model = random_model(cfg, 11);

    Tensor x_s = make_randn({cfg.tokens, cfg.in_dim}, 12);
    ForwardResult at_s = model.forward(x_s, 800, 1, ForwardCtx{nullptr, nullptr, true});
    CacheStore store(cfg.sublayers());
    model.fill_cache(*at_s.trace, store);

    Tensor x_m = make_randn({cfg.tokens, cfg.in_dim}, 13);
    Tensor ones = beta_row_of(std::vector<float>(static_cast<size_t>(cfg.sublayers()), 1.0f));
    InterpSettings settings;  // defaults: alpha 0 for cached, standard for computed
    Tensor via_interp = model.forward_interp(x_m, 700, 1, store, ones, settings).eps;
    Tensor plain = model.forward(x_m, 700, 1).eps;
    CHECK(max_abs_diff(via_interp, plain) == 0.0);
}

TEST_CASE("interp endpoints: all-cached exact-endpoint reproduces the cached evaluation") {
    for (bool long_skip : {false, true}) {
        ModelConfig cfg;
        cfg.depth = 4;
        cfg.width = 16;
        cfg.heads = 2;
        cfg.time_embed_dim = 16;
        cfg.long_skip = long_skip;
        DenoiserModel model = random_model(cfg, long_skip ? 21 : 22);

        Tensor x_s = make_randn({cfg.tokens, cfg.in_dim}, 23);
        ForwardResult at_s = model.forward(x_s, 900, 2, ForwardCtx{nullptr, nullptr, true});
        CacheStore store(cfg.sublayers());
        model.fill_cache(*at_s.trace, store);

        Tensor x_m = make_randn({cfg.tokens, cfg.in_dim}, 24);
        Tensor zeros_row = beta_row_of(std::vector<float>(static_cast<size_t>(cfg.sublayers()), 0.0f));
        InterpSettings settings;
        settings.alpha = 0.0f;
        settings.mode = CacheMode::ExactEndpoint;
        KernelCounter counter;
        Tensor eps = model.forward_interp(x_m, 800, 2, store, zeros_row, settings,
                                          ForwardCtx{nullptr, &counter, false})
                         .eps;
        CHECK(max_abs_diff(eps, at_s.eps) < 1e-6);
        // The compute saving is real: no kernel ran.
        CHECK(counter.total() == 0);
    }
}

TEST_CASE("interp layer matches the scalar formula at alpha = beta = 0.5") {
    Rng rng(31);
    Tensor h_m = randn({2, 4}, rng);
    Tensor h_s = randn({2, 4}, rng);
    Tensor f_m = randn({2, 4}, rng);
    Tensor f_s = randn({2, 4}, rng);
    float g_m = 0.8f, g_s = -0.6f;

    CacheEntry entry;
    entry.h = h_s;
    entry.f = f_s;
    entry.gated = scale(f_s, g_s);
    entry.provenance = 10;

    auto f_fn = [&]() { return f_m; };
    Tensor gate = Tensor({1, 1}, {g_m});

    Tensor out = interp_layer(h_m, f_fn, gate, entry, CacheMode::PaperLiteral,
                              Tensor({1}, {0.5f}), 0.5f);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 4; ++c) {
            double want = h_m.at(r, c) - 0.5 * (static_cast<double>(h_m.at(r, c)) - h_s.at(r, c)) +
                          g_m * (0.5 * f_m.at(r, c) + 0.5 * f_s.at(r, c));
            CHECK(std::abs(static_cast<double>(out.at(r, c)) - want) < 1e-6);
        }

    Tensor out_ep = interp_layer(h_m, f_fn, gate, entry, CacheMode::ExactEndpoint,
                                 Tensor({1}, {0.5f}), 0.5f);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 4; ++c) {
            double want = h_m.at(r, c) - 0.5 * (static_cast<double>(h_m.at(r, c)) - h_s.at(r, c)) +
                          0.5 * g_m * f_m.at(r, c) + 0.5 * g_s * f_s.at(r, c);
            CHECK(std::abs(static_cast<double>(out_ep.at(r, c)) - want) < 1e-6);
        }
}

TEST_CASE("interp layer output is affine in beta (three-point collinearity)") {
    Rng rng(41);
    Tensor h_m = randn({3, 5}, rng);
    Tensor f_m = randn({3, 5}, rng);
    CacheEntry entry;
    entry.h = randn({3, 5}, rng);
    entry.f = randn({3, 5}, rng);
    entry.gated = scale(entry.f, 0.7f);
    entry.provenance = 1;
    Tensor gate = Tensor({1, 1}, {1.3f});
    auto f_fn = [&]() { return f_m; };

    for (CacheMode mode : {CacheMode::PaperLiteral, CacheMode::ExactEndpoint}) {
        Tensor at0 = interp_layer(h_m, f_fn, gate, entry, mode, Tensor({1}, {0.1f}), 0.3f);
        Tensor at1 = interp_layer(h_m, f_fn, gate, entry, mode, Tensor({1}, {0.9f}), 0.3f);
        Tensor mid = interp_layer(h_m, f_fn, gate, entry, mode, Tensor({1}, {0.5f}), 0.3f);
        for (size_t i = 0; i < mid.data.size(); ++i) {
            double want = 0.5 * (static_cast<double>(at0.data[i]) + at1.data[i]);
            CHECK(std::abs(static_cast<double>(mid.data[i]) - want) < 1e-6);
        }
    }
}

TEST_CASE("missing cache entries are rejected with the sublayer index") {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.time_embed_dim = 8;
    DenoiserModel model = random_model(cfg, 51);
    CacheStore empty(cfg.sublayers());
    Tensor x = make_randn({cfg.tokens, cfg.in_dim}, 52);
    Tensor zeros_row = beta_row_of({0, 0, 0, 0});
    CHECK_THROWS_AS(model.forward_interp(x, 100, 0, empty, zeros_row, InterpSettings{}),
                    ValidationError);
    CHECK_THROWS_WITH_AS(empty.read(2), doctest::Contains("2"), ValidationError);
    // Wrong beta row size.
    CHECK_THROWS_AS(model.forward_interp(x, 100, 0, empty, beta_row_of({1, 1}), InterpSettings{}),
                    ShapeError);
}

TEST_CASE("discretize follows the loss-consistent direction by default") {
    Router r;
    r.logits = full({2, 4}, -10.0f);
    r.threshold = 0.5f;
    // Low sigmoid = cacheable under the default direction.
    Mask low = discretize(r);
    CHECK(low.cached_count() == 8);
    r.logits = full({2, 4}, 10.0f);
    Mask high = discretize(r);
    CHECK(high.cached_count() == 0);

    // The paper-literal inequality caches when sigmoid exceeds theta.
    r.direction = ThresholdDirection::CacheHighSigmoid;
    r.logits = full({2, 4}, -10.0f);
    CHECK(discretize(r).cached_count() == 0);  // all-compute mask
    r.logits = full({2, 4}, 10.0f);
    CHECK(discretize(r).cached_count() == 8);  // all-cached at cache steps
    CHECK_THROWS_AS(discretize(r, 0.0f, r.direction), ShapeError);
}

TEST_CASE("threshold sweeps move the cached count monotonically") {
    Router r = Router::init(5, 8, 61);
    std::vector<float> thetas{0.1f, 0.3f, 0.5f, 0.7f, 0.9f};

    // Paper-literal direction: cached count non-increasing in theta.
    int64_t prev = 41;
    for (float theta : thetas) {
        int64_t c = discretize(r, theta, ThresholdDirection::CacheHighSigmoid).cached_count();
        CHECK(c <= prev);
        prev = c;
    }
    // Default direction: non-decreasing in theta.
    prev = -1;
    for (float theta : thetas) {
        int64_t c = discretize(r, theta, ThresholdDirection::CacheLowSigmoid).cached_count();
        CHECK(c >= prev);
        prev = c;
    }
}

TEST_CASE("cache ratios count overall and per sublayer kind") {
    CHECK(cache_ratio(Mask::all_compute(4, 6)).overall == 0.0);
    CHECK(cache_ratio(Mask::all_cached(4, 6)).overall == 1.0);
    Mask m = Mask::all_compute(2, 4);
    m.set(0, 0, 0);
    m.set(0, 1, 0);
    m.set(1, 2, 0);
    CHECK(cache_ratio(m).overall == doctest::Approx(0.375));
    CHECK(cache_ratio(m).mhsa == doctest::Approx(0.5));   // cached (0,0) and (1,2)
    CHECK(cache_ratio(m).ffn == doctest::Approx(0.25));   // cached (0,1)
}

TEST_CASE("mask_from_budget caches the most cacheable entries") {
    Router r = Router::init(3, 4, 71);
    for (int64_t k : {0, 3, 7, 12}) {
        Mask m = mask_from_budget(r, k);
        CHECK(m.cached_count() == k);
    }
    CHECK_THROWS_AS(mask_from_budget(r, 13), ShapeError);
    // Budget-k cached set under the default direction = k lowest sigmoids.
    Mask m = mask_from_budget(r, 5);
    std::vector<std::pair<float, int>> order;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) order.push_back({r.logits.at(i, j), i * 4 + j});
    std::sort(order.begin(), order.end());
    for (int k = 0; k < 5; ++k)
        CHECK(m.compute[static_cast<size_t>(order[static_cast<size_t>(k)].second)] == 0);
}

TEST_CASE("cache designations per evaluation") {
    auto ddim = cache_designations(10, Solver::Ddim, false);
    std::vector<EvalRole> want{EvalRole::Full, EvalRole::Cache, EvalRole::Full, EvalRole::Cache,
                               EvalRole::Full, EvalRole::Cache, EvalRole::Full, EvalRole::Cache,
                               EvalRole::Full, EvalRole::Cache};
    CHECK(ddim == want);

    auto unshifted = cache_designations(20, Solver::Dpm2, false);
    auto shifted = shift_cache_schedule(20, Solver::Dpm2);
    std::vector<int> cached_unshifted, cached_shifted;
    for (int p = 1; p <= 20; ++p) {
        if (unshifted[static_cast<size_t>(p) - 1] == EvalRole::Cache) cached_unshifted.push_back(p);
        if (shifted[static_cast<size_t>(p) - 1] == EvalRole::Cache) cached_shifted.push_back(p);
    }
    CHECK(cached_unshifted == std::vector<int>{2, 4, 6, 8, 10, 12, 14, 16, 18, 20});
    CHECK(cached_shifted == std::vector<int>{3, 5, 7, 9, 11, 13, 15, 17, 19});
    // Endpoints stay full under the shift.
    CHECK(shifted.front() == EvalRole::Full);
    CHECK(shifted.back() == EvalRole::Full);

    CHECK(shift_cache_schedule(10, Solver::Ddim) == ddim);
    CHECK_THROWS_AS(cache_designations(7, Solver::Ddim, false), ValidationError);
}

TEST_CASE("local error scores: zeros for identical states and zero gates") {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.width = 12;
    cfg.heads = 2;
    cfg.time_embed_dim = 12;
    DenoiserModel model = random_model(cfg, 81);
    Tensor x = make_randn({cfg.tokens, cfg.in_dim}, 82);

    auto zero_scores = local_error_scores(model, x, x, 300, 300, 0);
    for (double s : zero_scores) CHECK(s == 0.0);

    // Zero one sublayer's gate: its score vanishes despite feature change.
    pin_gate(model, 1, 0.0f);
    Tensor x2 = make_randn({cfg.tokens, cfg.in_dim}, 83);
    auto scores = local_error_scores(model, x, x2, 300, 200, 0);
    CHECK(scores[1] == 0.0);
    CHECK(scores[0] > 0.0);
}

TEST_CASE("caching one sublayer perturbs the output by (1-beta)^2 times its score") {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.width = 12;
    cfg.heads = 2;
    cfg.time_embed_dim = 12;
    DenoiserModel model = random_model(cfg, 91);
    const int target = 1;
    pin_gate(model, target, 1.0f);  // |g| = 1 so score = ||df||^2
    pin_gate(model, 2, 0.0f);      // downstream sublayers act as the identity
    pin_gate(model, 3, 0.0f);

    int s = 500, m = 400, y = 1;
    Tensor x_s = make_randn({cfg.tokens, cfg.in_dim}, 92);
    Tensor x_m = make_randn({cfg.tokens, cfg.in_dim}, 93);

    ForwardResult at_s = model.forward(x_s, s, y, ForwardCtx{nullptr, nullptr, true});
    CacheStore store(cfg.sublayers());
    model.fill_cache(*at_s.trace, store);

    double score = local_error_scores(model, x_s, x_m, s, m, y)[target];

    float beta = 0.3f;
    Tensor row = beta_row_of({1.0f, beta, 1.0f, 1.0f});
    InterpSettings settings;
    settings.alpha = 1.0f;  // isolate the non-residual path
    Tensor hidden_interp = model.forward_interp(x_m, m, y, store, row, settings).final_hidden;
    Tensor hidden_plain = model.forward(x_m, m, y).final_hidden;

    double sq = 0.0;
    for (size_t i = 0; i < hidden_interp.data.size(); ++i) {
        double d = static_cast<double>(hidden_interp.data[i]) - hidden_plain.data[i];
        sq += d * d;
    }
    double want = (1.0 - beta) * (1.0 - beta) * score;
    CHECK(std::abs(sq - want) < 1e-5 * std::max(1.0, want));
}

TEST_CASE("router JSON round-trips and validates the stored mask") {
    Router r = Router::init(4, 6, 101);
    r.alpha = 0.25f;
    r.threshold = 0.4f;
    std::string text = router_to_json(r);
    Router back = router_from_json(text);
    CHECK(back.cache_steps() == 4);
    CHECK(back.sublayers() == 6);
    CHECK(back.alpha == r.alpha);
    CHECK(back.threshold == r.threshold);
    CHECK(back.logits.data == r.logits.data);

    // Tampered mask entries are rejected on import.
    nlohmann::json j = nlohmann::json::parse(text);
    j["mask"][0] = 1 - j["mask"][0].get<int>();
    CHECK_THROWS_AS(router_from_json(j.dump()), ValidationError);

    // Wrong logits size is rejected.
    nlohmann::json j2 = nlohmann::json::parse(text);
    j2["logits"].erase(0);
    CHECK_THROWS_AS(router_from_json(j2.dump()), ValidationError);
    CHECK_THROWS_AS(router_from_json("not json"), ValidationError);
}

TEST_CASE("drop mode removes the non-residual path outright") {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.time_embed_dim = 8;
    DenoiserModel model = random_model(cfg, 111);
    Tensor x = make_randn({cfg.tokens, cfg.in_dim}, 112);
    CacheStore empty(cfg.sublayers());
    InterpSettings settings;
    settings.drop = true;

    // beta = 1 everywhere: the standard forward.
    Tensor ones = beta_row_of({1, 1, 1, 1});
    Tensor dropped = model.forward_interp(x, 200, 0, empty, ones, settings).eps;
    Tensor plain = model.forward(x, 200, 0).eps;
    CHECK(max_abs_diff(dropped, plain) == 0.0);

    // beta = 0 everywhere: the embedding/skip-only path, no kernels invoked.
    KernelCounter counter;
    Tensor zeros_row = beta_row_of({0, 0, 0, 0});
    ForwardResult skip_only = model.forward_interp(x, 200, 0, empty, zeros_row, settings,
                                                   ForwardCtx{nullptr, &counter, false});
    CHECK(counter.total() == 0);
    Tensor h = add(add(matmul(x, model.param(0)), model.param(1)), model.param(2));
    CHECK(max_abs_diff(skip_only.final_hidden, h) == 0.0);
}
