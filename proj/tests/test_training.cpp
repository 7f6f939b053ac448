#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lc/metrics.hpp"
#include "lc/pretrain.hpp"
#include "lc/router_train.hpp"
#include "lc/sample.hpp"

using namespace lc;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.tokens = 4;
    cfg.num_classes = 4;
    cfg.time_embed_dim = 16;
    return cfg;
}

// Shared fixture: a briefly pretrained tiny model on a 4-mode mixture.
struct Fixture {
    ModelConfig cfg = tiny_config();
    NoiseSchedule sched = NoiseSchedule::make(ScheduleKind::VpLinear, 1000);
    Dataset data;
    DenoiserModel model;

    Fixture() : model(cfg, 7) {
        GmmSpec spec{4, 2.0, 0.15};
        data = gen_gmm(spec, 1024, 5);
        PretrainConfig pc;
        pc.steps = 700;
        pc.batch = 16;
        pc.lr = 2e-3f;
        pc.seed = 9;
        pc.threads = 4;
        model.schedule_kind = ScheduleKind::VpLinear;
        model.schedule_t_train = 1000;
        pretrain(model, data, sched, pc);
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

// Mean eps-tilde-vs-eps MSE over a fixed evaluation batch for one cache pair.
double cached_recon_mse(const DenoiserModel& model, const NoiseSchedule& sched,
                        const TimeGrid& grid, const Tensor& logits, int row,
                        const Dataset& data) {
    const ModelConfig& mc = model.config();
    int s = grid.times[static_cast<size_t>(2 * row)];
    int m = grid.times[static_cast<size_t>(2 * row) + 1];
    Tensor betas = sigmoid(slice(logits, 0, row, 1));
    InterpSettings settings;
    double acc = 0.0;
    const int n = 16;
    for (int b = 0; b < n; ++b) {
        Rng rng(4000 + static_cast<uint64_t>(b));
        size_t idx = rng.uniform_int(data.size());
        Tensor x0 = point_tokens(data.points[idx], mc.tokens);
        Tensor noise = randn({mc.tokens, mc.in_dim}, rng);
        Tensor x_s = forward_sample(sched, x0, s, noise);
        ForwardResult at_s = model.forward(x_s, s, data.labels[idx], ForwardCtx{nullptr, nullptr, true});
        CacheStore store(mc.sublayers());
        model.fill_cache(*at_s.trace, store);
        Tensor x_m = ddim_step(sched, x_s, at_s.eps, s, m);
        Tensor target = model.forward(x_m, m, data.labels[idx]).eps;
        Tensor tilde = model.forward_interp(x_m, m, data.labels[idx], store, betas, settings).eps;
        acc += tensor_mse(tilde, target);
    }
    return acc / n;
}

}  // namespace

TEST_CASE("pretrain with zero steps leaves parameters unchanged") {
    ModelConfig cfg = tiny_config();
    DenoiserModel model(cfg, 11);
    uint64_t before = model.param_hash();
    Dataset data = gen_gmm(GmmSpec{4, 2.0, 0.15}, 64, 1);
    auto sched = NoiseSchedule::make(ScheduleKind::VpLinear, 100);
    PretrainConfig pc;
    pc.steps = 0;
    auto curve = pretrain(model, data, sched, pc);
    CHECK(model.param_hash() == before);
    CHECK(curve.empty());
}

TEST_CASE("pretrain rejects an empty dataset") {
    DenoiserModel model(tiny_config(), 12);
    Dataset empty;
    auto sched = NoiseSchedule::make(ScheduleKind::VpLinear, 100);
    CHECK_THROWS_AS(pretrain(model, empty, sched, PretrainConfig{}), ValidationError);
}

TEST_CASE("pretrain aborts with a diagnostic when the loss diverges") {
    DenoiserModel model(tiny_config(), 13);
    Dataset data = gen_gmm(GmmSpec{2, 2.0, 0.1}, 64, 2);
    auto sched = NoiseSchedule::make(ScheduleKind::VpLinear, 100);
    PretrainConfig pc;
    pc.steps = 60;
    pc.batch = 4;
    pc.lr = 1e8f;
    CHECK_THROWS_AS(pretrain(model, data, sched, pc), NumericError);
}

TEST_CASE("pretrain is bit-deterministic for a fixed seed and thread count") {
    Dataset data = gen_gmm(GmmSpec{4, 2.0, 0.15}, 256, 3);
    auto sched = NoiseSchedule::make(ScheduleKind::VpLinear, 200);
    auto run = [&] {
        DenoiserModel model(tiny_config(), 14);
        PretrainConfig pc;
        pc.steps = 25;
        pc.batch = 8;
        pc.seed = 21;
        pc.threads = 2;
        pretrain(model, data, sched, pc);
        return model.param_hash();
    };
    CHECK(run() == run());
}

TEST_CASE("single-mode dataset: loss collapses and samples land on the mode") {
    GmmSpec spec{1, 0.0, 0.01};
    spec.modes = 1;
    spec.radius = 1.5;  // single mean at (1.5, 0)
    Dataset data = gen_gmm(spec, 512, 31);
    ModelConfig cfg = tiny_config();
    cfg.num_classes = 1;
    DenoiserModel model(cfg, 32);
    auto sched = NoiseSchedule::make(ScheduleKind::VpLinear, 1000);
    model.schedule_t_train = 1000;

    // Untrained baseline: the zero-initialized head predicts eps = 0, so the
    // loss starts near E||eps||^2 = 1.
    PretrainConfig pc;
    pc.steps = 1500;
    pc.batch = 16;
    pc.lr = 2e-3f;
    pc.seed = 33;
    pc.threads = 4;
    auto curve = pretrain(model, data, sched, pc);
    REQUIRE(!curve.empty());
    double first = curve.front().loss;
    double last = curve.back().loss;
    CHECK(first > 0.5);
    CHECK(last * 10.0 < first);

    TimeGrid grid = TimeGrid::make(sched, 20, GridSpacing::UniformT, Solver::Ddim);
    SampleConfig sc;
    sc.n_samples = 64;
    sc.seed = 34;
    sc.threads = 4;
    RunResult result = sample_full(model, sched, grid, sc);
    auto mu = spec.mean(0);
    double mean_dist = 0.0;
    for (const auto& run : result.runs) {
        double dx = run.point[0] - mu[0], dy = run.point[1] - mu[1];
        mean_dist += std::sqrt(dx * dx + dy * dy);
    }
    mean_dist /= static_cast<double>(result.runs.size());
    CHECK(mean_dist < 0.1);
}

TEST_CASE("router loss: trivial values and the scalar oracle") {
    Tensor eps = Tensor({2, 2}, {0.3f, -0.7f, 1.1f, 0.2f});
    SUBCASE("identical predictions with lambda 0 give zero loss") {
        Tensor betas = full({4}, 0.5f);
        Tensor loss = router_loss(eps, eps, betas, 0.0);
        CHECK(loss.data[0] == 0.0f);
    }
    SUBCASE("penalty term alone: 8 betas at one half with lambda 1 gives 4") {
        Tensor betas = full({8}, 0.5f);
        Tensor loss = router_loss(eps, eps, betas, 1.0);
        CHECK(loss.data[0] == doctest::Approx(4.0));
    }
    SUBCASE("random tensors match a scalar recomputation") {
        Rng rng(41);
        Tensor a = randn({3, 4}, rng), b = randn({3, 4}, rng), betas = randn({6}, rng, 0.2f);
        double lambda = 0.37;
        Tensor loss = router_loss(a, b, betas, lambda);
        double want = 0.0;
        for (size_t i = 0; i < a.data.size(); ++i) {
            double d = static_cast<double>(a.data[i]) - b.data[i];
            want += d * d;
        }
        double pen = 0.0;
        for (float v : betas.data) pen += v;
        want += lambda * pen;
        CHECK(std::abs(static_cast<double>(loss.data[0]) - want) < 1e-6 * std::max(1.0, want));
    }
    SUBCASE("shape mismatch rejected") {
        CHECK_THROWS_AS(router_loss(eps, zeros({3, 2}), full({4}, 0.5f), 0.0), ShapeError);
    }
}

TEST_CASE("one training step updates exactly the sampled logit row") {
    Fixture& f = fixture();
    TimeGrid grid = TimeGrid::make(f.sched, 8, GridSpacing::UniformT, Solver::Ddim);
    Router init = Router::init(4, f.cfg.sublayers(), 51);
    Tensor logits_before = init.logits;
    RouterTrainConfig rc;
    rc.steps = 1;
    rc.batch = 4;
    rc.seed = 52;
    rc.threads = 2;
    RouterTrainResult result = train_router(f.model, std::move(init), f.sched, grid, f.data, rc);
    int changed_rows = 0;
    for (int i = 0; i < 4; ++i) {
        bool changed = false;
        for (int j = 0; j < f.cfg.sublayers(); ++j)
            if (result.router.logits.at(i, j) != logits_before.at(i, j)) changed = true;
        changed_rows += changed ? 1 : 0;
    }
    CHECK(changed_rows == 1);
}

TEST_CASE("model parameters are frozen through router training") {
    Fixture& f = fixture();
    uint64_t before = f.model.param_hash();
    TimeGrid grid = TimeGrid::make(f.sched, 8, GridSpacing::UniformT, Solver::Ddim);
    RouterTrainConfig rc;
    rc.steps = 40;
    rc.batch = 4;
    rc.seed = 53;
    rc.threads = 4;
    train_router(f.model, Router::init(4, f.cfg.sublayers(), 54), f.sched, grid, f.data, rc);
    train_drop(f.model, Router::init(4, f.cfg.sublayers(), 55), f.sched, grid, f.data, rc);
    CHECK(f.model.param_hash() == before);
}

TEST_CASE("large lambda drives every trained sigmoid toward zero") {
    Fixture& f = fixture();
    TimeGrid grid = TimeGrid::make(f.sched, 4, GridSpacing::UniformT, Solver::Ddim);
    RouterTrainConfig rc;
    rc.lambda = 1e3;
    rc.steps = 300;
    rc.batch = 2;
    rc.seed = 61;
    rc.threads = 2;
    RouterTrainResult result =
        train_router(f.model, Router::init(2, f.cfg.sublayers(), 62), f.sched, grid, f.data, rc);
    double mean_sig = result.log.back().mean_sigmoid_beta;
    CHECK(mean_sig < 0.15);
}

TEST_CASE("lambda 0 training shrinks the cached reconstruction error at least 5x") {
    Fixture& f = fixture();
    TimeGrid grid = TimeGrid::make(f.sched, 4, GridSpacing::UniformT, Solver::Ddim);
    Router init = Router::init(2, f.cfg.sublayers(), 71);
    double before = 0.0;
    for (int row = 0; row < 2; ++row)
        before += cached_recon_mse(f.model, f.sched, grid, init.logits, row, f.data);

    RouterTrainConfig rc;
    rc.lambda = 0.0;
    rc.steps = 500;
    rc.batch = 8;
    rc.seed = 72;
    rc.threads = 4;
    RouterTrainResult result = train_router(f.model, std::move(init), f.sched, grid, f.data, rc);
    double after = 0.0;
    for (int row = 0; row < 2; ++row)
        after += cached_recon_mse(f.model, f.sched, grid, result.router.logits, row, f.data);
    CHECK(after * 5.0 < before);
}

TEST_CASE("router loss gradient matches finite differences through the full pipeline") {
    Fixture& f = fixture();
    const ModelConfig& mc = f.cfg;
    TimeGrid grid = TimeGrid::make(f.sched, 8, GridSpacing::UniformT, Solver::Ddim);
    Router router = Router::init(4, mc.sublayers(), 81);
    int row = 2;
    int s = grid.times[static_cast<size_t>(2 * row)];
    int m = grid.times[static_cast<size_t>(2 * row) + 1];
    double lambda = 0.05;

    // Fixed mini-batch.
    const int batch = 3;
    std::vector<Tensor> xs(batch), targets(batch);
    std::vector<CacheStore> stores;
    std::vector<int> labels(batch);
    for (int b = 0; b < batch; ++b) {
        Rng rng(900 + static_cast<uint64_t>(b));
        size_t idx = rng.uniform_int(f.data.size());
        labels[static_cast<size_t>(b)] = f.data.labels[idx];
        Tensor x0 = point_tokens(f.data.points[idx], mc.tokens);
        Tensor noise = randn({mc.tokens, mc.in_dim}, rng);
        Tensor x_s = forward_sample(f.sched, x0, s, noise);
        ForwardResult at_s =
            f.model.forward(x_s, s, labels[static_cast<size_t>(b)], ForwardCtx{nullptr, nullptr, true});
        CacheStore store(mc.sublayers());
        f.model.fill_cache(*at_s.trace, store);
        stores.push_back(std::move(store));
        xs[static_cast<size_t>(b)] = ddim_step(f.sched, x_s, at_s.eps, s, m);
        targets[static_cast<size_t>(b)] =
            f.model.forward(xs[static_cast<size_t>(b)], m, labels[static_cast<size_t>(b)]).eps;
    }

    // Loss as a plain function of the logits (no tape): used for FD.
    auto pipeline_loss = [&](const Tensor& logits) {
        Tensor betas = sigmoid(slice(logits, 0, row, 1));
        double acc = 0.0;
        for (int b = 0; b < batch; ++b) {
            Tensor tilde = f.model
                               .forward_interp(xs[static_cast<size_t>(b)], m,
                                               labels[static_cast<size_t>(b)],
                                               stores[static_cast<size_t>(b)], betas,
                                               InterpSettings{})
                               .eps;
            Tensor r = sse(tilde, targets[static_cast<size_t>(b)]);
            acc += r.data[0];
        }
        acc /= batch;
        for (float v : betas.data) acc += lambda * v;
        return acc;
    };

    // Analytic gradient through the tape.
    Tape tape;
    Tensor leaf = tape.leaf(router.logits);
    Tensor betas = sigmoid(slice(leaf, 0, row, 1));
    Tensor loss_node;
    for (int b = 0; b < batch; ++b) {
        Tensor tilde = f.model
                           .forward_interp(xs[static_cast<size_t>(b)], m,
                                           labels[static_cast<size_t>(b)],
                                           stores[static_cast<size_t>(b)], betas, InterpSettings{},
                                           ForwardCtx{&tape, nullptr, false})
                           .eps;
        Tensor r = sse(tilde, targets[static_cast<size_t>(b)]);
        loss_node = b == 0 ? r : add(loss_node, r);
    }
    loss_node = add(scale(loss_node, 1.0f / batch),
                    scale(sum(betas), static_cast<float>(lambda)));
    auto grads = backward(tape, loss_node);
    const Tensor& g = grads.at(leaf.node);

    // Central differences over every logit in the sampled row; other rows
    // must have exactly zero gradient.
    const double h = 1e-2;
    for (int j = 0; j < mc.sublayers(); ++j) {
        Tensor up = router.logits, dn = router.logits;
        up.at(row, j) += static_cast<float>(h);
        dn.at(row, j) -= static_cast<float>(h);
        double fd = (pipeline_loss(up) - pipeline_loss(dn)) / (2.0 * h);
        double analytic = g.at(row, j);
        CHECK(std::abs(analytic - fd) <= 1e-2 * (std::abs(fd) + 1e-3));
    }
    for (int i = 0; i < 4; ++i) {
        if (i == row) continue;
        for (int j = 0; j < mc.sublayers(); ++j) CHECK(g.at(i, j) == 0.0f);
    }
}

TEST_CASE("training log rows expose the loss decomposition") {
    Fixture& f = fixture();
    TimeGrid grid = TimeGrid::make(f.sched, 4, GridSpacing::UniformT, Solver::Ddim);
    RouterTrainConfig rc;
    rc.lambda = 0.5;
    rc.steps = 5;
    rc.batch = 2;
    rc.log_every = 1;
    rc.seed = 91;
    RouterTrainResult result =
        train_router(f.model, Router::init(2, f.cfg.sublayers(), 92), f.sched, grid, f.data, rc);
    REQUIRE(result.log.size() == 5);
    for (const auto& row : result.log) {
        CHECK(row.loss == doctest::Approx(row.recon_term + row.penalty_term));
        CHECK(row.penalty_term >= 0.0);
        CHECK(row.mean_sigmoid_beta > 0.0);
        CHECK(row.mean_sigmoid_beta < 1.0);
    }
}

TEST_CASE("router training validates its configuration") {
    Fixture& f = fixture();
    TimeGrid grid = TimeGrid::make(f.sched, 4, GridSpacing::UniformT, Solver::Ddim);
    RouterTrainConfig rc;
    rc.lambda = -1.0;
    CHECK_THROWS_AS(
        train_router(f.model, Router::init(2, f.cfg.sublayers(), 1), f.sched, grid, f.data, rc),
        ValidationError);
    rc = RouterTrainConfig{};
    CHECK_THROWS_AS(
        train_router(f.model, Router::init(3, f.cfg.sublayers(), 1), f.sched, grid, f.data, rc),
        ValidationError);  // wrong router shape
    TimeGrid odd = TimeGrid::from_times({900, 600, 300}, 0);
    CHECK_THROWS_AS(
        train_router(f.model, Router::init(1, f.cfg.sublayers(), 1), f.sched, odd, f.data, rc),
        ValidationError);  // odd evaluation count
}
