#include "lc/router_train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace lc {

Tensor router_loss(const Tensor& eps_tilde, const Tensor& eps_target, const Tensor& betas,
                   double lambda) {
    if (!same_shape(eps_tilde, eps_target))
        throw ShapeError("router_loss: eps shapes differ: " + shape_str(eps_tilde.shape) +
                         " vs " + shape_str(eps_target.shape));
    Tensor recon = sse(eps_tilde, eps_target);
    return add(recon, scale(sum(betas), static_cast<float>(lambda)));
}

namespace {

RouterTrainResult train_impl(const DenoiserModel& model, Router router,
                             const NoiseSchedule& sched, const TimeGrid& grid,
                             const Dataset& data, const RouterTrainConfig& cfg, bool drop) {
    cfg.validate();
    if (data.size() == 0) throw ValidationError("train-router: empty dataset");
    if (grid.segments() % 2 != 0)
        throw ValidationError("train-router: grid must have an even evaluation count");
    const ModelConfig& mc = model.config();
    int rows = grid.segments() / 2;
    if (router.cache_steps() != rows || router.sublayers() != mc.sublayers())
        throw ValidationError("train-router: router shape does not match grid/model");

    InterpSettings settings = cfg.interp;
    settings.drop = drop;

    AdamW opt(AdamWConfig{cfg.lr, cfg.weight_decay, 0.9f, 0.999f, 1e-8f});
    int workers = std::max(1, std::min(cfg.threads, cfg.batch));
    int chunk = (cfg.batch + workers - 1) / workers;
    CacheStore empty_store(mc.sublayers());

    RouterTrainResult result;
    result.router = std::move(router);
    Tensor& logits = result.router.logits;

    for (int step = 0; step < cfg.steps; ++step) {
        Rng step_rng = Rng(cfg.seed ^ 0x517cc1b727220a95ull).fork(static_cast<uint64_t>(step));
        int row = static_cast<int>(step_rng.uniform_int(static_cast<uint64_t>(rows)));
        int s = grid.times[static_cast<size_t>(2 * row)];
        int m = grid.times[static_cast<size_t>(2 * row) + 1];

        std::vector<std::vector<float>> worker_grads(static_cast<size_t>(workers));
        std::vector<double> worker_recon(static_cast<size_t>(workers), 0.0);

        parallel_for(workers, workers, [&](int64_t w) {
            int lo = static_cast<int>(w) * chunk;
            int hi = std::min(cfg.batch, lo + chunk);
            if (lo >= hi) return;
            Tape tape;
            Tensor logits_leaf = tape.leaf(logits);
            Tensor betas = sigmoid(slice(logits_leaf, 0, row, 1));  // (1, sublayers)

            Tensor chunk_recon;
            double recon_acc = 0.0;
            for (int b = lo; b < hi; ++b) {
                Rng rng(fnv1a(&step, sizeof(step), 0xa0761d6478bd642full ^ cfg.seed) +
                        static_cast<uint64_t>(b));
                size_t idx = rng.uniform_int(data.size());
                int y = data.labels[idx];
                if (rng.uniform() < cfg.label_drop) y = mc.null_class();
                Tensor x0 = point_tokens(data.points[idx], mc.tokens);
                Tensor noise = randn({mc.tokens, mc.in_dim}, rng);
                Tensor x_s = forward_sample(sched, x0, s, noise);

                ForwardResult full_s = model.forward(x_s, s, y, ForwardCtx{nullptr, nullptr, true});
                CacheStore store(mc.sublayers());
                if (!drop) model.fill_cache(*full_s.trace, store);

                Tensor x_m = ddim_step(sched, x_s, full_s.eps, s, m);
                Tensor eps_target = model.forward(x_m, m, y).eps;

                ForwardResult tilde = model.forward_interp(x_m, m, y, drop ? empty_store : store,
                                                           betas, settings,
                                                           ForwardCtx{&tape, nullptr, false});
                Tensor recon = sse(tilde.eps, eps_target);
                recon_acc += recon.data[0];
                chunk_recon = b == lo ? recon : add(chunk_recon, recon);
            }
            worker_recon[static_cast<size_t>(w)] = recon_acc;

            Tensor loss = scale(chunk_recon, 1.0f / static_cast<float>(cfg.batch));
            if (w == 0 && cfg.lambda > 0.0)
                loss = add(loss, scale(sum(betas), static_cast<float>(cfg.lambda)));
            auto grads = backward(tape, loss);
            const Tensor& g = grads.at(logits_leaf.node);
            auto& out = worker_grads[static_cast<size_t>(w)];
            out.assign(static_cast<size_t>(mc.sublayers()), 0.0f);
            for (int j = 0; j < mc.sublayers(); ++j)
                out[static_cast<size_t>(j)] = g.at(row, j);
        });

        Tensor row_grad = zeros({mc.sublayers()});
        for (const auto& wg : worker_grads)
            for (size_t j = 0; j < wg.size(); ++j) row_grad.data[j] += wg[j];

        double recon = 0.0;
        for (double r : worker_recon) recon += r;
        recon /= cfg.batch;
        double penalty = 0.0, mean_sig = 0.0;
        for (int i = 0; i < result.router.cache_steps(); ++i)
            for (int j = 0; j < mc.sublayers(); ++j) {
                double sg = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.at(i, j))));
                mean_sig += sg;
                if (i == row) penalty += sg;
            }
        mean_sig /= logits.numel();
        penalty *= cfg.lambda;
        double loss_val = recon + penalty;
        if (!std::isfinite(loss_val))
            throw NumericError("train-router: loss diverged at step " + std::to_string(step));

        opt.step_row(logits, row_grad, row);

        if (step % cfg.log_every == 0 || step + 1 == cfg.steps)
            result.log.push_back({step, loss_val, recon, penalty, mean_sig});
    }
    return result;
}

}  // namespace

RouterTrainResult train_router(const DenoiserModel& model, Router router,
                               const NoiseSchedule& sched, const TimeGrid& grid,
                               const Dataset& data, const RouterTrainConfig& cfg) {
    return train_impl(model, std::move(router), sched, grid, data, cfg, false);
}

RouterTrainResult train_drop(const DenoiserModel& model, Router router,
                             const NoiseSchedule& sched, const TimeGrid& grid,
                             const Dataset& data, const RouterTrainConfig& cfg) {
    return train_impl(model, std::move(router), sched, grid, data, cfg, true);
}

void save_train_log_csv(const std::vector<RouterTrainLogRow>& log, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("train-router: cannot write " + path);
    out << "step,loss,recon_term,penalty_term,mean_sigmoid_beta\n";
    char buf[160];
    for (const auto& row : log) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g\n", row.step, row.loss,
                      row.recon_term, row.penalty_term, row.mean_sigmoid_beta);
        out << buf;
    }
}

}  // namespace lc
