#include "lc/pretrain.hpp"

#include <cmath>

namespace lc {

std::vector<LossPoint> pretrain(DenoiserModel& model, const Dataset& data,
                                const NoiseSchedule& sched, const PretrainConfig& cfg) {
    if (data.size() == 0) throw ValidationError("pretrain: empty dataset");
    if (cfg.batch < 1 || cfg.steps < 0) throw ValidationError("pretrain: bad steps/batch");

    const ModelConfig& mc = model.config();
    AdamW opt(AdamWConfig{cfg.lr, cfg.weight_decay, 0.9f, 0.999f, 1e-8f});
    std::vector<Tensor*> param_ptrs;
    for (size_t i = 0; i < model.param_count(); ++i) param_ptrs.push_back(&model.param(i));

    int workers = std::max(1, std::min(cfg.threads, cfg.batch));
    int chunk = (cfg.batch + workers - 1) / workers;

    std::vector<LossPoint> curve;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<Tensor>> worker_grads(static_cast<size_t>(workers));
        std::vector<double> worker_loss(static_cast<size_t>(workers), 0.0);

        parallel_for(workers, workers, [&](int64_t w) {
            int lo = static_cast<int>(w) * chunk;
            int hi = std::min(cfg.batch, lo + chunk);
            if (lo >= hi) return;
            Tape tape;
            std::vector<Tensor> lp = model.leaf_params(tape);
            Tensor chunk_loss;
            double loss_acc = 0.0;
            for (int b = lo; b < hi; ++b) {
                Rng rng(fnv1a(&step, sizeof(step), 0x9e3779b97f4a7c15ull ^ cfg.seed) + static_cast<uint64_t>(b));
                size_t idx = rng.uniform_int(data.size());
                int y = data.labels[idx];
                if (rng.uniform() < cfg.label_drop) y = mc.null_class();
                int t = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.t_train())));
                Tensor x0 = point_tokens(data.points[idx], mc.tokens);
                Tensor noise = randn({mc.tokens, mc.in_dim}, rng);
                Tensor x_t = forward_sample(sched, x0, t, noise);
                ForwardResult fr = model.forward_with(lp, x_t, t, y, ForwardCtx{&tape, nullptr, false});
                Tensor l = mse(fr.eps, noise);
                loss_acc += l.data[0];
                chunk_loss = b == lo ? l : add(chunk_loss, l);
            }
            worker_loss[static_cast<size_t>(w)] = loss_acc;
            Tensor scaled = scale(chunk_loss, 1.0f / static_cast<float>(cfg.batch));
            auto grads = backward(tape, scaled);
            auto& out = worker_grads[static_cast<size_t>(w)];
            out.reserve(lp.size());
            for (const Tensor& leaf : lp) out.push_back(std::move(grads.at(leaf.node)));
        });

        double loss = 0.0;
        for (double l : worker_loss) loss += l;
        loss /= cfg.batch;
        if (!std::isfinite(loss))
            throw NumericError("pretrain: loss diverged at step " + std::to_string(step));

        std::vector<Tensor> total = std::move(worker_grads[0]);
        for (int w = 1; w < workers; ++w) {
            if (worker_grads[static_cast<size_t>(w)].empty()) continue;
            for (size_t i = 0; i < total.size(); ++i) {
                auto& dst = total[i].data;
                const auto& src = worker_grads[static_cast<size_t>(w)][i].data;
                for (size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
            }
        }
        opt.step(param_ptrs, total);

        if (step % cfg.log_every == 0 || step + 1 == cfg.steps)
            curve.push_back({step, loss});
    }
    return curve;
}

}  // namespace lc
