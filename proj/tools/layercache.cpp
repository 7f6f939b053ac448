// Command-line entry point: dataset generation, pretraining, router training,
// sampling, benchmarking, sweeps, and router export. Every command writes its
// resolved key=value config and a JSON manifest beside its outputs.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "lc/common.hpp"
#include "lc/config.hpp"
#include "lc/dataset.hpp"
#include "lc/metrics.hpp"
#include "lc/model.hpp"
#include "lc/pretrain.hpp"
#include "lc/router_train.hpp"
#include "lc/sample.hpp"

namespace {

using namespace lc;

constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;

void write_run_files(const std::string& out, const std::string& command,
                     const ExperimentConfig& cfg, const std::vector<std::string>& inputs,
                     const std::vector<std::string>& outputs,
                     const nlohmann::json& extra = nlohmann::json::object()) {
    save_text_file(out + ".config", cfg.to_kv());
    write_manifest(out + ".manifest.json", command, cfg, inputs, outputs);
    if (!extra.empty()) {
        nlohmann::json m = nlohmann::json::parse(load_text_file(out + ".manifest.json"));
        for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
        save_text_file(out + ".manifest.json", m.dump(2) + "\n");
    }
}

NoiseSchedule schedule_of(const DenoiserModel& model) {
    return NoiseSchedule::make(model.schedule_kind, model.schedule_t_train);
}

int grid_segments(const ExperimentConfig& cfg) {
    if (cfg.solver_kind() == Solver::Dpm2) {
        if (cfg.nfe % 2 != 0) throw ValidationError("dpm2 needs an even NFE");
        return cfg.nfe / 2;
    }
    return cfg.nfe;
}

SampleConfig sample_config(const ExperimentConfig& cfg) {
    SampleConfig sc;
    sc.solver = cfg.solver_kind();
    sc.guidance = static_cast<float>(cfg.guidance);
    sc.seed = cfg.seed;
    sc.n_samples = cfg.n_samples;
    sc.threads = cfg.resolved_threads();
    sc.shifted_cache = cfg.shifted_cache;
    sc.interp.alpha = static_cast<float>(cfg.alpha);
    sc.interp.mode = cfg.cache_mode_kind();
    return sc;
}

std::vector<std::array<float, 2>> holdout_points(const Dataset& data) {
    std::vector<std::array<float, 2>> pts;
    size_t half = data.size() / 2;
    for (size_t i = half; i < data.size(); ++i) pts.push_back(data.points[i]);
    return pts;
}

int run(int argc, char** argv) {
    CLI::App app{"layercache: a desk-scale lab for learned layer caching in toy diffusion "
                 "transformers"};
    app.require_subcommand(1);
    app.set_config("--config", "", "key=value config file applied before flags");
    app.allow_config_extras(false);

    ExperimentConfig cfg;
    // Shared options: names line up with the config-file keys.
    app.add_option("--seed", cfg.seed)->configurable(true);
    app.add_option("--threads", cfg.threads);
    app.add_option("--depth", cfg.depth);
    app.add_option("--width", cfg.width);
    app.add_option("--heads", cfg.heads);
    app.add_option("--tokens", cfg.tokens);
    app.add_option("--classes", cfg.classes);
    app.add_option("--time_embed_dim", cfg.time_embed_dim);
    app.add_option("--ffn_dim", cfg.ffn_dim);
    app.add_flag("--long_skip", cfg.long_skip);
    app.add_option("--schedule", cfg.schedule);
    app.add_option("--t_train", cfg.t_train);
    app.add_option("--nfe", cfg.nfe);
    app.add_option("--spacing", cfg.spacing);
    app.add_option("--solver", cfg.solver);
    app.add_option("--lambda", cfg.lambda);
    app.add_option("--theta", cfg.theta);
    app.add_option("--alpha", cfg.alpha);
    app.add_option("--cache_mode", cfg.cache_mode);
    app.add_option("--threshold_direction", cfg.threshold_direction);
    app.add_option("--shifted_cache", cfg.shifted_cache);
    app.add_option("--steps", cfg.steps);
    app.add_option("--batch", cfg.batch);
    app.add_option("--lr", cfg.lr);
    app.add_option("--weight_decay", cfg.weight_decay);
    app.add_option("--label_drop", cfg.label_drop);
    app.add_option("--guidance", cfg.guidance);
    app.add_option("--n_samples", cfg.n_samples);
    app.add_option("--modes", cfg.modes);
    app.add_option("--n_points", cfg.n_points);
    app.add_option("--mode_radius", cfg.mode_radius);
    app.add_option("--mode_sigma", cfg.mode_sigma);

    std::string data_path, model_path, router_path, out_path, log_path;
    std::string mask_kind;
    int64_t budget = -1;
    int fixed_class = -1;
    std::vector<std::string> router_paths;
    std::vector<double> thetas, lambdas;

    auto* gen = app.add_subcommand("gen-data", "generate a labeled 2-D Gaussian mixture CSV");
    gen->add_option("--out", out_path)->required();

    auto* pre = app.add_subcommand("pretrain", "train the toy denoiser on a dataset");
    pre->add_option("--data", data_path)->required();
    pre->add_option("--out", out_path)->required();

    auto* tr = app.add_subcommand("train-router", "optimize the caching router");
    auto* td = app.add_subcommand("train-drop", "optimize the layer-dropout router");
    for (auto* cmd : {tr, td}) {
        cmd->add_option("--model", model_path)->required();
        cmd->add_option("--data", data_path)->required();
        cmd->add_option("--out", out_path)->required();
        cmd->add_option("--log", log_path);
    }

    auto* sm = app.add_subcommand("sample", "sample from a checkpoint");
    sm->add_option("--model", model_path)->required();
    sm->add_option("--out", out_path)->required();
    sm->add_option("--router", router_path);
    sm->add_option("--mask-kind", mask_kind, "top-down|bottom-up|random|metric|all-cached");
    sm->add_option("--budget", budget);
    sm->add_option("--class", fixed_class);
    sm->add_option("--data", data_path, "dataset for the metric mask calibration");

    auto* be = app.add_subcommand("bench", "full-vs-cached benchmark with heuristic baselines");
    be->add_option("--model", model_path)->required();
    be->add_option("--data", data_path)->required();
    be->add_option("--router", router_path)->required();
    be->add_option("--out", out_path)->required();

    auto* sw = app.add_subcommand("sweep", "tradeoff curves over theta or over routers");
    sw->add_option("--model", model_path)->required();
    sw->add_option("--data", data_path)->required();
    sw->add_option("--out", out_path)->required();
    sw->add_option("--router", router_path);
    sw->add_option("--thetas", thetas)->delimiter(',');
    sw->add_option("--routers", router_paths)->delimiter(',');
    sw->add_option("--lambdas", lambdas)->delimiter(',');

    auto* ex = app.add_subcommand("export-router", "router heatmap CSVs + JSON sidecar");
    ex->add_option("--router", router_path)->required();
    ex->add_option("--out", out_path)->required();

    for (CLI::App* sub : app.get_subcommands(nullptr)) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        GmmSpec spec{cfg.modes, cfg.mode_radius, cfg.mode_sigma};
        Dataset data = gen_gmm(spec, cfg.n_points, cfg.seed);
        save_dataset_csv(data, out_path);
        write_run_files(out_path, "gen-data", cfg, {}, {out_path});
        std::printf("gen-data: wrote %zu points (%d modes) to %s\n", data.size(), spec.modes,
                    out_path.c_str());
        return 0;
    }

    if (pre->parsed()) {
        Dataset data = load_dataset_csv(data_path);
        DenoiserModel model(cfg.model_config(), cfg.seed);
        model.schedule_kind = cfg.schedule_kind();
        model.schedule_t_train = cfg.t_train;
        NoiseSchedule sched = NoiseSchedule::make(model.schedule_kind, cfg.t_train);
        PretrainConfig pc;
        pc.steps = cfg.steps;
        pc.batch = cfg.batch;
        pc.lr = static_cast<float>(cfg.lr);
        pc.weight_decay = static_cast<float>(cfg.weight_decay);
        pc.label_drop = static_cast<float>(cfg.label_drop);
        pc.seed = cfg.seed;
        pc.threads = cfg.resolved_threads();
        auto curve = pretrain(model, data, sched, pc);
        model.save_checkpoint(out_path);
        std::string loss_csv = out_path + ".loss.csv";
        {
            std::string text = "step,loss\n";
            char buf[64];
            for (const auto& p : curve) {
                std::snprintf(buf, sizeof(buf), "%d,%.9g\n", p.step, p.loss);
                text += buf;
            }
            save_text_file(loss_csv, text);
        }
        write_run_files(out_path, "pretrain", cfg, {data_path}, {out_path, loss_csv});
        std::printf("pretrain: %d steps, final loss %.6f -> %s\n", cfg.steps,
                    curve.empty() ? 0.0 : curve.back().loss, out_path.c_str());
        return 0;
    }

    if (tr->parsed() || td->parsed()) {
        DenoiserModel model = DenoiserModel::load_checkpoint(model_path);
        Dataset data = load_dataset_csv(data_path);
        NoiseSchedule sched = schedule_of(model);
        TimeGrid grid = TimeGrid::make(sched, cfg.nfe, cfg.grid_spacing(), Solver::Ddim);
        if (grid.segments() % 2 != 0) throw ValidationError("train-router: NFE must be even");
        Router router = Router::init(grid.segments() / 2, model.config().sublayers(), cfg.seed);
        router.alpha = static_cast<float>(cfg.alpha);
        router.threshold = static_cast<float>(cfg.theta);
        router.direction = cfg.direction_kind();

        RouterTrainConfig rc;
        rc.lambda = cfg.lambda;
        rc.lr = static_cast<float>(cfg.lr);
        rc.weight_decay = static_cast<float>(cfg.weight_decay);
        rc.steps = cfg.steps;
        rc.batch = cfg.batch;
        rc.label_drop = static_cast<float>(cfg.label_drop);
        rc.interp.alpha = static_cast<float>(cfg.alpha);
        rc.interp.mode = cfg.cache_mode_kind();
        rc.seed = cfg.seed;
        rc.threads = cfg.resolved_threads();

        uint64_t hash_before = model.param_hash();
        RouterTrainResult result = tr->parsed()
                                       ? train_router(model, std::move(router), sched, grid, data, rc)
                                       : train_drop(model, std::move(router), sched, grid, data, rc);
        if (model.param_hash() != hash_before)
            throw NumericError("train-router: model parameters changed");
        save_router(result.router, out_path);
        std::vector<std::string> outputs{out_path};
        if (!log_path.empty()) {
            save_train_log_csv(result.log, log_path);
            outputs.push_back(log_path);
        }
        Mask mask = discretize(result.router);
        CacheRatios ratios = cache_ratio(mask);
        write_run_files(out_path, tr->parsed() ? "train-router" : "train-drop", cfg,
                        {model_path, data_path}, outputs,
                        {{"cache_ratio", ratios.overall}, {"model_hash_unchanged", true}});
        std::printf("%s: %d steps, final loss %.6f, cache ratio %.3f -> %s\n",
                    tr->parsed() ? "train-router" : "train-drop", cfg.steps,
                    result.log.empty() ? 0.0 : result.log.back().loss, ratios.overall,
                    out_path.c_str());
        return 0;
    }

    if (sm->parsed()) {
        DenoiserModel model = DenoiserModel::load_checkpoint(model_path);
        NoiseSchedule sched = schedule_of(model);
        TimeGrid grid = TimeGrid::make(sched, grid_segments(cfg), cfg.grid_spacing(),
                                       cfg.solver_kind());
        SampleConfig sc = sample_config(cfg);
        if (fixed_class >= 0) sc.fixed_class = fixed_class;

        std::string mask_source = "none";
        RunResult result;
        std::vector<std::string> inputs{model_path};
        auto roles = cache_designations(grid.nfe(sc.solver), sc.solver, sc.shifted_cache);
        int cache_rows = 0;
        for (auto r : roles) cache_rows += r == EvalRole::Cache ? 1 : 0;
        double ratio = 0.0;

        if (!router_path.empty()) {
            Router router = load_router(router_path);
            inputs.push_back(router_path);
            Mask mask = discretize(router);
            sc.interp.alpha = router.alpha;
            result = sample_cached(model, sched, grid, mask, sc);
            mask_source = "router:" + router_path;
            ratio = cache_ratio(mask).overall;
        } else if (!mask_kind.empty()) {
            Mask mask;
            if (mask_kind == "all-cached") {
                mask = Mask::all_cached(cache_rows, model.config().sublayers());
            } else {
                HeuristicKind kind;
                if (mask_kind == "top-down") kind = HeuristicKind::TopDown;
                else if (mask_kind == "bottom-up") kind = HeuristicKind::BottomUp;
                else if (mask_kind == "random") kind = HeuristicKind::Random;
                else if (mask_kind == "metric") kind = HeuristicKind::Metric;
                else throw ValidationError("sample: unknown mask kind '" + mask_kind + "'");
                if (budget < 0) throw ValidationError("sample: --mask-kind needs --budget");
                Dataset data;
                Calibration calib;
                if (kind == HeuristicKind::Metric) {
                    if (data_path.empty())
                        throw ValidationError("sample: metric mask needs --data");
                    data = load_dataset_csv(data_path);
                    inputs.push_back(data_path);
                    calib = {&model, &sched, &grid, &data, 16, cfg.seed};
                }
                mask = heuristic_mask(kind, budget, cache_rows, model.config().sublayers(),
                                      cfg.seed, kind == HeuristicKind::Metric ? &calib : nullptr);
            }
            result = sample_cached(model, sched, grid, mask, sc);
            mask_source = "heuristic:" + mask_kind;
            ratio = cache_ratio(mask).overall;
        } else {
            result = sample_full(model, sched, grid, sc);
        }

        save_samples_csv(result, cfg.seed, out_path);
        nlohmann::json extra{{"solver", cfg.solver},
                             {"steps", grid.segments()},
                             {"nfe", result.nfe_per_run},
                             {"mask_source", mask_source},
                             {"cache_ratio", ratio},
                             {"kernel_invocations_mhsa", result.totals.mhsa},
                             {"kernel_invocations_ffn", result.totals.ffn}};
        write_run_files(out_path, "sample", cfg, inputs, {out_path}, extra);
        std::printf("sample: %d runs x %d NFE, mask=%s, kernels mhsa=%llu ffn=%llu -> %s\n",
                    cfg.n_samples, result.nfe_per_run, mask_source.c_str(),
                    static_cast<unsigned long long>(result.totals.mhsa),
                    static_cast<unsigned long long>(result.totals.ffn), out_path.c_str());
        return 0;
    }

    if (be->parsed()) {
        DenoiserModel model = DenoiserModel::load_checkpoint(model_path);
        NoiseSchedule sched = schedule_of(model);
        TimeGrid grid = TimeGrid::make(sched, grid_segments(cfg), cfg.grid_spacing(),
                                       cfg.solver_kind());
        Dataset data = load_dataset_csv(data_path);
        Router router = load_router(router_path);
        SampleConfig sc = sample_config(cfg);
        auto holdout = holdout_points(data);

        Mask learned = discretize(router);
        int64_t k = learned.cached_count();
        int rows = learned.cache_steps, subs = learned.sublayers;
        Calibration calib{&model, &sched, &grid, &data, 16, cfg.seed};

        std::vector<CurveRecord> records;
        auto push = [&](const std::string& id, const Mask& mask) {
            CurveRecord rec = evaluate_mask(model, sched, grid, mask, sc, holdout);
            rec.config_id = id;
            rec.theta = cfg.theta;
            records.push_back(std::move(rec));
        };
        push("learned", learned);
        push("top-down", heuristic_mask(HeuristicKind::TopDown, k, rows, subs, cfg.seed));
        push("bottom-up", heuristic_mask(HeuristicKind::BottomUp, k, rows, subs, cfg.seed));
        push("random", heuristic_mask(HeuristicKind::Random, k, rows, subs, cfg.seed));
        push("metric", heuristic_mask(HeuristicKind::Metric, k, rows, subs, cfg.seed, &calib));
        save_curve_csv(records, out_path);
        write_run_files(out_path, "bench", cfg, {model_path, data_path, router_path}, {out_path});
        for (const auto& r : records)
            std::printf("bench: %-9s ratio %.3f traj_mse %.6g mmd %.4f speedup %.3f\n",
                        r.config_id.c_str(), r.cache_ratio, r.traj_mse, r.mmd, r.speedup);
        return 0;
    }

    if (sw->parsed()) {
        DenoiserModel model = DenoiserModel::load_checkpoint(model_path);
        NoiseSchedule sched = schedule_of(model);
        TimeGrid grid = TimeGrid::make(sched, grid_segments(cfg), cfg.grid_spacing(),
                                       cfg.solver_kind());
        Dataset data = load_dataset_csv(data_path);
        SampleConfig sc = sample_config(cfg);
        auto holdout = holdout_points(data);

        std::vector<CurveRecord> records;
        std::vector<std::string> inputs{model_path, data_path};
        if (!router_path.empty() && !thetas.empty()) {
            Router router = load_router(router_path);
            inputs.push_back(router_path);
            records = sweep_theta(model, sched, grid, router, thetas, sc, holdout);
        } else if (!router_paths.empty()) {
            for (size_t i = 0; i < router_paths.size(); ++i) {
                Router router = load_router(router_paths[i]);
                inputs.push_back(router_paths[i]);
                Mask mask = discretize(router, static_cast<float>(cfg.theta), router.direction);
                CurveRecord rec = evaluate_mask(model, sched, grid, mask, sc, holdout);
                rec.config_id = "router" + std::to_string(i);
                rec.lambda = i < lambdas.size() ? lambdas[i] : 0.0;
                rec.theta = cfg.theta;
                records.push_back(std::move(rec));
            }
        } else {
            throw ValidationError("sweep: need --router with --thetas, or --routers");
        }
        save_curve_csv(records, out_path);
        write_run_files(out_path, "sweep", cfg, inputs, {out_path});
        std::printf("sweep: wrote %zu records -> %s\n", records.size(), out_path.c_str());
        return 0;
    }

    if (ex->parsed()) {
        Router router = load_router(router_path);
        export_router_heatmap(router, out_path);
        write_run_files(out_path, "export-router", cfg, {router_path},
                        {out_path + ".values.csv", out_path + ".mask.csv", out_path + ".json"});
        std::printf("export-router: wrote %s.{values.csv,mask.csv,json}\n", out_path.c_str());
        return 0;
    }

    return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const lc::NumericError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kExitNumeric;
    } catch (const lc::ValidationError& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return kExitValidation;
    } catch (const lc::ShapeError& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return kExitValidation;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    }
}
