#pragma once

#include <map>
#include <string>
#include <vector>

#include "lc/cache.hpp"
#include "lc/model.hpp"
#include "lc/schedule.hpp"

namespace lc {

/// Plain-text key=value experiment configuration. Round-trips losslessly;
/// unknown keys are rejected on parse. Every command writes its resolved
/// config beside its outputs.
struct ExperimentConfig {
    // model
    int depth = 4;
    int width = 32;
    int heads = 4;
    int tokens = 4;
    int classes = 8;
    int time_embed_dim = 32;
    int ffn_dim = 0;
    bool long_skip = false;
    // schedule / grid
    std::string schedule = "vp-linear";
    int t_train = 1000;
    int nfe = 10;
    std::string spacing = "uniform-t";
    std::string solver = "ddim";
    // router / cache
    double lambda = 1e-2;
    double theta = 0.5;
    double alpha = 0.0;
    std::string cache_mode = "paper-literal";
    std::string threshold_direction = "cache_low";
    bool shifted_cache = true;
    // training
    int steps = 8000;
    int batch = 32;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double label_drop = 0.1;
    // run
    uint64_t seed = 0;
    int threads = 0;  // 0 = hardware concurrency
    double guidance = 0.0;
    int n_samples = 256;
    // data
    int modes = 8;
    int n_points = 4096;
    double mode_radius = 2.0;
    double mode_sigma = 0.15;

    std::string to_kv() const;
    static ExperimentConfig from_kv(const std::string& text);

    // Typed views of the string-valued fields; throw ValidationError on
    // unknown values.
    ModelConfig model_config() const;
    ScheduleKind schedule_kind() const;
    GridSpacing grid_spacing() const;
    Solver solver_kind() const;
    CacheMode cache_mode_kind() const;
    ThresholdDirection direction_kind() const;
    int resolved_threads() const;
};

void save_text_file(const std::string& path, const std::string& text);
std::string load_text_file(const std::string& path);
uint64_t file_hash(const std::string& path);

/// Writes <out_path> as a JSON run manifest: command, version string, seed,
/// threads, resolved-config hash, input/output paths with content hashes.
void write_manifest(const std::string& out_path, const std::string& command,
                    const ExperimentConfig& cfg,
                    const std::vector<std::string>& input_paths,
                    const std::vector<std::string>& output_paths);

}  // namespace lc
