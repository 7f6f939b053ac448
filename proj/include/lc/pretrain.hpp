#pragma once

#include <vector>

#include "lc/dataset.hpp"
#include "lc/model.hpp"
#include "lc/optim.hpp"
#include "lc/schedule.hpp"

namespace lc {

struct PretrainConfig {
    int steps = 8000;
    int batch = 32;
    float lr = 1e-3f;
    float weight_decay = 0.0f;
    float label_drop = 0.1f;  // probability of replacing the label with the null token
    uint64_t seed = 0;
    int threads = 1;
    int log_every = 200;
};

struct LossPoint {
    int step;
    double loss;
};

/// Noise-prediction MSE training of the toy denoiser. Aborts with
/// NumericError if the loss turns NaN. Returns the logged loss curve.
std::vector<LossPoint> pretrain(DenoiserModel& model, const Dataset& data,
                                const NoiseSchedule& sched, const PretrainConfig& cfg);

}  // namespace lc
