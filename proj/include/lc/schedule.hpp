#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "lc/tensor.hpp"

namespace lc {

enum class ScheduleKind { VpLinear, VpCosine };
enum class GridSpacing { UniformT, UniformLambda };
enum class Solver { Ddim, Dpm2 };

/// Variance-preserving noise schedule over discrete training timesteps.
/// Tables are indexed t = 0..t_train where t = 0 is noise-free:
/// alpha(0) = 1, sigma(0) = 0. alpha(t)^2 + sigma(t)^2 = 1 throughout, and
/// lambda(t) = log(alpha(t)/sigma(t)) (+inf at t = 0).
class NoiseSchedule {
public:
    static NoiseSchedule make(ScheduleKind kind, int t_train, double beta_start = 1e-4,
                              double beta_end = 0.02);

    ScheduleKind kind() const { return kind_; }
    int t_train() const { return t_train_; }

    float alpha(int t) const { return static_cast<float>(alpha_d(t)); }
    float sigma(int t) const { return static_cast<float>(sigma_d(t)); }
    double alpha_d(int t) const { return alpha_[check(t)]; }
    double sigma_d(int t) const { return sigma_[check(t)]; }
    /// log(alpha/sigma); +inf at t = 0.
    double lambda(int t) const;

    /// Discrete time whose lambda is nearest to `target` (never 0).
    int time_of_lambda(double target) const;

    /// Largest time with alpha(t) >= 1e-3. The cosine schedule's clipped tail
    /// drives alpha to ~5e-5 at t_train, which is numerically unusable in
    /// 32-bit solver coefficients; grids start here instead.
    int max_usable_time() const;

private:
    size_t check(int t) const;
    ScheduleKind kind_ = ScheduleKind::VpLinear;
    int t_train_ = 0;
    std::vector<double> alpha_, sigma_;
};

/// Discrete sampling-step schedule. `times` are the solver source times in
/// execution order (strictly decreasing, all >= 1); the run ends at
/// `terminal`. DDIM evaluates the model once per segment, DPM-Solver-2 twice.
struct TimeGrid {
    std::vector<int> times;
    int terminal = 0;

    int segments() const { return static_cast<int>(times.size()); }
    int nfe(Solver solver) const { return segments() * (solver == Solver::Dpm2 ? 2 : 1); }
    /// Target time of segment i (the next grid time, or terminal for the last).
    int target(int i) const {
        return i + 1 < segments() ? times[static_cast<size_t>(i) + 1] : terminal;
    }

    static TimeGrid make(const NoiseSchedule& sched, int segments, GridSpacing spacing,
                         Solver solver);
    static TimeGrid from_times(std::vector<int> times, int terminal);
};

/// x_t = alpha(t) * x0 + sigma(t) * noise (forward-process reparameterization).
Tensor forward_sample(const NoiseSchedule& sched, const Tensor& x0, int t, const Tensor& noise);

/// First-order (DDIM) update from time s to t <= s:
///   x_t = (a_t/a_s) x_s - s_t (e^{l_t - l_s} - 1) eps
/// computed in the algebraically equivalent form
///   x_t = (a_t/a_s) x_s - (a_t s_s / a_s - s_t) eps
/// which stays finite when sigma(t) = 0.
Tensor ddim_step(const NoiseSchedule& sched, const Tensor& x_s, const Tensor& eps, int s, int t);

using ModelEvaluator = std::function<Tensor(const Tensor& x, int t)>;

struct Dpm2Result {
    Tensor x;
    int eval_t0 = -1;  // source-time evaluation
    int eval_t1 = -1;  // midpoint evaluation
};

/// Single-step second-order solver: evaluate at s, take a half-step in lambda
/// to the midpoint u, evaluate there, and combine with the generic-r weights
/// (exact midpoint weights when lambda(u) lands exactly halfway). Reports
/// both evaluation times so the caching cadence can count model evaluations.
Dpm2Result dpm_solver2_step(const NoiseSchedule& sched, const Tensor& x_s,
                            const ModelEvaluator& eval, int s, int t);

}  // namespace lc
