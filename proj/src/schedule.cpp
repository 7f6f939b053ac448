#include "lc/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace lc {

namespace {

constexpr double kPi = 3.14159265358979323846;

Tensor affine_combine(const Tensor& x, double cx, const Tensor& y, double cy) {
    if (!same_shape(x, y))
        throw ShapeError("schedule: shape mismatch " + shape_str(x.shape) + " vs " +
                         shape_str(y.shape));
    Tensor out = zeros(x.shape);
    float fx = static_cast<float>(cx), fy = static_cast<float>(cy);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = fx * x.data[i] + fy * y.data[i];
    return out;
}

}  // namespace

NoiseSchedule NoiseSchedule::make(ScheduleKind kind, int t_train, double beta_start,
                                  double beta_end) {
    if (t_train < 2) throw ValidationError("schedule: t_train must be >= 2");
    NoiseSchedule s;
    s.kind_ = kind;
    s.t_train_ = t_train;
    std::vector<double> alpha_bar(static_cast<size_t>(t_train) + 1, 1.0);
    if (kind == ScheduleKind::VpLinear) {
        for (int t = 1; t <= t_train; ++t) {
            double beta = beta_start + (beta_end - beta_start) * (t - 1) / (t_train - 1);
            alpha_bar[static_cast<size_t>(t)] = alpha_bar[static_cast<size_t>(t) - 1] * (1.0 - beta);
        }
    } else {
        auto f = [&](double t) {
            double v = std::cos((t / t_train + 0.008) / 1.008 * kPi / 2.0);
            return v * v;
        };
        double f0 = f(0.0);
        double prev = 1.0;
        for (int t = 1; t <= t_train; ++t) {
            double ab = f(static_cast<double>(t)) / f0;
            double beta = std::min(1.0 - ab / prev, 0.999);
            alpha_bar[static_cast<size_t>(t)] = prev * (1.0 - beta);
            prev = alpha_bar[static_cast<size_t>(t)];
        }
    }
    s.alpha_.resize(alpha_bar.size());
    s.sigma_.resize(alpha_bar.size());
    for (size_t t = 0; t < alpha_bar.size(); ++t) {
        s.alpha_[t] = std::sqrt(alpha_bar[t]);
        s.sigma_[t] = std::sqrt(1.0 - alpha_bar[t]);
    }
    return s;
}

size_t NoiseSchedule::check(int t) const {
    if (t < 0 || t > t_train_)
        throw ShapeError("schedule: time " + std::to_string(t) + " outside [0," +
                         std::to_string(t_train_) + "]");
    return static_cast<size_t>(t);
}

double NoiseSchedule::lambda(int t) const {
    size_t i = check(t);
    if (sigma_[i] == 0.0) return std::numeric_limits<double>::infinity();
    return std::log(alpha_[i] / sigma_[i]);
}

int NoiseSchedule::time_of_lambda(double target) const {
    // lambda is strictly decreasing in t over [1, t_train].
    int best = 1;
    double best_d = std::abs(lambda(1) - target);
    int lo = 1, hi = t_train_;
    while (lo < hi) {
        int mid = (lo + hi) / 2;
        if (lambda(mid) > target)
            lo = mid + 1;
        else
            hi = mid;
    }
    for (int t = std::max(1, lo - 1); t <= std::min(t_train_, lo + 1); ++t) {
        double d = std::abs(lambda(t) - target);
        if (d < best_d) {
            best_d = d;
            best = t;
        }
    }
    return best;
}

int NoiseSchedule::max_usable_time() const {
    for (int t = t_train_; t >= 1; --t)
        if (alpha_[static_cast<size_t>(t)] >= 1e-3) return t;
    return 1;
}

TimeGrid TimeGrid::make(const NoiseSchedule& sched, int segments, GridSpacing spacing,
                        Solver solver) {
    if (segments < 1) throw ValidationError("grid: need at least one segment");
    int terminal = solver == Solver::Dpm2 ? 1 : 0;
    std::vector<int> times(static_cast<size_t>(segments));
    int t_max = sched.max_usable_time();
    if (spacing == GridSpacing::UniformT) {
        for (int i = 0; i < segments; ++i) {
            double frac = static_cast<double>(segments - i) / segments;
            times[static_cast<size_t>(i)] =
                terminal + static_cast<int>(std::llround((t_max - terminal) * frac));
        }
    } else {
        double l_hi = sched.lambda(t_max);
        double l_lo = sched.lambda(std::max(terminal, 1));
        for (int i = 0; i < segments; ++i) {
            double lam = l_hi + (l_lo - l_hi) * static_cast<double>(i) / segments;
            times[static_cast<size_t>(i)] = sched.time_of_lambda(lam);
        }
    }
    // Enforce strict decrease; coarse lambda spacing can collide on lookup.
    for (size_t i = 1; i < times.size(); ++i)
        if (times[i] >= times[i - 1]) times[i] = times[i - 1] - 1;
    return from_times(std::move(times), terminal);
}

TimeGrid TimeGrid::from_times(std::vector<int> times, int terminal) {
    if (times.empty()) throw ValidationError("grid: empty time list");
    for (size_t i = 0; i < times.size(); ++i) {
        if (times[i] < 1) throw ValidationError("grid: evaluation times must be >= 1");
        if (i > 0 && times[i] >= times[i - 1])
            throw ValidationError("grid: times must be strictly decreasing");
    }
    if (terminal < 0 || terminal >= times.back())
        throw ValidationError("grid: terminal must be below the last time");
    TimeGrid g;
    g.times = std::move(times);
    g.terminal = terminal;
    return g;
}

Tensor forward_sample(const NoiseSchedule& sched, const Tensor& x0, int t, const Tensor& noise) {
    return affine_combine(x0, sched.alpha_d(t), noise, sched.sigma_d(t));
}

Tensor ddim_step(const NoiseSchedule& sched, const Tensor& x_s, const Tensor& eps, int s, int t) {
    if (t > s) throw ShapeError("ddim_step: target time must not exceed source time");
    if (t == s) return x_s;
    double a_s = sched.alpha_d(s), a_t = sched.alpha_d(t);
    double s_s = sched.sigma_d(s), s_t = sched.sigma_d(t);
    double cx = a_t / a_s;
    double ce = a_t * s_s / a_s - s_t;  // = sigma_t (e^{l_t - l_s} - 1)
    return affine_combine(x_s, cx, eps, -ce);
}

Dpm2Result dpm_solver2_step(const NoiseSchedule& sched, const Tensor& x_s,
                            const ModelEvaluator& eval, int s, int t) {
    if (t > s) throw ShapeError("dpm_solver2_step: target time must not exceed source time");
    if (t == s) return {x_s, -1, -1};
    if (sched.sigma_d(t) == 0.0)
        throw ValidationError("dpm_solver2_step: target time has sigma = 0; end the grid at t >= 1");

    if (s - t < 2)
        throw ValidationError("dpm_solver2_step: no interior midpoint between adjacent times");

    double l_s = sched.lambda(s), l_t = sched.lambda(t);
    double h = l_t - l_s;
    int u = sched.time_of_lambda(l_s + 0.5 * h);
    u = std::clamp(u, t + 1, s - 1);

    Tensor eps_s = eval(x_s, s);
    double a_s = sched.alpha_d(s), s_s = sched.sigma_d(s);
    double a_u = sched.alpha_d(u), s_u = sched.sigma_d(u);
    Tensor x_u = affine_combine(x_s, a_u / a_s, eps_s, -(a_u * s_s / a_s - s_u));

    Tensor eps_u = eval(x_u, u);
    double r = (sched.lambda(u) - l_s) / h;
    double w_u = 1.0 / (2.0 * r);
    Tensor combined = affine_combine(eps_s, 1.0 - w_u, eps_u, w_u);

    double a_t = sched.alpha_d(t), s_t = sched.sigma_d(t);
    Tensor x_t = affine_combine(x_s, a_t / a_s, combined, -(a_t * s_s / a_s - s_t));
    return {std::move(x_t), s, u};
}

}  // namespace lc
