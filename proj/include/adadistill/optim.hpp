#pragma once

// SGD with classical momentum and coupled L2 weight decay, plus the
// step-decay learning-rate schedule expressed at any run length.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "adadistill/errors.hpp"
#include "adadistill/numkit.hpp"

namespace adadistill {

struct SgdState {
    std::vector<Vec> momentum_buffers;  // allocated on first step
    std::size_t step_count = 0;
};

// g <- grad + wd * param; buf <- momentum * buf + g; param <- param - lr * buf.
// Weight decay is folded into the gradient (coupled L2).
inline void sgd_step(std::span<std::span<double>> params,
                     std::span<const std::span<const double>> grads, SgdState& state, double lr,
                     double momentum, double weight_decay) {
    if (!(lr > 0.0) || !(momentum >= 0.0 && momentum < 1.0) || !(weight_decay >= 0.0)) {
        throw InvalidSpecError("sgd_step: need lr > 0, momentum in [0,1), weight_decay >= 0");
    }
    if (params.size() != grads.size()) {
        throw ShapeMismatchError("sgd_step: " + std::to_string(params.size()) + " params vs " +
                                 std::to_string(grads.size()) + " grads");
    }
    if (state.momentum_buffers.empty()) {
        state.momentum_buffers.reserve(params.size());
        for (auto p : params) state.momentum_buffers.emplace_back(p.size(), 0.0);
    }
    if (state.momentum_buffers.size() != params.size()) {
        throw ShapeMismatchError("sgd_step: state tracks a different parameter set");
    }
    for (std::size_t v = 0; v < params.size(); ++v) {
        auto p = params[v];
        auto g = grads[v];
        Vec& buf = state.momentum_buffers[v];
        if (p.size() != g.size() || p.size() != buf.size()) {
            throw ShapeMismatchError("sgd_step: tensor " + std::to_string(v) + " shape drifted");
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double step_g = g[i] + weight_decay * p[i];
            buf[i] = momentum * buf[i] + step_g;
            p[i] -= lr * buf[i];
        }
    }
    ++state.step_count;
}

inline void sgd_step(std::vector<std::span<double>> params,
                     const std::vector<std::span<const double>>& grads, SgdState& state, double lr,
                     double momentum, double weight_decay) {
    sgd_step(std::span<std::span<double>>(params),
             std::span<const std::span<const double>>(grads), state, lr, momentum, weight_decay);
}

struct LrSchedule {
    double initial_lr = 0.1;
    std::vector<std::size_t> milestones;
    double decay_factor = 0.1;

    void validate() const {
        if (!(initial_lr > 0.0)) throw InvalidSpecError("LrSchedule: initial_lr must be > 0");
        if (!(decay_factor > 0.0 && decay_factor < 1.0)) {
            throw InvalidSpecError("LrSchedule: decay_factor must be in (0,1)");
        }
        for (std::size_t i = 1; i < milestones.size(); ++i) {
            if (milestones[i] <= milestones[i - 1]) {
                throw InvalidSpecError("LrSchedule: milestones must be strictly ascending");
            }
        }
    }
};

inline double lr_at(const LrSchedule& schedule, std::size_t iteration) {
    std::size_t passed = 0;
    for (std::size_t m : schedule.milestones) {
        if (m <= iteration) ++passed;
    }
    return schedule.initial_lr * std::pow(schedule.decay_factor, double(passed));
}

// The reference recipe drops the rate by 10x at 80k/140k/210k/280k within a
// ~300k-iteration run; the same shape expressed as fractions of any total.
inline constexpr double kMilestoneFractions[4] = {0.27, 0.47, 0.70, 0.93};

inline LrSchedule make_step_schedule(double initial_lr, std::size_t total_iterations,
                                     double decay_factor = 0.1) {
    LrSchedule schedule;
    schedule.initial_lr = initial_lr;
    schedule.decay_factor = decay_factor;
    for (double frac : kMilestoneFractions) {
        const auto m = std::size_t(frac * double(total_iterations));
        // collapse duplicates that appear at tiny run lengths
        if (schedule.milestones.empty() || m > schedule.milestones.back()) {
            schedule.milestones.push_back(m);
        }
    }
    schedule.validate();
    return schedule;
}

} // namespace adadistill
