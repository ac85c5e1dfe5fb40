#pragma once

#include <cmath>
#include <iostream>
#include <string>

#include "sfuse/common.hpp"
#include "sfuse/config.hpp"
#include "sfuse/params.hpp"

namespace sfuse {

// Linear warmup to lr_base, then cosine decay to zero at total_steps.
// Steps past the end clamp to zero (with a warning once).
inline double lr_schedule(int step, double lr_base, int warmup, int total, bool* warned = nullptr) {
    if (step < 0) throw ContractError("lr_schedule: negative step");
    if (step > total) {
        if (warned && !*warned) {
            std::cerr << "warning: lr_schedule queried past total_steps, clamping to 0\n";
            *warned = true;
        }
        return 0.0;
    }
    if (warmup > 0 && step < warmup)
        return lr_base * static_cast<double>(step) / static_cast<double>(warmup);
    if (total == warmup) return lr_base;
    const double t = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return lr_base * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

inline double lr_schedule(int step, const TrainConfig& cfg, bool* warned = nullptr) {
    return lr_schedule(step, cfg.lr_base, cfg.effective_warmup(), cfg.total_steps, warned);
}

// First/second moment state per parameter, plus the shared step counter.
template <class R>
struct AdamState {
    ParamStore<R> m;
    ParamStore<R> v;
    std::int64_t step = 0;  // completed updates

    static AdamState init(const ParamStore<R>& params) {
        AdamState s;
        for (const auto& [name, t] : params) {
            s.m.emplace(name, Tensor<R>::zeros(t.shape));
            s.v.emplace(name, Tensor<R>::zeros(t.shape));
        }
        return s;
    }
};

// AdamW: bias-corrected moments plus decoupled weight decay
// (p -= lr*wd*p applied separately from the adaptive step).
template <class R>
void adamw_step(ParamStore<R>& params, const GradientMap<R>& grads, AdamState<R>& state,
                double lr, const TrainConfig& cfg) {
    state.step += 1;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2, eps = cfg.adam_eps;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (auto& [name, p] : params) {
        const auto git = grads.find(name);
        if (git == grads.end()) throw ContractError("missing gradient for parameter '" + name + "'");
        const Tensor<R>& g = git->second;
        if (!g.same_shape(p))
            throw DimensionError("gradient shape mismatch for '" + name + "': " +
                                 shape_str(g.shape) + " vs " + shape_str(p.shape));
        Tensor<R>& m = state.m.at(name);
        Tensor<R>& v = state.v.at(name);
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double gi = static_cast<double>(g.data[i]);
            if (!std::isfinite(gi))
                throw TrainAbortError("non-finite gradient in parameter '" + name + "'");
            const double mi = b1 * static_cast<double>(m.data[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v.data[i]) + (1.0 - b2) * gi * gi;
            m.data[i] = static_cast<R>(mi);
            v.data[i] = static_cast<R>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            double pi = static_cast<double>(p.data[i]);
            pi -= lr * cfg.weight_decay * pi;              // decoupled decay
            pi -= lr * mhat / (std::sqrt(vhat) + eps);     // adaptive step
            p.data[i] = static_cast<R>(pi);
        }
    }
}

}  // namespace sfuse
