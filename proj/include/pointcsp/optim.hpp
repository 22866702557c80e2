#pragma once
// AdamW (decoupled weight decay) and the warmup + cosine learning-rate
// schedule. The optimizer owns per-parameter moment buffers keyed by the
// parameter tensor's address; parameter identity must be stable for the
// lifetime of a run.

#include <cmath>
#include <unordered_map>
#include <vector>

#include "graph.hpp"
#include "tensor.hpp"

namespace pointcsp {

struct LrSchedule {
    int64_t warmup_steps = 0;
    int64_t total_steps = 1;
    double lr_max = 1e-3;
    double lr_min = 0.0;

    void validate() const {
        if (warmup_steps < 0 || warmup_steps >= total_steps) throw Error("LrSchedule: need 0 <= warmup_steps < total_steps");
        if (lr_min > lr_max) throw Error("LrSchedule: lr_min must not exceed lr_max");
    }
};

// Linear ramp 0 -> lr_max over warmup, then cosine decay to lr_min.
inline double lr_at(int64_t step, const LrSchedule& sched) {
    sched.validate();
    if (step < 0 || step > sched.total_steps) throw Error("lr_at: step out of range");
    if (step < sched.warmup_steps)
        return sched.lr_max * static_cast<double>(step) / static_cast<double>(sched.warmup_steps);
    const double progress =
        static_cast<double>(step - sched.warmup_steps) / static_cast<double>(sched.total_steps - sched.warmup_steps);
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

template <typename T>
class AdamWT {
    struct Moments {
        std::vector<double> m, v;
    };

public:
    explicit AdamWT(AdamWConfig cfg = {}) : cfg_(cfg) {}

    AdamWConfig& config() { return cfg_; }
    int64_t step_count() const { return step_; }

    // One update over (params, grads). Weight decay is applied directly to
    // the parameter, decoupled from the moment-filtered gradient term.
    void step(const std::vector<TensorT<T>*>& params, const GradMapT<T>& grads) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (TensorT<T>* p : params) {
            auto it = grads.find(p);
            if (it == grads.end()) throw Error("AdamW: missing gradient for a parameter");
            const TensorT<T>& g = it->second;
            if (!g.same_shape(*p)) throw Error("AdamW: gradient shape mismatch");
            if (!g.all_finite()) throw Error("AdamW: non-finite gradient");
            Moments& mom = state_[p];
            if (mom.m.empty()) {
                mom.m.assign(p->data.size(), 0.0);
                mom.v.assign(p->data.size(), 0.0);
            }
            for (size_t i = 0; i < p->data.size(); ++i) {
                const double gi = static_cast<double>(g.data[i]);
                mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * gi;
                mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double mhat = mom.m[i] / bc1;
                const double vhat = mom.v[i] / bc2;
                double x = static_cast<double>(p->data[i]);
                x -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * x);
                p->data[i] = static_cast<T>(x);
            }
        }
    }

private:
    AdamWConfig cfg_;
    int64_t step_ = 0;
    std::unordered_map<const TensorT<T>*, Moments> state_;
};

using AdamW = AdamWT<double>;

}  // namespace pointcsp
