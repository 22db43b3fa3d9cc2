#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "obrg/nn.hpp"

namespace obrg {

struct AdamConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float clip_norm = 1.0f;  // global-norm gradient clip; <= 0 disables
};

// First/second-moment adaptive update with bias correction. Moments are
// keyed by parameter name so they survive registry rebuilds and checkpoint
// round-trips. Deterministic: iteration follows registry order.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    uint64_t step_count() const { return t_; }
    void set_step_count(uint64_t t) { t_ = t; }

    struct Moments {
        std::vector<float> m;
        std::vector<float> v;
    };

    std::map<std::string, Moments>& state() { return state_; }
    const std::map<std::string, Moments>& state() const { return state_; }

    // One update over every trainable parameter in the registry. lr_scale
    // lets a warmup phase shrink the step for all or selected parameters.
    void step(const ParamRegistry& reg, float lr,
              const std::function<float(const std::string&)>& lr_scale = nullptr) {
        // global-norm clip over the trainable set
        double scale_factor = 1.0;
        if (cfg_.clip_norm > 0.0f) {
            double norm_sq = 0.0;
            for (const auto& [name, p] : reg.items()) {
                if (!p->requires_grad()) continue;
                check_finite(name, *p);
                for (float g : p->grad()) norm_sq += static_cast<double>(g) * g;
            }
            const double norm = std::sqrt(norm_sq);
            if (norm > cfg_.clip_norm) scale_factor = cfg_.clip_norm / norm;
        } else {
            for (const auto& [name, p] : reg.items()) {
                if (p->requires_grad()) check_finite(name, *p);
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
        for (const auto& [name, p] : reg.items()) {
            if (!p->requires_grad()) continue;
            auto& mom = state_[name];
            if (mom.m.size() != p->numel()) {
                mom.m.assign(p->numel(), 0.0f);
                mom.v.assign(p->numel(), 0.0f);
            }
            const float step_lr = lr * (lr_scale ? lr_scale(name) : 1.0f);
            auto& vals = p->values();
            const auto& grad = p->grad();
            for (size_t i = 0; i < vals.size(); ++i) {
                const double g = static_cast<double>(grad[i]) * scale_factor;
                const double m = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g;
                const double v = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g * g;
                mom.m[i] = static_cast<float>(m);
                mom.v[i] = static_cast<float>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                vals[i] = static_cast<float>(vals[i] - step_lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

private:
    static void check_finite(const std::string& name, const Tensor& p) {
        for (float g : p.grad()) {
            if (!std::isfinite(g)) {
                fail(ErrKind::numeric, "optimizer: non-finite gradient in parameter '" + name + "'");
            }
        }
    }

    AdamConfig cfg_;
    uint64_t t_ = 0;
    std::map<std::string, Moments> state_;
};

inline void zero_all_grads(const ParamRegistry& reg) {
    for (const auto& [_, p] : reg.items()) {
        if (p->requires_grad()) p->zero_grad();
    }
}

}  // namespace obrg
