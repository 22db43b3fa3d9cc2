#pragma once

#include <string>
#include <vector>

#include "obrg/ops.hpp"
#include "obrg/rng.hpp"
#include "obrg/tensor.hpp"

namespace obrg {

// Ordered name -> parameter view. Pointers refer into module-owned tensors;
// modules outlive the registry and re-register after structural changes
// (adapter attach/merge). Iteration order is registration order, which fixes
// checkpoint layout and optimizer traversal.
class ParamRegistry {
public:
    void add(const std::string& name, Tensor* t) {
        for (auto& [n, _] : items_) {
            if (n == name) fail(ErrKind::config, "registry: duplicate parameter '" + name + "'");
        }
        items_.emplace_back(name, t);
    }

    Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : items_) {
            if (n == name) return t;
        }
        return nullptr;
    }

    const std::vector<std::pair<std::string, Tensor*>>& items() const { return items_; }
    void clear() { items_.clear(); }

    size_t total_values() const {
        size_t n = 0;
        for (const auto& [_, t] : items_) n += t->numel();
        return n;
    }

private:
    std::vector<std::pair<std::string, Tensor*>> items_;
};

// '*' matches any (possibly empty) substring.
inline bool name_matches(const std::string& pattern, const std::string& name) {
    size_t p = 0, n = 0, star = std::string::npos, mark = 0;
    while (n < name.size()) {
        if (p < pattern.size() && (pattern[p] == name[n])) {
            ++p;
            ++n;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = n;
        } else if (star != std::string::npos) {
            p = star + 1;
            n = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

inline void set_param_trainable(Tensor* t, bool trainable) {
    if (t->requires_grad() == trainable) return;
    *t = Tensor(t->shape(), t->values(), trainable);
}

// Low-rank adapter state for one weight; effective weight W + scale * B . A.
struct LoraState {
    bool active = false;
    Tensor a;  // [r x in]
    Tensor b;  // [out x r]
    float scale = 1.0f;
};

struct Linear {
    Tensor w;  // [out x in]
    Tensor b;  // [out]
    bool has_bias = true;
    LoraState lora;

    void init(int out_dim, int in_dim, Rng& rng, float stddev = 0.02f, bool bias = true) {
        w = Tensor::randn({out_dim, in_dim}, rng, stddev, true);
        has_bias = bias;
        if (bias) b = Tensor({out_dim}, true);
    }

    Tensor forward(const Tensor& x) const {
        Tensor y = linear(x, w, has_bias ? &b : nullptr);
        if (lora.active) {
            y = add(y, scale(linear(linear(x, lora.a), lora.b), lora.scale));
        }
        return y;
    }

    // B starts at zero so a fresh adapter is exactly the base map.
    void attach_adapter(int rank, float adapter_scale, Rng& rng) {
        lora.active = true;
        lora.scale = adapter_scale;
        lora.a = Tensor::randn({rank, w.dim(1)}, rng, 0.02f, true);
        lora.b = Tensor({w.dim(0), rank}, true);
        set_param_trainable(&w, false);
    }

    void merge_adapter() {
        if (!lora.active) return;
        const int out_dim = w.dim(0), in_dim = w.dim(1), r = lora.a.dim(0);
        std::vector<float> merged = w.values();
        for (int o = 0; o < out_dim; ++o)
            for (int i = 0; i < in_dim; ++i) {
                double acc = 0.0;
                for (int k = 0; k < r; ++k)
                    acc += static_cast<double>(lora.b.data()[static_cast<size_t>(o) * r + k]) *
                           lora.a.data()[static_cast<size_t>(k) * in_dim + i];
                merged[static_cast<size_t>(o) * in_dim + i] += static_cast<float>(lora.scale * acc);
            }
        w = Tensor(w.shape(), std::move(merged), true);
        lora = LoraState{};
    }

    void register_params(ParamRegistry& reg, const std::string& prefix) {
        reg.add(prefix + ".w", &w);
        if (has_bias) reg.add(prefix + ".b", &b);
        if (lora.active) {
            reg.add(prefix + ".lora_a", &lora.a);
            reg.add(prefix + ".lora_b", &lora.b);
        }
    }
};

struct Norm {
    Tensor g;
    Tensor b;

    void init(int d) {
        g = Tensor::full({d}, 1.0f, true);
        b = Tensor({d}, true);
    }

    Tensor forward(const Tensor& x, float eps = 1e-5f) const { return layer_norm(x, g, b, eps); }

    void register_params(ParamRegistry& reg, const std::string& prefix) {
        reg.add(prefix + ".g", &g);
        reg.add(prefix + ".b", &b);
    }
};

}  // namespace obrg
