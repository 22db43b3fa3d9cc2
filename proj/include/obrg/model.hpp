#pragma once

#include <string>
#include <vector>

#include "obrg/backbone.hpp"
#include "obrg/bitransformer.hpp"
#include "obrg/config.hpp"
#include "obrg/features.hpp"
#include "obrg/generation.hpp"
#include "obrg/retrieval.hpp"

namespace obrg {

// The assembled system: causal backbone plus the alignment stack (projection,
// query transformer, query banks, fusion head, denoiser). Owns the parameter
// registry; everything trainable is reachable by name.
class Model {
public:
    Backbone backbone;
    DownProjection down;
    BiTransformer bit;
    QueryBank queries;
    FusionHead fusion;
    Denoiser denoiser;
    Featurizer featurizer{0};

    void init(const Config& cfg) {
        cfg_ = cfg;
        Rng root(cfg.seeds_root);
        backbone.init(cfg.backbone_config(), root.split("init.backbone"));
        down.init(cfg.bit_d_bit, cfg.backbone_d_emb, root.split("init.down"));
        bit.init(cfg.bit_config(), root.split("init.bit"));
        queries.init(cfg.bit_config(), root.split("init.queries"));
        fusion.init(cfg.bit_d_bit, root.split("init.fusion"), static_cast<float>(cfg.retrieval_tau_init));
        denoiser.init(cfg.denoiser_config(), root.split("init.denoiser"));
        denoiser.set_schedule(cfg.noise_schedule());
        featurizer = Featurizer(cfg.data_featurizer_seed);
        rebuild_registry();
    }

    const Config& config() const { return cfg_; }
    ParamRegistry& registry() { return reg_; }
    const ParamRegistry& registry() const { return reg_; }

    void rebuild_registry() {
        reg_.clear();
        backbone.register_params(reg_, "backbone");
        down.register_params(reg_, "down");
        bit.register_params(reg_, "bit");
        queries.register_params(reg_, "queries");
        fusion.register_params(reg_, "fusion");
        denoiser.register_params(reg_, "denoiser");
    }

    static bool is_backbone_param(const std::string& name) { return name.rfind("backbone.", 0) == 0; }
    static bool is_alignment_param(const std::string& name) { return !is_backbone_param(name); }

    // Stage-1 trainable set: backbone only. Stage-2: alignment only.
    void set_stage_freeze(int stage) {
        for (auto& [name, p] : reg_.items()) {
            const bool trainable = stage == 1 ? is_backbone_param(name) : is_alignment_param(name);
            // adapter-managed base weights stay frozen while adapters exist
            if (trainable && stage == 1 && has_active_adapter_for(name)) continue;
            set_param_trainable(p, trainable);
        }
    }

    uint64_t group_checksum(const std::function<bool(const std::string&)>& pred) const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, p] : reg_.items()) {
            if (!pred(name)) continue;
            h = fnv1a64(name, h);
            h = fnv1a64(p->data(), p->numel() * sizeof(float), h);
        }
        return h;
    }

    // Attaches low-rank adapters to every backbone linear matching one of the
    // comma-separated patterns; returns the adapted weight names.
    std::vector<std::string> adapt_low_rank(const std::string& target_patterns, int rank, float scale, Rng rng) {
        std::vector<std::string> patterns;
        std::string cur;
        for (char c : target_patterns + ",") {
            if (c == ',') {
                if (!cur.empty()) patterns.push_back(cur);
                cur.clear();
            } else if (c != ' ') {
                cur += c;
            }
        }
        std::vector<std::string> adapted;
        for (auto& [name, lin] : backbone.linear_weights("backbone")) {
            bool hit = false;
            for (const auto& pat : patterns) hit = hit || name_matches(pat, name) || name_matches(pat, name + ".w");
            if (!hit) continue;
            Rng child = rng.split(name);
            lin->attach_adapter(rank, scale, child);
            adapted.push_back(name);
        }
        if (adapted.empty()) {
            fail(ErrKind::config, "adapters: no weight matches pattern '" + target_patterns + "'");
        }
        rebuild_registry();
        return adapted;
    }

    void merge_adapters() {
        bool any = false;
        for (auto& [name, lin] : backbone.linear_weights("backbone")) {
            if (lin->lora.active) {
                lin->merge_adapter();
                any = true;
            }
        }
        if (any) rebuild_registry();
    }

    bool has_active_adapters() {
        for (auto& [name, lin] : backbone.linear_weights("backbone")) {
            if (lin->lora.active) return true;
        }
        return false;
    }

private:
    bool has_active_adapter_for(const std::string& pname) {
        for (auto& [name, lin] : backbone.linear_weights("backbone")) {
            if (lin->lora.active && pname == name + ".w") return true;
        }
        return false;
    }

    Config cfg_;
    ParamRegistry reg_;
};

}  // namespace obrg
