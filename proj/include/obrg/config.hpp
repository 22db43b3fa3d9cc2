#pragma once

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "obrg/backbone.hpp"
#include "obrg/bitransformer.hpp"
#include "obrg/common.hpp"
#include "obrg/generation.hpp"

namespace obrg {

// Flat key-value configuration. Every key has a documented default; unknown
// keys are rejected. A fully defaulted config trains end to end at desk
// scale.
struct Config {
    // seeds
    uint64_t seeds_root = 42;

    // data
    uint64_t data_featurizer_seed = 0;
    int data_n_train = 4096;
    int data_n_test = 512;

    // backbone
    int backbone_d_emb = 64;
    int backbone_n_layers = 4;
    int backbone_n_heads = 4;
    int backbone_max_len = 128;

    // bitransformer
    int bit_n_layers = 6;
    int bit_d_bit = 32;
    int bit_n_heads = 4;
    std::vector<int> bit_cross_attn_layers = {0, 2, 4};
    bool bit_causal = false;
    int bit_n_q_img = 8;
    int bit_n_q_text = 8;
    int bit_n_q_gen = 8;

    // retrieval
    double retrieval_tau_init = 0.07;

    // generation
    int gen_denoiser_d_model = 64;
    int gen_denoiser_blocks = 3;
    int gen_t_emb_dim = 16;
    bool gen_eps_prediction = true;

    // schedules
    int sched_noise_steps = 100;
    double sched_noise_beta_lo = 0.02;
    double sched_noise_beta_hi = 0.04;
    double sched_replacement_initial_frac = 0.10;
    double sched_replacement_progressive_frac = 0.70;
    std::string sched_replacement_mode = "continuous_mix";

    // trainer
    int trainer_stage1_steps = 900;
    int trainer_stage1_batch = 16;
    double trainer_stage1_lr = 1.5e-3;
    double trainer_stage1_edit_fraction = 0.5;
    int trainer_stage2_steps = 3000;
    int trainer_stage2_batch_gen = 16;
    int trainer_stage2_batch_itc = 32;
    double trainer_stage2_lr = 2e-3;
    double trainer_stage2_gen_weight = 1.0;
    double trainer_stage2_itc_weight = 1.0;
    double trainer_stage2_warmup_frac = 0.10;
    bool trainer_lora_enabled = false;
    int trainer_lora_rank = 4;
    double trainer_lora_scale = 1.0;
    std::string trainer_lora_targets = "backbone.layer*.attn.w*";
    double trainer_clip_norm = 1.0;
    int trainer_log_interval = 25;

    BackboneConfig backbone_config() const {
        BackboneConfig b;
        b.vocab = vocab_size();
        b.d_emb = backbone_d_emb;
        b.n_layers = backbone_n_layers;
        b.n_heads = backbone_n_heads;
        b.max_len = backbone_max_len;
        b.d_vis = 16;
        return b;
    }

    BiTConfig bit_config() const {
        BiTConfig b;
        b.n_layers = bit_n_layers;
        b.d_bit = bit_d_bit;
        b.n_heads = bit_n_heads;
        b.cross_attn_layers = std::set<int>(bit_cross_attn_layers.begin(), bit_cross_attn_layers.end());
        b.causal = bit_causal;
        b.n_q_img = bit_n_q_img;
        b.n_q_text = bit_n_q_text;
        b.n_q_gen = bit_n_q_gen;
        return b;
    }

    DenoiserConfig denoiser_config() const {
        DenoiserConfig d;
        d.latent_dim = kLatentDim;
        d.n_tokens = kGridCells;
        d.d_model = gen_denoiser_d_model;
        d.n_blocks = gen_denoiser_blocks;
        d.d_cond = bit_d_bit;
        d.t_emb_dim = gen_t_emb_dim;
        return d;
    }

    NoiseSchedule noise_schedule() const {
        return NoiseSchedule::linear_vp(sched_noise_steps, sched_noise_beta_lo, sched_noise_beta_hi);
    }

    MixMode mix_mode() const {
        if (sched_replacement_mode == "continuous_mix") return MixMode::continuous_mix;
        if (sched_replacement_mode == "per_sample_bernoulli") return MixMode::per_sample_bernoulli;
        fail(ErrKind::config, "config: schedules.replacement_mode must be continuous_mix or per_sample_bernoulli");
    }
};

namespace detail {

struct KeyBinding {
    std::string name;
    std::function<std::string(const Config&)> get;
    std::function<void(Config&, const std::string&)> set;
};

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        fail(ErrKind::config, "config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        fail(ErrKind::config, "config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        fail(ErrKind::config, "config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    fail(ErrKind::config, "config: key '" + key + "' expects true or false, got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    if (v.empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int(key, item));
    return out;
}

inline std::string fmt_int_list(const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
    }
    return s;
}

inline const std::vector<KeyBinding>& key_bindings() {
    static const std::vector<KeyBinding> bindings = [] {
        std::vector<KeyBinding> b;
        auto add_u64 = [&](const std::string& n, uint64_t Config::* f) {
            b.push_back({n, [f](const Config& c) { return std::to_string(c.*f); },
                         [f, n](Config& c, const std::string& v) { c.*f = parse_u64(n, v); }});
        };
        auto add_int = [&](const std::string& n, int Config::* f) {
            b.push_back({n, [f](const Config& c) { return std::to_string(c.*f); },
                         [f, n](Config& c, const std::string& v) { c.*f = parse_int(n, v); }});
        };
        auto add_double = [&](const std::string& n, double Config::* f) {
            b.push_back({n, [f](const Config& c) { return fmt_double(c.*f); },
                         [f, n](Config& c, const std::string& v) { c.*f = parse_double(n, v); }});
        };
        auto add_bool = [&](const std::string& n, bool Config::* f) {
            b.push_back({n, [f](const Config& c) { return c.*f ? "true" : "false"; },
                         [f, n](Config& c, const std::string& v) { c.*f = parse_bool(n, v); }});
        };
        auto add_string = [&](const std::string& n, std::string Config::* f) {
            b.push_back({n, [f](const Config& c) { return c.*f; },
                         [f](Config& c, const std::string& v) { c.*f = v; }});
        };
        auto add_int_list = [&](const std::string& n, std::vector<int> Config::* f) {
            b.push_back({n, [f](const Config& c) { return fmt_int_list(c.*f); },
                         [f, n](Config& c, const std::string& v) { c.*f = parse_int_list(n, v); }});
        };

        add_u64("seeds.root", &Config::seeds_root);
        add_u64("data.featurizer_seed", &Config::data_featurizer_seed);
        add_int("data.n_train", &Config::data_n_train);
        add_int("data.n_test", &Config::data_n_test);
        add_int("backbone.d_emb", &Config::backbone_d_emb);
        add_int("backbone.n_layers", &Config::backbone_n_layers);
        add_int("backbone.n_heads", &Config::backbone_n_heads);
        add_int("backbone.max_len", &Config::backbone_max_len);
        add_int("bitransformer.n_layers", &Config::bit_n_layers);
        add_int("bitransformer.d_bit", &Config::bit_d_bit);
        add_int("bitransformer.n_heads", &Config::bit_n_heads);
        add_int_list("bitransformer.cross_attn_layers", &Config::bit_cross_attn_layers);
        add_bool("bitransformer.causal", &Config::bit_causal);
        add_int("bitransformer.n_q_img", &Config::bit_n_q_img);
        add_int("bitransformer.n_q_text", &Config::bit_n_q_text);
        add_int("bitransformer.n_q_gen", &Config::bit_n_q_gen);
        add_double("retrieval.tau_init", &Config::retrieval_tau_init);
        add_int("generation.denoiser_d_model", &Config::gen_denoiser_d_model);
        add_int("generation.denoiser_blocks", &Config::gen_denoiser_blocks);
        add_int("generation.t_emb_dim", &Config::gen_t_emb_dim);
        add_bool("generation.eps_prediction", &Config::gen_eps_prediction);
        add_int("schedules.noise_steps", &Config::sched_noise_steps);
        add_double("schedules.noise_beta_lo", &Config::sched_noise_beta_lo);
        add_double("schedules.noise_beta_hi", &Config::sched_noise_beta_hi);
        add_double("schedules.replacement_initial_frac", &Config::sched_replacement_initial_frac);
        add_double("schedules.replacement_progressive_frac", &Config::sched_replacement_progressive_frac);
        add_string("schedules.replacement_mode", &Config::sched_replacement_mode);
        add_int("trainer.stage1_steps", &Config::trainer_stage1_steps);
        add_int("trainer.stage1_batch", &Config::trainer_stage1_batch);
        add_double("trainer.stage1_lr", &Config::trainer_stage1_lr);
        add_double("trainer.stage1_edit_fraction", &Config::trainer_stage1_edit_fraction);
        add_int("trainer.stage2_steps", &Config::trainer_stage2_steps);
        add_int("trainer.stage2_batch_gen", &Config::trainer_stage2_batch_gen);
        add_int("trainer.stage2_batch_itc", &Config::trainer_stage2_batch_itc);
        add_double("trainer.stage2_lr", &Config::trainer_stage2_lr);
        add_double("trainer.stage2_gen_weight", &Config::trainer_stage2_gen_weight);
        add_double("trainer.stage2_itc_weight", &Config::trainer_stage2_itc_weight);
        add_double("trainer.stage2_warmup_frac", &Config::trainer_stage2_warmup_frac);
        add_bool("trainer.lora_enabled", &Config::trainer_lora_enabled);
        add_int("trainer.lora_rank", &Config::trainer_lora_rank);
        add_double("trainer.lora_scale", &Config::trainer_lora_scale);
        add_string("trainer.lora_targets", &Config::trainer_lora_targets);
        add_double("trainer.clip_norm", &Config::trainer_clip_norm);
        add_int("trainer.log_interval", &Config::trainer_log_interval);
        return b;
    }();
    return bindings;
}

}  // namespace detail

inline void config_set(Config& cfg, const std::string& key, const std::string& value) {
    for (const auto& b : detail::key_bindings()) {
        if (b.name == key) {
            b.set(cfg, value);
            return;
        }
    }
    fail(ErrKind::config, "config: unknown key '" + key + "'");
}

inline Config parse_config_text(const std::string& text) {
    Config cfg;
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            fail(ErrKind::config, "config: line " + std::to_string(line_no) + " is not 'key = value'");
        }
        config_set(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

inline Config load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrKind::io, "config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

// Effective configuration with defaults resolved, one key per line.
inline std::string dump_config(const Config& cfg) {
    std::string out;
    for (const auto& b : detail::key_bindings()) {
        out += b.name;
        out += " = ";
        out += b.get(cfg);
        out += '\n';
    }
    return out;
}

// Fingerprint over the model-defining sections; trainer schedule lengths and
// corpus sizes may vary across compatible checkpoints. The causal ablation
// switch is excluded: it changes no parameter shapes and the same frozen
// backbone must load under either setting.
inline uint64_t config_fingerprint(const Config& cfg) {
    std::string material;
    for (const auto& b : detail::key_bindings()) {
        const bool model_defining = b.name.rfind("backbone.", 0) == 0 ||
                                    (b.name.rfind("bitransformer.", 0) == 0 && b.name != "bitransformer.causal") ||
                                    b.name.rfind("retrieval.", 0) == 0 || b.name.rfind("generation.", 0) == 0 ||
                                    b.name.rfind("schedules.", 0) == 0 || b.name.rfind("seeds.", 0) == 0 ||
                                    b.name == "data.featurizer_seed";
        if (model_defining) {
            material += b.name;
            material += '=';
            material += b.get(cfg);
            material += ';';
        }
    }
    return fnv1a64(material);
}

}  // namespace obrg
