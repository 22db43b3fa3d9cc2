#pragma once

#include <set>
#include <string>
#include <vector>

#include "obrg/nn.hpp"
#include "obrg/ops.hpp"

namespace obrg {

struct BiTConfig {
    int n_layers = 6;
    int d_bit = 32;
    int n_heads = 4;
    std::set<int> cross_attn_layers = {0, 2, 4};
    bool causal = false;  // ablation switch: lower-triangular query self-attention
    int n_q_img = 8;
    int n_q_text = 8;
    int n_q_gen = 8;

    void validate() const {
        if (n_layers <= 0 || d_bit <= 0 || n_heads <= 0) fail(ErrKind::config, "bitransformer: dims must be positive");
        if (d_bit % n_heads != 0) fail(ErrKind::config, "bitransformer: d_bit must be divisible by n_heads");
        for (int l : cross_attn_layers) {
            if (l < 0 || l >= n_layers) fail(ErrKind::config, "bitransformer: cross_attn layer index out of range");
        }
        if (n_q_img <= 0 || n_q_text <= 0 || n_q_gen <= 0) fail(ErrKind::config, "bitransformer: query counts must be positive");
    }
};

// Trainable query matrices plus per-row position embeddings added before the
// forward pass.
struct QueryBank {
    Tensor q_img;
    Tensor q_text;
    Tensor q_uncond;
    Tensor pos_img;
    Tensor pos_text;
    Tensor pos_uncond;

    void init(const BiTConfig& cfg, Rng rng) {
        q_img = Tensor::randn({cfg.n_q_img, cfg.d_bit}, rng, 0.02f, true);
        q_text = Tensor::randn({cfg.n_q_text, cfg.d_bit}, rng, 0.02f, true);
        q_uncond = Tensor::randn({cfg.n_q_gen, cfg.d_bit}, rng, 0.02f, true);
        pos_img = Tensor::randn({cfg.n_q_img, cfg.d_bit}, rng, 0.02f, true);
        pos_text = Tensor::randn({cfg.n_q_text, cfg.d_bit}, rng, 0.02f, true);
        pos_uncond = Tensor::randn({cfg.n_q_gen, cfg.d_bit}, rng, 0.02f, true);
    }

    Tensor img() const { return add(q_img, pos_img); }
    Tensor text() const { return add(q_text, pos_text); }
    Tensor uncond() const { return add(q_uncond, pos_uncond); }

    void register_params(ParamRegistry& reg, const std::string& prefix) {
        reg.add(prefix + ".q_img", &q_img);
        reg.add(prefix + ".q_text", &q_text);
        reg.add(prefix + ".q_uncond", &q_uncond);
        reg.add(prefix + ".pos_img", &pos_img);
        reg.add(prefix + ".pos_text", &pos_text);
        reg.add(prefix + ".pos_uncond", &pos_uncond);
    }
};

// Single linear map from backbone width into the bidirectional model's width.
struct DownProjection {
    Linear proj;

    void init(int d_bit, int d_emb, Rng rng) { proj.init(d_bit, d_emb, rng); }
    Tensor forward(const Tensor& h) const { return proj.forward(h); }
    void register_params(ParamRegistry& reg, const std::string& prefix) { proj.register_params(reg, prefix); }
};

// Bidirectional transformer over query tokens. Each layer runs self-attention
// over the queries, cross-attention against the provided kv rows on the
// configured layers, then a feed-forward block; pre-norm residuals throughout.
class BiTransformer {
public:
    void init(const BiTConfig& cfg, Rng rng) {
        cfg.validate();
        cfg_ = cfg;
        layers_.resize(static_cast<size_t>(cfg.n_layers));
        for (size_t i = 0; i < layers_.size(); ++i) {
            auto& l = layers_[i];
            l.ln_self.init(cfg.d_bit);
            l.wq.init(cfg.d_bit, cfg.d_bit, rng);
            l.wk.init(cfg.d_bit, cfg.d_bit, rng);
            l.wv.init(cfg.d_bit, cfg.d_bit, rng);
            l.wo.init(cfg.d_bit, cfg.d_bit, rng);
            l.has_cross = cfg.cross_attn_layers.count(static_cast<int>(i)) > 0;
            if (l.has_cross) {
                l.ln_cross.init(cfg.d_bit);
                l.ln_kv.init(cfg.d_bit);
                l.cq.init(cfg.d_bit, cfg.d_bit, rng);
                l.ck.init(cfg.d_bit, cfg.d_bit, rng);
                l.cv.init(cfg.d_bit, cfg.d_bit, rng);
                l.co.init(cfg.d_bit, cfg.d_bit, rng);
            }
            l.ln_ffn.init(cfg.d_bit);
            l.ffn_in.init(4 * cfg.d_bit, cfg.d_bit, rng);
            l.ffn_out.init(cfg.d_bit, 4 * cfg.d_bit, rng);
        }
        ln_out_.init(cfg.d_bit);
    }

    const BiTConfig& config() const { return cfg_; }

    Tensor forward(const Tensor& queries, const Tensor& kv) const {
        check_matrix(queries, "bit_forward");
        check_matrix(kv, "bit_forward");
        return run_layers(queries, kv, {queries.dim(0)}, {kv.dim(0)});
    }

    // Batched form: several independent (queries, kv) problems stacked along
    // rows, isolated per block inside the attention kernel. Bit-identical to
    // per-sample forward calls; exists to amortize graph overhead.
    Tensor forward_batched(const Tensor& queries, const std::vector<int>& q_sizes, const Tensor& kv,
                           const std::vector<int>& kv_sizes) const {
        return run_layers(queries, kv, q_sizes, kv_sizes);
    }

private:
    Tensor run_layers(const Tensor& queries, const Tensor& kv, const std::vector<int>& q_sizes,
                      const std::vector<int>& kv_sizes) const {
        check_matrix(queries, "bit_forward");
        check_matrix(kv, "bit_forward");
        if (queries.dim(0) < 1) fail(ErrKind::shape, "bit_forward: need at least one query token");
        if (kv.dim(0) < 1) fail(ErrKind::shape, "bit_forward: empty kv");
        if (queries.dim(1) != cfg_.d_bit || kv.dim(1) != cfg_.d_bit) {
            fail(ErrKind::shape, "bit_forward: width must equal d_bit");
        }
        Tensor x = queries;
        for (const auto& l : layers_) {
            Tensor h = l.ln_self.forward(x);
            x = add(x, l.wo.forward(block_mha(l.wq.forward(h), l.wk.forward(h), l.wv.forward(h), cfg_.n_heads,
                                              q_sizes, q_sizes, cfg_.causal)));
            if (l.has_cross) {
                Tensor cqs = l.cq.forward(l.ln_cross.forward(x));
                Tensor kvn = l.ln_kv.forward(kv);
                x = add(x, l.co.forward(block_mha(cqs, l.ck.forward(kvn), l.cv.forward(kvn), cfg_.n_heads, q_sizes,
                                                  kv_sizes, false)));
            }
            Tensor m = l.ln_ffn.forward(x);
            x = add(x, l.ffn_out.forward(gelu(l.ffn_in.forward(m))));
        }
        return ln_out_.forward(x);
    }

public:
    void register_params(ParamRegistry& reg, const std::string& prefix) {
        for (size_t i = 0; i < layers_.size(); ++i) {
            const std::string lp = prefix + ".layer" + std::to_string(i);
            auto& l = layers_[i];
            l.ln_self.register_params(reg, lp + ".ln_self");
            l.wq.register_params(reg, lp + ".self.wq");
            l.wk.register_params(reg, lp + ".self.wk");
            l.wv.register_params(reg, lp + ".self.wv");
            l.wo.register_params(reg, lp + ".self.wo");
            if (l.has_cross) {
                l.ln_cross.register_params(reg, lp + ".ln_cross");
                l.ln_kv.register_params(reg, lp + ".ln_kv");
                l.cq.register_params(reg, lp + ".cross.wq");
                l.ck.register_params(reg, lp + ".cross.wk");
                l.cv.register_params(reg, lp + ".cross.wv");
                l.co.register_params(reg, lp + ".cross.wo");
            }
            l.ln_ffn.register_params(reg, lp + ".ln_ffn");
            l.ffn_in.register_params(reg, lp + ".ffn.w1");
            l.ffn_out.register_params(reg, lp + ".ffn.w2");
        }
        ln_out_.register_params(reg, prefix + ".ln_out");
    }

private:
    struct Layer {
        Norm ln_self;
        Linear wq, wk, wv, wo;
        bool has_cross = false;
        Norm ln_cross, ln_kv;
        Linear cq, ck, cv, co;
        Norm ln_ffn;
        Linear ffn_in, ffn_out;
    };

    BiTConfig cfg_;
    std::vector<Layer> layers_;
    Norm ln_out_;
};

}  // namespace obrg
