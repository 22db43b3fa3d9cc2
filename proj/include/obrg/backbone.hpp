#pragma once

#include <string>
#include <vector>

#include "obrg/nn.hpp"
#include "obrg/ops.hpp"
#include "obrg/sequences.hpp"
#include "obrg/vocab.hpp"

namespace obrg {

struct BackboneConfig {
    int vocab = vocab_size();
    int d_emb = 64;
    int n_layers = 4;
    int n_heads = 4;
    int max_len = 128;
    int d_vis = 16;

    void validate() const {
        if (d_emb <= 0 || n_layers <= 0 || n_heads <= 0 || max_len <= 0 || d_vis <= 0 || vocab <= 0) {
            fail(ErrKind::config, "backbone: dimensions must be positive");
        }
        if (d_emb % n_heads != 0) fail(ErrKind::config, "backbone: d_emb must be divisible by n_heads");
    }
};

struct BackboneOutput {
    Tensor hidden;  // final-layer states [len x d_emb]
    Tensor logits;  // [len x vocab]
};

// Causal transformer over interleaved text/visual sequences. Pre-norm blocks,
// learned absolute positions, visual features entering through a single
// projection layer.
class Backbone {
public:
    void init(const BackboneConfig& cfg, Rng rng) {
        cfg.validate();
        cfg_ = cfg;
        tok_emb_ = Tensor::randn({cfg.vocab, cfg.d_emb}, rng, 0.02f, true);
        pos_emb_ = Tensor::randn({cfg.max_len, cfg.d_emb}, rng, 0.02f, true);
        vis_proj_.init(cfg.d_emb, cfg.d_vis, rng);
        layers_.resize(static_cast<size_t>(cfg.n_layers));
        for (auto& l : layers_) {
            l.ln1.init(cfg.d_emb);
            l.wq.init(cfg.d_emb, cfg.d_emb, rng);
            l.wk.init(cfg.d_emb, cfg.d_emb, rng);
            l.wv.init(cfg.d_emb, cfg.d_emb, rng);
            l.wo.init(cfg.d_emb, cfg.d_emb, rng);
            l.ln2.init(cfg.d_emb);
            l.mlp_in.init(4 * cfg.d_emb, cfg.d_emb, rng);
            l.mlp_out.init(cfg.d_emb, 4 * cfg.d_emb, rng);
        }
        ln_f_.init(cfg.d_emb);
        head_.init(cfg.vocab, cfg.d_emb, rng);
    }

    const BackboneConfig& config() const { return cfg_; }

    Tensor embed_sequence(const MultimodalSequence& seq) const {
        seq.validate(cfg_.vocab, cfg_.max_len);
        const int len = seq.length();
        Tensor x = gather_rows(tok_emb_, seq.token_ids);
        for (const auto& span : seq.visual_spans) {
            if (span.features.dim(1) != cfg_.d_vis) {
                fail(ErrKind::sequence, "sequence: visual feature width " + std::to_string(span.features.dim(1)) +
                                            " does not match d_vis");
            }
            x = overlay_rows(x, span.start, vis_proj_.forward(span.features));
        }
        Tensor pos = slice_rows(pos_emb_, 0, len);
        return add(x, pos);
    }

    BackboneOutput forward_causal(const Tensor& emb) const {
        const int len = emb.dim(0);
        if (len > cfg_.max_len) fail(ErrKind::sequence, "sequence: length exceeds max_len");
        Tensor x = emb;
        for (const auto& l : layers_) {
            Tensor h = l.ln1.forward(x);
            x = add(x, l.wo.forward(block_mha(l.wq.forward(h), l.wk.forward(h), l.wv.forward(h), cfg_.n_heads, {len},
                                              {len}, true)));
            Tensor m = l.ln2.forward(x);
            x = add(x, l.mlp_out.forward(gelu(l.mlp_in.forward(m))));
        }
        BackboneOutput out;
        out.hidden = ln_f_.forward(x);
        out.logits = head_.forward(out.hidden);
        return out;
    }

    BackboneOutput run(const MultimodalSequence& seq) const { return forward_causal(embed_sequence(seq)); }

    // Mean negative log-likelihood over predicted positions. With 0-based
    // positions and context length c, targets are tokens c..len-1 read from
    // logits rows c-1..len-2; everything earlier gets exactly zero gradient.
    Tensor autoregressive_loss(const Tensor& logits, const MultimodalSequence& seq) const {
        const int len = seq.length();
        if (logits.dim(0) != len) fail(ErrKind::shape, "ar_loss: logits rows do not match sequence length");
        if (seq.context_len < 1) fail(ErrKind::loss, "ar_loss: position 0 has no preceding context to predict from");
        if (seq.context_len >= len) fail(ErrKind::loss, "ar_loss: empty prediction window");
        std::vector<std::pair<int, int>> pairs;
        for (int p = seq.context_len; p < len; ++p) pairs.emplace_back(p - 1, seq.token_ids[static_cast<size_t>(p)]);
        return cross_entropy_rows(logits, pairs);
    }

    // Greedy continuation; ties break toward the lower token id. Appending
    // the result to the prefix reproduces the same hidden states, since each
    // step recomputes the full forward pass.
    std::vector<int> generate_tokens(const MultimodalSequence& prefix, int max_new) const {
        if (prefix.length() + max_new > cfg_.max_len) {
            fail(ErrKind::sequence, "generate: prefix plus max_new exceeds max_len");
        }
        if (!prefix.token_ids.empty() && prefix.token_ids.back() == tok::eos) return {};
        MultimodalSequence cur = prefix;
        std::vector<int> out;
        for (int step = 0; step < max_new; ++step) {
            const BackboneOutput o = run(cur);
            const int last = cur.length() - 1;
            const float* row = o.logits.data() + static_cast<size_t>(last) * cfg_.vocab;
            int best = 0;
            for (int j = 1; j < cfg_.vocab; ++j) {
                if (row[j] > row[best]) best = j;
            }
            out.push_back(best);
            cur.token_ids.push_back(best);
            if (best == tok::eos) break;
        }
        return out;
    }

    void register_params(ParamRegistry& reg, const std::string& prefix) {
        reg.add(prefix + ".tok_emb", &tok_emb_);
        reg.add(prefix + ".pos_emb", &pos_emb_);
        vis_proj_.register_params(reg, prefix + ".vis_proj");
        for (size_t i = 0; i < layers_.size(); ++i) {
            const std::string lp = prefix + ".layer" + std::to_string(i);
            auto& l = layers_[i];
            l.ln1.register_params(reg, lp + ".ln1");
            l.wq.register_params(reg, lp + ".attn.wq");
            l.wk.register_params(reg, lp + ".attn.wk");
            l.wv.register_params(reg, lp + ".attn.wv");
            l.wo.register_params(reg, lp + ".attn.wo");
            l.ln2.register_params(reg, lp + ".ln2");
            l.mlp_in.register_params(reg, lp + ".mlp.w1");
            l.mlp_out.register_params(reg, lp + ".mlp.w2");
        }
        ln_f_.register_params(reg, prefix + ".ln_f");
        head_.register_params(reg, prefix + ".head");
    }

    // Adapter plumbing: linear weights addressable by the same names used in
    // the registry, minus the trailing ".w".
    std::vector<std::pair<std::string, Linear*>> linear_weights(const std::string& prefix) {
        std::vector<std::pair<std::string, Linear*>> out;
        out.emplace_back(prefix + ".vis_proj", &vis_proj_);
        for (size_t i = 0; i < layers_.size(); ++i) {
            const std::string lp = prefix + ".layer" + std::to_string(i);
            auto& l = layers_[i];
            out.emplace_back(lp + ".attn.wq", &l.wq);
            out.emplace_back(lp + ".attn.wk", &l.wk);
            out.emplace_back(lp + ".attn.wv", &l.wv);
            out.emplace_back(lp + ".attn.wo", &l.wo);
            out.emplace_back(lp + ".mlp.w1", &l.mlp_in);
            out.emplace_back(lp + ".mlp.w2", &l.mlp_out);
        }
        out.emplace_back(prefix + ".head", &head_);
        return out;
    }

private:
    struct Layer {
        Norm ln1;
        Linear wq, wk, wv, wo;
        Norm ln2;
        Linear mlp_in, mlp_out;
    };

    BackboneConfig cfg_;
    Tensor tok_emb_;
    Tensor pos_emb_;
    Linear vis_proj_;
    std::vector<Layer> layers_;
    Norm ln_f_;
    Linear head_;
};

}  // namespace obrg
