#include "doctest.h"

#include <cmath>

#include "obrg/backbone.hpp"
#include "obrg/features.hpp"
#include "test_helpers.hpp"

using namespace obrg;

namespace {

BackboneConfig tiny_cfg() {
    BackboneConfig cfg;
    cfg.vocab = 8;
    cfg.d_emb = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.max_len = 16;
    cfg.d_vis = 4;
    return cfg;
}

MultimodalSequence tiny_seq(int len, int context, Rng& rng, int vocab = 8) {
    MultimodalSequence s;
    for (int i = 0; i < len; ++i) s.token_ids.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(vocab))));
    s.context_len = context;
    return s;
}

}  // namespace

TEST_CASE("embed_sequence lays out token and visual rows as documented") {
    BackboneConfig cfg = tiny_cfg();
    Backbone bb;
    Rng rng(1);
    bb.init(cfg, rng.split("bb"));

    MultimodalSequence s;
    s.token_ids = {1, 0, 0, 0, 5, 2};
    Tensor feats({3, 4});
    for (int i = 0; i < 12; ++i) feats.data()[i] = 0.1f * static_cast<float>(i);
    s.visual_spans.push_back({1, feats});
    s.context_len = 4;

    const Tensor emb = bb.embed_sequence(s);
    CHECK(emb.dim(0) == 6);
    CHECK(emb.dim(1) == 16);

    // A sequence without spans embeds tokens plus positions only.
    MultimodalSequence plain;
    plain.token_ids = {1, 5, 2};
    plain.context_len = 1;
    const Tensor pe = bb.embed_sequence(plain);
    CHECK(pe.dim(0) == 3);

    // Span overflow and overlap are rejected.
    MultimodalSequence overflow = s;
    overflow.visual_spans[0].start = 4;
    CHECK_THROWS_AS(bb.embed_sequence(overflow), Error);
    MultimodalSequence overlap = s;
    overlap.visual_spans.push_back({2, feats});
    try {
        bb.embed_sequence(overlap);
        FAIL("expected sequence error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrKind::sequence);
    }
}

TEST_CASE("zero visual features and zero projection bias embed to zero rows before positions") {
    BackboneConfig cfg = tiny_cfg();
    Backbone bb;
    Rng rng(2);
    bb.init(cfg, rng.split("bb"));

    MultimodalSequence s;
    s.token_ids = {1, 0, 0, 2};
    Tensor zero_feats({2, 4});
    s.visual_spans.push_back({1, zero_feats});
    s.context_len = 1;

    ParamRegistry reg;
    bb.register_params(reg, "backbone");
    Tensor* vis_b = reg.find("backbone.vis_proj.b");
    REQUIRE(vis_b != nullptr);
    *vis_b = Tensor(vis_b->shape(), true);  // zero bias
    Tensor* pos = reg.find("backbone.pos_emb");
    const Tensor emb = bb.embed_sequence(s);
    for (int i = 1; i <= 2; ++i)
        for (int j = 0; j < 16; ++j)
            CHECK(emb.data()[static_cast<size_t>(i) * 16 + j] ==
                  doctest::Approx(pos->data()[static_cast<size_t>(i) * 16 + j]));
}

TEST_CASE("forward is strictly causal under perturbation") {
    BackboneConfig cfg = tiny_cfg();
    Backbone bb;
    Rng rng(3);
    bb.init(cfg, rng.split("bb"));
    Rng data(4);
    MultimodalSequence s = tiny_seq(7, 2, data);

    const Tensor emb = bb.embed_sequence(s).detach();
    const BackboneOutput base = bb.forward_causal(emb);

    for (int j = 0; j < 7; ++j) {
        Tensor pert = emb.clone();
        for (int d = 0; d < 16; ++d) pert.data()[static_cast<size_t>(j) * 16 + d] += 0.37f;
        const BackboneOutput out = bb.forward_causal(pert);
        for (int i = 0; i < j; ++i)
            for (int v = 0; v < 8; ++v)
                CHECK(out.logits.data()[static_cast<size_t>(i) * 8 + v] ==
                      base.logits.data()[static_cast<size_t>(i) * 8 + v]);
        bool changed = false;
        for (int v = 0; v < 8; ++v)
            changed = changed || out.logits.data()[static_cast<size_t>(j) * 8 + v] !=
                                     base.logits.data()[static_cast<size_t>(j) * 8 + v];
        CHECK(changed);
    }
}

TEST_CASE("forward is strictly causal in gradients") {
    BackboneConfig cfg = tiny_cfg();
    Backbone bb;
    Rng rng(5);
    bb.init(cfg, rng.split("bb"));
    Rng data(6);
    MultimodalSequence s = tiny_seq(6, 1, data);

    for (int probe_row = 0; probe_row < 6; probe_row += 2) {
        Tensor emb = Tensor(bb.embed_sequence(s).shape(), bb.embed_sequence(s).values(), true);
        Tensor logits = bb.forward_causal(emb).logits;
        Tensor probe = sum(slice_rows(logits, probe_row, 1));
        probe.backward();
        for (int j = 0; j < 6; ++j) {
            double row_abs = 0.0;
            for (int d = 0; d < 16; ++d) row_abs += std::abs(emb.grad()[static_cast<size_t>(j) * 16 + d]);
            if (j > probe_row) {
                CHECK(row_abs == 0.0);
            } else {
                CHECK(row_abs > 0.0);
            }
        }
    }
}

TEST_CASE("single-token sequence forward is well formed and reproducible") {
    BackboneConfig cfg = tiny_cfg();
    Backbone bb;
    Rng rng(8);
    bb.init(cfg, rng.split("bb"));
    MultimodalSequence s;
    s.token_ids = {3};
    s.context_len = 0;
    const BackboneOutput a = bb.run(s);
    const BackboneOutput b = bb.run(s);
    CHECK(a.logits.dim(0) == 1);
    for (size_t i = 0; i < a.logits.numel(); ++i) CHECK(a.logits.data()[i] == b.logits.data()[i]);
}

TEST_CASE("autoregressive loss on uniform logits equals log vocab") {
    BackboneConfig cfg = tiny_cfg();
    cfg.vocab = 4;
    Backbone bb;
    Rng rng(9);
    bb.init(cfg, rng.split("bb"));
    MultimodalSequence s;
    s.token_ids = {1, 3, 2, 0, 1};
    s.context_len = 2;
    Tensor logits({5, 4});  // all zeros -> uniform
    const Tensor loss = bb.autoregressive_loss(logits, s);
    CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
}

TEST_CASE("autoregressive loss saturates with a +20 target margin") {
    BackboneConfig cfg = tiny_cfg();
    Backbone bb;
    Rng rng(10);
    bb.init(cfg, rng.split("bb"));
    MultimodalSequence s;
    s.token_ids = {1, 3, 2, 0, 1, 2};
    s.context_len = 2;
    Tensor logits({6, 8});
    for (int p = s.context_len; p < 6; ++p) {
        logits.data()[static_cast<size_t>(p - 1) * 8 + s.token_ids[static_cast<size_t>(p)]] = 20.0f;
    }
    CHECK(bb.autoregressive_loss(logits, s).item() < 1e-6);
}

TEST_CASE("context positions receive exactly zero loss gradient") {
    BackboneConfig cfg = tiny_cfg();
    Backbone bb;
    Rng rng(11);
    bb.init(cfg, rng.split("bb"));
    Rng data(12);
    MultimodalSequence s = tiny_seq(8, 4, data);

    Tensor logits = Tensor::randn({8, 8}, data, 1.0f, true);
    Tensor loss = bb.autoregressive_loss(logits, s);
    loss.backward();
    // rows used are context_len-1 .. len-2; everything else must be zero
    for (int r = 0; r < 8; ++r) {
        double row_abs = 0.0;
        for (int v = 0; v < 8; ++v) row_abs += std::abs(logits.grad()[static_cast<size_t>(r) * 8 + v]);
        if (r < s.context_len - 1 || r == 7) {
            CHECK(row_abs == 0.0);
        } else {
            CHECK(row_abs > 0.0);
        }
    }
}

TEST_CASE("autoregressive loss rejects windows it cannot predict") {
    BackboneConfig cfg = tiny_cfg();
    Backbone bb;
    Rng rng(13);
    bb.init(cfg, rng.split("bb"));
    MultimodalSequence s;
    s.token_ids = {1, 2, 3};
    Tensor logits({3, 8});
    s.context_len = 0;  // nothing precedes position 0
    try {
        bb.autoregressive_loss(logits, s);
        FAIL("expected loss error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrKind::loss);
    }
    s.context_len = 2;
    CHECK_NOTHROW(bb.autoregressive_loss(logits, s));
}

TEST_CASE("full autoregressive loss gradient matches finite differences") {
    BackboneConfig cfg = tiny_cfg();
    Backbone bb;
    Rng rng(14);
    bb.init(cfg, rng.split("bb"));
    Rng data(15);
    MultimodalSequence s = tiny_seq(8, 3, data);
    Tensor vis({2, 4});
    for (size_t i = 0; i < vis.numel(); ++i) vis.data()[i] = static_cast<float>(data.normal()) * 0.5f;
    s.visual_spans.push_back({1, vis});

    ParamRegistry reg;
    bb.register_params(reg, "backbone");
    // Conditioned operating point: sigma=0.02 embeddings leave near-constant
    // rows whose layer-norm curvature dominates the finite-difference error.
    for (const char* emb : {"backbone.tok_emb", "backbone.pos_emb"}) {
        for (auto& v : reg.find(emb)->values()) v *= 10.0f;
    }
    auto loss_fn = [&] { return bb.autoregressive_loss(bb.run(s).logits, s); };

    // Full-depth composites use a 2.5e-3 step: at 1e-3 the float32 forward's
    // rounding noise crosses the 1e-4 absolute tolerance.
    for (const char* name : {"backbone.tok_emb", "backbone.layer0.attn.wq.w", "backbone.layer1.mlp.w1.w",
                             "backbone.vis_proj.w", "backbone.ln_f.g", "backbone.head.w"}) {
        Tensor* p = reg.find(name);
        REQUIRE(p != nullptr);
        const auto r = testing::check_param_gradient(p, loss_fn, 2.5e-3f);
        INFO("param ", std::string(name), " max_abs_err ", r.max_abs_err, " max_rel_err ", r.max_rel_err);
        CHECK(r.ok);
    }
}

TEST_CASE("greedy generation is deterministic, stops at eos, and is prefix-consistent") {
    BackboneConfig cfg;  // full vocabulary so eos semantics apply
    cfg.d_emb = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.max_len = 32;
    cfg.d_vis = 16;
    Backbone bb;
    Rng rng(16);
    bb.init(cfg, rng.split("bb"));

    Featurizer f(0);
    Scene sc;
    sc.objects.push_back({ObjShape::circle, ObjColor::red, 4});
    canonicalize(sc);
    MultimodalSequence prefix;
    prefix.token_ids = {tok::bos};
    for (int i = 0; i < kVisPatches; ++i) prefix.token_ids.push_back(tok::pad);
    prefix.visual_spans.push_back({1, f.scene_features(sc)});
    prefix.context_len = prefix.length() - 1;

    const auto out1 = bb.generate_tokens(prefix, 12);
    const auto out2 = bb.generate_tokens(prefix, 12);
    CHECK(out1 == out2);
    CHECK(out1.size() <= 12);

    // a prefix already ending in eos generates nothing
    MultimodalSequence done;
    done.token_ids = {tok::bos, tok::eos};
    done.context_len = 1;
    CHECK(bb.generate_tokens(done, 5).empty());

    // prefix length + max_new must fit
    CHECK_THROWS_AS(bb.generate_tokens(prefix, 100), Error);
}

TEST_CASE("low-rank adapters are neutral at init and merge exactly") {
    Rng rng(17);
    Linear lin;
    lin.init(6, 5, rng, 0.3f);
    Tensor x = Tensor::randn({3, 5}, rng, 1.0f);
    const Tensor base = lin.forward(x);

    Rng arng(18);
    lin.attach_adapter(2, 0.5f, arng);
    const Tensor adapted0 = lin.forward(x);
    for (size_t i = 0; i < base.numel(); ++i) CHECK(adapted0.data()[i] == base.data()[i]);
    CHECK_FALSE(lin.w.requires_grad());

    // give the adapter some signal, then merge and compare
    Rng brng(19);
    for (auto& v : lin.lora.a.values()) v = static_cast<float>(brng.normal()) * 0.2f;
    for (auto& v : lin.lora.b.values()) v = static_cast<float>(brng.normal()) * 0.2f;
    const Tensor adapted = lin.forward(x);
    lin.merge_adapter();
    CHECK_FALSE(lin.lora.active);
    CHECK(lin.w.requires_grad());
    const Tensor merged = lin.forward(x);
    for (size_t i = 0; i < merged.numel(); ++i) CHECK(std::abs(merged.data()[i] - adapted.data()[i]) < 1e-6f);
}

TEST_CASE("adapter trainable parameter count matches 2 r d on a square weight") {
    Rng rng(20);
    Linear lin;
    lin.init(64, 64, rng);
    Rng arng(21);
    lin.attach_adapter(4, 1.0f, arng);
    CHECK(lin.lora.a.numel() + lin.lora.b.numel() == 512);
}
