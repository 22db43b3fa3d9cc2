#include "doctest.h"

#include <cmath>

#include "obrg/bitransformer.hpp"
#include "obrg/gradcheck.hpp"
#include "obrg/ops.hpp"
#include "obrg/rng.hpp"

using namespace obrg;

namespace {

Tensor rand_t(Shape s, Rng& rng, bool rg = false, float scale_v = 1.0f) {
    Tensor t(std::move(s), rg);
    for (auto& v : t.values()) v = static_cast<float>(rng.normal()) * scale_v;
    return t;
}

}  // namespace

TEST_CASE("attention with a single key returns its value row") {
    Tensor q({1, 1}, {1.0f});
    Tensor k({1, 1}, {1.0f});
    Tensor v({1, 1}, {7.0f});
    Tensor out = scaled_dot_product_attention(q, k, v);
    CHECK(out.data()[0] == doctest::Approx(7.0f));
}

TEST_CASE("attention over identical key rows averages identical value rows exactly") {
    Tensor q({1, 2}, {0.3f, -1.2f});
    Tensor k({3, 2}, {0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f});
    Tensor v({3, 2}, {2.0f, -1.0f, 2.0f, -1.0f, 2.0f, -1.0f});
    Tensor out = scaled_dot_product_attention(q, k, v);
    CHECK(out.data()[0] == doctest::Approx(2.0f));
    CHECK(out.data()[1] == doctest::Approx(-1.0f));
}

TEST_CASE("attention two-key case matches the hand softmax oracle") {
    // weights = softmax([1/sqrt(2), 0]) = [0.669757, 0.330243]
    Tensor q({1, 2}, {1.0f, 0.0f});
    Tensor k({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
    Tensor v({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
    Tensor out = scaled_dot_product_attention(q, k, v);
    CHECK(out.data()[0] == doctest::Approx(0.6698).epsilon(1e-3));
    CHECK(out.data()[1] == doctest::Approx(0.3302).epsilon(1e-3));
}

TEST_CASE("attention rejects malformed inputs") {
    Tensor q({1, 2}, {1.0f, 0.0f});
    Tensor k({2, 3}, {1, 0, 0, 0, 1, 0});
    Tensor v({2, 2}, {1, 0, 0, 1});
    CHECK_THROWS_WITH_AS(scaled_dot_product_attention(q, k, v, std::nullopt), doctest::Contains("width"), Error);

    Tensor k2({2, 2}, {1, 0, 0, 1});
    const float ninf = -std::numeric_limits<float>::infinity();
    Tensor blocked({1, 2}, {ninf, ninf});
    try {
        scaled_dot_product_attention(q, k2, v, blocked);
        FAIL("expected mask error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrKind::mask);
    }
    Tensor bad_mask({1, 2}, {0.0f, 0.5f});
    CHECK_THROWS_AS(scaled_dot_product_attention(q, k2, v, bad_mask), Error);
}

TEST_CASE("masked attention ignores blocked positions") {
    Rng rng(3);
    Tensor q = rand_t({2, 4}, rng);
    Tensor k = rand_t({3, 4}, rng);
    Tensor v = rand_t({3, 4}, rng);
    const float ninf = -std::numeric_limits<float>::infinity();
    Tensor m({2, 3}, {0, ninf, ninf, 0, 0, ninf});
    Tensor out = scaled_dot_product_attention(q, k, v, m);
    // row 0 sees only key 0, so it must equal v row 0 exactly
    for (int j = 0; j < 4; ++j) CHECK(out.data()[j] == doctest::Approx(v.data()[j]));
}

TEST_CASE("attention output stays in the per-coordinate hull of value rows") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor q = rand_t({3, 4}, rng);
        Tensor k = rand_t({5, 4}, rng);
        Tensor v = rand_t({5, 4}, rng);
        Tensor out = scaled_dot_product_attention(q, k, v);
        for (int j = 0; j < 4; ++j) {
            float lo = v.data()[j], hi = v.data()[j];
            for (int i = 1; i < 5; ++i) {
                lo = std::min(lo, v.data()[static_cast<size_t>(i) * 4 + j]);
                hi = std::max(hi, v.data()[static_cast<size_t>(i) * 4 + j]);
            }
            for (int i = 0; i < 3; ++i) {
                const float y = out.data()[static_cast<size_t>(i) * 4 + j];
                CHECK(y >= lo - 1e-5f);
                CHECK(y <= hi + 1e-5f);
            }
        }
    }
}

TEST_CASE("softmax rows: uniform, shift invariance, and the 1-2-3 oracle") {
    Tensor a({1, 2}, {0.0f, 0.0f});
    Tensor sa = softmax_rows(a);
    CHECK(sa.data()[0] == doctest::Approx(0.5));
    CHECK(sa.data()[1] == doctest::Approx(0.5));

    Tensor b({1, 3}, {4.2f, 4.2f, 4.2f});
    Tensor sb = softmax_rows(b);
    for (int j = 0; j < 3; ++j) CHECK(sb.data()[j] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));

    Tensor c({1, 3}, {1.0f, 2.0f, 3.0f});
    Tensor sc = softmax_rows(c);
    CHECK(std::abs(sc.data()[0] - 0.09003057) < 1e-5);
    CHECK(std::abs(sc.data()[1] - 0.24472847) < 1e-5);
    CHECK(std::abs(sc.data()[2] - 0.66524096) < 1e-5);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
    Rng rng(17);
    for (int trial = 0; trial < 25; ++trial) {
        Tensor x = rand_t({4, 6}, rng, false, 3.0f);
        Tensor y = softmax_rows(x);
        Tensor shifted = x.clone();
        const float c = static_cast<float>(rng.normal()) * 10.0f;
        for (int j = 0; j < 6; ++j) shifted.data()[j] += c;  // shift row 0 only
        Tensor y2 = softmax_rows(shifted);
        for (int i = 0; i < 4; ++i) {
            double s = 0.0;
            for (int j = 0; j < 6; ++j) s += y.data()[static_cast<size_t>(i) * 6 + j];
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
        for (int j = 0; j < 6; ++j) CHECK(std::abs(y2.data()[j] - y.data()[j]) < 1e-6);
    }
}

TEST_CASE("softmax rejects non-finite input") {
    Tensor x({1, 2}, {std::nanf(""), 0.0f});
    try {
        softmax_rows(x);
        FAIL("expected numeric error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrKind::numeric);
    }
}

TEST_CASE("layer norm handles constant rows, preserves normalized rows, and matches the oracle") {
    Tensor g1({3}, {1, 1, 1});
    Tensor b0({3}, {0, 0, 0});
    Tensor c({1, 3}, {5.0f, 5.0f, 5.0f});
    Tensor yc = layer_norm(c, g1, b0);
    for (int j = 0; j < 3; ++j) CHECK(yc.data()[j] == doctest::Approx(0.0f));

    Tensor g2({2}, {1, 1});
    Tensor b2({2}, {0, 0});
    Tensor x2({1, 2}, {1.0f, -1.0f});
    Tensor y2 = layer_norm(x2, g2, b2, 1e-12f);
    CHECK(y2.data()[0] == doctest::Approx(1.0f).epsilon(1e-4));
    CHECK(y2.data()[1] == doctest::Approx(-1.0f).epsilon(1e-4));

    Tensor x3({1, 3}, {1.0f, 2.0f, 3.0f});
    Tensor y3 = layer_norm(x3, g1, b0, 1e-12f);
    CHECK(std::abs(y3.data()[0] + 1.22474) < 1e-4);
    CHECK(std::abs(y3.data()[1]) < 1e-4);
    CHECK(std::abs(y3.data()[2] - 1.22474) < 1e-4);
}

TEST_CASE("layer norm output has zero mean unit variance for D >= 8") {
    Rng rng(23);
    Tensor x = rand_t({4, 16}, rng, false, 2.5f);
    Tensor g({16}, std::vector<float>(16, 1.0f));
    Tensor b({16}, std::vector<float>(16, 0.0f));
    Tensor y = layer_norm(x, g, b);
    for (int i = 0; i < 4; ++i) {
        double m = 0.0, v = 0.0;
        for (int j = 0; j < 16; ++j) m += y.data()[static_cast<size_t>(i) * 16 + j];
        m /= 16;
        for (int j = 0; j < 16; ++j) {
            const double d = y.data()[static_cast<size_t>(i) * 16 + j] - m;
            v += d * d;
        }
        v /= 16;
        CHECK(std::abs(m) < 1e-4);
        CHECK(std::abs(v - 1.0) < 1e-4);
    }
}

TEST_CASE("finite differences recover simple closed forms") {
    Tensor x = Tensor::scalar(3.0f);
    Tensor g = finite_difference_gradient(
        [](const Tensor& t) { return static_cast<double>(t.data()[0]) * t.data()[0]; }, x);
    CHECK(std::abs(g.data()[0] - 6.0) < 1e-6);

    Rng rng(2);
    Tensor y = rand_t({5}, rng);
    Tensor gs = finite_difference_gradient(
        [](const Tensor& t) {
            double s = 0.0;
            for (size_t i = 0; i < t.numel(); ++i) s += t.data()[i];
            return s;
        },
        y);
    for (size_t i = 0; i < 5; ++i) CHECK(std::abs(gs.data()[i] - 1.0) < 1e-6);
}

TEST_CASE("reverse mode matches finite differences across the kernel set") {
    Rng rng(31);

    SUBCASE("matmul") {
        Tensor a = rand_t({3, 4}, rng, false, 0.4f);
        Tensor b = rand_t({4, 5}, rng, false, 0.4f);
        auto r = gradient_check([&](const Tensor& t) { return mean(mul(matmul(t, b), matmul(t, b))); }, a);
        CHECK(r.ok);
        auto r2 = gradient_check([&](const Tensor& t) { return mean(mul(matmul(a, t), matmul(a, t))); }, b);
        CHECK(r2.ok);
    }

    SUBCASE("linear with bias") {
        Tensor x = rand_t({3, 4}, rng, false, 0.5f);
        Tensor w = rand_t({6, 4}, rng, false, 0.5f);
        Tensor bias = rand_t({6}, rng, false, 0.5f);
        auto rw = gradient_check([&](const Tensor& t) { return mean(gelu(linear(x, t, &bias))); }, w);
        CHECK(rw.ok);
        auto rb = gradient_check([&](const Tensor& t) { return mean(gelu(linear(x, w, &t))); }, bias);
        CHECK(rb.ok);
        auto rx = gradient_check([&](const Tensor& t) { return mean(gelu(linear(t, w, &bias))); }, x);
        CHECK(rx.ok);
    }

    SUBCASE("softmax rows") {
        Tensor x = rand_t({3, 5}, rng);
        Tensor probe = rand_t({3, 5}, rng);
        auto r = gradient_check([&](const Tensor& t) { return sum(mul(softmax_rows(t), probe)); }, x);
        CHECK(r.ok);
    }

    SUBCASE("layer norm") {
        Tensor x = rand_t({2, 8}, rng);
        Tensor g = rand_t({8}, rng, false, 0.5f);
        Tensor b = rand_t({8}, rng, false, 0.5f);
        Tensor probe = rand_t({2, 8}, rng);
        auto rx = gradient_check([&](const Tensor& t) { return sum(mul(layer_norm(t, g, b), probe)); }, x);
        CHECK(rx.ok);
        auto rg = gradient_check([&](const Tensor& t) { return sum(mul(layer_norm(x, t, b), probe)); }, g);
        CHECK(rg.ok);
    }

    SUBCASE("attention wrt q, k, v") {
        Tensor q = rand_t({3, 4}, rng, false, 0.6f);
        Tensor k = rand_t({5, 4}, rng, false, 0.6f);
        Tensor v = rand_t({5, 4}, rng, false, 0.6f);
        Tensor probe = rand_t({3, 4}, rng, false, 0.6f);
        auto score = [&](const Tensor& o) { return mean(mul(o, probe)); };
        CHECK(gradient_check([&](const Tensor& t) { return score(scaled_dot_product_attention(t, k, v)); }, q).ok);
        CHECK(gradient_check([&](const Tensor& t) { return score(scaled_dot_product_attention(q, t, v)); }, k).ok);
        CHECK(gradient_check([&](const Tensor& t) { return score(scaled_dot_product_attention(q, k, t)); }, v).ok);
    }

    SUBCASE("structural ops") {
        Tensor x = rand_t({4, 6}, rng, false, 0.5f);
        Tensor probe = rand_t({4, 3}, rng, false, 0.5f);
        auto r = gradient_check([&](const Tensor& t) { return mean(mul(slice_cols(t, 2, 3), probe)); }, x);
        CHECK(r.ok);
        Tensor rows = rand_t({2, 6}, rng, false, 0.5f);
        auto r2 = gradient_check(
            [&](const Tensor& t) { return mean(mul(overlay_rows(t, 1, rows), overlay_rows(t, 1, rows))); }, x);
        CHECK(r2.ok);
        auto r3 = gradient_check(
            [&](const Tensor& t) { return mean(mul(overlay_rows(x, 1, t), overlay_rows(x, 1, t))); }, rows);
        CHECK(r3.ok);
    }

    SUBCASE("pool, normalize, sigmoid, mse, cross entropy") {
        Tensor tokens = rand_t({4, 5}, rng);
        Tensor probe = rand_t({5}, rng);
        CHECK(gradient_check([&](const Tensor& t) { return sum(attention_pool(t, probe)); }, tokens).ok);
        CHECK(gradient_check([&](const Tensor& t) { return sum(attention_pool(tokens, t)); }, probe).ok);

        Tensor v = rand_t({6}, rng);
        Tensor pv = rand_t({6}, rng);
        CHECK(gradient_check([&](const Tensor& t) { return sum(mul(l2_normalize(t), pv)); }, v).ok);

        Tensor s = Tensor::scalar(0.3f);
        CHECK(gradient_check([&](const Tensor& t) { return sum(mul_scalar_t(tokens, sigmoid_t(t))); }, s).ok);

        Tensor a = rand_t({7}, rng);
        Tensor b = rand_t({7}, rng);
        CHECK(gradient_check([&](const Tensor& t) { return mse(t, b); }, a).ok);

        Tensor logits = rand_t({4, 6}, rng);
        std::vector<std::pair<int, int>> pairs = {{0, 2}, {1, 5}, {3, 0}};
        CHECK(gradient_check([&](const Tensor& t) { return cross_entropy_rows(t, pairs); }, logits).ok);
    }
}

TEST_CASE("gather and embedding-style scatter gradients") {
    Rng rng(7);
    Tensor table = rand_t({6, 3}, rng);
    std::vector<int> ids = {1, 4, 1};
    auto r = gradient_check([&](const Tensor& t) { return sum(mul(gather_rows(t, ids), gather_rows(t, ids))); }, table);
    CHECK(r.ok);
    CHECK_THROWS_AS(gather_rows(table, {9}), Error);
}

TEST_CASE("l2 normalize rejects degenerate vectors") {
    Tensor z({3}, {0.0f, 0.0f, 0.0f});
    try {
        l2_normalize(z);
        FAIL("expected numeric error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrKind::numeric);
    }
}

TEST_CASE("cross entropy refuses an empty prediction window") {
    Tensor logits({2, 3}, {0, 0, 0, 0, 0, 0});
    try {
        cross_entropy_rows(logits, {});
        FAIL("expected loss error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrKind::loss);
    }
}

TEST_CASE("block attention matches composed per-sample attention exactly") {
    Rng rng(71);
    const std::vector<int> q_sizes = {3, 2, 4};
    const std::vector<int> kv_sizes = {5, 2, 3};
    const int d = 8, heads = 2, dh = d / heads;
    int tq = 0, tk = 0;
    for (int s : q_sizes) tq += s;
    for (int s : kv_sizes) tk += s;
    Tensor q = rand_t({tq, d}, rng, false, 0.7f);
    Tensor k = rand_t({tk, d}, rng, false, 0.7f);
    Tensor v = rand_t({tk, d}, rng, false, 0.7f);

    for (bool causal : {false, true}) {
        const Tensor fused = block_mha(q, k, v, heads, q_sizes, kv_sizes, causal);
        int q0 = 0, k0 = 0;
        for (size_t b = 0; b < q_sizes.size(); ++b) {
            std::optional<Tensor> mask;
            if (causal) {
                mask = Tensor({q_sizes[b], kv_sizes[b]});
                const float ninf = -std::numeric_limits<float>::infinity();
                for (int i = 0; i < q_sizes[b]; ++i)
                    for (int j = i + 1; j < kv_sizes[b]; ++j)
                        mask->data()[static_cast<size_t>(i) * kv_sizes[b] + j] = ninf;
            }
            std::vector<Tensor> head_outs;
            for (int h = 0; h < heads; ++h) {
                head_outs.push_back(scaled_dot_product_attention(
                    slice_cols(slice_rows(q, q0, q_sizes[b]), h * dh, dh),
                    slice_cols(slice_rows(k, k0, kv_sizes[b]), h * dh, dh),
                    slice_cols(slice_rows(v, k0, kv_sizes[b]), h * dh, dh), mask));
            }
            const Tensor ref = concat_cols(head_outs);
            for (int i = 0; i < q_sizes[b]; ++i)
                for (int c = 0; c < d; ++c)
                    CHECK(fused.data()[static_cast<size_t>(q0 + i) * d + c] ==
                          doctest::Approx(ref.data()[static_cast<size_t>(i) * d + c]).epsilon(1e-6));
            q0 += q_sizes[b];
            k0 += kv_sizes[b];
        }
    }
}

TEST_CASE("block attention gradients match finite differences") {
    Rng rng(72);
    const std::vector<int> q_sizes = {2, 3};
    const std::vector<int> kv_sizes = {4, 2};
    Tensor q = rand_t({5, 4}, rng, false, 0.6f);
    Tensor k = rand_t({6, 4}, rng, false, 0.6f);
    Tensor v = rand_t({6, 4}, rng, false, 0.6f);
    Tensor probe = rand_t({5, 4}, rng, false, 0.6f);
    auto score = [&](const Tensor& o) { return mean(mul(o, probe)); };
    CHECK(gradient_check([&](const Tensor& t) { return score(block_mha(t, k, v, 2, q_sizes, kv_sizes)); }, q).ok);
    CHECK(gradient_check([&](const Tensor& t) { return score(block_mha(q, t, v, 2, q_sizes, kv_sizes)); }, k).ok);
    CHECK(gradient_check([&](const Tensor& t) { return score(block_mha(q, k, t, 2, q_sizes, kv_sizes)); }, v).ok);
    CHECK(gradient_check([&](const Tensor& t) { return score(block_mha(t, k, v, 2, q_sizes, kv_sizes, true)); }, q).ok);
}

TEST_CASE("batched bit_forward equals stacked per-sample forwards") {
    BiTConfig cfg;
    cfg.n_layers = 2;
    cfg.d_bit = 8;
    cfg.n_heads = 2;
    cfg.cross_attn_layers = {0};
    cfg.n_q_img = 3;
    cfg.n_q_text = 3;
    cfg.n_q_gen = 3;
    BiTransformer bit;
    Rng rng(73);
    bit.init(cfg, rng.split("bit"));
    Tensor queries = Tensor::randn({3, 8}, rng, 0.5f);
    std::vector<Tensor> kvs;
    std::vector<int> kv_sizes;
    for (int n : {4, 6, 5}) {
        kvs.push_back(Tensor::randn({n, 8}, rng, 0.5f));
        kv_sizes.push_back(n);
    }
    const Tensor batched =
        bit.forward_batched(tile_rows(queries, 3), {3, 3, 3}, concat_rows(kvs), kv_sizes);
    int row = 0;
    for (const auto& kv : kvs) {
        const Tensor single = bit.forward(queries, kv);
        for (size_t i = 0; i < single.numel(); ++i) {
            CHECK(batched.data()[static_cast<size_t>(row) * 8 + i] == doctest::Approx(single.data()[i]).epsilon(1e-6));
        }
        row += 3;
    }
}
