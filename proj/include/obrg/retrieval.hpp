#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "obrg/bitransformer.hpp"
#include "obrg/nn.hpp"
#include "obrg/ops.hpp"

namespace obrg {

enum class Modality { img, text };

// Dual-path head: sigmoid-weighted blend of the query-transformer embedding
// and a pooled backbone embedding, per modality, plus a log-temperature for
// the contrastive loss.
struct FusionHead {
    Tensor alpha_img;   // scalar
    Tensor alpha_text;  // scalar
    Tensor log_tau;     // scalar, kept in [ln 0.01, ln 1.0]
    Tensor pool_bit_img, pool_bit_text;  // probes over query-transformer outputs
    Tensor pool_llm_img, pool_llm_text;  // probes over downsampled hidden states

    static constexpr float kTauMin = 0.01f;
    static constexpr float kTauMax = 1.0f;

    void init(int d_bit, Rng rng, float tau_init = 0.07f) {
        alpha_img = Tensor::scalar(0.0f, true);
        alpha_text = Tensor::scalar(0.0f, true);
        log_tau = Tensor::scalar(std::log(tau_init), true);
        pool_bit_img = Tensor::randn({d_bit}, rng, 0.02f, true);
        pool_bit_text = Tensor::randn({d_bit}, rng, 0.02f, true);
        pool_llm_img = Tensor::randn({d_bit}, rng, 0.02f, true);
        pool_llm_text = Tensor::randn({d_bit}, rng, 0.02f, true);
    }

    Tensor tau() const { return exp_t(log_tau); }

    // Projection applied after each optimizer step.
    void clamp_tau() {
        const float lo = std::log(kTauMin), hi = std::log(kTauMax);
        float& v = log_tau.values()[0];
        v = std::min(std::max(v, lo), hi);
    }

    void register_params(ParamRegistry& reg, const std::string& prefix) {
        reg.add(prefix + ".alpha_img", &alpha_img);
        reg.add(prefix + ".alpha_text", &alpha_text);
        reg.add(prefix + ".log_tau", &log_tau);
        reg.add(prefix + ".pool_bit_img", &pool_bit_img);
        reg.add(prefix + ".pool_bit_text", &pool_bit_text);
        reg.add(prefix + ".pool_llm_img", &pool_llm_img);
        reg.add(prefix + ".pool_llm_text", &pool_llm_text);
    }
};

struct PathEmbeddings {
    Tensor bit;  // query-transformer path, [d_bit]
    Tensor llm;  // direct backbone path, [d_bit]
};

// Both retrieval paths for one modality, from final-layer backbone hidden
// states. The direct path never touches the query bank.
inline PathEmbeddings encode_paths(Modality m, const Tensor& hidden, const BiTransformer& bit,
                                   const DownProjection& down, const QueryBank& queries, const FusionHead& head) {
    if (hidden.rank() != 2 || hidden.dim(0) < 1) fail(ErrKind::shape, "encode: empty hidden states");
    const Tensor ds = down.forward(hidden);
    PathEmbeddings out;
    const Tensor q = m == Modality::img ? queries.img() : queries.text();
    out.bit = attention_pool(bit.forward(q, ds), m == Modality::img ? head.pool_bit_img : head.pool_bit_text);
    out.llm = attention_pool(ds, m == Modality::img ? head.pool_llm_img : head.pool_llm_text);
    return out;
}

// e = sigma(alpha) * e_bit + (1 - sigma(alpha)) * e_llm, then L2 normalized.
inline Tensor fuse(const Tensor& e_bit, const Tensor& e_llm, const Tensor& alpha) {
    check_same_shape(e_bit, e_llm, "fuse");
    const Tensor w = sigmoid_t(alpha);
    const Tensor one_minus = sub(Tensor::scalar(1.0f), w);
    return l2_normalize(add(mul_scalar_t(e_bit, w), mul_scalar_t(e_llm, one_minus)));
}

inline Tensor encode_fused(Modality m, const Tensor& hidden, const BiTransformer& bit, const DownProjection& down,
                           const QueryBank& queries, const FusionHead& head) {
    const PathEmbeddings p = encode_paths(m, hidden, bit, down, queries, head);
    return fuse(p.bit, p.llm, m == Modality::img ? head.alpha_img : head.alpha_text);
}

// Symmetric in-batch InfoNCE over unit-norm rows; diagonal pairs are the
// positives.
inline Tensor info_nce_loss(const Tensor& e_img, const Tensor& e_text, const Tensor& tau) {
    check_matrix(e_img, "info_nce");
    check_matrix(e_text, "info_nce");
    check_same_shape(e_img, e_text, "info_nce");
    const int n = e_img.dim(0);
    if (n == 0) fail(ErrKind::loss, "info_nce: empty batch");
    Tensor sims = matmul(e_img, transpose(e_text));
    Tensor inv_tau = detail::make_op_output({1}, {tau}, [](Tensor& o) {
        auto& pt = o.node()->parents[0];
        if (!pt.requires_grad()) return;
        const float t = pt.data()[0];
        pt.grad()[0] += o.grad()[0] * (-1.0f / (t * t));
    });
    inv_tau.data()[0] = 1.0f / tau.data()[0];
    Tensor scaled = mul_scalar_t(sims, inv_tau);
    std::vector<std::pair<int, int>> diag;
    for (int i = 0; i < n; ++i) diag.emplace_back(i, i);
    Tensor row_loss = cross_entropy_rows(scaled, diag);
    Tensor col_loss = cross_entropy_rows(transpose(scaled), diag);
    return scale(add(row_loss, col_loss), 0.5f);
}

// ---- recall ------------------------------------------------------------------

// Fraction of queries whose true gallery item ranks in the top k by cosine
// similarity. Similarities accumulate in double; rank ties break toward the
// lower gallery index, which makes recall invariant under positive rescaling.
inline double recall_at_k(const std::vector<std::vector<float>>& queries,
                          const std::vector<std::vector<float>>& gallery, const std::vector<int>& truth, int k) {
    const size_t m = queries.size();
    if (truth.size() != m) fail(ErrKind::shape, "recall: truth size mismatch");
    if (k < 1 || static_cast<size_t>(k) > gallery.size()) fail(ErrKind::shape, "recall: k out of range");
    for (int t : truth) {
        if (t < 0 || static_cast<size_t>(t) >= gallery.size()) fail(ErrKind::shape, "recall: truth index out of range");
    }
    size_t hits = 0;
    for (size_t qi = 0; qi < m; ++qi) {
        const auto& q = queries[qi];
        std::vector<double> sims(gallery.size());
        for (size_t g = 0; g < gallery.size(); ++g) {
            double acc = 0.0;
            for (size_t d = 0; d < q.size(); ++d) acc += static_cast<double>(q[d]) * gallery[g][d];
            sims[g] = acc;
        }
        const double true_sim = sims[static_cast<size_t>(truth[qi])];
        // rank = gallery items strictly better, plus earlier-index ties
        int rank = 0;
        for (size_t g = 0; g < gallery.size(); ++g) {
            if (g == static_cast<size_t>(truth[qi])) continue;
            if (sims[g] > true_sim || (sims[g] == true_sim && g < static_cast<size_t>(truth[qi]))) ++rank;
        }
        if (rank < k) ++hits;
    }
    return m == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(m);
}

struct RetrievalReport {
    double i2t_r1 = 0, i2t_r5 = 0, i2t_r10 = 0;
    double t2i_r1 = 0, t2i_r5 = 0, t2i_r10 = 0;
    double t2t_r1 = 0, t2t_r5 = 0, t2t_r10 = 0;
    int n = 0;
};

}  // namespace obrg
