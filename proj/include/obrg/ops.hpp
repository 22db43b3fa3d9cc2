#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "obrg/tensor.hpp"

namespace obrg {

inline void check_matrix(const Tensor& t, const char* who) {
    if (t.rank() != 2) fail(ErrKind::shape, std::string(who) + ": expected matrix, got " + shape_str(t.shape()));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape()) {
        fail(ErrKind::shape, std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    }
}

// ---- elementwise -----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = detail::make_op_output(a.shape(), {a, b}, [](Tensor& o) {
        auto& pa = o.node()->parents[0];
        auto& pb = o.node()->parents[1];
        const auto& g = o.grad();
        if (pa.requires_grad()) {
            auto& ga = pa.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (pb.requires_grad()) {
            auto& gb = pb.grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = detail::make_op_output(a.shape(), {a, b}, [](Tensor& o) {
        auto& pa = o.node()->parents[0];
        auto& pb = o.node()->parents[1];
        const auto& g = o.grad();
        if (pa.requires_grad()) {
            auto& ga = pa.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (pb.requires_grad()) {
            auto& gb = pb.grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = detail::make_op_output(a.shape(), {a, b}, [](Tensor& o) {
        auto& pa = o.node()->parents[0];
        auto& pb = o.node()->parents[1];
        const auto& g = o.grad();
        if (pa.requires_grad()) {
            auto& ga = pa.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb.data()[i];
        }
        if (pb.requires_grad()) {
            auto& gb = pb.grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa.data()[i];
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

inline Tensor scale(const Tensor& a, float s) {
    Tensor out = detail::make_op_output(a.shape(), {a}, [s](Tensor& o) {
        auto& pa = o.node()->parents[0];
        if (!pa.requires_grad()) return;
        const auto& g = o.grad();
        auto& ga = pa.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * s;
    return out;
}

// scalar-tensor times tensor; the one permitted broadcast.
inline Tensor mul_scalar_t(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) fail(ErrKind::shape, "mul_scalar_t: scalar operand must have one element");
    Tensor out = detail::make_op_output(a.shape(), {a, s}, [](Tensor& o) {
        auto& pa = o.node()->parents[0];
        auto& ps = o.node()->parents[1];
        const auto& g = o.grad();
        const float sv = ps.data()[0];
        if (pa.requires_grad()) {
            auto& ga = pa.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
        }
        if (ps.requires_grad()) {
            double acc = 0.0;
            for (size_t i = 0; i < g.size(); ++i) acc += static_cast<double>(g[i]) * pa.data()[i];
            ps.grad()[0] += static_cast<float>(acc);
        }
    });
    const float sv = s.data()[0];
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * sv;
    return out;
}

inline Tensor sigmoid_t(const Tensor& a) {
    Tensor out = detail::make_op_output(a.shape(), {a}, [](Tensor& o) {
        auto& pa = o.node()->parents[0];
        if (!pa.requires_grad()) return;
        const auto& g = o.grad();
        auto& ga = pa.grad();
        for (size_t i = 0; i < g.size(); ++i) {
            const float y = o.data()[i];
            ga[i] += g[i] * y * (1.0f - y);
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) {
        const double x = a.data()[i];
        out.data()[i] = static_cast<float>(1.0 / (1.0 + std::exp(-x)));
    }
    return out;
}

inline Tensor exp_t(const Tensor& a) {
    Tensor out = detail::make_op_output(a.shape(), {a}, [](Tensor& o) {
        auto& pa = o.node()->parents[0];
        if (!pa.requires_grad()) return;
        const auto& g = o.grad();
        auto& ga = pa.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * o.data()[i];
    });
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = std::exp(a.data()[i]);
    return out;
}

inline Tensor gelu(const Tensor& a) {
    Tensor out = detail::make_op_output(a.shape(), {a}, [](Tensor& o) {
        auto& pa = o.node()->parents[0];
        if (!pa.requires_grad()) return;
        const auto& g = o.grad();
        auto& ga = pa.grad();
        constexpr double inv_sqrt2 = 0.7071067811865476;
        constexpr double inv_sqrt2pi = 0.3989422804014327;
        for (size_t i = 0; i < g.size(); ++i) {
            const double x = pa.data()[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            ga[i] += g[i] * static_cast<float>(cdf + x * pdf);
        }
    });
    constexpr double inv_sqrt2 = 0.7071067811865476;
    for (size_t i = 0; i < out.numel(); ++i) {
        const double x = a.data()[i];
        out.data()[i] = static_cast<float>(x * 0.5 * (1.0 + std::erf(x * inv_sqrt2)));
    }
    return out;
}

// ---- structural ------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        fail(ErrKind::shape, "reshape: element count mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    Tensor out = detail::make_op_output(std::move(shape), {a}, [](Tensor& o) {
        auto& pa = o.node()->parents[0];
        if (!pa.requires_grad()) return;
        const auto& g = o.grad();
        auto& ga = pa.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    std::copy(a.data(), a.data() + a.numel(), out.data());
    return out;
}

inline Tensor transpose(const Tensor& a) {
    check_matrix(a, "transpose");
    const int n = a.dim(0), m = a.dim(1);
    Tensor out = detail::make_op_output({m, n}, {a}, [n, m](Tensor& o) {
        auto& pa = o.node()->parents[0];
        if (!pa.requires_grad()) return;
        const auto& g = o.grad();
        auto& ga = pa.grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) ga[static_cast<size_t>(j) * m + i] += g[static_cast<size_t>(i) * n + j];
    });
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.data()[static_cast<size_t>(j) * n + i] = a.data()[static_cast<size_t>(i) * m + j];
    return out;
}

inline Tensor slice_rows(const Tensor& a, int r0, int h) {
    check_matrix(a, "slice_rows");
    const int n = a.dim(0), m = a.dim(1);
    if (r0 < 0 || h <= 0 || r0 + h > n) fail(ErrKind::shape, "slice_rows: range out of bounds");
    Tensor out = detail::make_op_output({h, m}, {a}, [r0, h, m](Tensor& o) {
        auto& pa = o.node()->parents[0];
        if (!pa.requires_grad()) return;
        const auto& g = o.grad();
        auto& ga = pa.grad();
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < m; ++j)
                ga[static_cast<size_t>(r0 + i) * m + j] += g[static_cast<size_t>(i) * m + j];
    });
    std::copy(a.data() + static_cast<size_t>(r0) * m, a.data() + static_cast<size_t>(r0 + h) * m, out.data());
    return out;
}

inline Tensor slice_cols(const Tensor& a, int c0, int w) {
    check_matrix(a, "slice_cols");
    const int n = a.dim(0), m = a.dim(1);
    if (c0 < 0 || w <= 0 || c0 + w > m) fail(ErrKind::shape, "slice_cols: range out of bounds");
    Tensor out = detail::make_op_output({n, w}, {a}, [c0, w, n, m](Tensor& o) {
        auto& pa = o.node()->parents[0];
        if (!pa.requires_grad()) return;
        const auto& g = o.grad();
        auto& ga = pa.grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j)
                ga[static_cast<size_t>(i) * m + c0 + j] += g[static_cast<size_t>(i) * w + j];
    });
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j)
            out.data()[static_cast<size_t>(i) * w + j] = a.data()[static_cast<size_t>(i) * m + c0 + j];
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail(ErrKind::shape, "concat_cols: empty input");
    const int n = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        check_matrix(p, "concat_cols");
        if (p.dim(0) != n) fail(ErrKind::shape, "concat_cols: row count mismatch");
        total += p.dim(1);
    }
    std::vector<int> widths;
    for (const auto& p : parts) widths.push_back(p.dim(1));
    Tensor out = detail::make_op_output({n, total}, parts, [n, total, widths](Tensor& o) {
        int c0 = 0;
        for (size_t k = 0; k < widths.size(); ++k) {
            auto& p = o.node()->parents[k];
            const int w = widths[k];
            if (p.requires_grad()) {
                const auto& g = o.grad();
                auto& gp = p.grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < w; ++j)
                        gp[static_cast<size_t>(i) * w + j] += g[static_cast<size_t>(i) * total + c0 + j];
            }
            c0 += w;
        }
    });
    int c0 = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j)
                out.data()[static_cast<size_t>(i) * total + c0 + j] = p.data()[static_cast<size_t>(i) * w + j];
        c0 += w;
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail(ErrKind::shape, "concat_rows: empty input");
    const int m = parts[0].dim(1);
    int total = 0;
    for (const auto& p : parts) {
        check_matrix(p, "concat_rows");
        if (p.dim(1) != m) fail(ErrKind::shape, "concat_rows: column count mismatch");
        total += p.dim(0);
    }
    std::vector<int> heights;
    for (const auto& p : parts) heights.push_back(p.dim(0));
    Tensor out = detail::make_op_output({total, m}, parts, [m, heights](Tensor& o) {
        size_t r0 = 0;
        for (size_t k = 0; k < heights.size(); ++k) {
            auto& p = o.node()->parents[k];
            const size_t cnt = static_cast<size_t>(heights[k]) * m;
            if (p.requires_grad()) {
                const auto& g = o.grad();
                auto& gp = p.grad();
                for (size_t i = 0; i < cnt; ++i) gp[i] += g[r0 * m + i];
            }
            r0 += static_cast<size_t>(heights[k]);
        }
    });
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + off);
        off += p.numel();
    }
    return out;
}

// New tensor equal to base with rows [start, start+rows.rows) replaced.
inline Tensor overlay_rows(const Tensor& base, int start, const Tensor& rows) {
    check_matrix(base, "overlay_rows");
    check_matrix(rows, "overlay_rows");
    const int n = base.dim(0), m = base.dim(1), p = rows.dim(0);
    if (rows.dim(1) != m) fail(ErrKind::shape, "overlay_rows: width mismatch");
    if (start < 0 || start + p > n) fail(ErrKind::sequence, "overlay_rows: span out of bounds");
    Tensor out = detail::make_op_output({n, m}, {base, rows}, [start, p, n, m](Tensor& o) {
        auto& pb = o.node()->parents[0];
        auto& pr = o.node()->parents[1];
        const auto& g = o.grad();
        if (pb.requires_grad()) {
            auto& gb = pb.grad();
            for (int i = 0; i < n; ++i) {
                if (i >= start && i < start + p) continue;
                for (int j = 0; j < m; ++j) gb[static_cast<size_t>(i) * m + j] += g[static_cast<size_t>(i) * m + j];
            }
        }
        if (pr.requires_grad()) {
            auto& gr = pr.grad();
            for (int i = 0; i < p; ++i)
                for (int j = 0; j < m; ++j)
                    gr[static_cast<size_t>(i) * m + j] += g[static_cast<size_t>(start + i) * m + j];
        }
    });
    std::copy(base.data(), base.data() + base.numel(), out.data());
    std::copy(rows.data(), rows.data() + rows.numel(), out.data() + static_cast<size_t>(start) * m);
    return out;
}

inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    check_matrix(table, "gather_rows");
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= v) fail(ErrKind::shape, "gather_rows: index " + std::to_string(id) + " out of range");
    }
    const int n = static_cast<int>(ids.size());
    if (n == 0) fail(ErrKind::shape, "gather_rows: empty index list");
    Tensor out = detail::make_op_output({n, d}, {table}, [ids, d](Tensor& o) {
        auto& pt = o.node()->parents[0];
        if (!pt.requires_grad()) return;
        const auto& g = o.grad();
        auto& gt = pt.grad();
        for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < d; ++j)
                gt[static_cast<size_t>(ids[i]) * d + j] += g[i * d + j];
    });
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(table.data() + static_cast<size_t>(ids[i]) * d, table.data() + static_cast<size_t>(ids[i] + 1) * d,
                  out.data() + i * d);
    return out;
}

// ---- matmul and linear -----------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    check_matrix(a, "matmul");
    check_matrix(b, "matmul");
    const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k) {
        fail(ErrKind::shape, "matmul: inner dims " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out = detail::make_op_output({n, m}, {a, b}, [n, k, m](Tensor& o) {
        auto& pa = o.node()->parents[0];
        auto& pb = o.node()->parents[1];
        const auto& g = o.grad();
        if (pa.requires_grad()) {
            auto& ga = pa.grad();
            // da = g . b^T
            std::vector<double> acc(static_cast<size_t>(n) * k, 0.0);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) {
                    const double gv = g[static_cast<size_t>(i) * m + j];
                    if (gv == 0.0) continue;
                    for (int t = 0; t < k; ++t)
                        acc[static_cast<size_t>(i) * k + t] += gv * pb.data()[static_cast<size_t>(t) * m + j];
                }
            for (size_t i = 0; i < acc.size(); ++i) ga[i] += static_cast<float>(acc[i]);
        }
        if (pb.requires_grad()) {
            auto& gb = pb.grad();
            // db = a^T . g
            std::vector<double> acc(static_cast<size_t>(k) * m, 0.0);
            for (int i = 0; i < n; ++i)
                for (int t = 0; t < k; ++t) {
                    const double av = pa.data()[static_cast<size_t>(i) * k + t];
                    if (av == 0.0) continue;
                    const float* grow = g.data() + static_cast<size_t>(i) * m;
                    double* arow = acc.data() + static_cast<size_t>(t) * m;
                    for (int j = 0; j < m; ++j) arow[j] += av * grow[j];
                }
            for (size_t i = 0; i < acc.size(); ++i) gb[i] += static_cast<float>(acc[i]);
        }
    });
    std::vector<double> acc(static_cast<size_t>(n) * m, 0.0);
    for (int i = 0; i < n; ++i)
        for (int t = 0; t < k; ++t) {
            const double av = a.data()[static_cast<size_t>(i) * k + t];
            if (av == 0.0) continue;
            const float* brow = b.data() + static_cast<size_t>(t) * m;
            double* orow = acc.data() + static_cast<size_t>(i) * m;
            for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    for (size_t i = 0; i < acc.size(); ++i) out.data()[i] = static_cast<float>(acc[i]);
    return out;
}

// y = x . W^T + b with W stored [out x in]; b optional.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b = nullptr) {
    check_matrix(x, "linear");
    check_matrix(w, "linear");
    const int n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
    if (w.dim(1) != in) {
        fail(ErrKind::shape, "linear: input width " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    }
    if (b != nullptr && (b->rank() != 1 || b->dim(0) != out_dim)) {
        fail(ErrKind::shape, "linear: bias shape mismatch");
    }
    std::vector<Tensor> parents = {x, w};
    if (b != nullptr) parents.push_back(*b);
    const bool has_bias = b != nullptr;
    Tensor result = detail::make_op_output({n, out_dim}, std::move(parents), [n, in, out_dim, has_bias](Tensor& o) {
        auto& px = o.node()->parents[0];
        auto& pw = o.node()->parents[1];
        const auto& g = o.grad();
        if (px.requires_grad()) {
            auto& gx = px.grad();
            std::vector<double> acc(static_cast<size_t>(n) * in, 0.0);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < out_dim; ++j) {
                    const double gv = g[static_cast<size_t>(i) * out_dim + j];
                    if (gv == 0.0) continue;
                    const float* wrow = pw.data() + static_cast<size_t>(j) * in;
                    double* arow = acc.data() + static_cast<size_t>(i) * in;
                    for (int t = 0; t < in; ++t) arow[t] += gv * wrow[t];
                }
            for (size_t i = 0; i < acc.size(); ++i) gx[i] += static_cast<float>(acc[i]);
        }
        if (pw.requires_grad()) {
            auto& gw = pw.grad();
            std::vector<double> acc(static_cast<size_t>(out_dim) * in, 0.0);
            for (int i = 0; i < n; ++i) {
                const float* xrow = px.data() + static_cast<size_t>(i) * in;
                const float* grow = g.data() + static_cast<size_t>(i) * out_dim;
                for (int j = 0; j < out_dim; ++j) {
                    const double gv = grow[j];
                    if (gv == 0.0) continue;
                    double* arow = acc.data() + static_cast<size_t>(j) * in;
                    for (int t = 0; t < in; ++t) arow[t] += gv * xrow[t];
                }
            }
            for (size_t i = 0; i < acc.size(); ++i) gw[i] += static_cast<float>(acc[i]);
        }
        if (has_bias) {
            auto& pb = o.node()->parents[2];
            if (pb.requires_grad()) {
                auto& gb = pb.grad();
                for (int j = 0; j < out_dim; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < n; ++i) acc += g[static_cast<size_t>(i) * out_dim + j];
                    gb[j] += static_cast<float>(acc);
                }
            }
        }
    });
    for (int i = 0; i < n; ++i) {
        const float* xrow = x.data() + static_cast<size_t>(i) * in;
        float* orow = result.data() + static_cast<size_t>(i) * out_dim;
        for (int j = 0; j < out_dim; ++j) {
            const float* wrow = w.data() + static_cast<size_t>(j) * in;
            double acc = b != nullptr ? b->data()[j] : 0.0;
            for (int t = 0; t < in; ++t) acc += static_cast<double>(xrow[t]) * wrow[t];
            orow[j] = static_cast<float>(acc);
        }
    }
    return result;
}

// ---- softmax family --------------------------------------------------------

namespace detail {

// Row softmax allowing -inf entries (blocked attention slots). Caller
// guarantees each row has a finite entry.
inline Tensor softmax_rows_masked(const Tensor& x) {
    check_matrix(x, "softmax_rows");
    const int n = x.dim(0), m = x.dim(1);
    Tensor out = make_op_output({n, m}, {x}, [n, m](Tensor& o) {
        auto& px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const auto& g = o.grad();
        auto& gx = px.grad();
        for (int i = 0; i < n; ++i) {
            const float* yrow = o.data() + static_cast<size_t>(i) * m;
            const float* grow = g.data() + static_cast<size_t>(i) * m;
            double dot = 0.0;
            for (int j = 0; j < m; ++j) dot += static_cast<double>(grow[j]) * yrow[j];
            for (int j = 0; j < m; ++j)
                gx[static_cast<size_t>(i) * m + j] += static_cast<float>(yrow[j] * (grow[j] - dot));
        }
    });
    for (int i = 0; i < n; ++i) {
        const float* xrow = x.data() + static_cast<size_t>(i) * m;
        float* orow = out.data() + static_cast<size_t>(i) * m;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < m; ++j) mx = std::max(mx, static_cast<double>(xrow[j]));
        double denom = 0.0;
        for (int j = 0; j < m; ++j) denom += std::exp(static_cast<double>(xrow[j]) - mx);
        for (int j = 0; j < m; ++j)
            orow[j] = static_cast<float>(std::exp(static_cast<double>(xrow[j]) - mx) / denom);
    }
    return out;
}

}  // namespace detail

inline Tensor softmax_rows(const Tensor& x) {
    check_matrix(x, "softmax_rows");
    for (size_t i = 0; i < x.numel(); ++i) {
        if (!std::isfinite(x.data()[i])) fail(ErrKind::numeric, "softmax_rows: non-finite input");
    }
    return detail::softmax_rows_masked(x);
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f) {
    check_matrix(x, "layer_norm");
    const int n = x.dim(0), d = x.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
        fail(ErrKind::shape, "layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    }
    if (eps <= 0.0f) fail(ErrKind::numeric, "layer_norm: eps must be positive");
    Tensor out = detail::make_op_output({n, d}, {x, gain, bias}, [n, d, eps](Tensor& o) {
        auto& px = o.node()->parents[0];
        auto& pg = o.node()->parents[1];
        auto& pb = o.node()->parents[2];
        const auto& g = o.grad();
        for (int i = 0; i < n; ++i) {
            const float* xrow = px.data() + static_cast<size_t>(i) * d;
            const float* grow = g.data() + static_cast<size_t>(i) * d;
            double mean = 0.0, var = 0.0;
            for (int j = 0; j < d; ++j) mean += xrow[j];
            mean /= d;
            for (int j = 0; j < d; ++j) {
                const double c = xrow[j] - mean;
                var += c * c;
            }
            var /= d;
            const double inv = 1.0 / std::sqrt(var + eps);
            if (px.requires_grad()) {
                // dL/dx via normalized coordinates.
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double xhat = (xrow[j] - mean) * inv;
                    const double dy = static_cast<double>(grow[j]) * pg.data()[j];
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
                auto& gx = px.grad();
                for (int j = 0; j < d; ++j) {
                    const double xhat = (xrow[j] - mean) * inv;
                    const double dy = static_cast<double>(grow[j]) * pg.data()[j];
                    gx[static_cast<size_t>(i) * d + j] +=
                        static_cast<float>(inv * (dy - sum_dy / d - xhat * sum_dy_xhat / d));
                }
            }
            if (pg.requires_grad()) {
                auto& gg = pg.grad();
                for (int j = 0; j < d; ++j) {
                    const double xhat = (xrow[j] - mean) * inv;
                    gg[j] += static_cast<float>(grow[j] * xhat);
                }
            }
            if (pb.requires_grad()) {
                auto& gb = pb.grad();
                for (int j = 0; j < d; ++j) gb[j] += grow[j];
            }
        }
    });
    for (int i = 0; i < n; ++i) {
        const float* xrow = x.data() + static_cast<size_t>(i) * d;
        float* orow = out.data() + static_cast<size_t>(i) * d;
        double mean = 0.0, var = 0.0;
        for (int j = 0; j < d; ++j) mean += xrow[j];
        mean /= d;
        for (int j = 0; j < d; ++j) {
            const double c = xrow[j] - mean;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j)
            orow[j] = static_cast<float>((xrow[j] - mean) * inv * gain.data()[j] + bias.data()[j]);
    }
    return out;
}

// ---- attention -------------------------------------------------------------

// Additive mask of 0 (visible) / -inf (blocked); constant, not differentiated.
inline Tensor causal_mask(int n) {
    Tensor m({n, n});
    const float ninf = -std::numeric_limits<float>::infinity();
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m.data()[static_cast<size_t>(i) * n + j] = ninf;
    return m;
}

// Mask for batching independent attention problems in one call: query rows of
// block b see only kv rows of block b. Blocked entries contribute exact zeros
// to the softmax, so the batched result is bit-identical to per-sample calls.
inline Tensor block_diag_mask(const std::vector<int>& q_sizes, const std::vector<int>& kv_sizes,
                              bool causal_within = false) {
    if (q_sizes.size() != kv_sizes.size()) fail(ErrKind::shape, "block_diag_mask: block count mismatch");
    int total_q = 0, total_kv = 0;
    for (int s : q_sizes) total_q += s;
    for (int s : kv_sizes) total_kv += s;
    Tensor m({total_q, total_kv});
    const float ninf = -std::numeric_limits<float>::infinity();
    for (auto& v : m.values()) v = ninf;
    int q0 = 0, k0 = 0;
    for (size_t b = 0; b < q_sizes.size(); ++b) {
        for (int i = 0; i < q_sizes[b]; ++i) {
            const int limit = causal_within ? std::min(i + 1, kv_sizes[b]) : kv_sizes[b];
            for (int j = 0; j < limit; ++j) {
                m.data()[static_cast<size_t>(q0 + i) * total_kv + k0 + j] = 0.0f;
            }
        }
        q0 += q_sizes[b];
        k0 += kv_sizes[b];
    }
    return m;
}

// Vertical repetition of a matrix.
inline Tensor tile_rows(const Tensor& a, int reps) {
    check_matrix(a, "tile_rows");
    if (reps < 1) fail(ErrKind::shape, "tile_rows: reps must be positive");
    const int n = a.dim(0), m = a.dim(1);
    Tensor out = detail::make_op_output({n * reps, m}, {a}, [n, m, reps](Tensor& o) {
        auto& pa = o.node()->parents[0];
        if (!pa.requires_grad()) return;
        const auto& g = o.grad();
        auto& ga = pa.grad();
        for (int r = 0; r < reps; ++r) {
            const size_t off = static_cast<size_t>(r) * n * m;
            for (size_t i = 0; i < static_cast<size_t>(n) * m; ++i) ga[i] += g[off + i];
        }
    });
    for (int r = 0; r < reps; ++r) {
        std::copy(a.data(), a.data() + a.numel(), out.data() + static_cast<size_t>(r) * a.numel());
    }
    return out;
}

inline Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                           const std::optional<Tensor>& mask = std::nullopt) {
    check_matrix(q, "attention");
    check_matrix(k, "attention");
    check_matrix(v, "attention");
    const int lq = q.dim(0), d = q.dim(1), lk = k.dim(0);
    if (d <= 0) fail(ErrKind::shape, "attention: zero feature dim");
    if (k.dim(1) != d) fail(ErrKind::shape, "attention: q/k width mismatch");
    if (v.dim(0) != lk) fail(ErrKind::shape, "attention: k/v row mismatch");
    if (mask) {
        if (mask->rank() != 2 || mask->dim(0) != lq || mask->dim(1) != lk) {
            fail(ErrKind::shape, "attention: mask must be [" + std::to_string(lq) + "x" + std::to_string(lk) + "]");
        }
        for (int i = 0; i < lq; ++i) {
            bool visible = false;
            for (int j = 0; j < lk; ++j) {
                const float mv = mask->data()[static_cast<size_t>(i) * lk + j];
                if (mv == 0.0f) {
                    visible = true;
                } else if (!(mv == -std::numeric_limits<float>::infinity())) {
                    fail(ErrKind::mask, "attention: mask entries must be 0 or -inf");
                }
            }
            if (!visible) fail(ErrKind::mask, "attention: fully blocked mask row " + std::to_string(i));
        }
    }
    Tensor scores = matmul(q, transpose(k));
    scores = scale(scores, 1.0f / std::sqrt(static_cast<float>(d)));
    if (mask) scores = add(scores, *mask);
    Tensor weights = detail::softmax_rows_masked(scores);
    return matmul(weights, v);
}

// Multi-head attention over independent row blocks in one graph node: block
// b's query rows attend only that block's kv rows (optionally causally).
// Equivalent to per-block, per-head scaled_dot_product_attention composed
// with column slicing, at a fraction of the graph and score-matrix cost.
inline Tensor block_mha(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                        const std::vector<int>& q_sizes, const std::vector<int>& kv_sizes,
                        bool causal_within = false) {
    check_matrix(q, "block_mha");
    check_matrix(k, "block_mha");
    check_matrix(v, "block_mha");
    const int d = q.dim(1);
    if (k.dim(1) != d || v.dim(1) != d) fail(ErrKind::shape, "block_mha: width mismatch");
    if (n_heads <= 0 || d % n_heads != 0) fail(ErrKind::shape, "block_mha: bad head count");
    if (q_sizes.size() != kv_sizes.size() || q_sizes.empty()) fail(ErrKind::shape, "block_mha: bad block sizes");
    int total_q = 0, total_kv = 0;
    for (int s : q_sizes) total_q += s;
    for (int s : kv_sizes) total_kv += s;
    if (q.dim(0) != total_q || k.dim(0) != total_kv || v.dim(0) != total_kv) {
        fail(ErrKind::shape, "block_mha: block sizes do not cover the inputs");
    }
    for (size_t b = 0; b < q_sizes.size(); ++b) {
        if (q_sizes[b] <= 0 || kv_sizes[b] <= 0) fail(ErrKind::mask, "block_mha: empty block");
    }

    const int dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    // stash softmax weights for the backward sweep
    auto weights = std::make_shared<std::vector<double>>();
    {
        size_t total = 0;
        for (size_t b = 0; b < q_sizes.size(); ++b)
            total += static_cast<size_t>(q_sizes[b]) * kv_sizes[b] * static_cast<size_t>(n_heads);
        weights->resize(total);
    }

    Tensor out = detail::make_op_output(
        {total_q, d}, {q, k, v},
        [n_heads, dh, d, q_sizes, kv_sizes, inv_sqrt, causal_within, weights](Tensor& o) {
            auto& pq = o.node()->parents[0];
            auto& pk = o.node()->parents[1];
            auto& pv = o.node()->parents[2];
            const auto& g = o.grad();
            size_t wpos = 0;
            int q0 = 0, k0 = 0;
            for (size_t b = 0; b < q_sizes.size(); ++b) {
                const int nq = q_sizes[b], nk = kv_sizes[b];
                for (int h = 0; h < n_heads; ++h) {
                    const int c0 = h * dh;
                    const double* w = weights->data() + wpos;
                    // gw[i][j] = g_out_i . v_j ; gv_j += sum_i w_ij g_out_i
                    std::vector<double> gw(static_cast<size_t>(nq) * nk, 0.0);
                    for (int i = 0; i < nq; ++i) {
                        const float* grow = g.data() + static_cast<size_t>(q0 + i) * d + c0;
                        for (int j = 0; j < nk; ++j) {
                            const float* vrow = pv.data() + static_cast<size_t>(k0 + j) * d + c0;
                            double acc = 0.0;
                            for (int t = 0; t < dh; ++t) acc += static_cast<double>(grow[t]) * vrow[t];
                            gw[static_cast<size_t>(i) * nk + j] = acc;
                        }
                    }
                    if (pv.requires_grad()) {
                        auto& gv = pv.grad();
                        for (int j = 0; j < nk; ++j) {
                            float* gvrow = gv.data() + static_cast<size_t>(k0 + j) * d + c0;
                            for (int t = 0; t < dh; ++t) {
                                double acc = 0.0;
                                for (int i = 0; i < nq; ++i) {
                                    acc += w[static_cast<size_t>(i) * nk + j] *
                                           static_cast<double>(g.data()[static_cast<size_t>(q0 + i) * d + c0 + t]);
                                }
                                gvrow[t] += static_cast<float>(acc);
                            }
                        }
                    }
                    if (pq.requires_grad() || pk.requires_grad()) {
                        // softmax backward into score grads, then into q and k
                        std::vector<double> gs(static_cast<size_t>(nq) * nk, 0.0);
                        for (int i = 0; i < nq; ++i) {
                            double dot = 0.0;
                            for (int j = 0; j < nk; ++j) {
                                const size_t ij = static_cast<size_t>(i) * nk + j;
                                dot += gw[ij] * w[ij];
                            }
                            for (int j = 0; j < nk; ++j) {
                                const size_t ij = static_cast<size_t>(i) * nk + j;
                                gs[ij] = w[ij] * (gw[ij] - dot) * inv_sqrt;
                            }
                        }
                        if (pq.requires_grad()) {
                            auto& gq = pq.grad();
                            for (int i = 0; i < nq; ++i) {
                                float* gqrow = gq.data() + static_cast<size_t>(q0 + i) * d + c0;
                                for (int t = 0; t < dh; ++t) {
                                    double acc = 0.0;
                                    for (int j = 0; j < nk; ++j) {
                                        acc += gs[static_cast<size_t>(i) * nk + j] *
                                               static_cast<double>(
                                                   pk.data()[static_cast<size_t>(k0 + j) * d + c0 + t]);
                                    }
                                    gqrow[t] += static_cast<float>(acc);
                                }
                            }
                        }
                        if (pk.requires_grad()) {
                            auto& gk = pk.grad();
                            for (int j = 0; j < nk; ++j) {
                                float* gkrow = gk.data() + static_cast<size_t>(k0 + j) * d + c0;
                                for (int t = 0; t < dh; ++t) {
                                    double acc = 0.0;
                                    for (int i = 0; i < nq; ++i) {
                                        acc += gs[static_cast<size_t>(i) * nk + j] *
                                               static_cast<double>(
                                                   pq.data()[static_cast<size_t>(q0 + i) * d + c0 + t]);
                                    }
                                    gkrow[t] += static_cast<float>(acc);
                                }
                            }
                        }
                    }
                    wpos += static_cast<size_t>(nq) * nk;
                }
                q0 += nq;
                k0 += nk;
            }
        });

    size_t wpos = 0;
    int q0 = 0, k0 = 0;
    for (size_t b = 0; b < q_sizes.size(); ++b) {
        const int nq = q_sizes[b], nk = kv_sizes[b];
        for (int h = 0; h < n_heads; ++h) {
            const int c0 = h * dh;
            double* w = weights->data() + wpos;
            for (int i = 0; i < nq; ++i) {
                const float* qrow = q.data() + static_cast<size_t>(q0 + i) * d + c0;
                const int limit = causal_within ? std::min(i + 1, nk) : nk;
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < limit; ++j) {
                    const float* krow = k.data() + static_cast<size_t>(k0 + j) * d + c0;
                    double acc = 0.0;
                    for (int t = 0; t < dh; ++t) acc += static_cast<double>(qrow[t]) * krow[t];
                    acc *= inv_sqrt;
                    w[static_cast<size_t>(i) * nk + j] = acc;
                    mx = std::max(mx, acc);
                }
                double denom = 0.0;
                for (int j = 0; j < limit; ++j) {
                    double& wij = w[static_cast<size_t>(i) * nk + j];
                    wij = std::exp(wij - mx);
                    denom += wij;
                }
                for (int j = 0; j < limit; ++j) w[static_cast<size_t>(i) * nk + j] /= denom;
                for (int j = limit; j < nk; ++j) w[static_cast<size_t>(i) * nk + j] = 0.0;
                float* orow = out.data() + static_cast<size_t>(q0 + i) * d + c0;
                for (int t = 0; t < dh; ++t) {
                    double acc = 0.0;
                    for (int j = 0; j < limit; ++j) {
                        acc += w[static_cast<size_t>(i) * nk + j] *
                               static_cast<double>(v.data()[static_cast<size_t>(k0 + j) * d + c0 + t]);
                    }
                    orow[t] = static_cast<float>(acc);
                }
            }
            wpos += static_cast<size_t>(nq) * nk;
        }
        q0 += nq;
        k0 += nk;
    }
    return out;
}

// Softmax pooling of token rows against a learnable probe vector.
inline Tensor attention_pool(const Tensor& tokens, const Tensor& probe) {
    check_matrix(tokens, "attention_pool");
    const int n = tokens.dim(0), d = tokens.dim(1);
    if (n < 1) fail(ErrKind::shape, "attention_pool: empty token set");
    if (probe.rank() != 1 || probe.dim(0) != d) fail(ErrKind::shape, "attention_pool: probe width mismatch");
    Tensor scores = matmul(tokens, reshape(probe, {d, 1}));
    scores = scale(scores, 1.0f / std::sqrt(static_cast<float>(d)));
    Tensor weights = detail::softmax_rows_masked(transpose(scores));
    return reshape(matmul(weights, tokens), {d});
}

// ---- reductions and losses -------------------------------------------------

inline Tensor sum(const Tensor& a) {
    Tensor out = detail::make_op_output({1}, {a}, [](Tensor& o) {
        auto& pa = o.node()->parents[0];
        if (!pa.requires_grad()) return;
        const float g = o.grad()[0];
        auto& ga = pa.grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
    double acc = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
    out.data()[0] = static_cast<float>(acc);
    return out;
}

inline Tensor mean(const Tensor& a) {
    const float inv = 1.0f / static_cast<float>(a.numel());
    return scale(sum(a), inv);
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse");
    const size_t n = a.numel();
    Tensor out = detail::make_op_output({1}, {a, b}, [n](Tensor& o) {
        auto& pa = o.node()->parents[0];
        auto& pb = o.node()->parents[1];
        const float g = o.grad()[0];
        const float c = 2.0f / static_cast<float>(n);
        for (size_t i = 0; i < n; ++i) {
            const float diff = pa.data()[i] - pb.data()[i];
            if (pa.requires_grad()) pa.grad()[i] += g * c * diff;
            if (pb.requires_grad()) pb.grad()[i] -= g * c * diff;
        }
    });
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double diff = static_cast<double>(a.data()[i]) - b.data()[i];
        acc += diff * diff;
    }
    out.data()[0] = static_cast<float>(acc / static_cast<double>(n));
    return out;
}

// Mean cross entropy over selected (row, target) pairs of a logits matrix.
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::pair<int, int>>& pairs) {
    check_matrix(logits, "cross_entropy");
    const int n = logits.dim(0), v = logits.dim(1);
    if (pairs.empty()) fail(ErrKind::loss, "cross_entropy: empty prediction window");
    for (const auto& [r, t] : pairs) {
        if (r < 0 || r >= n) fail(ErrKind::shape, "cross_entropy: row out of range");
        if (t < 0 || t >= v) fail(ErrKind::shape, "cross_entropy: target out of range");
    }
    Tensor out = detail::make_op_output({1}, {logits}, [pairs, v](Tensor& o) {
        auto& pl = o.node()->parents[0];
        if (!pl.requires_grad()) return;
        const float g = o.grad()[0];
        const double inv = 1.0 / static_cast<double>(pairs.size());
        auto& gl = pl.grad();
        for (const auto& [r, t] : pairs) {
            const float* row = pl.data() + static_cast<size_t>(r) * v;
            double mx = row[0];
            for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double denom = 0.0;
            for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
            for (int j = 0; j < v; ++j) {
                const double p = std::exp(static_cast<double>(row[j]) - mx) / denom;
                const double delta = (j == t) ? 1.0 : 0.0;
                gl[static_cast<size_t>(r) * v + j] += static_cast<float>(g * inv * (p - delta));
            }
        }
    });
    double acc = 0.0;
    for (const auto& [r, t] : pairs) {
        const float* row = logits.data() + static_cast<size_t>(r) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        acc += mx + std::log(denom) - row[t];
    }
    out.data()[0] = static_cast<float>(acc / static_cast<double>(pairs.size()));
    return out;
}

// L2 normalization of a rank-1 vector.
inline Tensor l2_normalize(const Tensor& a) {
    if (a.rank() != 1) fail(ErrKind::shape, "l2_normalize: expected vector");
    const int d = a.dim(0);
    double nsq = 0.0;
    for (int i = 0; i < d; ++i) nsq += static_cast<double>(a.data()[i]) * a.data()[i];
    const double norm = std::sqrt(nsq);
    if (norm < 1e-12) fail(ErrKind::numeric, "l2_normalize: degenerate embedding (norm < 1e-12)");
    Tensor out = detail::make_op_output({d}, {a}, [d, norm](Tensor& o) {
        auto& pa = o.node()->parents[0];
        if (!pa.requires_grad()) return;
        const auto& g = o.grad();
        double dot = 0.0;
        for (int i = 0; i < d; ++i) dot += static_cast<double>(g[i]) * o.data()[i];
        auto& ga = pa.grad();
        for (int i = 0; i < d; ++i)
            ga[i] += static_cast<float>((static_cast<double>(g[i]) - dot * o.data()[i]) / norm);
    });
    for (int i = 0; i < d; ++i) out.data()[i] = static_cast<float>(a.data()[i] / norm);
    return out;
}

}  // namespace obrg
