#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "obrg/tensor.hpp"

namespace obrg {

// Central-difference gradient oracle. f must be deterministic and is
// evaluated in double so the oracle does not inherit float32 rounding from
// the probe arithmetic. Test-side only; never called by training code.
inline Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                         float h = 1e-3f) {
    Tensor g(x.shape());
    Tensor probe = x.clone();
    for (size_t i = 0; i < x.numel(); ++i) {
        const float orig = probe.data()[i];
        probe.data()[i] = orig + h;
        const double xp = probe.data()[i];
        const double fp = f(probe);
        probe.data()[i] = orig - h;
        const double xm = probe.data()[i];
        const double fm = f(probe);
        probe.data()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            fail(ErrKind::numeric, "finite_difference_gradient: non-finite evaluation at coordinate " +
                                       std::to_string(i));
        }
        // Divide by the realized step: float storage rounds x +- h, and the
        // nominal 2h would fold that rounding into the estimate.
        g.data()[i] = static_cast<float>((fp - fm) / (xp - xm));
    }
    return g;
}

struct GradCheckResult {
    bool ok = true;
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    size_t worst_index = 0;
};

// Compares a reverse-mode gradient against the finite-difference oracle at
// tolerance max(abs_tol, rel_tol * magnitude).
inline GradCheckResult compare_gradients(const Tensor& analytic, const Tensor& numeric, double abs_tol = 1e-4,
                                         double rel_tol = 1e-3) {
    GradCheckResult r;
    if (analytic.shape() != numeric.shape()) fail(ErrKind::shape, "compare_gradients: shape mismatch");
    for (size_t i = 0; i < analytic.numel(); ++i) {
        const double a = analytic.data()[i];
        const double n = numeric.data()[i];
        const double abs_err = std::abs(a - n);
        const double mag = std::max(std::abs(a), std::abs(n));
        const double rel_err = mag > 0.0 ? abs_err / mag : 0.0;
        if (abs_err > r.max_abs_err) {
            r.max_abs_err = abs_err;
            r.worst_index = i;
        }
        r.max_rel_err = std::max(r.max_rel_err, rel_err);
        if (abs_err > std::max(abs_tol, rel_tol * mag)) r.ok = false;
    }
    return r;
}

// Gradient check for a parameter owned by a module: the loss closure reads
// module state, so probes are written through the parameter pointer and the
// original value is restored afterwards.
inline GradCheckResult param_gradient_check(Tensor* param, const std::function<Tensor()>& loss_fn, float h = 1e-3f,
                                            double abs_tol = 1e-4, double rel_tol = 1e-3) {
    const Tensor orig = param->clone();
    param->zero_grad();
    Tensor loss = loss_fn();
    loss.backward();
    const Tensor analytic(param->shape(), param->grad());
    const Tensor numeric = finite_difference_gradient(
        [&](const Tensor& probe) {
            *param = Tensor(orig.shape(), probe.values(), false);
            return static_cast<double>(loss_fn().item());
        },
        orig, h);
    *param = orig;
    return compare_gradients(analytic, numeric, abs_tol, rel_tol);
}

// One-call check: runs f both ways with respect to parameter x.
// loss_fn must build a fresh graph rooted at a scalar each call.
inline GradCheckResult gradient_check(const std::function<Tensor(const Tensor&)>& loss_fn, const Tensor& x,
                                      float h = 1e-3f, double abs_tol = 1e-4, double rel_tol = 1e-3) {
    Tensor xr = x.clone();
    if (!xr.requires_grad()) xr = Tensor(x.shape(), x.values(), true);
    Tensor loss = loss_fn(xr);
    loss.backward();
    Tensor analytic(xr.shape(), xr.grad());
    Tensor numeric = finite_difference_gradient(
        [&](const Tensor& probe) { return static_cast<double>(loss_fn(probe).item()); }, x, h);
    return compare_gradients(analytic, numeric, abs_tol, rel_tol);
}

}  // namespace obrg
