#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "mpdiff/tensor.hpp"

namespace mpdiff {

struct GradCheckReport {
    bool passed = false;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::string failure;  // non-empty when the oracle itself could not run
};

/// Compares reverse-mode gradients of a scalar function against central differences.
///
/// Relative error per entry is |g_ad - g_fd| / max(|g_ad|, |g_fd|, floor); the
/// floor keeps entries whose true gradient is ~0 from dividing by noise.
inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-6,
                                  double tol = 1e-5, double floor = 1e-3) {
    GradCheckReport report;
    Tensor probe = x.detach();
    probe.set_requires_grad(true);
    Tensor y = f(probe);
    if (y.size() != 1) {
        report.failure = "function is not scalar-valued: " + to_string(y.shape());
        return report;
    }
    if (!std::isfinite(y.item())) {
        report.failure = "f(x) is not finite";
        return report;
    }
    y.backward();
    std::vector<double> analytic(probe.size(), 0.0);
    if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

    NoGradGuard guard;
    Tensor work = x.detach();
    auto buf = work.mutable_data();
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const double orig = buf[i];
        buf[i] = orig + h;
        const double fp = f(work).item();
        buf[i] = orig - h;
        const double fm = f(work).item();
        buf[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            report.failure = "f is not finite at perturbation of entry " + std::to_string(i);
            return report;
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
        const double err = std::abs(analytic[i] - numeric) / denom;
        if (err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_error <= tol;
    return report;
}

}  // namespace mpdiff
