#pragma once

// Power-function and exponential weight averaging, the analytic inner product
// between power profiles, and the least-squares synthesis of new profiles from
// stored ones.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/tools/roots.hpp>

namespace mpdiff {

/// Upper bound of the relative width of any power profile (reached as gamma -> 0).
inline const double kSigmaRelMax = 1.0 / std::sqrt(12.0);

inline double sigma_rel_of_gamma(double gamma) {
    if (!(gamma > 0.0)) throw std::domain_error("sigma_rel_of_gamma: gamma must be positive, got " + std::to_string(gamma));
    return std::sqrt(gamma + 1.0) / ((gamma + 2.0) * std::sqrt(gamma + 3.0));
}

/// Inverse of sigma_rel_of_gamma on its monotone branch, found by bracketing.
inline double gamma_of_sigma_rel(double sigma_rel) {
    if (!(sigma_rel > 0.0 && sigma_rel < kSigmaRelMax)) {
        std::ostringstream os;
        os << "sigma_rel " << sigma_rel << " outside (0, 12^-0.5 = " << kSigmaRelMax << ")";
        throw std::domain_error(os.str());
    }
    // sigma_rel(gamma) decreases from 12^-0.5 at gamma=0 and behaves like 1/gamma for large gamma.
    auto f = [sigma_rel](double g) { return std::sqrt(g + 1.0) / ((g + 2.0) * std::sqrt(g + 3.0)) - sigma_rel; };
    double hi = 4.0 / sigma_rel;
    while (f(hi) > 0.0) hi *= 2.0;
    std::uintmax_t iters = 200;
    auto [a, b] = boost::math::tools::toms748_solve(f, 0.0, hi, f(0.0), f(hi),
                                                    boost::math::tools::eps_tolerance<double>(52), iters);
    return 0.5 * (a + b);
}

struct EmaProfile {
    enum class Kind { power, exponential };
    Kind kind = Kind::power;
    double gamma = 0.0;      // power profile exponent
    double half_life = 0.0;  // exponential half-life in steps

    static EmaProfile power(double gamma) {
        if (!(gamma > 0.0)) throw std::domain_error("power profile needs gamma > 0");
        return {Kind::power, gamma, 0.0};
    }
    static EmaProfile power_sigma_rel(double sigma_rel) { return power(gamma_of_sigma_rel(sigma_rel)); }
    static EmaProfile exponential(double half_life) {
        if (!(half_life > 0.0)) throw std::domain_error("exponential profile needs a positive half-life");
        return {Kind::exponential, 0.0, half_life};
    }

    /// Decay applied to the running average when folding in the parameters at step t.
    double beta(std::uint64_t t, double dt = 1.0) const {
        if (t < 1) throw std::invalid_argument("EMA update requires t >= 1");
        if (kind == Kind::power) return std::pow(1.0 - 1.0 / static_cast<double>(t), gamma + 1.0);
        return std::exp2(-dt / half_life);
    }
};

/// avg <- beta * avg + (1 - beta) * theta.
inline void ema_update(std::span<double> avg, std::span<const double> theta, double beta) {
    if (avg.size() != theta.size()) throw std::invalid_argument("ema_update: size mismatch");
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = beta * avg[i] + (1.0 - beta) * theta[i];
}

inline void ema_update(std::span<double> avg, std::span<const double> theta, std::uint64_t t, const EmaProfile& p) {
    ema_update(avg, theta, p.beta(t));
}

/// Inner product of two power profiles over [0, inf), written so that only
/// ratios <= 1 are raised to positive powers.
inline double profile_dot(double t_a, double gamma_a, double t_b, double gamma_b) {
    if (!(t_a > 0.0 && t_b > 0.0)) throw std::domain_error("profile_dot: times must be positive");
    const double ratio = t_a / t_b;
    const double e = t_a < t_b ? gamma_b : -gamma_a;
    const double t_max = std::max(t_a, t_b);
    return (gamma_a + 1.0) * (gamma_b + 1.0) * std::pow(ratio, e) / ((gamma_a + gamma_b + 1.0) * t_max);
}

struct ProfilePoint {
    double t;
    double gamma;
};

/// Rejects snapshot sets whose Gram matrix would be rank-deficient due to repeated profiles.
inline void check_distinct(const std::vector<ProfilePoint>& s) {
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = i + 1; j < s.size(); ++j) {
            const double dt = std::abs(s[i].t - s[j].t) / std::max(s[i].t, s[j].t);
            if (dt + std::abs(s[i].gamma - s[j].gamma) < 1e-12) {
                std::ostringstream os;
                os << "singular snapshot set: entries " << i << " and " << j << " share (t=" << s[i].t
                   << ", gamma=" << s[i].gamma << ")";
                throw std::runtime_error(os.str());
            }
        }
}

using Matrix = Eigen::MatrixXd;

inline Matrix gram(const std::vector<ProfilePoint>& a, const std::vector<ProfilePoint>& b) {
    Matrix m(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) m(i, j) = profile_dot(a[i].t, a[i].gamma, b[j].t, b[j].gamma);
    return m;
}

/// Column r of the result holds the snapshot weights that best reproduce target r in L2.
inline Matrix solve_posthoc_weights(const std::vector<ProfilePoint>& snapshots, const std::vector<ProfilePoint>& targets) {
    if (snapshots.empty()) throw std::invalid_argument("solve_posthoc_weights: no snapshots");
    check_distinct(snapshots);
    Matrix A = gram(snapshots, snapshots);
    Matrix B = gram(snapshots, targets);
    return A.partialPivLu().solve(B);
}

/// ||p_r - sum_i x_i p_i|| / ||p_r|| for one target and its weight vector.
inline double fit_residual(const std::vector<ProfilePoint>& snapshots, const ProfilePoint& target,
                           const Eigen::VectorXd& x) {
    Matrix A = gram(snapshots, snapshots);
    Matrix b = gram(snapshots, {target});
    const double rr = profile_dot(target.t, target.gamma, target.t, target.gamma);
    const double err2 = rr - 2.0 * x.dot(b.col(0)) + x.dot(A * x);
    return std::sqrt(std::max(err2, 0.0) / rr);
}

}  // namespace mpdiff
