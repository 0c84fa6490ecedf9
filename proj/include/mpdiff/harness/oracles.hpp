#pragma once

// Independent reference computations. None of these call the routine they check.

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdint>
#include <vector>

#include "mpdiff/rng.hpp"
#include "mpdiff/sampler.hpp"
#include "mpdiff/tensor.hpp"

namespace mpdiff::oracle {

/// Positive real root of gamma^3 + 7 gamma^2 + (16 - s^-2) gamma + (12 - s^-2) via companion-matrix eigenvalues.
inline double gamma_cubic_root(double sigma_rel) {
    const double k = 1.0 / (sigma_rel * sigma_rel);
    Eigen::Matrix3d c = Eigen::Matrix3d::Zero();
    c(0, 0) = -7.0;
    c(0, 1) = -(16.0 - k);
    c(0, 2) = -(12.0 - k);
    c(1, 0) = 1.0;
    c(2, 1) = 1.0;
    Eigen::EigenSolver<Eigen::Matrix3d> es(c);
    double best = -1.0;
    for (int i = 0; i < 3; ++i) {
        auto z = es.eigenvalues()(i);
        if (std::abs(z.imag()) < 1e-9 && z.real() > 0) best = z.real();
    }
    return best;
}

/// Integral of two power profiles by quadrature over the shared support, with the
/// prefactor assembled in log space so large time ratios do not overflow.
inline double profile_dot_quadrature(double ta, double ga, double tb, double gb) {
    const double lo = std::min(ta, tb);
    const double log_pref = std::log(ga + 1) + std::log(gb + 1) + (ga + gb + 1) * std::log(lo) -
                            (ga + 1) * std::log(ta) - (gb + 1) * std::log(tb);
    auto f = [&](double s) { return std::pow(s, ga + gb); };
    const double integral = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, 0.0, 1.0, 15, 1e-14);
    return std::exp(log_pref) * integral;
}

/// Discrete weight the power average assigns to step k of T.
inline double power_ema_weight(std::uint64_t k, std::uint64_t T, double gamma) {
    const double e = gamma + 1.0;
    return (std::pow(double(k), e) - std::pow(double(k - 1), e)) / std::pow(double(T), e);
}

/// Average at step T of a recorded trajectory (entry 0 is the initial value, which gets zero weight).
inline std::vector<double> power_ema_direct(const std::vector<std::vector<double>>& traj, double gamma) {
    const std::uint64_t T = traj.size() - 1;
    std::vector<double> out(traj[0].size(), 0.0);
    for (std::uint64_t k = 1; k <= T; ++k) {
        const double w = power_ema_weight(k, T, gamma);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * traj[k][i];
    }
    return out;
}

/// Exact denoiser for data drawn from N(0, sigma_data^2 I).
inline DenoiseFn ideal_gaussian_denoiser(double sigma_data) {
    return [sigma_data](const Tensor& x, double sigma) {
        return x * (sigma_data * sigma_data / (sigma * sigma + sigma_data * sigma_data));
    };
}

/// Relative error of the sampler state at sigma_min against the closed-form flow of the ideal
/// Gaussian denoiser, x(sigma) = x(sigma_max) * sqrt((sigma^2 + sd^2) / (sigma_max^2 + sd^2)).
inline double heun_endpoint_error(std::size_t steps, double sigma_data = 0.5, std::uint64_t seed = 17) {
    SamplerConfig cfg;
    cfg.steps = steps;
    Rng r(seed);
    Tensor x0 = Tensor::randn({4, 1, 4, 4}, r, cfg.sigma_max);
    Tensor at_min;
    sample_from(ideal_gaussian_denoiser(sigma_data), cfg, x0, [&](std::size_t i, double, const Tensor& x) {
        if (i + 2 == steps) at_min = x.clone();
    });
    const double k = std::sqrt((cfg.sigma_min * cfg.sigma_min + sigma_data * sigma_data) /
                               (cfg.sigma_max * cfg.sigma_max + sigma_data * sigma_data));
    double num = 0, den = 0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        num += std::pow(at_min.at(i) - k * x0.at(i), 2);
        den += std::pow(k * x0.at(i), 2);
    }
    return std::sqrt(num / den);
}

/// Least-squares slope of log(err) against log(1/steps).
inline double convergence_slope(const std::vector<std::size_t>& steps, const std::vector<double>& err) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(steps.size());
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const double x = -std::log(double(steps[i])), y = std::log(err[i]);
        sx += x, sy += y, sxx += x * x, sxy += x * y;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace mpdiff::oracle
