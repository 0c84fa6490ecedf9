#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpdiff/mp_ops.hpp"
#include "mpdiff/network.hpp"
#include "mpdiff/rng.hpp"
#include "mpdiff/tensor.hpp"

namespace mpdiff {

/// Log-normal training noise levels: ln(sigma) ~ N(p_mean, p_std^2).
struct NoiseDist {
    double p_mean = -0.4;
    double p_std = 1.0;

    double sample(Rng& rng) const { return std::exp(p_mean + p_std * rng.normal()); }
    std::vector<double> sample(std::size_t n, Rng& rng) const {
        std::vector<double> out(n);
        for (auto& s : out) s = sample(rng);
        return out;
    }
};

/// Loss weight that equalizes the ideal-denoiser loss across noise levels.
inline double lambda_weight(double sigma, double sigma_data = 0.5) {
    if (!(sigma > 0.0)) throw std::domain_error("lambda_weight: sigma must be positive, got " + std::to_string(sigma));
    const double sd = sigma * sigma_data;
    return (sigma * sigma + sigma_data * sigma_data) / (sd * sd);
}

/// Squared error per batch item: [B] sums over elements (or means when per_element is set).
inline Tensor per_sample_sq_error(const Tensor& denoised, const Tensor& clean, bool per_element) {
    if (denoised.shape() != clean.shape()) throw shape_mismatch("dsm_loss", denoised.shape(), clean.shape());
    const std::size_t B = denoised.dim(0);
    Tensor e = reshape(square(denoised - clean), {B, denoised.size() / B});
    return per_element ? mean_axis(e, 1, false) : sum_axis(e, 1, false);
}

/// Denoising score-matching loss: per-sample sum of squared error, averaged over the batch.
inline Tensor dsm_loss(const Tensor& denoised, const Tensor& clean) {
    return mean(per_sample_sq_error(denoised, clean, false));
}

/// Learned log-variance u(sigma): Fourier features of c_noise followed by one weight-normalized linear map.
class UncertaintyHead {
public:
    UncertaintyHead(std::size_t channels, std::uint64_t seed, double sigma_data = 0.5)
        : sigma_data_(sigma_data) {
        Rng rng(seed, 0x75686561);
        bank_ = FourierBank(channels, rng);
        weight_ = make_weight("uncertainty.weight", {1, channels}, WeightMode::forced_wn, rng);
    }

    /// u for each sigma, shape [B].
    Tensor operator()(const std::vector<double>& sigma) const {
        std::vector<double> c(sigma.size());
        for (std::size_t i = 0; i < sigma.size(); ++i) c[i] = precondition(sigma[i], sigma_data_).c_noise;
        const std::size_t n = c.size();
        Tensor u = mp_linear(mp_fourier(Tensor(Shape{n}, std::move(c)), bank_), weight_);
        return reshape(u, {sigma.size()});
    }

    WeightParam& weight() { return weight_; }
    const WeightParam& weight() const { return weight_; }
    const FourierBank& bank() const { return bank_; }

private:
    double sigma_data_;
    FourierBank bank_;
    WeightParam weight_;
};

struct WeightedLoss {
    Tensor total;                     // scalar to differentiate
    std::vector<double> per_element;  // L(D; sigma_i), the per-element squared error
    std::vector<double> u;            // u(sigma_i)
};

/// mean_i [ lambda(sigma_i) / exp(u_i) * L_i + u_i ] with L_i the per-element mean squared error.
inline WeightedLoss weighted_loss(const Tensor& denoised, const Tensor& clean, const std::vector<double>& sigma,
                                  const Tensor& u, double sigma_data = 0.5) {
    const std::size_t B = denoised.dim(0);
    if (sigma.size() != B || u.size() != B)
        throw std::invalid_argument("weighted_loss: need one sigma and one u per batch item");
    Tensor L = per_sample_sq_error(denoised, clean, true);
    std::vector<double> lam(B);
    for (std::size_t i = 0; i < B; ++i) lam[i] = lambda_weight(sigma[i], sigma_data);
    Tensor uu = reshape(u, {B});
    Tensor terms = Tensor(Shape{B}, lam) * L / exp(uu) + uu;
    return {mean(terms), L.values(), uu.values()};
}

}  // namespace mpdiff
