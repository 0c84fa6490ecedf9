#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "mpdiff/mp_ops.hpp"

namespace mpdiff {

/// alpha(t) = alpha_ref / sqrt(max(t / t_ref, 1)), times an optional linear warmup.
struct LrSchedule {
    double alpha_ref = 1e-2;
    double t_ref = std::numeric_limits<double>::infinity();
    double rampup = 0.0;  // warmup length in steps; 0 disables

    double at(double t) const {
        if (t < 0) throw std::invalid_argument("learning rate requested for negative step");
        double lr = alpha_ref;
        if (std::isfinite(t_ref)) lr /= std::sqrt(std::max(t / t_ref, 1.0));
        if (rampup > 0.0) lr *= std::min(t / rampup, 1.0);
        return lr;
    }
};

inline double lr_at(double t, const LrSchedule& s) { return s.at(t); }

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list. A parameter without a
/// gradient is treated as having a zero gradient.
class Adam {
public:
    Adam(std::vector<WeightParam*> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        for (auto* p : params_) {
            m_.emplace_back(p->value.size(), 0.0);
            v_.emplace_back(p->value.size(), 0.0);
        }
    }

    void step(double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Tensor& w = params_[k]->value;
            auto data = w.mutable_data();
            const bool has = w.has_grad();
            std::span<const double> g = has ? w.grad() : std::span<const double>();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double gi = has ? g[i] : 0.0;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                data[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->value.zero_grad();
    }

    std::size_t steps() const { return t_; }
    const std::vector<WeightParam*>& params() const { return params_; }
    const std::vector<double>& first_moment(std::size_t k) const { return m_.at(k); }
    const std::vector<double>& second_moment(std::size_t k) const { return v_.at(k); }

private:
    std::vector<WeightParam*> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

/// Plain gradient descent; used to probe weight growth under weight normalization.
inline void sgd_step(const std::vector<WeightParam*>& params, double lr) {
    for (auto* p : params) {
        if (!p->value.has_grad()) continue;
        auto data = p->value.mutable_data();
        auto g = p->value.grad();
        for (std::size_t i = 0; i < data.size(); ++i) data[i] -= lr * g[i];
    }
}

inline bool forced_eligible(const WeightParam& p) { return p.mode == WeightMode::forced_wn && p.fan_in() >= 2; }

/// Rescales every output slice of eligible weights to norm sqrt(fan_in). Zero slices are left alone.
inline void forced_renormalize(const std::vector<WeightParam*>& params) {
    for (auto* p : params) {
        if (!forced_eligible(*p)) continue;
        const std::size_t f = p->fan_in();
        const double target = std::sqrt(static_cast<double>(f));
        auto data = p->value.mutable_data();
        for (std::size_t o = 0; o < p->value.dim(0); ++o) {
            std::span<double> row = data.subspan(o * f, f);
            const double n = std::sqrt(sum_of_squares(row));
            if (n == 0.0) continue;
            const double k = target / n;
            for (auto& v : row) v *= k;
        }
    }
}

/// Replaces non-finite gradient entries with zero; returns how many were replaced.
inline std::size_t sanitize_grads(const std::vector<WeightParam*>& params) {
    std::size_t count = 0;
    for (auto* p : params) {
        if (!p->value.has_grad()) continue;
        for (auto& g : p->value.mutable_grad())
            if (!std::isfinite(g)) {
                g = 0.0;
                ++count;
            }
    }
    return count;
}

}  // namespace mpdiff
