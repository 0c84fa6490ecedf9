#pragma once

// Magnitude-preserving layers and normalization primitives, plus the plain
// (non-preserving) baselines they replace.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpdiff/rng.hpp"
#include "mpdiff/tensor.hpp"

namespace mpdiff {

inline constexpr double kNormEps = 1e-4;
inline constexpr double kSiluScale = 0.596;

enum class NormKind {
    rms_additive,  // x / (sqrt(mean x^2) + eps)
    l2_floor,      // x / max(||x||, eps)
};

/// Normalizes x viewed as [outer, n, inner]; each (outer, inner) fiber of length n
/// is divided by its norm. The backward pass is analytic so zero fibers stay finite.
inline Tensor normalize_fibers(const Tensor& x, std::size_t outer, std::size_t n, std::size_t inner, NormKind kind,
                               double eps) {
    if (outer * n * inner != x.size()) throw ShapeError("normalize_fibers: layout does not cover " + to_string(x.shape()));
    const auto& v = x.values();
    std::vector<double> out(v.size());
    std::vector<double> denom(outer * inner), norm(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                const double e = v[(o * n + k) * inner + i];
                s += e * e;
            }
            const std::size_t f = o * inner + i;
            if (kind == NormKind::rms_additive) {
                norm[f] = std::sqrt(s / static_cast<double>(n));
                denom[f] = norm[f] + eps;
            } else {
                norm[f] = std::sqrt(s);
                denom[f] = std::max(norm[f], eps);
            }
            for (std::size_t k = 0; k < n; ++k) out[(o * n + k) * inner + i] = v[(o * n + k) * inner + i] / denom[f];
        }
    return detail::make_result(
        x.shape(), std::move(out), {&x},
        [xn = x.node_, outer, n, inner, kind, eps, denom = std::move(denom), norm = std::move(norm)](
            const std::vector<double>& g) {
            auto& gx = xn->grad_buffer();
            const auto& v = xn->data;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t f = o * inner + i;
                    double gdotx = 0.0;
                    for (std::size_t k = 0; k < n; ++k) {
                        const std::size_t j = (o * n + k) * inner + i;
                        gdotx += g[j] * v[j];
                    }
                    const double d = denom[f];
                    double coef = 0.0;
                    if (kind == NormKind::rms_additive) {
                        if (norm[f] > 0.0) coef = gdotx / (d * d * static_cast<double>(n) * norm[f]);
                    } else if (norm[f] > eps) {
                        coef = gdotx / (d * d * d);
                    }
                    for (std::size_t k = 0; k < n; ++k) {
                        const std::size_t j = (o * n + k) * inner + i;
                        gx[j] += g[j] / d - v[j] * coef;
                    }
                }
        });
}

/// Per-position channel normalization to unit mean square.
inline Tensor pixel_norm(const Tensor& a, std::size_t axis = 1, double eps = kNormEps) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw ShapeError("pixel_norm: axis out of range for " + to_string(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    return normalize_fibers(a, outer, s[axis], inner, NormKind::rms_additive, eps);
}

/// Group RMS normalization over (channels in group x pixels) of a [B,C,...] tensor,
/// without mean subtraction or learned scale.
inline Tensor group_norm_simplified(const Tensor& a, std::size_t group_size, double eps = kNormEps) {
    if (a.rank() < 2 || group_size == 0 || a.dim(1) % group_size != 0)
        throw std::invalid_argument("group_norm_simplified: " + std::to_string(a.rank() < 2 ? 0 : a.dim(1)) +
                                    " channels not divisible by group size " + std::to_string(group_size));
    const std::size_t groups = a.dim(0) * (a.dim(1) / group_size);
    return normalize_fibers(a, groups, a.size() / groups, 1, NormKind::rms_additive, eps);
}

/// Classic group norm: mean subtraction, variance normalization, learned per-channel scale and shift.
inline Tensor group_norm_learned(const Tensor& a, std::size_t group_size, const Tensor& scale, const Tensor& shift,
                                 double eps = 1e-5) {
    if (a.rank() != 4 || group_size == 0 || a.dim(1) % group_size != 0)
        throw std::invalid_argument("group_norm_learned: channel count not divisible by group size " +
                                    std::to_string(group_size));
    const std::size_t B = a.dim(0), C = a.dim(1), G = C / group_size;
    Tensor g = reshape(a, {B, G, a.size() / (B * G)});
    Tensor centered = g - mean_axis(g, 2);
    Tensor normed = centered / sqrt(mean_axis(square(centered), 2) + eps);
    Tensor back = reshape(normed, a.shape());
    return back * reshape(scale, {1, C, 1, 1}) + reshape(shift, {1, C, 1, 1});
}

/// Each output slice w[i, ...] divided by its L2 norm (floored at eps).
inline Tensor weight_normalize(const Tensor& w, double eps = kNormEps) {
    const std::size_t out = w.dim(0);
    return normalize_fibers(w, out, w.size() / out, 1, NormKind::l2_floor, eps);
}

enum class WeightMode { plain, wn, forced_wn };

/// A trainable weight tensor [out, fan_in...] that may be used through weight normalization.
struct WeightParam {
    std::string name;
    Tensor value;
    WeightMode mode = WeightMode::wn;

    std::size_t fan_in() const { return value.size() / value.dim(0); }

    /// The weight as seen by the layer: raw in plain mode, else unit-L2 rows
    /// (unit-RMS rows scaled by 1/sqrt(fan_in)).
    Tensor effective() const {
        if (mode == WeightMode::plain) return value;
        return weight_normalize(value);
    }
};

inline WeightParam make_weight(std::string name, Shape shape, WeightMode mode, Rng& rng) {
    WeightParam p{std::move(name), Tensor(std::move(shape)), mode};
    if (mode == WeightMode::plain) {
        const double bound = std::sqrt(3.0 / static_cast<double>(p.fan_in()));
        for (auto& v : p.value.mutable_data()) v = bound * (2.0 * rng.uniform() - 1.0);
    } else {
        for (auto& v : p.value.mutable_data()) v = rng.normal();
    }
    p.value.set_requires_grad();
    return p;
}

/// a [B, fan_in] -> [B, out].
inline Tensor mp_linear(const Tensor& a, const WeightParam& w) {
    if (a.rank() != 2 || w.value.rank() != 2 || a.dim(1) != w.fan_in())
        throw shape_mismatch("mp_linear", a.shape(), w.value.shape());
    return matmul(a, permute(w.effective(), {1, 0}));
}

/// 'same'-padded convolution of x [B,C,H,W] with w [O,C,k,k].
inline Tensor mp_conv(const Tensor& x, const WeightParam& w) { return conv2d(x, w.effective()); }

inline Tensor mp_silu(const Tensor& a) { return silu(a) * (1.0 / kSiluScale); }

inline void check_blend(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("blend factor must lie in [0,1], got " + std::to_string(t));
}

inline Tensor mp_sum(const Tensor& a, const Tensor& b, double t) {
    check_blend(t);
    if (a.shape() != b.shape()) throw shape_mismatch("mp_sum", a.shape(), b.shape());
    const double k = 1.0 / std::sqrt((1.0 - t) * (1.0 - t) + t * t);
    return a * ((1.0 - t) * k) + b * (t * k);
}

/// Concatenation along axis with per-part scaling so each part contributes by weight (1-t) : t.
inline Tensor mp_cat(const Tensor& a, const Tensor& b, double t, std::size_t axis = 1) {
    check_blend(t);
    const double na = static_cast<double>(a.dim(axis)), nb = static_cast<double>(b.dim(axis));
    const double c = std::sqrt((na + nb) / ((1.0 - t) * (1.0 - t) + t * t));
    return concat({a * (c / std::sqrt(na) * (1.0 - t)), b * (c / std::sqrt(nb) * t)}, axis);
}

/// Fixed random frequencies and phases; never trained.
class FourierBank {
public:
    FourierBank() = default;
    FourierBank(std::size_t channels, Rng& rng) : freqs_(channels), phases_(channels) {
        for (auto& f : freqs_) f = rng.normal();
        for (auto& p : phases_) p = rng.uniform();
    }
    FourierBank(std::vector<double> freqs, std::vector<double> phases)
        : freqs_(std::move(freqs)), phases_(std::move(phases)) {
        if (freqs_.size() != phases_.size()) throw std::invalid_argument("FourierBank: freq/phase count mismatch");
    }

    std::size_t channels() const { return freqs_.size(); }
    const std::vector<double>& freqs() const { return freqs_; }
    const std::vector<double>& phases() const { return phases_; }

private:
    std::vector<double> freqs_;
    std::vector<double> phases_;
};

/// a [B] -> [B, N] with b_i = sqrt(2) cos(2 pi (f_i a + phi_i)).
inline Tensor mp_fourier(const Tensor& a, const FourierBank& bank) {
    const std::size_t n = bank.channels();
    Tensor f(Shape{1, n}, bank.freqs());
    Tensor p(Shape{1, n}, bank.phases());
    Tensor arg = reshape(a, {a.size(), 1}) * f + p;
    return cos(arg * (2.0 * std::numbers::pi)) * std::numbers::sqrt2;
}

/// Learned scalar gain.
inline Tensor gain(const Tensor& a, const Tensor& g) { return scale_by(a, g); }

struct AttentionResult {
    Tensor out;   // [B,C,H,W], before combination with the main path
    Tensor map;   // [B*heads, HW, HW], rows sum to 1
};

/// Multi-head self-attention over the pixels of x [B,C,H,W] with 1x1 projections.
/// In cosine mode queries, keys and values are pixel-normalized per head so the
/// logits are sqrt(head_dim) times the cosine between query and key.
inline AttentionResult attention(const Tensor& x, const WeightParam& wq, const WeightParam& wk, const WeightParam& wv,
                                 const WeightParam& wo, std::size_t heads, bool cosine) {
    if (x.rank() != 4) throw ShapeError("attention: needs [B,C,H,W], got " + to_string(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
    if (heads == 0 || C % heads != 0)
        throw std::invalid_argument("attention: " + std::to_string(C) + " channels not divisible by " +
                                    std::to_string(heads) + " heads");
    const std::size_t c = C / heads;
    auto split = [&](const Tensor& t) {
        Tensor r = reshape(t, {B * heads, c, P});
        return cosine ? pixel_norm(r, 1) : r;
    };
    Tensor q = split(mp_conv(x, wq));
    Tensor k = split(mp_conv(x, wk));
    Tensor v = split(mp_conv(x, wv));
    Tensor logits = matmul(permute(q, {0, 2, 1}), k) * (1.0 / std::sqrt(static_cast<double>(c)));
    Tensor map = softmax(logits);
    Tensor y = matmul(v, permute(map, {0, 2, 1}));
    return {mp_conv(reshape(y, x.shape()), wo), map};
}

/// Root-mean-square of a span.
inline double rms(std::span<const double> v) {
    return v.empty() ? 0.0 : std::sqrt(sum_of_squares(v) / static_cast<double>(v.size()));
}

}  // namespace mpdiff
