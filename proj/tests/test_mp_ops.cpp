#include <gtest/gtest.h>

#include <cmath>

#include "mpdiff/grad_check.hpp"
#include "mpdiff/mp_ops.hpp"

using namespace mpdiff;

namespace {

Tensor vec(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
}

double second_moment(const Tensor& t) { return sum_of_squares(t.data()) / static_cast<double>(t.size()); }

WeightParam wn_weight(const char* name, Shape shape, Rng& r) { return make_weight(name, std::move(shape), WeightMode::wn, r); }

}  // namespace

TEST(PixelNorm, Examples) {
    Tensor a(Shape{1, 4}, std::vector<double>{1, 1, 1, 1});
    Tensor b = pixel_norm(a);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(b.at(i), 1.0, 2e-4);

    Tensor c = pixel_norm(Tensor(Shape{1, 4}, std::vector<double>{2, 0, 0, 0}));
    EXPECT_NEAR(c.at(0), 2.0, 1e-3);
    EXPECT_EQ(c.at(1), 0.0);

    Tensor d = pixel_norm(Tensor(Shape{1, 2}, std::vector<double>{3, 4}));
    const double denom = std::sqrt(12.5) + 1e-4;
    EXPECT_NEAR(d.at(0), 3 / denom, 1e-15);
    EXPECT_NEAR(d.at(1), 4 / denom, 1e-15);
}

TEST(PixelNorm, NormalizesChannelAxisPerPosition) {
    Rng r(1);
    Tensor x = Tensor::randn({2, 8, 3, 3}, r, 5.0);
    Tensor y = pixel_norm(x, 1, 0.0);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t p = 0; p < 9; ++p) {
            double s = 0;
            for (std::size_t c = 0; c < 8; ++c) s += std::pow(y.at((b * 8 + c) * 9 + p), 2);
            EXPECT_NEAR(s / 8, 1.0, 1e-12);
        }
}

TEST(GroupNorm, Examples) {
    Tensor ones(Shape{2, 4, 3, 3}, 1.0);
    Tensor y = group_norm_simplified(ones, 2);
    for (double v : y.data()) EXPECT_NEAR(v, 1.0, 2e-4);

    Tensor zeros(Shape{1, 4, 2, 2}, 0.0);
    Tensor zn = group_norm_simplified(zeros, 2);
    for (double v : zn.data()) EXPECT_EQ(v, 0.0);

    Rng r(2);
    Tensor x = Tensor::randn({2, 8, 4, 4}, r, 3.0);
    Tensor z = group_norm_simplified(x, 4);
    for (std::size_t g = 0; g < 4; ++g) {
        std::span<const double> part = z.data().subspan(g * 64, 64);
        EXPECT_NEAR(rms(part), 1.0, 1e-3);
    }
    EXPECT_THROW(group_norm_simplified(x, 3), std::invalid_argument);
}

TEST(WeightNormalize, Examples) {
    Tensor w(Shape{1, 2}, std::vector<double>{3, 4});
    Tensor y = weight_normalize(w);
    EXPECT_NEAR(y.at(0), 0.6, 1e-15);
    EXPECT_NEAR(y.at(1), 0.8, 1e-15);

    Tensor z = weight_normalize(Tensor(Shape{1, 2}, 0.0));
    EXPECT_EQ(z.at(0), 0.0);
    EXPECT_EQ(z.at(1), 0.0);
}

TEST(WeightNormalize, ScaleInvariance) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng r(seed);
        Tensor w = Tensor::randn({4, 3, 3, 3}, r);
        const double c = std::exp(4.0 * (r.uniform() - 0.5));
        Tensor a = weight_normalize(w);
        Tensor b = weight_normalize(w * c);
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
    }
}

TEST(MpLinear, OneHotRowsFanInOneIsIdentity) {
    WeightParam w{"w", Tensor(Shape{1, 1}, std::vector<double>{5.0}), WeightMode::wn};
    Tensor a(Shape{3, 1}, std::vector<double>{1.5, -2, 7});
    Tensor b = mp_linear(a, w);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(b.at(i), a.at(i));
}

TEST(MpLinear, MonteCarloMagnitude) {
    Rng r(3);
    WeightParam w = wn_weight("w", {8, 16}, r);
    const std::size_t n = 100000;
    Tensor a = Tensor::randn({n, 16}, r);
    Tensor b = mp_linear(a, w);
    for (std::size_t o = 0; o < 8; ++o) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += b.at(i * 8 + o) * b.at(i * 8 + o);
        EXPECT_NEAR(std::sqrt(s / n), 1.0, 0.02);
    }
}

TEST(MpLinear, InvariantToWeightScale) {
    Rng r(4);
    WeightParam w = wn_weight("w", {5, 7}, r);
    Tensor a = Tensor::randn({3, 7}, r);
    Tensor b1 = mp_linear(a, w);
    WeightParam w10{"w", w.value.detach() * 10.0, WeightMode::wn};
    Tensor b2 = mp_linear(a, w10);
    for (std::size_t i = 0; i < b1.size(); ++i) EXPECT_NEAR(b1.at(i), b2.at(i), 1e-10 * std::max(1.0, std::abs(b1.at(i))));
}

TEST(MpConv, MonteCarloMagnitudeAndScaleInvariance) {
    Rng r(5);
    WeightParam w = wn_weight("w", {4, 6, 3, 3}, r);
    Tensor x = Tensor::randn({64, 6, 12, 12}, r);
    Tensor y = mp_conv(x, w);
    // Interior pixels see the full receptive field.
    for (std::size_t o = 0; o < 4; ++o) {
        double s = 0;
        std::size_t cnt = 0;
        for (std::size_t b = 0; b < 64; ++b)
            for (std::size_t i = 1; i < 11; ++i)
                for (std::size_t j = 1; j < 11; ++j) {
                    const double v = y.at(((b * 4 + o) * 12 + i) * 12 + j);
                    s += v * v;
                    ++cnt;
                }
        EXPECT_NEAR(std::sqrt(s / cnt), 1.0, 0.03);
    }
    WeightParam w2{"w", w.value.detach() * 0.01, WeightMode::wn};
    Tensor y2 = mp_conv(x, w2);
    for (std::size_t i = 0; i < y.size(); i += 97) EXPECT_NEAR(y.at(i), y2.at(i), 1e-10);
}

TEST(MpConv, GradientOrthogonalToWeights) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng r(seed);
        WeightParam w = wn_weight("w", {3, 2, 3, 3}, r);
        for (auto& v : w.value.mutable_data()) v *= 0.1 + 5.0 * r.uniform();
        Tensor x = Tensor::randn({2, 2, 5, 5}, r);
        Tensor target = Tensor::randn({2, 3, 5, 5}, r);
        sum(square(mp_conv(x, w) - target)).backward();
        const std::size_t f = w.fan_in();
        for (std::size_t o = 0; o < 3; ++o) {
            double dot = 0, nw = 0, ng = 0;
            for (std::size_t i = 0; i < f; ++i) {
                const double wi = w.value.at(o * f + i), gi = w.value.grad()[o * f + i];
                dot += wi * gi;
                nw += wi * wi;
                ng += gi * gi;
            }
            EXPECT_LE(std::abs(dot) / std::sqrt(nw * ng), 1e-6);
        }
    }
}

TEST(Attention, IdenticalPixelsGiveUniformWeights) {
    Rng r(6);
    WeightParam q = wn_weight("q", {4, 4, 1, 1}, r), k = wn_weight("k", {4, 4, 1, 1}, r),
                v = wn_weight("v", {4, 4, 1, 1}, r), o = wn_weight("o", {4, 4, 1, 1}, r);
    Tensor col = Tensor::randn({1, 4, 1, 1}, r);
    Tensor x = col + Tensor(Shape{1, 4, 3, 3}, 0.0);
    AttentionResult res = attention(x, q, k, v, o, 2, true);
    for (double m : res.map.data()) EXPECT_NEAR(m, 1.0 / 9.0, 1e-14);
}

TEST(Attention, MapInvariantToQueryWeightScaleAndBounded) {
    Rng r(7);
    WeightParam q = wn_weight("q", {8, 8, 1, 1}, r), k = wn_weight("k", {8, 8, 1, 1}, r),
                v = wn_weight("v", {8, 8, 1, 1}, r), o = wn_weight("o", {8, 8, 1, 1}, r);
    Tensor x = Tensor::randn({2, 8, 3, 3}, r);
    AttentionResult a = attention(x, q, k, v, o, 2, true);
    WeightParam q100{"q", q.value.detach() * 100.0, WeightMode::wn};
    AttentionResult b = attention(x, q100, k, v, o, 2, true);
    for (std::size_t i = 0; i < a.map.size(); ++i) EXPECT_NEAR(a.map.at(i), b.map.at(i), 1e-8);

    // Raw projections: invariant up to the pixel-norm eps.
    WeightParam qp{"q", q.value.detach(), WeightMode::plain}, kp{"k", k.value.detach(), WeightMode::plain};
    WeightParam qp100{"q", q.value.detach() * 100.0, WeightMode::plain};
    AttentionResult c = attention(x, qp, kp, v, o, 2, true);
    AttentionResult d = attention(x, qp100, kp, v, o, 2, true);
    for (std::size_t i = 0; i < c.map.size(); ++i) EXPECT_NEAR(c.map.at(i), d.map.at(i), 1e-4);

    // Logits are cosines scaled by sqrt(head_dim): recover them from the map rows.
    const std::size_t P = 9;
    const double bound = std::sqrt(4.0);
    for (std::size_t row = 0; row < a.map.size() / P; ++row) {
        double lo = 1e300, hi = -1e300, s = 0;
        for (std::size_t j = 0; j < P; ++j) {
            const double m = a.map.at(row * P + j);
            s += m;
            lo = std::min(lo, std::log(m));
            hi = std::max(hi, std::log(m));
        }
        EXPECT_NEAR(s, 1.0, 1e-14);
        EXPECT_LE(hi - lo, 2 * bound + 1e-12);
    }
}

TEST(Attention, HeadsMustDivideChannels) {
    Rng r(8);
    WeightParam q = wn_weight("q", {6, 6, 1, 1}, r);
    EXPECT_THROW(attention(Tensor::randn({1, 6, 2, 2}, r), q, q, q, q, 4, true), std::invalid_argument);
}

TEST(MpFourier, Examples) {
    FourierBank zero_f(std::vector<double>{0, 0, 0}, std::vector<double>{0.1, 0.4, 0.9});
    Tensor b1 = mp_fourier(vec({0.3}), zero_f);
    Tensor b2 = mp_fourier(vec({-7.0}), zero_f);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(b1.at(i), std::sqrt(2.0) * std::cos(2 * std::numbers::pi * zero_f.phases()[i]), 1e-15);
        EXPECT_EQ(b1.at(i), b2.at(i));
    }
    FourierBank unit(std::vector<double>{1, 1}, std::vector<double>{0, 0});
    Tensor b3 = mp_fourier(vec({0.0}), unit);
    EXPECT_NEAR(b3.at(0), std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(b3.at(1), std::sqrt(2.0), 1e-15);
}

TEST(MpFourier, ExpectedMagnitudeIsOne) {
    Rng r(9);
    FourierBank bank(1000000, r);
    Tensor b = mp_fourier(vec({0.37}), bank);
    EXPECT_NEAR(second_moment(b), 1.0, 0.01);
}

TEST(MpSilu, Examples) {
    EXPECT_EQ(mp_silu(vec({0.0})).at(0), 0.0);
    const double want = (1.0 / (1.0 + std::exp(-1.0))) / 0.596;
    EXPECT_NEAR(mp_silu(vec({1.0})).at(0), want, 1e-15);
    EXPECT_NEAR(want, 1.2267, 1e-4);
}

TEST(MpSilu, GradCheck) {
    Rng r(10);
    auto rep = grad_check([](const Tensor& x) { return sum(mp_silu(x)); }, Tensor::randn({32}, r), 1e-5, 1e-5);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(MpLinear, GradCheckThroughWeightNormalization) {
    Rng r(11);
    Tensor a = Tensor::randn({4, 5}, r);
    auto rep = grad_check(
        [&](const Tensor& w) {
            WeightParam p{"w", w, WeightMode::wn};
            return sum(mp_linear(a, p));
        },
        Tensor::randn({3, 5}, r), 1e-6, 1e-5);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(GroupAndPixelNorm, GradCheck) {
    Rng r(12);
    auto rep = grad_check([](const Tensor& x) { return sum(pixel_norm(x) * x); }, Tensor::randn({2, 4, 2, 2}, r));
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
    auto rep2 = grad_check([](const Tensor& x) { return sum(group_norm_simplified(x, 2) * x); },
                           Tensor::randn({2, 4, 2, 2}, r));
    EXPECT_TRUE(rep2.passed) << rep2.max_rel_error;
    Tensor scale = Tensor::randn({4}, r), shift = Tensor::randn({4}, r);
    auto rep3 = grad_check([&](const Tensor& x) { return sum(group_norm_learned(x, 2, scale, shift) * x); },
                           Tensor::randn({2, 4, 2, 2}, r));
    EXPECT_TRUE(rep3.passed) << rep3.max_rel_error;
}

TEST(MpSum, Examples) {
    Rng r(13);
    Tensor a = Tensor::randn({5}, r), b = Tensor::randn({5}, r);
    Tensor s0 = mp_sum(a, b, 0.0);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(s0.at(i), a.at(i));
    EXPECT_NEAR(mp_sum(vec({1.0}), vec({1.0}), 0.5).at(0), std::sqrt(2.0), 1e-15);
    EXPECT_THROW(mp_sum(a, vec({1.0}), 0.3), ShapeError);
    EXPECT_THROW(mp_sum(a, b, 1.5), std::invalid_argument);
}

TEST(MpSum, PreservesVariance) {
    Rng r(14);
    const std::size_t n = 100000;
    Tensor s = mp_sum(Tensor::randn({n}, r), Tensor::randn({n}, r), 0.3);
    EXPECT_NEAR(second_moment(s), 1.0, 0.03);
}

TEST(MpCat, EqualSizesHalfBlendIsPlainConcat) {
    Rng r(15);
    Tensor a = Tensor::randn({2, 3}, r), b = Tensor::randn({2, 3}, r);
    Tensor c = mp_cat(a, b, 0.5);
    Tensor d = concat({a, b}, 1);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c.at(i), d.at(i), 1e-15);
}

TEST(MpCat, MagnitudePreservedForAnySplit) {
    Rng r(16);
    const std::size_t n = 100000;
    for (auto [na, nb, t] : {std::tuple{1ul, 15ul, 0.5}, {4ul, 4ul, 0.3}, {3ul, 9ul, 0.8}}) {
        Tensor c = mp_cat(Tensor::randn({n / (na + nb), na}, r), Tensor::randn({n / (na + nb), nb}, r), t);
        EXPECT_NEAR(std::sqrt(second_moment(c)), 1.0, 0.02) << na << ":" << nb << " t=" << t;
    }
}

TEST(MpCat, HalfBlendEqualisesContributionsAcrossUnevenSplit) {
    Rng r(17);
    const std::size_t n = 20000;
    Tensor c = mp_cat(Tensor::randn({n, 1}, r), Tensor::randn({n, 15}, r), 0.5);
    double ea = 0, eb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ea += std::pow(c.at(i * 16), 2);
        for (std::size_t j = 1; j < 16; ++j) eb += std::pow(c.at(i * 16 + j), 2);
    }
    EXPECT_NEAR(ea / eb, 1.0, 0.02);
}

TEST(MpCat, ConsistentWithMpSumOfZeroPaddedHalves) {
    Rng r(18);
    Tensor a = Tensor::randn({3, 4}, r), b = Tensor::randn({3, 4}, r);
    Tensor z(Shape{3, 4}, 0.0);
    for (double t : {0.1, 0.5, 0.7}) {
        Tensor c = mp_cat(a, b, t);
        Tensor s = mp_sum(concat({a, z}, 1), concat({z, b}, 1), t) * std::sqrt(2.0);
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c.at(i), s.at(i), 1e-14);
    }
}

TEST(Gain, ZeroInitUnitAndGradient) {
    Rng r(19);
    Tensor a = Tensor::randn({6}, r);
    Tensor g = Tensor::scalar(0.0).set_requires_grad();
    Tensor fresh = gain(a, g);
    for (double v : fresh.data()) EXPECT_EQ(v, 0.0);
    Tensor one = Tensor::scalar(1.0);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(gain(a, one).at(i), a.at(i));
    sum(gain(a, g)).backward();
    double want = 0;
    for (double v : a.data()) want += v;
    EXPECT_NEAR(g.grad()[0], want, 1e-12);
    auto rep = grad_check([&](const Tensor& gg) { return sum(gain(a, gg)); }, Tensor::scalar(0.7));
    EXPECT_TRUE(rep.passed);
}

TEST(MagnitudePreservation, UnitInputsGiveUnitOutputs) {
    Rng r(20);
    const std::size_t n = 200000;
    Tensor x = Tensor::randn({n}, r);
    // Monte-Carlo standard error of a second moment of N(0,1) data is sqrt(2/n).
    const double tol = 3.0 * std::sqrt(2.0 / n) * 1.5;
    EXPECT_NEAR(second_moment(mp_silu(x)), 0.35576 / (0.596 * 0.596), tol + 2e-3);
    EXPECT_NEAR(second_moment(mp_sum(x, Tensor::randn({n}, r), 0.3)), 1.0, tol);
    EXPECT_NEAR(second_moment(pixel_norm(reshape(x, {n / 8, 8}))), 1.0, 1e-3);
}
