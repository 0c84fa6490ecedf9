#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include <unistd.h>

#include "mpdiff/harness/oracles.hpp"
#include "mpdiff/sampler.hpp"

using namespace mpdiff;

namespace {

constexpr double kSigmaData = 0.5;

const DenoiseFn ideal_gaussian = oracle::ideal_gaussian_denoiser(kSigmaData);

}  // namespace

TEST(SigmaSteps, EndpointsAndMonotone) {
    SamplerConfig cfg;
    auto s = sigma_steps(cfg);
    ASSERT_EQ(s.size(), 33u);
    EXPECT_EQ(s[0], 80.0);
    EXPECT_EQ(s[31], 0.002);
    EXPECT_EQ(s[32], 0.0);
    for (std::size_t n = 2; n <= 256; ++n) {
        cfg.steps = n;
        auto t = sigma_steps(cfg);
        for (std::size_t i = 0; i + 1 < t.size(); ++i) ASSERT_GT(t[i], t[i + 1]) << n << " " << i;
    }
    cfg.steps = 0;
    EXPECT_THROW(sigma_steps(cfg), std::invalid_argument);
}

TEST(Guidance, Examples) {
    Rng r(1);
    Tensor x = Tensor::randn({2, 3}, r);
    DenoiseFn cond = [](const Tensor& v, double) { return v.clone(); };
    DenoiseFn uncond = [](const Tensor& v, double) { return v * 0.0; };
    Tensor two = guided_denoiser(cond, uncond, 2.0)(x, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(two.at(i), 2.0 * x.at(i));
    Tensor one = guided_denoiser(cond, uncond, 1.0)(x, 1.0);
    EXPECT_EQ(std::vector<double>(one.data().begin(), one.data().end()),
              std::vector<double>(x.data().begin(), x.data().end()));
    Tensor zero = guided_denoiser(cond, uncond, 0.0)(x, 1.0);
    for (double v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(Guidance, AffineInWeightForLinearPair) {
    Rng r(2);
    Tensor bias = Tensor::randn({1, 5}, r);
    DenoiseFn cond = [&](const Tensor& v, double s) { return v * (1.0 / (1.0 + s)) + bias; };
    DenoiseFn uncond = [](const Tensor& v, double s) { return v * (0.3 / (1.0 + s * s)); };
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = Tensor::randn({1, 5}, r, 3.0);
        const double sigma = 0.01 + 10 * r.uniform();
        Tensor d0 = guided_denoiser(cond, uncond, 0.0)(x, sigma);
        Tensor d1 = guided_denoiser(cond, uncond, 1.0)(x, sigma);
        for (double w : {-0.5, 0.5, 2.0, 3.7}) {
            Tensor dw = guided_denoiser(cond, uncond, w)(x, sigma);
            for (std::size_t i = 0; i < x.size(); ++i)
                EXPECT_NEAR(dw.at(i), d0.at(i) + w * (d1.at(i) - d0.at(i)), 1e-12);
        }
    }
}

TEST(Sampler, NfeAndDeterminism) {
    SamplerConfig cfg;
    std::size_t calls = 0;
    DenoiseFn counted = [&](const Tensor& x, double s) {
        ++calls;
        return ideal_gaussian(x, s);
    };
    Rng a(5), b(5);
    SampleResult ra = sample(counted, cfg, {2, 1, 4, 4}, a);
    EXPECT_EQ(ra.nfe, 63u);
    EXPECT_EQ(calls, 63u);
    SampleResult rb = sample(counted, cfg, {2, 1, 4, 4}, b);
    EXPECT_EQ(std::vector<double>(ra.x.data().begin(), ra.x.data().end()),
              std::vector<double>(rb.x.data().begin(), rb.x.data().end()));
    // Guidance does not change the count.
    cfg.guidance = 2.0;
    Rng c(5);
    EXPECT_EQ(sample(guided_denoiser(counted, ideal_gaussian, 2.0), cfg, {1, 1, 2, 2}, c).nfe, 63u);
}

// Scalar Heun recurrence for the ideal denoiser, written independently of the tensor path.
double scalar_heun_at_sigma_min(std::size_t n, double x) {
    const double a = std::pow(80.0, 1 / 7.0), b = std::pow(0.002, 1 / 7.0);
    auto sig = [&](std::size_t i) { return std::pow(a + double(i) / double(n - 1) * (b - a), 7.0); };
    auto slope = [](double v, double s) { return (v - kSigmaData * kSigmaData / (s * s + kSigmaData * kSigmaData) * v) / s; };
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double h = sig(i + 1) - sig(i);
        const double d = slope(x, sig(i));
        x += 0.5 * h * (d + slope(x + h * d, sig(i + 1)));
    }
    return x;
}

TEST(Sampler, MatchesScalarRecurrence) {
    SamplerConfig cfg;
    Tensor x0({1, 1, 1, 3}, std::vector<double>{80.0, -41.0, 3.5});
    Tensor at_min;
    sample_from(ideal_gaussian, cfg, x0, [&](std::size_t i, double, const Tensor& x) {
        if (i == 30) at_min = x.clone();
    });
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(at_min.at(i), scalar_heun_at_sigma_min(32, x0.at(i)), 1e-12 * 80);
}

// The closed-form endpoint is approached at second order; at N=32 the schedule's coarse
// steps near sigma_data leave about 1.6e-2 relative error, and 1e-3 needs N=128.
TEST(Sampler, EndpointApproachesClosedForm) {
    EXPECT_LT(oracle::heun_endpoint_error(32), 1.7e-2);
    EXPECT_LT(oracle::heun_endpoint_error(128), 1e-3);
}

TEST(Sampler, SecondOrderConvergence) {
    std::vector<double> lx, ly;
    for (std::size_t n : {8, 16, 32, 64}) {
        lx.push_back(std::log(double(n)));
        ly.push_back(std::log(oracle::heun_endpoint_error(n)));
    }
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < 4; ++i) mx += lx[i] / 4, my += ly[i] / 4;
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < 4; ++i) sxy += (lx[i] - mx) * (ly[i] - my), sxx += (lx[i] - mx) * (lx[i] - mx);
    const double slope = -sxy / sxx;
    EXPECT_GE(slope, 1.7);
    EXPECT_LE(slope, 2.3);
}

TEST(Sampler, NonFiniteAbortsWithStep) {
    SamplerConfig cfg;
    cfg.steps = 8;
    DenoiseFn bad = [](const Tensor& x, double s) { return s < 1.0 ? x * std::nan("") : x * 0.5; };
    Rng r(1);
    try {
        sample(bad, cfg, {1, 1, 2, 2}, r);
        FAIL();
    } catch (const SamplerError& e) {
        EXPECT_GT(e.step(), 0u);
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
}

TEST(Sampler, SamplesFileRoundTrip) {
    Rng r(9);
    Tensor x = Tensor::randn({2, 1, 3, 3}, r);
    const auto path = std::filesystem::temp_directory_path() / ("mpdiff-samples-" + std::to_string(::getpid()));
    write_samples(path, x, 9, SamplerConfig{});
    SamplesFile f = read_samples(path);
    std::filesystem::remove(path);
    EXPECT_EQ(f.shape, x.shape());
    EXPECT_NE(f.header.find("seed=9"), std::string::npos);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(f.values[i], static_cast<float>(x.at(i)));
}

