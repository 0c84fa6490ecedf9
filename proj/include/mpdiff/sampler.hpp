#pragma once

// Deterministic second-order ODE sampler with the rho noise schedule and
// conditional/unconditional guidance blending.

#include <bit>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpdiff/rng.hpp"
#include "mpdiff/tensor.hpp"

namespace mpdiff {

struct SamplerConfig {
    std::size_t steps = 32;
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double rho = 7.0;
    double guidance = 1.0;

    void validate() const {
        if (steps < 1) throw std::invalid_argument("sampler needs at least one step");
        if (!(sigma_min > 0.0 && sigma_min < sigma_max)) throw std::invalid_argument("sampler needs 0 < sigma_min < sigma_max");
        if (!(rho > 0.0)) throw std::invalid_argument("sampler needs rho > 0");
    }
};

/// N noise levels from sigma_max down to sigma_min, followed by a trailing 0.
inline std::vector<double> sigma_steps(const SamplerConfig& cfg) {
    cfg.validate();
    const std::size_t n = cfg.steps;
    std::vector<double> s(n + 1, 0.0);
    const double a = std::pow(cfg.sigma_max, 1.0 / cfg.rho), b = std::pow(cfg.sigma_min, 1.0 / cfg.rho);
    if (n == 1) {
        s[0] = cfg.sigma_max;
        return s;
    }
    for (std::size_t i = 0; i < n; ++i) s[i] = std::pow(a + double(i) / double(n - 1) * (b - a), cfg.rho);
    s[0] = cfg.sigma_max;
    s[n - 1] = cfg.sigma_min;
    return s;
}

using DenoiseFn = std::function<Tensor(const Tensor& x, double sigma)>;

/// w * cond + (1 - w) * uncond; w == 1 skips the unconditional branch.
inline DenoiseFn guided_denoiser(DenoiseFn cond, DenoiseFn uncond, double w) {
    if (w == 1.0) return cond;
    return [cond = std::move(cond), uncond = std::move(uncond), w](const Tensor& x, double sigma) {
        Tensor c = cond(x, sigma);
        Tensor u = uncond(x, sigma);
        if (c.shape() != u.shape()) throw shape_mismatch("guided_denoiser", c.shape(), u.shape());
        return c * w + u * (1.0 - w);
    };
}

class SamplerError : public std::runtime_error {
public:
    SamplerError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

struct SampleResult {
    Tensor x;
    std::size_t nfe = 0;
};

/// Called after each step with the step index and the state at sigmas[i + 1].
using StepCallback = std::function<void(std::size_t i, double sigma_next, const Tensor& x)>;

/// Integrates dx/dsigma = (x - D(x; sigma)) / sigma starting from a given x at sigma_max.
inline SampleResult sample_from(const DenoiseFn& denoise, const SamplerConfig& cfg, Tensor x,
                                const StepCallback& on_step = {}) {
    NoGradGuard guard;
    const std::vector<double> sig = sigma_steps(cfg);
    SampleResult out;
    for (std::size_t i = 0; i < cfg.steps; ++i) {
        const double s_cur = sig[i], s_next = sig[i + 1];
        Tensor d_cur = (x - denoise(x, s_cur)) / s_cur;
        ++out.nfe;
        Tensor x_next = x + d_cur * (s_next - s_cur);
        if (s_next > 0.0) {
            Tensor d_next = (x_next - denoise(x_next, s_next)) / s_next;
            ++out.nfe;
            x_next = x + (d_cur + d_next) * (0.5 * (s_next - s_cur));
        }
        if (!all_finite(x_next.data()))
            throw SamplerError("sampler state became non-finite at step " + std::to_string(i) + " (sigma " +
                                   std::to_string(s_cur) + ")",
                               i);
        x = std::move(x_next);
        if (on_step) on_step(i, s_next, x);
    }
    out.x = std::move(x);
    return out;
}

/// Draws the initial state from N(0, sigma_max^2) and integrates to sigma = 0.
inline SampleResult sample(const DenoiseFn& denoise, const SamplerConfig& cfg, const Shape& shape, Rng& rng,
                           const StepCallback& on_step = {}) {
    cfg.validate();
    return sample_from(denoise, cfg, Tensor::randn(shape, rng, cfg.sigma_max), on_step);
}

/// Text header line followed by little-endian float32 values in row-major order.
inline void write_samples(const std::filesystem::path& path, const Tensor& x, std::uint64_t seed,
                          const SamplerConfig& cfg) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write samples to " + path.string());
    std::ostringstream h;
    h << "MPDIFF-SAMPLES shape=";
    for (std::size_t i = 0; i < x.rank(); ++i) h << (i ? "x" : "") << x.dim(i);
    h << " seed=" << seed << " steps=" << cfg.steps << " sigma_min=" << cfg.sigma_min << " sigma_max=" << cfg.sigma_max
      << " rho=" << cfg.rho << " guidance=" << cfg.guidance << " dtype=f32le\n";
    out << h.str();
    for (double v : x.data()) {
        const float f = static_cast<float>(v);
        unsigned char b[4];
        std::memcpy(b, &f, 4);
        if constexpr (std::endian::native == std::endian::big) std::swap(b[0], b[3]), std::swap(b[1], b[2]);
        out.write(reinterpret_cast<const char*>(b), 4);
    }
    if (!out) throw std::runtime_error("short write to " + path.string());
}

struct SamplesFile {
    std::string header;
    Shape shape;
    std::vector<float> values;
};

inline SamplesFile read_samples(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    SamplesFile f;
    std::getline(in, f.header);
    if (f.header.rfind("MPDIFF-SAMPLES ", 0) != 0) throw std::runtime_error(path.string() + ": not a samples file");
    const auto pos = f.header.find("shape=");
    std::istringstream ss(f.header.substr(pos + 6, f.header.find(' ', pos) - pos - 6));
    std::string dim;
    while (std::getline(ss, dim, 'x')) f.shape.push_back(std::stoull(dim));
    f.values.resize(numel(f.shape));
    in.read(reinterpret_cast<char*>(f.values.data()), static_cast<std::streamsize>(f.values.size() * 4));
    if (!in) throw std::runtime_error(path.string() + ": truncated samples payload");
    return f;
}

}  // namespace mpdiff
