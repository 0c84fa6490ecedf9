#pragma once

// Self-contained experiments shared by the acceptance binary and the CLI.

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mpdiff/ema.hpp"
#include "mpdiff/harness/train.hpp"
#include "mpdiff/loss.hpp"
#include "mpdiff/optim.hpp"
#include "mpdiff/snapshot.hpp"

namespace mpdiff {

// ---- post-hoc reconstruction against directly tracked averages ----

struct PosthocOracleSettings {
    std::uint64_t steps = 100000;
    std::uint64_t snapshot_every = 256;
    std::vector<double> stored_gammas{16.97, 6.94};
    std::vector<double> check_sigma_rels{0.02, 0.075, 0.15, 0.25};
    std::size_t dim = 8;
    std::uint64_t seed = 5;
    Precision precision = Precision::f32;
};

struct PosthocOracleResult {
    std::map<double, double> param_error;  // by sigma_rel
    std::map<double, double> fit_residual;  // by sigma_rel
};

/// Synthetic trajectory: exponential approach to a fixed point plus Ornstein-Uhlenbeck jitter.
/// Snapshots of the stored gammas go to a store under dir; the checked profiles are tracked directly.
inline PosthocOracleResult run_posthoc_oracle(const PosthocOracleSettings& s, const std::filesystem::path& dir) {
    std::filesystem::remove_all(dir);
    SnapshotStore store(dir);
    Rng rng(s.seed, 0x706f7374);
    std::vector<double> start(s.dim), target(s.dim), jitter(s.dim, 0.0), theta(s.dim);
    for (std::size_t i = 0; i < s.dim; ++i) start[i] = rng.normal(), target[i] = rng.normal();
    const double tau = 0.2 * static_cast<double>(s.steps), revert = 1e-3, kick = 0.05 * std::sqrt(2e-3);

    std::vector<double> gammas = s.stored_gammas;
    for (double sr : s.check_sigma_rels) gammas.push_back(gamma_of_sigma_rel(sr));
    std::vector<std::vector<double>> avg(gammas.size(), start);

    for (std::uint64_t t = 1; t <= s.steps; ++t) {
        const double decay = std::exp(-static_cast<double>(t) / tau);
        for (std::size_t i = 0; i < s.dim; ++i) {
            jitter[i] += -revert * jitter[i] + kick * rng.normal();
            theta[i] = target[i] + (start[i] - target[i]) * decay + jitter[i];
        }
        for (std::size_t k = 0; k < gammas.size(); ++k) ema_update(avg[k], theta, t, EmaProfile::power(gammas[k]));
        if (t % s.snapshot_every == 0 || t == s.steps)
            for (std::size_t k = 0; k < s.stored_gammas.size(); ++k) {
                Snapshot snap;
                snap.t = t;
                snap.gamma = gammas[k];
                snap.precision = s.precision;
                snap.params = {{"theta", {s.dim}, avg[k]}};
                store.write(snap);
            }
    }

    PosthocOracleResult out;
    for (std::size_t j = 0; j < s.check_sigma_rels.size(); ++j) {
        const double g = gammas[s.stored_gammas.size() + j];
        Reconstruction rec = reconstruct(store, s.steps, g);
        ParamSet direct{{"theta", {s.dim}, avg[s.stored_gammas.size() + j]}};
        out.param_error[s.check_sigma_rels[j]] = relative_param_error(rec.params, direct);
        out.fit_residual[s.check_sigma_rels[j]] = rec.fit_residual.begin()->second;
    }
    return out;
}

/// Profile-space fit residual of the dense snapshot grid over a sigma_rel range.
inline std::vector<std::pair<double, double>> dense_grid_residuals(std::uint64_t steps, std::uint64_t every,
                                                                   const std::vector<double>& stored_gammas,
                                                                   double lo, double hi, std::size_t points) {
    std::vector<ProfilePoint> snaps;
    for (std::uint64_t t = every; t <= steps; t += every)
        for (double g : stored_gammas) snaps.push_back({double(t), g});
    if (steps % every)
        for (double g : stored_gammas) snaps.push_back({double(steps), g});
    std::vector<std::pair<double, double>> out;
    for (std::size_t i = 0; i < points; ++i) {
        const double sr = lo + (hi - lo) * double(i) / double(points - 1);
        ProfilePoint target{double(steps), gamma_of_sigma_rel(sr)};
        Matrix x = solve_posthoc_weights(snaps, {target});
        out.emplace_back(sr, fit_residual(snaps, target, x.col(0)));
    }
    return out;
}

// ---- uncertainty head tracking against a frozen denoiser with known loss ----

struct UncertaintyTrackingSettings {
    double denoiser_scale = 0.5;  // frozen denoiser = scale * ideal Gaussian denoiser
    std::size_t steps = 2000;
    std::size_t batch = 64;
    std::size_t channels = 32;
    std::size_t resolution = 8;
    double lr = 1e-2;
    std::uint64_t seed = 11;
    NoiseDist noise{};
    double sigma_data = 0.5;
};

struct UncertaintyTrackingResult {
    std::vector<double> sigma, target, learned;  // target = lambda * L, learned = exp(u)
    double worst = 0.0;
};

/// Expected per-element loss of scale * ideal denoiser on N(0, sigma_data^2) pixels.
inline double scaled_ideal_loss(double sigma, double scale, double sigma_data) {
    const double k = scale * sigma_data * sigma_data / (sigma * sigma + sigma_data * sigma_data);
    return (k - 1) * (k - 1) * sigma_data * sigma_data + k * k * sigma * sigma;
}

inline UncertaintyTrackingResult run_uncertainty_tracking(const UncertaintyTrackingSettings& s) {
    UncertaintyHead head(s.channels, s.seed, s.sigma_data);
    std::vector<WeightParam*> hp{&head.weight()};
    forced_renormalize(hp);
    Adam opt(hp);
    LrSchedule sched{s.lr, static_cast<double>(s.steps) / 4.0};
    SyntheticDataset data(DatasetKind::gaussian, s.resolution, 1, 0, s.sigma_data);
    Rng rng(s.seed, 0x756e63);
    for (std::size_t t = 1; t <= s.steps; ++t) {
        Batch b = data.sample(s.batch, rng);
        std::vector<double> sigma = s.noise.sample(s.batch, rng);
        Tensor x = b.images + Tensor::randn(b.images.shape(), rng) * Tensor(Shape{s.batch, 1, 1, 1}, sigma);
        std::vector<double> k(s.batch);
        for (std::size_t i = 0; i < s.batch; ++i)
            k[i] = s.denoiser_scale * s.sigma_data * s.sigma_data / (sigma[i] * sigma[i] + s.sigma_data * s.sigma_data);
        Tensor den = x * Tensor(Shape{s.batch, 1, 1, 1}, k);
        opt.zero_grad();
        weighted_loss(den, b.images, sigma, head(sigma), s.sigma_data).total.backward();
        opt.step(sched.at(static_cast<double>(t)));
        forced_renormalize(hp);
    }
    UncertaintyTrackingResult out;
    NoGradGuard guard;
    for (int i = 0; i < 8; ++i) {
        const double sg = std::exp(s.noise.p_mean + s.noise.p_std * (-1.5 + 3.0 * i / 7.0));
        const double target = lambda_weight(sg, s.sigma_data) * scaled_ideal_loss(sg, s.denoiser_scale, s.sigma_data);
        const double learned = std::exp(head({sg}).item());
        out.sigma.push_back(sg);
        out.target.push_back(target);
        out.learned.push_back(learned);
        out.worst = std::max(out.worst, std::abs(learned / target - 1.0));
    }
    return out;
}

// ---- activation drift across configuration styles ----

struct DriftSettings {
    std::string presets = "CEG";
    std::size_t steps = 400;
    std::size_t batch = 8;
    std::size_t probe_batch = 64;
    std::size_t measure_every = 50;
    double lr = 1e-2;
    double decay_t_ref = 100.0;  // inverse-sqrt decay for forced-WN styles; C keeps a constant rate
    std::uint64_t seed = 1;
    DatasetKind dataset = DatasetKind::blobs;
};

struct DriftSeries {
    char preset;
    std::vector<std::size_t> steps;
    std::vector<double> max_act;                       // max over buckets of act_max
    std::vector<std::vector<BucketMagnitudes>> buckets;  // per measurement
    double growth() const { return max_act.back() / max_act.front(); }
};

inline RunManifest drift_manifest(const DriftSettings& s, char preset) {
    RunManifest m;
    m.preset = preset;
    m.steps = s.steps;
    m.batch = s.batch;
    m.probe_batch = s.probe_batch;
    m.measure_every = s.measure_every;
    m.seed = s.seed;
    m.dataset = s.dataset;
    const bool forced = m.net_config().weight_mode == WeightMode::forced_wn;
    m.lr = {s.lr, forced ? s.decay_t_ref : std::numeric_limits<double>::infinity(), 0.0};
    return m;
}

inline std::vector<DriftSeries> run_drift_experiment(const DriftSettings& s) {
    std::vector<DriftSeries> out;
    for (char p : s.presets) {
        TrainResult r = train(drift_manifest(s, p), "");
        DriftSeries d{p, {}, {}, {}};
        for (const auto& row : r.metrics) {
            double mx = 0.0;
            for (const auto& b : row.magnitudes.buckets) mx = std::max(mx, b.act_max);
            d.steps.push_back(row.step);
            d.max_act.push_back(mx);
            d.buckets.push_back(row.magnitudes.buckets);
        }
        out.push_back(std::move(d));
    }
    return out;
}

}  // namespace mpdiff
