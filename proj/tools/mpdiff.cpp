#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <unistd.h>

#include "mpdiff/ema.hpp"
#include "mpdiff/harness/experiments.hpp"
#include "mpdiff/harness/oracles.hpp"
#include "mpdiff/harness/train.hpp"
#include "mpdiff/sampler.hpp"
#include "mpdiff/snapshot.hpp"

using namespace mpdiff;
namespace fs = std::filesystem;

namespace {

// Per-tensor overrides arrive as name=sigma_rel.
std::map<std::string, double> parse_overrides(const std::vector<std::string>& items) {
    std::map<std::string, double> out;
    for (const auto& item : items) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0)
            throw std::invalid_argument("--per-tensor expects name=sigma_rel, got '" + item + "'");
        out[item.substr(0, eq)] = gamma_of_sigma_rel(std::stod(item.substr(eq + 1)));
    }
    return out;
}

void print_residuals(const Reconstruction& rec) {
    for (const auto& [gamma, res] : rec.fit_residual)
        std::fprintf(stderr, "gamma %s: fit residual %.3e\n", gamma.c_str(), res);
}

int cmd_train(const fs::path& manifest, const fs::path& out, std::size_t steps_override) {
    RunManifest m = RunManifest::load(manifest);
    if (steps_override) m.steps = steps_override;
    const auto start = std::chrono::steady_clock::now();
    TrainResult r = train(m, out);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("trained %zu steps in %.1fs, final loss %.6g, params crc32c %08x\n", r.steps_run, secs, r.final_loss,
                param_checksum(r.final_params));
    std::printf("metrics %s\nsnapshots %s\n", r.metrics_csv.c_str(), r.store_dir.c_str());
    return 0;
}

struct SampleArgs {
    fs::path run, out;
    double sigma_rel = 0.1;
    std::uint64_t at_step = 0;
    std::size_t count = 16;
    std::uint64_t seed = 1;
    SamplerConfig cfg;
    int label = -1;
};

int cmd_sample(const SampleArgs& a) {
    const double gamma = gamma_of_sigma_rel(a.sigma_rel);
    const RunManifest m = RunManifest::load(a.run / "manifest.txt");
    SnapshotStore store(a.run / "snapshots");
    Reconstruction rec = reconstruct(store, a.at_step ? a.at_step : store.max_t(), gamma);
    print_residuals(rec);
    auto net = std::make_shared<Denoiser>(m.net_config(), m.seed);
    load_param_set(*net, rec.params);

    Tensor labels;
    if (a.label >= 0) {
        if (std::size_t(a.label) >= m.classes)
            throw std::invalid_argument("--class " + std::to_string(a.label) + " but the run has " +
                                        std::to_string(m.classes) + " classes");
        labels = Tensor(Shape{a.count, m.classes});
        for (std::size_t i = 0; i < a.count; ++i) labels.mutable_data()[i * m.classes + a.label] = 1.0;
    } else if (a.cfg.guidance != 1.0) {
        throw std::invalid_argument("--guidance needs --class");
    }
    DenoiseFn cond = [net, labels](const Tensor& x, double s) { return (*net)(x, s, labels); };
    DenoiseFn uncond = [net](const Tensor& x, double s) { return (*net)(x, s); };
    NoGradGuard guard;
    Rng rng(a.seed, 0x73616d70);
    SampleResult r = sample(guided_denoiser(cond, uncond, a.cfg.guidance), a.cfg,
                            {a.count, m.img_channels, m.resolution, m.resolution}, rng);
    write_samples(a.out, r.x, a.seed, a.cfg);
    std::printf("wrote %zu samples to %s (NFE %zu per sample)\n", a.count, a.out.c_str(), r.nfe);
    return 0;
}

int cmd_reconstruct(const fs::path& store_dir, double sigma_rel, std::uint64_t at_step,
                    const std::vector<std::string>& per_tensor, const fs::path& out, Precision precision) {
    const double gamma = gamma_of_sigma_rel(sigma_rel);
    const auto overrides = parse_overrides(per_tensor);
    SnapshotStore store(store_dir);
    const std::uint64_t t = at_step ? at_step : store.max_t();
    Reconstruction rec = reconstruct(store, t, gamma, overrides);
    print_residuals(rec);
    Snapshot snap;
    snap.t = t;
    snap.gamma = gamma;
    snap.precision = precision;
    snap.params = rec.params;
    if (out.empty()) {
        std::printf("reconstructed %zu tensors at step %llu, params crc32c %08x\n", rec.params.size(),
                    static_cast<unsigned long long>(t), param_checksum(rec.params));
        return 0;
    }
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    const std::string bytes = encode_snapshot(snap);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("cannot write " + out.string());
    std::printf("wrote %s (%zu tensors, step %llu)\n", out.c_str(), rec.params.size(), static_cast<unsigned long long>(t));
    return 0;
}

int cmd_sweep(const fs::path& run, std::vector<double> grid, std::size_t val_count, const fs::path& out) {
    if (grid.empty()) grid = default_sweep_grid();
    for (double s : grid) gamma_of_sigma_rel(s);
    const RunManifest m = RunManifest::load(run / "manifest.txt");
    SnapshotStore store(run / "snapshots");
    const auto rows = sweep_ema(m, store, grid, val_count);
    if (out.empty()) {
        write_sweep_csv(std::cout, rows);
    } else {
        std::ofstream f(out, std::ios::trunc);
        write_sweep_csv(f, rows);
        if (!f) throw std::runtime_error("cannot write " + out.string());
    }
    std::vector<double> metric;
    for (const auto& r : rows) metric.push_back(r.metric);
    std::fprintf(stderr, "%zu local minima after smoothing\n", count_local_minima(metric));
    return 0;
}

void write_trace(std::ostream& os, char preset, const std::vector<std::size_t>& steps,
                 const std::vector<std::vector<BucketMagnitudes>>& buckets) {
    for (std::size_t k = 0; k < steps.size(); ++k)
        for (const auto& b : buckets[k])
            os << preset << "," << steps[k] << "," << b.bucket << "," << b.act_max << "," << b.act_mean << ","
               << b.w_max << "," << b.w_mean << "\n";
}

int cmd_measure(const fs::path& manifest, const std::string& presets, std::size_t steps, const fs::path& out) {
    std::ofstream file;
    if (!out.empty()) {
        file.open(out, std::ios::trunc);
        if (!file) throw std::runtime_error("cannot write " + out.string());
    }
    std::ostream& os = out.empty() ? std::cout : file;
    os << std::setprecision(8) << "config,step,bucket,act_max,act_mean,w_max,w_mean\n";
    if (!manifest.empty()) {
        RunManifest m = RunManifest::load(manifest);
        if (steps) m.steps = steps;
        TrainResult r = train(m, "");
        std::vector<std::size_t> st;
        std::vector<std::vector<BucketMagnitudes>> b;
        for (const auto& row : r.metrics) st.push_back(row.step), b.push_back(row.magnitudes.buckets);
        write_trace(os, m.preset, st, b);
        return 0;
    }
    DriftSettings s;
    s.presets = presets;
    if (steps) s.steps = steps;
    for (const auto& d : run_drift_experiment(s)) {
        write_trace(os, d.preset, d.steps, d.buckets);
        std::fprintf(stderr, "%c: max activation %.3f -> %.3f (x%.2f)\n", d.preset, d.max_act.front(),
                     d.max_act.back(), d.growth());
    }
    return 0;
}

// A fast subset of the acceptance checks, each against an independent oracle.
int cmd_selftest() {
    int failed = 0;
    auto check = [&](const char* name, bool ok, const std::string& detail) {
        std::printf("[%s] %s: %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
        failed += !ok;
    };
    char buf[256];
    auto fmt = [&](const char* f, auto... v) {
        std::snprintf(buf, sizeof buf, f, v...);
        return std::string(buf);
    };
    try {
        {
            Rng r(9);
            Tensor x = Tensor::randn({200000}, r);
            Tensor m = mp_silu(x);
            double m2 = 0;
            for (double v : m.data()) m2 += v * v;
            m2 /= double(x.size());
            check("mp_silu magnitude", std::abs(m2 - 1.0) < 0.02, fmt("second moment %.4f", m2));
        }
        {
            double worst = 0;
            for (int i = 1; i <= 14; ++i) worst = std::max(worst, std::abs(gamma_of_sigma_rel(0.02 * i) - oracle::gamma_cubic_root(0.02 * i)));
            check("sigma_rel to gamma", worst < 1e-7, fmt("worst deviation from cubic root %.2e", worst));
        }
        {
            Rng r(3);
            double worst = 0;
            for (int i = 0; i < 100; ++i) {
                const double ta = 10 * std::pow(10.0, 4 * r.uniform()), tb = 10 * std::pow(10.0, 4 * r.uniform());
                const double ga = 0.05 + 30 * r.uniform(), gb = 0.05 + 30 * r.uniform();
                const double q = oracle::profile_dot_quadrature(ta, ga, tb, gb);
                worst = std::max(worst, std::abs(profile_dot(ta, ga, tb, gb) - q) / q);
            }
            check("profile inner product", worst < 1e-6, fmt("worst relative error %.2e", worst));
        }
        {
            Rng r(42);
            std::vector<std::vector<double>> traj(301, std::vector<double>(4));
            for (auto& row : traj)
                for (auto& v : row) v = r.normal();
            std::vector<double> avg = traj[0];
            for (std::uint64_t t = 1; t <= 300; ++t) ema_update(avg, traj[t], t, EmaProfile::power(6.94));
            const auto direct = oracle::power_ema_direct(traj, 6.94);
            double worst = 0;
            for (std::size_t i = 0; i < 4; ++i) worst = std::max(worst, std::abs(avg[i] - direct[i]));
            check("power average", worst < 1e-12, fmt("incremental vs direct %.2e", worst));
        }
        {
            const fs::path dir = fs::temp_directory_path() / ("mpdiff-selftest-" + std::to_string(::getpid()));
            PosthocOracleSettings s;
            s.steps = 8192;
            s.snapshot_every = 64;
            auto res = run_posthoc_oracle(s, dir);
            fs::remove_all(dir);
            double worst = 0;
            for (auto [sr, e] : res.param_error) worst = std::max(worst, e);
            check("post-hoc reconstruction", worst < 1e-3, fmt("worst parameter error %.2e", worst));
        }
        {
            std::vector<std::size_t> ns{8, 16, 32, 64};
            std::vector<double> errs;
            for (auto n : ns) errs.push_back(oracle::heun_endpoint_error(n));
            const double slope = oracle::convergence_slope(ns, errs);
            check("sampler order", slope >= 1.7 && slope <= 2.3, fmt("slope %.3f", slope));
        }
        {
            RunManifest m;
            Denoiser net(m.net_config(), 1);
            Rng r(2);
            NoGradGuard guard;
            Tensor x = Tensor::randn({2, m.img_channels, m.resolution, m.resolution}, r);
            Tensor d = net(x, 1.3);
            const double cs = precondition(1.3, m.sigma_data).c_skip;
            double worst = 0;
            for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(d.at(i) - cs * x.at(i)));
            check("fresh denoiser is skip-only", worst == 0.0, fmt("max deviation %.2e", worst));
        }
    } catch (const std::exception& e) {
        check("selftest", false, std::string("threw: ") + e.what());
    }
    return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Magnitude-preserving diffusion toolkit"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    fs::path manifest, out, run, store;
    std::size_t steps = 0;

    auto* train_cmd = app.add_subcommand("train", "Train a denoiser from a run manifest");
    train_cmd->add_option("--manifest", manifest, "Run manifest (key=value lines)")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", out, "Output directory")->required();
    train_cmd->add_option("--steps", steps, "Override the manifest's step count");

    SampleArgs sa;
    auto* sample_cmd = app.add_subcommand("sample", "Generate samples from a post-hoc averaged denoiser");
    sample_cmd->add_option("--run", sa.run, "Training output directory")->required()->check(CLI::ExistingDirectory);
    sample_cmd->add_option("--out", sa.out, "Samples file")->required();
    sample_cmd->add_option("--sigma-rel", sa.sigma_rel, "Averaging profile length")->capture_default_str();
    sample_cmd->add_option("--at-step", sa.at_step, "Reconstruct at this step (default: last snapshot)");
    sample_cmd->add_option("--count", sa.count, "Number of samples")->capture_default_str();
    sample_cmd->add_option("--seed", sa.seed, "Sampling seed")->capture_default_str();
    sample_cmd->add_option("--steps", sa.cfg.steps, "Heun steps")->capture_default_str();
    sample_cmd->add_option("--sigma-min", sa.cfg.sigma_min)->capture_default_str();
    sample_cmd->add_option("--sigma-max", sa.cfg.sigma_max)->capture_default_str();
    sample_cmd->add_option("--rho", sa.cfg.rho)->capture_default_str();
    sample_cmd->add_option("--class", sa.label, "Class label for conditional runs");
    sample_cmd->add_option("--guidance", sa.cfg.guidance, "Guidance weight (needs --class)")->capture_default_str();

    double sigma_rel = 0.1;
    std::uint64_t at_step = 0;
    std::vector<std::string> per_tensor;
    int bits = 32;
    auto* rec_cmd = app.add_subcommand("reconstruct-ema", "Synthesize an average from stored snapshots");
    rec_cmd->add_option("--store", store, "Snapshot store directory")->required();
    rec_cmd->add_option("--sigma-rel", sigma_rel, "Target profile length")->required();
    rec_cmd->add_option("--at-step", at_step, "Target step (default: last snapshot)");
    rec_cmd->add_option("--per-tensor", per_tensor, "Per-tensor profile length as name=sigma_rel");
    rec_cmd->add_option("--out", out, "Write the result as a snapshot file");
    rec_cmd->add_option("--bits", bits, "Output precision")->check(CLI::IsMember({16, 32}))->capture_default_str();

    std::vector<double> grid;
    std::size_t val_count = 64;
    auto* sweep_cmd = app.add_subcommand("sweep-ema", "Validation loss across a sigma_rel grid");
    sweep_cmd->add_option("--run", run, "Training output directory")->required()->check(CLI::ExistingDirectory);
    sweep_cmd->add_option("--grid", grid, "sigma_rel values (default 0.02..0.24 step 0.02)")->delimiter(',');
    sweep_cmd->add_option("--val-count", val_count, "Held-out examples")->capture_default_str();
    sweep_cmd->add_option("--out", out, "CSV path (default stdout)");

    std::string presets = "CEG";
    auto* measure_cmd = app.add_subcommand("measure", "Activation and weight magnitude traces");
    measure_cmd->add_option("--manifest", manifest, "Measure one run instead of the preset comparison")
        ->check(CLI::ExistingFile);
    measure_cmd->add_option("--presets", presets, "Presets to compare")->capture_default_str();
    measure_cmd->add_option("--steps", steps, "Training steps");
    measure_cmd->add_option("--out", out, "CSV path (default stdout)");

    auto* self_cmd = app.add_subcommand("selftest", "Quick oracle checks");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(manifest, out, steps);
        if (sample_cmd->parsed()) return cmd_sample(sa);
        if (rec_cmd->parsed())
            return cmd_reconstruct(store, sigma_rel, at_step, per_tensor, out, bits == 16 ? Precision::f16 : Precision::f32);
        if (sweep_cmd->parsed()) return cmd_sweep(run, grid, val_count, out);
        if (measure_cmd->parsed()) return cmd_measure(manifest, presets, steps, out);
        if (self_cmd->parsed()) return cmd_selftest();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
