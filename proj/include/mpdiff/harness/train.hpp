#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "mpdiff/ema.hpp"
#include "mpdiff/harness/dataset.hpp"
#include "mpdiff/harness/manifest.hpp"
#include "mpdiff/loss.hpp"
#include "mpdiff/network.hpp"
#include "mpdiff/optim.hpp"
#include "mpdiff/snapshot.hpp"

namespace mpdiff {

// ---- parameter sets ----

inline ParamSet to_param_set(const std::vector<WeightParam*>& params) {
    ParamSet out;
    for (const auto* p : params) out.push_back({p->name, p->value.shape(), p->value.values()});
    return out;
}

inline ParamSet to_param_set(Denoiser& net) { return to_param_set(net.trainable()); }

/// Copies values into the network by name; every network parameter must be present.
inline void load_param_set(Denoiser& net, const ParamSet& ps) {
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : ps) by_name[t.name] = &t;
    for (auto* p : net.trainable()) {
        auto it = by_name.find(p->name);
        if (it == by_name.end()) throw std::invalid_argument("parameter set lacks " + p->name);
        if (it->second->shape != p->value.shape())
            throw shape_mismatch(("load_param_set " + p->name).c_str(), it->second->shape, p->value.shape());
        auto d = p->value.mutable_data();
        std::copy(it->second->data.begin(), it->second->data.end(), d.begin());
    }
}

inline std::uint32_t param_checksum(const ParamSet& ps) {
    Snapshot s;
    s.params = ps;
    return crc32c_of(encode_snapshot(s));
}

/// Relative L2 distance between two parameter sets with matching layout.
inline double relative_param_error(const ParamSet& a, const ParamSet& ref) {
    if (a.size() != ref.size()) throw std::invalid_argument("relative_param_error: parameter sets differ in size");
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        if (a[k].data.size() != ref[k].data.size()) throw std::invalid_argument("relative_param_error: layout mismatch");
        for (std::size_t i = 0; i < a[k].data.size(); ++i) {
            num += (a[k].data[i] - ref[k].data[i]) * (a[k].data[i] - ref[k].data[i]);
            den += ref[k].data[i] * ref[k].data[i];
        }
    }
    return std::sqrt(num / den);
}

// ---- metrics ----

/// Eight log-spaced noise levels at which u(sigma) is reported.
inline std::vector<double> uncertainty_probe_sigmas() {
    std::vector<double> s(8);
    for (std::size_t i = 0; i < 8; ++i) s[i] = std::exp(std::log(0.02) + (std::log(20.0) - std::log(0.02)) * i / 7.0);
    return s;
}

struct MetricsRow {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    MagnitudeReport magnitudes;
    std::vector<double> u;
};

inline std::string metrics_header(const std::vector<std::string>& buckets) {
    std::ostringstream os;
    os << "step,loss,lr";
    for (const auto& b : buckets) os << "," << b << "_act_max," << b << "_act_mean," << b << "_w_max," << b << "_w_mean";
    for (double s : uncertainty_probe_sigmas()) os << ",u@" << std::setprecision(4) << s;
    return os.str();
}

inline std::string metrics_line(const MetricsRow& r) {
    std::ostringstream os;
    os << std::setprecision(10) << r.step << "," << r.loss << "," << r.lr;
    for (const auto& b : r.magnitudes.buckets) os << "," << b.act_max << "," << b.act_mean << "," << b.w_max << "," << b.w_mean;
    for (double u : r.u) os << "," << u;
    return os.str();
}

// ---- training ----

class TrainingAborted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainHooks {
    /// After gradients are sanitized and before the optimizer step.
    std::function<void(std::size_t step, Denoiser&)> before_update;
    /// After the optimizer step and weight re-projection.
    std::function<void(std::size_t step, Denoiser&)> after_update;
};

struct TrainResult {
    std::size_t steps_run = 0;
    double final_loss = 0.0;
    ParamSet final_params;
    std::vector<ParamSet> ema;         // one per manifest.ema_gammas entry
    std::vector<ParamSet> ema_hidden;  // one per manifest.ema_hidden_gammas entry
    std::vector<MetricsRow> metrics;
    std::filesystem::path metrics_csv;
    std::filesystem::path store_dir;
};

namespace detail {

struct EmaTrack {
    double gamma;
    std::vector<std::vector<double>> avg;
};

inline void update_tracks(std::vector<EmaTrack>& tracks, const std::vector<WeightParam*>& params, std::uint64_t t) {
    for (auto& tr : tracks) {
        const double beta = EmaProfile::power(tr.gamma).beta(t);
        for (std::size_t k = 0; k < params.size(); ++k) ema_update(tr.avg[k], params[k]->value.data(), beta);
    }
}

inline ParamSet track_to_params(const EmaTrack& tr, const std::vector<WeightParam*>& params) {
    ParamSet out;
    for (std::size_t k = 0; k < params.size(); ++k) out.push_back({params[k]->name, params[k]->value.shape(), tr.avg[k]});
    return out;
}

}  // namespace detail

/// One full training run. With an empty out_dir nothing is written to disk.
/// Layout under out_dir: manifest.txt, metrics.csv, snapshots/.
inline TrainResult train(const RunManifest& m, const std::filesystem::path& out_dir, const TrainHooks& hooks = {}) {
    m.validate();
    Denoiser net(m.net_config(), m.seed);
    UncertaintyHead head(m.uncertainty_channels, m.seed, m.sigma_data);
    const SyntheticDataset data = m.make_dataset();

    Rng data_rng(m.seed, 0x64617461), noise_rng(m.seed, 0x6e6f6973), drop_rng(m.seed, 0x64726f70);
    Rng probe_rng(m.seed, 0x70726f62);
    const Batch probe = data.sample(m.probe_batch, probe_rng);
    const std::vector<double> probe_sigma = m.noise.sample(m.probe_batch, probe_rng);
    const Tensor probe_x = probe.images + Tensor::randn(probe.images.shape(), probe_rng) *
                                              Tensor(Shape{m.probe_batch, 1, 1, 1}, probe_sigma);

    auto params = net.trainable();
    std::vector<WeightParam*> head_params{&head.weight()};
    forced_renormalize(params);
    forced_renormalize(head_params);
    Adam opt(params);
    Adam head_opt(head_params);

    std::vector<detail::EmaTrack> tracks, hidden;
    for (double g : m.ema_gammas) tracks.push_back({g, {}});
    for (double g : m.ema_hidden_gammas) hidden.push_back({g, {}});
    for (auto* group : {&tracks, &hidden})
        for (auto& tr : *group)
            for (auto* p : params) tr.avg.push_back(p->value.values());

    TrainResult res;
    std::unique_ptr<SnapshotStore> store;
    std::ofstream csv;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        m.save(out_dir / "manifest.txt");
        res.store_dir = out_dir / "snapshots";
        std::filesystem::remove_all(res.store_dir);
        store = std::make_unique<SnapshotStore>(res.store_dir);
        res.metrics_csv = out_dir / "metrics.csv";
        csv.open(res.metrics_csv, std::ios::trunc);
        if (!csv) throw std::runtime_error("cannot write " + res.metrics_csv.string());
        csv << metrics_header(net.buckets()) << "\n";
    }

    const std::vector<double> u_sigmas = uncertainty_probe_sigmas();
    auto record = [&](std::size_t step, double loss, double lr) {
        MetricsRow row{step, loss, lr, net.measure_magnitudes(probe_x, probe_sigma, probe.labels), {}};
        {
            NoGradGuard guard;
            row.u = head(u_sigmas).values();
        }
        if (csv.is_open()) csv << metrics_line(row) << "\n";
        res.metrics.push_back(std::move(row));
    };
    auto write_snapshots = [&](std::uint64_t t) {
        if (!store) return;
        for (const auto& tr : tracks) {
            Snapshot s;
            s.t = t;
            s.gamma = tr.gamma;
            s.precision = m.snapshot_precision;
            s.params = detail::track_to_params(tr, params);
            store->write(s);
        }
    };

    if (m.steps > 0) record(0, std::nan(""), m.lr.at(0));

    std::size_t nonfinite_run = 0;
    double last_finite = std::nan("");
    for (std::size_t step = 1; step <= m.steps; ++step) {
        const double lr = m.lr.at(static_cast<double>(step));
        Batch b = data.sample(m.batch, data_rng);
        std::vector<double> sigma = m.noise.sample(m.batch, noise_rng);
        Tensor x = b.images + Tensor::randn(b.images.shape(), noise_rng) * Tensor(Shape{m.batch, 1, 1, 1}, sigma);

        opt.zero_grad();
        head_opt.zero_grad();
        ForwardCtx ctx;
        ctx.training = true;
        ctx.rng = &drop_rng;
        Tensor den = net(x, sigma, b.labels, ctx);
        Tensor u = m.train_uncertainty ? head(sigma) : Tensor(Shape{m.batch}, 0.0);
        WeightedLoss wl = weighted_loss(den, b.images, sigma, u, m.sigma_data);
        const double loss = wl.total.item();
        wl.total.backward();

        if (std::isfinite(loss)) {
            nonfinite_run = 0;
            last_finite = loss;
        } else if (++nonfinite_run > m.max_nonfinite) {
            std::ostringstream os;
            os << "training aborted at step " << step << ": loss non-finite for " << nonfinite_run
               << " consecutive steps (lr " << lr << ", last finite loss " << last_finite << ")";
            throw TrainingAborted(os.str());
        }
        sanitize_grads(params);
        sanitize_grads(head_params);
        if (hooks.before_update) hooks.before_update(step, net);
        opt.step(lr);
        if (m.train_uncertainty) head_opt.step(lr);
        forced_renormalize(params);
        forced_renormalize(head_params);
        if (hooks.after_update) hooks.after_update(step, net);

        detail::update_tracks(tracks, params, step);
        detail::update_tracks(hidden, params, step);
        if (step % m.snapshot_every == 0 || step == m.steps) write_snapshots(step);
        if (step % m.measure_every == 0 || step == m.steps) record(step, loss, lr);
        res.final_loss = loss;
        res.steps_run = step;
    }

    res.final_params = to_param_set(params);
    for (const auto& tr : tracks) res.ema.push_back(detail::track_to_params(tr, params));
    for (const auto& tr : hidden) res.ema_hidden.push_back(detail::track_to_params(tr, params));
    return res;
}

// ---- evaluation ----

/// Held-out lambda-weighted denoising loss on a fixed set of (image, noise, sigma) triples.
class ValidationSet {
public:
    ValidationSet(const SyntheticDataset& data, const NoiseDist& noise, std::size_t count, std::uint64_t seed,
                  std::size_t chunk = 16)
        : sigma_data_(data.sigma_data()) {
        Rng rng(seed, 0x76616c);
        for (std::size_t done = 0; done < count; done += chunk) {
            const std::size_t n = std::min(chunk, count - done);
            Batch b = data.sample(n, rng);
            std::vector<double> sigma = noise.sample(n, rng);
            Tensor x = b.images + Tensor::randn(b.images.shape(), rng) * Tensor(Shape{n, 1, 1, 1}, sigma);
            chunks_.push_back({std::move(b), std::move(x), std::move(sigma)});
        }
    }

    double evaluate(const Denoiser& net) const {
        NoGradGuard guard;
        double total = 0.0;
        std::size_t n = 0;
        for (const auto& c : chunks_) {
            Tensor den = net(c.noisy, c.sigma, c.batch.labels);
            auto L = per_sample_sq_error(den, c.batch.images, true).values();
            for (std::size_t i = 0; i < L.size(); ++i) total += lambda_weight(c.sigma[i], sigma_data_) * L[i];
            n += L.size();
        }
        return total / static_cast<double>(n);
    }

private:
    struct Chunk {
        Batch batch;
        Tensor noisy;
        std::vector<double> sigma;
    };
    double sigma_data_;
    std::vector<Chunk> chunks_;
};

struct SweepRow {
    double sigma_rel;
    double metric;
    double fit_residual;
};

inline std::vector<double> default_sweep_grid() {
    std::vector<double> g;
    for (int i = 0; i < 12; ++i) g.push_back(0.02 + 0.02 * i);
    return g;
}

/// Reconstructs the final-step average at each sigma_rel and scores it on held-out data.
inline std::vector<SweepRow> sweep_ema(const RunManifest& m, const SnapshotStore& store, const std::vector<double>& grid,
                                       std::size_t val_count = 64) {
    Denoiser net(m.net_config(), m.seed);
    const SyntheticDataset data = m.make_dataset();
    ValidationSet val(data, m.noise, val_count, m.seed);
    const std::uint64_t t_r = store.max_t();
    std::vector<SweepRow> rows;
    for (double s : grid) {
        Reconstruction rec = reconstruct(store, t_r, gamma_of_sigma_rel(s));
        load_param_set(net, rec.params);
        rows.push_back({s, val.evaluate(net), rec.fit_residual.begin()->second});
    }
    return rows;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
    os << "sigma_rel,metric,fit_residual\n" << std::setprecision(10);
    for (const auto& r : rows) os << r.sigma_rel << "," << r.metric << "," << r.fit_residual << "\n";
}

/// Local minima of a series after 3-point moving-average smoothing (endpoints use two points).
inline std::size_t count_local_minima(const std::vector<double>& v) {
    const std::size_t n = v.size();
    if (n < 3) return n ? 1 : 0;
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i ? i - 1 : 0, hi = std::min(n - 1, i + 1);
        double acc = 0.0;
        for (std::size_t j = lo; j <= hi; ++j) acc += v[j];
        s[i] = acc / static_cast<double>(hi - lo + 1);
    }
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool left = i == 0 || s[i] < s[i - 1];
        const bool right = i == n - 1 || s[i] < s[i + 1];
        count += left && right;
    }
    return count;
}

}  // namespace mpdiff
