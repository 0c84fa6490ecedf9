#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpdiff/harness/dataset.hpp"
#include "mpdiff/loss.hpp"
#include "mpdiff/network.hpp"
#include "mpdiff/optim.hpp"
#include "mpdiff/snapshot.hpp"

namespace mpdiff {

/// Everything a training run depends on. Two runs from equal manifests produce identical outputs.
struct RunManifest {
    char preset = 'G';
    std::size_t resolution = 8;
    std::size_t img_channels = 1;
    std::size_t classes = 0;
    std::vector<std::size_t> channels{8, 16};
    std::size_t blocks_per_level = 1;
    std::vector<std::size_t> attn_levels{1};
    std::size_t attn_head_channels = 64;
    std::size_t emb_channels = 16;
    std::size_t fourier_channels = 16;
    double dropout = -1.0;  // negative keeps the preset's value

    DatasetKind dataset = DatasetKind::gaussian;
    double sigma_data = 0.5;

    LrSchedule lr{1e-2, 2000.0, 0.0};
    NoiseDist noise{};
    std::size_t steps = 1000;
    std::size_t batch = 8;
    std::uint64_t seed = 1;

    std::vector<double> ema_gammas{16.97, 6.94};
    std::vector<double> ema_hidden_gammas{};  // tracked in memory only, never snapshotted
    std::size_t snapshot_every = 256;
    Precision snapshot_precision = Precision::f32;

    bool train_uncertainty = true;
    std::size_t uncertainty_channels = 16;
    std::size_t measure_every = 50;
    std::size_t probe_batch = 8;
    std::size_t max_nonfinite = 8;

    NetConfig net_config() const {
        NetConfig c = NetConfig::preset(preset);
        c.img_resolution = resolution;
        c.img_channels = img_channels;
        c.label_dim = classes;
        c.channels = channels;
        c.blocks_per_level = blocks_per_level;
        c.attn_levels = attn_levels;
        c.attn_head_channels = attn_head_channels;
        c.emb_channels = emb_channels;
        c.fourier_channels = fourier_channels;
        c.sigma_data = sigma_data;
        if (dropout >= 0.0) c.dropout = dropout;
        c.validate();
        return c;
    }

    SyntheticDataset make_dataset() const {
        return SyntheticDataset(dataset, resolution, img_channels, classes, sigma_data);
    }

    void validate() const {
        net_config();
        if (batch == 0) throw std::invalid_argument("manifest: batch must be positive");
        if (snapshot_every == 0) throw std::invalid_argument("manifest: snapshot_every must be positive");
        if (measure_every == 0) throw std::invalid_argument("manifest: measure_every must be positive");
        for (double g : ema_gammas)
            if (!(g > 0.0)) throw std::invalid_argument("manifest: EMA gammas must be positive");
        for (double g : ema_hidden_gammas)
            if (!(g > 0.0)) throw std::invalid_argument("manifest: EMA gammas must be positive");
    }

    std::string to_string() const;
    static RunManifest parse(const std::string& text);
    static RunManifest load(const std::filesystem::path& p);
    void save(const std::filesystem::path& p) const;
};

namespace detail {

template <typename T>
std::string join(const std::vector<T>& v) {
    std::ostringstream os;
    os << std::setprecision(17);
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

template <typename T>
std::vector<T> split_list(const std::string& s) {
    std::vector<T> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) {
        if (item.empty()) continue;
        if constexpr (std::is_floating_point_v<T>) out.push_back(std::stod(item));
        else out.push_back(static_cast<T>(std::stoull(item)));
    }
    return out;
}

inline bool parse_bool(const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

}  // namespace detail

inline std::string RunManifest::to_string() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "preset=" << preset << "\n"
       << "resolution=" << resolution << "\n"
       << "img_channels=" << img_channels << "\n"
       << "classes=" << classes << "\n"
       << "channels=" << detail::join(channels) << "\n"
       << "blocks_per_level=" << blocks_per_level << "\n"
       << "attn_levels=" << detail::join(attn_levels) << "\n"
       << "attn_head_channels=" << attn_head_channels << "\n"
       << "emb_channels=" << emb_channels << "\n"
       << "fourier_channels=" << fourier_channels << "\n"
       << "dropout=" << dropout << "\n"
       << "dataset=" << mpdiff::to_string(dataset) << "\n"
       << "sigma_data=" << sigma_data << "\n"
       << "lr_ref=" << lr.alpha_ref << "\n"
       << "lr_t_ref=" << lr.t_ref << "\n"
       << "lr_rampup=" << lr.rampup << "\n"
       << "p_mean=" << noise.p_mean << "\n"
       << "p_std=" << noise.p_std << "\n"
       << "steps=" << steps << "\n"
       << "batch=" << batch << "\n"
       << "seed=" << seed << "\n"
       << "ema_gammas=" << detail::join(ema_gammas) << "\n"
       << "ema_hidden_gammas=" << detail::join(ema_hidden_gammas) << "\n"
       << "snapshot_every=" << snapshot_every << "\n"
       << "snapshot_precision=" << static_cast<std::uint32_t>(snapshot_precision) << "\n"
       << "train_uncertainty=" << (train_uncertainty ? 1 : 0) << "\n"
       << "uncertainty_channels=" << uncertainty_channels << "\n"
       << "measure_every=" << measure_every << "\n"
       << "probe_batch=" << probe_batch << "\n"
       << "max_nonfinite=" << max_nonfinite << "\n";
    return os.str();
}

inline RunManifest RunManifest::parse(const std::string& text) {
    RunManifest m;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("manifest line " + std::to_string(lineno) + ": expected key=value");
        const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
        try {
            if (k == "preset") {
                if (v.size() != 1) throw std::invalid_argument("preset is a single letter");
                m.preset = v[0];
            } else if (k == "resolution") m.resolution = std::stoull(v);
            else if (k == "img_channels") m.img_channels = std::stoull(v);
            else if (k == "classes") m.classes = std::stoull(v);
            else if (k == "channels") m.channels = detail::split_list<std::size_t>(v);
            else if (k == "blocks_per_level") m.blocks_per_level = std::stoull(v);
            else if (k == "attn_levels") m.attn_levels = detail::split_list<std::size_t>(v);
            else if (k == "attn_head_channels") m.attn_head_channels = std::stoull(v);
            else if (k == "emb_channels") m.emb_channels = std::stoull(v);
            else if (k == "fourier_channels") m.fourier_channels = std::stoull(v);
            else if (k == "dropout") m.dropout = std::stod(v);
            else if (k == "dataset") m.dataset = dataset_kind_from(v);
            else if (k == "sigma_data") m.sigma_data = std::stod(v);
            else if (k == "lr_ref") m.lr.alpha_ref = std::stod(v);
            else if (k == "lr_t_ref") m.lr.t_ref = std::stod(v);
            else if (k == "lr_rampup") m.lr.rampup = std::stod(v);
            else if (k == "p_mean") m.noise.p_mean = std::stod(v);
            else if (k == "p_std") m.noise.p_std = std::stod(v);
            else if (k == "steps") m.steps = std::stoull(v);
            else if (k == "batch") m.batch = std::stoull(v);
            else if (k == "seed") m.seed = std::stoull(v);
            else if (k == "ema_gammas") m.ema_gammas = detail::split_list<double>(v);
            else if (k == "ema_hidden_gammas") m.ema_hidden_gammas = detail::split_list<double>(v);
            else if (k == "snapshot_every") m.snapshot_every = std::stoull(v);
            else if (k == "snapshot_precision") {
                if (v == "16") m.snapshot_precision = Precision::f16;
                else if (v == "32") m.snapshot_precision = Precision::f32;
                else throw std::invalid_argument("snapshot_precision must be 16 or 32");
            } else if (k == "train_uncertainty") m.train_uncertainty = detail::parse_bool(v);
            else if (k == "uncertainty_channels") m.uncertainty_channels = std::stoull(v);
            else if (k == "measure_every") m.measure_every = std::stoull(v);
            else if (k == "probe_batch") m.probe_batch = std::stoull(v);
            else if (k == "max_nonfinite") m.max_nonfinite = std::stoull(v);
            else throw std::invalid_argument("unknown key");
        } catch (const std::logic_error& e) {
            throw std::invalid_argument("manifest line " + std::to_string(lineno) + " (" + k + "): " + e.what());
        }
    }
    m.validate();
    return m;
}

inline RunManifest RunManifest::load(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot open manifest " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return parse(os.str());
}

inline void RunManifest::save(const std::filesystem::path& p) const {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest " + p.string());
    out << to_string();
}

}  // namespace mpdiff
