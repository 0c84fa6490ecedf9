#pragma once

// Toy U-Net denoiser. Feature flags select between the legacy residual block
// (configs B-E) and the streamlined block (F, G), and between plain and
// magnitude-preserving fixed-function layers.

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpdiff/mp_ops.hpp"
#include "mpdiff/rng.hpp"
#include "mpdiff/tensor.hpp"

namespace mpdiff {

enum class GroupNormMode { learned, simplified, none_pixelnorm };
enum class AttentionMode { dot, cosine };
enum class FixedFnMode { plain, mp };

struct NetConfig {
    std::size_t img_resolution = 16;
    std::size_t img_channels = 1;
    std::size_t label_dim = 0;
    std::vector<std::size_t> channels{8, 16};  // per resolution level, finest first
    std::size_t blocks_per_level = 1;
    std::vector<std::size_t> attn_levels{1};   // level indices carrying self-attention
    std::size_t attn_head_channels = 64;
    std::size_t group_size = 32;               // clipped to the channel count per layer
    std::size_t emb_channels = 32;
    std::size_t fourier_channels = 32;
    double t_res = 0.3;
    double t_attn = 0.3;
    double t_emb = 0.5;
    double t_cat = 0.5;
    double dropout = 0.0;
    double sigma_data = 0.5;
    double clamp = 256.0;

    bool biases_on = false;
    GroupNormMode group_norm_mode = GroupNormMode::none_pixelnorm;
    AttentionMode attention_mode = AttentionMode::cosine;
    WeightMode weight_mode = WeightMode::forced_wn;
    FixedFnMode fixed_fn_mode = FixedFnMode::mp;
    bool legacy_blocks = false;     // pre-F residual block, embedding MLP and GN output head
    bool const_channel = true;      // constant-1 input channel
    bool label_sqrt_scale = true;   // one-hot labels scaled by sqrt(label_dim)
    bool emb_shift = false;         // embedding also shifts (not just scales) the residual branch
    bool out_zero_init = false;

    std::size_t levels() const { return channels.size(); }
    std::size_t group_size_for(std::size_t c) const { return std::min(group_size, c); }
    bool has_attention(std::size_t level) const {
        return std::find(attn_levels.begin(), attn_levels.end(), level) != attn_levels.end();
    }

    void validate() const {
        auto blend = [](double t, const char* what) {
            if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument(std::string(what) + " must lie in [0,1]");
        };
        blend(t_res, "t_res");
        blend(t_attn, "t_attn");
        blend(t_emb, "t_emb");
        blend(t_cat, "t_cat");
        if (!(sigma_data > 0.0)) throw std::invalid_argument("sigma_data must be positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0,1)");
        if (channels.empty()) throw std::invalid_argument("at least one resolution level is required");
        if (img_resolution % (std::size_t{1} << (channels.size() - 1)) != 0)
            throw std::invalid_argument("resolution must halve cleanly across levels");
        for (std::size_t l : attn_levels)
            if (l >= channels.size()) throw std::invalid_argument("attention level out of range");
    }

    /// Named presets; 'B' through 'G'.
    static NetConfig preset(char letter) {
        NetConfig c;
        switch (letter) {
            case 'B':
                c.biases_on = true;
                c.group_norm_mode = GroupNormMode::learned;
                c.attention_mode = AttentionMode::dot;
                c.weight_mode = WeightMode::plain;
                c.fixed_fn_mode = FixedFnMode::plain;
                c.legacy_blocks = true;
                c.const_channel = false;
                c.label_sqrt_scale = false;
                c.emb_shift = true;
                c.out_zero_init = true;
                c.dropout = 0.1;
                return c;
            case 'C':
                c = preset('B');
                c.biases_on = false;
                c.group_norm_mode = GroupNormMode::simplified;
                c.attention_mode = AttentionMode::cosine;
                c.const_channel = true;
                c.label_sqrt_scale = true;
                c.emb_shift = false;
                c.out_zero_init = false;
                return c;
            case 'D':
                c = preset('C');
                c.weight_mode = WeightMode::wn;
                return c;
            case 'E':
                c = preset('D');
                c.weight_mode = WeightMode::forced_wn;
                return c;
            case 'F':
                c = preset('E');
                c.group_norm_mode = GroupNormMode::none_pixelnorm;
                c.legacy_blocks = false;
                return c;
            case 'G':
                c = preset('F');
                c.fixed_fn_mode = FixedFnMode::mp;
                c.dropout = 0.0;
                return c;
            default:
                throw std::invalid_argument(std::string("unknown config preset '") + letter + "'");
        }
    }
};

// ---------------------------------------------------------------------------
// Preconditioning.

struct Precond {
    double c_skip, c_out, c_in, c_noise;
};

inline Precond precondition(double sigma, double sigma_data) {
    if (!(sigma > 0.0)) throw std::domain_error("precondition: sigma must be positive, got " + std::to_string(sigma));
    const double s2 = sigma * sigma, d2 = sigma_data * sigma_data;
    return {d2 / (s2 + d2), sigma * sigma_data / std::sqrt(s2 + d2), 1.0 / std::sqrt(s2 + d2), std::log(sigma) / 4.0};
}

// ---------------------------------------------------------------------------
// Magnitude instrumentation.

/// Per-feature RMS of h viewed as [B, N, M...]; the expectation runs over batch and M.
inline std::vector<double> feature_magnitudes(std::span<const double> v, std::size_t batch, std::size_t features) {
    const std::size_t m = v.size() / (batch * features);
    std::vector<double> out(features, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t n = 0; n < features; ++n) {
            const double* p = v.data() + (b * features + n) * m;
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += p[j] * p[j];
            out[n] += s;
        }
    for (auto& o : out) o = std::sqrt(o / static_cast<double>(batch * m));
    return out;
}

inline void aggregate(const std::vector<double>& mags, double& max_out, double& mean_out) {
    max_out = mean_out = 0.0;
    if (mags.empty()) return;
    for (double m : mags) {
        max_out = std::max(max_out, m);
        mean_out += m;
    }
    mean_out /= static_cast<double>(mags.size());
}

struct BucketMagnitudes {
    std::string bucket;
    double act_max = 0.0, act_mean = 0.0;
    double w_max = 0.0, w_mean = 0.0;
};

struct MagnitudeReport {
    std::vector<BucketMagnitudes> buckets;  // encoder buckets finest first, then decoder coarsest first

    const BucketMagnitudes& at(const std::string& name) const {
        for (const auto& b : buckets)
            if (b.bucket == name) return b;
        throw std::out_of_range("no magnitude bucket " + name);
    }
};

class MagnitudeRecorder {
public:
    void record(const std::string& bucket, const Tensor& h) {
        auto mags = h.rank() >= 2 ? feature_magnitudes(h.data(), h.dim(0), h.dim(1))
                                  : feature_magnitudes(h.data(), 1, h.size());
        auto& dst = acts_[bucket];
        dst.insert(dst.end(), mags.begin(), mags.end());
    }
    const std::map<std::string, std::vector<double>>& activations() const { return acts_; }

private:
    std::map<std::string, std::vector<double>> acts_;
};

struct ForwardCtx {
    bool training = false;
    Rng* rng = nullptr;                   // dropout masks; required when training with dropout
    MagnitudeRecorder* recorder = nullptr;
};

// ---------------------------------------------------------------------------

enum class ParamRole { weight, bias, gain, norm_scale, norm_shift };

struct ParamEntry {
    WeightParam param;
    std::string bucket;  // magnitude bucket, empty outside the encoder/decoder
    ParamRole role = ParamRole::weight;
};

class Denoiser {
public:
    Denoiser(NetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), rng_(seed, 0x6e6574) {
        cfg_.validate();
        build();
    }
    Denoiser(const Denoiser&) = delete;
    Denoiser& operator=(const Denoiser&) = delete;

    const NetConfig& config() const { return cfg_; }
    std::deque<ParamEntry>& params() { return params_; }
    const std::deque<ParamEntry>& params() const { return params_; }
    const FourierBank& fourier_bank() const { return fourier_; }

    std::vector<WeightParam*> trainable() {
        std::vector<WeightParam*> out;
        for (auto& e : params_) out.push_back(&e.param);
        return out;
    }

    WeightParam& param(const std::string& name) {
        for (auto& e : params_)
            if (e.param.name == name) return e.param;
        throw std::out_of_range("no parameter named " + name);
    }

    /// Raw network F(x; c_noise) on already-scaled input. labels is [B, label_dim] or undefined.
    Tensor raw(const Tensor& x, const std::vector<double>& c_noise, const Tensor& labels, const ForwardCtx& ctx) const {
        check_input(x, labels);
        const std::size_t B = x.dim(0);
        if (c_noise.size() != B) throw std::invalid_argument("raw: need one noise level per batch item");
        Tensor emb = embedding(Tensor(Shape{B}, c_noise), labels, ctx);

        Tensor h = x;
        if (cfg_.const_channel) h = concat({h, Tensor(Shape{B, 1, x.dim(2), x.dim(3)}, 1.0)}, 1);
        std::vector<Tensor> skips;
        for (const auto& m : enc_) {
            h = m.conv_only ? conv(m.in_conv, h, ctx, m.bucket) : run_block(m, h, emb, ctx);
            skips.push_back(h);
        }
        for (const auto& m : dec_) {
            if (m.takes_skip) {
                Tensor s = skips.back();
                skips.pop_back();
                h = cfg_.fixed_fn_mode == FixedFnMode::mp ? mp_cat(h, s, cfg_.t_cat) : concat({h, s}, 1);
            }
            h = run_block(m, h, emb, ctx);
        }
        return output_head(h, ctx);
    }

    /// Preconditioned denoiser D(x; sigma), one sigma per batch item.
    Tensor operator()(const Tensor& x, const std::vector<double>& sigma, const Tensor& labels = Tensor(),
                      const ForwardCtx& ctx = {}) const {
        if (x.rank() != 4 || sigma.size() != x.dim(0))
            throw std::invalid_argument("denoiser: need [B,C,H,W] input and one sigma per batch item");
        const std::size_t B = x.dim(0);
        std::vector<double> skip(B), out(B), in(B), noise(B);
        for (std::size_t i = 0; i < B; ++i) {
            Precond p = precondition(sigma[i], cfg_.sigma_data);
            skip[i] = p.c_skip;
            out[i] = p.c_out;
            in[i] = p.c_in;
            noise[i] = p.c_noise;
        }
        auto col = [B](std::vector<double> v) { return Tensor(Shape{B, 1, 1, 1}, std::move(v)); };
        Tensor F = raw(x * col(in), noise, labels, ctx);
        return x * col(skip) + F * col(out);
    }

    Tensor operator()(const Tensor& x, double sigma, const Tensor& labels = Tensor(), const ForwardCtx& ctx = {}) const {
        return (*this)(x, std::vector<double>(x.dim(0), sigma), labels, ctx);
    }

    /// Activation and weight magnitudes per {enc,dec} x resolution bucket.
    MagnitudeReport measure_magnitudes(const Tensor& x, const std::vector<double>& sigma,
                                       const Tensor& labels = Tensor()) const {
        NoGradGuard guard;
        MagnitudeRecorder rec;
        ForwardCtx ctx;
        ctx.recorder = &rec;
        (*this)(x, sigma, labels, ctx);
        MagnitudeReport report;
        for (const auto& name : bucket_order_) {
            BucketMagnitudes b{name};
            auto it = rec.activations().find(name);
            if (it != rec.activations().end()) aggregate(it->second, b.act_max, b.act_mean);
            aggregate(weight_magnitudes(name), b.w_max, b.w_mean);
            report.buckets.push_back(b);
        }
        return report;
    }

    /// Per-output-feature RMS of every weight tensor in a bucket.
    std::vector<double> weight_magnitudes(const std::string& bucket) const {
        std::vector<double> mags;
        for (const auto& e : params_) {
            if (e.bucket != bucket || e.role != ParamRole::weight) continue;
            const Tensor& w = e.param.value;
            auto m = feature_magnitudes(w.data(), 1, w.dim(0));
            mags.insert(mags.end(), m.begin(), m.end());
        }
        return mags;
    }

    const std::vector<std::string>& buckets() const { return bucket_order_; }

    /// Overwrites every weight with unit-Gaussian values and every gain with one.
    void reinit_gaussian(Rng& rng) {
        for (auto& e : params_) {
            auto d = e.param.value.mutable_data();
            if (e.role == ParamRole::gain) std::fill(d.begin(), d.end(), 1.0);
            else if (e.role == ParamRole::weight)
                for (auto& v : d) v = rng.normal();
        }
    }

private:
    enum class Resample { none, down, up };

    struct Linear {
        WeightParam* w = nullptr;
        WeightParam* b = nullptr;
    };
    struct Norm {
        WeightParam* scale = nullptr;
        WeightParam* shift = nullptr;
    };

    struct Module {
        std::string name, bucket;
        bool enc = true;
        bool conv_only = false;  // the input convolution
        bool takes_skip = false;
        Resample resample = Resample::none;
        std::size_t cin = 0, cout = 0, heads = 0;
        Linear in_conv, skip, res0, res1, emb, q, k, v, o;
        WeightParam* emb_gain = nullptr;
        Norm norm0, norm1, norm2;
    };

    NetConfig cfg_;
    Rng rng_;
    FourierBank fourier_;
    std::deque<ParamEntry> params_;
    std::vector<Module> enc_, dec_;
    Linear emb_fourier_lin_, emb_hidden_lin_, emb_label_, out_conv_;
    Norm out_norm_;
    WeightParam* out_gain_ = nullptr;
    std::vector<std::string> bucket_order_;

    WeightParam* add_param(const std::string& name, Shape shape, ParamRole role, const std::string& bucket,
                           WeightMode mode) {
        WeightParam p;
        if (role == ParamRole::weight) {
            p = make_weight(name, std::move(shape), mode, rng_);
        } else {
            const double fill = role == ParamRole::norm_scale ? 1.0 : 0.0;
            p = WeightParam{name, Tensor(std::move(shape), fill), WeightMode::plain};
            p.value.set_requires_grad();
        }
        params_.push_back({std::move(p), bucket, role});
        return &params_.back().param;
    }

    Linear make_linear(const std::string& name, Shape shape, const std::string& bucket) {
        Linear l;
        const std::size_t out = shape[0];
        l.w = add_param(name + ".weight", std::move(shape), ParamRole::weight, bucket, cfg_.weight_mode);
        if (cfg_.biases_on) l.b = add_param(name + ".bias", {out}, ParamRole::bias, bucket, WeightMode::plain);
        return l;
    }

    Norm make_norm(const std::string& name, std::size_t c, const std::string& bucket) {
        Norm n;
        if (cfg_.group_norm_mode == GroupNormMode::learned) {
            n.scale = add_param(name + ".scale", {c}, ParamRole::norm_scale, bucket, WeightMode::plain);
            n.shift = add_param(name + ".shift", {c}, ParamRole::norm_shift, bucket, WeightMode::plain);
        }
        return n;
    }

    std::size_t heads_for(std::size_t c) const { return std::max<std::size_t>(1, c / cfg_.attn_head_channels); }

    void make_attention(Module& m) {
        const std::string p = m.name + ".attn_";
        m.heads = heads_for(m.cout);
        WeightMode mode = cfg_.weight_mode;
        auto mk = [&](const char* s) {
            Linear l;
            l.w = add_param(p + s + ".weight", {m.cout, m.cout, 1, 1}, ParamRole::weight, m.bucket, mode);
            return l;
        };
        m.q = mk("q");
        m.k = mk("k");
        m.v = mk("v");
        m.o = mk("proj");
        if (!cfg_.legacy_blocks) return;
        m.norm2 = make_norm(m.name + ".norm2", m.cout, m.bucket);
    }

    Module make_block(const std::string& name, const std::string& bucket, bool enc, std::size_t cin,
                      std::size_t cout, Resample rs, bool attn) {
        Module m;
        m.name = name;
        m.bucket = bucket;
        m.enc = enc;
        m.cin = cin;
        m.cout = cout;
        m.resample = rs;
        const std::size_t E = cfg_.emb_channels;
        if (cfg_.legacy_blocks) {
            m.norm0 = make_norm(name + ".norm0", cin, bucket);
            m.res0 = make_linear(name + ".conv0", {cout, cin, 3, 3}, bucket);
            m.emb = make_linear(name + ".affine", {cfg_.emb_shift ? 2 * cout : cout, E}, bucket);
            m.norm1 = make_norm(name + ".norm1", cout, bucket);
            m.res1 = make_linear(name + ".conv1", {cout, cout, 3, 3}, bucket);
            if (cin != cout) m.skip = make_linear(name + ".skip", {cout, cin, 1, 1}, bucket);
        } else {
            if (cin != cout) m.skip = make_linear(name + ".conv_skip", {cout, cin, 1, 1}, bucket);
            const std::size_t rin = enc ? cout : cin;
            m.res0 = make_linear(name + ".conv_res0", {cout, rin, 3, 3}, bucket);
            m.emb = make_linear(name + ".emb_linear", {cout, E}, bucket);
            if (cfg_.fixed_fn_mode == FixedFnMode::mp)
                m.emb_gain = add_param(name + ".emb_gain", {1}, ParamRole::gain, bucket, WeightMode::plain);
            m.res1 = make_linear(name + ".conv_res1", {cout, cout, 3, 3}, bucket);
        }
        if (attn) make_attention(m);
        return m;
    }

    void build() {
        const std::size_t L = cfg_.levels();
        const std::size_t E = cfg_.emb_channels;
        fourier_ = FourierBank(cfg_.fourier_channels, rng_);
        if (cfg_.legacy_blocks) {
            emb_fourier_lin_ = make_linear("emb.map0", {E, cfg_.fourier_channels}, "");
            emb_hidden_lin_ = make_linear("emb.map1", {E, E}, "");
        } else {
            emb_fourier_lin_ = make_linear("emb.noise", {E, cfg_.fourier_channels}, "");
        }
        if (cfg_.label_dim > 0) {
            // The class embedding is an ordinary weight: unit-Gaussian init and the config's weight mode.
            WeightParam* w = add_param("emb.label.weight", {E, cfg_.label_dim}, ParamRole::weight, "", cfg_.weight_mode);
            for (auto& v : w->value.mutable_data()) v = rng_.normal();
            emb_label_.w = w;
        }

        auto res_of = [&](std::size_t level) { return cfg_.img_resolution >> level; };
        auto enc_bucket = [&](std::size_t level) { return "enc" + std::to_string(res_of(level)); };
        auto dec_bucket = [&](std::size_t level) { return "dec" + std::to_string(res_of(level)); };

        std::vector<std::size_t> skip_channels;
        std::size_t cout = cfg_.img_channels + (cfg_.const_channel ? 1 : 0);
        for (std::size_t level = 0; level < L; ++level) {
            const std::size_t cin0 = cout;
            const std::string bucket = enc_bucket(level);
            bucket_order_.push_back(bucket);
            if (level == 0) {
                cout = cfg_.channels[0];
                Module m;
                m.name = "enc." + std::to_string(res_of(0)) + ".conv";
                m.bucket = bucket;
                m.conv_only = true;
                m.cin = cin0;
                m.cout = cout;
                m.in_conv = make_linear(m.name, {cout, cin0, 3, 3}, bucket);
                enc_.push_back(std::move(m));
            } else {
                enc_.push_back(make_block("enc." + std::to_string(res_of(level)) + ".down", bucket, true, cout, cout,
                                          Resample::down, false));
            }
            skip_channels.push_back(cout);
            for (std::size_t i = 0; i < cfg_.blocks_per_level; ++i) {
                const std::size_t cin = cout;
                cout = cfg_.channels[level];
                enc_.push_back(make_block("enc." + std::to_string(res_of(level)) + ".block" + std::to_string(i), bucket,
                                          true, cin, cout, Resample::none, cfg_.has_attention(level)));
                skip_channels.push_back(cout);
            }
        }
        for (std::size_t li = L; li-- > 0;) {
            const std::string bucket = dec_bucket(li);
            bucket_order_.push_back(bucket);
            const std::string prefix = "dec." + std::to_string(res_of(li));
            if (li == L - 1) {
                dec_.push_back(make_block(prefix + ".in0", bucket, false, cout, cout, Resample::none, true));
                dec_.push_back(make_block(prefix + ".in1", bucket, false, cout, cout, Resample::none, false));
            } else {
                dec_.push_back(make_block(prefix + ".up", bucket, false, cout, cout, Resample::up, false));
            }
            for (std::size_t i = 0; i <= cfg_.blocks_per_level; ++i) {
                const std::size_t cin = cout + skip_channels.back();
                skip_channels.pop_back();
                cout = cfg_.channels[li];
                Module m = make_block(prefix + ".block" + std::to_string(i), bucket, false, cin, cout, Resample::none,
                                      cfg_.has_attention(li));
                m.takes_skip = true;
                dec_.push_back(std::move(m));
            }
        }

        if (cfg_.legacy_blocks) out_norm_ = make_norm("out.norm", cout, "");
        out_conv_ = make_linear("out.conv", {cfg_.img_channels, cout, 3, 3}, "");
        if (cfg_.out_zero_init) {
            for (auto& v : out_conv_.w->value.mutable_data()) v = 0.0;
        }
        if (cfg_.fixed_fn_mode == FixedFnMode::mp)
            out_gain_ = add_param("out.gain", {1}, ParamRole::gain, "", WeightMode::plain);
    }

    void check_input(const Tensor& x, const Tensor& labels) const {
        if (x.rank() != 4 || x.dim(1) != cfg_.img_channels || x.dim(2) != cfg_.img_resolution ||
            x.dim(3) != cfg_.img_resolution)
            throw ShapeError("denoiser: input " + to_string(x.shape()) + " does not match configured [B," +
                             std::to_string(cfg_.img_channels) + "," + std::to_string(cfg_.img_resolution) + "," +
                             std::to_string(cfg_.img_resolution) + "]");
        if (labels.defined() &&
            (labels.rank() != 2 || labels.dim(0) != x.dim(0) || labels.dim(1) != cfg_.label_dim))
            throw ShapeError("denoiser: labels " + to_string(labels.shape()) + " do not match [" +
                             std::to_string(x.dim(0)) + "," + std::to_string(cfg_.label_dim) + "]");
    }

    // Layer application -------------------------------------------------------

    Tensor conv(const Linear& l, const Tensor& x, const ForwardCtx& ctx, const std::string& bucket) const {
        Tensor y = mp_conv(x, *l.w);
        if (l.b) y = y + reshape(l.b->value, {1, l.b->value.size(), 1, 1});
        if (ctx.recorder && !bucket.empty()) ctx.recorder->record(bucket, y);
        return y;
    }

    Tensor linear(const Linear& l, const Tensor& x) const {
        Tensor y = mp_linear(x, *l.w);
        if (l.b) y = y + reshape(l.b->value, {1, l.b->value.size()});
        return y;
    }

    Tensor norm(const Norm& n, const Tensor& x) const {
        switch (cfg_.group_norm_mode) {
            case GroupNormMode::learned:
                return group_norm_learned(x, cfg_.group_size_for(x.dim(1)), n.scale->value, n.shift->value);
            case GroupNormMode::simplified:
                return group_norm_simplified(x, cfg_.group_size_for(x.dim(1)));
            case GroupNormMode::none_pixelnorm:
                return x;
        }
        return x;
    }

    Tensor act(const Tensor& x) const { return cfg_.fixed_fn_mode == FixedFnMode::mp ? mp_silu(x) : silu(x); }

    Tensor add_branch(const Tensor& main, const Tensor& branch, double t) const {
        return cfg_.fixed_fn_mode == FixedFnMode::mp ? mp_sum(main, branch, t) : main + branch;
    }

    static Tensor resample(const Tensor& x, Resample r) {
        switch (r) {
            case Resample::down: return avg_pool2(x);
            case Resample::up: return upsample2(x);
            case Resample::none: return x;
        }
        return x;
    }

    Tensor dropout(const Tensor& x, const ForwardCtx& ctx) const {
        if (!ctx.training || cfg_.dropout <= 0.0) return x;
        if (!ctx.rng) throw std::invalid_argument("dropout during training requires an rng");
        const double keep = 1.0 - cfg_.dropout;
        Tensor mask(x.shape());
        for (auto& m : mask.mutable_data()) m = ctx.rng->uniform() < keep ? 1.0 / keep : 0.0;
        return x * mask;
    }

    Tensor embedding(const Tensor& c_noise, const Tensor& labels, const ForwardCtx& ctx) const {
        Tensor f = mp_fourier(c_noise, fourier_);
        if (cfg_.fixed_fn_mode == FixedFnMode::plain) f = f * (1.0 / std::numbers::sqrt2);
        Tensor e = linear(emb_fourier_lin_, f);
        if (cfg_.legacy_blocks) e = linear(emb_hidden_lin_, act(e));
        if (emb_label_.w) {
            const std::size_t B = c_noise.size();
            Tensor onehot = labels.defined() ? labels : Tensor(Shape{B, cfg_.label_dim}, 0.0);
            if (cfg_.label_sqrt_scale) onehot = onehot * std::sqrt(static_cast<double>(cfg_.label_dim));
            Tensor c = linear(emb_label_, onehot);
            if (ctx.recorder) ctx.recorder->record("emb", c);
            e = cfg_.fixed_fn_mode == FixedFnMode::mp ? mp_sum(e, c, cfg_.t_emb) : e + c;
        }
        return act(e);
    }

    Tensor emb_scale(const Module& m, const Tensor& emb, const ForwardCtx& ctx) const {
        Tensor c = linear(m.emb, emb);
        if (m.emb_gain) c = gain(c, m.emb_gain->value);
        if (ctx.recorder) ctx.recorder->record(m.bucket, c);
        return reshape(c, {c.dim(0), c.dim(1), 1, 1});
    }

    Tensor run_attention(const Module& m, const Tensor& x, const ForwardCtx& ctx) const {
        Tensor in = cfg_.legacy_blocks ? norm(m.norm2, x) : x;
        AttentionResult a = attention(in, *m.q.w, *m.k.w, *m.v.w, *m.o.w, m.heads,
                                      cfg_.attention_mode == AttentionMode::cosine);
        if (ctx.recorder) ctx.recorder->record(m.bucket, a.out);
        return add_branch(x, a.out, cfg_.t_attn);
    }

    Tensor run_block(const Module& m, const Tensor& x_in, const Tensor& emb, const ForwardCtx& ctx) const {
        Tensor x = x_in;
        if (cfg_.legacy_blocks) {
            Tensor h = resample(act(norm(m.norm0, x)), m.resample);
            h = conv(m.res0, h, ctx, m.bucket);
            Tensor e = emb_scale(m, emb, ctx);
            if (cfg_.emb_shift) {
                Tensor scale = slice(e, 1, 0, m.cout), shift = slice(e, 1, m.cout, 2 * m.cout);
                h = act(norm(m.norm1, h) * (scale + 1.0) + shift);
            } else {
                h = act(norm(m.norm1, h) * (e + 1.0));
            }
            h = conv(m.res1, dropout(h, ctx), ctx, m.bucket);
            Tensor s = resample(x, m.resample);
            if (m.skip.w) s = conv(m.skip, s, ctx, m.bucket);
            x = h + s;
        } else {
            x = resample(x, m.resample);
            if (m.enc) {
                if (m.skip.w) x = conv(m.skip, x, ctx, m.bucket);
                x = pixel_norm(x);
            }
            Tensor y = conv(m.res0, act(x), ctx, m.bucket);
            y = act(y * (emb_scale(m, emb, ctx) + 1.0));
            y = conv(m.res1, dropout(y, ctx), ctx, m.bucket);
            if (!m.enc && m.skip.w) x = conv(m.skip, x, ctx, m.bucket);
            x = add_branch(x, y, cfg_.t_res);
        }
        if (m.q.w) x = run_attention(m, x, ctx);
        return clamp(x, -cfg_.clamp, cfg_.clamp);
    }

    Tensor output_head(const Tensor& x, const ForwardCtx& ctx) const {
        Tensor h = cfg_.legacy_blocks ? act(norm(out_norm_, x)) : x;
        Tensor y = conv(out_conv_, h, ctx, "");
        if (out_gain_) y = gain(y, out_gain_->value);
        return y;
    }
};

}  // namespace mpdiff
