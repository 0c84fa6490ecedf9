#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "mpdiff/rng.hpp"
#include "mpdiff/tensor.hpp"

namespace mpdiff {

enum class DatasetKind { gaussian, blobs, checker };

inline std::string to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::gaussian: return "gaussian";
        case DatasetKind::blobs: return "blobs";
        case DatasetKind::checker: return "checker";
    }
    return "?";
}

inline DatasetKind dataset_kind_from(const std::string& s) {
    if (s == "gaussian") return DatasetKind::gaussian;
    if (s == "blobs") return DatasetKind::blobs;
    if (s == "checker") return DatasetKind::checker;
    throw std::invalid_argument("unknown dataset kind '" + s + "' (expected gaussian, blobs or checker)");
}

struct Batch {
    Tensor images;  // [B, C, R, R]
    Tensor labels;  // [B, classes] one-hot, undefined when classes == 0
};

/// Procedural images standardized to zero mean and standard deviation sigma_data.
///   gaussian: i.i.d. N(0, sigma_data^2) pixels, so the covariance is sigma_data^2 I.
///   blobs:    (class + 1) Gaussian bumps of random sign, position and width.
///   checker:  +-sigma_data checkerboard with class-dependent cell size and random phase.
class SyntheticDataset {
public:
    SyntheticDataset(DatasetKind kind, std::size_t resolution, std::size_t channels, std::size_t classes = 0,
                     double sigma_data = 0.5)
        : kind_(kind), res_(resolution), ch_(channels), classes_(classes), sd_(sigma_data) {
        if (res_ == 0 || ch_ == 0) throw std::invalid_argument("dataset needs positive resolution and channels");
        if (kind_ == DatasetKind::blobs) calibrate();
    }

    DatasetKind kind() const { return kind_; }
    std::size_t resolution() const { return res_; }
    std::size_t channels() const { return ch_; }
    std::size_t classes() const { return classes_; }
    double sigma_data() const { return sd_; }

    Batch sample(std::size_t batch, Rng& rng) const {
        const std::size_t per = ch_ * res_ * res_;
        Tensor img(Shape{batch, ch_, res_, res_});
        Tensor lab = classes_ ? Tensor(Shape{batch, classes_}) : Tensor();
        auto data = img.mutable_data();
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t cls = classes_ ? rng.below(classes_) : 0;
            if (classes_) lab.mutable_data()[b * classes_ + cls] = 1.0;
            draw(data.subspan(b * per, per), cls, rng);
        }
        return {std::move(img), std::move(lab)};
    }

private:
    DatasetKind kind_;
    std::size_t res_, ch_, classes_;
    double sd_;
    double raw_mean_ = 0.0, raw_std_ = 1.0;  // blobs only

    void draw(std::span<double> out, std::size_t cls, Rng& rng) const {
        switch (kind_) {
            case DatasetKind::gaussian:
                for (auto& v : out) v = sd_ * rng.normal();
                return;
            case DatasetKind::checker: {
                const std::size_t cell = 1 + cls % std::max<std::size_t>(1, res_ / 2);
                const std::size_t ox = rng.below(2 * cell), oy = rng.below(2 * cell);
                const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
                for (std::size_t c = 0; c < ch_; ++c)
                    for (std::size_t y = 0; y < res_; ++y)
                        for (std::size_t x = 0; x < res_; ++x) {
                            const bool odd = (((x + ox) / cell) + ((y + oy) / cell) + c) % 2;
                            out[(c * res_ + y) * res_ + x] = (odd ? sd_ : -sd_) * sign;
                        }
                return;
            }
            case DatasetKind::blobs:
                draw_blobs(out, cls, rng);
                for (auto& v : out) v = (v - raw_mean_) / raw_std_ * sd_;
                return;
        }
    }

    void draw_blobs(std::span<double> out, std::size_t cls, Rng& rng) const {
        std::fill(out.begin(), out.end(), 0.0);
        const std::size_t count = cls + 1;
        const double r = static_cast<double>(res_);
        for (std::size_t k = 0; k < count; ++k) {
            const double cx = rng.uniform() * r, cy = rng.uniform() * r;
            const double width = r * (0.08 + 0.17 * rng.uniform());
            const double amp = rng.normal();
            const std::size_t c = rng.below(ch_);
            for (std::size_t y = 0; y < res_; ++y)
                for (std::size_t x = 0; x < res_; ++x) {
                    const double dx = (x + 0.5 - cx) / width, dy = (y + 0.5 - cy) / width;
                    out[(c * res_ + y) * res_ + x] += amp * std::exp(-0.5 * (dx * dx + dy * dy));
                }
        }
    }

    // Pixel mean and std of the raw bump images, estimated once from a fixed stream.
    void calibrate() {
        Rng rng(0xb10b5, 0xca1);
        const std::size_t per = ch_ * res_ * res_, n = 8192;
        std::vector<double> buf(per);
        double s = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t cls = classes_ ? rng.below(classes_) : 0;
            draw_blobs(buf, cls, rng);
            for (double v : buf) s += v, s2 += v * v;
        }
        const double cnt = static_cast<double>(n * per);
        raw_mean_ = s / cnt;
        raw_std_ = std::sqrt(s2 / cnt - raw_mean_ * raw_mean_);
    }
};

}  // namespace mpdiff
