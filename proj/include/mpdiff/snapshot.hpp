#pragma once

// Snapshot files and the store that indexes them.
//
// File layout (all integers little-endian):
//   "PHEMA1" | u32 version | u32 precision bits (16 or 32) | u32 len | time-units string
//   | u64 record count | records...
// Record: u32 name len | name | u32 rank | u64 extents[rank] | f64 gamma | u64 t
//   | payload (precision-bit floats) | u32 CRC32 of the record bytes before it.
//
// Whole-file digests (manifest crc field, parameter checksums) use CRC-32C: a CRC-32 over
// bytes that already end in their own CRC-32 is constant, so it cannot tell payloads apart.

#include <Eigen/Core>
#include <boost/crc.hpp>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpdiff/ema.hpp"
#include "mpdiff/tensor.hpp"

namespace mpdiff {

namespace fs = std::filesystem;

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

using ParamSet = std::vector<NamedTensor>;

class SnapshotError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Precision : std::uint32_t { f16 = 16, f32 = 32 };

inline constexpr char kSnapshotMagic[6] = {'P', 'H', 'E', 'M', 'A', '1'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

/// Rounds a value the way it will be stored.
inline double quantize(double v, Precision p) {
    if (p == Precision::f32) return static_cast<double>(static_cast<float>(v));
    return static_cast<double>(static_cast<float>(Eigen::half(static_cast<float>(v))));
}

inline std::uint32_t crc32_of(const std::string& bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

/// CRC-32C (Castagnoli polynomial).
inline std::uint32_t crc32c_of(const std::string& bytes) {
    boost::crc_optimal<32, 0x1EDC6F41, 0xFFFFFFFF, 0xFFFFFFFF, true, true> c;
    c.process_bytes(bytes.data(), bytes.size());
    return c.checksum();
}

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::string& bytes, std::string file) : b_(bytes), file_(std::move(file)) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        unsigned char buf[sizeof(T)];
        std::memcpy(buf, b_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
        pos_ += sizeof(T);
        T v;
        std::memcpy(&v, buf, sizeof(T));
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    const std::string& buffer() const { return b_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) throw SnapshotError(file_ + ": truncated snapshot file");
    }
    const std::string& b_;
    std::string file_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw SnapshotError("cannot open " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw SnapshotError("cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw SnapshotError("short write to " + p.string());
}

}  // namespace detail

struct Snapshot {
    std::uint64_t t = 0;
    double gamma = 0.0;
    Precision precision = Precision::f32;
    ParamSet params;
};

inline std::string encode_snapshot(const Snapshot& s) {
    std::string out(kSnapshotMagic, sizeof(kSnapshotMagic));
    detail::put_le<std::uint32_t>(out, kSnapshotVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.precision));
    const std::string units = "steps";
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(units.size()));
    out += units;
    detail::put_le<std::uint64_t>(out, s.params.size());
    for (const auto& p : s.params) {
        if (numel(p.shape) != p.data.size()) throw SnapshotError("tensor " + p.name + ": shape does not match data");
        std::string rec;
        detail::put_le<std::uint32_t>(rec, static_cast<std::uint32_t>(p.name.size()));
        rec += p.name;
        detail::put_le<std::uint32_t>(rec, static_cast<std::uint32_t>(p.shape.size()));
        for (std::size_t e : p.shape) detail::put_le<std::uint64_t>(rec, e);
        detail::put_le<double>(rec, s.gamma);
        detail::put_le<std::uint64_t>(rec, s.t);
        for (double v : p.data) {
            if (s.precision == Precision::f32) {
                detail::put_le<float>(rec, static_cast<float>(v));
            } else {
                Eigen::half h(static_cast<float>(v));
                detail::put_le<std::uint16_t>(rec, Eigen::numext::bit_cast<std::uint16_t>(h));
            }
        }
        detail::put_le<std::uint32_t>(rec, crc32_of(rec));
        out += rec;
    }
    return out;
}

inline Snapshot decode_snapshot(const std::string& bytes, const std::string& origin = "snapshot") {
    detail::Reader r(bytes, origin);
    if (r.bytes(sizeof(kSnapshotMagic)) != std::string(kSnapshotMagic, sizeof(kSnapshotMagic)))
        throw SnapshotError(origin + ": bad magic, not a snapshot file");
    const auto version = r.get<std::uint32_t>();
    if (version != kSnapshotVersion)
        throw SnapshotError(origin + ": unsupported snapshot version " + std::to_string(version));
    const auto bits = r.get<std::uint32_t>();
    if (bits != 16 && bits != 32) throw SnapshotError(origin + ": unsupported precision " + std::to_string(bits));
    Snapshot s;
    s.precision = static_cast<Precision>(bits);
    const auto ulen = r.get<std::uint32_t>();
    const std::string units = r.bytes(ulen);
    if (units != "steps") throw SnapshotError(origin + ": unsupported time units '" + units + "'");
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t k = 0; k < count; ++k) {
        const std::size_t start = r.pos();
        NamedTensor nt;
        nt.name = r.bytes(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        for (std::uint32_t i = 0; i < rank; ++i) nt.shape.push_back(r.get<std::uint64_t>());
        const double gamma = r.get<double>();
        const auto t = r.get<std::uint64_t>();
        if (k == 0) {
            s.gamma = gamma;
            s.t = t;
        } else if (gamma != s.gamma || t != s.t) {
            throw SnapshotError(origin + ": record " + nt.name + " disagrees on (t, gamma)");
        }
        nt.data.resize(numel(nt.shape));
        for (auto& v : nt.data) {
            if (s.precision == Precision::f32) v = r.get<float>();
            else v = static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(r.get<std::uint16_t>()));
        }
        const std::uint32_t want = crc32_of(r.buffer().substr(start, r.pos() - start));
        if (r.get<std::uint32_t>() != want) throw SnapshotError(origin + ": checksum mismatch in record " + nt.name);
        s.params.push_back(std::move(nt));
    }
    if (r.pos() != bytes.size()) throw SnapshotError(origin + ": trailing bytes after last record");
    return s;
}

/// Directory of snapshot files plus a line-oriented manifest.
class SnapshotStore {
public:
    struct Entry {
        std::uint64_t t;
        double gamma;
        std::string file;  // relative to the store directory
        std::uint32_t crc;
    };

    explicit SnapshotStore(fs::path dir) : dir_(std::move(dir)) {
        fs::create_directories(dir_);
        if (fs::exists(manifest_path())) load_manifest();
    }

    const fs::path& dir() const { return dir_; }
    const std::vector<Entry>& entries() const { return entries_; }
    bool empty() const { return entries_.empty(); }

    std::uint64_t max_t() const {
        std::uint64_t m = 0;
        for (const auto& e : entries_) m = std::max(m, e.t);
        return m;
    }

    void write(const Snapshot& s) {
        if (!entries_.empty()) {
            const std::uint64_t last = entries_.back().t;
            if (s.t < last) throw SnapshotError("snapshots must be written in non-decreasing t order");
            for (const auto& e : entries_)
                if (e.t == s.t && e.gamma == s.gamma) throw SnapshotError("duplicate snapshot (t, gamma)");
        }
        std::ostringstream name;
        name << "snap-" << std::setw(10) << std::setfill('0') << s.t << "-" << std::setprecision(17) << s.gamma
             << ".phema";
        const std::string bytes = encode_snapshot(s);
        detail::write_file(dir_ / name.str(), bytes);
        entries_.push_back({s.t, s.gamma, name.str(), crc32c_of(bytes)});
        save_manifest();
    }

    Snapshot read(const Entry& e) const {
        const std::string bytes = detail::read_file(dir_ / e.file);
        if (crc32c_of(bytes) != e.crc) throw SnapshotError(e.file + ": file checksum does not match manifest");
        Snapshot s = decode_snapshot(bytes, e.file);
        if (s.t != e.t || s.gamma != e.gamma) throw SnapshotError(e.file + ": header disagrees with manifest");
        return s;
    }

    /// Checks that every t carries the same gamma set.
    void validate() const {
        std::map<std::uint64_t, std::set<double>> by_t;
        for (const auto& e : entries_) by_t[e.t].insert(e.gamma);
        if (by_t.empty()) return;
        const auto& ref = by_t.begin()->second;
        for (const auto& [t, gs] : by_t)
            if (gs != ref) throw SnapshotError("snapshot at t=" + std::to_string(t) + " has a different gamma set");
    }

    fs::path manifest_path() const { return dir_ / "manifest.txt"; }

private:
    fs::path dir_;
    std::vector<Entry> entries_;

    void save_manifest() const {
        std::ostringstream os;
        for (const auto& e : entries_)
            os << "t=" << e.t << " gamma=" << std::setprecision(17) << e.gamma << " file=" << e.file << " crc="
               << std::hex << std::setw(8) << std::setfill('0') << e.crc << std::dec << std::setfill(' ') << "\n";
        const fs::path tmp = dir_ / "manifest.txt.tmp";
        detail::write_file(tmp, os.str());
        fs::rename(tmp, manifest_path());
    }

    void load_manifest() {
        std::istringstream in(detail::read_file(manifest_path()));
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string tok;
            Entry e{};
            int seen = 0;
            while (ls >> tok) {
                const auto eq = tok.find('=');
                if (eq == std::string::npos) throw SnapshotError("manifest line " + std::to_string(lineno) + ": bad token");
                const std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
                if (k == "t") e.t = std::stoull(v), seen |= 1;
                else if (k == "gamma") e.gamma = std::stod(v), seen |= 2;
                else if (k == "file") e.file = v, seen |= 4;
                else if (k == "crc") e.crc = static_cast<std::uint32_t>(std::stoul(v, nullptr, 16)), seen |= 8;
            }
            if (seen != 15) throw SnapshotError("manifest line " + std::to_string(lineno) + ": missing field");
            entries_.push_back(e);
        }
    }
};

struct Reconstruction {
    ParamSet params;
    std::map<std::string, double> fit_residual;  // per distinct target gamma, keyed by its decimal form
};

/// Synthesizes the average for a target power profile at step t_r from a store.
/// overrides maps tensor names to a different target gamma.
inline Reconstruction reconstruct(const SnapshotStore& store, std::uint64_t t_r, double gamma_r,
                                  const std::map<std::string, double>& overrides = {}) {
    if (store.empty()) throw SnapshotError("reconstruct: snapshot store is empty");
    store.validate();
    if (t_r > store.max_t())
        throw std::invalid_argument("reconstruct: target step " + std::to_string(t_r) + " lies beyond the last snapshot (" +
                                    std::to_string(store.max_t()) + "); extrapolation is not supported");
    if (t_r == 0) throw std::invalid_argument("reconstruct: target step must be positive");

    std::vector<ProfilePoint> snaps;
    for (const auto& e : store.entries()) snaps.push_back({static_cast<double>(e.t), e.gamma});
    std::vector<double> gammas{gamma_r};
    for (const auto& [name, g] : overrides)
        if (std::find(gammas.begin(), gammas.end(), g) == gammas.end()) gammas.push_back(g);
    std::vector<ProfilePoint> targets;
    for (double g : gammas) targets.push_back({static_cast<double>(t_r), g});
    Matrix X = solve_posthoc_weights(snaps, targets);

    Reconstruction out;
    for (std::size_t k = 0; k < gammas.size(); ++k) {
        std::ostringstream key;
        key << std::setprecision(17) << gammas[k];
        out.fit_residual[key.str()] = fit_residual(snaps, targets[k], X.col(static_cast<Eigen::Index>(k)));
    }
    auto column_for = [&](const std::string& name) -> std::size_t {
        auto it = overrides.find(name);
        if (it == overrides.end()) return 0;
        return static_cast<std::size_t>(std::find(gammas.begin(), gammas.end(), it->second) - gammas.begin());
    };

    std::set<std::string> override_names;
    for (const auto& [name, g] : overrides) override_names.insert(name);
    for (std::size_t i = 0; i < store.entries().size(); ++i) {
        Snapshot s = store.read(store.entries()[i]);
        if (i == 0) {
            out.params = s.params;
            for (auto& p : out.params) std::fill(p.data.begin(), p.data.end(), 0.0);
            for (const auto& n : override_names) {
                bool found = std::any_of(out.params.begin(), out.params.end(), [&](const auto& p) { return p.name == n; });
                if (!found) throw std::invalid_argument("per-tensor override names unknown tensor " + n);
            }
        }
        if (s.params.size() != out.params.size())
            throw SnapshotError("store corruption: snapshot " + store.entries()[i].file + " has a different tensor set");
        for (std::size_t k = 0; k < out.params.size(); ++k) {
            auto& acc = out.params[k];
            const NamedTensor* src = &s.params[k];
            if (src->name != acc.name) {
                auto it = std::find_if(s.params.begin(), s.params.end(), [&](const auto& p) { return p.name == acc.name; });
                if (it == s.params.end())
                    throw SnapshotError("store corruption: tensor " + acc.name + " missing from " + store.entries()[i].file);
                src = &*it;
            }
            if (src->shape != acc.shape)
                throw SnapshotError("store corruption: tensor " + acc.name + " changes shape in " + store.entries()[i].file);
            const double w = X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(column_for(acc.name)));
            for (std::size_t j = 0; j < acc.data.size(); ++j) acc.data[j] += w * src->data[j];
        }
    }
    return out;
}

}  // namespace mpdiff
