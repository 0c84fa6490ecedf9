#pragma once

// Dense row-major tensor of doubles with a dynamically built reverse-mode tape.
//
// A Tensor is a cheap handle onto shared storage, like a framework tensor:
// copying a Tensor aliases it. Every op records a closure on its output that
// scatters the output gradient back into the inputs that require gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mpdiff/rng.hpp"

namespace mpdiff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

/// Raised when operand shapes violate an op's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline ShapeError shape_mismatch(const char* op, const Shape& a, const Shape& b) {
    return ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated only when traced
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const std::vector<double>&)> backward;

    void accumulate(std::size_t i, double g) {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        grad[i] += g;
    }
    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Disables tape recording for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : node_(std::make_shared<detail::Node>()) {
        node_->data.assign(numel(shape), fill);
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<detail::Node>()) {
        if (numel(shape) != data.size())
            throw ShapeError("Tensor: shape " + to_string(shape) + " does not hold " + std::to_string(data.size()) +
                             " values");
        node_->shape = std::move(shape);
        node_->data = std::move(data);
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& v : t.node_->data) v = stddev * rng.normal();
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.node_->data) v = lo + (hi - lo) * rng.uniform();
        return t;
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    /// Untracked in-place access, for optimizer updates and initialization.
    std::span<double> mutable_data() { return node_->data; }
    const std::vector<double>& values() const { return node_->data; }

    double at(std::size_t i) const { return node_->data.at(i); }
    double item() const {
        if (size() != 1) throw ShapeError("item(): tensor has shape " + to_string(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        if (!on) node_->grad.clear();
        return *this;
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    /// Fresh leaf with a copy of the values and no history.
    Tensor detach() const { return Tensor(shape(), node_->data); }
    Tensor clone() const { return detach(); }

    /// Identity of the underlying storage.
    const void* id() const noexcept { return node_.get(); }

    void backward() const;

    std::shared_ptr<detail::Node> node_;
};

namespace detail {

using BackwardFn = std::function<void(const std::vector<double>&)>;

inline Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                          BackwardFn fn) {
    Tensor out(std::move(shape), std::move(data));
    if (!grad_mode()) return out;
    bool traced = false;
    for (const Tensor* t : inputs) traced = traced || t->requires_grad();
    if (!traced) return out;
    out.node_->requires_grad = true;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) out.node_->parents.push_back(t->node_);
    out.node_->backward = std::move(fn);
    return out;
}

inline Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs, BackwardFn fn) {
    Tensor out(std::move(shape), std::move(data));
    if (!grad_mode()) return out;
    bool traced = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!traced) return out;
    out.node_->requires_grad = true;
    for (const Tensor& t : inputs)
        if (t.requires_grad()) out.node_->parents.push_back(t.node_);
    out.node_->backward = std::move(fn);
    return out;
}

/// Returns the node if it collects gradients, else null.
inline Node* sink(const Tensor& t) { return t.requires_grad() ? t.node_.get() : nullptr; }

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

}  // namespace detail

inline void Tensor::backward() const {
    if (size() != 1) throw ShapeError("backward(): root must be scalar, got " + to_string(shape()));
    if (!requires_grad()) return;

    // Iterative post-order DFS yields a topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            detail::Node* p = n->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_buffer().assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(n->grad);
    }
    // Release the tape; only leaves keep their gradients.
    for (detail::Node* n : order) {
        if (n->backward) {
            n->backward = nullptr;
            n->parents.clear();
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with size-1 broadcasting between equal-rank operands.

namespace detail {

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    if (a.size() != b.size()) throw shape_mismatch(op, a, b);
    Shape out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i] || b[i] == 1) out[i] = a[i];
        else if (a[i] == 1) out[i] = b[i];
        else throw shape_mismatch(op, a, b);
    }
    return out;
}

inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t s = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
        strides[i] = in[i] == 1 && out[i] != 1 ? 0 : s;
        s *= in[i];
    }
    return strides;
}

/// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void broadcast_loop(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb, F&& f) {
    const std::size_t n = numel(out);
    const std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < n; ++o) {
        f(o, ia, ib);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

// fwd(a, b) -> value; da(a, b, out) and db(a, b, out) -> local partials.
template <typename Fwd, typename Da, typename Db>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
    if (a.shape() == b.shape()) {
        const auto& x = a.values();
        const auto& y = b.values();
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
        return make_result(a.shape(), std::move(out), {&a, &b},
                           [an = a.node_, bn = b.node_, da, db](const std::vector<double>& g) {
                               const auto& x = an->data;
                               const auto& y = bn->data;
                               if (an->requires_grad) {
                                   auto& ga = an->grad_buffer();
                                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(x[i], y[i]);
                               }
                               if (bn->requires_grad) {
                                   auto& gb = bn->grad_buffer();
                                   for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(x[i], y[i]);
                               }
                           });
    }
    Shape os = broadcast_shape(name, a.shape(), b.shape());
    auto sa = broadcast_strides(a.shape(), os);
    auto sb = broadcast_strides(b.shape(), os);
    std::vector<double> out(numel(os));
    const auto& x = a.values();
    const auto& y = b.values();
    broadcast_loop(os, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(x[i], y[j]); });
    return make_result(os, std::move(out), {&a, &b},
                       [an = a.node_, bn = b.node_, os, sa, sb, da, db](const std::vector<double>& g) {
                           const auto& x = an->data;
                           const auto& y = bn->data;
                           std::vector<double>* ga = an->requires_grad ? &an->grad_buffer() : nullptr;
                           std::vector<double>* gb = bn->requires_grad ? &bn->grad_buffer() : nullptr;
                           broadcast_loop(os, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
                               if (ga) (*ga)[i] += g[o] * da(x[i], y[j]);
                               if (gb) (*gb)[j] += g[o] * db(x[i], y[j]);
                           });
                       });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
    const auto& x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
    return make_result(a.shape(), std::move(out), {&a}, [an = a.node_, deriv](const std::vector<double>& g) {
        auto& ga = an->grad_buffer();
        const auto& x = an->data;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i]);
    });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor operator*(const Tensor& a, double s) {
    return detail::unary(a, [s](double x) { return x * s; }, [s](double) { return s; });
}
inline Tensor operator*(double s, const Tensor& a) { return a * s; }
inline Tensor operator/(const Tensor& a, double s) { return a * (1.0 / s); }
inline Tensor operator+(const Tensor& a, double s) {
    return detail::unary(a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}
inline Tensor operator+(double s, const Tensor& a) { return a + s; }
inline Tensor operator-(const Tensor& a, double s) { return a + (-s); }
inline Tensor operator-(const Tensor& a) { return a * -1.0; }

/// Multiplies every element of a by the single value held in s; s receives a gradient.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) throw shape_mismatch("scale_by", a.shape(), s.shape());
    const double k = s.item();
    std::vector<double> out(a.values());
    for (auto& v : out) v *= k;
    return detail::make_result(a.shape(), std::move(out), {&a, &s},
                               [an = a.node_, sn = s.node_](const std::vector<double>& g) {
                                   const double k = sn->data[0];
                                   if (an->requires_grad) {
                                       auto& ga = an->grad_buffer();
                                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * k;
                                   }
                                   if (sn->requires_grad) {
                                       double acc = 0.0;
                                       for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * an->data[i];
                                       sn->accumulate(0, acc);
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.

inline Tensor square(const Tensor& a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}
inline Tensor sqrt(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::sqrt(x); }, [](double x) { return 0.5 / std::sqrt(x); });
}
inline Tensor exp(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}
inline Tensor log(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}
inline Tensor cos(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::cos(x); }, [](double x) { return -std::sin(x); });
}

inline Tensor silu(const Tensor& a) {
    return detail::unary(
        a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

/// Clamp to [lo, hi]; gradient is 1 strictly inside and 0 outside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    return detail::unary(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x) { return x > lo && x < hi ? 1.0 : 0.0; });
}

inline Tensor clamp_min(const Tensor& a, double lo) { return clamp(a, lo, std::numeric_limits<double>::infinity()); }

// ---------------------------------------------------------------------------
// Reductions.

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return detail::make_result(Shape{1}, {s}, {&a}, [an = a.node_](const std::vector<double>& g) {
        auto& ga = an->grad_buffer();
        for (auto& v : ga) v += g[0];
    });
}

inline Tensor mean(const Tensor& a) { return sum(a) * (1.0 / static_cast<double>(a.size())); }

/// Sum over one axis; the axis is kept with extent 1 when keepdim is set.
inline Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim = true) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw ShapeError("sum_axis: axis " + std::to_string(axis) + " out of range for " + to_string(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    Shape os = s;
    if (keepdim) os[axis] = 1;
    else os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<double> out(outer * inner, 0.0);
    const auto& x = a.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k) {
            const double* row = &x[(o * n + k) * inner];
            double* dst = &out[o * inner];
            for (std::size_t i = 0; i < inner; ++i) dst[i] += row[i];
        }
    return detail::make_result(os, std::move(out), {&a},
                               [an = a.node_, outer, inner, n](const std::vector<double>& g) {
                                   auto& ga = an->grad_buffer();
                                   for (std::size_t o = 0; o < outer; ++o)
                                       for (std::size_t k = 0; k < n; ++k) {
                                           double* dst = &ga[(o * n + k) * inner];
                                           const double* src = &g[o * inner];
                                           for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                                       }
                               });
}

inline Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim = true) {
    return sum_axis(a, axis, keepdim) * (1.0 / static_cast<double>(a.dim(axis)));
}

// ---------------------------------------------------------------------------
// Shape manipulation.

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) throw shape_mismatch("reshape", a.shape(), shape);
    return detail::make_result(std::move(shape), a.values(), {&a}, [an = a.node_](const std::vector<double>& g) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

/// General axis permutation: out.shape[i] == a.shape[perm[i]].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
    const Shape& s = a.shape();
    const std::size_t r = s.size();
    if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch for " + to_string(s));
    Shape os(r);
    std::vector<std::size_t> in_strides(r), gather(r);
    std::size_t st = 1;
    for (std::size_t i = r; i-- > 0;) {
        in_strides[i] = st;
        st *= s[i];
    }
    for (std::size_t i = 0; i < r; ++i) {
        os[i] = s[perm[i]];
        gather[i] = in_strides[perm[i]];
    }
    std::vector<std::size_t> src(a.size());
    std::vector<std::size_t> zero(r, 0);
    detail::broadcast_loop(os, gather, zero, [&](std::size_t o, std::size_t i, std::size_t) { src[o] = i; });
    std::vector<double> out(a.size());
    const auto& x = a.values();
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[src[o]];
    return detail::make_result(os, std::move(out), {&a},
                               [an = a.node_, src = std::move(src)](const std::vector<double>& g) {
                                   auto& ga = an->grad_buffer();
                                   for (std::size_t o = 0; o < g.size(); ++o) ga[src[o]] += g[o];
                               });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Shape os = parts[0].shape();
    if (axis >= os.size()) throw ShapeError("concat: axis out of range for " + to_string(os));
    os[axis] = 0;
    for (const auto& p : parts) {
        Shape probe = p.shape();
        if (probe.size() != os.size()) throw shape_mismatch("concat", parts[0].shape(), p.shape());
        for (std::size_t i = 0; i < os.size(); ++i)
            if (i != axis && probe[i] != parts[0].shape()[i]) throw shape_mismatch("concat", parts[0].shape(), p.shape());
        os[axis] += probe[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= os[i];
    for (std::size_t i = axis + 1; i < os.size(); ++i) inner *= os[i];
    std::vector<double> out(numel(os));
    std::vector<std::size_t> widths;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(axis) * inner;
        const auto& x = p.values();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(&x[o * w], w, &out[o * os[axis] * inner + offset]);
        widths.push_back(w);
        offset += w;
    }
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node_);
    const std::size_t row = os[axis] * inner;
    return detail::make_result(os, std::move(out), parts,
                               [nodes, widths, outer, row](const std::vector<double>& g) {
                                   std::size_t off = 0;
                                   for (std::size_t k = 0; k < nodes.size(); ++k) {
                                       const std::size_t w = widths[k];
                                       if (nodes[k]->requires_grad) {
                                           auto& gk = nodes[k]->grad_buffer();
                                           for (std::size_t o = 0; o < outer; ++o)
                                               for (std::size_t i = 0; i < w; ++i) gk[o * w + i] += g[o * row + off + i];
                                       }
                                       off += w;
                                   }
                               });
}

/// Half-open slice [begin, end) along one axis.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = a.shape();
    if (axis >= s.size() || begin > end || end > s[axis])
        throw ShapeError("slice: [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid on axis " +
                         std::to_string(axis) + " of " + to_string(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    Shape os = s;
    os[axis] = end - begin;
    const std::size_t w = (end - begin) * inner;
    const std::size_t row = s[axis] * inner;
    const std::size_t off = begin * inner;
    std::vector<double> out(outer * w);
    const auto& x = a.values();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(&x[o * row + off], w, &out[o * w]);
    return detail::make_result(os, std::move(out), {&a}, [an = a.node_, outer, w, row, off](const std::vector<double>& g) {
        auto& ga = an->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < w; ++i) ga[o * row + off + i] += g[o * w + i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra.

/// Batched matrix product: [B,M,K] x [B,K,N] -> [B,M,N]. Rank-2 inputs are treated as B=1.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const bool batched = a.rank() == 3;
    if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3)))
        throw shape_mismatch("matmul", a.shape(), b.shape());
    const std::size_t B = batched ? a.dim(0) : 1;
    const std::size_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
    const std::size_t K2 = b.dim(b.rank() - 2), N = b.dim(b.rank() - 1);
    if (K != K2 || (batched && b.dim(0) != B)) throw shape_mismatch("matmul", a.shape(), b.shape());
    Shape os = batched ? Shape{B, M, N} : Shape{M, N};
    std::vector<double> out(B * M * N);
    for (std::size_t i = 0; i < B; ++i) {
        detail::MapConstMat A(a.values().data() + i * M * K, M, K);
        detail::MapConstMat Bm(b.values().data() + i * K * N, K, N);
        detail::MapMat C(out.data() + i * M * N, M, N);
        C.noalias() = A * Bm;
    }
    return detail::make_result(os, std::move(out), {&a, &b},
                               [an = a.node_, bn = b.node_, B, M, K, N](const std::vector<double>& g) {
                                   for (std::size_t i = 0; i < B; ++i) {
                                       detail::MapConstMat G(g.data() + i * M * N, M, N);
                                       if (an->requires_grad) {
                                           detail::MapConstMat Bm(bn->data.data() + i * K * N, K, N);
                                           detail::MapMat GA(an->grad_buffer().data() + i * M * K, M, K);
                                           GA.noalias() += G * Bm.transpose();
                                       }
                                       if (bn->requires_grad) {
                                           detail::MapConstMat A(an->data.data() + i * M * K, M, K);
                                           detail::MapMat GB(bn->grad_buffer().data() + i * K * N, K, N);
                                           GB.noalias() += A.transpose() * G;
                                       }
                                   }
                               });
}

/// Softmax along the last axis.
inline Tensor softmax(const Tensor& a) {
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.size() / n;
    std::vector<double> out(a.size());
    const auto& x = a.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = &x[r * n];
        double* yr = &out[r * n];
        const double m = *std::max_element(xr, xr + n);
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) z += (yr[i] = std::exp(xr[i] - m));
        for (std::size_t i = 0; i < n; ++i) yr[i] /= z;
    }
    auto y = std::make_shared<std::vector<double>>(out);
    return detail::make_result(a.shape(), std::move(out), {&a}, [an = a.node_, y, n, rows](const std::vector<double>& g) {
        auto& ga = an->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = &(*y)[r * n];
            const double* gr = &g[r * n];
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) dot += gr[i] * yr[i];
            for (std::size_t i = 0; i < n; ++i) ga[r * n + i] += yr[i] * (gr[i] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Image ops on [B,C,H,W].

/// 'same'-padded 2-D convolution (odd square kernel, zero padding, stride 1).
inline Tensor conv2d(const Tensor& x, const Tensor& w) {
    if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0)
        throw shape_mismatch("conv2d", x.shape(), w.shape());
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), k = w.dim(2);
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const std::size_t P = H * W, R = C * k * k;

    // im2col buffer per batch item: [R, P].
    auto cols = std::make_shared<std::vector<double>>(k == 1 ? 0 : B * R * P, 0.0);
    if (k != 1) {
        const auto& xv = x.values();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        double* dst = &(*cols)[(b * R + (c * k + ky) * k + kx) * P];
                        const double* src = &xv[(b * C + c) * P];
                        for (std::size_t yy = 0; yy < H; ++yy) {
                            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(yy + ky) - pad;
                            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t xx = 0; xx < W; ++xx) {
                                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - pad;
                                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                                dst[yy * W + xx] = src[sy * static_cast<std::ptrdiff_t>(W) + sx];
                            }
                        }
                    }
    }
    auto col_ptr = [cols, &x, R, P, k](std::size_t b) -> const double* {
        return k == 1 ? x.values().data() + b * R * P : cols->data() + b * R * P;
    };
    std::vector<double> out(B * O * P);
    detail::MapConstMat Wm(w.values().data(), O, R);
    for (std::size_t b = 0; b < B; ++b) {
        detail::MapConstMat X(col_ptr(b), R, P);
        detail::MapMat Y(out.data() + b * O * P, O, P);
        Y.noalias() = Wm * X;
    }
    return detail::make_result(
        Shape{B, O, H, W}, std::move(out), {&x, &w},
        [xn = x.node_, wn = w.node_, cols, B, C, H, W, O, k, pad, P, R](const std::vector<double>& g) {
            detail::MapConstMat Wm(wn->data.data(), O, R);
            std::vector<double> dcol(xn->requires_grad && k != 1 ? R * P : 0);
            for (std::size_t b = 0; b < B; ++b) {
                detail::MapConstMat G(g.data() + b * O * P, O, P);
                const double* colb = k == 1 ? xn->data.data() + b * R * P : cols->data() + b * R * P;
                if (wn->requires_grad) {
                    detail::MapConstMat X(colb, R, P);
                    detail::MapMat GW(wn->grad_buffer().data(), O, R);
                    GW.noalias() += G * X.transpose();
                }
                if (xn->requires_grad) {
                    if (k == 1) {
                        detail::MapMat GX(xn->grad_buffer().data() + b * R * P, R, P);
                        GX.noalias() += Wm.transpose() * G;
                        continue;
                    }
                    detail::MapMat D(dcol.data(), R, P);
                    D.noalias() = Wm.transpose() * G;
                    auto& gx = xn->grad_buffer();
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const double* src = &dcol[((c * k + ky) * k + kx) * P];
                                double* dst = &gx[(b * C + c) * P];
                                for (std::size_t yy = 0; yy < H; ++yy) {
                                    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(yy + ky) - pad;
                                    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t xx = 0; xx < W; ++xx) {
                                        const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - pad;
                                        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                                        dst[sy * static_cast<std::ptrdiff_t>(W) + sx] += src[yy * W + xx];
                                    }
                                }
                            }
                }
            }
        });
}

/// 2x2 box-filter downsampling.
inline Tensor avg_pool2(const Tensor& x) {
    if (x.rank() != 4 || x.dim(2) % 2 || x.dim(3) % 2) throw ShapeError("avg_pool2: needs even [B,C,H,W], got " + to_string(x.shape()));
    const std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3), h = H / 2, w = W / 2;
    std::vector<double> out(BC * h * w);
    const auto& v = x.values();
    for (std::size_t n = 0; n < BC; ++n)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const double* s = &v[n * H * W + 2 * i * W + 2 * j];
                out[(n * h + i) * w + j] = 0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
            }
    return detail::make_result(Shape{x.dim(0), x.dim(1), h, w}, std::move(out), {&x},
                               [xn = x.node_, BC, H, W, h, w](const std::vector<double>& g) {
                                   auto& gx = xn->grad_buffer();
                                   for (std::size_t n = 0; n < BC; ++n)
                                       for (std::size_t i = 0; i < h; ++i)
                                           for (std::size_t j = 0; j < w; ++j) {
                                               const double q = 0.25 * g[(n * h + i) * w + j];
                                               double* d = &gx[n * H * W + 2 * i * W + 2 * j];
                                               d[0] += q;
                                               d[1] += q;
                                               d[W] += q;
                                               d[W + 1] += q;
                                           }
                               });
}

/// 2x nearest-neighbour upsampling.
inline Tensor upsample2(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("upsample2: needs [B,C,H,W], got " + to_string(x.shape()));
    const std::size_t BC = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), H = 2 * h, W = 2 * w;
    std::vector<double> out(BC * H * W);
    const auto& v = x.values();
    for (std::size_t n = 0; n < BC; ++n)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) out[(n * H + i) * W + j] = v[(n * h + i / 2) * w + j / 2];
    return detail::make_result(Shape{x.dim(0), x.dim(1), H, W}, std::move(out), {&x},
                               [xn = x.node_, BC, H, W, h, w](const std::vector<double>& g) {
                                   auto& gx = xn->grad_buffer();
                                   for (std::size_t n = 0; n < BC; ++n)
                                       for (std::size_t i = 0; i < H; ++i)
                                           for (std::size_t j = 0; j < W; ++j)
                                               gx[(n * h + i / 2) * w + j / 2] += g[(n * H + i) * W + j];
                               });
}

// ---------------------------------------------------------------------------
// Small helpers.

inline double sum_of_squares(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace mpdiff
