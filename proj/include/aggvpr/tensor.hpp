#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "aggvpr/errors.hpp"
#include "aggvpr/rng.hpp"

namespace aggvpr {

namespace detail {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until the first accumulation

    bool grad_present() const { return !grad.empty(); }
    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

inline std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return shape.empty() ? 0 : n;
}

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

// --- raw matmul kernels, row-major, accumulate into c ---------------------
// All three traverse the reduction axis in ascending order for every output
// element, which keeps results deterministic on a single thread.

inline void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

// c[m×n] += a[m×k] * b[n×k]^T
inline void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// c[k×n] += a[m×k]^T * b[m×n]
inline void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = arow[p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

}  // namespace detail

/// Dense row-major tensor of 64-bit reals with an optional gradient slot.
/// Copies are shallow handles to the same storage; operations never mutate
/// their inputs.
class Tensor {
public:
    Tensor() : n_(std::make_shared<detail::TensorNode>()) {}

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        return from_data(std::move(shape), {}, requires_grad, /*fill=*/0.0);
    }

    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false) {
        return from_data(std::move(shape), {}, requires_grad, value);
    }

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                            bool requires_grad = false, double fill = 0.0) {
        auto n = std::make_shared<detail::TensorNode>();
        const std::size_t count = detail::numel_of(shape);
        if (count == 0) throw ContractError("tensor shape must have positive extents");
        n->shape = std::move(shape);
        if (data.empty()) {
            n->data.assign(count, fill);
        } else {
            if (data.size() != count)
                throw DimError("data length " + std::to_string(data.size()) +
                               " does not match shape " + detail::shape_str(n->shape));
            n->data = std::move(data);
        }
        n->requires_grad = requires_grad;
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

    static Tensor identity(std::size_t n) {
        Tensor t = zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) t.n_->data[i * n + i] = 1.0;
        return t;
    }

    static Tensor gaussian(std::vector<std::size_t> shape, Rng& rng, double stddev,
                           bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& v : t.n_->data) v = stddev * rng.next_gaussian();
        return t;
    }

    const std::vector<std::size_t>& shape() const { return n_->shape; }
    std::size_t numel() const { return n_->data.size(); }
    std::size_t rank() const { return n_->shape.size(); }

    std::size_t rows() const {
        require_rank2("rows()");
        return n_->shape[0];
    }
    std::size_t cols() const {
        require_rank2("cols()");
        return n_->shape[1];
    }

    double at(std::size_t flat) const { return n_->data.at(flat); }
    double at2(std::size_t r, std::size_t c) const {
        require_rank2("at2()");
        return n_->data[r * n_->shape[1] + c];
    }

    std::span<const double> data() const { return n_->data; }
    std::span<double> mutable_data() { return n_->data; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) {
        n_->requires_grad = rg;
        if (!rg) n_->grad.clear();
    }

    bool grad_present() const { return n_->grad_present(); }
    std::span<const double> grad() const {
        if (!n_->grad_present()) throw ContractError("gradient not populated; run backward first");
        return n_->grad;
    }
    void clear_grad() { n_->grad.clear(); }

    /// Identity of the underlying storage; two handles alias iff equal.
    const void* storage_id() const { return n_.get(); }

    std::shared_ptr<detail::TensorNode> node() const { return n_; }

private:
    std::shared_ptr<detail::TensorNode> n_;

    void require_rank2(const char* what) const {
        if (n_->shape.size() != 2)
            throw ContractError(std::string(what) + " requires a rank-2 tensor, got " +
                                detail::shape_str(n_->shape));
    }
};

/// Write-once log of one forward pass. Nodes are recorded in execution
/// order, so inputs of a node always precede it; backward replays the log
/// in reverse. Each node carries an integer tag (the encoder block index
/// while a block is executing) so tests can attribute tape growth.
class Tape {
public:
    struct Node {
        std::function<void()> backward;
        int tag;
    };

    std::size_t size() const { return nodes_.size(); }

    std::size_t count_tag_in(int lo, int hi) const {  // tags in [lo, hi)
        std::size_t c = 0;
        for (const Node& n : nodes_)
            if (n.tag >= lo && n.tag < hi) ++c;
        return c;
    }

    void record(std::function<void()> backward_fn, int tag) {
        nodes_.push_back(Node{std::move(backward_fn), tag});
    }

    void run_backward_from(std::size_t end) {
        for (std::size_t i = end; i-- > 0;) nodes_[i].backward();
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

namespace detail {

struct RecordState {
    Tape* tape = nullptr;
    int inference_depth = 0;
    int tag = -1;
};

inline RecordState& record_state() {
    thread_local RecordState s;
    return s;
}

}  // namespace detail

inline bool recording_enabled() {
    const auto& s = detail::record_state();
    return s.tape != nullptr && s.inference_depth == 0;
}

inline Tape* active_tape() { return detail::record_state().tape; }

/// Makes `tape` the recording target on this thread for the scope lifetime.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : prev_(detail::record_state().tape) {
        detail::record_state().tape = &tape;
    }
    ~TapeScope() { detail::record_state().tape = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

/// Suppresses recording; op outputs created inside never carry a grad slot.
class InferenceScope {
public:
    InferenceScope() { ++detail::record_state().inference_depth; }
    ~InferenceScope() { --detail::record_state().inference_depth; }
    InferenceScope(const InferenceScope&) = delete;
    InferenceScope& operator=(const InferenceScope&) = delete;
};

/// Labels tape nodes recorded inside the scope.
class TapeTagScope {
public:
    explicit TapeTagScope(int tag) : prev_(detail::record_state().tag) {
        detail::record_state().tag = tag;
    }
    ~TapeTagScope() { detail::record_state().tag = prev_; }
    TapeTagScope(const TapeTagScope&) = delete;
    TapeTagScope& operator=(const TapeTagScope&) = delete;

private:
    int prev_;
};

namespace detail {

// An op output requires grad (and lands on the tape) only while recording
// is live and at least one input requires grad. Anything produced outside
// a recording scope is a plain constant.
inline bool will_record(bool any_input_rg) { return recording_enabled() && any_input_rg; }

inline void record_node(std::function<void()> fn) {
    record_state().tape->record(std::move(fn), record_state().tag);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw DimError("matmul: incompatible shapes " + detail::shape_str(a.shape()) + " and " +
                       detail::shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n}, detail::will_record(a.requires_grad() || b.requires_grad()));
    detail::mm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::record_node([an, bn, on, m, k, n] {
            if (!on->grad_present()) return;
            const double* g = on->grad.data();
            if (an->requires_grad)
                detail::mm_nt(g, bn->data.data(), an->ensure_grad().data(), m, n, k);
            if (bn->requires_grad)
                detail::mm_tn(an->data.data(), g, bn->ensure_grad().data(), m, k, n);
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimError("transpose: rank-2 required, got " + detail::shape_str(a.shape()));
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros({n, m}, detail::will_record(a.requires_grad()));
    const double* src = a.data().data();
    double* dst = out.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        detail::record_node([an, on, m, n] {
            if (!on->grad_present() || !an->requires_grad) return;
            const double* g = on->grad.data();
            double* ga = an->ensure_grad().data();
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = 0; i < m; ++i) ga[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimError("add: shape mismatch " + detail::shape_str(a.shape()) + " vs " +
                       detail::shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape(), detail::will_record(a.requires_grad() || b.requires_grad()));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::record_node([an, bn, on] {
            if (!on->grad_present()) return;
            const auto& g = on->grad;
            if (an->requires_grad) {
                auto& ga = an->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = bn->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

/// rows of a [m×n] plus v [n]
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    if (a.rank() != 2 || v.rank() != 1 || v.shape()[0] != a.cols())
        throw DimError("add_rowvec: shapes " + detail::shape_str(a.shape()) + " and " +
                       detail::shape_str(v.shape()));
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros({m, n}, detail::will_record(a.requires_grad() || v.requires_grad()));
    const double* pa = a.data().data();
    const double* pv = v.data().data();
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) po[i * n + j] = pa[i * n + j] + pv[j];
    if (out.requires_grad()) {
        auto an = a.node(), vn = v.node(), on = out.node();
        detail::record_node([an, vn, on, m, n] {
            if (!on->grad_present()) return;
            const double* g = on->grad.data();
            if (an->requires_grad) {
                double* ga = an->ensure_grad().data();
                for (std::size_t i = 0; i < m * n; ++i) ga[i] += g[i];
            }
            if (vn->requires_grad) {
                double* gv = vn->ensure_grad().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape(), detail::will_record(a.requires_grad()));
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < a.numel(); ++i) po[i] = c * pa[i];
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        detail::record_node([an, on, c] {
            if (!on->grad_present() || !an->requires_grad) return;
            auto& ga = an->ensure_grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * on->grad[i];
        });
    }
    return out;
}

/// Row-wise softmax with per-row max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimError("softmax_rows: rank-2 required, got " + detail::shape_str(x.shape()));
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out = Tensor::zeros({m, n}, detail::will_record(x.requires_grad()));
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = px + i * n;
        double mx = row[0];
        for (std::size_t j = 0; j < n; ++j) {
            if (std::isnan(row[j])) throw NumericError("softmax_rows: NaN in input row " + std::to_string(i));
            mx = std::max(mx, row[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(row[j] - mx);
            po[i * n + j] = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) po[i * n + j] /= sum;
    }
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        detail::record_node([xn, on, m, n] {
            if (!on->grad_present() || !xn->requires_grad) return;
            const double* g = on->grad.data();
            const double* y = on->data.data();
            double* gx = xn->ensure_grad().data();
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
            }
        });
    }
    return out;
}

/// Per-row normalization to zero mean / unit variance followed by an
/// affine map; variance is the population variance over the row.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-6) {
    if (x.rank() != 2) throw DimError("layer_norm: rank-2 required, got " + detail::shape_str(x.shape()));
    const std::size_t m = x.rows(), d = x.cols();
    if (gamma.rank() != 1 || beta.rank() != 1 || gamma.shape()[0] != d || beta.shape()[0] != d)
        throw DimError("layer_norm: feature width " + std::to_string(d) + " vs gamma " +
                       detail::shape_str(gamma.shape()) + ", beta " + detail::shape_str(beta.shape()));
    if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
    const bool rg = detail::will_record(x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    Tensor out = Tensor::zeros({m, d}, rg);
    std::vector<double> xhat(rg ? m * d : 0);
    std::vector<double> inv_sigma(rg ? m : 0);
    const double* px = x.data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = px + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (row[j] - mean) * inv;
            if (rg) xhat[i * d + j] = xh;
            po[i * d + j] = pg[j] * xh + pb[j];
        }
        if (rg) inv_sigma[i] = inv;
    }
    if (rg) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        detail::record_node([xn, gn, bn, on, m, d, xhat = std::move(xhat),
                             inv_sigma = std::move(inv_sigma)] {
            if (!on->grad_present()) return;
            const double* g = on->grad.data();
            if (gn->requires_grad) {
                double* gg = gn->ensure_grad().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
            }
            if (bn->requires_grad) {
                double* gb = bn->ensure_grad().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
            }
            if (xn->requires_grad) {
                double* gx = xn->ensure_grad().data();
                const double* pg = gn->data.data();
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_h = 0.0, mean_hx = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double h = pg[j] * g[i * d + j];
                        mean_h += h;
                        mean_hx += h * xhat[i * d + j];
                    }
                    mean_h /= static_cast<double>(d);
                    mean_hx /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double h = pg[j] * g[i * d + j];
                        gx[i * d + j] += inv_sigma[i] * (h - mean_h - xhat[i * d + j] * mean_hx);
                    }
                }
            }
        });
    }
    return out;
}

/// Exact-erf GELU.
inline Tensor gelu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape(), detail::will_record(x.requires_grad()));
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < x.numel(); ++i)
        po[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * inv_sqrt2));
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        detail::record_node([xn, on, inv_sqrt2] {
            if (!on->grad_present() || !xn->requires_grad) return;
            constexpr double inv_sqrt_2pi = 0.39894228040143267794;
            double* gx = xn->ensure_grad().data();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                const double v = xn->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                gx[i] += on->grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

/// Vertical stacking of rank-2 parts with equal widths.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const std::size_t n = parts[0].cols();
    std::size_t total = 0;
    bool any_rg = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.cols() != n)
            throw DimError("concat_rows: width mismatch, expected " + std::to_string(n) + " got " +
                           detail::shape_str(p.shape()));
        total += p.rows();
        any_rg = any_rg || p.requires_grad();
    }
    Tensor out = Tensor::zeros({total, n}, detail::will_record(any_rg));
    double* po = out.mutable_data().data();
    std::size_t r = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data().begin(), p.data().end(), po + r * n);
        r += p.rows();
    }
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<detail::TensorNode>> in_nodes;
        in_nodes.reserve(parts.size());
        for (const Tensor& p : parts) in_nodes.push_back(p.node());
        auto on = out.node();
        detail::record_node([in_nodes, on, n] {
            if (!on->grad_present()) return;
            const double* g = on->grad.data();
            std::size_t r = 0;
            for (const auto& in : in_nodes) {
                const std::size_t rows = in->shape[0];
                if (in->requires_grad) {
                    double* gi = in->ensure_grad().data();
                    for (std::size_t i = 0; i < rows * n; ++i) gi[i] += g[r * n + i];
                }
                r += rows;
            }
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    if (x.rank() != 2 || r0 > r1 || r1 > x.rows())
        throw ContractError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                            ") out of " + detail::shape_str(x.shape()));
    if (r0 == r1) throw ContractError("slice_rows: empty range");
    const std::size_t n = x.cols(), m = r1 - r0;
    Tensor out = Tensor::zeros({m, n}, detail::will_record(x.requires_grad()));
    std::copy(x.data().begin() + r0 * n, x.data().begin() + r1 * n, out.mutable_data().begin());
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        detail::record_node([xn, on, r0, m, n] {
            if (!on->grad_present() || !xn->requires_grad) return;
            double* gx = xn->ensure_grad().data();
            for (std::size_t i = 0; i < m * n; ++i) gx[r0 * n + i] += on->grad[i];
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    bool any_rg = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.rows() != m)
            throw DimError("concat_cols: height mismatch, expected " + std::to_string(m) + " got " +
                           detail::shape_str(p.shape()));
        total += p.cols();
        any_rg = any_rg || p.requires_grad();
    }
    Tensor out = Tensor::zeros({m, total}, detail::will_record(any_rg));
    double* po = out.mutable_data().data();
    std::size_t c = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.cols();
        const double* pp = p.data().data();
        for (std::size_t i = 0; i < m; ++i)
            std::copy(pp + i * w, pp + (i + 1) * w, po + i * total + c);
        c += w;
    }
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<detail::TensorNode>> in_nodes;
        for (const Tensor& p : parts) in_nodes.push_back(p.node());
        auto on = out.node();
        detail::record_node([in_nodes, on, m, total] {
            if (!on->grad_present()) return;
            const double* g = on->grad.data();
            std::size_t c = 0;
            for (const auto& in : in_nodes) {
                const std::size_t w = in->shape[1];
                if (in->requires_grad) {
                    double* gi = in->ensure_grad().data();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j) gi[i * w + j] += g[i * total + c + j];
                }
                c += w;
            }
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    if (x.rank() != 2 || c0 > c1 || c1 > x.cols())
        throw ContractError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                            ") out of " + detail::shape_str(x.shape()));
    if (c0 == c1) throw ContractError("slice_cols: empty range");
    const std::size_t m = x.rows(), n = x.cols(), w = c1 - c0;
    Tensor out = Tensor::zeros({m, w}, detail::will_record(x.requires_grad()));
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i)
        std::copy(px + i * n + c0, px + i * n + c1, po + i * w);
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        detail::record_node([xn, on, c0, m, n, w] {
            if (!on->grad_present() || !xn->requires_grad) return;
            double* gx = xn->ensure_grad().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) gx[i * n + c0 + j] += on->grad[i * w + j];
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
    if (detail::numel_of(shape) != x.numel())
        throw DimError("reshape: " + detail::shape_str(x.shape()) + " to " + detail::shape_str(shape) +
                       " changes element count");
    Tensor out = Tensor::from_data(std::move(shape),
                                   std::vector<double>(x.data().begin(), x.data().end()),
                                   detail::will_record(x.requires_grad()));
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        detail::record_node([xn, on] {
            if (!on->grad_present() || !xn->requires_grad) return;
            double* gx = xn->ensure_grad().data();
            for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
        });
    }
    return out;
}

/// Scales to unit Euclidean norm, treating the tensor as one flat vector.
/// Inputs with norm <= 1e-12 pass through unchanged.
inline Tensor l2_normalize(const Tensor& x) {
    double sq = 0.0;
    for (double v : x.data()) sq += v * v;
    const double norm = std::sqrt(sq);
    const bool degenerate = norm <= 1e-12;
    Tensor out = Tensor::zeros(x.shape(), detail::will_record(x.requires_grad()));
    const double inv = degenerate ? 1.0 : 1.0 / norm;
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < x.numel(); ++i) po[i] = px[i] * inv;
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        detail::record_node([xn, on, inv, degenerate] {
            if (!on->grad_present() || !xn->requires_grad) return;
            const auto& g = on->grad;
            double* gx = xn->ensure_grad().data();
            if (degenerate) {
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                return;
            }
            double dot = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * on->data[i];
            for (std::size_t i = 0; i < g.size(); ++i)
                gx[i] += inv * (g[i] - on->data[i] * dot);
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::from_data({1}, {s}, detail::will_record(x.requires_grad()));
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        detail::record_node([xn, on] {
            if (!on->grad_present() || !xn->requires_grad) return;
            double* gx = xn->ensure_grad().data();
            for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += on->grad[0];
        });
    }
    return out;
}

/// Column means of a rank-2 tensor: [m×n] -> [n].
inline Tensor mean_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimError("mean_rows: rank-2 required, got " + detail::shape_str(x.shape()));
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out = Tensor::zeros({n}, detail::will_record(x.requires_grad()));
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) po[j] += px[i * n + j];
    for (std::size_t j = 0; j < n; ++j) po[j] /= static_cast<double>(m);
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        detail::record_node([xn, on, m, n] {
            if (!on->grad_present() || !xn->requires_grad) return;
            double* gx = xn->ensure_grad().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    gx[i * n + j] += on->grad[j] / static_cast<double>(m);
        });
    }
    return out;
}

/// Reverse-mode sweep from a scalar loss over everything the tape recorded.
inline void backward(const Tensor& loss, Tape& tape) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " + detail::shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw ContractError("backward: loss was not produced under recording");
    loss.node()->ensure_grad()[0] = 1.0;
    tape.run_backward_from(tape.size());
}

}  // namespace aggvpr
