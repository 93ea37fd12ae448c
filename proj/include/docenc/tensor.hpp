#pragma once

// Reverse-mode differentiable tensors, 64-bit throughout. A Tensor is a
// cheap handle onto a graph node; ops are free functions that record a
// backward closure when gradients are enabled. Everything is sequential and
// deterministic: same inputs, same bits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "docenc/errors.hpp"
#include "docenc/rng.hpp"

namespace docenc {

namespace detail {
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// RAII scope that disables graph recording (inference / oracles).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    std::vector<std::int64_t> shape;
    std::vector<double> value;
    std::vector<double> grad; // sized lazily, same length as value
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor zeros(std::vector<std::int64_t> shape, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value.assign(static_cast<std::size_t>(n->numel()), 0.0);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor full(std::vector<std::int64_t> shape, double v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }

    static Tensor from(std::vector<std::int64_t> shape, std::vector<double> values,
                       bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        if (static_cast<std::int64_t>(values.size()) != n->numel())
            throw NumericError("Tensor::from: shape/value size mismatch");
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(std::vector<std::int64_t> shape, Rng& rng, double sigma,
                        bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.node_->value) v = rng.normal(0.0, sigma);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::int64_t>& shape() const { return node_->shape; }
    std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
    std::int64_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<double>& values() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }
    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<double>& grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }

    double item() const {
        if (numel() != 1) throw NumericError("item(): tensor is not a scalar");
        return node_->value[0];
    }

    void zero_grad() { node_->grad.clear(); }

    NodePtr node() const { return node_; }
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    void check_finite(const std::string& who) const {
        for (double v : node_->value)
            if (!std::isfinite(v)) throw NumericError(who + ": non-finite value");
    }

    /// Run reverse-mode accumulation from this scalar.
    void backward() {
        if (numel() != 1) throw NumericError("backward(): root must be scalar");
        // iterative post-order topological sort
        std::vector<TensorNode*> order;
        std::unordered_set<TensorNode*> seen;
        std::vector<std::pair<TensorNode*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                TensorNode* p = n->parents[idx++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->ensure_grad();
        node_->grad[0] = 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorNode* n = *it;
            if (n->backward_fn) n->backward_fn(*n);
        }
    }

private:
    NodePtr node_;
};

namespace detail {

inline bool track(std::initializer_list<const Tensor*> ins) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

inline Tensor make_result(std::vector<std::int64_t> shape, bool req) {
    Tensor t = Tensor::zeros(std::move(shape), req);
    return t;
}

inline void attach(Tensor& out, std::vector<Tensor> parents,
                   std::function<void(TensorNode&)> fn) {
    if (!out.requires_grad()) return;
    auto n = out.node();
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(fn);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw NumericError(std::string(op) + ": shape mismatch");
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = detail::make_result(a.shape(), detail::track({&a, &b}));
    const auto n = static_cast<std::size_t>(a.numel());
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    detail::attach(out, {a, b}, [](TensorNode& o) {
        for (int k = 0; k < 2; ++k) {
            TensorNode& p = *o.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
        }
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out = detail::make_result(a.shape(), detail::track({&a, &b}));
    const auto n = static_cast<std::size_t>(a.numel());
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] - b.values()[i];
    detail::attach(out, {a, b}, [](TensorNode& o) {
        TensorNode& pa = *o.parents[0];
        TensorNode& pb = *o.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] -= o.grad[i];
        }
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = detail::make_result(a.shape(), detail::track({&a, &b}));
    const auto n = static_cast<std::size_t>(a.numel());
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * b.values()[i];
    detail::attach(out, {a, b}, [](TensorNode& o) {
        TensorNode& pa = *o.parents[0];
        TensorNode& pb = *o.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] += o.grad[i] * pa.value[i];
        }
    });
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = detail::make_result(a.shape(), detail::track({&a}));
    const auto n = static_cast<std::size_t>(a.numel());
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * s;
    detail::attach(out, {a}, [s](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * s;
    });
    return out;
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

inline Tensor leaky_relu(const Tensor& a, double slope) {
    if (!(slope > 0.0 && slope < 1.0)) throw NumericError("leaky_relu: slope must be in (0,1)");
    Tensor out = detail::make_result(a.shape(), detail::track({&a}));
    const auto n = static_cast<std::size_t>(a.numel());
    for (std::size_t i = 0; i < n; ++i) {
        double x = a.values()[i];
        out.values()[i] = x >= 0.0 ? x : slope * x;
    }
    detail::attach(out, {a}, [slope](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            p.grad[i] += o.grad[i] * (p.value[i] >= 0.0 ? 1.0 : slope);
    });
    return out;
}

inline Tensor gelu(const Tensor& a) {
    // exact GELU: x * Phi(x)
    Tensor out = detail::make_result(a.shape(), detail::track({&a}));
    const auto n = static_cast<std::size_t>(a.numel());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < n; ++i) {
        double x = a.values()[i];
        out.values()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    detail::attach(out, {a}, [](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        constexpr double is2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            double x = p.value[i];
            double phi = 0.5 * (1.0 + std::erf(x * is2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            p.grad[i] += o.grad[i] * (phi + x * pdf);
        }
    });
    return out;
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor out = detail::make_result(a.shape(), detail::track({&a}));
    const auto n = static_cast<std::size_t>(a.numel());
    for (std::size_t i = 0; i < n; ++i) {
        double x = a.values()[i];
        out.values()[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                   : std::exp(x) / (1.0 + std::exp(x));
    }
    detail::attach(out, {a}, [](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            double y = o.value[i];
            p.grad[i] += o.grad[i] * y * (1.0 - y);
        }
    });
    return out;
}

/// Inverted dropout; scales kept entries by 1/(1-p). p == 0 is a no-op.
inline Tensor dropout(const Tensor& a, double p, Rng& rng) {
    if (p <= 0.0) return a;
    if (p >= 1.0) throw NumericError("dropout: p must be < 1");
    Tensor out = detail::make_result(a.shape(), detail::track({&a}));
    const auto n = static_cast<std::size_t>(a.numel());
    auto keep = std::make_shared<std::vector<double>>(n);
    const double inv = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < n; ++i) {
        (*keep)[i] = rng.uniform() < p ? 0.0 : inv;
        out.values()[i] = a.values()[i] * (*keep)[i];
    }
    detail::attach(out, {a}, [keep](TensorNode& o) {
        TensorNode& pn = *o.parents[0];
        if (!pn.requires_grad) return;
        pn.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) pn.grad[i] += o.grad[i] * (*keep)[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// matrix ops (2D, row-major)
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw NumericError("matmul: incompatible shapes");
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = detail::make_result({m, n}, detail::track({&a, &b}));
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::int64_t i = 0; i < m; ++i) {
        double* orow = po + i * n;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    detail::attach(out, {a, b}, [m, k, n](TensorNode& o) {
        TensorNode& pa = *o.parents[0];
        TensorNode& pb = *o.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad(); // dA = dO @ B^T
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) {
                    const double g = o.grad[i * n + j];
                    if (g == 0.0) continue;
                    const double* brow = pb.value.data() + j; // column j
                    double* garow = pa.grad.data() + i * k;
                    for (std::int64_t kk = 0; kk < k; ++kk) garow[kk] += g * brow[kk * n];
                }
        }
        if (pb.requires_grad) {
            pb.ensure_grad(); // dB = A^T @ dO
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    const double av = pa.value[i * k + kk];
                    if (av == 0.0) continue;
                    const double* grow = o.grad.data() + i * n;
                    double* gbrow = pb.grad.data() + kk * n;
                    for (std::int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
        }
    });
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.shape().size() != 2) throw NumericError("transpose: expects 2D");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = detail::make_result({n, m}, detail::track({&a}));
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out.values()[j * m + i] = a.values()[i * n + j];
    detail::attach(out, {a}, [m, n](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) p.grad[i * n + j] += o.grad[j * m + i];
    });
    return out;
}

/// x: [n, d], bias: [d]; adds the bias to every row.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    if (x.shape().size() != 2 || bias.numel() != x.dim(1))
        throw NumericError("add_row_bias: shape mismatch");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    Tensor out = detail::make_result(x.shape(), detail::track({&x, &bias}));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j)
            out.values()[i * d + j] = x.values()[i * d + j] + bias.values()[j];
    detail::attach(out, {x, bias}, [n, d](TensorNode& o) {
        TensorNode& px = *o.parents[0];
        TensorNode& pb = *o.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < d; ++j) pb.grad[j] += o.grad[i * d + j];
        }
    });
    return out;
}

inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_row_bias(matmul(x, w), b);
}

inline Tensor slice_cols(const Tensor& x, std::int64_t c0, std::int64_t c1) {
    if (x.shape().size() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
        throw NumericError("slice_cols: bad range");
    const std::int64_t n = x.dim(0), d = x.dim(1), w = c1 - c0;
    Tensor out = detail::make_result({n, w}, detail::track({&x}));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < w; ++j)
            out.values()[i * w + j] = x.values()[i * d + c0 + j];
    detail::attach(out, {x}, [n, d, w, c0](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < w; ++j) p.grad[i * d + c0 + j] += o.grad[i * w + j];
    });
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw NumericError("concat_cols: empty");
    const std::int64_t n = parts[0].dim(0);
    std::int64_t d = 0;
    bool req = false;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.dim(0) != n) throw NumericError("concat_cols: row mismatch");
        d += p.dim(1);
        req = req || (grad_enabled() && p.requires_grad());
    }
    Tensor out = detail::make_result({n, d}, req);
    std::vector<std::int64_t> offs;
    std::int64_t off = 0;
    for (const auto& p : parts) {
        offs.push_back(off);
        const std::int64_t w = p.dim(1);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < w; ++j)
                out.values()[i * d + off + j] = p.values()[i * w + j];
        off += w;
    }
    detail::attach(out, parts, [n, d, offs](TensorNode& o) {
        for (std::size_t k = 0; k < o.parents.size(); ++k) {
            TensorNode& p = *o.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            const std::int64_t w = p.shape[1];
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < w; ++j)
                    p.grad[i * w + j] += o.grad[i * d + offs[k] + j];
        }
    });
    return out;
}

/// Stack 1-row tensors (each [1, d]) into [n, d].
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw NumericError("stack_rows: empty");
    const std::int64_t d = rows[0].numel();
    bool req = false;
    for (const auto& r : rows) {
        if (r.numel() != d) throw NumericError("stack_rows: width mismatch");
        req = req || (grad_enabled() && r.requires_grad());
    }
    const std::int64_t n = static_cast<std::int64_t>(rows.size());
    Tensor out = detail::make_result({n, d}, req);
    for (std::int64_t i = 0; i < n; ++i)
        std::copy(rows[i].values().begin(), rows[i].values().end(),
                  out.values().begin() + i * d);
    detail::attach(out, rows, [d](TensorNode& o) {
        for (std::size_t i = 0; i < o.parents.size(); ++i) {
            TensorNode& p = *o.parents[i];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::int64_t j = 0; j < d; ++j) p.grad[j] += o.grad[i * d + j];
        }
    });
    return out;
}

inline Tensor select_rows(const Tensor& x, const std::vector<std::int64_t>& idx) {
    if (x.shape().size() != 2) throw NumericError("select_rows: expects 2D");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    for (auto i : idx)
        if (i < 0 || i >= n) throw NumericError("select_rows: index out of range");
    Tensor out = detail::make_result({static_cast<std::int64_t>(idx.size()), d},
                                     detail::track({&x}));
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(x.values().begin() + idx[r] * d, x.values().begin() + (idx[r] + 1) * d,
                  out.values().begin() + static_cast<std::int64_t>(r) * d);
    detail::attach(out, {x}, [idx, d](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::int64_t j = 0; j < d; ++j)
                p.grad[idx[r] * d + j] += o.grad[static_cast<std::int64_t>(r) * d + j];
    });
    return out;
}

/// Embedding lookup: rows of `table` ([vocab, d]) selected by ids.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& ids) {
    return select_rows(table, ids);
}

/// Arithmetic mean over the rows of x: [n, d] -> [1, d].
inline Tensor mean_rows(const Tensor& x) {
    if (x.shape().size() != 2) throw NumericError("mean_rows: expects 2D");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    Tensor out = detail::make_result({1, d}, detail::track({&x}));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) out.values()[j] += x.values()[i * d + j];
    const double inv = 1.0 / static_cast<double>(n);
    for (std::int64_t j = 0; j < d; ++j) out.values()[j] *= inv;
    detail::attach(out, {x}, [n, d, inv](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < d; ++j) p.grad[i * d + j] += o.grad[j] * inv;
    });
    return out;
}

/// Gather arbitrary flat elements of src; out[k] = src[idx[k]]. Backward
/// scatter-adds, so repeated indices accumulate.
inline Tensor gather_values(const Tensor& src, std::vector<std::int64_t> idx,
                            std::vector<std::int64_t> out_shape) {
    const std::int64_t sn = src.numel();
    for (auto i : idx)
        if (i < 0 || i >= sn) throw NumericError("gather_values: index out of range");
    Tensor out = detail::make_result(std::move(out_shape), detail::track({&src}));
    if (out.numel() != static_cast<std::int64_t>(idx.size()))
        throw NumericError("gather_values: index/shape mismatch");
    for (std::size_t k = 0; k < idx.size(); ++k) out.values()[k] = src.values()[idx[k]];
    auto ids = std::make_shared<std::vector<std::int64_t>>(std::move(idx));
    detail::attach(out, {src}, [ids](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t k = 0; k < ids->size(); ++k) p.grad[(*ids)[k]] += o.grad[k];
    });
    return out;
}

// ---------------------------------------------------------------------------
// normalization / softmax
// ---------------------------------------------------------------------------

/// Per-row layer normalization with learned gain/offset, epsilon 1e-5.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              double eps = 1e-5) {
    if (x.shape().size() != 2 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1))
        throw NumericError("layer_norm_rows: shape mismatch");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    Tensor out = detail::make_result(x.shape(), detail::track({&x, &gamma, &beta}));
    auto stats = std::make_shared<std::vector<double>>(2 * n); // mean, inv_std per row
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = x.values().data() + i * d;
        double mean = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        (*stats)[2 * i] = mean;
        (*stats)[2 * i + 1] = inv_std;
        for (std::int64_t j = 0; j < d; ++j)
            out.values()[i * d + j] = (row[j] - mean) * inv_std * gamma.values()[j] + beta.values()[j];
    }
    detail::attach(out, {x, gamma, beta}, [n, d, stats](TensorNode& o) {
        TensorNode& px = *o.parents[0];
        TensorNode& pg = *o.parents[1];
        TensorNode& pb = *o.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) {
            const double mean = (*stats)[2 * i];
            const double inv_std = (*stats)[2 * i + 1];
            const double* xrow = px.value.data() + i * d;
            const double* grow = o.grad.data() + i * d;
            if (pg.requires_grad || pb.requires_grad) {
                for (std::int64_t j = 0; j < d; ++j) {
                    const double xhat = (xrow[j] - mean) * inv_std;
                    if (pg.requires_grad) pg.grad[j] += grow[j] * xhat;
                    if (pb.requires_grad) pb.grad[j] += grow[j];
                }
            }
            if (px.requires_grad) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const double gj = grow[j] * pg.value[j];
                    const double xhat = (xrow[j] - mean) * inv_std;
                    sum_g += gj;
                    sum_gx += gj * xhat;
                }
                const double invd = 1.0 / static_cast<double>(d);
                for (std::int64_t j = 0; j < d; ++j) {
                    const double gj = grow[j] * pg.value[j];
                    const double xhat = (xrow[j] - mean) * inv_std;
                    px.grad[i * d + j] += inv_std * (gj - invd * sum_g - invd * xhat * sum_gx);
                }
            }
        }
    });
    return out;
}

/// Row softmax with a validity mask. Masked entries are exactly 0 in the
/// output and receive exactly 0 gradient. A row with no valid entry is a
/// contract violation.
inline Tensor softmax_rows(const Tensor& logits, const std::vector<std::uint8_t>& mask) {
    if (logits.shape().size() != 2) throw NumericError("softmax_rows: expects 2D");
    const std::int64_t n = logits.dim(0), d = logits.dim(1);
    if (static_cast<std::int64_t>(mask.size()) != n * d)
        throw NumericError("softmax_rows: mask shape mismatch");
    Tensor out = detail::make_result(logits.shape(), detail::track({&logits}));
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = logits.values().data() + i * d;
        const std::uint8_t* mrow = mask.data() + i * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < d; ++j)
            if (mrow[j]) mx = std::max(mx, row[j]);
        if (!std::isfinite(mx))
            throw NumericError("softmax_rows: row " + std::to_string(i) + " has no valid entries");
        double sum = 0.0;
        double* orow = out.values().data() + i * d;
        for (std::int64_t j = 0; j < d; ++j) {
            if (mrow[j]) {
                orow[j] = std::exp(row[j] - mx);
                sum += orow[j];
            } else {
                orow[j] = 0.0;
            }
        }
        for (std::int64_t j = 0; j < d; ++j)
            if (mrow[j]) orow[j] /= sum;
    }
    auto m = std::make_shared<std::vector<std::uint8_t>>(mask);
    detail::attach(out, {logits}, [n, d, m](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) {
            const double* y = o.value.data() + i * d;
            const double* g = o.grad.data() + i * d;
            const std::uint8_t* mrow = m->data() + i * d;
            double dot = 0.0;
            for (std::int64_t j = 0; j < d; ++j)
                if (mrow[j]) dot += y[j] * g[j];
            for (std::int64_t j = 0; j < d; ++j)
                if (mrow[j]) p.grad[i * d + j] += y[j] * (g[j] - dot);
        }
    });
    return out;
}

inline Tensor softmax_rows(const Tensor& logits) {
    return softmax_rows(logits, std::vector<std::uint8_t>(
                                    static_cast<std::size_t>(logits.numel()), 1));
}

/// Zero out rows whose mask entry is 0; used to silence padding tokens.
inline Tensor zero_masked_rows(const Tensor& x, const std::vector<std::uint8_t>& keep) {
    if (x.shape().size() != 2 || static_cast<std::int64_t>(keep.size()) != x.dim(0))
        throw NumericError("zero_masked_rows: shape mismatch");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    Tensor out = detail::make_result(x.shape(), detail::track({&x}));
    for (std::int64_t i = 0; i < n; ++i)
        if (keep[i])
            std::copy(x.values().begin() + i * d, x.values().begin() + (i + 1) * d,
                      out.values().begin() + i * d);
    auto k = std::make_shared<std::vector<std::uint8_t>>(keep);
    detail::attach(out, {x}, [n, d, k](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i)
            if ((*k)[i])
                for (std::int64_t j = 0; j < d; ++j) p.grad[i * d + j] += o.grad[i * d + j];
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    Tensor out = detail::make_result({1}, detail::track({&x}));
    double s = 0.0;
    for (double v : x.values()) s += v;
    out.values()[0] = s;
    detail::attach(out, {x}, [](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (auto& g : p.grad) g += o.grad[0];
    });
    return out;
}

inline Tensor mean_all(const Tensor& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

/// Mean elementwise L1 distance.
inline Tensor l1_loss(const Tensor& pred, const Tensor& target) {
    detail::require_same_shape(pred, target, "l1_loss");
    Tensor out = detail::make_result({1}, detail::track({&pred, &target}));
    const auto n = static_cast<std::size_t>(pred.numel());
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::abs(pred.values()[i] - target.values()[i]);
    out.values()[0] = s / static_cast<double>(n);
    detail::attach(out, {pred, target}, [n](TensorNode& o) {
        TensorNode& pp = *o.parents[0];
        TensorNode& pt = *o.parents[1];
        const double g = o.grad[0] / static_cast<double>(n);
        if (pp.requires_grad) pp.ensure_grad();
        if (pt.requires_grad) pt.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            const double r = pp.value[i] - pt.value[i];
            const double s = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
            if (pp.requires_grad) pp.grad[i] += g * s;
            if (pt.requires_grad) pt.grad[i] -= g * s;
        }
    });
    return out;
}

/// Mean smooth-L1: 0.5 r^2 for |r| < 1, |r| - 0.5 otherwise.
inline Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
    detail::require_same_shape(pred, target, "smooth_l1");
    Tensor out = detail::make_result({1}, detail::track({&pred, &target}));
    const auto n = static_cast<std::size_t>(pred.numel());
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = std::abs(pred.values()[i] - target.values()[i]);
        s += r < 1.0 ? 0.5 * r * r : r - 0.5;
    }
    out.values()[0] = s / static_cast<double>(n);
    detail::attach(out, {pred, target}, [n](TensorNode& o) {
        TensorNode& pp = *o.parents[0];
        TensorNode& pt = *o.parents[1];
        const double g = o.grad[0] / static_cast<double>(n);
        if (pp.requires_grad) pp.ensure_grad();
        if (pt.requires_grad) pt.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            const double r = pp.value[i] - pt.value[i];
            const double dr = std::abs(r) < 1.0 ? r : (r > 0.0 ? 1.0 : -1.0);
            if (pp.requires_grad) pp.grad[i] += g * dr;
            if (pt.requires_grad) pt.grad[i] -= g * dr;
        }
    });
    return out;
}

/// Mean cross-entropy of integer labels against rows of logits ([n, C]).
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    if (logits.shape().size() != 2 ||
        static_cast<std::int64_t>(labels.size()) != logits.dim(0))
        throw NumericError("cross_entropy_rows: shape mismatch");
    const std::int64_t n = logits.dim(0), c = logits.dim(1);
    for (auto l : labels)
        if (l < 0 || l >= c) throw NumericError("cross_entropy_rows: label out of range");
    Tensor out = detail::make_result({1}, detail::track({&logits}));
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n * c));
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = logits.values().data() + i * c;
        double mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
            (*probs)[i * c + j] = std::exp(row[j] - mx);
            sum += (*probs)[i * c + j];
        }
        for (std::int64_t j = 0; j < c; ++j) (*probs)[i * c + j] /= sum;
        total -= std::log((*probs)[i * c + labels[i]]);
    }
    out.values()[0] = total / static_cast<double>(n);
    auto lab = std::make_shared<std::vector<std::int64_t>>(labels);
    detail::attach(out, {logits}, [n, c, probs, lab](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const double g = o.grad[0] / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < c; ++j)
                p.grad[i * c + j] +=
                    g * ((*probs)[i * c + j] - (j == (*lab)[i] ? 1.0 : 0.0));
    });
    return out;
}

// ---------------------------------------------------------------------------
// convolution / image ops (single image, CHW layout)
// ---------------------------------------------------------------------------

/// 3x3 convolution with padding 1. x: [Cin, H, W], w: [Cout, Cin, 3, 3],
/// b: [Cout]. Output [Cout, H', W'] with H' = (H - 1) / stride + 1.
inline Tensor conv2d_3x3(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
    if (x.shape().size() != 3 || w.shape().size() != 4 || w.dim(2) != 3 || w.dim(3) != 3)
        throw NumericError("conv2d_3x3: bad shapes");
    const std::int64_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::int64_t cout = w.dim(0);
    if (w.dim(1) != cin || b.numel() != cout) throw NumericError("conv2d_3x3: channel mismatch");
    const std::int64_t oh = (h - 1) / stride + 1;
    const std::int64_t ow = (wd - 1) / stride + 1;
    Tensor out = detail::make_result({cout, oh, ow}, detail::track({&x, &w, &b}));

    // im2col: [cin*9, oh*ow]
    const std::int64_t k2 = cin * 9, np = oh * ow;
    std::vector<double> col(static_cast<std::size_t>(k2 * np), 0.0);
    const double* px = x.values().data();
    for (std::int64_t ci = 0; ci < cin; ++ci)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                double* crow = col.data() + ((ci * 9) + (dy + 1) * 3 + (dx + 1)) * np;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * stride + dy;
                    if (iy < 0 || iy >= h) continue;
                    const double* xrow = px + (ci * h + iy) * wd;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * stride + dx;
                        if (ix < 0 || ix >= wd) continue;
                        crow[oy * ow + ox] = xrow[ix];
                    }
                }
            }
    // out[co, :] = w[co, :] . col + b[co]
    double* po = out.values().data();
    const double* pw = w.values().data();
    for (std::int64_t co = 0; co < cout; ++co) {
        double* orow = po + co * np;
        std::fill(orow, orow + np, b.values()[co]);
        const double* wrow = pw + co * k2;
        for (std::int64_t kk = 0; kk < k2; ++kk) {
            const double wv = wrow[kk];
            if (wv == 0.0) continue;
            const double* crow = col.data() + kk * np;
            for (std::int64_t p = 0; p < np; ++p) orow[p] += wv * crow[p];
        }
    }
    auto col_keep = std::make_shared<std::vector<double>>(std::move(col));
    detail::attach(out, {x, w, b}, [cin, h, wd, cout, oh, ow, stride, col_keep](TensorNode& o) {
        TensorNode& px = *o.parents[0];
        TensorNode& pw = *o.parents[1];
        TensorNode& pb = *o.parents[2];
        const std::int64_t k2 = cin * 9, np = oh * ow;
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::int64_t co = 0; co < cout; ++co) {
                double s = 0.0;
                const double* g = o.grad.data() + co * np;
                for (std::int64_t p = 0; p < np; ++p) s += g[p];
                pb.grad[co] += s;
            }
        }
        if (pw.requires_grad) {
            pw.ensure_grad(); // dW[co, kk] = sum_p dO[co, p] col[kk, p]
            for (std::int64_t co = 0; co < cout; ++co) {
                const double* g = o.grad.data() + co * np;
                double* gw = pw.grad.data() + co * k2;
                for (std::int64_t kk = 0; kk < k2; ++kk) {
                    const double* crow = col_keep->data() + kk * np;
                    double s = 0.0;
                    for (std::int64_t p = 0; p < np; ++p) s += g[p] * crow[p];
                    gw[kk] += s;
                }
            }
        }
        if (px.requires_grad) {
            px.ensure_grad(); // dcol = W^T dO, then col2im scatter
            std::vector<double> dcol(static_cast<std::size_t>(k2 * np), 0.0);
            for (std::int64_t co = 0; co < cout; ++co) {
                const double* g = o.grad.data() + co * np;
                const double* wrow = pw.value.data() + co * k2;
                for (std::int64_t kk = 0; kk < k2; ++kk) {
                    const double wv = wrow[kk];
                    if (wv == 0.0) continue;
                    double* drow = dcol.data() + kk * np;
                    for (std::int64_t p = 0; p < np; ++p) drow[p] += wv * g[p];
                }
            }
            for (std::int64_t ci = 0; ci < cin; ++ci)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const double* drow =
                            dcol.data() + ((ci * 9) + (dy + 1) * 3 + (dx + 1)) * np;
                        for (std::int64_t oy = 0; oy < oh; ++oy) {
                            const std::int64_t iy = oy * stride + dy;
                            if (iy < 0 || iy >= h) continue;
                            double* gxrow = px.grad.data() + (ci * h + iy) * wd;
                            for (std::int64_t ox = 0; ox < ow; ++ox) {
                                const std::int64_t ix = ox * stride + dx;
                                if (ix < 0 || ix >= wd) continue;
                                gxrow[ix] += drow[oy * ow + ox];
                            }
                        }
                    }
        }
    });
    return out;
}

/// Nearest-neighbor 2x upsampling: [C, H, W] -> [C, 2H, 2W].
inline Tensor upsample2x_nearest(const Tensor& x) {
    if (x.shape().size() != 3) throw NumericError("upsample2x_nearest: expects CHW");
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out = detail::make_result({c, 2 * h, 2 * w}, detail::track({&x}));
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t y = 0; y < 2 * h; ++y) {
            const double* src = x.values().data() + (ci * h + y / 2) * w;
            double* dst = out.values().data() + (ci * 2 * h + y) * 2 * w;
            for (std::int64_t xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
        }
    detail::attach(out, {x}, [c, h, w](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t y = 0; y < 2 * h; ++y) {
                double* dst = p.grad.data() + (ci * h + y / 2) * w;
                const double* g = o.grad.data() + (ci * 2 * h + y) * 2 * w;
                for (std::int64_t xx = 0; xx < 2 * w; ++xx) dst[xx / 2] += g[xx];
            }
    });
    return out;
}

/// [C, H, W] -> [(H*W), C] row-major over grid cells; inverse of rows_to_grid.
inline Tensor grid_to_rows(const Tensor& x) {
    if (x.shape().size() != 3) throw NumericError("grid_to_rows: expects CHW");
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out = detail::make_result({h * w, c}, detail::track({&x}));
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t p = 0; p < h * w; ++p)
            out.values()[p * c + ci] = x.values()[ci * h * w + p];
    detail::attach(out, {x}, [c, h, w](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t q = 0; q < h * w; ++q)
                p.grad[ci * h * w + q] += o.grad[q * c + ci];
    });
    return out;
}

/// [(H*W), C] -> [C, H, W].
inline Tensor rows_to_grid(const Tensor& x, std::int64_t h, std::int64_t w) {
    if (x.shape().size() != 2 || x.dim(0) != h * w)
        throw NumericError("rows_to_grid: shape mismatch");
    const std::int64_t c = x.dim(1);
    Tensor out = detail::make_result({c, h, w}, detail::track({&x}));
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t p = 0; p < h * w; ++p)
            out.values()[ci * h * w + p] = x.values()[p * c + ci];
    detail::attach(out, {x}, [c, h, w](TensorNode& o) {
        TensorNode& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t q = 0; q < h * w; ++q)
                p.grad[q * c + ci] += o.grad[ci * h * w + q];
    });
    return out;
}

} // namespace docenc
