#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <deque>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sdlb/tensor.hpp"

namespace sdlb {

// Trainable tensor with a stable identity. Modules own their params; graphs
// reference them by address for one forward/backward episode.
struct Param {
    std::string name;
    Tensor value;
    bool frozen = false;

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}
};

class Graph;

struct Value {
    Graph* g = nullptr;
    std::uint32_t id = 0;

    const Tensor& v() const;
    const Shape& shape() const;
};

// Reverse-mode tape. Nodes are appended in forward order; backward() walks
// them once in reverse insertion order. Gradients are allocated lazily so
// inference-only graphs stay light.
class Graph {
public:
    bool check_finite = true;

    Value leaf(Tensor t) { return add_node(std::move(t), false, nullptr, "leaf"); }

    // Leaf that participates in differentiation (inputs under test, code
    // vectors being optimized through, etc).
    Value leaf_grad(Tensor t) { return add_node(std::move(t), true, nullptr, "leaf"); }

    Value param(Param& p) {
        auto it = params_.find(&p);
        if (it != params_.end()) return Value{this, it->second};
        Value v = add_node(p.value, true, nullptr, "param");
        params_.emplace(&p, v.id);
        param_list_.push_back({&p, v.id});
        return v;
    }

    const Tensor& val(std::uint32_t id) const { return nodes_[id].value; }

    Tensor& grad_buf(std::uint32_t id) {
        Node& n = nodes_[id];
        if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
        return n.grad;
    }

    bool needs_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }

    // Scalar loss only; unreachable parameters report zero gradients.
    void backward(Value loss) {
        if (loss.g != this) throw std::invalid_argument("backward: loss from another graph");
        if (!nodes_[loss.id].value.is_scalar()) {
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_str(nodes_[loss.id].value.shape));
        }
        grad_buf(loss.id).data[0] = 1.0;
        for (std::uint32_t id = loss.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (n.back && !n.grad.data.empty()) n.back(*this);
        }
    }

    Tensor grad_of(const Param& p) const {
        auto it = params_.find(&p);
        if (it == params_.end()) return Tensor::zeros(p.value.shape);
        const Node& n = nodes_[it->second];
        if (n.grad.data.empty()) return Tensor::zeros(p.value.shape);
        return n.grad;
    }

    const std::vector<std::pair<const Param*, std::uint32_t>>& bound_params() const {
        return param_list_;
    }

    std::size_t node_count() const { return nodes_.size(); }

    // ---- op plumbing --------------------------------------------------

    using BackFn = std::function<void(Graph&)>;

    Value add_node(Tensor value, bool needs_grad, BackFn back, const char* opname) {
        if (check_finite && !value.all_finite()) {
            throw std::runtime_error(std::string("non-finite value produced by op '") + opname + "'");
        }
        nodes_.push_back(Node{std::move(value), Tensor{}, std::move(back), needs_grad, opname});
        return Value{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    void set_back(std::uint32_t id, BackFn fn) { nodes_[id].back = std::move(fn); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackFn back;
        bool needs_grad = false;
        const char* opname = "leaf";
    };

    std::deque<Node> nodes_;
    std::unordered_map<const Param*, std::uint32_t> params_;
    std::vector<std::pair<const Param*, std::uint32_t>> param_list_;
};

inline const Tensor& Value::v() const { return g->val(id); }
inline const Shape& Value::shape() const { return g->val(id).shape; }

namespace detail {

inline void check_same_graph(Value a, Value b, const char* op) {
    if (a.g != b.g) throw std::invalid_argument(std::string(op) + ": operands from different graphs");
}

// Broadcast classification for binary elementwise ops.
enum class Bcast { same, b_scalar, a_scalar, b_row };

inline Bcast classify(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape == b.shape) return Bcast::same;
    if (b.size() == 1) return Bcast::b_scalar;
    if (a.size() == 1) return Bcast::a_scalar;
    if (a.rank() == 2 && b.size() == a.shape[1]) return Bcast::b_row;
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
}

}  // namespace detail

// ---- elementwise binary ops with limited broadcasting ------------------

template <class FwdF, class BackA, class BackB>
Value binary_op(Value a, Value b, const char* name, FwdF fwd, BackA back_a, BackB back_b) {
    detail::check_same_graph(a, b, name);
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    const Tensor& tb = g.val(b.id);
    const auto bc = detail::classify(ta, tb, name);

    Tensor out = (bc == detail::Bcast::a_scalar) ? Tensor(tb.shape) : Tensor(ta.shape);
    const std::size_t n = out.size();
    const std::size_t cols = (bc == detail::Bcast::b_row) ? ta.shape[1] : 0;
    for (std::size_t i = 0; i < n; ++i) {
        double x, y;
        switch (bc) {
            case detail::Bcast::same: x = ta.data[i]; y = tb.data[i]; break;
            case detail::Bcast::b_scalar: x = ta.data[i]; y = tb.data[0]; break;
            case detail::Bcast::a_scalar: x = ta.data[0]; y = tb.data[i]; break;
            default: x = ta.data[i]; y = tb.data[i % cols]; break;
        }
        out.data[i] = fwd(x, y);
    }

    const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, name);
    if (ng) {
        auto oid = outv.id;
        auto aid = a.id, bid = b.id;
        g.set_back(oid, [oid, aid, bid, bc, cols, back_a, back_b](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            const Tensor& ta2 = gg.val(aid);
            const Tensor& tb2 = gg.val(bid);
            const bool na = gg.needs_grad(aid);
            const bool nb = gg.needs_grad(bid);
            Tensor* ga = na ? &gg.grad_buf(aid) : nullptr;
            Tensor* gb = nb ? &gg.grad_buf(bid) : nullptr;
            const std::size_t nn = go.size();
            for (std::size_t i = 0; i < nn; ++i) {
                double x, y;
                std::size_t ia, ib;
                switch (bc) {
                    case detail::Bcast::same: ia = i; ib = i; break;
                    case detail::Bcast::b_scalar: ia = i; ib = 0; break;
                    case detail::Bcast::a_scalar: ia = 0; ib = i; break;
                    default: ia = i; ib = i % cols; break;
                }
                x = ta2.data[ia];
                y = tb2.data[ib];
                const double gv = go.data[i];
                if (na) ga->data[ia] += gv * back_a(x, y);
                if (nb) gb->data[ib] += gv * back_b(x, y);
            }
        });
    }
    return outv;
}

inline Value add(Value a, Value b) {
    return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                     [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Value sub(Value a, Value b) {
    return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                     [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Value mul(Value a, Value b) {
    return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                     [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator-(Value a, Value b) { return sub(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }

// ---- unary ops ----------------------------------------------------------

template <class FwdF, class DerivF>
Value unary_op(Value a, const char* name, FwdF fwd, DerivF deriv) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    Tensor out(ta.shape);
    for (std::size_t i = 0; i < ta.size(); ++i) out.data[i] = fwd(ta.data[i]);
    const bool ng = g.needs_grad(a.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, name);
    if (ng) {
        auto oid = outv.id, aid = a.id;
        g.set_back(oid, [oid, aid, deriv](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            const Tensor& x = gg.val(aid);
            const Tensor& y = gg.val(oid);
            Tensor& ga = gg.grad_buf(aid);
            for (std::size_t i = 0; i < go.size(); ++i) {
                ga.data[i] += go.data[i] * deriv(x.data[i], y.data[i]);
            }
        });
    }
    return outv;
}

inline Value scale(Value a, double k) {
    return unary_op(a, "scale", [k](double x) { return k * x; },
                    [k](double, double) { return k; });
}

inline Value add_const(Value a, double c) {
    return unary_op(a, "add_const", [c](double x) { return x + c; },
                    [](double, double) { return 1.0; });
}

inline Value silu(Value a) {
    return unary_op(a, "silu",
                    [](double x) { return x / (1.0 + std::exp(-x)); },
                    [](double x, double) {
                        const double s = 1.0 / (1.0 + std::exp(-x));
                        return s * (1.0 + x * (1.0 - s));
                    });
}

inline Value sigmoid(Value a) {
    return unary_op(a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

inline Value exp_v(Value a) {
    return unary_op(a, "exp", [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

inline Value recip(Value a) {
    return unary_op(a, "recip", [](double x) { return 1.0 / x; },
                    [](double, double y) { return -y * y; });
}

inline Value square(Value a) {
    return unary_op(a, "square", [](double x) { return x * x; },
                    [](double x, double) { return 2.0 * x; });
}

// ---- matmul -------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n]; ikj order so the inner loop vectorizes.
inline void mm_acc(const double* A, const double* B, double* C,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* Ar = A + i * k;
        double* Cr = C + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double a = Ar[kk];
            if (a == 0.0) continue;
            const double* Br = B + kk * n;
            for (std::size_t j = 0; j < n; ++j) Cr[j] += a * Br[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T  (rows of B dotted with rows of A).
inline void mm_bt_acc(const double* A, const double* B, double* C,
                      std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* Ar = A + i * k;
        double* Cr = C + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* Br = B + j * k;
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += Ar[kk] * Br[kk];
            Cr[j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n].
inline void mm_at_acc(const double* A, const double* B, double* C,
                      std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* Ar = A + i * k;
        const double* Br = B + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double a = Ar[kk];
            if (a == 0.0) continue;
            double* Cr = C + kk * n;
            for (std::size_t j = 0; j < n; ++j) Cr[j] += a * Br[j];
        }
    }
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " +
                                    shape_str(t.shape));
    }
}

}  // namespace detail

inline Value matmul(Value a, Value b) {
    detail::check_same_graph(a, b, "matmul");
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    const Tensor& tb = g.val(b.id);
    detail::require_rank2(ta, "matmul");
    detail::require_rank2(tb, "matmul");
    if (ta.shape[1] != tb.shape[0]) {
        throw std::invalid_argument("matmul: shape mismatch " + shape_str(ta.shape) + " x " +
                                    shape_str(tb.shape));
    }
    const std::size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
    Tensor out({m, n});
    detail::mm_acc(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
    const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "matmul");
    if (ng) {
        auto oid = outv.id, aid = a.id, bid = b.id;
        g.set_back(oid, [oid, aid, bid, m, k, n](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            if (gg.needs_grad(aid)) {
                // dA = dC * B^T
                detail::mm_bt_acc(go.data.data(), gg.val(bid).data.data(),
                                  gg.grad_buf(aid).data.data(), m, n, k);
            }
            if (gg.needs_grad(bid)) {
                // dB = A^T * dC
                detail::mm_at_acc(gg.val(aid).data.data(), go.data.data(),
                                  gg.grad_buf(bid).data.data(), m, k, n);
            }
        });
    }
    return outv;
}

// a[m,k] * b[n,k]^T -> [m,n]; attention scores without materializing K^T.
inline Value matmul_bt(Value a, Value b) {
    detail::check_same_graph(a, b, "matmul_bt");
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    const Tensor& tb = g.val(b.id);
    detail::require_rank2(ta, "matmul_bt");
    detail::require_rank2(tb, "matmul_bt");
    if (ta.shape[1] != tb.shape[1]) {
        throw std::invalid_argument("matmul_bt: shape mismatch " + shape_str(ta.shape) + " x " +
                                    shape_str(tb.shape) + "^T");
    }
    const std::size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[0];
    Tensor out({m, n});
    detail::mm_bt_acc(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
    const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "matmul_bt");
    if (ng) {
        auto oid = outv.id, aid = a.id, bid = b.id;
        g.set_back(oid, [oid, aid, bid, m, k, n](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            if (gg.needs_grad(aid)) {
                // dA = dC * B
                detail::mm_acc(go.data.data(), gg.val(bid).data.data(),
                               gg.grad_buf(aid).data.data(), m, n, k);
            }
            if (gg.needs_grad(bid)) {
                // dB = dC^T * A
                detail::mm_at_acc(go.data.data(), gg.val(aid).data.data(),
                                  gg.grad_buf(bid).data.data(), m, n, k);
            }
        });
    }
    return outv;
}

// ---- softmax ------------------------------------------------------------

inline Value softmax(Value a, std::size_t axis) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    if (axis >= ta.rank()) {
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                    " out of range for " + shape_str(ta.shape));
    }
    const std::size_t L = ta.shape[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ta.shape[i];
    for (std::size_t i = axis + 1; i < ta.rank(); ++i) inner *= ta.shape[i];

    Tensor out(ta.shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * L * inner + in;
            double mx = ta.data[base];
            for (std::size_t l = 1; l < L; ++l) mx = std::max(mx, ta.data[base + l * inner]);
            double s = 0.0;
            for (std::size_t l = 0; l < L; ++l) {
                const double e = std::exp(ta.data[base + l * inner] - mx);
                out.data[base + l * inner] = e;
                s += e;
            }
            const double invs = 1.0 / s;
            for (std::size_t l = 0; l < L; ++l) out.data[base + l * inner] *= invs;
        }
    }
    const bool ng = g.needs_grad(a.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "softmax");
    if (ng) {
        auto oid = outv.id, aid = a.id;
        g.set_back(oid, [oid, aid, L, outer, inner](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            const Tensor& y = gg.val(oid);
            Tensor& ga = gg.grad_buf(aid);
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * L * inner + in;
                    double dot = 0.0;
                    for (std::size_t l = 0; l < L; ++l) {
                        dot += go.data[base + l * inner] * y.data[base + l * inner];
                    }
                    for (std::size_t l = 0; l < L; ++l) {
                        const std::size_t i = base + l * inner;
                        ga.data[i] += y.data[i] * (go.data[i] - dot);
                    }
                }
            }
        });
    }
    return outv;
}

inline Value softmax_rows(Value a) { return softmax(a, a.shape().size() - 1); }

// ---- reductions -----------------------------------------------------------

inline Value sum(Value a) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    Tensor out = Tensor::scalar(ta.sum());
    const bool ng = g.needs_grad(a.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "sum");
    if (ng) {
        auto oid = outv.id, aid = a.id;
        g.set_back(oid, [oid, aid](Graph& gg) {
            const double gv = gg.grad_buf(oid).data[0];
            Tensor& ga = gg.grad_buf(aid);
            for (double& x : ga.data) x += gv;
        });
    }
    return outv;
}

inline Value mean_all(Value a) {
    const std::size_t n = a.v().size();
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

// [N, C] -> [C] column means (token pooling).
inline Value mean_axis0(Value a) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    detail::require_rank2(ta, "mean_axis0");
    const std::size_t n = ta.shape[0], c = ta.shape[1];
    Tensor out({c});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) out.data[j] += ta.data[i * c + j];
    }
    for (double& x : out.data) x /= static_cast<double>(n);
    const bool ng = g.needs_grad(a.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "mean_axis0");
    if (ng) {
        auto oid = outv.id, aid = a.id;
        g.set_back(oid, [oid, aid, n, c](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            Tensor& ga = gg.grad_buf(aid);
            const double inv = 1.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < c; ++j) ga.data[i * c + j] += go.data[j] * inv;
            }
        });
    }
    return outv;
}

// [R, ...] -> [R], mean over trailing dims (global average pooling).
inline Value mean_trailing(Value a) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    if (ta.rank() < 2) throw std::invalid_argument("mean_trailing: rank >= 2 required");
    const std::size_t r = ta.shape[0];
    const std::size_t inner = ta.size() / r;
    Tensor out({r});
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < inner; ++j) s += ta.data[i * inner + j];
        out.data[i] = s / static_cast<double>(inner);
    }
    const bool ng = g.needs_grad(a.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "mean_trailing");
    if (ng) {
        auto oid = outv.id, aid = a.id;
        g.set_back(oid, [oid, aid, r, inner](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            Tensor& ga = gg.grad_buf(aid);
            const double inv = 1.0 / static_cast<double>(inner);
            for (std::size_t i = 0; i < r; ++i) {
                const double gv = go.data[i] * inv;
                for (std::size_t j = 0; j < inner; ++j) ga.data[i * inner + j] += gv;
            }
        });
    }
    return outv;
}

// Mean squared error over all coordinates -> scalar.
inline Value mse(Value a, Value b) {
    detail::check_same_graph(a, b, "mse");
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    const Tensor& tb = g.val(b.id);
    if (!ta.same_shape(tb)) {
        throw std::invalid_argument("mse: shape mismatch " + shape_str(ta.shape) + " vs " +
                                    shape_str(tb.shape));
    }
    const std::size_t n = ta.size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = ta.data[i] - tb.data[i];
        s += d * d;
    }
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "mse");
    if (ng) {
        auto oid = outv.id, aid = a.id, bid = b.id;
        g.set_back(oid, [oid, aid, bid, n](Graph& gg) {
            const double gv = gg.grad_buf(oid).data[0] * 2.0 / static_cast<double>(n);
            const Tensor& x = gg.val(aid);
            const Tensor& y = gg.val(bid);
            const bool na = gg.needs_grad(aid), nb = gg.needs_grad(bid);
            Tensor* ga = na ? &gg.grad_buf(aid) : nullptr;
            Tensor* gb = nb ? &gg.grad_buf(bid) : nullptr;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = gv * (x.data[i] - y.data[i]);
                if (na) ga->data[i] += d;
                if (nb) gb->data[i] -= d;
            }
        });
    }
    return outv;
}

// ---- layer norm -----------------------------------------------------------

inline Value layer_norm(Value x, Value gain, Value bias, double eps = 1e-5) {
    Graph& g = *x.g;
    const Tensor& tx = g.val(x.id);
    detail::require_rank2(tx, "layer_norm");
    const std::size_t n = tx.shape[0], c = tx.shape[1];
    const Tensor& tg = g.val(gain.id);
    const Tensor& tb = g.val(bias.id);
    if (tg.size() != c || tb.size() != c) {
        throw std::invalid_argument("layer_norm: gain/bias width mismatch with " + shape_str(tx.shape));
    }
    Tensor out({n, c});
    Tensor xhat({n, c});
    std::vector<double> inv_std(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += tx.data[i * c + j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = tx.data[i * c + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double xh = (tx.data[i * c + j] - mu) * is;
            xhat.data[i * c + j] = xh;
            out.data[i * c + j] = xh * tg.data[j] + tb.data[j];
        }
    }
    const bool ng = g.needs_grad(x.id) || g.needs_grad(gain.id) || g.needs_grad(bias.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "layer_norm");
    if (ng) {
        auto oid = outv.id, xid = x.id, gid = gain.id, bid = bias.id;
        auto xh = std::make_shared<Tensor>(std::move(xhat));
        auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
        g.set_back(oid, [oid, xid, gid, bid, n, c, xh, is](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            const Tensor& tg2 = gg.val(gid);
            if (gg.needs_grad(gid)) {
                Tensor& ggain = gg.grad_buf(gid);
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < c; ++j) {
                        ggain.data[j] += go.data[i * c + j] * xh->data[i * c + j];
                    }
                }
            }
            if (gg.needs_grad(bid)) {
                Tensor& gbias = gg.grad_buf(bid);
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < c; ++j) gbias.data[j] += go.data[i * c + j];
                }
            }
            if (gg.needs_grad(xid)) {
                Tensor& gx = gg.grad_buf(xid);
                for (std::size_t i = 0; i < n; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = go.data[i * c + j] * tg2.data[j];
                        m1 += dxh;
                        m2 += dxh * xh->data[i * c + j];
                    }
                    m1 /= static_cast<double>(c);
                    m2 /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = go.data[i * c + j] * tg2.data[j];
                        gx.data[i * c + j] +=
                            (*is)[i] * (dxh - m1 - xh->data[i * c + j] * m2);
                    }
                }
            }
        });
    }
    return outv;
}

// ---- structure ops ----------------------------------------------------------

// Slice contiguous blocks along axis 0 ([N,C] rows or [C,H,W] channels).
inline Value slice_axis0(Value a, std::size_t i0, std::size_t i1) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    if (ta.rank() < 1 || i0 >= i1 || i1 > ta.shape[0]) {
        throw std::invalid_argument("slice_axis0: bad range [" + std::to_string(i0) + "," +
                                    std::to_string(i1) + ") for " + shape_str(ta.shape));
    }
    const std::size_t inner = ta.size() / ta.shape[0];
    Shape os = ta.shape;
    os[0] = i1 - i0;
    Tensor out(os);
    std::copy(ta.data.begin() + i0 * inner, ta.data.begin() + i1 * inner, out.data.begin());
    const bool ng = g.needs_grad(a.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "slice_axis0");
    if (ng) {
        auto oid = outv.id, aid = a.id;
        g.set_back(oid, [oid, aid, i0, inner](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            Tensor& ga = gg.grad_buf(aid);
            for (std::size_t i = 0; i < go.size(); ++i) ga.data[i0 * inner + i] += go.data[i];
        });
    }
    return outv;
}

inline Value concat_axis0(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_axis0: no parts");
    Graph& g = *parts[0].g;
    const Shape& s0 = g.val(parts[0].id).shape;
    std::size_t total = 0;
    for (const Value& p : parts) {
        detail::check_same_graph(parts[0], p, "concat_axis0");
        const Shape& s = g.val(p.id).shape;
        if (s.size() != s0.size()) throw std::invalid_argument("concat_axis0: rank mismatch");
        for (std::size_t i = 1; i < s.size(); ++i) {
            if (s[i] != s0[i]) {
                throw std::invalid_argument("concat_axis0: trailing shape mismatch " +
                                            shape_str(s) + " vs " + shape_str(s0));
            }
        }
        total += s[0];
    }
    Shape os = s0;
    os[0] = total;
    Tensor out(os);
    std::size_t off = 0;
    bool ng = false;
    for (const Value& p : parts) {
        const Tensor& tp = g.val(p.id);
        std::copy(tp.data.begin(), tp.data.end(), out.data.begin() + off);
        off += tp.size();
        ng = ng || g.needs_grad(p.id);
    }
    Value outv = g.add_node(std::move(out), ng, nullptr, "concat_axis0");
    if (ng) {
        auto oid = outv.id;
        std::vector<std::uint32_t> ids;
        for (const Value& p : parts) ids.push_back(p.id);
        g.set_back(oid, [oid, ids](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            std::size_t off2 = 0;
            for (std::uint32_t pid : ids) {
                const std::size_t nsz = gg.val(pid).size();
                if (gg.needs_grad(pid)) {
                    Tensor& gp = gg.grad_buf(pid);
                    for (std::size_t i = 0; i < nsz; ++i) gp.data[i] += go.data[off2 + i];
                }
                off2 += nsz;
            }
        });
    }
    return outv;
}

inline Value concat_axis0(Value a, Value b) { return concat_axis0(std::vector<Value>{a, b}); }

inline Value slice_cols(Value a, std::size_t c0, std::size_t c1) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    detail::require_rank2(ta, "slice_cols");
    if (c0 >= c1 || c1 > ta.shape[1]) {
        throw std::invalid_argument("slice_cols: bad range for " + shape_str(ta.shape));
    }
    const std::size_t n = ta.shape[0], c = ta.shape[1], w = c1 - c0;
    Tensor out({n, w});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(ta.data.begin() + i * c + c0, ta.data.begin() + i * c + c1,
                  out.data.begin() + i * w);
    }
    const bool ng = g.needs_grad(a.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "slice_cols");
    if (ng) {
        auto oid = outv.id, aid = a.id;
        g.set_back(oid, [oid, aid, n, c, c0, w](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            Tensor& ga = gg.grad_buf(aid);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < w; ++j) ga.data[i * c + c0 + j] += go.data[i * w + j];
            }
        });
    }
    return outv;
}

inline Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    Graph& g = *parts[0].g;
    const std::size_t n = g.val(parts[0].id).shape[0];
    std::size_t total = 0;
    bool ng = false;
    for (const Value& p : parts) {
        const Tensor& tp = g.val(p.id);
        detail::require_rank2(tp, "concat_cols");
        if (tp.shape[0] != n) throw std::invalid_argument("concat_cols: row mismatch");
        total += tp.shape[1];
        ng = ng || g.needs_grad(p.id);
    }
    Tensor out({n, total});
    std::size_t off = 0;
    for (const Value& p : parts) {
        const Tensor& tp = g.val(p.id);
        const std::size_t w = tp.shape[1];
        for (std::size_t i = 0; i < n; ++i) {
            std::copy(tp.data.begin() + i * w, tp.data.begin() + (i + 1) * w,
                      out.data.begin() + i * total + off);
        }
        off += w;
    }
    Value outv = g.add_node(std::move(out), ng, nullptr, "concat_cols");
    if (ng) {
        auto oid = outv.id;
        std::vector<std::uint32_t> ids;
        std::vector<std::size_t> widths;
        for (const Value& p : parts) {
            ids.push_back(p.id);
            widths.push_back(g.val(p.id).shape[1]);
        }
        g.set_back(oid, [oid, ids, widths, n, total](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            std::size_t off2 = 0;
            for (std::size_t pi = 0; pi < ids.size(); ++pi) {
                const std::size_t w = widths[pi];
                if (gg.needs_grad(ids[pi])) {
                    Tensor& gp = gg.grad_buf(ids[pi]);
                    for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < w; ++j) {
                            gp.data[i * w + j] += go.data[i * total + off2 + j];
                        }
                    }
                }
                off2 += w;
            }
        });
    }
    return outv;
}

inline Value reshape(Value a, Shape s) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    if (shape_count(s) != ta.size()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(ta.shape) + " as " +
                                    shape_str(s));
    }
    Tensor out(std::move(s), ta.data);
    const bool ng = g.needs_grad(a.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "reshape");
    if (ng) {
        auto oid = outv.id, aid = a.id;
        g.set_back(oid, [oid, aid](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            Tensor& ga = gg.grad_buf(aid);
            for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i];
        });
    }
    return outv;
}

// ---- normalized-feature helpers -------------------------------------------

// Rows scaled to unit L2 norm (plus eps).
inline Value l2_normalize_rows(Value a, double eps = 1e-8) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    detail::require_rank2(ta, "l2_normalize_rows");
    const std::size_t n = ta.shape[0], c = ta.shape[1];
    Tensor out({n, c});
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += ta.data[i * c + j] * ta.data[i * c + j];
        const double nn = std::sqrt(s);
        norms[i] = nn;
        const double inv = 1.0 / (nn + eps);
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = ta.data[i * c + j] * inv;
    }
    const bool ng = g.needs_grad(a.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "l2_normalize_rows");
    if (ng) {
        auto oid = outv.id, aid = a.id;
        auto nm = std::make_shared<std::vector<double>>(std::move(norms));
        g.set_back(oid, [oid, aid, n, c, eps, nm](Graph& gg) {
            const Tensor& go = gg.grad_buf(oid);
            const Tensor& x = gg.val(aid);
            Tensor& ga = gg.grad_buf(aid);
            for (std::size_t i = 0; i < n; ++i) {
                const double nn = (*nm)[i];
                const double d = nn + eps;
                double gx = 0.0;
                for (std::size_t j = 0; j < c; ++j) gx += go.data[i * c + j] * x.data[i * c + j];
                for (std::size_t j = 0; j < c; ++j) {
                    double t = go.data[i * c + j] / d;
                    if (nn > 0.0) t -= x.data[i * c + j] * gx / (nn * d * d);
                    ga.data[i * c + j] += t;
                }
            }
        });
    }
    return outv;
}

// Cosine similarity of two flat vectors -> scalar.
inline Value cosine_sim(Value a, Value b, double eps = 1e-12) {
    detail::check_same_graph(a, b, "cosine_sim");
    Graph& g = *a.g;
    const Tensor& ta = g.val(a.id);
    const Tensor& tb = g.val(b.id);
    if (ta.size() != tb.size()) {
        throw std::invalid_argument("cosine_sim: size mismatch " + shape_str(ta.shape) + " vs " +
                                    shape_str(tb.shape));
    }
    const std::size_t n = ta.size();
    double s = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        s += ta.data[i] * tb.data[i];
        na2 += ta.data[i] * ta.data[i];
        nb2 += tb.data[i] * tb.data[i];
    }
    const double p = std::sqrt(na2) + eps, q = std::sqrt(nb2) + eps;
    const double cosv = s / (p * q);
    const bool ng = g.needs_grad(a.id) || g.needs_grad(b.id);
    Value outv = g.add_node(Tensor::scalar(cosv), ng, nullptr, "cosine_sim");
    if (ng) {
        auto oid = outv.id, aid = a.id, bid = b.id;
        g.set_back(oid, [oid, aid, bid, n, s, na2, nb2, eps](Graph& gg) {
            const double gv = gg.grad_buf(oid).data[0];
            const Tensor& x = gg.val(aid);
            const Tensor& y = gg.val(bid);
            const double p = std::sqrt(na2) + eps, q = std::sqrt(nb2) + eps;
            const double na = std::sqrt(na2), nb = std::sqrt(nb2);
            if (gg.needs_grad(aid)) {
                Tensor& ga = gg.grad_buf(aid);
                for (std::size_t i = 0; i < n; ++i) {
                    double t = y.data[i] / (p * q);
                    if (na > 0.0) t -= s * x.data[i] / (na * p * p * q);
                    ga.data[i] += gv * t;
                }
            }
            if (gg.needs_grad(bid)) {
                Tensor& gb = gg.grad_buf(bid);
                for (std::size_t i = 0; i < n; ++i) {
                    double t = x.data[i] / (p * q);
                    if (nb > 0.0) t -= s * y.data[i] / (nb * q * q * p);
                    gb.data[i] += gv * t;
                }
            }
        });
    }
    return outv;
}

// ---- conv2d ----------------------------------------------------------------

// x[Cin,H,W] * w[Cout,Cin,kh,kw] + b[Cout] -> [Cout,H',W'], zero padding.
inline Value conv2d(Value x, Value w, Value b, std::size_t stride, std::size_t pad) {
    detail::check_same_graph(x, w, "conv2d");
    detail::check_same_graph(x, b, "conv2d");
    Graph& g = *x.g;
    const Tensor& tx = g.val(x.id);
    const Tensor& tw = g.val(w.id);
    const Tensor& tb = g.val(b.id);
    if (tx.rank() != 3 || tw.rank() != 4) {
        throw std::invalid_argument("conv2d: expected x rank 3 and w rank 4, got " +
                                    shape_str(tx.shape) + " and " + shape_str(tw.shape));
    }
    const std::size_t cin = tx.shape[0], h = tx.shape[1], wd = tx.shape[2];
    const std::size_t cout = tw.shape[0], kh = tw.shape[2], kw = tw.shape[3];
    if (tw.shape[1] != cin || tb.size() != cout) {
        throw std::invalid_argument("conv2d: channel mismatch " + shape_str(tx.shape) + " vs " +
                                    shape_str(tw.shape));
    }
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
    const std::size_t ckk = cin * kh * kw;
    const std::size_t npix = ho * wo;

    // im2col patches [npix, ckk]
    Tensor patches({npix, ckk});
    for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
            double* row = patches.data.data() + (oy * wo + ox) * ckk;
            std::size_t idx = 0;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t kx = 0; kx < kw; ++kx, ++idx) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix < 0 ||
                            ix >= static_cast<std::ptrdiff_t>(wd)) {
                            row[idx] = 0.0;
                        } else {
                            row[idx] = tx.data[(ci * h + static_cast<std::size_t>(iy)) * wd +
                                               static_cast<std::size_t>(ix)];
                        }
                    }
                }
            }
        }
    }

    // Y[cout, npix] = Wmat[cout, ckk] * patches^T + bias
    Tensor out({cout, ho, wo});
    detail::mm_bt_acc(tw.data.data(), patches.data.data(), out.data.data(), cout, ckk, npix);
    for (std::size_t co = 0; co < cout; ++co) {
        const double bv = tb.data[co];
        for (std::size_t i = 0; i < npix; ++i) out.data[co * npix + i] += bv;
    }

    const bool ng = g.needs_grad(x.id) || g.needs_grad(w.id) || g.needs_grad(b.id);
    Value outv = g.add_node(std::move(out), ng, nullptr, "conv2d");
    if (ng) {
        auto oid = outv.id, xid = x.id, wid = w.id, bid = b.id;
        auto pt = std::make_shared<Tensor>(std::move(patches));
        g.set_back(oid,
                   [oid, xid, wid, bid, pt, cin, h, wd, cout, kh, kw, ho, wo, stride, pad](Graph& gg) {
                       const Tensor& go = gg.grad_buf(oid);  // [cout, ho, wo]
                       const std::size_t ckk = cin * kh * kw;
                       const std::size_t npix = ho * wo;
                       if (gg.needs_grad(bid)) {
                           Tensor& gb = gg.grad_buf(bid);
                           for (std::size_t co = 0; co < cout; ++co) {
                               double s = 0.0;
                               for (std::size_t i = 0; i < npix; ++i) s += go.data[co * npix + i];
                               gb.data[co] += s;
                           }
                       }
                       if (gg.needs_grad(wid)) {
                           // dW[cout, ckk] = dY[cout, npix] * patches[npix, ckk]
                           detail::mm_acc(go.data.data(), pt->data.data(),
                                          gg.grad_buf(wid).data.data(), cout, npix, ckk);
                       }
                       if (gg.needs_grad(xid)) {
                           // dP[npix, ckk] = dY^T[npix, cout] * Wmat[cout, ckk], then col2im.
                           Tensor dp({npix, ckk});
                           detail::mm_at_acc(go.data.data(), gg.val(wid).data.data(),
                                             dp.data.data(), cout, npix, ckk);
                           Tensor& gx = gg.grad_buf(xid);
                           for (std::size_t oy = 0; oy < ho; ++oy) {
                               for (std::size_t ox = 0; ox < wo; ++ox) {
                                   const double* row = dp.data.data() + (oy * wo + ox) * ckk;
                                   std::size_t idx = 0;
                                   for (std::size_t ci = 0; ci < cin; ++ci) {
                                       for (std::size_t ky = 0; ky < kh; ++ky) {
                                           const std::ptrdiff_t iy =
                                               static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                               static_cast<std::ptrdiff_t>(pad);
                                           for (std::size_t kx = 0; kx < kw; ++kx, ++idx) {
                                               const std::ptrdiff_t ix =
                                                   static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                   static_cast<std::ptrdiff_t>(pad);
                                               if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                                                   ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) {
                                                   continue;
                                               }
                                               gx.data[(ci * h + static_cast<std::size_t>(iy)) * wd +
                                                       static_cast<std::size_t>(ix)] += row[idx];
                                           }
                                       }
                                   }
                               }
                           }
                       }
                   });
    }
    return outv;
}

}  // namespace sdlb
