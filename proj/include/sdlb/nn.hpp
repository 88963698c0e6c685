#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdlb/graph.hpp"
#include "sdlb/rng.hpp"
#include "sdlb/tensor.hpp"

namespace sdlb {

inline std::size_t param_count(const std::vector<Param*>& params) {
    std::size_t n = 0;
    for (const Param* p : params) n += p->value.size();
    return n;
}

// ---- linear / mlp -----------------------------------------------------------

struct Linear {
    Param w;  // [in, out]
    Param b;  // [out]
    bool has_bias = true;

    Linear() = default;

    Linear(const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
           bool zero_init = false, bool bias = true)
        : w(prefix + ".w", zero_init ? Tensor::zeros({in, out})
                                     : Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)))),
          b(prefix + ".b", Tensor::zeros({out})),
          has_bias(bias) {}

    Value operator()(Graph& g, Value x) {
        Value y = matmul(x, g.param(w));
        if (has_bias) y = add(y, g.param(b));
        return y;
    }

    void collect(std::vector<Param*>& out) {
        out.push_back(&w);
        if (has_bias) out.push_back(&b);
    }

    std::size_t in_dim() const { return w.value.shape[0]; }
    std::size_t out_dim() const { return w.value.shape[1]; }
};

// Two-layer MLP with SiLU in between.
struct Mlp2 {
    Linear l1, l2;

    Mlp2() = default;

    Mlp2(const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
         bool zero_last = false)
        : l1(prefix + ".l1", in, hidden, rng), l2(prefix + ".l2", hidden, out, rng, zero_last) {}

    Value operator()(Graph& g, Value x) { return l2(g, silu(l1(g, x))); }

    void collect(std::vector<Param*>& out) {
        l1.collect(out);
        l2.collect(out);
    }
};

struct LayerNormLayer {
    Param gain;
    Param bias;

    LayerNormLayer() = default;

    LayerNormLayer(const std::string& prefix, std::size_t width)
        : gain(prefix + ".gain", Tensor::full({width}, 1.0)), bias(prefix + ".bias", Tensor::zeros({width})) {}

    Value operator()(Graph& g, Value x) { return layer_norm(x, g.param(gain), g.param(bias)); }

    void collect(std::vector<Param*>& out) {
        out.push_back(&gain);
        out.push_back(&bias);
    }
};

// ---- attention ----------------------------------------------------------------

// Scaled dot-product attention: Softmax(Q K^T / sqrt(C)) V, no masking.
inline Value cross_attention(Value q, Value k, Value v) {
    const Tensor& tq = q.v();
    const Tensor& tk = k.v();
    const Tensor& tv = v.v();
    if (tq.rank() != 2 || tk.rank() != 2 || tv.rank() != 2) {
        throw std::invalid_argument("cross_attention: rank-2 operands required");
    }
    if (tq.shape[1] != tk.shape[1]) {
        throw std::invalid_argument("cross_attention: Q width " + shape_str(tq.shape) +
                                    " mismatches K width " + shape_str(tk.shape));
    }
    if (tk.shape[0] != tv.shape[0]) {
        throw std::invalid_argument("cross_attention: K rows " + shape_str(tk.shape) +
                                    " mismatch V rows " + shape_str(tv.shape));
    }
    const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(tq.shape[1]));
    Value scores = scale(matmul_bt(q, k), inv_sqrt_c);
    return matmul(softmax_rows(scores), v);
}

// Multi-head attention with separate KV source (self-attention passes x twice).
struct MultiheadAttention {
    std::size_t heads = 1;
    Linear wq, wk, wv, wo;

    MultiheadAttention() = default;

    MultiheadAttention(const std::string& prefix, std::size_t q_dim, std::size_t kv_dim,
                       std::size_t width, std::size_t n_heads, Rng& rng, bool zero_out = false)
        : heads(n_heads),
          wq(prefix + ".wq", q_dim, width, rng),
          wk(prefix + ".wk", kv_dim, width, rng),
          wv(prefix + ".wv", kv_dim, width, rng),
          wo(prefix + ".wo", width, width, rng, zero_out) {
        if (width % n_heads != 0) {
            throw std::invalid_argument(prefix + ": width " + std::to_string(width) +
                                        " not divisible by heads " + std::to_string(n_heads));
        }
    }

    Value operator()(Graph& g, Value x_q, Value kv) {
        Value q = wq(g, x_q);
        Value k = wk(g, kv);
        Value v = wv(g, kv);
        const std::size_t width = wo.in_dim();
        const std::size_t dh = width / heads;
        std::vector<Value> outs;
        outs.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            Value qh = slice_cols(q, h * dh, (h + 1) * dh);
            Value kh = slice_cols(k, h * dh, (h + 1) * dh);
            Value vh = slice_cols(v, h * dh, (h + 1) * dh);
            outs.push_back(cross_attention(qh, kh, vh));
        }
        return wo(g, heads == 1 ? outs[0] : concat_cols(outs));
    }

    void collect(std::vector<Param*>& out) {
        wq.collect(out);
        wk.collect(out);
        wv.collect(out);
        wo.collect(out);
    }
};

// ---- FiLM -----------------------------------------------------------------

// Feature-wise linear modulation driven by a conditioning vector. Generators
// are zero-initialized so the layer starts as the identity.
struct FilmLayer {
    Linear to_gamma, to_beta;

    FilmLayer() = default;

    FilmLayer(const std::string& prefix, std::size_t cond_dim, std::size_t width, Rng& rng)
        : to_gamma(prefix + ".gamma", cond_dim, width, rng, /*zero_init=*/true),
          to_beta(prefix + ".beta", cond_dim, width, rng, /*zero_init=*/true) {}

    // x: [N, width], cond: [1, cond_dim]
    Value operator()(Graph& g, Value x, Value cond) {
        Value gamma = add_const(to_gamma(g, cond), 1.0);  // [1, width]
        Value beta = to_beta(g, cond);
        return add(mul(x, gamma), beta);
    }

    void collect(std::vector<Param*>& out) {
        to_gamma.collect(out);
        to_beta.collect(out);
    }
};

// Raw FiLM application for externally produced gamma/beta rows.
inline Value film_modulate(Value x, Value gamma_row, Value beta_row) {
    return add(mul(x, gamma_row), beta_row);
}

// ---- feed-forward block ------------------------------------------------------

struct FeedForward {
    Linear l1, l2;

    FeedForward() = default;

    FeedForward(const std::string& prefix, std::size_t width, std::size_t mult, Rng& rng)
        : l1(prefix + ".l1", width, width * mult, rng), l2(prefix + ".l2", width * mult, width, rng) {}

    Value operator()(Graph& g, Value x) { return l2(g, silu(l1(g, x))); }

    void collect(std::vector<Param*>& out) {
        l1.collect(out);
        l2.collect(out);
    }
};

// ---- conv layer ------------------------------------------------------------

struct Conv2dLayer {
    Param w;  // [out, in, k, k]
    Param b;  // [out]
    std::size_t stride = 1;
    std::size_t pad = 1;

    Conv2dLayer() = default;

    Conv2dLayer(const std::string& prefix, std::size_t in, std::size_t out, std::size_t k,
                std::size_t stride_, Rng& rng)
        : w(prefix + ".w",
            Tensor::randn({out, in, k, k}, rng, 1.0 / std::sqrt(static_cast<double>(in * k * k)))),
          b(prefix + ".b", Tensor::zeros({out})),
          stride(stride_),
          pad(k / 2) {}

    Value operator()(Graph& g, Value x) { return conv2d(x, g.param(w), g.param(b), stride, pad); }

    void collect(std::vector<Param*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

// ---- positional encodings -----------------------------------------------------

// Interleaved sin/cos ladder; t=0 encodes to [0,1,0,1,...].
inline Tensor sinusoidal_encoding(double t, std::size_t dim) {
    if (dim % 2 != 0) throw std::invalid_argument("sinusoidal_encoding: dim must be even");
    Tensor out({dim});
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double omega = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                      static_cast<double>(half));
        out.data[2 * i] = std::sin(t * omega);
        out.data[2 * i + 1] = std::cos(t * omega);
    }
    return out;
}

// Per-token 1-D ladder for a sequence: [n, dim].
inline Tensor sinusoidal_sequence(std::size_t n, std::size_t dim) {
    Tensor out({n, dim});
    for (std::size_t i = 0; i < n; ++i) {
        Tensor row = sinusoidal_encoding(static_cast<double>(i), dim);
        std::copy(row.data.begin(), row.data.end(), out.data.begin() + i * dim);
    }
    return out;
}

// 2-D grid encoding: first half of the channels encodes x, second half y.
inline Tensor sinusoidal_grid(std::size_t h, std::size_t w, std::size_t dim) {
    if (dim % 4 != 0) throw std::invalid_argument("sinusoidal_grid: dim must be divisible by 4");
    const std::size_t half = dim / 2;
    Tensor out({h * w, dim});
    for (std::size_t y = 0; y < h; ++y) {
        Tensor ey = sinusoidal_encoding(static_cast<double>(y), half);
        for (std::size_t x = 0; x < w; ++x) {
            Tensor ex = sinusoidal_encoding(static_cast<double>(x), half);
            double* row = out.data.data() + (y * w + x) * dim;
            std::copy(ex.data.begin(), ex.data.end(), row);
            std::copy(ey.data.begin(), ey.data.end(), row + half);
        }
    }
    return out;
}

}  // namespace sdlb
