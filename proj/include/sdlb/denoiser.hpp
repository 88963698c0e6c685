#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdlb/checkpoint.hpp"
#include "sdlb/diffusion.hpp"
#include "sdlb/graph.hpp"
#include "sdlb/nn.hpp"
#include "sdlb/rng.hpp"
#include "sdlb/tensor.hpp"

namespace sdlb {

enum class AttnMode { decoupled, coupled };

inline std::string attn_mode_name(AttnMode m) {
    return m == AttnMode::decoupled ? "decoupled" : "coupled";
}

inline AttnMode attn_mode_from(const std::string& s) {
    if (s == "decoupled") return AttnMode::decoupled;
    if (s == "coupled") return AttnMode::coupled;
    throw std::invalid_argument("unknown attention mode '" + s + "'");
}

struct DenoiserConfig {
    std::size_t tokens = 14;
    std::size_t code_dim = 32;
    std::size_t hidden = 32;
    std::size_t blocks = 4;
    std::size_t heads = 4;
    std::size_t ff_mult = 4;
    std::size_t time_dim = 32;
    std::size_t text_raw_dim = 24;  // frozen stub embedding width
    std::size_t cond_dim = 32;      // width of text tokens and the expression token
    std::size_t text_max_len = 16;
    std::size_t expr_dim = 8;  // psi length
    std::size_t vocab_size = 0;
    std::uint64_t stub_seed = 0;  // world seed; freezes the embedding table
    AttnMode mode = AttnMode::decoupled;
    bool zero_null = false;
    double mask_prob = 0.1;

    nlohmann::json to_json() const {
        return {{"tokens", tokens},       {"code_dim", code_dim},   {"hidden", hidden},
                {"blocks", blocks},       {"heads", heads},         {"ff_mult", ff_mult},
                {"time_dim", time_dim},   {"text_raw_dim", text_raw_dim},
                {"cond_dim", cond_dim},   {"text_max_len", text_max_len},
                {"expr_dim", expr_dim},   {"vocab_size", vocab_size},
                {"stub_seed", stub_seed}, {"mode", attn_mode_name(mode)},
                {"zero_null", zero_null}, {"mask_prob", mask_prob}};
    }

    static DenoiserConfig from_json(const nlohmann::json& j) {
        DenoiserConfig c;
        c.tokens = j.at("tokens");
        c.code_dim = j.at("code_dim");
        c.hidden = j.at("hidden");
        c.blocks = j.at("blocks");
        c.heads = j.at("heads");
        c.ff_mult = j.at("ff_mult");
        c.time_dim = j.at("time_dim");
        c.text_raw_dim = j.at("text_raw_dim");
        c.cond_dim = j.at("cond_dim");
        c.text_max_len = j.at("text_max_len");
        c.expr_dim = j.at("expr_dim");
        c.vocab_size = j.at("vocab_size");
        c.stub_seed = j.at("stub_seed");
        c.mode = attn_mode_from(j.at("mode").get<std::string>());
        c.zero_null = j.at("zero_null");
        c.mask_prob = j.at("mask_prob");
        return c;
    }
};

// Frozen hash-seeded embedding table standing in for a pretrained text
// encoder; only the projection on top is trainable.
class TextEncoderStub {
public:
    TextEncoderStub() = default;

    TextEncoderStub(std::size_t vocab, std::size_t raw_dim, std::uint64_t seed) {
        Rng rng = derive_rng(seed, "text-stub");
        table_ = Tensor::randn({vocab, raw_dim}, rng);
    }

    std::size_t vocab_size() const { return table_.rank() == 2 ? table_.shape[0] : 0; }
    std::size_t raw_dim() const { return table_.rank() == 2 ? table_.shape[1] : 0; }

    // Raw rows for a token sequence; rejects unknown ids.
    Tensor rows(const std::vector<std::size_t>& ids) const {
        Tensor out({ids.size(), raw_dim()});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= vocab_size()) {
                throw std::invalid_argument("text encoder: unknown token id " + std::to_string(ids[i]));
            }
            std::copy(table_.data.begin() + ids[i] * raw_dim(),
                      table_.data.begin() + (ids[i] + 1) * raw_dim(), out.data.begin() + i * raw_dim());
        }
        return out;
    }

    // Training-free summary of a prompt in the frozen embedding space; used
    // by the condition-match metric.
    Tensor raw_summary(const std::vector<std::size_t>& ids) const {
        Tensor out({raw_dim()});
        if (ids.empty()) return out;
        Tensor rws = rows(ids);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            for (std::size_t d = 0; d < raw_dim(); ++d) out.data[d] += rws.data[i * raw_dim() + d];
        }
        for (double& v : out.data) v /= static_cast<double>(ids.size());
        return out;
    }

private:
    Tensor table_;
};

struct TextFeatures {
    Value seq;      // [L, cond_dim]
    Value summary;  // [cond_dim]
};

// One transformer decode block: pre-norm self-attention, per-condition
// cross-attention (or one coupled layer), FiLM on the time feature, then a
// pre-norm feed-forward. Cross-attention output projections start at zero so
// conditions are inert at init.
struct DenoiserBlock {
    AttnMode mode = AttnMode::decoupled;
    LayerNormLayer ln_self, ln_txt, ln_exp, ln_ff;
    MultiheadAttention self_attn, txt_attn, exp_attn;
    FilmLayer film;
    FeedForward ff;

    DenoiserBlock() = default;

    DenoiserBlock(const std::string& prefix, const DenoiserConfig& cfg, Rng& rng)
        : mode(cfg.mode),
          ln_self(prefix + ".ln_self", cfg.hidden),
          ln_txt(prefix + ".ln_txt", cfg.hidden),
          ln_exp(prefix + ".ln_exp", cfg.hidden),
          ln_ff(prefix + ".ln_ff", cfg.hidden),
          self_attn(prefix + ".self_attn", cfg.hidden, cfg.hidden, cfg.hidden, cfg.heads, rng),
          film(prefix + ".film", cfg.hidden, cfg.hidden, rng),
          ff(prefix + ".ff", cfg.hidden, cfg.ff_mult, rng) {
        if (mode == AttnMode::decoupled) {
            txt_attn = MultiheadAttention(prefix + ".txt_attn", cfg.hidden, cfg.cond_dim, cfg.hidden,
                                          cfg.heads, rng, /*zero_out=*/true);
            exp_attn = MultiheadAttention(prefix + ".exp_attn", cfg.hidden, cfg.cond_dim, cfg.hidden,
                                          cfg.heads, rng, /*zero_out=*/true);
        } else {
            txt_attn = MultiheadAttention(prefix + ".cond_attn", cfg.hidden, cfg.cond_dim, cfg.hidden,
                                          cfg.heads, rng, /*zero_out=*/true);
        }
    }

    Value operator()(Graph& g, Value h, Value f_txt, Value f_exp, Value f_time) {
        Value hs = ln_self(g, h);
        h = add(h, self_attn(g, hs, hs));
        if (mode == AttnMode::decoupled) {
            h = add(h, txt_attn(g, ln_txt(g, h), f_txt));
            h = add(h, exp_attn(g, ln_exp(g, h), f_exp));
        } else {
            Value cond = concat_axis0(f_txt, f_exp);
            h = add(h, txt_attn(g, ln_txt(g, h), cond));
        }
        h = film(g, h, f_time);
        h = add(h, ff(g, ln_ff(g, h)));
        return h;
    }

    void collect(std::vector<Param*>& out) {
        ln_self.collect(out);
        ln_txt.collect(out);
        self_attn.collect(out);
        txt_attn.collect(out);
        if (mode == AttnMode::decoupled) {
            ln_exp.collect(out);
            exp_attn.collect(out);
        }
        film.collect(out);
        ln_ff.collect(out);
        ff.collect(out);
    }
};

// Maps a noisy style-code token grid plus (time, text, expression) conditions
// to a noise prediction.
class StyleCodeDenoiser {
public:
    StyleCodeDenoiser() = default;

    StyleCodeDenoiser(DenoiserConfig cfg, Rng rng)
        : cfg_(cfg),
          stub_(cfg.vocab_size, cfg.text_raw_dim, cfg.stub_seed),
          in_proj_("denoiser.in_proj", cfg.code_dim, cfg.hidden, rng),
          pos_emb_("denoiser.pos_emb", Tensor::randn({cfg.tokens, cfg.hidden}, rng, 0.02)),
          time_mlp_("denoiser.time_mlp", cfg.time_dim, cfg.hidden, cfg.hidden, rng),
          text_proj_("denoiser.text_proj", cfg.text_raw_dim, cfg.hidden, cfg.cond_dim, rng),
          expr_mlp_("denoiser.expr_mlp", cfg.expr_dim, cfg.hidden, cfg.cond_dim, rng),
          null_text_("denoiser.null_text", cfg.zero_null ? Tensor::zeros({1, cfg.cond_dim})
                                                         : Tensor::randn({1, cfg.cond_dim}, rng, 0.1)),
          null_expr_("denoiser.null_expr", cfg.zero_null ? Tensor::zeros({1, cfg.cond_dim})
                                                         : Tensor::randn({1, cfg.cond_dim}, rng, 0.1)),
          final_ln_("denoiser.final_ln", cfg.hidden),
          out_proj_("denoiser.out_proj", cfg.hidden, cfg.code_dim, rng, /*zero_init=*/true) {
        if (cfg_.hidden % cfg_.heads != 0) {
            throw std::invalid_argument("denoiser: hidden must be divisible by heads");
        }
        blocks_.reserve(cfg_.blocks);
        for (std::size_t b = 0; b < cfg_.blocks; ++b) {
            blocks_.emplace_back("denoiser.block" + std::to_string(b), cfg_, rng);
        }
    }

    const DenoiserConfig& config() const { return cfg_; }
    const TextEncoderStub& stub() const { return stub_; }

    // Sinusoidal ladder through a 2-layer MLP; rejects t outside [1, T].
    Value encode_time(Graph& g, std::size_t t, std::size_t T) {
        if (t < 1 || t > T) {
            throw std::invalid_argument("encode_time: t=" + std::to_string(t) + " out of [1," +
                                        std::to_string(T) + "]");
        }
        Tensor enc = sinusoidal_encoding(static_cast<double>(t), cfg_.time_dim);
        return time_mlp_(g, reshape(g.leaf(enc), {1, cfg_.time_dim}));
    }

    // Frozen stub rows -> trainable projection; empty input yields the learned
    // null token sequence.
    TextFeatures encode_text(Graph& g, const std::vector<std::size_t>& ids) {
        if (ids.size() > cfg_.text_max_len) {
            throw std::invalid_argument("encode_text: sequence length " + std::to_string(ids.size()) +
                                        " exceeds max " + std::to_string(cfg_.text_max_len));
        }
        if (ids.empty()) {
            Value nt = g.param(null_text_);
            return TextFeatures{nt, mean_axis0(nt)};
        }
        Value seq = text_proj_(g, g.leaf(stub_.rows(ids)));
        return TextFeatures{seq, mean_axis0(seq)};
    }

    // psi -> one condition token.
    Value encode_expression(Graph& g, const Tensor& psi) {
        if (psi.size() != cfg_.expr_dim) {
            throw std::invalid_argument("encode_expression: psi length " + std::to_string(psi.size()) +
                                        " != " + std::to_string(cfg_.expr_dim));
        }
        return expr_mlp_(g, reshape(g.leaf(psi), {1, cfg_.expr_dim}));
    }

    Value null_text(Graph& g) { return g.param(null_text_); }
    Value null_expr(Graph& g) { return g.param(null_expr_); }

    // With probability p the whole condition collapses to its learned null.
    // Decisions for different conditions must use independent draws.
    Value mask_condition(Graph& g, Value f, Value null_tokens, double p, Rng& rng, bool* dropped) {
        if (p < 0.0 || p > 1.0) throw std::invalid_argument("mask_condition: p must be in [0,1]");
        const bool drop = rng.bernoulli(p);
        if (dropped) *dropped = drop;
        return drop ? null_tokens : f;
    }

    // Full forward pass; null conditions use the learned null tokens so the
    // unconditional path is a fixed function of (x_t, t).
    Value denoise_g(Graph& g, const Tensor& x_t, std::size_t t, std::size_t T,
                    const std::optional<std::vector<std::size_t>>& tokens,
                    const std::optional<Tensor>& psi) {
        if (x_t.rank() != 2 || x_t.shape[0] != cfg_.tokens || x_t.shape[1] != cfg_.code_dim) {
            throw std::invalid_argument("denoise: x_t shape " + shape_str(x_t.shape) +
                                        " does not match config [" + std::to_string(cfg_.tokens) +
                                        "," + std::to_string(cfg_.code_dim) + "]");
        }
        Value f_txt = tokens.has_value() && !tokens->empty() ? encode_text(g, *tokens).seq
                                                             : g.param(null_text_);
        Value f_exp = psi.has_value() ? encode_expression(g, *psi) : g.param(null_expr_);
        Value f_time = encode_time(g, t, T);
        Value h = add(in_proj_(g, g.leaf(x_t)), g.param(pos_emb_));
        for (auto& block : blocks_) h = block(g, h, f_txt, f_exp, f_time);
        return out_proj_(g, final_ln_(g, h));
    }

    Tensor denoise(const Tensor& x_t, std::size_t t, std::size_t T,
                   const std::optional<std::vector<std::size_t>>& tokens,
                   const std::optional<Tensor>& psi) {
        Graph g;
        return denoise_g(g, x_t, t, T, tokens, psi).v();
    }

    std::vector<Param*> params() {
        std::vector<Param*> out;
        in_proj_.collect(out);
        out.push_back(&pos_emb_);
        time_mlp_.collect(out);
        text_proj_.collect(out);
        expr_mlp_.collect(out);
        out.push_back(&null_text_);
        out.push_back(&null_expr_);
        for (auto& b : blocks_) b.collect(out);
        final_ln_.collect(out);
        out_proj_.collect(out);
        return out;
    }

    std::size_t parameter_count() { return param_count(params()); }

    Checkpoint to_checkpoint(nlohmann::json extra_meta = {}) {
        Checkpoint ck;
        nlohmann::json meta;
        meta["kind"] = "denoiser";
        meta["config"] = cfg_.to_json();
        for (auto& [k, v] : extra_meta.items()) meta[k] = v;
        ck.meta = meta.dump();
        for (Param* p : params()) ck.tensors.push_back({p->name, p->value});
        return ck;
    }

    static StyleCodeDenoiser from_checkpoint(const Checkpoint& ck) {
        nlohmann::json meta = nlohmann::json::parse(ck.meta);
        if (meta.at("kind") != "denoiser") {
            throw std::runtime_error("checkpoint is not a denoiser checkpoint");
        }
        DenoiserConfig cfg = DenoiserConfig::from_json(meta.at("config"));
        StyleCodeDenoiser d(cfg, Rng(0));
        d.load_params(ck);
        return d;
    }

    void load_params(const Checkpoint& ck) {
        for (Param* p : params()) {
            const Tensor& t = ck.require(p->name);
            if (!t.same_shape(p->value)) {
                throw std::runtime_error("checkpoint tensor '" + p->name + "' shape " +
                                         shape_str(t.shape) + " mismatches " +
                                         shape_str(p->value.shape));
            }
            p->value = t;
        }
    }

private:
    DenoiserConfig cfg_;
    TextEncoderStub stub_;
    Linear in_proj_;
    Param pos_emb_;
    Mlp2 time_mlp_;
    Mlp2 text_proj_;
    Mlp2 expr_mlp_;
    Param null_text_;
    Param null_expr_;
    std::vector<DenoiserBlock> blocks_;
    LayerNormLayer final_ln_;
    Linear out_proj_;
};

// Training objective: |eps - eps_theta(x_t, t, c_txt, c_exp)|^2 averaged over
// coordinates, differentiable through the denoiser.
inline Value diffusion_loss_g(Graph& g, StyleCodeDenoiser& denoiser, const Tensor& x0,
                              const std::optional<std::vector<std::size_t>>& tokens,
                              const std::optional<Tensor>& psi, std::size_t t, const Tensor& eps,
                              const NoiseSchedule& sched) {
    Tensor x_t = q_sample(x0, t, eps, sched);
    Value eps_hat = denoiser.denoise_g(g, x_t, t, sched.T, tokens, psi);
    return mse(eps_hat, g.leaf(eps));
}

inline double diffusion_loss(StyleCodeDenoiser& denoiser, const Tensor& x0,
                             const std::optional<std::vector<std::size_t>>& tokens,
                             const std::optional<Tensor>& psi, std::size_t t, const Tensor& eps,
                             const NoiseSchedule& sched) {
    Graph g;
    return diffusion_loss_g(g, denoiser, x0, tokens, psi, t, eps, sched).v().data[0];
}

}  // namespace sdlb
