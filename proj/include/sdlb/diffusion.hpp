#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdlb/rng.hpp"
#include "sdlb/tensor.hpp"

namespace sdlb {

// beta[t-1] and alpha_cum[t-1] hold step t in 1..T; alpha_bar(0) == 1 by
// convention.
struct NoiseSchedule {
    std::size_t T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_cum;

    double alpha_bar(std::size_t t) const {
        if (t > T) throw std::invalid_argument("alpha_bar: t=" + std::to_string(t) + " beyond T");
        return t == 0 ? 1.0 : alpha_cum[t - 1];
    }

    double beta_at(std::size_t t) const {
        if (t < 1 || t > T) throw std::invalid_argument("beta_at: t out of range [1,T]");
        return beta[t - 1];
    }
};

inline NoiseSchedule make_schedule(std::size_t T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha_cum.resize(T);
    double prod = 1.0;
    for (std::size_t i = 0; i < T; ++i) {
        const double frac = (T == 1) ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
        s.beta[i] = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - s.beta[i];
        s.alpha_cum[i] = prod;
    }
    return s;
}

// Closed-form forward sample: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
inline Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T) {
        throw std::invalid_argument("q_sample: t=" + std::to_string(t) + " out of range [1," +
                                    std::to_string(sched.T) + "]");
    }
    if (!x0.same_shape(eps)) {
        throw std::invalid_argument("q_sample: eps shape " + shape_str(eps.shape) +
                                    " mismatches x0 " + shape_str(x0.shape));
    }
    const double ab = sched.alpha_bar(t);
    const double c0 = std::sqrt(ab);
    const double c1 = std::sqrt(1.0 - ab);
    Tensor out(x0.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = c0 * x0.data[i] + c1 * eps.data[i];
    return out;
}

// Ancestral posterior step from t to t_prev (consecutive or strided). With
// consecutive steps this reduces to the textbook DDPM update. No noise is
// injected when t_prev == 0.
inline Tensor posterior_step(const Tensor& x_t, const Tensor& eps_hat, std::size_t t,
                             std::size_t t_prev, const NoiseSchedule& sched, const Tensor& noise) {
    if (t < 1 || t > sched.T) throw std::invalid_argument("posterior_step: t out of range");
    if (t_prev >= t) throw std::invalid_argument("posterior_step: need t_prev < t");
    const double ab_t = sched.alpha_bar(t);
    const double ab_p = sched.alpha_bar(t_prev);
    const double alpha_eff = ab_t / ab_p;          // product of per-step alphas over (t_prev, t]
    const double beta_eff = 1.0 - alpha_eff;
    const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha_eff);
    const double eps_coef = beta_eff / std::sqrt(1.0 - ab_t);
    const double var = beta_eff * (1.0 - ab_p) / (1.0 - ab_t);
    const double sigma = (t_prev == 0) ? 0.0 : std::sqrt(var);
    Tensor out(x_t.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] = inv_sqrt_alpha * (x_t.data[i] - eps_coef * eps_hat.data[i]) +
                      sigma * noise.data[i];
    }
    return out;
}

inline Tensor ddpm_step(const Tensor& x_t, const Tensor& eps_hat, std::size_t t,
                        const NoiseSchedule& sched, const Tensor& noise) {
    if (t < 1 || t > sched.T) throw std::invalid_argument("ddpm_step: t out of range [1,T]");
    return posterior_step(x_t, eps_hat, t, t - 1, sched, noise);
}

// DDIM update: predict x0, then move to t_prev mixing eps_hat and optional
// fresh noise scaled by eta.
inline Tensor ddim_step(const Tensor& x_t, const Tensor& eps_hat, std::size_t t, std::size_t t_prev,
                        const NoiseSchedule& sched, double eta, const Tensor& noise) {
    if (t < 1 || t > sched.T || t_prev >= t) {
        throw std::invalid_argument("ddim_step: need 0 <= t_prev < t <= T, got t=" +
                                    std::to_string(t) + " t_prev=" + std::to_string(t_prev));
    }
    const double ab_t = sched.alpha_bar(t);
    const double ab_p = sched.alpha_bar(t_prev);
    const double sigma =
        eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
    const double x0_coef = 1.0 / std::sqrt(ab_t);
    const double eps_in_x0 = std::sqrt(1.0 - ab_t);
    const double dir_coef = std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma));
    const double s_abp = std::sqrt(ab_p);
    Tensor out(x_t.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x0_hat = x0_coef * (x_t.data[i] - eps_in_x0 * eps_hat.data[i]);
        out.data[i] = s_abp * x0_hat + dir_coef * eps_hat.data[i] + sigma * noise.data[i];
    }
    return out;
}

// Classifier-free guidance with a shared null prediction and independent
// per-condition scales.
inline Tensor cfg_combine(const Tensor& eps_null, const Tensor& eps_txt, const Tensor& eps_exp,
                          double s_txt, double s_exp) {
    if (!eps_null.same_shape(eps_txt) || !eps_null.same_shape(eps_exp)) {
        throw std::invalid_argument("cfg_combine: operand shape mismatch");
    }
    // Grouped so that scale 1 with the other at 0 returns that prediction
    // bit-exactly.
    const double w_null = 1.0 - s_txt - s_exp;
    Tensor out(eps_null.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] = w_null * eps_null.data[i] + s_txt * eps_txt.data[i] + s_exp * eps_exp.data[i];
    }
    return out;
}

enum class SamplerKind { ddpm, ddim };
enum class CfgMode { decoupled, joint };

// Which conditioning channels a prediction should see.
enum class CondSelect { none, text, expr, both };

struct SamplerConfig {
    SamplerKind kind = SamplerKind::ddim;
    std::size_t steps = 100;
    double eta = 0.0;
    double s_txt = 0.0;
    double s_exp = 0.0;
    CfgMode cfg = CfgMode::decoupled;
    double joint_scale = 1.0;
    std::uint64_t seed = 0;

    void validate(std::size_t T) const {
        if (steps < 1 || steps > T) {
            throw std::invalid_argument("sampler: steps " + std::to_string(steps) +
                                        " must be in [1," + std::to_string(T) + "]");
        }
        if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("sampler: eta must be in [0,1]");
        if (s_txt < 0.0 || s_exp < 0.0) throw std::invalid_argument("sampler: scales must be >= 0");
    }
};

// Descending timestep subsequence with uniform stride; pairs (t, t_prev),
// last pair ends at 0.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_times(std::size_t T, std::size_t n) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    out.reserve(n);
    for (std::size_t i = n; i-- > 0;) {
        const std::size_t t = (i + 1) * T / n;
        const std::size_t t_prev = i * T / n;
        out.push_back({t, t_prev});
    }
    return out;
}

// Runs the reverse process from Gaussian noise. `predict` evaluates the
// denoiser under the requested conditioning channels; cfg_combine merges the
// per-condition predictions at each step.
template <class PredictFn>
Tensor sample_loop(PredictFn&& predict, const Shape& shape, const SamplerConfig& cfg,
                   const NoiseSchedule& sched, Rng& rng) {
    cfg.validate(sched.T);
    Tensor x = Tensor::randn(shape, rng);
    const auto times = sample_times(sched.T, cfg.steps);
    const bool use_txt = cfg.s_txt > 0.0;
    const bool use_exp = cfg.s_exp > 0.0;
    for (const auto& [t, t_prev] : times) {
        Tensor eps_hat;
        if (cfg.cfg == CfgMode::joint) {
            Tensor eps_null = predict(x, t, CondSelect::none);
            if (use_txt || use_exp) {
                CondSelect sel = (use_txt && use_exp) ? CondSelect::both
                                 : use_txt            ? CondSelect::text
                                                      : CondSelect::expr;
                Tensor eps_c = predict(x, t, sel);
                eps_hat = Tensor(eps_null.shape);
                for (std::size_t i = 0; i < eps_hat.size(); ++i) {
                    eps_hat.data[i] = eps_null.data[i] +
                                      cfg.joint_scale * (eps_c.data[i] - eps_null.data[i]);
                }
            } else {
                eps_hat = std::move(eps_null);
            }
        } else {
            Tensor eps_null = predict(x, t, CondSelect::none);
            Tensor eps_txt = use_txt ? predict(x, t, CondSelect::text) : eps_null;
            Tensor eps_exp = use_exp ? predict(x, t, CondSelect::expr) : eps_null;
            eps_hat = cfg_combine(eps_null, eps_txt, eps_exp, use_txt ? cfg.s_txt : 0.0,
                                  use_exp ? cfg.s_exp : 0.0);
        }
        Tensor noise = Tensor::zeros(shape);
        const bool stochastic =
            (cfg.kind == SamplerKind::ddpm) || (cfg.kind == SamplerKind::ddim && cfg.eta > 0.0);
        if (stochastic && t_prev > 0) noise = Tensor::randn(shape, rng);
        if (cfg.kind == SamplerKind::ddpm) {
            x = posterior_step(x, eps_hat, t, t_prev, sched, noise);
        } else {
            x = ddim_step(x, eps_hat, t, t_prev, sched, cfg.eta, noise);
        }
    }
    return x;
}

}  // namespace sdlb
