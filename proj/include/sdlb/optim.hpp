#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "sdlb/graph.hpp"
#include "sdlb/tensor.hpp"

namespace sdlb {

// Linear warm-up to peak, cosine decay to the floor afterwards.
struct LrSchedule {
    double peak = 1e-3;
    double floor = 1e-6;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 1;

    double at(std::size_t step) const {
        if (warmup_steps > 0 && step < warmup_steps) {
            return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
        }
        if (step >= total_steps) return floor;
        const std::size_t span = total_steps - warmup_steps;
        if (span == 0) return floor;
        const double frac = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
        return floor + (peak - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
    }
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    LrSchedule lr;
};

// Bias-corrected Adam keyed by parameter identity. Moments are exposed so
// checkpoints can resume runs bit-exactly.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // Applies one update to every (param, grad) pair. Rejects non-finite
    // gradients and refuses to touch frozen parameters.
    void step(const std::vector<std::pair<Param*, Tensor>>& grads) {
        const double lr = cfg_.lr.at(step_);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_ + 1));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_ + 1));
        for (const auto& [p, grad] : grads) {
            if (p->frozen) {
                throw std::runtime_error("adam: attempted update of frozen parameter '" + p->name + "'");
            }
            if (!grad.all_finite()) {
                throw std::runtime_error("adam: non-finite gradient for parameter '" + p->name + "'");
            }
            if (!grad.same_shape(p->value)) {
                throw std::invalid_argument("adam: gradient shape " + shape_str(grad.shape) +
                                            " mismatches parameter '" + p->name + "' " +
                                            shape_str(p->value.shape));
            }
            Moments& m = moments(*p);
            for (std::size_t i = 0; i < grad.size(); ++i) {
                const double gv = grad.data[i];
                m.m.data[i] = cfg_.beta1 * m.m.data[i] + (1.0 - cfg_.beta1) * gv;
                m.v.data[i] = cfg_.beta2 * m.v.data[i] + (1.0 - cfg_.beta2) * gv * gv;
                const double mh = m.m.data[i] / bc1;
                const double vh = m.v.data[i] / bc2;
                p->value.data[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
        }
        ++step_;
    }

    // Convenience: pull grads for the given params out of a finished graph.
    void step_from_graph(Graph& g, const std::vector<Param*>& params) {
        std::vector<std::pair<Param*, Tensor>> grads;
        grads.reserve(params.size());
        for (Param* p : params) grads.push_back({p, g.grad_of(*p)});
        step(grads);
    }

    std::size_t step_count() const { return step_; }
    void set_step_count(std::size_t s) { step_ = s; }
    double current_lr() const { return cfg_.lr.at(step_); }
    const AdamConfig& config() const { return cfg_; }

    struct Moments {
        Tensor m;
        Tensor v;
    };

    Moments& moments(const Param& p) {
        auto it = state_.find(&p);
        if (it == state_.end()) {
            it = state_.emplace(&p, Moments{Tensor::zeros(p.value.shape), Tensor::zeros(p.value.shape)})
                     .first;
        } else if (!it->second.m.same_shape(p.value)) {
            throw std::invalid_argument("adam: stored moments mismatch parameter '" + p.name + "'");
        }
        return it->second;
    }

    bool has_moments(const Param& p) const { return state_.count(&p) != 0; }

private:
    AdamConfig cfg_;
    std::size_t step_ = 0;
    std::unordered_map<const Param*, Moments> state_;
};

}  // namespace sdlb
