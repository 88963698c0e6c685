#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sdlb/graph.hpp"
#include "sdlb/tensor.hpp"

namespace sdlb::testing {

// Central finite-difference gradient check. `build` must reconstruct the loss
// from the current parameter values on a fresh graph each call.
struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;
};

inline GradCheckResult check_gradients(const std::vector<Param*>& params,
                                       const std::function<double(Graph&)>& build_loss,
                                       double h = 1e-5) {
    Graph g;
    std::vector<Tensor> analytic;
    {
        // one analytic pass; build_loss binds params into g and returns loss value
        (void)build_loss(g);
    }
    for (Param* p : params) analytic.push_back(g.grad_of(*p));

    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Param* p = params[pi];
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value.data[i];
            p->value.data[i] = orig + h;
            Graph gp;
            const double lp = build_loss(gp);
            p->value.data[i] = orig - h;
            Graph gm;
            const double lm = build_loss(gm);
            p->value.data[i] = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double a = analytic[pi].data[i];
            const double denom = std::max({1e-6, std::abs(a), std::abs(numeric)});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = p->name + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                            " numeric=" + std::to_string(numeric);
            }
        }
    }
    return res;
}

// Variant where build_loss runs backward itself and we only need the loss
// scalar for FD probes.
inline double run_loss_with_backward(Graph& g, const std::function<Value(Graph&)>& build) {
    Value loss = build(g);
    g.backward(loss);
    return loss.v().data[0];
}

inline std::function<double(Graph&)> loss_fn(const std::function<Value(Graph&)>& build) {
    return [build](Graph& g) {
        Value loss = build(g);
        g.backward(loss);
        return loss.v().data[0];
    };
}

}  // namespace sdlb::testing
