#pragma once

// Finite-difference gradient oracle for tests. Rebuilds the loss graph from
// persistent leaf nodes, compares analytic gradients against central
// differences (step 1e-5, double precision) per parameter array:
//   max_i |a_i - n_i| <= max(rtol * max(||a||_inf, ||n||_inf), atol)

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "whismm/autograd.hpp"

namespace testsupport {

using whismm::Tensor;
namespace ag = whismm::ag;

struct GradCheckReport {
    double max_rel = 0.0;     // worst |a-n| / max(scale, atol/rtol)
    std::string worst;        // parameter name of the worst deviation
    bool ok = true;
    std::string detail;
};

inline GradCheckReport check_gradients(
    const std::vector<std::pair<std::string, ag::NodePtr<double>>>& params,
    const std::function<ag::NodePtr<double>()>& build, double step = 1e-5, double rtol = 1e-4,
    double atol = 1e-8) {
    // Analytic pass.
    for (auto& [_, p] : params) p->grad = Tensor<double>();
    auto loss = build();
    ag::backward(loss);
    std::map<std::string, Tensor<double>> analytic;
    for (auto& [name, p] : params) {
        analytic[name] = p->grad.data.empty() ? Tensor<double>::zeros(p->value.shape) : p->grad;
    }

    GradCheckReport rep;
    for (auto& [name, p] : params) {
        const Tensor<double>& a = analytic[name];
        double max_abs_diff = 0.0, a_inf = 0.0, n_inf = 0.0;
        for (size_t i = 0; i < p->value.numel(); ++i) {
            double orig = p->value.data[i];
            p->value.data[i] = orig + step;
            double fp = build()->value.data[0];
            p->value.data[i] = orig - step;
            double fm = build()->value.data[0];
            p->value.data[i] = orig;
            double numeric = (fp - fm) / (2.0 * step);
            max_abs_diff = std::max(max_abs_diff, std::abs(a.data[i] - numeric));
            a_inf = std::max(a_inf, std::abs(a.data[i]));
            n_inf = std::max(n_inf, std::abs(numeric));
        }
        double scale = std::max(a_inf, n_inf);
        double tol = std::max(rtol * scale, atol);
        double rel = max_abs_diff / std::max(scale, atol / rtol);
        if (rel > rep.max_rel) {
            rep.max_rel = rel;
            rep.worst = name;
        }
        if (max_abs_diff > tol) {
            rep.ok = false;
            rep.detail += name + ": |a-n|=" + std::to_string(max_abs_diff) +
                          " tol=" + std::to_string(tol) + "; ";
        }
    }
    return rep;
}

}  // namespace testsupport
