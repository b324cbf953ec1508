#pragma once

// Central finite-difference oracle for reverse-mode gradients. Runs the whole
// graph in 64-bit; the forward callable must be a pure function of its inputs.

#include <functional>
#include <vector>

#include "vsyn/tensor.hpp"

namespace vsyn {

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool finite = true;
    size_t coords_checked = 0;

    bool passed(double tol) const { return finite && max_rel_err < tol; }
};

// rel_err = |analytic - numeric| / max(1, |analytic|, |numeric|)
inline double rel_err(double a, double n) {
    return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

// Checks d(f)/d(inputs[i]) for every i against (f(x+eps)-f(x-eps))/(2 eps).
// At most max_coords coordinates per input are probed (deterministically
// subsampled when an input is larger); 0 means all coordinates.
inline GradCheckReport grad_check(
    const std::function<DTensor(const std::vector<DTensor>&)>& f, std::vector<DTensor> inputs,
    double eps = 1e-4, size_t max_coords = 0, uint64_t coord_seed = 0) {
    GradCheckReport rep;

    for (auto& in : inputs) in.zero_grad();
    DTensor y = f(inputs);
    require(y.numel() == 1, "grad_check: function must be scalar-valued");
    y.backward();

    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs) {
        if (!in.requires_grad()) {
            analytic.emplace_back();
            continue;
        }
        std::vector<double> g(in.numel(), 0.0);
        if (!in.grad().empty()) g = in.grad();
        analytic.push_back(std::move(g));
        in.zero_grad();
    }

    for (size_t k = 0; k < inputs.size(); k++) {
        if (!inputs[k].requires_grad()) continue;
        const int64_t n = inputs[k].numel();
        std::vector<int64_t> coords;
        if (max_coords == 0 || static_cast<size_t>(n) <= max_coords) {
            coords.resize(n);
            for (int64_t i = 0; i < n; i++) coords[i] = i;
        } else {
            auto rng = make_rng(coord_seed, k + 1);
            std::uniform_int_distribution<int64_t> pick(0, n - 1);
            for (size_t i = 0; i < max_coords; i++) coords.push_back(pick(rng));
        }
        for (int64_t idx : coords) {
            double& slot = inputs[k].data()[idx];
            const double orig = slot;
            double fp, fm;
            {
                NoGradGuard ng;
                slot = orig + eps;
                fp = f(inputs).item();
                slot = orig - eps;
                fm = f(inputs).item();
                slot = orig;
            }
            const double numeric = (fp - fm) / (2 * eps);
            const double a = analytic[k][idx];
            if (!std::isfinite(numeric) || !std::isfinite(a)) {
                rep.finite = false;
                continue;
            }
            rep.max_rel_err = std::max(rep.max_rel_err, rel_err(a, numeric));
            rep.coords_checked++;
        }
    }
    return rep;
}

}  // namespace vsyn
