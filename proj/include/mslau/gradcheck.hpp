#pragma once

#include <functional>
#include <vector>

#include "mslau/autodiff.hpp"
#include "mslau/rng.hpp"

namespace mslau {

// Central finite-difference check of reverse-mode gradients. `fn` rebuilds
// the graph from leaf tensors on every call so perturbed evaluations see a
// fresh forward pass.
struct GradCheck {
    using Fn = std::function<ad::Var<double>(const std::vector<ad::Var<double>>&)>;

    static double rel_err(double a, double b) {
        const double scale = std::max({1.0, std::fabs(a), std::fabs(b)});
        return std::fabs(a - b) / scale;
    }

    // Returns the max relative error over every coordinate of the checked
    // leaves. `check` lists leaf indices to differentiate; empty = all.
    static double run(const Fn& fn, std::vector<Tensor<double>> leaves, std::vector<int> check = {},
                      double step = 1e-4) {
        if (check.empty())
            for (int i = 0; i < int(leaves.size()); ++i) check.push_back(i);

        auto eval = [&](const std::vector<Tensor<double>>& ts) {
            std::vector<ad::Var<double>> vars;
            vars.reserve(ts.size());
            for (const auto& t : ts) vars.push_back(ad::param(t));
            return std::make_pair(fn(vars), vars);
        };

        auto [root, vars] = eval(leaves);
        if (root.val().size() != 1) throw_contract("gradcheck: fn must return a scalar");
        ad::backward(root);

        double worst = 0.0;
        for (int li : check) {
            const Tensor<double>& analytic = vars[size_t(li)].grad();
            for (int64_t i = 0; i < leaves[size_t(li)].size(); ++i) {
                const double orig = leaves[size_t(li)][i];
                leaves[size_t(li)][i] = orig + step;
                const double fp = eval(leaves).first.val()[0];
                leaves[size_t(li)][i] = orig - step;
                const double fm = eval(leaves).first.val()[0];
                leaves[size_t(li)][i] = orig;
                const double numeric = (fp - fm) / (2.0 * step);
                worst = std::max(worst, rel_err(analytic[i], numeric));
            }
        }
        return worst;
    }
};

inline Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(s));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.next_range(lo, hi);
    return t;
}

template <typename T>
Tensor<T> random_tensor_t(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(s));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = T(rng.next_range(lo, hi));
    return t;
}

}  // namespace mslau
