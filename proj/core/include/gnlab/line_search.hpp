#pragma once

#include <functional>
#include <vector>

#include "gnlab/param_tree.hpp"

namespace gnlab {

/// {2^(-i/2) : i = 0..max_exponent}, largest first.
std::vector<double> step_candidates(int max_exponent);

struct LineSearchResult {
    std::vector<double> alphas;
    std::vector<double> losses;  // +inf for non-finite evaluations
    double base_loss = 0.0;      // loss at alpha = 0
    double alpha_star = 0.0;
    bool rejected = false;
    ParamTree theta_next;
};

using LossFn = std::function<double(const ParamTree&)>;

/// Evaluates `loss` at theta_t + alpha (theta_hat - theta_t) for every
/// candidate and keeps the minimizer (ties go to the largest alpha). The step
/// is rejected (alpha* = 0, theta unchanged) when every candidate is
/// non-finite, or, with `reject_on_increase`, when the best candidate is
/// worse than alpha = 0.
LineSearchResult line_search(const LossFn& loss, const ParamTree& theta_t, const ParamTree& theta_hat,
                             const std::vector<double>& candidates, bool reject_on_increase = true);

}  // namespace gnlab
