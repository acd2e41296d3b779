#include "gnlab/line_search.hpp"

#include <cmath>
#include <limits>

namespace gnlab {

namespace {

double safe_loss(const LossFn& loss, const ParamTree& theta) {
    try {
        const double v = loss(theta);
        return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
    } catch (const NumericalError&) {
        return std::numeric_limits<double>::infinity();
    }
}

}  // namespace

std::vector<double> step_candidates(int max_exponent) {
    if (max_exponent < 0) {
        throw ConfigError("line search needs at least one candidate");
    }
    std::vector<double> out;
    for (int i = 0; i <= max_exponent; ++i) {
        out.push_back(std::exp2(-0.5 * i));
    }
    return out;
}

LineSearchResult line_search(const LossFn& loss, const ParamTree& theta_t, const ParamTree& theta_hat,
                             const std::vector<double>& candidates, bool reject_on_increase) {
    if (candidates.empty()) {
        throw ConfigError("line search needs at least one candidate");
    }
    theta_t.require_congruent(theta_hat, "line_search");
    LineSearchResult r;
    r.alphas = candidates;
    const ParamTree direction = theta_hat - theta_t;
    r.base_loss = safe_loss(loss, theta_t);
    double best = std::numeric_limits<double>::infinity();
    for (double alpha : candidates) {
        ParamTree theta = theta_t;
        theta.axpy(alpha, direction);
        const double v = safe_loss(loss, theta);
        r.losses.push_back(v);
        if (v < best || (v == best && std::isfinite(v) && alpha > r.alpha_star)) {
            best = v;
            r.alpha_star = alpha;
        }
    }
    if (!std::isfinite(best) || (reject_on_increase && best > r.base_loss)) {
        r.rejected = true;
        r.alpha_star = 0.0;
        r.theta_next = theta_t;
        return r;
    }
    r.theta_next = theta_t;
    r.theta_next.axpy(r.alpha_star, direction);
    return r;
}

}  // namespace gnlab
