#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gnlab/batch.hpp"
#include "gnlab/losses.hpp"
#include "gnlab/models.hpp"
#include "gnlab/param_tree.hpp"
#include "gnlab/tape.hpp"

namespace gnlab::oracle {

/// Materialization limit on parameter count (G is n x n doubles).
inline constexpr std::size_t kMaxParams = 2000;

struct JacobianPair {
    Tensor by_columns;  // column i = J e_i via jvp
    Tensor by_rows;     // row j = e_j^T J via vjp
    double max_abs_diff = 0.0;
};

/// J = d output / d params, [output elements x n_params], built columnwise
/// from jvp.
Tensor explicit_jacobian(const ad::Graph& graph, const ParamTree& params, const Batch& batch);
/// Both constructions, for cross-checking.
JacobianPair explicit_jacobian_both(const ad::Graph& graph, const ParamTree& params, const Batch& batch);

struct ExplicitGn {
    Tensor J;    // [m x n]
    Tensor Hz;   // [m x m], block diagonal per output row
    Tensor G;    // [n x n] = J^T Hz J
    Tensor g;    // [n], gradient of the true loss
    double loss = 0.0;
    double lambda = 0.0;
};

/// Default damping: 1e-4 * trace(G) / n.
double default_lambda(const Tensor& G);

ExplicitGn explicit_gn(const ad::Graph& graph, LossKind loss, const ParamTree& params, const Batch& batch,
                       std::optional<double> lambda = std::nullopt);

/// -(G + lambda I)^{-1} g through a symmetric factorization, checked against
/// the residual bound |(G + lambda I) d + g| <= 1e-8 |g|.
std::vector<double> gn_solve_flat(const ExplicitGn& eg);
ParamTree gn_solve(const ExplicitGn& eg, const ParamTree& layout);

/// g^T d + 0.5 d^T (G + lambda I) d
double quadratic_model(const ExplicitGn& eg, const std::vector<double>& d);

/// Central differences of a scalar function of the parameters.
ParamTree finite_diff_grad(const std::function<double(const ParamTree&)>& fn, const ParamTree& params, double eps);

/// lambda_min / lambda_max of a symmetric matrix (1 for the identity).
double psd_margin(const Tensor& G);

/// Elementwise relative error |a - b| / max(|a|, |b|, floor * max|b|).
double max_relative_error(const ParamTree& a, const ParamTree& b, double floor = 1e-3);

struct GnSolveEquivalenceReport {
    std::string instance;
    double lambda = 0.0;
    double cosine = 0.0;
    double relative_norm_gap = 0.0;
    double objective_gap = 0.0;    // q(d_inner) - q(d*)
    double objective_range = 0.0;  // q(0) - q(d*)
    std::size_t inner_steps = 0;
    bool passed = false;
    std::vector<double> d_inner;
    std::vector<double> d_star;
};

/// Runs the matrix-free inner loop (gn_quadratic objective, loss_wd =
/// lambda, full batch, heavy-ball on estimated curvature) for inner_budget
/// steps and compares with the explicit damped solve. Passes when cosine >=
/// 0.999 and the objective gap <= 1e-6 * max(1, range).
GnSolveEquivalenceReport verify_gn_solve_equivalence(const ad::Graph& graph, LossKind loss, const ParamTree& params, const Batch& batch,
                                  std::optional<double> lambda = std::nullopt, std::size_t inner_budget = 20000);

/// Largest eigenvalue of G + lambda I by power iteration on matrix-free
/// products.
double estimate_curvature(const ad::Graph& graph, LossKind loss, const ParamTree& params, const Batch& batch,
                          double lambda, int iters = 200);

/// Small verification problems shared by tests and the `verify` command.
struct Instance {
    std::string name;
    ModelConfig config;
    std::shared_ptr<const ad::Graph> graph;
    ParamTree params;
    Batch batch;
    LossKind loss = LossKind::cross_entropy;
};

/// kind: linear_mse, linear_ce, mlp_ce, mlp_mse, transformer_ce
Instance make_instance(const std::string& kind, std::uint64_t seed);

struct CheckRecord {
    std::string name;
    bool passed = false;
    double value = 0.0;
    double threshold = 0.0;
    std::string detail;
};

std::vector<CheckRecord> run_oracle_suite(std::uint64_t seed = 0);

}  // namespace gnlab::oracle
