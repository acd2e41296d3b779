#include "gnlab/oracle.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "gnlab/data.hpp"
#include "gnlab/gauss_newton.hpp"
#include "gnlab/linalg.hpp"
#include "gnlab/tree_optimizer.hpp"

namespace gnlab::oracle {

namespace {

using Vec = Eigen::VectorXd;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void guard_size(const ParamTree& params) {
    if (params.num_params() > kMaxParams) {
        throw ConfigError("oracle size guard: " + std::to_string(params.num_params()) + " parameters exceeds " +
                          std::to_string(kMaxParams));
    }
}

ParamTree unit_direction(const ParamTree& layout, std::size_t flat_index) {
    ParamTree d = layout.zeros_like();
    for (auto& e : d.entries()) {
        if (flat_index < e.value.numel()) {
            e.value[flat_index] = 1.0;
            return d;
        }
        flat_index -= e.value.numel();
    }
    throw ShapeError("unit_direction: index out of range");
}

Mat to_mat(const Tensor& t) {
    return Eigen::Map<const Mat>(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

Vec to_vec(const std::vector<double>& v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }

double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) {
        s += x * x;
    }
    return std::sqrt(s);
}

}  // namespace

Tensor explicit_jacobian(const ad::Graph& graph, const ParamTree& params, const Batch& batch) {
    guard_size(params);
    const ad::Tape tape = ad::forward(graph, params, batch);
    const std::size_t m = tape.output_value().numel(), n = params.num_params();
    Tensor j(Shape{m, n});
    for (std::size_t c = 0; c < n; ++c) {
        const Tensor col = tape.jvp(unit_direction(params, c));
        for (std::size_t r = 0; r < m; ++r) {
            j(r, c) = col[r];
        }
    }
    return j;
}

JacobianPair explicit_jacobian_both(const ad::Graph& graph, const ParamTree& params, const Batch& batch) {
    JacobianPair out;
    out.by_columns = explicit_jacobian(graph, params, batch);
    const ad::Tape tape = ad::forward(graph, params, batch);
    const Tensor& z = tape.output_value();
    const std::size_t m = z.numel(), n = params.num_params();
    out.by_rows = Tensor(Shape{m, n});
    for (std::size_t r = 0; r < m; ++r) {
        Tensor e = Tensor::zeros_like(z);
        e[r] = 1.0;
        const std::vector<double> row = tape.vjp(e).flatten();
        std::copy(row.begin(), row.end(), out.by_rows.ptr() + r * n);
    }
    out.max_abs_diff = max_abs_diff(out.by_columns, out.by_rows);
    return out;
}

double default_lambda(const Tensor& G) { return 1e-4 * trace(G) / static_cast<double>(G.dim(0)); }

ExplicitGn explicit_gn(const ad::Graph& graph, LossKind loss, const ParamTree& params, const Batch& batch,
                       std::optional<double> lambda) {
    guard_size(params);
    ExplicitGn eg;
    eg.J = explicit_jacobian(graph, params, batch);
    const ad::Tape tape = ad::forward(graph, params, batch);
    const Tensor& z = tape.output_value();
    const LogitLoss at = LogitLoss::evaluate(loss, z, batch);
    const std::size_t m = z.numel();
    eg.Hz = Tensor(Shape{m, m});
    for (std::size_t c = 0; c < m; ++c) {
        Tensor e = Tensor::zeros_like(z);
        e[c] = 1.0;
        const Tensor col = at.hessian_vp(e);
        for (std::size_t r = 0; r < m; ++r) {
            eg.Hz(r, c) = col[r];
        }
    }
    eg.G = matmul(eg.J, matmul(eg.Hz, eg.J), true, false);
    const std::vector<double> g = tape.vjp(at.grad()).flatten();
    eg.g = Tensor(Shape{g.size()}, g);
    eg.loss = at.value();
    eg.lambda = lambda.value_or(default_lambda(eg.G));
    return eg;
}

std::vector<double> gn_solve_flat(const ExplicitGn& eg) {
    const std::size_t n = eg.G.dim(0);
    Mat a = to_mat(eg.G);
    a.diagonal().array() += eg.lambda;
    const Vec g = Eigen::Map<const Vec>(eg.g.ptr(), static_cast<Eigen::Index>(n));
    if (g.norm() == 0.0) {
        return std::vector<double>(n, 0.0);
    }
    const Eigen::LDLT<Mat> ldlt(a);
    if (ldlt.info() != Eigen::Success) {
        throw NumericalError("gn_solve: factorization failed");
    }
    const double scale = a.diagonal().cwiseAbs().maxCoeff();
    if (ldlt.vectorD().minCoeff() < -1e-8 * scale) {
        throw NumericalError("gn_solve: G + lambda I is indefinite beyond tolerance");
    }
    const Vec d = ldlt.solve(-g);
    const double residual = (a * d + g).norm();
    if (!(residual <= 1e-8 * g.norm())) {
        throw ConvergenceError("gn_solve: residual above 1e-8 |g|", residual);
    }
    return std::vector<double>(d.data(), d.data() + d.size());
}

ParamTree gn_solve(const ExplicitGn& eg, const ParamTree& layout) {
    ParamTree out = layout.zeros_like();
    out.unflatten(gn_solve_flat(eg));
    return out;
}

double quadratic_model(const ExplicitGn& eg, const std::vector<double>& d) {
    const Vec dv = to_vec(d);
    const Vec g = Eigen::Map<const Vec>(eg.g.ptr(), eg.g.numel());
    const Mat G = to_mat(eg.G);
    return g.dot(dv) + 0.5 * dv.dot(G * dv) + 0.5 * eg.lambda * dv.squaredNorm();
}

ParamTree finite_diff_grad(const std::function<double(const ParamTree&)>& fn, const ParamTree& params, double eps) {
    if (!(eps > 0.0)) {
        throw ConfigError("finite_diff_grad: eps must be positive");
    }
    ParamTree work = params;
    ParamTree grad = params.zeros_like();
    for (std::size_t i = 0; i < work.size(); ++i) {
        Tensor& w = work[i].value;
        for (std::size_t k = 0; k < w.numel(); ++k) {
            const double orig = w[k];
            w[k] = orig + eps;
            const double up = fn(work);
            w[k] = orig - eps;
            const double down = fn(work);
            w[k] = orig;
            grad[i].value[k] = (up - down) / (2.0 * eps);
        }
    }
    return grad;
}

double psd_margin(const Tensor& G) {
    const SymEig e = sym_eig(G);
    const double hi = e.eigenvalues[e.eigenvalues.numel() - 1];
    if (hi <= 0.0) {
        return hi == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
    }
    return e.eigenvalues[0] / hi;
}

double max_relative_error(const ParamTree& a, const ParamTree& b, double floor) {
    a.require_congruent(b, "max_relative_error");
    double scale = 0.0;
    for (const auto& e : b.entries()) {
        scale = std::max(scale, max_abs(e.value));
    }
    const double tiny = floor * scale;
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Tensor& x = a[i].value;
        const Tensor& y = b[i].value;
        for (std::size_t k = 0; k < x.numel(); ++k) {
            const double denom = std::max({std::abs(x[k]), std::abs(y[k]), tiny});
            if (denom > 0.0) {
                worst = std::max(worst, std::abs(x[k] - y[k]) / denom);
            }
        }
    }
    return worst;
}

double estimate_curvature(const ad::Graph& graph, LossKind loss, const ParamTree& params, const Batch& batch,
                          double lambda, int iters) {
    const gn::LinearizedPoint lp(graph, loss, params, batch);
    ParamTree v = params.zeros_like();
    NormalStream normal(0xC0FFEE);
    for (auto& e : v.entries()) {
        for (double& x : e.value.data()) {
            x = normal.next();
        }
    }
    v *= 1.0 / norm(v);
    double estimate = 0.0;
    for (int i = 0; i < iters; ++i) {
        ParamTree w = lp.pullback(lp.base_loss().hessian_vp(lp.tangent(v)));
        w.axpy(lambda, v);
        estimate = norm(w);
        if (estimate == 0.0) {
            return lambda;
        }
        v = w * (1.0 / estimate);
    }
    return estimate;
}

GnSolveEquivalenceReport verify_gn_solve_equivalence(const ad::Graph& graph, LossKind loss, const ParamTree& params, const Batch& batch,
                                  std::optional<double> lambda, std::size_t inner_budget) {
    GnSolveEquivalenceReport r;
    const ExplicitGn eg = explicit_gn(graph, loss, params, batch, lambda);
    r.lambda = eg.lambda;
    if (!(r.lambda > 0.0)) {
        throw ConfigError("verify_gn_solve_equivalence: damping must be positive");
    }
    r.d_star = gn_solve_flat(eg);

    const double big = 1.1 * estimate_curvature(graph, loss, params, batch, r.lambda);
    const double small = r.lambda;
    const double sb = std::sqrt(big), ss = std::sqrt(small);
    gn::InnerConfig ic;
    ic.objective = gn::InnerObjective::gn_quadratic;
    ic.optimizer = OptimizerConfig{};
    ic.optimizer.kind = OptimizerKind::sgd;
    ic.optimizer.lr = 4.0 / ((sb + ss) * (sb + ss));
    ic.optimizer.momentum = ((sb - ss) / (sb + ss)) * ((sb - ss) / (sb + ss));
    ic.n_steps = inner_budget;
    ic.b_inner = batch.b_seqs;
    ic.reg.loss_wd = r.lambda;
    ic.divergence_factor = std::numeric_limits<double>::infinity();
    gn::FixedBatches provider({batch});
    TreeOptimizer opt(ic.optimizer, params);
    const gn::InnerResult res = gn::inner_minimize(ic, graph, loss, params, params.zeros_like(), provider, opt,
                                                   [](std::size_t) { return 1.0; });
    r.inner_steps = res.steps_run;
    r.d_inner = (res.theta_hat - params).flatten();

    const double ni = norm2(r.d_inner), ns = norm2(r.d_star);
    double dotp = 0.0, diff2 = 0.0;
    for (std::size_t i = 0; i < r.d_star.size(); ++i) {
        dotp += r.d_inner[i] * r.d_star[i];
        diff2 += (r.d_inner[i] - r.d_star[i]) * (r.d_inner[i] - r.d_star[i]);
    }
    r.cosine = (ni > 0.0 && ns > 0.0) ? dotp / (ni * ns) : (ni == ns ? 1.0 : 0.0);
    r.relative_norm_gap = ns > 0.0 ? std::sqrt(diff2) / ns : std::sqrt(diff2);
    const double q_star = quadratic_model(eg, r.d_star);
    r.objective_gap = quadratic_model(eg, r.d_inner) - q_star;
    r.objective_range = -q_star;
    r.passed = r.cosine >= 0.999 && r.objective_gap <= 1e-6 * std::max(1.0, r.objective_range);
    return r;
}

Instance make_instance(const std::string& kind, std::uint64_t seed) {
    Instance inst;
    inst.name = kind;
    NormalStream normal(seed * 7919 + 17);
    auto features = [&](std::size_t rows, std::size_t cols) {
        Tensor x(Shape{rows, cols});
        for (double& v : x.data()) {
            v = normal.next();
        }
        return x;
    };
    auto labels = [&](std::size_t rows, std::size_t k) {
        std::vector<std::int32_t> y(rows);
        for (std::size_t i = 0; i < rows; ++i) {
            y[i] = static_cast<std::int32_t>(splitmix64(seed * 1000003 + i) % k);
        }
        return y;
    };
    const std::size_t rows = 8;
    if (kind == "linear_mse" || kind == "linear_ce" || kind == "mlp_ce" || kind == "mlp_mse") {
        const bool linear = kind.starts_with("linear");
        const bool ce = kind.ends_with("_ce");
        inst.loss = ce ? LossKind::cross_entropy : LossKind::mse;
        inst.config = linear ? ModelConfig::mlp({4, 3}, true, inst.loss) : ModelConfig::mlp({4, 6, 3}, true, inst.loss);
        Tensor x = features(rows, 4);
        inst.batch = ce ? Batch::dense(std::move(x), labels(rows, 3)) : Batch::regression(std::move(x), features(rows, 3));
    } else if (kind == "transformer_ce") {
        ModelConfig c;
        c.vocab_size = 5;
        c.hidden_size = 4;
        c.n_heads = 2;
        c.intermediate_size = 8;
        c.n_layers = 1;
        c.context_length = 4;
        c.init_std = 0.5;
        inst.config = c;
        inst.loss = LossKind::cross_entropy;
        Batch b;
        b.b_seqs = 2;
        b.context = 4;
        b.tokens = labels(8, 5);
        for (std::size_t i = 0; i < 8; ++i) {
            b.labels.push_back(i % 4 == 3 ? kMaskedLabel : b.tokens[i + 1]);
        }
        inst.batch = std::move(b);
    } else {
        throw ConfigError("unknown oracle instance '" + kind + "'");
    }
    Model m = build_model(inst.config, seed);
    inst.graph = m.graph;
    inst.params = std::move(m.params);
    return inst;
}

std::vector<CheckRecord> run_oracle_suite(std::uint64_t seed) {
    std::vector<CheckRecord> out;
    const std::vector<std::string> kinds{"linear_mse", "linear_ce", "mlp_ce", "mlp_mse", "transformer_ce"};
    for (const auto& kind : kinds) {
        const Instance inst = make_instance(kind, seed);
        const ad::Tape tape = ad::forward(*inst.graph, inst.params, inst.batch);

        // adjoint identity
        NormalStream normal(seed + 99);
        ParamTree d = inst.params.zeros_like();
        for (auto& e : d.entries()) {
            for (double& x : e.value.data()) {
                x = normal.next();
            }
        }
        Tensor u = Tensor::zeros_like(tape.output_value());
        for (double& x : u.data()) {
            x = normal.next();
        }
        const double lhs = dot(tape.jvp(d), u);
        const double rhs = dot(d, tape.vjp(u));
        const double adj = std::abs(lhs - rhs) / std::max(std::abs(lhs) + std::abs(rhs), 1e-300);
        out.push_back({kind + ".adjoint_identity", adj <= 1e-10, adj, 1e-10, ""});

        // gradient vs central differences
        auto loss_fn = [&](const ParamTree& p) { return model_loss(*inst.graph, inst.loss, p, inst.batch); };
        const LogitLoss at = LogitLoss::evaluate(inst.loss, tape.output_value(), inst.batch);
        const ParamTree grad = tape.vjp(at.grad());
        const double fd = max_relative_error(grad, finite_diff_grad(loss_fn, inst.params, 1e-5));
        out.push_back({kind + ".finite_difference", fd <= 1e-5, fd, 1e-5, ""});

        // Jacobian by columns vs rows
        const JacobianPair jp = explicit_jacobian_both(*inst.graph, inst.params, inst.batch);
        out.push_back({kind + ".jacobian_agreement", jp.max_abs_diff <= 1e-10, jp.max_abs_diff, 1e-10, ""});

        // PSD
        const ExplicitGn eg = explicit_gn(*inst.graph, inst.loss, inst.params, inst.batch);
        const double margin = psd_margin(eg.G);
        out.push_back({kind + ".gn_psd_margin", margin >= -1e-8, margin, -1e-8, ""});

        // solve residual
        const std::vector<double> sol = gn_solve_flat(eg);
        Vec res = to_mat(eg.G) * to_vec(sol) + eg.lambda * to_vec(sol) + Eigen::Map<const Vec>(eg.g.ptr(), eg.g.numel());
        const double gnorm = frobenius_norm(eg.g);
        const double rel = gnorm > 0.0 ? res.norm() / gnorm : res.norm();
        out.push_back({kind + ".gn_solve_residual", rel <= 1e-8, rel, 1e-8, ""});

        if (kind != "mlp_mse") {
            const GnSolveEquivalenceReport ar = verify_gn_solve_equivalence(*inst.graph, inst.loss, inst.params, inst.batch);
            out.push_back({kind + ".gn_solve_equivalence", ar.passed, ar.cosine, 0.999,
                           "objective_gap=" + std::to_string(ar.objective_gap)});
        }
    }

    // CE logit Hessian operator against the materialized matrix
    NormalStream normal(seed + 5);
    double worst = 0.0, ones = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t k = 64;
        Tensor logits(Shape{1, k});
        Tensor v(Shape{1, k});
        for (std::size_t i = 0; i < k; ++i) {
            logits[i] = 3.0 * normal.next();
            v[i] = normal.next();
        }
        const Tensor p = cross_entropy(logits, std::vector<std::int32_t>{0}).probs;
        Tensor h(Shape{k, k});
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                h(i, j) = (i == j ? p[i] : 0.0) - p[i] * p[j];
            }
        }
        const Tensor ref = matmul(h, v.reshaped({k, 1})).reshaped({1, k});
        worst = std::max(worst, max_abs_diff(ce_hessian_logits_vp(p, v), ref));
        ones = std::max(ones, max_abs(ce_hessian_logits_vp(p, Tensor(Shape{1, k}, 1.0))));
    }
    out.push_back({"ce_hessian.materialized", worst <= 1e-12, worst, 1e-12, ""});
    out.push_back({"ce_hessian.ones_null", ones <= 1e-12, ones, 1e-12, ""});
    return out;
}

}  // namespace gnlab::oracle
