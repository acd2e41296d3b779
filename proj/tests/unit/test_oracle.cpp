#include <gtest/gtest.h>

#include <cmath>

#include "gnlab/errors.hpp"
#include "gnlab/linalg.hpp"
#include "gnlab/oracle.hpp"
#include "helpers.hpp"

using namespace gnlab;

namespace {

oracle::ExplicitGn manual(Tensor g_mat, std::vector<double> g, double lambda) {
    oracle::ExplicitGn eg;
    eg.G = std::move(g_mat);
    eg.g = Tensor::vector(g);
    eg.lambda = lambda;
    return eg;
}

}  // namespace

TEST(ExplicitJacobian, LinearLayout) {
    const Model m = build_model(ModelConfig::mlp({3, 2}, false, LossKind::mse), 0);
    const Batch b = testutil::regression_batch(4, 3, 2, 1);
    const Tensor j = oracle::explicit_jacobian(*m.graph, m.params, b);
    ASSERT_EQ(j.shape(), (Shape{8, 6}));
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t k = 0; k < 2; ++k)
                    EXPECT_EQ(j(r * 2 + c, i * 2 + k), k == c ? b.features(r, i) : 0.0);
}

TEST(ExplicitJacobian, ZeroInput) {
    const Model m = build_model(ModelConfig::mlp({3, 2}, false, LossKind::mse), 0);
    const Batch b = Batch::regression(Tensor({4, 3}), Tensor({4, 2}));
    EXPECT_TRUE(is_all_zero(oracle::explicit_jacobian(*m.graph, m.params, b)));
}

TEST(ExplicitJacobian, ColumnsAgreeWithRows) {
    for (const char* kind : {"mlp_ce", "transformer_ce"}) {
        const auto inst = oracle::make_instance(kind, 4);
        EXPECT_LE(oracle::explicit_jacobian_both(*inst.graph, inst.params, inst.batch).max_abs_diff, 1e-10) << kind;
    }
}

TEST(ExplicitJacobian, SizeGuard) {
    const Model m = build_model(ModelConfig::mlp({50, 50}), 0);
    const Batch b = testutil::dense_batch(2, 50, 50, 0);
    EXPECT_THROW(oracle::explicit_jacobian(*m.graph, m.params, b), Error);
}

TEST(ExplicitGn, MseIsScaledGram) {
    const Model m = build_model(ModelConfig::mlp({3, 2}, false, LossKind::mse), 2);
    const Batch b = testutil::regression_batch(5, 3, 2, 2);
    const auto eg = oracle::explicit_gn(*m.graph, LossKind::mse, m.params, b, 0.0);
    const Tensor gram = matmul(eg.J, eg.J, true, false) * (2.0 / 10.0);
    EXPECT_LE(max_abs_diff(eg.G, gram), 1e-14);
}

TEST(ExplicitGn, SaturatedCeHasNoCurvature) {
    Model m = build_model(ModelConfig::mlp({3, 4}, false), 3);
    m.params[0].value *= 1e4;
    const Batch b = testutil::dense_batch(6, 3, 4, 3);
    const auto eg = oracle::explicit_gn(*m.graph, LossKind::cross_entropy, m.params, b, 0.0);
    EXPECT_LE(max_abs(eg.G), 1e-8);
}

TEST(ExplicitGn, Symmetric) {
    const auto inst = oracle::make_instance("transformer_ce", 5);
    const auto eg = oracle::explicit_gn(*inst.graph, inst.loss, inst.params, inst.batch);
    EXPECT_LE(frobenius_norm(eg.G - transpose(eg.G)), 1e-10);
    EXPECT_NEAR(eg.lambda, oracle::default_lambda(eg.G), 1e-18);
    EXPECT_NEAR(oracle::default_lambda(eg.G), 1e-4 * trace(eg.G) / static_cast<double>(eg.G.rows()), 1e-18);
}

TEST(ExplicitGn, PsdOverRandomModels) {
    for (const char* kind : {"mlp_ce", "mlp_mse"}) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto inst = oracle::make_instance(kind, seed);
            const auto eg = oracle::explicit_gn(*inst.graph, inst.loss, inst.params, inst.batch, 0.0);
            EXPECT_GE(oracle::psd_margin(eg.G), -1e-8) << kind << " seed " << seed;
        }
    }
}

TEST(GnSolve, Examples) {
    const auto d1 = oracle::gn_solve_flat(manual(Tensor::identity(3), {1, -2, 0.5}, 0.0));
    EXPECT_EQ(d1, (std::vector<double>{-1, 2, -0.5}));
    const auto d2 = oracle::gn_solve_flat(manual(Tensor::matrix({{1, 0}, {0, 4}}), {1, 4}, 0.0));
    EXPECT_NEAR(d2[0], -1.0, 1e-15);
    EXPECT_NEAR(d2[1], -1.0, 1e-15);
    const auto d3 = oracle::gn_solve_flat(manual(Tensor::matrix({{2, 1}, {1, 2}}), {0, 0}, 0.1));
    EXPECT_EQ(d3, (std::vector<double>{0, 0}));
}

TEST(GnSolve, ResidualAndPermutationInvariance) {
    const auto inst = oracle::make_instance("mlp_ce", 6);
    const auto eg = oracle::explicit_gn(*inst.graph, inst.loss, inst.params, inst.batch);
    const auto d = oracle::gn_solve_flat(eg);
    const std::size_t n = d.size();
    double res = 0, gn2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double r = eg.g[i] + eg.lambda * d[i];
        for (std::size_t j = 0; j < n; ++j) r += eg.G(i, j) * d[j];
        res += r * r;
        gn2 += eg.g[i] * eg.g[i];
    }
    EXPECT_LE(std::sqrt(res), 1e-8 * std::sqrt(gn2));

    // reverse the parameter order
    oracle::ExplicitGn rev = eg;
    for (std::size_t i = 0; i < n; ++i) {
        rev.g[i] = eg.g[n - 1 - i];
        for (std::size_t j = 0; j < n; ++j) rev.G(i, j) = eg.G(n - 1 - i, n - 1 - j);
    }
    const auto dr = oracle::gn_solve_flat(rev);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(dr[i], d[n - 1 - i], 1e-10 * std::max(1.0, std::abs(d[n - 1 - i])));
}

TEST(GnSolveEquivalence, LinearMseAndMlpCe) {
    for (const char* kind : {"linear_mse", "mlp_ce"}) {
        const auto inst = oracle::make_instance(kind, 0);
        const auto r = oracle::verify_gn_solve_equivalence(*inst.graph, inst.loss, inst.params, inst.batch);
        EXPECT_TRUE(r.passed) << kind << " cosine " << r.cosine << " gap " << r.objective_gap;
        EXPECT_GE(r.cosine, 0.999);
    }
}

TEST(GnSolveEquivalence, LargeDampingLimit) {
    const auto inst = oracle::make_instance("mlp_ce", 1);
    const auto eg0 = oracle::explicit_gn(*inst.graph, inst.loss, inst.params, inst.batch);
    const double lambda = 1e4 * std::max(1.0, trace(eg0.G));
    const auto r = oracle::verify_gn_solve_equivalence(*inst.graph, inst.loss, inst.params, inst.batch, lambda, 2000);
    double worst = 0.0;
    for (std::size_t i = 0; i < r.d_star.size(); ++i) {
        const double limit = -eg0.g[i] / lambda;
        if (std::abs(limit) < 1e-3 * max_abs(eg0.g) / lambda) continue;
        worst = std::max({worst, std::abs(r.d_star[i] / limit - 1.0), std::abs(r.d_inner[i] / limit - 1.0)});
    }
    EXPECT_LE(worst, 0.01);
}

TEST(FiniteDiff, QuadraticClosedForm) {
    const Tensor a = Tensor::matrix({{3, 1}, {1, 2}});
    ParamTree t;
    t.add("x", Tensor::vector({0.7, -1.3}), ParamRole::vector, 0);
    const auto fn = [&](const ParamTree& p) {
        const Tensor& x = p[0].value;
        double s = 0;
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j) s += 0.5 * x[i] * a(i, j) * x[j];
        return s;
    };
    const ParamTree g = oracle::finite_diff_grad(fn, t, 1e-5);
    EXPECT_NEAR(g[0].value[0], 3 * 0.7 - 1.3, 1e-9);
    EXPECT_NEAR(g[0].value[1], 0.7 - 2 * 1.3, 1e-9);
    EXPECT_THROW(oracle::finite_diff_grad(fn, t, 0.0), Error);
}

TEST(PsdMargin, Identity) { EXPECT_EQ(oracle::psd_margin(Tensor::identity(4)), 1.0); }

TEST(OracleSuite, AllChecksPass) {
    for (const auto& r : oracle::run_oracle_suite(0)) EXPECT_TRUE(r.passed) << r.name << " " << r.value << " " << r.detail;
}
