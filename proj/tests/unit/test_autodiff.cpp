#include <gtest/gtest.h>

#include <cmath>

#include "gnlab/errors.hpp"
#include "gnlab/losses.hpp"
#include "gnlab/models.hpp"
#include "gnlab/tape.hpp"
#include "helpers.hpp"

using namespace gnlab;

namespace {

ParamTree scalar_tree(double v) {
    ParamTree t;
    t.add("theta", Tensor::vector({v}), ParamRole::vector, 0);
    return t;
}

// theta = (1, 2) as a [2x1] weight, no bias.
Model linear_model() {
    Model m = build_model(ModelConfig::mlp({2, 1}, false, LossKind::mse), 0);
    m.params[0].value = Tensor::matrix({{1}, {2}});
    return m;
}

ParamTree loss_grad(const Model& m, const ParamTree& params, const Batch& batch) {
    const ad::Tape tape = ad::forward(*m.graph, params, batch);
    const LogitLoss l = LogitLoss::evaluate(m.config.loss, tape.output_value(), batch);
    return tape.vjp(l.grad());
}

ParamTree central_difference(const Model& m, const ParamTree& params, const Batch& batch, double eps) {
    ParamTree g = params.zeros_like();
    ParamTree p = params;
    for (std::size_t i = 0; i < p.size(); ++i) {
        for (std::size_t k = 0; k < p[i].value.numel(); ++k) {
            const double x0 = p[i].value[k];
            p[i].value[k] = x0 + eps;
            const double up = model_loss(m, p, batch);
            p[i].value[k] = x0 - eps;
            const double down = model_loss(m, p, batch);
            p[i].value[k] = x0;
            g[i].value[k] = (up - down) / (2 * eps);
        }
    }
    return g;
}

struct Case {
    Model model;
    Batch batch;
};

Case mlp_case(std::uint64_t seed) {
    Model m = build_model(ModelConfig::mlp({4, 6, 3}), seed);
    return {m, testutil::dense_batch(5, 4, 3, seed)};
}

Case transformer_case(std::uint64_t seed) {
    const ModelConfig c = testutil::micro_transformer();
    return {build_model(c, seed), testutil::token_batch(2, c.context_length, c.vocab_size, seed)};
}

}  // namespace

TEST(Forward, LinearModel) {
    const Model m = linear_model();
    const Batch b = Batch::regression(Tensor::matrix({{3, 4}}), Tensor::matrix({{0}}));
    const ad::Tape tape = ad::forward(*m.graph, m.params, b);
    EXPECT_DOUBLE_EQ(tape.output_value()[0], 11.0);
}

TEST(Forward, ZeroWeightsLeaveBias) {
    Model m = build_model(ModelConfig::mlp({3, 2}, true, LossKind::mse), 1);
    m.params[0].value = Tensor({3, 2});
    m.params[1].value = Tensor::vector({0.5, -2.0});
    const Batch b = testutil::regression_batch(4, 3, 2, 9);
    const Tensor out = ad::forward(*m.graph, m.params, b).output_value();
    for (std::size_t r = 0; r < 4; ++r) {
        EXPECT_EQ(out(r, 0), 0.5);
        EXPECT_EQ(out(r, 1), -2.0);
    }
}

TEST(Forward, Deterministic) {
    const Case c = transformer_case(3);
    const ad::Tape a = ad::forward(*c.model.graph, c.model.params, c.batch);
    const ad::Tape b = ad::forward(*c.model.graph, c.model.params, c.batch);
    EXPECT_EQ(a.output_value(), b.output_value());
    const Tensor u = testutil::random_tensor(a.output_value().shape(), 5);
    EXPECT_EQ(a.vjp(u), b.vjp(u));
    EXPECT_EQ(a.vjp(u), a.vjp(u));
}

TEST(Forward, NonFiniteNamesOp) {
    Model m = linear_model();
    m.params[0].value[0] = std::numeric_limits<double>::infinity();
    const Batch b = Batch::regression(Tensor::matrix({{0, 4}}), Tensor::matrix({{0}}));
    EXPECT_THROW(ad::forward(*m.graph, m.params, b), NumericalError);
}

TEST(Vjp, OuterProduct) {
    // f = X W: dW = X^T U
    Model m = build_model(ModelConfig::mlp({3, 2}, false, LossKind::mse), 2);
    const Batch b = testutil::regression_batch(4, 3, 2, 4);
    const ad::Tape tape = ad::forward(*m.graph, m.params, b);
    const Tensor u = testutil::random_tensor({4, 2}, 8);
    const ParamTree g = tape.vjp(u);
    Tensor expect({3, 2});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            for (std::size_t r = 0; r < 4; ++r) expect(i, j) += b.features(r, i) * u(r, j);
    EXPECT_LE(max_abs_diff(g[0].value, expect), 1e-14);
}

TEST(Vjp, ZeroCotangent) {
    const Case c = mlp_case(0);
    const ad::Tape tape = ad::forward(*c.model.graph, c.model.params, c.batch);
    const ParamTree g = tape.vjp(Tensor(tape.output_value().shape()));
    for (const auto& e : g.entries()) EXPECT_TRUE(is_all_zero(e.value)) << e.name;
}

TEST(Vjp, ShapeMismatch) {
    const Case c = mlp_case(0);
    const ad::Tape tape = ad::forward(*c.model.graph, c.model.params, c.batch);
    EXPECT_THROW(tape.vjp(Tensor({2, 2})), ShapeError);
}

TEST(Vjp, Linear) {
    for (auto make : {mlp_case, transformer_case}) {
        const Case c = make(6);
        const ad::Tape tape = ad::forward(*c.model.graph, c.model.params, c.batch);
        const Shape& s = tape.output_value().shape();
        const Tensor u1 = testutil::random_tensor(s, 1), u2 = testutil::random_tensor(s, 2);
        const ParamTree lhs = tape.vjp(u1 + u2);
        const ParamTree rhs = tape.vjp(u1) + tape.vjp(u2);
        EXPECT_LE(max_abs_diff(lhs, rhs), 1e-12 * std::max(1.0, norm(lhs)));
        const ParamTree scaled = tape.vjp(3.0 * u1);
        EXPECT_LE(max_abs_diff(scaled, tape.vjp(u1) * 3.0), 1e-12 * std::max(1.0, norm(scaled)));
    }
}

TEST(Jvp, LinearModelDirection) {
    const Model m = linear_model();
    const Batch b = Batch::regression(Tensor::matrix({{3, 4}}), Tensor::matrix({{0}}));
    ParamTree d = m.params.zeros_like();
    d[0].value = Tensor::matrix({{-1}, {0.5}});
    EXPECT_DOUBLE_EQ(ad::jvp(*m.graph, m.params, b, d)[0], -1.0);
}

TEST(Jvp, ScalarSquareMatchesCentralDifference) {
    const testutil::SquareGraph g;
    const Batch none;
    const double t = ad::jvp(g, scalar_tree(3.0), none, scalar_tree(1.0))[0];
    const double h = 1e-5;
    const double fd = (std::pow(3.0 + h, 2) - std::pow(3.0 - h, 2)) / (2 * h);
    EXPECT_NEAR(t, fd, 1e-8);
    EXPECT_NEAR(t, 6.0, 1e-12);
}

TEST(Jvp, ZeroDirection) {
    const Case c = transformer_case(1);
    const Tensor t = ad::jvp(*c.model.graph, c.model.params, c.batch, c.model.params.zeros_like());
    EXPECT_TRUE(is_all_zero(t));
}

TEST(Jvp, AffineModelIsExact) {
    const Model m = build_model(ModelConfig::mlp({4, 3}, true, LossKind::mse), 5);
    const Batch b = testutil::regression_batch(6, 4, 3, 5);
    const ParamTree d = testutil::random_like(m.params, 11);
    const Tensor f0 = ad::forward(*m.graph, m.params, b).output_value();
    const Tensor f1 = ad::forward(*m.graph, m.params + d, b).output_value();
    EXPECT_LE(max_abs_diff(f1, f0 + ad::jvp(*m.graph, m.params, b, d)), 1e-12);
}

TEST(Jvp, IncongruentDirection) {
    const Case c = mlp_case(0);
    EXPECT_THROW(ad::jvp(*c.model.graph, c.model.params, c.batch, scalar_tree(1.0)), ShapeError);
}

TEST(Jvp, Linear) {
    for (auto make : {mlp_case, transformer_case}) {
        const Case c = make(7);
        const ParamTree d1 = testutil::random_like(c.model.params, 1), d2 = testutil::random_like(c.model.params, 2);
        const ad::Tape tape = ad::forward(*c.model.graph, c.model.params, c.batch);
        const Tensor lhs = tape.jvp(d1 + d2);
        const Tensor rhs = tape.jvp(d1) + tape.jvp(d2);
        EXPECT_LE(max_abs_diff(lhs, rhs), 1e-12 * std::max(1.0, frobenius_norm(lhs)));
        EXPECT_LE(max_abs_diff(tape.jvp(d1 * -2.5), tape.jvp(d1) * -2.5), 1e-12 * std::max(1.0, frobenius_norm(lhs)));
    }
}

TEST(Autodiff, AdjointIdentityBothFamilies) {
    for (auto make : {mlp_case, transformer_case}) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const Case c = make(seed);
            const ad::Tape tape = ad::forward(*c.model.graph, c.model.params, c.batch);
            const ParamTree d = testutil::random_like(c.model.params, 1000 + seed);
            const Tensor u = testutil::random_tensor(tape.output_value().shape(), 2000 + seed);
            const double lhs = dot(tape.jvp(d), u);
            const double rhs = dot(d, tape.vjp(u));
            EXPECT_LE(std::abs(lhs - rhs), 1e-10 * std::max(std::abs(lhs), std::abs(rhs))) << "seed " << seed;
        }
    }
}

TEST(Autodiff, GradientMatchesFiniteDifferences) {
    for (auto make : {mlp_case, transformer_case}) {
        const Case c = make(4);
        ASSERT_LE(c.model.params.num_params(), 5000u);
        const ParamTree g = loss_grad(c.model, c.model.params, c.batch);
        const ParamTree fd = central_difference(c.model, c.model.params, c.batch, 1e-5);
        double scale = 0.0;
        for (const auto& e : fd.entries()) scale = std::max(scale, max_abs(e.value));
        for (std::size_t i = 0; i < g.size(); ++i) {
            for (std::size_t k = 0; k < g[i].value.numel(); ++k) {
                const double a = g[i].value[k], b = fd[i].value[k];
                const double denom = std::max({std::abs(a), std::abs(b), 1e-3 * scale});
                EXPECT_LE(std::abs(a - b) / denom, 1e-5) << g[i].name << "[" << k << "]";
            }
        }
    }
}
