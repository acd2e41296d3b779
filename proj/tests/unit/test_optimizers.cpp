#include <gtest/gtest.h>

#include <cmath>

#include "gnlab/errors.hpp"
#include "gnlab/linalg.hpp"
#include "gnlab/optimizers.hpp"
#include "gnlab/tree_optimizer.hpp"
#include "helpers.hpp"

using namespace gnlab;

namespace {

std::vector<double> singular_values(const Tensor& m) {
    const SymEig e = sym_eig(matmul(m, m, true, false));
    std::vector<double> s;
    for (std::size_t i = 0; i < e.eigenvalues.numel(); ++i) s.push_back(std::sqrt(std::max(0.0, e.eigenvalues[i])));
    return s;
}

// Quintic applied to one singular value.
double ns_scalar(double s, int iters) {
    for (int k = 0; k < iters; ++k) s = kNsA * s + kNsB * s * s * s + kNsC * s * s * s * s * s;
    return s;
}

Tensor rotation(double angle) {
    return Tensor::matrix({{std::cos(angle), -std::sin(angle)}, {std::sin(angle), std::cos(angle)}});
}

}  // namespace

TEST(AdamW, ZeroGradientIsPureDecay) {
    Tensor w = Tensor::matrix({{1, -2}, {3, 0.5}});
    const Tensor w0 = w;
    AdamSlot slot;
    AdamWParams p;
    p.lr = 0.1;
    p.weight_decay = 0.01;
    adamw_step(w, Tensor({2, 2}), slot, p);
    EXPECT_LE(max_abs_diff(w, w0 * (1 - 0.1 * 0.01)), 1e-15);
    EXPECT_EQ(slot.t, 1u);
}

TEST(AdamW, FirstStepIsSignedLr) {
    // mhat = g, vhat = g^2 after bias correction
    Tensor w({1, 3});
    AdamSlot slot;
    AdamWParams p;
    p.lr = 0.05;
    adamw_step(w, Tensor::matrix({{2, -0.3, 7}}), slot, p);
    EXPECT_NEAR(w[0], -0.05, 1e-8);
    EXPECT_NEAR(w[1], 0.05, 1e-8);
    EXPECT_NEAR(w[2], -0.05, 1e-8);
}

TEST(AdamW, ConstantGradientGivesConstantDirection) {
    Tensor w({1, 2});
    AdamSlot slot;
    AdamWParams p;
    p.beta1 = p.beta2 = 0.9;
    const Tensor g = Tensor::matrix({{0.4, -1.2}});
    Tensor prev = w;
    double ratio = 0.0;
    for (int k = 0; k < 5; ++k) {
        adamw_step(w, g, slot, p);
        const Tensor d = w - prev;
        if (k == 0) ratio = d[0] / d[1];
        EXPECT_NEAR(d[0] / d[1], ratio, 1e-12);
        EXPECT_NEAR(ratio, -1.0, 1e-7);
        prev = w;
    }
}

TEST(AdamW, NonFiniteUpdateNamesParameter) {
    Tensor w({1, 1});
    AdamSlot slot;
    try {
        adamw_step(w, Tensor::matrix({{std::nan("")}}), slot, AdamWParams{}, "block0.attn.wq");
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("block0.attn.wq"), std::string::npos);
    }
}

TEST(AdamW, Pure) {
    const Tensor g = testutil::random_tensor({3, 4}, 1);
    Tensor w1 = testutil::random_tensor({3, 4}, 2), w2 = w1;
    AdamSlot s1, s2;
    adamw_step(w1, g, s1, AdamWParams{});
    adamw_step(w2, g, s2, AdamWParams{});
    EXPECT_EQ(w1, w2);
    EXPECT_EQ(s1.m, s2.m);
    EXPECT_EQ(s1.v, s2.v);
}

TEST(NewtonSchulz, MatchesScalarIterationOnSingularValues) {
    const Tensor m = Tensor::matrix({{3, 0}, {0, 1}});
    const Tensor o = newton_schulz(m, 5);
    const double f = std::sqrt(10.0);
    EXPECT_NEAR(o(0, 0), ns_scalar(3 / f, 5), 1e-12);
    EXPECT_NEAR(o(1, 1), ns_scalar(1 / f, 5), 1e-12);
    EXPECT_NEAR(o(0, 1), 0.0, 1e-15);
    for (double s : singular_values(o)) {
        EXPECT_GE(s, 0.7);
        EXPECT_LE(s, 1.3);
    }
}

TEST(NewtonSchulz, RankPreserved) {
    const Tensor o = newton_schulz(Tensor::matrix({{1, 0}, {0, 0}}), 5);
    EXPECT_EQ(o(1, 1), 0.0);
    EXPECT_EQ(o(0, 1), 0.0);
    EXPECT_NEAR(o(0, 0), ns_scalar(1.0, 5), 1e-12);
}

TEST(NewtonSchulz, OrthogonalInputKeepsSingularVectors) {
    const Tensor q = rotation(0.7);
    const Tensor o = newton_schulz(q, 5);
    const double s = ns_scalar(1 / std::sqrt(2.0), 5);
    EXPECT_LE(max_abs_diff(o, q * s), 1e-12);
}

TEST(NewtonSchulz, ScaleInvariant) {
    const Tensor m = testutil::random_tensor({5, 3}, 4);
    EXPECT_LE(max_abs_diff(newton_schulz(m * 37.5), newton_schulz(m)), 1e-12);
}

TEST(NewtonSchulz, ZeroInputFlagged) {
    bool zero = false;
    EXPECT_TRUE(is_all_zero(newton_schulz(Tensor({3, 3}), 5, &zero)));
    EXPECT_TRUE(zero);
}

TEST(Muon, NoMomentumIsNsOfGradient) {
    const Tensor g = testutil::random_tensor({4, 3}, 3);
    Tensor w({4, 3});
    MomentumSlot slot;
    MuonParams p;
    p.lr = 0.2;
    p.momentum = 0.0;
    muon_step(w, g, slot, p);
    EXPECT_LE(max_abs_diff(w, newton_schulz(g) * -0.2), 1e-14);
}

TEST(Muon, OrthogonalGradient) {
    const Tensor g = rotation(-1.1);
    Tensor w({2, 2});
    MomentumSlot slot;
    MuonParams p;
    p.lr = 0.1;
    p.momentum = 0.0;
    muon_step(w, g, slot, p);
    EXPECT_LE(max_abs_diff(w, g * (-0.1 * ns_scalar(1 / std::sqrt(2.0), 5))), 1e-12);
}

TEST(Muon, MomentumPersistence) {
    const Tensor g = testutil::random_tensor({3, 3}, 5);
    Tensor w({3, 3});
    MomentumSlot slot;
    MuonParams p;
    p.momentum = 1.0;
    muon_step(w, g, slot, p);
    const Tensor first = w;
    muon_step(w, Tensor({3, 3}), slot, p);
    EXPECT_LE(max_abs_diff(w - first, first), 1e-15);
}

TEST(Muon, RejectsVectors) {
    Tensor w({3});
    MomentumSlot slot;
    EXPECT_THROW(muon_step(w, Tensor({3}), slot, MuonParams{}), ShapeError);
}

TEST(Muon, TreeFallbackForNonMatrices) {
    ParamTree t;
    t.add("w", Tensor({2, 2}), ParamRole::matrix, 0);
    t.add("b", Tensor({2}), ParamRole::vector, 0);
    t.add("e", Tensor({3, 2}), ParamRole::embedding, 0);
    OptimizerConfig c;
    c.kind = OptimizerKind::muon;
    c.lr = 0.1;
    c.momentum = 0.0;
    c.fallback_lr_ratio = 0.5;
    TreeOptimizer opt(c, t);
    ParamTree g = t.zeros_like();
    g[0].value = Tensor::identity(2);
    g[1].value = Tensor::vector({1, -1});
    g[2].value = Tensor({3, 2}, 2.0);
    opt.step(t, g);
    EXPECT_NEAR(t[0].value(0, 0), -0.1 * ns_scalar(1 / std::sqrt(2.0), 5), 1e-12);
    // AdamW first step at lr 0.1 * 0.5
    EXPECT_NEAR(t[1].value[0], -0.05, 1e-8);
    EXPECT_NEAR(t[1].value[1], 0.05, 1e-8);
    EXPECT_NEAR(t[2].value[0], -0.05, 1e-8);
}

TEST(Shampoo, IdentityFirstStep) {
    Tensor w({2, 2});
    ShampooSlot slot;
    ShampooParams p;
    p.lr = 0.3;
    p.damping = 0.0;
    shampoo_step(w, Tensor::identity(2), slot, p);
    EXPECT_LE(max_abs_diff(w, Tensor::identity(2) * -0.3), 1e-14);
}

TEST(Shampoo, ScalarIsSignUpdate) {
    for (double g : {-3.0, 0.25}) {
        Tensor w({1});
        ShampooSlot slot;
        ShampooParams p;
        p.lr = 0.1;
        p.damping = 0.0;
        shampoo_step(w, Tensor::vector({g}), slot, p);
        EXPECT_NEAR(w[0], g > 0 ? -0.1 : 0.1, 1e-14);
    }
}

TEST(Shampoo, ZeroGradientLeavesState) {
    Tensor w = testutil::random_tensor({2, 3}, 1);
    ShampooSlot slot;
    shampoo_step(w, testutil::random_tensor({2, 3}, 2), slot, ShampooParams{});
    const Tensor w1 = w, l = slot.l, r = slot.r;
    shampoo_step(w, Tensor({2, 3}), slot, ShampooParams{});
    EXPECT_EQ(w, w1);
    EXPECT_EQ(slot.l, l);
    EXPECT_EQ(slot.r, r);
}

TEST(Shampoo, AccumulatorsStayPsd) {
    for (std::size_t n = 2; n <= 8; n += 2) {
        Tensor w({n, n + 1});
        ShampooSlot slot;
        for (std::uint64_t k = 0; k < 6; ++k) {
            shampoo_step(w, testutil::random_tensor({n, n + 1}, n * 100 + k), slot, ShampooParams{});
            EXPECT_GE(sym_eig(slot.l).eigenvalues[0], -1e-8 * trace(slot.l));
            EXPECT_GE(sym_eig(slot.r).eigenvalues[0], -1e-8 * trace(slot.r));
        }
    }
}

TEST(Soap, DiagonalAccumulatorsReduceToAdamW) {
    SoapParams sp;
    sp.lr = 0.01;
    sp.beta1 = 0.9;
    sp.beta2 = 0.95;
    sp.weight_decay = 0.1;
    AdamWParams ap{sp.lr, sp.beta1, sp.beta2, sp.eps, sp.weight_decay};
    Tensor ws = Tensor::matrix({{0.5, 0}, {0, -1}}), wa = ws;
    SoapSlot ss;
    AdamSlot as;
    for (int k = 0; k < 6; ++k) {
        const Tensor g = Tensor::matrix({{3.0 + 0.1 * k, 0}, {0, 0.5 - 0.2 * k}});
        soap_step(ws, g, ss, sp);
        adamw_step(wa, g, as, ap);
        EXPECT_LE(max_abs_diff(ws, wa), 1e-10) << "step " << k;
    }
}

TEST(Soap, ZeroGradientAfterWarmStateDecays) {
    SoapParams sp;
    sp.weight_decay = 0.5;
    sp.lr = 0.1;
    Tensor w = testutil::random_tensor({2, 2}, 3);
    SoapSlot slot;
    soap_step(w, testutil::random_tensor({2, 2}, 4), slot, sp);
    // Moments keep pushing after G = 0, so compare against AdamW on the same history.
    AdamWParams ap{sp.lr, sp.beta1, sp.beta2, sp.eps, sp.weight_decay};
    Tensor w2 = w;
    SoapSlot s2 = slot;
    soap_step(w2, Tensor({2, 2}), s2, sp);
    EXPECT_TRUE(all_finite(w2));
    SoapParams nomom = sp;
    nomom.beta1 = 0.0;
    Tensor w3 = testutil::random_tensor({2, 2}, 3);
    SoapSlot s3;
    soap_step(w3, testutil::random_tensor({2, 2}, 4), s3, nomom);
    const Tensor before = w3;
    soap_step(w3, Tensor({2, 2}), s3, nomom);
    EXPECT_LE(max_abs_diff(w3, before * (1 - sp.lr * sp.weight_decay)), 1e-14);
    (void)ap;
}

TEST(Soap, RotationEquivariantFirstStep) {
    const Tensor g = Tensor::matrix({{1.0, 0.4}, {-0.3, 2.0}});
    const Tensor p = rotation(0.9);
    SoapParams sp;
    sp.lr = 0.05;
    // The rotated first gradient is diagonal; a larger eps keeps its
    // rounding-level off-diagonal entries from being normalized up.
    sp.eps = 1e-3;
    Tensor w1({2, 2}), w2({2, 2});
    SoapSlot s1, s2;
    soap_step(w1, g, s1, sp);
    soap_step(w2, matmul(p, g), s2, sp);
    EXPECT_LE(max_abs_diff(w2, matmul(p, w1)), 1e-12);
}

TEST(Ewa, Examples) {
    ParamTree zero;
    zero.add("x", Tensor::vector({0.0}), ParamRole::vector, 0);
    ParamTree one = zero;
    one[0].value[0] = 1.0;

    EwaState a{{}, 0.0};
    a.update(zero);
    a.update(one);
    EXPECT_EQ(a.average, one);

    EwaState b{{}, 0.5};
    b.update(zero);
    b.update(one);
    EXPECT_DOUBLE_EQ(b.average[0].value[0], 0.5);

    EwaState c{{}, 0.9};
    for (int k = 0; k < 5; ++k) c.update(one);
    EXPECT_EQ(c.average, one);
}

TEST(TreeOptimizer, StateRoundTrip) {
    for (auto kind : {OptimizerKind::adamw, OptimizerKind::muon, OptimizerKind::shampoo, OptimizerKind::soap}) {
        ParamTree t;
        t.add("w", testutil::random_tensor({3, 2}, 1), ParamRole::matrix, 0);
        t.add("b", testutil::random_tensor({2}, 2), ParamRole::vector, 0);
        OptimizerConfig c;
        c.kind = kind;
        TreeOptimizer a(c, t);
        ParamTree ta = t;
        a.step(ta, testutil::random_like(t, 3));
        TreeOptimizer b(c, t);
        b.load_state(a.state());
        ParamTree tb = ta;
        const ParamTree g = testutil::random_like(t, 4);
        a.step(ta, g);
        b.step(tb, g);
        EXPECT_EQ(ta, tb) << optimizer_name(kind);
        EXPECT_EQ(a.steps(), 2u);
    }
}
