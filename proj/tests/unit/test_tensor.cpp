#include <gtest/gtest.h>

#include <cmath>

#include "gnlab/errors.hpp"
#include "gnlab/linalg.hpp"
#include "gnlab/tensor.hpp"

using namespace gnlab;

TEST(Tensor, ConstructorChecksBufferLength) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
    Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
}

TEST(Tensor, MatmulIdentity) {
    const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    EXPECT_EQ(matmul(a, Tensor::identity(2)), a);
}

TEST(Tensor, MatmulColumn) {
    const Tensor c = matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5}, {6}}));
    EXPECT_EQ(c.shape(), (Shape{2, 1}));
    EXPECT_DOUBLE_EQ(c[0], 17.0);
    EXPECT_DOUBLE_EQ(c[1], 39.0);
}

TEST(Tensor, MatmulZero) {
    const Tensor z({3, 2});
    const Tensor c = matmul(z, Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
    EXPECT_TRUE(is_all_zero(c));
}

TEST(Tensor, MatmulShapeErrorNamesBothShapes) {
    try {
        matmul(Tensor({2, 3}), Tensor({2, 3}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    }
}

TEST(Tensor, MatmulTransposeFlags) {
    const Tensor a = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
    const Tensor b = Tensor::matrix({{1, 0}, {2, 1}, {0, 3}});
    EXPECT_EQ(matmul(a, b), matmul(transpose(a), transpose(b), true, true));
    EXPECT_EQ(matmul(a, a, false, true), matmul(a, transpose(a)));
}

TEST(Tensor, MatmulIsBitReproducible) {
    Tensor a({17, 23});
    Tensor b({23, 11});
    for (std::size_t i = 0; i < a.numel(); ++i) a[i] = std::sin(0.37 * static_cast<double>(i));
    for (std::size_t i = 0; i < b.numel(); ++i) b[i] = std::cos(0.11 * static_cast<double>(i));
    EXPECT_EQ(matmul(a, b), matmul(a, b));
}

TEST(Linalg, SymEigIdentity) {
    const SymEig e = sym_eig(Tensor::identity(2));
    EXPECT_DOUBLE_EQ(e.eigenvalues[0], 1.0);
    EXPECT_DOUBLE_EQ(e.eigenvalues[1], 1.0);
}

TEST(Linalg, SymEigDiagonal) {
    const SymEig e = sym_eig(Tensor::matrix({{16, 0}, {0, 81}}));
    EXPECT_NEAR(e.eigenvalues[0], 16.0, 1e-12);
    EXPECT_NEAR(e.eigenvalues[1], 81.0, 1e-12);
    EXPECT_NEAR(std::abs(e.eigenvectors(0, 0)), 1.0, 1e-12);
    EXPECT_NEAR(std::abs(e.eigenvectors(1, 1)), 1.0, 1e-12);
}

TEST(Linalg, SymEigCharacteristicPolynomial) {
    // (2 - l)^2 - 1 = 0  ->  l = 1, 3
    const SymEig e = sym_eig(Tensor::matrix({{2, 1}, {1, 2}}));
    EXPECT_NEAR(e.eigenvalues[0], 1.0, 1e-12);
    EXPECT_NEAR(e.eigenvalues[1], 3.0, 1e-12);
}

TEST(Linalg, SymEigReconstructs) {
    Tensor a({6, 6});
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) a(i, j) = std::cos(static_cast<double>(i * 7 + j * 3)) + std::cos(static_cast<double>(j * 7 + i * 3));
    const SymEig e = sym_eig(a);
    const Tensor& q = e.eigenvectors;
    const Tensor rec = matmul(matmul(q, Tensor::diag(e.eigenvalues.data())), q, false, true);
    EXPECT_LE(max_abs_diff(rec, a), 1e-6 * frobenius_norm(a));
    for (std::size_t k = 0; k < 6; ++k) {
        for (std::size_t i = 0; i < 6; ++i) {
            double av = 0.0;
            for (std::size_t j = 0; j < 6; ++j) av += a(i, j) * q(j, k);
            EXPECT_NEAR(av, e.eigenvalues[k] * q(i, k), 1e-6 * frobenius_norm(a));
        }
    }
    for (std::size_t k = 1; k < 6; ++k) EXPECT_LE(e.eigenvalues[k - 1], e.eigenvalues[k]);
}

TEST(Linalg, SymEigRejectsNonSquareAndAsymmetric) {
    EXPECT_THROW(sym_eig(Tensor({2, 3})), ShapeError);
    EXPECT_THROW(sym_eig(Tensor::matrix({{1, 2}, {0, 1}})), Error);
}

TEST(Linalg, MatrixPowerIdentity) {
    EXPECT_LE(max_abs_diff(sym_matrix_power(Tensor::identity(3), -0.25), Tensor::identity(3)), 1e-14);
}

TEST(Linalg, MatrixPowerScalarRoots) {
    const Tensor r = sym_matrix_power(Tensor::matrix({{16, 0}, {0, 81}}), -0.25);
    EXPECT_NEAR(r(0, 0), 0.5, 1e-12);
    EXPECT_NEAR(r(1, 1), 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(r(0, 1), 0.0, 1e-12);
}

TEST(Linalg, MatrixPowerDamped) {
    const Tensor r = sym_matrix_power(Tensor::matrix({{0, 0}, {0, 1}}), -0.25, 1e-4);
    EXPECT_NEAR(r(0, 0), std::pow(1e-4, -0.25), 1e-9);
    EXPECT_NEAR(r(1, 1), std::pow(1.0 + 1e-4, -0.25), 1e-12);
}

TEST(Linalg, MatrixPowerRejectsIndefinite) {
    EXPECT_THROW(sym_matrix_power(Tensor::matrix({{-1, 0}, {0, 1}}), -0.25), NumericalError);
}
