#include "gnlab/linalg.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>

namespace gnlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_square(const Tensor& a, const char* op) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
        throw ShapeError(std::string(op) + " expects a square matrix, got " + shape_string(a.shape()));
    }
}

}  // namespace

double relative_asymmetry(const Tensor& a) {
    require_square(a, "relative_asymmetry");
    const std::size_t n = a.dim(0);
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            worst = std::max(worst, std::abs(a(i, j) - a(j, i)));
        }
    }
    const double scale = max_abs(a);
    return scale > 0.0 ? worst / scale : 0.0;
}

SymEig sym_eig(const Tensor& a) {
    require_square(a, "sym_eig");
    if (!all_finite(a)) {
        throw NumericalError("sym_eig: input contains non-finite values");
    }
    if (relative_asymmetry(a) > 1e-8) {
        throw NumericalError("sym_eig: input is not symmetric (relative asymmetry " +
                             std::to_string(relative_asymmetry(a)) + ")");
    }
    const auto n = static_cast<Eigen::Index>(a.dim(0));
    Eigen::Map<const RowMat> m(a.ptr(), n, n);
    const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
    if (solver.info() != Eigen::Success) {
        const double residual =
            (sym * solver.eigenvectors() - solver.eigenvectors() * solver.eigenvalues().asDiagonal()).norm();
        throw ConvergenceError("sym_eig: eigensolver did not converge", residual);
    }

    SymEig out{Tensor(Shape{a.dim(0)}), Tensor(Shape{a.dim(0), a.dim(0)})};
    for (Eigen::Index i = 0; i < n; ++i) {
        out.eigenvalues[static_cast<std::size_t>(i)] = solver.eigenvalues()(i);
        for (Eigen::Index j = 0; j < n; ++j) {
            out.eigenvectors(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) =
                solver.eigenvectors()(i, j);
        }
    }
    return out;
}

Tensor sym_matrix_power(const Tensor& a, double p, double damping) {
    if (damping < 0.0) {
        throw NumericalError("sym_matrix_power: damping must be non-negative");
    }
    const SymEig eig = sym_eig(a);
    const std::size_t n = a.dim(0);
    const double scale = max_abs(a);
    std::vector<double> powered(n);
    for (std::size_t i = 0; i < n; ++i) {
        double lambda = eig.eigenvalues[i];
        if (lambda < 0.0) {
            if (p < 0.0 && lambda < -1e-8 * scale) {
                throw NumericalError("sym_matrix_power: negative eigenvalue " + std::to_string(lambda) +
                                     " with negative exponent (input not PSD)");
            }
            lambda = 0.0;
        }
        const double shifted = lambda + damping;
        if (p < 0.0 && shifted <= 0.0) {
            throw NumericalError("sym_matrix_power: singular input with negative exponent and zero damping");
        }
        powered[i] = (p == 0.0) ? 1.0 : std::pow(shifted, p);
    }
    // Q diag(powered) Q^T
    Tensor scaled = eig.eigenvectors;
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            scaled(r, c) *= powered[c];
        }
    }
    return matmul(scaled, eig.eigenvectors, false, true);
}

}  // namespace gnlab
