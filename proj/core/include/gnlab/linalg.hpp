#pragma once

#include "gnlab/tensor.hpp"

namespace gnlab {

struct SymEig {
    Tensor eigenvalues;   // [n], ascending
    Tensor eigenvectors;  // [n x n], column i pairs with eigenvalues[i]
};

/// Eigendecomposition of a symmetric matrix. The input is symmetrized as
/// (A + A^T) / 2 first; asymmetry beyond 1e-8 relative is rejected.
SymEig sym_eig(const Tensor& a);

/// Q (Lambda + damping I)^p Q^T for a symmetric PSD matrix.
///
/// Eigenvalues in (-1e-8 ||a||, 0) are treated as round-off and clamped to
/// zero. For p < 0 a more negative eigenvalue, or a non-positive shifted
/// eigenvalue, raises NumericalError.
Tensor sym_matrix_power(const Tensor& a, double p, double damping = 0.0);

/// Largest absolute deviation from symmetry, relative to max |a_ij|.
double relative_asymmetry(const Tensor& a);

}  // namespace gnlab
