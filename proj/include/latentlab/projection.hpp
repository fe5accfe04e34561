#pragma once

#include <vector>

#include "latentlab/matrix.hpp"

namespace latentlab {

// L2 norm of the component of e_new orthogonal to the row span of E
// (E is t x d, rows are earlier latent tokens). Uses the normal equations
// (E E^T + lambda I) with a trace-scaled ridge so degenerate spans cannot
// blow up the solve; t = 0 returns |e_new|.
double projection_residual(const Matrix2D &E, const std::vector<double> &e_new);

// Same residual, but against the span of the top-k right singular vectors of
// E, via blocked power iteration on E^T E. Directions whose singular value is
// numerically zero are dropped, so k >= rank(E) reproduces the exact
// projection instead of leaking null-space directions.
// Throws std::runtime_error if the iteration has not converged after max_iter.
double truncated_svd_project(const Matrix2D &E, const std::vector<double> &e_new, int k,
                             int max_iter = 200, double tol = 1e-10);

// Solve A x = b for symmetric positive definite A (in-place Cholesky).
std::vector<double> cholesky_solve(Matrix2D A, std::vector<double> b);

}  // namespace latentlab
