#include "latentlab/projection.hpp"

#include <cmath>
#include <stdexcept>

#include "latentlab/rng.hpp"

namespace latentlab {

std::vector<double> cholesky_solve(Matrix2D A, std::vector<double> b) {
    int n = A.rows;
    if (A.cols != n || static_cast<int>(b.size()) != n)
        throw std::invalid_argument("cholesky_solve: bad shapes");
    // A = L L^T, lower triangle stored in place
    for (int j = 0; j < n; j++) {
        double d = A.at(j, j);
        for (int k = 0; k < j; k++) d -= A.at(j, k) * A.at(j, k);
        if (d <= 0.0) throw std::runtime_error("cholesky_solve: matrix not positive definite");
        d = std::sqrt(d);
        A.at(j, j) = d;
        for (int i = j + 1; i < n; i++) {
            double s = A.at(i, j);
            for (int k = 0; k < j; k++) s -= A.at(i, k) * A.at(j, k);
            A.at(i, j) = s / d;
        }
    }
    // forward then backward substitution
    for (int i = 0; i < n; i++) {
        double s = b[i];
        for (int k = 0; k < i; k++) s -= A.at(i, k) * b[k];
        b[i] = s / A.at(i, i);
    }
    for (int i = n - 1; i >= 0; i--) {
        double s = b[i];
        for (int k = i + 1; k < n; k++) s -= A.at(k, i) * b[k];
        b[i] = s / A.at(i, i);
    }
    return b;
}

double projection_residual(const Matrix2D &E, const std::vector<double> &e_new) {
    int t = E.rows, d = E.cols;
    if (t == 0) return l2_norm(e_new);
    if (static_cast<int>(e_new.size()) != d)
        throw std::invalid_argument("projection_residual: e_new length != E cols");

    // G = E E^T (t x t), c = E e_new
    Matrix2D G = matmul_nt(E, E);
    std::vector<double> c(t, 0.0);
    for (int i = 0; i < t; i++) {
        const double *er = E.row_ptr(i);
        double s = 0.0;
        for (int j = 0; j < d; j++) s += er[j] * e_new[j];
        c[i] = s;
    }
    double tr = 0.0;
    for (int i = 0; i < t; i++) tr += G.at(i, i);
    double lambda = 1e-10 * tr / t;
    if (lambda <= 0.0) lambda = 1e-300;  // all-zero E: solve is trivial anyway

    std::vector<double> w;
    for (int attempt = 0;; attempt++) {
        Matrix2D Greg = G;
        for (int i = 0; i < t; i++) Greg.at(i, i) += lambda;
        try {
            w = cholesky_solve(std::move(Greg), c);
            break;
        } catch (const std::runtime_error &) {
            if (attempt >= 4) throw;
            lambda = (lambda > 0.0 ? lambda * 1e3 : 1e-12);
        }
    }

    // residual = e_new - E^T w
    double s2 = 0.0;
    for (int j = 0; j < d; j++) {
        double r = e_new[j];
        for (int i = 0; i < t; i++) r -= E.at(i, j) * w[i];
        s2 += r * r;
    }
    return std::sqrt(s2);
}

double truncated_svd_project(const Matrix2D &E, const std::vector<double> &e_new, int k,
                             int max_iter, double tol) {
    int t = E.rows, d = E.cols;
    if (t == 0) return l2_norm(e_new);
    if (static_cast<int>(e_new.size()) != d)
        throw std::invalid_argument("truncated_svd_project: e_new length != E cols");
    if (k < 1) k = 1;
    if (k > std::min(t, d)) k = std::min(t, d);

    Matrix2D C = matmul_tn(E, E);  // d x d, eigenvectors = right singular vectors

    // deterministic start block
    SeededRng rng(fnv1a64("svd_block", 9) + static_cast<uint64_t>(t) * 1315423911ULL +
                  static_cast<uint64_t>(d) * 2654435761ULL + static_cast<uint64_t>(k));
    Matrix2D B(d, k);
    for (double &v : B.data) v = rng.normal();

    auto orthonormalize = [&](Matrix2D &M) {
        // modified Gram-Schmidt over columns; degenerate columns are re-seeded
        for (int j = 0; j < M.cols; j++) {
            for (int p = 0; p < j; p++) {
                double s = 0.0;
                for (int i = 0; i < M.rows; i++) s += M.at(i, p) * M.at(i, j);
                for (int i = 0; i < M.rows; i++) M.at(i, j) -= s * M.at(i, p);
            }
            double nrm = 0.0;
            for (int i = 0; i < M.rows; i++) nrm += M.at(i, j) * M.at(i, j);
            nrm = std::sqrt(nrm);
            if (nrm < 1e-300) {
                for (int i = 0; i < M.rows; i++) M.at(i, j) = rng.normal();
                j--;
                continue;
            }
            for (int i = 0; i < M.rows; i++) M.at(i, j) /= nrm;
        }
    };

    orthonormalize(B);
    std::vector<double> sigma(k, 0.0), sigma_prev(k, 1e300);
    bool converged = false;
    double scale = 0.0;
    for (int i = 0; i < d; i++) scale = std::max(scale, std::abs(C.at(i, i)));
    double sref = std::sqrt(std::max(scale, 1e-300));

    for (int it = 0; it < max_iter; it++) {
        Matrix2D CB = matmul(C, B);
        // Rayleigh estimates before the basis is replaced
        for (int j = 0; j < k; j++) {
            double lam = 0.0;
            for (int i = 0; i < d; i++) lam += B.at(i, j) * CB.at(i, j);
            sigma[j] = std::sqrt(std::max(lam, 0.0));
        }
        double diff = 0.0;
        for (int j = 0; j < k; j++) diff = std::max(diff, std::abs(sigma[j] - sigma_prev[j]));
        if (diff < tol * std::max(sref, 1.0)) {
            converged = true;
            break;
        }
        sigma_prev = sigma;
        B = std::move(CB);
        orthonormalize(B);
    }
    if (!converged)
        throw std::runtime_error("truncated_svd_project: power iteration did not converge after " +
                                 std::to_string(max_iter) + " iterations (t=" + std::to_string(t) +
                                 ", d=" + std::to_string(d) + ", k=" + std::to_string(k) + ")");

    // drop numerically-zero directions so the basis never exceeds rank(E)
    double smax = 0.0;
    for (int j = 0; j < k; j++) smax = std::max(smax, sigma[j]);
    double cut = smax * 1e-12;

    double s2 = 0.0;
    std::vector<double> resid = e_new;
    for (int j = 0; j < k; j++) {
        if (sigma[j] <= cut) continue;
        double proj = 0.0;
        for (int i = 0; i < d; i++) proj += B.at(i, j) * resid[i];
        for (int i = 0; i < d; i++) resid[i] -= proj * B.at(i, j);
    }
    for (int i = 0; i < d; i++) s2 += resid[i] * resid[i];
    return std::sqrt(s2);
}

}  // namespace latentlab
