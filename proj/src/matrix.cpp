#include "latentlab/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace latentlab {

bool Matrix2D::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

static void check_mul(const Matrix2D &a, const Matrix2D &b, int ak, int bk, const char *what) {
    if (ak != bk)
        throw std::invalid_argument(std::string(what) + ": inner dims " + std::to_string(ak) +
                                    " vs " + std::to_string(bk));
}

void matmul_into(const Matrix2D &a, const Matrix2D &b, Matrix2D &out) {
    check_mul(a, b, a.cols, b.rows, "matmul");
    out = Matrix2D(a.rows, b.cols);
    // i-k-j order: streams through contiguous rows of b and out.
    for (int i = 0; i < a.rows; i++) {
        double *o = out.row_ptr(i);
        const double *ar = a.row_ptr(i);
        for (int k = 0; k < a.cols; k++) {
            double av = ar[k];
            if (av == 0.0) continue;
            const double *br = b.row_ptr(k);
            for (int j = 0; j < b.cols; j++) o[j] += av * br[j];
        }
    }
}

Matrix2D matmul(const Matrix2D &a, const Matrix2D &b) {
    Matrix2D out;
    matmul_into(a, b, out);
    return out;
}

void matmul_acc(const Matrix2D &a, const Matrix2D &b, Matrix2D &out) {
    check_mul(a, b, a.cols, b.rows, "matmul_acc");
    if (out.rows != a.rows || out.cols != b.cols)
        throw std::invalid_argument("matmul_acc: bad output shape");
    for (int i = 0; i < a.rows; i++) {
        double *o = out.row_ptr(i);
        const double *ar = a.row_ptr(i);
        for (int k = 0; k < a.cols; k++) {
            double av = ar[k];
            if (av == 0.0) continue;
            const double *br = b.row_ptr(k);
            for (int j = 0; j < b.cols; j++) o[j] += av * br[j];
        }
    }
}

Matrix2D matmul_nt(const Matrix2D &a, const Matrix2D &b) {
    check_mul(a, b, a.cols, b.cols, "matmul_nt");
    Matrix2D out(a.rows, b.rows);
    for (int i = 0; i < a.rows; i++) {
        const double *ar = a.row_ptr(i);
        double *o = out.row_ptr(i);
        for (int j = 0; j < b.rows; j++) {
            const double *br = b.row_ptr(j);
            double s = 0.0;
            for (int k = 0; k < a.cols; k++) s += ar[k] * br[k];
            o[j] = s;
        }
    }
    return out;
}

void matmul_tn_acc(const Matrix2D &a, const Matrix2D &b, Matrix2D &out) {
    check_mul(a, b, a.rows, b.rows, "matmul_tn");
    if (out.rows != a.cols || out.cols != b.cols)
        throw std::invalid_argument("matmul_tn_acc: bad output shape");
    for (int k = 0; k < a.rows; k++) {
        const double *ar = a.row_ptr(k);
        const double *br = b.row_ptr(k);
        for (int i = 0; i < a.cols; i++) {
            double av = ar[i];
            if (av == 0.0) continue;
            double *o = out.row_ptr(i);
            for (int j = 0; j < b.cols; j++) o[j] += av * br[j];
        }
    }
}

Matrix2D matmul_tn(const Matrix2D &a, const Matrix2D &b) {
    Matrix2D out(a.cols, b.cols);
    matmul_tn_acc(a, b, out);
    return out;
}

Matrix2D transpose(const Matrix2D &a) {
    Matrix2D out(a.cols, a.rows);
    for (int i = 0; i < a.rows; i++)
        for (int j = 0; j < a.cols; j++) out.at(j, i) = a.at(i, j);
    return out;
}

void add_inplace(Matrix2D &a, const Matrix2D &b) {
    if (!a.same_shape(b)) throw std::invalid_argument("add_inplace: shape mismatch");
    for (size_t i = 0; i < a.data.size(); i++) a.data[i] += b.data[i];
}

void axpy_inplace(Matrix2D &a, double alpha, const Matrix2D &b) {
    if (!a.same_shape(b)) throw std::invalid_argument("axpy_inplace: shape mismatch");
    for (size_t i = 0; i < a.data.size(); i++) a.data[i] += alpha * b.data[i];
}

void scale_inplace(Matrix2D &a, double s) {
    for (double &v : a.data) v *= s;
}

Matrix2D sub(const Matrix2D &a, const Matrix2D &b) {
    if (!a.same_shape(b)) throw std::invalid_argument("sub: shape mismatch");
    Matrix2D out(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); i++) out.data[i] = a.data[i] - b.data[i];
    return out;
}

Matrix2D layer_norm(const Matrix2D &x, const Matrix2D &gain, const Matrix2D &bias, double eps) {
    if (gain.rows != 1 || bias.rows != 1 || gain.cols != x.cols || bias.cols != x.cols)
        throw std::invalid_argument("layer_norm: gain/bias must be 1 x cols");
    Matrix2D out(x.rows, x.cols);
    for (int i = 0; i < x.rows; i++) {
        const double *xr = x.row_ptr(i);
        double *o = out.row_ptr(i);
        double mu = 0.0;
        for (int j = 0; j < x.cols; j++) mu += xr[j];
        mu /= x.cols;
        double var = 0.0;
        for (int j = 0; j < x.cols; j++) {
            double d = xr[j] - mu;
            var += d * d;
        }
        var /= x.cols;
        double rstd = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < x.cols; j++)
            o[j] = (xr[j] - mu) * rstd * gain.data[j] + bias.data[j];
    }
    return out;
}

Matrix2D softmax_rows(const Matrix2D &x) {
    Matrix2D out(x.rows, x.cols);
    for (int i = 0; i < x.rows; i++) {
        const double *xr = x.row_ptr(i);
        double *o = out.row_ptr(i);
        double mx = xr[0];
        for (int j = 1; j < x.cols; j++) mx = std::max(mx, xr[j]);
        double z = 0.0;
        for (int j = 0; j < x.cols; j++) {
            o[j] = std::exp(xr[j] - mx);
            z += o[j];
        }
        double inv = 1.0 / z;
        for (int j = 0; j < x.cols; j++) o[j] *= inv;
    }
    return out;
}

double frobenius_norm(const Matrix2D &a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

double dot(const std::vector<double> &a, const std::vector<double> &b) {
    assert(a.size() == b.size());
    double s = 0.0;
    for (size_t i = 0; i < a.size(); i++) s += a[i] * b[i];
    return s;
}

double l2_norm(const std::vector<double> &a) { return std::sqrt(dot(a, a)); }

}  // namespace latentlab
