#pragma once

#include <cassert>
#include <cstddef>
#include <string>
#include <vector>

namespace latentlab {

// Dense row-major matrix of doubles. Small and boring on purpose: every
// model quantity in this project is one of these.
struct Matrix2D {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix2D() = default;
    Matrix2D(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {
        assert(r >= 0 && c >= 0);
    }

    static Matrix2D full(int r, int c, double v) {
        Matrix2D m(r, c);
        std::fill(m.data.begin(), m.data.end(), v);
        return m;
    }

    double &at(int r, int c) {
        assert(r >= 0 && r < rows && c >= 0 && c < cols);
        return data[static_cast<size_t>(r) * cols + c];
    }
    double at(int r, int c) const {
        assert(r >= 0 && r < rows && c >= 0 && c < cols);
        return data[static_cast<size_t>(r) * cols + c];
    }
    double *row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double *row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

    size_t numel() const { return data.size(); }
    bool same_shape(const Matrix2D &o) const { return rows == o.rows && cols == o.cols; }
    void set_zero() { std::fill(data.begin(), data.end(), 0.0); }

    std::vector<double> row_copy(int r) const {
        const double *p = row_ptr(r);
        return std::vector<double>(p, p + cols);
    }
    void set_row(int r, const std::vector<double> &v) {
        assert(static_cast<int>(v.size()) == cols);
        std::copy(v.begin(), v.end(), row_ptr(r));
    }

    bool all_finite() const;
};

// out = a * b, shapes (m,k)x(k,n). Throws on shape mismatch.
Matrix2D matmul(const Matrix2D &a, const Matrix2D &b);
void matmul_into(const Matrix2D &a, const Matrix2D &b, Matrix2D &out);
// out += a * b
void matmul_acc(const Matrix2D &a, const Matrix2D &b, Matrix2D &out);
// out = a * b^T, shapes (m,k)x(n,k) -> (m,n)
Matrix2D matmul_nt(const Matrix2D &a, const Matrix2D &b);
// out += a^T * b, shapes (k,m)x(k,n) -> (m,n). Accumulating form used for weight grads.
void matmul_tn_acc(const Matrix2D &a, const Matrix2D &b, Matrix2D &out);
Matrix2D matmul_tn(const Matrix2D &a, const Matrix2D &b);

Matrix2D transpose(const Matrix2D &a);
void add_inplace(Matrix2D &a, const Matrix2D &b);
void axpy_inplace(Matrix2D &a, double alpha, const Matrix2D &b);  // a += alpha*b
void scale_inplace(Matrix2D &a, double s);
Matrix2D sub(const Matrix2D &a, const Matrix2D &b);

// Row-wise layer norm with learned gain/bias (both 1 x c).
Matrix2D layer_norm(const Matrix2D &x, const Matrix2D &gain, const Matrix2D &bias, double eps);

// Numerically stable row-wise softmax (shift by row max).
Matrix2D softmax_rows(const Matrix2D &x);

double frobenius_norm(const Matrix2D &a);
double dot(const std::vector<double> &a, const std::vector<double> &b);
double l2_norm(const std::vector<double> &a);

}  // namespace latentlab
