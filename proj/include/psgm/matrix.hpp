#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "psgm/errors.hpp"

namespace psgm {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix diagonal(std::span<const double> d) {
        Matrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline void scale(std::span<double> v, double a) {
    for (double& x : v) x *= a;
}

/// y += a*x
inline void axpy(double a, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline Vector matvec(const Matrix& m, std::span<const double> x) {
    if (x.size() != m.cols()) throw DimensionMismatch("matvec: size mismatch");
    Vector y(m.rows(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) y[i] = dot(m.row(i), x);
    return y;
}

inline Vector matvec_transposed(const Matrix& m, std::span<const double> x) {
    if (x.size() != m.rows()) throw DimensionMismatch("matvec_transposed: size mismatch");
    Vector y(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) axpy(x[i], m.row(i), y);
    return y;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw DimensionMismatch("matmul: inner dimensions differ");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    return c;
}

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

/// a + alpha*b
inline Matrix add_scaled(const Matrix& a, const Matrix& b, double alpha = 1.0) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionMismatch("add_scaled: shape mismatch");
    Matrix c = a;
    for (std::size_t i = 0; i < c.storage().size(); ++i) c.storage()[i] += alpha * b.storage()[i];
    return c;
}

inline Matrix symmetric_part(const Matrix& m) {
    Matrix s(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) s(i, j) = 0.5 * (m(i, j) + m(j, i));
    return s;
}

inline Vector outer_apply(std::span<const double> u, std::span<const double> v,
                          std::span<const double> x) {
    // (u v^T) x
    Vector y(u.size());
    const double s = dot(v, x);
    for (std::size_t i = 0; i < u.size(); ++i) y[i] = u[i] * s;
    return y;
}

/// Rank-one update m += a * u v^T
inline void add_outer(Matrix& m, double a, std::span<const double> u, std::span<const double> v) {
    for (std::size_t i = 0; i < u.size(); ++i) {
        auto r = m.row(i);
        const double au = a * u[i];
        for (std::size_t j = 0; j < v.size(); ++j) r[j] += au * v[j];
    }
}

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool all_finite(const Matrix& m) { return all_finite(std::span<const double>(m.storage())); }

inline double max_abs(const Matrix& m) {
    double v = 0.0;
    for (double x : m.storage()) v = std::max(v, std::abs(x));
    return v;
}

/// Largest |m_ij - m_ji| relative to the largest entry magnitude.
inline double max_relative_asymmetry(const Matrix& m) {
    if (m.rows() != m.cols()) return 1.0;
    const double scale = std::max(max_abs(m), 1e-300);
    double worst = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = i + 1; j < m.cols(); ++j)
            worst = std::max(worst, std::abs(m(i, j) - m(j, i)));
    return worst / scale;
}

}  // namespace psgm
