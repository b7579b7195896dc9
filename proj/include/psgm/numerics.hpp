#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "psgm/matrix.hpp"

namespace psgm {

/// A pivot at or below kPivotRelTol * max(diag) fails the factorization. The
/// threshold separates a genuinely singular Gram (empty LUT bin) from
/// round-off on a healthy matrix.
inline constexpr double kPivotRelTol = 1e-12;

/// Matrices this small get exact Jacobi eigendecompositions; larger ones fall
/// back to power iteration.
inline constexpr std::size_t kExactSpectralDim = 64;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Deterministic pseudo-random unit vector for iteration starts.
inline Vector seeded_unit_vector(std::size_t n, std::uint64_t seed) {
    Vector v(n);
    std::uint64_t s = seed;
    for (std::size_t i = 0; i < n; ++i) {
        s = splitmix64(s);
        v[i] = static_cast<double>(s >> 11) / 9007199254740992.0 - 0.5;
    }
    double nrm = norm2(v);
    if (nrm == 0.0) {
        v.assign(n, 0.0);
        v[0] = 1.0;
        nrm = 1.0;
    }
    scale(v, 1.0 / nrm);
    return v;
}

}  // namespace detail

/// Extreme-eigenvalue estimate of a symmetric positive definite matrix.
struct SpectralEstimate {
    double lambda_max = 0.0;
    double lambda_min = 0.0;
    std::size_t iterations_used = 0;
    bool converged = false;
};

class SymmetricFactorization;
struct BandedSymmetric;

namespace detail {
SymmetricFactorization factorize_band(const BandedSymmetric& m, double pivot_floor);
}

/// Cholesky-style factorization of a symmetric positive definite matrix,
/// with a compact banded path when the matrix has a narrow band.
class SymmetricFactorization {
public:
    std::size_t dimension() const { return dim_; }
    bool banded() const { return banded_; }
    /// Half-bandwidth of the stored factor (dimension-1 when dense).
    std::size_t bandwidth() const { return banded_ ? band_count_ : (dim_ ? dim_ - 1 : 0); }

    Vector solve(std::span<const double> r) const {
        if (r.size() != dim_) throw DimensionMismatch("solve_factored: rhs length != dimension");
        Vector x(r.begin(), r.end());
        solve_in_place(x);
        return x;
    }

    /// Forward then backward substitution, overwriting x.
    void solve_in_place(std::span<double> x) const {
        if (x.size() != dim_) throw DimensionMismatch("solve_factored: rhs length != dimension");
        if (banded_) {
            const std::size_t b = band_count_;
            for (std::size_t i = 0; i < dim_; ++i) {
                double s = x[i];
                const std::size_t k0 = i > b ? i - b : 0;
                for (std::size_t k = k0; k < i; ++k) s -= band_at(i, k) * x[k];
                x[i] = s / band_at(i, i);
            }
            for (std::size_t ii = dim_; ii-- > 0;) {
                double s = x[ii];
                const std::size_t k1 = std::min(dim_ - 1, ii + b);
                for (std::size_t k = ii + 1; k <= k1; ++k) s -= band_at(k, ii) * x[k];
                x[ii] = s / band_at(ii, ii);
            }
        } else {
            for (std::size_t i = 0; i < dim_; ++i) {
                double s = x[i];
                const auto li = lower_.row(i);
                for (std::size_t k = 0; k < i; ++k) s -= li[k] * x[k];
                x[i] = s / li[i];
            }
            for (std::size_t ii = dim_; ii-- > 0;) {
                double s = x[ii];
                for (std::size_t k = ii + 1; k < dim_; ++k) s -= lower_(k, ii) * x[k];
                x[ii] = s / lower_(ii, ii);
            }
        }
    }

    /// Lower-triangular factor as a dense matrix (reconstruction helper).
    Matrix lower() const {
        Matrix l(dim_, dim_);
        if (banded_) {
            for (std::size_t i = 0; i < dim_; ++i) {
                const std::size_t k0 = i > band_count_ ? i - band_count_ : 0;
                for (std::size_t k = k0; k <= i; ++k) l(i, k) = band_at(i, k);
            }
        } else {
            for (std::size_t i = 0; i < dim_; ++i)
                for (std::size_t k = 0; k <= i; ++k) l(i, k) = lower_(i, k);
        }
        return l;
    }

private:
    friend SymmetricFactorization factorize_spd(const Matrix& m);
    friend SymmetricFactorization detail::factorize_band(const BandedSymmetric& m,
                                                         double pivot_floor);

    double& band_slot(std::size_t i, std::size_t j) { return band_[(i - j) * dim_ + i]; }
    double band_at(std::size_t i, std::size_t j) const { return band_[(i - j) * dim_ + i]; }

    std::size_t dim_ = 0;
    bool banded_ = false;
    std::size_t band_count_ = 0;  // half-bandwidth when banded
    Matrix lower_;                // dense factor
    Vector band_;                 // banded factor, diagonal-major
};

/// Largest |i-j| over the nonzero entries.
inline std::size_t matrix_bandwidth(const Matrix& m) {
    std::size_t b = 0;
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j)
            if (m(i, j) != 0.0) b = std::max(b, i > j ? i - j : j - i);
    return b;
}

/// Compact storage for a symmetric matrix with a narrow band:
/// diagonals[d][i] holds entry (i+d, i) for d = 0..bandwidth.
struct BandedSymmetric {
    std::size_t dim = 0;
    std::size_t bandwidth = 0;
    std::vector<Vector> diagonals;

    static BandedSymmetric zero(std::size_t dim, std::size_t bandwidth) {
        BandedSymmetric b;
        b.dim = dim;
        b.bandwidth = bandwidth;
        b.diagonals.resize(bandwidth + 1);
        for (std::size_t d = 0; d <= bandwidth; ++d) b.diagonals[d].assign(dim - d, 0.0);
        return b;
    }

    double at(std::size_t i, std::size_t j) const {
        const std::size_t d = i > j ? i - j : j - i;
        if (d > bandwidth) return 0.0;
        return diagonals[d][std::min(i, j)];
    }

    Matrix dense() const {
        Matrix m(dim, dim);
        for (std::size_t d = 0; d <= bandwidth; ++d)
            for (std::size_t i = 0; i + d < dim; ++i) {
                m(i + d, i) = diagonals[d][i];
                m(i, i + d) = diagonals[d][i];
            }
        return m;
    }
};

namespace detail {

/// Banded Cholesky on compact storage; O(dim * bandwidth^2).
inline SymmetricFactorization factorize_band(const BandedSymmetric& m, double pivot_floor) {
    SymmetricFactorization f;
    f.dim_ = m.dim;
    f.banded_ = true;
    f.band_count_ = m.bandwidth;
    f.band_.assign((m.bandwidth + 1) * m.dim, 0.0);
    const std::size_t bw = m.bandwidth;
    for (std::size_t i = 0; i < m.dim; ++i) {
        const std::size_t j0 = i > bw ? i - bw : 0;
        for (std::size_t j = j0; j <= i; ++j) {
            double s = m.at(i, j);
            const std::size_t k0 = std::max(j0, j > bw ? j - bw : 0);
            for (std::size_t k = k0; k < j; ++k) s -= f.band_at(i, k) * f.band_at(j, k);
            if (i == j) {
                if (!(s > pivot_floor))
                    throw NotPositiveDefinite("factorize_spd: pivot <= tolerance at row " +
                                              std::to_string(i));
                f.band_slot(i, j) = std::sqrt(s);
            } else {
                f.band_slot(i, j) = s / f.band_at(j, j);
            }
        }
    }
    return f;
}

}  // namespace detail

/// Factorization from compact banded storage; runs in time linear in the
/// dimension for a fixed bandwidth.
inline SymmetricFactorization factorize_spd(const BandedSymmetric& m) {
    if (m.dim == 0) throw DimensionMismatch("factorize_spd: empty matrix");
    double max_diag = 0.0;
    for (double x : m.diagonals[0]) {
        if (!std::isfinite(x)) throw Error("factorize_spd: non-finite entries");
        max_diag = std::max(max_diag, x);
    }
    return detail::factorize_band(m, kPivotRelTol * std::max(max_diag, 0.0));
}

/// Symmetric (Cholesky) factorization. Uses compact banded elimination when
/// the half-bandwidth is at most 2, plain dense elimination otherwise.
/// Throws NotPositiveDefinite when a pivot falls below the tolerance.
inline SymmetricFactorization factorize_spd(const Matrix& m) {
    if (m.rows() != m.cols() || m.rows() == 0)
        throw DimensionMismatch("factorize_spd: matrix must be square and non-empty");
    if (!all_finite(m)) throw Error("factorize_spd: non-finite entries");
    if (max_relative_asymmetry(m) > 1e-12)
        throw Error("factorize_spd: matrix is not symmetric");

    const std::size_t n = m.rows();
    double max_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, m(i, i));
    const double pivot_floor = kPivotRelTol * std::max(max_diag, 0.0);

    const std::size_t bw = matrix_bandwidth(m);
    if (bw <= 2 && n > 2) {
        BandedSymmetric band = BandedSymmetric::zero(n, bw);
        for (std::size_t d = 0; d <= bw; ++d)
            for (std::size_t i = 0; i + d < n; ++i) band.diagonals[d][i] = m(i + d, i);
        return detail::factorize_band(band, pivot_floor);
    }

    SymmetricFactorization f;
    f.dim_ = n;
    f.lower_ = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = m(i, j);
            const auto li = f.lower_.row(i);
            const auto lj = f.lower_.row(j);
            for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
            if (i == j) {
                if (!(s > pivot_floor))
                    throw NotPositiveDefinite("factorize_spd: pivot <= tolerance at row " +
                                              std::to_string(i));
                f.lower_(i, j) = std::sqrt(s);
            } else {
                f.lower_(i, j) = s / lj[j];
            }
        }
    }
    return f;
}

inline Vector solve_factored(const SymmetricFactorization& f, std::span<const double> r) {
    return f.solve(r);
}

inline double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double x : m.storage()) s += x * x;
    return std::sqrt(s);
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.
/// Values ascend; vectors() column j pairs with values()[j].
struct JacobiEigen {
    Vector values;
    Matrix vectors;
};

inline JacobiEigen jacobi_eigen(const Matrix& sym, std::size_t max_sweeps = 128) {
    if (sym.rows() != sym.cols()) throw DimensionMismatch("jacobi_eigen: matrix must be square");
    const std::size_t n = sym.rows();
    Matrix a = symmetric_part(sym);
    Matrix v = Matrix::identity(n);
    const double scale0 = std::max(frobenius_norm(a), 1e-300);

    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (std::sqrt(off) <= 1e-15 * scale0) {
            JacobiEigen out;
            out.values.resize(n);
            std::vector<std::size_t> order(n);
            for (std::size_t i = 0; i < n; ++i) order[i] = i;
            std::sort(order.begin(), order.end(),
                      [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });
            out.vectors = Matrix(n, n);
            for (std::size_t j = 0; j < n; ++j) {
                out.values[j] = a(order[j], order[j]);
                for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = v(i, order[j]);
            }
            return out;
        }
        for (std::size_t p = 0; p < n - 1; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    throw NoConvergence("jacobi_eigen: sweeps exhausted");
}

/// Largest singular value. Exact (Jacobi on m^T m) up to kExactSpectralDim,
/// power iteration on m^T m above; NoConvergence if the estimate does not
/// stabilize to the relative tolerance.
inline double spectral_norm(const Matrix& m, double tol = 1e-10, std::size_t max_iter = 100000,
                            std::uint64_t seed = 0x5eed5eedULL) {
    if (m.empty()) throw DimensionMismatch("spectral_norm: empty matrix");
    if (!all_finite(m)) throw Error("spectral_norm: non-finite entries");
    if (!(tol > 0)) throw Error("spectral_norm: tol must be positive");

    if (std::max(m.rows(), m.cols()) <= kExactSpectralDim) {
        const bool wide = m.cols() > m.rows();
        const Matrix g = wide ? matmul(m, transpose(m)) : matmul(transpose(m), m);
        const auto eig = jacobi_eigen(g);
        return std::sqrt(std::max(eig.values.back(), 0.0));
    }

    Vector v = detail::seeded_unit_vector(m.cols(), seed);
    double est = 0.0;
    for (std::size_t it = 1; it <= max_iter; ++it) {
        Vector w = matvec(m, v);        // sigma estimate: ||m v|| for unit v
        const double sigma = norm2(w);
        Vector z = matvec_transposed(m, w);
        const double zn = norm2(z);
        if (zn == 0.0) return 0.0;  // v spans the null space of m^T m
        scale(z, 1.0 / zn);
        v = std::move(z);
        if (it > 3 && std::abs(sigma - est) <= tol * std::max(sigma, 1e-300)) return sigma;
        est = sigma;
    }
    throw NoConvergence("spectral_norm: power iteration exceeded max iterations");
}

/// Extreme eigenvalues of an SPD matrix via power iteration plus inverse
/// iteration through a Cholesky solve.
inline SpectralEstimate spectral_bounds(const Matrix& spd, double tol = 1e-10,
                                        std::size_t max_iter = 100000,
                                        std::uint64_t seed = 0x5eed5eedULL) {
    if (spd.rows() != spd.cols() || spd.rows() == 0)
        throw DimensionMismatch("spectral_bounds: matrix must be square");
    const std::size_t n = spd.rows();
    SpectralEstimate est;

    if (n <= kExactSpectralDim) {
        const auto eig = jacobi_eigen(spd);
        est.lambda_min = eig.values.front();
        est.lambda_max = eig.values.back();
        est.converged = true;
        if (!(est.lambda_min > 0.0))
            throw NotPositiveDefinite("spectral_bounds: smallest eigenvalue <= 0");
        return est;
    }

    // lambda_max: plain power iteration with a Rayleigh quotient.
    Vector v = detail::seeded_unit_vector(n, seed);
    double prev = 0.0;
    bool ok = false;
    for (std::size_t it = 1; it <= max_iter; ++it) {
        Vector w = matvec(spd, v);
        const double lam = dot(v, w);
        const double wn = norm2(w);
        if (wn == 0.0) throw NotPositiveDefinite("spectral_bounds: null vector hit");
        scale(w, 1.0 / wn);
        v = std::move(w);
        ++est.iterations_used;
        if (it > 3 && std::abs(lam - prev) <= tol * std::abs(lam)) {
            est.lambda_max = lam;
            ok = true;
            break;
        }
        prev = lam;
        est.lambda_max = lam;
    }
    if (!ok) throw NoConvergence("spectral_bounds: lambda_max iteration stalled");

    // lambda_min: inverse iteration; the factorization also certifies SPD.
    const SymmetricFactorization f = factorize_spd(spd);
    v = detail::seeded_unit_vector(n, seed ^ 0xabcdef12345ULL);
    prev = 0.0;
    ok = false;
    for (std::size_t it = 1; it <= max_iter; ++it) {
        Vector w = f.solve(v);
        const double wn = norm2(w);
        if (wn == 0.0) throw NotPositiveDefinite("spectral_bounds: inverse iteration collapsed");
        scale(w, 1.0 / wn);
        const double lam = dot(w, matvec(spd, w));
        v = std::move(w);
        ++est.iterations_used;
        if (it > 3 && std::abs(lam - prev) <= tol * std::abs(lam)) {
            est.lambda_min = lam;
            ok = true;
            break;
        }
        prev = lam;
        est.lambda_min = lam;
    }
    if (!ok) throw NoConvergence("spectral_bounds: lambda_min iteration stalled");
    est.converged = true;
    if (!(est.lambda_min > 0.0))
        throw NotPositiveDefinite("spectral_bounds: smallest eigenvalue <= 0");
    return est;
}

/// Ratio of extreme eigenvalues of an SPD matrix.
inline double condition_number(const Matrix& spd) {
    if (max_relative_asymmetry(spd) > 1e-12)
        throw Error("condition_number: matrix is not symmetric");
    const SpectralEstimate est = spectral_bounds(spd);
    if (!(est.lambda_min > 0.0))
        throw NotPositiveDefinite("condition_number: matrix is not positive definite");
    return est.lambda_max / est.lambda_min;
}

/// Gaussian elimination with partial pivoting; independent of the symmetric
/// factorization path (used for general invertible systems and as an oracle).
inline Matrix lu_solve_multi(Matrix a, Matrix rhs) {
    if (a.rows() != a.cols() || a.rows() != rhs.rows())
        throw DimensionMismatch("lu_solve_multi: shape mismatch");
    const std::size_t n = a.rows();
    const std::size_t m = rhs.cols();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
        if (a(piv, col) == 0.0) throw SingularMatrix("lu_solve_multi: singular matrix");
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(a(piv, j), a(col, j));
            for (std::size_t j = 0; j < m; ++j) std::swap(rhs(piv, j), rhs(col, j));
        }
        const double d = a(col, col);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double factor = a(r, col) / d;
            if (factor == 0.0) continue;
            for (std::size_t j = col; j < n; ++j) a(r, j) -= factor * a(col, j);
            for (std::size_t j = 0; j < m; ++j) rhs(r, j) -= factor * rhs(col, j);
        }
    }
    for (std::size_t ii = n; ii-- > 0;) {
        for (std::size_t j = 0; j < m; ++j) {
            double s = rhs(ii, j);
            for (std::size_t k = ii + 1; k < n; ++k) s -= a(ii, k) * rhs(k, j);
            rhs(ii, j) = s / a(ii, ii);
        }
    }
    return rhs;
}

inline Vector lu_solve(const Matrix& a, std::span<const double> b) {
    Matrix rhs(b.size(), 1);
    for (std::size_t i = 0; i < b.size(); ++i) rhs(i, 0) = b[i];
    Matrix x = lu_solve_multi(a, std::move(rhs));
    Vector out(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) out[i] = x(i, 0);
    return out;
}

}  // namespace psgm
