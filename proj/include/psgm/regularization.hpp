#pragma once

#include <optional>

#include "psgm/basis.hpp"

namespace psgm {

enum class ConstraintTag { None, FirstDifference, DerivativeAtPoints };

/// (M-1) x M first-difference operator with rows (-1, 1); annihilates
/// constant vectors exactly.
inline Matrix first_difference_operator(std::size_t m) {
    if (m < 2) throw ConfigError("first_difference_operator: needs m >= 2");
    Matrix d(m - 1, m);
    for (std::size_t i = 0; i + 1 < m; ++i) {
        d(i, i) = -1.0;
        d(i, i + 1) = 1.0;
    }
    return d;
}

/// Soft-constraint operator D acting on one coefficient block.
struct ConstraintOperator {
    ConstraintTag tag = ConstraintTag::None;
    Matrix d;

    static ConstraintOperator none() { return {}; }

    static ConstraintOperator first_difference(std::size_t m) {
        ConstraintOperator op;
        op.tag = ConstraintTag::FirstDifference;
        op.d = first_difference_operator(m);
        return op;
    }

    static ConstraintOperator derivative_at(const BasisFamily& basis,
                                            std::span<const double> points) {
        ConstraintOperator op;
        op.tag = ConstraintTag::DerivativeAtPoints;
        op.d = derivative_rows(basis, points);
        return op;
    }

    std::size_t block_size() const { return d.cols(); }
};

/// C = blockdiag(D^T D, ..., D^T D) with block_count copies; symmetric PSD,
/// tridiagonal per block for the first-difference operator.
inline Matrix constraint_gram(const ConstraintOperator& op, std::size_t block_count = 1) {
    if (op.tag == ConstraintTag::None || op.d.empty())
        throw ConfigError("constraint_gram: operator carries no D matrix");
    const std::size_t mb = op.d.cols();
    const Matrix dtd = matmul(transpose(op.d), op.d);
    Matrix c(mb * block_count, mb * block_count);
    for (std::size_t blk = 0; blk < block_count; ++blk)
        for (std::size_t i = 0; i < mb; ++i)
            for (std::size_t j = 0; j < mb; ++j) c(blk * mb + i, blk * mb + j) = dtd(i, j);
    return c;
}

enum class PreconditionerTag { Identity, DiagOfA, FullA };

struct PreconditionerSpec {
    PreconditionerTag b_tag = PreconditionerTag::Identity;
    ConstraintOperator constraint;
    std::size_t block_count = 1;
};

/// Outcome of the relative positive-definiteness check (Eq. x^T B^{-1} A x
/// over the unit sphere). exact = eigen-solved; otherwise sampled, i.e.
/// "admissible up to sampling".
struct RelativePdReport {
    bool admissible = false;
    bool exact = true;
    double min_quotient = 0.0;
    std::optional<Vector> witness;
    std::size_t samples_used = 0;
};

enum class PdMode { Auto, Exact, Sampled };

/// min over unit x of x^T B^{-1} A x, exactly (smallest eigenvalue of the
/// symmetric part of B^{-1}A) for small systems, sampled with local
/// refinement for large ones. A witness is attached when the minimum is
/// non-positive.
inline RelativePdReport check_relative_pd(const Matrix& b, const Matrix& a,
                                          PdMode mode = PdMode::Auto,
                                          std::uint64_t seed = 0x9dc5ULL) {
    if (b.rows() != b.cols() || a.rows() != a.cols() || a.rows() != b.rows())
        throw DimensionMismatch("check_relative_pd: B and A must be square and same size");
    const std::size_t m = a.rows();
    Matrix g;
    try {
        g = lu_solve_multi(b, a);
    } catch (const SingularMatrix&) {
        throw SingularB("check_relative_pd: B is singular");
    }
    const Matrix s = symmetric_part(g);

    RelativePdReport report;
    const bool exact = mode == PdMode::Exact || (mode == PdMode::Auto && m <= kExactSpectralDim);
    Vector w;
    if (exact) {
        const auto eig = jacobi_eigen(s);
        w.resize(m);
        for (std::size_t i = 0; i < m; ++i) w[i] = eig.vectors(i, 0);
        report.exact = true;
        report.samples_used = 0;
    } else {
        const std::size_t trials = 10000;
        double best = std::numeric_limits<double>::max();
        std::uint64_t state = seed;
        Vector cand(m);
        for (std::size_t t = 0; t < trials; ++t) {
            state = detail::splitmix64(state);
            Vector v = detail::seeded_unit_vector(m, state);
            const double q = dot(v, matvec(s, v));
            if (q < best) {
                best = q;
                cand = std::move(v);
            }
        }
        // 50 shifted power-iteration steps push the candidate toward the
        // smallest-eigenvalue direction of the symmetric part.
        const double shift = frobenius_norm(s);
        for (int it = 0; it < 50; ++it) {
            Vector next = matvec(s, cand);
            for (std::size_t i = 0; i < m; ++i) next[i] = shift * cand[i] - next[i];
            const double nn = norm2(next);
            if (nn == 0.0) break;
            scale(next, 1.0 / nn);
            cand = std::move(next);
        }
        w = std::move(cand);
        report.exact = false;
        report.samples_used = trials;
    }
    report.min_quotient = dot(w, matvec(g, w)) / dot(w, w);
    report.admissible = report.min_quotient > 0.0;
    if (!report.admissible) report.witness = std::move(w);
    return report;
}

/// Dense B for a preconditioner spec (identity, diag(A), or A itself).
inline Matrix build_b_matrix(const PreconditionerSpec& spec, std::size_t m,
                             const Matrix* a_ref) {
    switch (spec.b_tag) {
        case PreconditionerTag::Identity:
            return Matrix::identity(m);
        case PreconditionerTag::DiagOfA: {
            if (!a_ref) throw ConfigError("preconditioner: DiagOfA needs a reference A");
            if (a_ref->rows() != m) throw DimensionMismatch("preconditioner: A size != M");
            Matrix b(m, m);
            for (std::size_t i = 0; i < m; ++i) b(i, i) = (*a_ref)(i, i);
            return b;
        }
        case PreconditionerTag::FullA:
            if (!a_ref) throw ConfigError("preconditioner: FullA needs a reference A");
            if (a_ref->rows() != m) throw DimensionMismatch("preconditioner: A size != M");
            return *a_ref;
    }
    throw ConfigError("preconditioner: unknown B tag");
}

/// Dense B + gamma*C.
inline Matrix build_preconditioner_dense(const PreconditionerSpec& spec, double gamma,
                                         std::size_t m, const Matrix* a_ref) {
    Matrix p = build_b_matrix(spec, m, a_ref);
    if (spec.constraint.tag != ConstraintTag::None && gamma != 0.0) {
        if (spec.constraint.block_size() * spec.block_count != m)
            throw DimensionMismatch("preconditioner: constraint blocks do not tile M");
        p = add_scaled(p, constraint_gram(spec.constraint, spec.block_count), gamma);
    }
    return p;
}

/// Factorized preconditioner B + gamma*C with its Frobenius-inverse norm d
/// and the admissibility report (when a reference A was available).
struct PreconditionerFactor {
    PreconditionerSpec spec;
    double gamma = 0.0;
    std::size_t dimension = 0;
    SymmetricFactorization factor;
    double d = 0.0;
    std::optional<RelativePdReport> admissibility;
};

/// Factorizes B + gamma*C once. Diagonal B with a first-difference (or no)
/// constraint takes the banded path; d is computed by solving the M unit
/// systems rather than forming the inverse.
inline PreconditionerFactor assemble_preconditioner(const PreconditionerSpec& spec, double gamma,
                                                    std::size_t m, const Matrix* a_ref = nullptr) {
    if (!(gamma >= 0.0)) throw ConfigError("assemble_preconditioner: gamma must be >= 0");
    if (spec.constraint.tag != ConstraintTag::None &&
        spec.constraint.block_size() * spec.block_count != m)
        throw DimensionMismatch("assemble_preconditioner: constraint blocks do not tile M");

    PreconditionerFactor out;
    out.spec = spec;
    out.gamma = gamma;
    out.dimension = m;

    const bool diag_b = spec.b_tag != PreconditionerTag::FullA;
    const bool banded_c = spec.constraint.tag != ConstraintTag::DerivativeAtPoints;
    if (diag_b && banded_c && m > 2) {
        if (spec.b_tag == PreconditionerTag::DiagOfA) {
            if (!a_ref) throw ConfigError("preconditioner: DiagOfA needs a reference A");
            if (a_ref->rows() != m || a_ref->cols() != m)
                throw DimensionMismatch("preconditioner: A size != M");
        }
        const bool with_c = spec.constraint.tag == ConstraintTag::FirstDifference && gamma != 0.0;
        BandedSymmetric band = BandedSymmetric::zero(m, with_c ? 1 : 0);
        for (std::size_t i = 0; i < m; ++i)
            band.diagonals[0][i] = spec.b_tag == PreconditionerTag::Identity ? 1.0 : (*a_ref)(i, i);
        if (with_c) {
            const std::size_t mb = spec.constraint.block_size();
            for (std::size_t blk = 0; blk < spec.block_count; ++blk)
                for (std::size_t i = 0; i < mb; ++i) {
                    const std::size_t at = blk * mb + i;
                    band.diagonals[0][at] += gamma * ((i == 0 || i + 1 == mb) ? 1.0 : 2.0);
                    if (i + 1 < mb) band.diagonals[1][at] = -gamma;
                }
        }
        out.factor = factorize_spd(band);
    } else {
        out.factor = factorize_spd(build_preconditioner_dense(spec, gamma, m, a_ref));
    }

    // d = ||(B + gamma C)^{-1}||_F via unit-vector solves
    double d2 = 0.0;
    Vector e(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        e[i] = 1.0;
        const Vector col = out.factor.solve(e);
        d2 += dot(col, col);
        e[i] = 0.0;
    }
    out.d = std::sqrt(d2);

    if (a_ref) {
        const Matrix pre = build_preconditioner_dense(spec, gamma, m, a_ref);
        out.admissibility = check_relative_pd(pre, *a_ref);
    }
    return out;
}

/// Convergence constants of the mean iteration, per the contraction lemma:
/// lambda_min over the gamma grid of min_x x^T (B+gC)^{-1} A x, lambda_max of
/// the induced 2-norm, and the derived (lambda, mu0) pair.
struct Lemma1Params {
    double lambda_min = 0.0;
    double lambda_max = 0.0;
    double tau = 0.0;
    double lambda = 0.0;
    double mu0 = 0.0;
    double gamma0 = 0.0;
    Vector gamma_grid;
    bool used_small_tau_branch = false;
    std::size_t halvings = 0;
};

namespace detail {

inline double min_sym_quotient(const Matrix& g) {
    const Matrix s = symmetric_part(g);
    if (s.rows() <= kExactSpectralDim) return jacobi_eigen(s).values.front();
    // sampled fallback for large systems
    double best = std::numeric_limits<double>::max();
    std::uint64_t state = 0x51caffeULL;
    Vector cand(s.rows());
    for (std::size_t t = 0; t < 10000; ++t) {
        state = splitmix64(state);
        Vector v = seeded_unit_vector(s.rows(), state);
        best = std::min(best, dot(v, matvec(s, v)));
    }
    return best;
}

}  // namespace detail

/// Scans gamma over [0, gamma0] (halving gamma0 up to 20 times while any grid
/// point fails admissibility) and evaluates the branch formulas for
/// (lambda, mu0). Throws NotAdmissible when even gamma = 0 fails.
inline Lemma1Params lemma1_params(const Matrix& a, const PreconditionerSpec& spec, double gamma0,
                                  std::size_t grid_points = 11, const Matrix* a_for_b = nullptr) {
    const std::size_t m = a.rows();
    const Matrix* bref = a_for_b ? a_for_b : &a;
    const Matrix b = build_b_matrix(spec, m, bref);

    if (!check_relative_pd(b, a).admissible)
        throw NotAdmissible("lemma1_params: B is not admissible for A at gamma = 0");
    if (spec.constraint.tag == ConstraintTag::None) gamma0 = 0.0;

    Lemma1Params out;
    for (std::size_t attempt = 0;; ++attempt) {
        Vector grid;
        if (gamma0 <= 0.0)
            grid = {0.0};
        else {
            grid.resize(grid_points);
            for (std::size_t i = 0; i < grid_points; ++i)
                grid[i] = gamma0 * static_cast<double>(i) / static_cast<double>(grid_points - 1);
        }

        double lmin = std::numeric_limits<double>::max();
        double lmax = 0.0;
        bool ok = true;
        for (double gamma : grid) {
            const Matrix pre = build_preconditioner_dense(spec, gamma, m, bref);
            Matrix g;
            try {
                g = lu_solve_multi(pre, a);
            } catch (const SingularMatrix&) {
                ok = false;
                break;
            }
            const double q = detail::min_sym_quotient(g);
            if (!(q > 0.0)) {
                ok = false;
                break;
            }
            lmin = std::min(lmin, q);
            lmax = std::max(lmax, spectral_norm(g, 1e-12));
        }
        if (ok) {
            out.lambda_min = lmin;
            out.lambda_max = lmax;
            out.gamma0 = gamma0;
            out.gamma_grid = std::move(grid);
            out.halvings = attempt;
            break;
        }
        if (attempt >= 20)
            throw NotAdmissible("lemma1_params: no admissible gamma0 after 20 halvings");
        gamma0 *= 0.5;
    }

    out.tau = out.lambda_max / out.lambda_min;
    if (out.tau >= 1.0) {
        const double root = std::sqrt(std::max(0.0, 1.0 - 1.0 / (out.tau * out.tau)));
        out.lambda = out.lambda_max * (1.0 - root) * out.tau;
        out.mu0 = 1.0 / (out.tau * out.lambda_max);
    } else {
        // branch as printed; never reached in practice since tau >= 1 always
        out.lambda = out.lambda_max / 2.0;
        out.mu0 = 8.0 * (2.0 - out.tau) / (3.0 * out.tau * out.lambda_max);
        out.used_small_tau_branch = true;
    }
    return out;
}

}  // namespace psgm
