#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "psgm/sampling.hpp"

namespace psgm {

enum class BasisTag { Monomial, OrthogonalPoly, PiecewiseConstant, MemoryTapped };

/// Row vector of basis functions in one of four families. Immutable after
/// construction; evaluation is pure.
class BasisFamily {
public:
    static BasisFamily monomial(std::size_t m, double lo, double hi) {
        if (m == 0) throw ConfigError("monomial basis needs m >= 1");
        BasisFamily b;
        b.tag_ = BasisTag::Monomial;
        b.m_ = m;
        b.lo_ = lo;
        b.hi_ = hi;
        return b;
    }

    static BasisFamily piecewise_constant(std::size_t bins, double lo, double hi) {
        if (bins == 0) throw ConfigError("piecewise-constant basis needs m >= 1");
        if (!(lo < hi)) throw ConfigError("piecewise-constant basis needs lo < hi");
        BasisFamily b;
        b.tag_ = BasisTag::PiecewiseConstant;
        b.m_ = bins;
        b.lo_ = lo;
        b.hi_ = hi;
        b.edges_.resize(bins + 1);
        for (std::size_t j = 0; j <= bins; ++j)
            b.edges_[j] = lo + (hi - lo) * static_cast<double>(j) / static_cast<double>(bins);
        return b;
    }

    /// Polynomials given by a lower-triangular coefficient table over powers
    /// of the standardized variable t = (x - center) / scale; row j holds the
    /// coefficients of the degree-j function.
    static BasisFamily orthogonal(Matrix coeffs, double center, double scale, double lo,
                                  double hi) {
        if (coeffs.rows() == 0 || coeffs.rows() != coeffs.cols())
            throw ConfigError("orthogonal basis needs a square coefficient table");
        BasisFamily b;
        b.tag_ = BasisTag::OrthogonalPoly;
        b.m_ = coeffs.rows();
        b.lo_ = lo;
        b.hi_ = hi;
        b.coeffs_ = std::move(coeffs);
        b.center_ = center;
        b.scale_ = scale;
        return b;
    }

    /// Replicates an inner family across time-shifted samples. tap_delays[p]
    /// is the shift applied to the evaluation index (0 = current sample,
    /// 1 = previous, -1 = next). With sample_gain, each tap's basis values
    /// are multiplied by the tap's own sample.
    static BasisFamily memory_tapped(BasisFamily inner, std::vector<int> tap_delays,
                                     bool sample_gain) {
        if (tap_delays.empty()) throw ConfigError("memory-tapped basis needs at least one tap");
        if (inner.tag_ == BasisTag::MemoryTapped)
            throw ConfigError("memory-tapped basis cannot nest");
        BasisFamily b;
        b.tag_ = BasisTag::MemoryTapped;
        b.m_ = inner.m_ * tap_delays.size();
        b.lo_ = inner.lo_;
        b.hi_ = inner.hi_;
        b.delays_ = std::move(tap_delays);
        b.gain_ = sample_gain;
        b.inner_ = std::make_shared<const BasisFamily>(std::move(inner));
        return b;
    }

    BasisTag tag() const { return tag_; }
    std::size_t size() const { return m_; }
    double lo() const { return lo_; }
    double hi() const { return hi_; }

    const BasisFamily& inner() const { return *inner_; }
    const std::vector<int>& tap_delays() const { return delays_; }
    bool sample_gain() const { return gain_; }
    const Matrix& poly_coeffs() const { return coeffs_; }
    double poly_center() const { return center_; }
    double poly_scale() const { return scale_; }
    const Vector& bin_edges() const { return edges_; }

    int max_delay() const {
        return delays_.empty() ? 0 : *std::max_element(delays_.begin(), delays_.end());
    }
    int min_delay() const {
        return delays_.empty() ? 0 : *std::min_element(delays_.begin(), delays_.end());
    }
    /// Count of leading context samples a batch must provide.
    std::size_t context_lead() const { return static_cast<std::size_t>(std::max(max_delay(), 0)); }
    /// Count of trailing context samples (non-causal taps).
    std::size_t context_tail() const {
        return static_cast<std::size_t>(std::max(-min_delay(), 0));
    }
    /// Samples consumed by one evaluation, in time order.
    std::size_t window_span() const {
        return tag_ == BasisTag::MemoryTapped
                   ? static_cast<std::size_t>(max_delay() - min_delay()) + 1
                   : 1;
    }

    double clamp(double x) const { return std::min(std::max(x, lo_), hi_); }

    /// Bin of x under the right-closed convention: interior boundary points
    /// belong to the bin they end. Out-of-domain x is clamped first.
    std::size_t bin_index(double x) const {
        const double cx = clamp(x);
        const double t = (cx - lo_) / (hi_ - lo_) * static_cast<double>(m_);
        double c = std::ceil(t);
        if (c < 1.0) c = 1.0;
        if (c > static_cast<double>(m_)) c = static_cast<double>(m_);
        return static_cast<std::size_t>(c) - 1;
    }

    /// Structural nonzeros per design-matrix row; 0 means rows are dense.
    std::size_t sparse_nnz() const {
        if (tag_ == BasisTag::PiecewiseConstant) return 1;
        if (tag_ == BasisTag::MemoryTapped && inner_->tag_ == BasisTag::PiecewiseConstant)
            return delays_.size();
        return 0;
    }

    /// Scalar-family row (throws for MemoryTapped; it needs a window).
    void eval_row(double x, std::span<double> out) const {
        switch (tag_) {
            case BasisTag::Monomial: {
                double p = 1.0;
                for (std::size_t j = 0; j < m_; ++j) {
                    out[j] = p;
                    p *= x;
                }
                return;
            }
            case BasisTag::OrthogonalPoly: {
                const double t = (x - center_) / scale_;
                double powers[64];
                double* pw = powers;
                std::vector<double> heap;
                if (m_ > 64) {
                    heap.resize(m_);
                    pw = heap.data();
                }
                double p = 1.0;
                for (std::size_t j = 0; j < m_; ++j) {
                    pw[j] = p;
                    p *= t;
                }
                for (std::size_t j = 0; j < m_; ++j) {
                    const auto row = coeffs_.row(j);
                    double s = 0.0;
                    for (std::size_t i = 0; i <= j; ++i) s += row[i] * pw[i];
                    out[j] = s;
                }
                return;
            }
            case BasisTag::PiecewiseConstant: {
                std::fill(out.begin(), out.end(), 0.0);
                out[bin_index(x)] = 1.0;
                return;
            }
            case BasisTag::MemoryTapped:
                throw UnsupportedFamily("eval_row: memory-tapped basis needs a sample window");
        }
    }

    /// Full row over a sample window in time order (oldest first), of length
    /// window_span(). For scalar families the window is a single sample.
    void eval_window_row(std::span<const double> window, std::span<double> out) const {
        if (tag_ != BasisTag::MemoryTapped) {
            if (window.size() != 1) throw DimensionMismatch("eval_window_row: expected 1 sample");
            eval_row(window[0], out);
            return;
        }
        if (window.size() != window_span())
            throw DimensionMismatch("eval_window_row: window length != span");
        const int maxd = max_delay();
        const std::size_t mi = inner_->m_;
        for (std::size_t p = 0; p < delays_.size(); ++p) {
            const double sample = window[static_cast<std::size_t>(maxd - delays_[p])];
            auto block = out.subspan(p * mi, mi);
            inner_->eval_row(sample, block);
            if (gain_)
                for (double& v : block) v *= sample;
        }
    }

    /// Sparse row for LUT-backed families: writes sparse_nnz() index/value
    /// pairs for the window.
    void eval_window_row_sparse(std::span<const double> window, std::uint32_t* idx,
                                double* val) const {
        if (tag_ == BasisTag::PiecewiseConstant) {
            idx[0] = static_cast<std::uint32_t>(bin_index(window[0]));
            val[0] = 1.0;
            return;
        }
        const int maxd = max_delay();
        const std::size_t mi = inner_->m_;
        for (std::size_t p = 0; p < delays_.size(); ++p) {
            const double sample = window[static_cast<std::size_t>(maxd - delays_[p])];
            idx[p] = static_cast<std::uint32_t>(p * mi + inner_->bin_index(sample));
            val[p] = gain_ ? sample : 1.0;
        }
    }

private:
    BasisFamily() = default;

    BasisTag tag_ = BasisTag::Monomial;
    std::size_t m_ = 0;
    double lo_ = 0.0;
    double hi_ = 1.0;
    Matrix coeffs_;
    double center_ = 0.0;
    double scale_ = 1.0;
    Vector edges_;
    std::vector<int> delays_;
    bool gain_ = false;
    std::shared_ptr<const BasisFamily> inner_;
};

/// Design matrix Phi_k: row n holds the basis row at batch sample n. LUT
/// families keep a compact index/value form; others store dense rows.
struct DesignMatrix {
    std::size_t n = 0;
    std::size_t m = 0;
    Matrix dense_rows;                // when nnz == 0
    std::size_t nnz = 0;              // per-row nonzeros when sparse
    std::vector<std::uint32_t> idx;   // n * nnz
    Vector val;                       // n * nnz

    bool sparse() const { return nnz > 0; }
    std::size_t rows() const { return n; }
    std::size_t cols() const { return m; }

    double at(std::size_t i, std::size_t j) const {
        if (!sparse()) return dense_rows(i, j);
        for (std::size_t p = 0; p < nnz; ++p)
            if (idx[i * nnz + p] == j) return val[i * nnz + p];
        return 0.0;
    }

    Matrix dense() const {
        if (!sparse()) return dense_rows;
        Matrix d(n, m);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < nnz; ++p) d(i, idx[i * nnz + p]) += val[i * nnz + p];
        return d;
    }
};

inline void eval_design_matrix_into(const BasisFamily& b, const SampleBatch& batch,
                                    DesignMatrix& out) {
    const std::size_t n = batch.size();
    if (n == 0) throw EmptyBatch("eval_design_matrix: empty batch");
    if (batch.lead < b.context_lead() || batch.tail < b.context_tail())
        throw DimensionMismatch("eval_design_matrix: batch lacks the basis' tap context");

    out.n = n;
    out.m = b.size();
    out.nnz = b.sparse_nnz();
    const std::size_t span = b.window_span();
    const int maxd = b.max_delay();
    if (out.nnz > 0) {
        out.idx.resize(n * out.nnz);
        out.val.resize(n * out.nnz);
        out.dense_rows = Matrix();
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t first =
                batch.lead + i - static_cast<std::size_t>(std::max(maxd, 0));
            b.eval_window_row_sparse({batch.inputs.data() + first, span}, &out.idx[i * out.nnz],
                                     &out.val[i * out.nnz]);
        }
    } else {
        out.idx.clear();
        out.val.clear();
        out.dense_rows = Matrix(n, out.m);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t first =
                batch.lead + i - static_cast<std::size_t>(std::max(maxd, 0));
            b.eval_window_row({batch.inputs.data() + first, span}, out.dense_rows.row(i));
        }
    }
}

inline DesignMatrix eval_design_matrix(const BasisFamily& b, const SampleBatch& batch) {
    DesignMatrix out;
    eval_design_matrix_into(b, batch, out);
    return out;
}

/// u(x) = Phi(x) . u for a scalar family, or the windowed form for
/// memory-tapped families.
inline double eval_function(const BasisFamily& b, std::span<const double> u,
                            std::span<const double> window) {
    if (u.size() != b.size()) throw DimensionMismatch("eval_function: coefficient length != M");
    if (b.tag() == BasisTag::PiecewiseConstant) return u[b.bin_index(window[0])];
    if (b.sparse_nnz() > 0) {
        std::uint32_t idx[8];
        double val[8];
        const std::size_t nnz = b.sparse_nnz();
        if (nnz > 8) throw UnsupportedFamily("eval_function: too many taps");
        b.eval_window_row_sparse(window, idx, val);
        double s = 0.0;
        for (std::size_t p = 0; p < nnz; ++p) s += val[p] * u[idx[p]];
        return s;
    }
    std::vector<double> row(b.size());
    b.eval_window_row(window, row);
    return dot(row, u);
}

inline double eval_function(const BasisFamily& b, std::span<const double> u, double x) {
    return eval_function(b, u, std::span<const double>(&x, 1));
}

/// Orthonormal polynomial family built by modified Gram-Schmidt on the
/// standardized monomial sequence against the empirical inner product
/// (1/S) sum p(x_s) q(x_s), with a re-orthogonalization pass. Returns
/// max_degree + 1 functions of degrees 0..max_degree.
inline BasisFamily build_orthogonal_polys(std::span<const double> samples,
                                          std::size_t max_degree, double lo = 1.0,
                                          double hi = -1.0) {
    if (max_degree < 1) throw ConfigError("build_orthogonal_polys: max_degree must be >= 1");
    const std::size_t s_count = samples.size();
    if (s_count < 100 * max_degree)
        throw ConfigError("build_orthogonal_polys: needs at least 100 * max_degree samples");
    const std::size_t m = max_degree + 1;

    double mean = 0.0;
    for (double x : samples) mean += x;
    mean /= static_cast<double>(s_count);
    double var = 0.0;
    for (double x : samples) var += (x - mean) * (x - mean);
    var /= static_cast<double>(s_count);
    double sd = std::sqrt(var);
    if (!(sd > 0.0)) {
        if (max_degree >= 1)
            throw DegenerateSamples("build_orthogonal_polys: all samples are equal");
        sd = 1.0;
    }

    if (lo > hi) {  // default domain: the sample range
        lo = *std::min_element(samples.begin(), samples.end());
        hi = *std::max_element(samples.begin(), samples.end());
    }

    const double inv_s = 1.0 / static_cast<double>(s_count);
    // q-columns: sampled values of the orthonormalized functions so far
    std::vector<Vector> q(m, Vector(s_count));
    Matrix coeffs(m, m);

    Vector tvals(s_count);
    for (std::size_t s = 0; s < s_count; ++s) tvals[s] = (samples[s] - mean) / sd;
    Vector mono(s_count, 1.0);

    Vector work(s_count);
    for (std::size_t j = 0; j < m; ++j) {
        // start from the standardized monomial t^j
        if (j > 0)
            for (std::size_t s = 0; s < s_count; ++s) mono[s] *= tvals[s];
        work = mono;
        Vector crow(m, 0.0);
        crow[j] = 1.0;
        const double before = std::sqrt(dot(work, work) * inv_s);
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t i = 0; i < j; ++i) {
                const double proj = dot(q[i], work) * inv_s;
                axpy(-proj, q[i], work);
                axpy(-proj, coeffs.row(i), crow);
            }
        }
        const double after = std::sqrt(dot(work, work) * inv_s);
        if (!(after > 1e-12 * std::max(before, 1e-300)))
            throw DegenerateSamples("build_orthogonal_polys: samples cannot support degree " +
                                    std::to_string(j));
        const double inv_norm = 1.0 / after;
        for (std::size_t s = 0; s < s_count; ++s) q[j][s] = work[s] * inv_norm;
        for (std::size_t i = 0; i < m; ++i) coeffs(j, i) = crow[i] * inv_norm;
    }
    return BasisFamily::orthogonal(std::move(coeffs), mean, sd, lo, hi);
}

/// Rows of basis-function derivatives at the given points (polynomial
/// families only).
inline Matrix derivative_rows(const BasisFamily& b, std::span<const double> points) {
    if (b.tag() == BasisTag::PiecewiseConstant || b.tag() == BasisTag::MemoryTapped)
        throw UnsupportedFamily("derivative_rows: family has no defined derivative");
    Matrix d(points.size(), b.size());
    if (b.tag() == BasisTag::Monomial) {
        for (std::size_t i = 0; i < points.size(); ++i) {
            double p = 1.0;
            for (std::size_t j = 1; j < b.size(); ++j) {
                d(i, j) = static_cast<double>(j) * p;
                p *= points[i];
            }
        }
        return d;
    }
    // orthogonal polynomials: d/dx = (1/scale) d/dt applied to the table
    const Matrix& c = b.poly_coeffs();
    const double inv_scale = 1.0 / b.poly_scale();
    for (std::size_t i = 0; i < points.size(); ++i) {
        const double t = (points[i] - b.poly_center()) / b.poly_scale();
        std::vector<double> pw(b.size());
        double p = 1.0;
        for (std::size_t deg = 0; deg < b.size(); ++deg) {
            pw[deg] = p;
            p *= t;
        }
        for (std::size_t j = 0; j < b.size(); ++j) {
            double s = 0.0;
            for (std::size_t deg = 1; deg <= j; ++deg)
                s += c(j, deg) * static_cast<double>(deg) * pw[deg - 1];
            d(i, j) = s * inv_scale;
        }
    }
    return d;
}

/// Constraint evaluation points: count equally spaced points in
/// (batch_max, hi], refreshed per batch.
inline Vector constraint_points(double batch_max, double hi, std::size_t count = 8) {
    if (!(hi > batch_max)) return {};
    Vector z(count);
    for (std::size_t i = 1; i <= count; ++i)
        z[i - 1] = batch_max + (hi - batch_max) * static_cast<double>(i) /
                                   static_cast<double>(count);
    return z;
}

}  // namespace psgm
