#pragma once

#include <functional>
#include <memory>
#include <string>

#include "psgm/regularization.hpp"

namespace psgm {

enum class ScheduleTag { Constant, InverseDecay, SwitchAt };

/// Step-size rule mu_k.
struct StepSchedule {
    ScheduleTag tag = ScheduleTag::Constant;
    double mu = 0.1;          // Constant
    double lambda0 = 1.0;     // InverseDecay: 1 / (lambda0 (k-1) + 1/mu_hat0)
    double mu_hat0 = 1.0;
    double mu0 = 0.01;        // SwitchAt: mu0 up to the switch, then (k - k0)^-1
    std::size_t switch_step = 1000;

    static StepSchedule constant(double mu) {
        StepSchedule s;
        s.tag = ScheduleTag::Constant;
        s.mu = mu;
        return s;
    }
    static StepSchedule inverse_decay(double lambda0, double mu_hat0) {
        StepSchedule s;
        s.tag = ScheduleTag::InverseDecay;
        s.lambda0 = lambda0;
        s.mu_hat0 = mu_hat0;
        return s;
    }
    static StepSchedule switch_at(double mu0, std::size_t k0) {
        StepSchedule s;
        s.tag = ScheduleTag::SwitchAt;
        s.mu0 = mu0;
        s.switch_step = k0;
        return s;
    }

    /// sum_k mu_k = infinity (mean-convergence hypothesis)
    bool sum_diverges() const { return true; }  // all three rules are harmonic or constant
    /// sum_k mu_k^2 < infinity (mean-square hypothesis)
    bool sum_squares_finite() const { return tag != ScheduleTag::Constant; }
};

inline double schedule_value(const StepSchedule& s, std::size_t k) {
    if (k < 1) throw ConfigError("schedule_value: k starts at 1");
    switch (s.tag) {
        case ScheduleTag::Constant:
            return s.mu;
        case ScheduleTag::InverseDecay:
            return 1.0 / (s.lambda0 * static_cast<double>(k - 1) + 1.0 / s.mu_hat0);
        case ScheduleTag::SwitchAt:
            if (k <= s.switch_step) return s.mu0;
            return 1.0 / static_cast<double>(k - s.switch_step);
    }
    return s.mu;
}

/// Per-batch Gram, moment, and residual. With the 1/N convention both
/// A_k -> A and b^k -> b as N grows, and b^k - A_k u = (1/N) Phi^T r^k.
struct BatchStatistics {
    Matrix a;
    Vector b;
    Vector residual;
};

inline void batch_statistics_into(const DesignMatrix& phi, std::span<const double> y,
                                  std::span<const double> u_prev, BatchStatistics& out,
                                  bool normalized = true) {
    const std::size_t n = phi.rows();
    const std::size_t m = phi.cols();
    if (y.size() != n) throw DimensionMismatch("batch_statistics: outputs length != N");
    if (u_prev.size() != m) throw DimensionMismatch("batch_statistics: coefficients length != M");

    if (out.a.rows() != m || out.a.cols() != m)
        out.a = Matrix(m, m);
    else
        std::fill(out.a.storage().begin(), out.a.storage().end(), 0.0);
    out.b.assign(m, 0.0);
    out.residual.resize(n);

    if (phi.sparse()) {
        const std::size_t nnz = phi.nnz;
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint32_t* idx = &phi.idx[i * nnz];
            const double* val = &phi.val[i * nnz];
            double fit = 0.0;
            for (std::size_t p = 0; p < nnz; ++p) fit += val[p] * u_prev[idx[p]];
            out.residual[i] = y[i] - fit;
            for (std::size_t p = 0; p < nnz; ++p) {
                out.b[idx[p]] += val[p] * y[i];
                for (std::size_t q = 0; q < nnz; ++q)
                    out.a(idx[p], idx[q]) += val[p] * val[q];
            }
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = phi.dense_rows.row(i);
            out.residual[i] = y[i] - dot(row, u_prev);
            for (std::size_t j = 0; j < m; ++j) {
                const double rj = row[j];
                out.b[j] += rj * y[i];
                auto arow = out.a.row(j);
                for (std::size_t l = j; l < m; ++l) arow[l] += rj * row[l];
            }
        }
        for (std::size_t j = 0; j < m; ++j)
            for (std::size_t l = 0; l < j; ++l) out.a(j, l) = out.a(l, j);
    }

    if (normalized) {
        const double inv_n = 1.0 / static_cast<double>(n);
        for (auto& x : out.a.storage()) x *= inv_n;
        for (auto& x : out.b) x *= inv_n;
    }
}

inline BatchStatistics batch_statistics(const DesignMatrix& phi, std::span<const double> y,
                                        std::span<const double> u_prev, bool normalized = true) {
    BatchStatistics out;
    batch_statistics_into(phi, y, u_prev, out, normalized);
    return out;
}

struct IterationState {
    std::size_t k = 0;
    Vector u;
};

/// One canonical update u += mu * (B + gamma C)^{-1} (b - A u); exactly one
/// factored solve per step.
inline IterationState psgm_step(IterationState state, const BatchStatistics& stats,
                                const PreconditionerFactor& pre, double mu_k) {
    if (!(mu_k > 0.0)) throw ConfigError("psgm_step: mu_k must be positive");
    const std::size_t m = state.u.size();
    if (stats.a.rows() != m || stats.b.size() != m || pre.dimension != m)
        throw DimensionMismatch("psgm_step: dimensions disagree");

    Vector g(m);
    for (std::size_t j = 0; j < m; ++j) g[j] = stats.b[j] - dot(stats.a.row(j), state.u);
    pre.factor.solve_in_place(g);
    for (std::size_t j = 0; j < m; ++j) state.u[j] += mu_k * g[j];
    for (double x : state.u)
        if (!std::isfinite(x))
            throw NonFiniteUpdate("psgm_step: iterate left the finite range at k = " +
                                  std::to_string(state.k + 1));
    state.k += 1;
    return state;
}

/// Variant taking the Gram only through a product closure (the Gram need not
/// be materialized).
inline IterationState psgm_step(IterationState state, std::span<const double> b_k,
                                const std::function<void(std::span<const double>,
                                                         std::span<double>)>& apply_a,
                                const PreconditionerFactor& pre, double mu_k) {
    if (!(mu_k > 0.0)) throw ConfigError("psgm_step: mu_k must be positive");
    const std::size_t m = state.u.size();
    if (b_k.size() != m || pre.dimension != m)
        throw DimensionMismatch("psgm_step: dimensions disagree");
    Vector g(m);
    apply_a(state.u, g);
    for (std::size_t j = 0; j < m; ++j) g[j] = b_k[j] - g[j];
    pre.factor.solve_in_place(g);
    for (std::size_t j = 0; j < m; ++j) state.u[j] += mu_k * g[j];
    for (double x : state.u)
        if (!std::isfinite(x))
            throw NonFiniteUpdate("psgm_step: iterate left the finite range at k = " +
                                  std::to_string(state.k + 1));
    state.k += 1;
    return state;
}

/// Full per-batch least squares u = (A_k)^{-1} b^k (the comparison baseline).
inline Vector batch_least_squares(const BatchStatistics& stats) {
    return factorize_spd(stats.a).solve(stats.b);
}

/// Constrained per-batch solve u_prev + (A_k + gamma C)^{-1}(b^k - A_k u_prev).
inline Vector batch_least_squares(const BatchStatistics& stats, std::span<const double> u_prev,
                                  double gamma, const Matrix& c) {
    const std::size_t m = stats.b.size();
    if (u_prev.size() != m || c.rows() != m)
        throw DimensionMismatch("batch_least_squares: dimensions disagree");
    const Matrix sys = add_scaled(stats.a, c, gamma);
    Vector g(m);
    for (std::size_t j = 0; j < m; ++j) g[j] = stats.b[j] - dot(stats.a.row(j), u_prev);
    Vector delta = factorize_spd(sys).solve(g);
    for (std::size_t j = 0; j < m; ++j) delta[j] += u_prev[j];
    return delta;
}

/// Held-out evaluation set for the dB error column.
struct EvalSet {
    Vector inputs;  // lead + count + tail samples
    std::size_t lead = 0;
    std::size_t tail = 0;
    Vector targets;  // count values
};

/// 10 log10( sum (target - u(window))^2 / sum x^2 ) over the evaluation set.
inline double eval_error_db(const BasisFamily& basis, std::span<const double> u,
                            const EvalSet& eval) {
    const std::size_t count = eval.targets.size();
    const std::size_t span = basis.window_span();
    const int maxd = basis.max_delay();
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t first = eval.lead + i - static_cast<std::size_t>(std::max(maxd, 0));
        const double fit = eval_function(basis, u, {eval.inputs.data() + first, span});
        const double e = eval.targets[i] - fit;
        num += e * e;
        const double x = eval.inputs[eval.lead + i];
        den += x * x;
    }
    return 10.0 * std::log10(num / den);
}

struct TraceRecord {
    std::size_t k = 0;
    double mu_k = 0.0;
    double residual_norm = 0.0;
    double relative_error = std::numeric_limits<double>::quiet_NaN();
    double error_db = std::numeric_limits<double>::quiet_NaN();
};

struct RunTrace {
    std::vector<TraceRecord> records;
    bool aborted = false;
    std::string abort_reason;
    bool admissibility_checked = false;
    bool admissibility_warning = false;
};

struct RunConfig {
    RunConfig(ProcessSpec process_, TargetFunction target_, BasisFamily basis_)
        : process(std::move(process_)), target(std::move(target_)), basis(std::move(basis_)) {}

    ProcessSpec process;
    TargetFunction target;
    BasisFamily basis;
    PreconditionerSpec precond;
    double gamma = 0.0;
    StepSchedule schedule;
    std::size_t batch_size = 1000;
    std::size_t steps = 0;
    Vector u0;  // empty = zeros
    std::optional<Vector> reference_u;
    std::optional<Matrix> a_ref;
    std::shared_ptr<const EvalSet> eval;
    bool normalized_gradient = true;
    bool override_admissibility = false;
};

struct RunResult {
    RunTrace trace;
    IterationState final_state;
    PreconditionerFactor preconditioner;
};

/// Drives draw -> design -> statistics -> step for each k, recording one
/// trace row per executed step. A NonFiniteUpdate aborts the run but the
/// partial trace is preserved.
inline RunResult run(const RunConfig& config) {
    const std::size_t m = config.basis.size();
    const Matrix* a_ref = config.a_ref ? &*config.a_ref : nullptr;

    RunResult out{RunTrace{}, IterationState{}, assemble_preconditioner(
                                                    config.precond, config.gamma, m, a_ref)};
    RunTrace& trace = out.trace;
    if (out.preconditioner.admissibility) {
        trace.admissibility_checked = true;
        if (!out.preconditioner.admissibility->admissible) {
            if (!config.override_admissibility)
                throw NotAdmissible("run: preconditioner failed the relative-PD check");
            trace.admissibility_warning = true;
        }
    } else if (config.gamma > 0.0 || config.precond.b_tag != PreconditionerTag::Identity) {
        trace.admissibility_warning = true;  // could not be verified without a reference A
    }

    IterationState state;
    state.u = config.u0.empty() ? Vector(m, 0.0) : config.u0;
    if (state.u.size() != m) throw DimensionMismatch("run: u0 length != M");

    const double ref_norm = config.reference_u ? norm2(*config.reference_u) : 0.0;
    if (config.reference_u && ref_norm == 0.0) throw ZeroOracle("run: reference u has norm 0");

    SampleBatch batch;
    DesignMatrix design;
    BatchStatistics stats;
    trace.records.reserve(config.steps);
    for (std::size_t k = 1; k <= config.steps; ++k) {
        draw_batch_into(config.process, config.target, config.batch_size, k,
                        config.basis.context_lead(), config.basis.context_tail(), batch);
        eval_design_matrix_into(config.basis, batch, design);
        batch_statistics_into(design, batch.outputs, state.u, stats,
                              config.normalized_gradient);
        const double mu_k = schedule_value(config.schedule, k);

        TraceRecord rec;
        rec.k = k;
        rec.mu_k = mu_k;
        rec.residual_norm = norm2(stats.residual);
        try {
            state = psgm_step(std::move(state), stats, out.preconditioner, mu_k);
        } catch (const NonFiniteUpdate& err) {
            trace.aborted = true;
            trace.abort_reason = err.what();
            break;
        }
        if (config.reference_u) {
            double acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                const double d = state.u[j] - (*config.reference_u)[j];
                acc += d * d;
            }
            rec.relative_error = std::sqrt(acc) / ref_norm;
        }
        if (config.eval) rec.error_db = eval_error_db(config.basis, state.u, *config.eval);
        trace.records.push_back(rec);
    }
    out.final_state = std::move(state);
    return out;
}

}  // namespace psgm
