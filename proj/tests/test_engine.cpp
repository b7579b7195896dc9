#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "psgm/engine.hpp"

using namespace psgm;

namespace {

Matrix random_spd(std::size_t n, std::mt19937_64& rng, double ridge = 0.25) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix g(n, n);
    for (auto& x : g.storage()) x = gauss(rng);
    Matrix a = matmul(transpose(g), g);
    for (auto& x : a.storage()) x /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) a(i, i) += ridge;
    return symmetric_part(a);
}

DesignMatrix dense_design(Matrix m) {
    DesignMatrix d;
    d.n = m.rows();
    d.m = m.cols();
    d.dense_rows = std::move(m);
    return d;
}

BatchStatistics stats_from(const Matrix& a, const Vector& b) {
    BatchStatistics s;
    s.a = a;
    s.b = b;
    s.residual = {};
    return s;
}

}  // namespace

TEST_CASE("batch statistics on an identity design") {
    const std::size_t m = 4;
    const auto design = dense_design(Matrix::identity(m));
    const Vector y = {2.0, -1.0, 0.5, 4.0};
    const Vector u0(m, 0.0);
    const auto s = batch_statistics(design, y, u0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j)
            REQUIRE(s.a(i, j) == (i == j ? 0.25 : 0.0));
        REQUIRE(s.b[i] == y[i] / 4.0);
        REQUIRE(s.residual[i] == y[i]);
    }
}

TEST_CASE("batch statistics for a single-bin LUT batch") {
    const auto lut = BasisFamily::piecewise_constant(5, 0.0, 1.0);
    SampleBatch batch;
    batch.inputs.assign(8, 0.55);  // every sample lands in bin 3
    batch.outputs.assign(8, 2.0);
    const auto design = eval_design_matrix(lut, batch);
    const auto s = batch_statistics(design, batch.outputs, Vector(5, 0.0));
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j)
            REQUIRE(s.a(i, j) == ((i == 2 && j == 2) ? 1.0 : 0.0));
    REQUIRE(s.b[2] == 2.0);
}

TEST_CASE("batch statistics match a naive triple-loop oracle") {
    std::mt19937_64 rng(15);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix phi(6, 3);
    for (auto& x : phi.storage()) x = gauss(rng);
    Vector y(6), u(3);
    for (auto& v : y) v = gauss(rng);
    for (auto& v : u) v = gauss(rng);

    const auto s = batch_statistics(dense_design(phi), y, u);

    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (std::size_t n = 0; n < 6; ++n) acc += phi(n, i) * phi(n, j);
            acc /= 6.0;
            REQUIRE(s.a(i, j) == Catch::Approx(acc).margin(1e-12));
        }
        double bacc = 0.0;
        for (std::size_t n = 0; n < 6; ++n) bacc += phi(n, i) * y[n];
        REQUIRE(s.b[i] == Catch::Approx(bacc / 6.0).margin(1e-12));
    }
    for (std::size_t n = 0; n < 6; ++n) {
        double fit = 0.0;
        for (std::size_t j = 0; j < 3; ++j) fit += phi(n, j) * u[j];
        REQUIRE(s.residual[n] == Catch::Approx(y[n] - fit).margin(1e-12));
    }
    // gradient identity: b - A u == (1/N) Phi^T r
    for (std::size_t j = 0; j < 3; ++j) {
        double lhs = s.b[j];
        for (std::size_t l = 0; l < 3; ++l) lhs -= s.a(j, l) * u[l];
        double rhs = 0.0;
        for (std::size_t n = 0; n < 6; ++n) rhs += phi(n, j) * s.residual[n];
        REQUIRE(lhs == Catch::Approx(rhs / 6.0).margin(1e-12));
    }
}

TEST_CASE("psgm_step closed-form cases") {
    std::mt19937_64 rng(21);
    const Matrix a = random_spd(5, rng);
    Vector b(5);
    for (auto& v : b) v = std::uniform_real_distribution<double>(-1, 1)(rng);

    PreconditionerSpec ident;
    const auto p = assemble_preconditioner(ident, 0.0, 5);

    // B=I, gamma=0, mu=1, u0=0: one step lands on b
    IterationState z{0, Vector(5, 0.0)};
    const auto one = psgm_step(z, stats_from(a, b), p, 1.0);
    REQUIRE(one.k == 1);
    for (std::size_t j = 0; j < 5; ++j) REQUIRE(one.u[j] == b[j]);

    // zero gradient is a fixed point
    const Vector fixed = lu_solve(a, b);
    const auto held = psgm_step(IterationState{3, fixed}, stats_from(a, b), p, 0.7);
    for (std::size_t j = 0; j < 5; ++j)
        REQUIRE(held.u[j] == Catch::Approx(fixed[j]).margin(1e-12));

    // B = A_k explicit, mu=1, u0=0: the per-batch least-squares solution
    PreconditionerSpec full;
    full.b_tag = PreconditionerTag::FullA;
    const auto pa = assemble_preconditioner(full, 0.0, 5, &a);
    const auto ls = psgm_step(IterationState{0, Vector(5, 0.0)}, stats_from(a, b), pa, 1.0);
    const Vector oracle = lu_solve(a, b);
    for (std::size_t j = 0; j < 5; ++j)
        REQUIRE(ls.u[j] == Catch::Approx(oracle[j]).margin(1e-10));
}

TEST_CASE("psgm_step matches plain SGM bitwise when B=I, gamma=0") {
    std::mt19937_64 rng(23);
    const std::size_t m = 7;
    PreconditionerSpec ident;
    const auto p = assemble_preconditioner(ident, 0.0, m);
    const Matrix a = random_spd(m, rng);
    Vector b(m), u(m);
    for (auto& v : b) v = std::normal_distribution<double>()(rng);
    for (auto& v : u) v = std::normal_distribution<double>()(rng);

    const double mu = 0.37;
    const auto stepped = psgm_step(IterationState{0, u}, stats_from(a, b), p, mu);
    // plain SGM Eq. u + mu * (b - A u), same arithmetic path
    for (std::size_t j = 0; j < m; ++j) {
        const double g = b[j] - dot(a.row(j), u);
        const double expect = u[j] + mu * g;
        REQUIRE(stepped.u[j] == expect);  // bitwise
    }
}

TEST_CASE("closure form of psgm_step agrees with the explicit Gram") {
    std::mt19937_64 rng(29);
    const Matrix a = random_spd(6, rng);
    Vector b(6), u(6);
    for (auto& v : b) v = std::normal_distribution<double>()(rng);
    for (auto& v : u) v = std::normal_distribution<double>()(rng);
    PreconditionerSpec spec;
    spec.constraint = ConstraintOperator::first_difference(6);
    const auto p = assemble_preconditioner(spec, 0.05, 6);

    const auto explicit_step = psgm_step(IterationState{0, u}, stats_from(a, b), p, 0.4);
    const auto closure_step = psgm_step(
        IterationState{0, u}, b,
        [&](std::span<const double> x, std::span<double> out) {
            for (std::size_t j = 0; j < 6; ++j) out[j] = dot(a.row(j), x);
        },
        p, 0.4);
    for (std::size_t j = 0; j < 6; ++j)
        REQUIRE(explicit_step.u[j] == Catch::Approx(closure_step.u[j]).margin(1e-15));
}

TEST_CASE("schedule values reproduce the printed rules") {
    const auto inv = StepSchedule::inverse_decay(1.0, 1.0);
    REQUIRE(schedule_value(inv, 1) == Catch::Approx(1.0));
    REQUIRE(schedule_value(inv, 2) == Catch::Approx(0.5));
    REQUIRE(schedule_value(inv, 3) == Catch::Approx(1.0 / 3.0));

    const auto flat = StepSchedule::constant(0.1);
    for (std::size_t k : {1u, 17u, 100000u}) REQUIRE(schedule_value(flat, k) == 0.1);

    const auto sw = StepSchedule::switch_at(0.01, 1000);
    REQUIRE(schedule_value(sw, 999) == 0.01);
    REQUIRE(schedule_value(sw, 1000) == 0.01);
    REQUIRE(schedule_value(sw, 1001) == Catch::Approx(1.0));
    REQUIRE(schedule_value(sw, 1101) == Catch::Approx(1.0 / 101.0));

    REQUIRE(flat.sum_diverges());
    REQUIRE_FALSE(flat.sum_squares_finite());
    REQUIRE(inv.sum_diverges());
    REQUIRE(inv.sum_squares_finite());
    REQUIRE(sw.sum_squares_finite());
}

TEST_CASE("batch least squares and the empty-bin failure") {
    // A_k = I: solution is b
    const Vector v = {1.0, 2.0, 3.0};
    REQUIRE(batch_least_squares(stats_from(Matrix::identity(3), v)) == v);

    // LUT batch leaving bin 4 empty
    const auto lut = BasisFamily::piecewise_constant(4, 0.0, 1.0);
    SampleBatch batch;
    batch.inputs = {0.1, 0.3, 0.6, 0.65, 0.2};
    batch.outputs = {1.0, 1.2, 2.0, 2.1, 1.1};
    const auto design = eval_design_matrix(lut, batch);
    const auto s = batch_statistics(design, batch.outputs, Vector(4, 0.0));
    REQUIRE_THROWS_AS(batch_least_squares(s), NotPositiveDefinite);

    const Matrix c = constraint_gram(ConstraintOperator::first_difference(4), 1);
    const Vector healed = batch_least_squares(s, Vector(4, 0.0), 0.02, c);
    REQUIRE(healed.size() == 4);
    for (double x : healed) REQUIRE(std::isfinite(x));
}

TEST_CASE("run with zero steps returns the initial state") {
    auto cfg = RunConfig(ProcessSpec::uniform(0.0, 1.0, 5), gamma_crf(),
                         BasisFamily::monomial(2, 0.0, 1.0));
    cfg.steps = 0;
    const auto result = run(cfg);
    REQUIRE(result.trace.records.empty());
    REQUIRE_FALSE(result.trace.aborted);
    REQUIRE(result.final_state.u == Vector{0.0, 0.0});
}

TEST_CASE("run approaches the representable target") {
    // identity target on Uniform[0,1] with the {1, x} basis: u_hat = (0, 1)
    auto cfg = RunConfig(ProcessSpec::uniform(0.0, 1.0, 31),
                         user_target([](double x) { return x; }),
                         BasisFamily::monomial(2, 0.0, 1.0));
    cfg.schedule = StepSchedule::constant(0.5);
    cfg.steps = 500;
    cfg.batch_size = 50;
    cfg.reference_u = Vector{0.0, 1.0};
    const auto result = run(cfg);
    REQUIRE(result.trace.records.size() == 500);
    REQUIRE(result.trace.records.back().relative_error <= 0.05);
}

TEST_CASE("run aborts on a non-finite update and keeps the partial trace") {
    auto cfg = RunConfig(ProcessSpec::uniform(0.0, 1.0, 77),
                         user_target([](double x) { return x; }),
                         BasisFamily::monomial(3, 0.0, 1.0));
    cfg.schedule = StepSchedule::constant(1e160);  // wildly unstable
    cfg.steps = 200;
    cfg.batch_size = 16;
    const auto result = run(cfg);
    REQUIRE(result.trace.aborted);
    REQUIRE(!result.trace.abort_reason.empty());
    REQUIRE(result.trace.records.size() < 200);
}

TEST_CASE("one-step mean contraction on deterministic batches") {
    std::mt19937_64 rng(51);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = std::uniform_int_distribution<std::size_t>(2, 10)(rng);
        const Matrix a = random_spd(m, rng);
        Vector b(m);
        for (auto& v : b) v = std::normal_distribution<double>()(rng);
        const Vector u_hat = lu_solve(a, b);

        PreconditionerSpec spec;
        spec.constraint = ConstraintOperator::first_difference(m);
        const auto lp = lemma1_params(a, spec, 0.02);
        const double gamma = lp.gamma0;
        const auto p = assemble_preconditioner(spec, gamma, m);

        IterationState state{0, Vector(m, 0.0)};
        const double mu = 0.8 * lp.mu0;
        const double factor = std::abs(1.0 - mu * lp.lambda);
        for (int step = 0; step < 30; ++step) {
            double before = 0.0;
            for (std::size_t j = 0; j < m; ++j)
                before += (state.u[j] - u_hat[j]) * (state.u[j] - u_hat[j]);
            state = psgm_step(std::move(state), stats_from(a, b), p, mu);
            double after = 0.0;
            for (std::size_t j = 0; j < m; ++j)
                after += (state.u[j] - u_hat[j]) * (state.u[j] - u_hat[j]);
            REQUIRE(std::sqrt(after) <= factor * std::sqrt(before) + 1e-9);
        }
    }
}

TEST_CASE("soft constraint leaves the deterministic fixed point unchanged") {
    std::mt19937_64 rng(53);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = std::uniform_int_distribution<std::size_t>(3, 8)(rng);
        const Matrix a = random_spd(m, rng, 0.6);
        Vector b(m);
        for (auto& v : b) v = std::normal_distribution<double>()(rng);

        PreconditionerSpec spec;
        spec.b_tag = trial % 2 == 0 ? PreconditionerTag::Identity : PreconditionerTag::DiagOfA;
        spec.constraint = ConstraintOperator::first_difference(m);
        const double gamma = trial % 3 == 0 ? 0.0 : 0.05 * static_cast<double>(trial);
        Lemma1Params lp;
        try {
            lp = lemma1_params(a, spec, gamma, 11, &a);
        } catch (const NotAdmissible&) {
            continue;
        }
        if (lp.gamma0 < gamma) continue;
        const auto p = assemble_preconditioner(spec, gamma, m, &a);

        IterationState state{0, Vector(m, 0.0)};
        for (int step = 0; step < 20000; ++step)
            state = psgm_step(std::move(state), stats_from(a, b), p, lp.mu0);

        // fixed point solves A u = b regardless of (B, gamma, C)
        double resid = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double r = dot(a.row(j), state.u) - b[j];
            resid += r * r;
        }
        REQUIRE(std::sqrt(resid) <= 1e-8 * std::max(1.0, norm2(b)));
    }
}

TEST_CASE("identical configs yield identical traces") {
    auto make = [] {
        auto cfg = RunConfig(
            ProcessSpec::gaussian_mixture({0.3, 0.6}, {0.01, 0.007}, {0.5, 0.5}, 0, 1, 2718),
            gamma_crf(), BasisFamily::monomial(4, 0.0, 1.0));
        cfg.schedule = StepSchedule::switch_at(0.05, 40);
        cfg.steps = 80;
        cfg.batch_size = 64;
        cfg.gamma = 0.02;
        cfg.precond.constraint = ConstraintOperator::first_difference(4);
        return cfg;
    };
    const auto r1 = run(make());
    const auto r2 = run(make());
    REQUIRE(r1.final_state.u == r2.final_state.u);
    REQUIRE(r1.trace.records.size() == r2.trace.records.size());
    for (std::size_t i = 0; i < r1.trace.records.size(); ++i) {
        REQUIRE(r1.trace.records[i].residual_norm == r2.trace.records[i].residual_norm);
        REQUIRE(r1.trace.records[i].mu_k == r2.trace.records[i].mu_k);
    }
}
