#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "psgm/sampling.hpp"

using namespace psgm;

namespace {

ProcessSpec crf_mixture(std::uint64_t seed) {
    return ProcessSpec::gaussian_mixture({0.3, 0.6}, {0.01, 0.007}, {0.5, 0.5}, 0.0, 1.0, seed);
}

double normal_cdf(double x, double mu, double sigma) {
    return 0.5 * (1.0 + std::erf((x - mu) / (sigma * std::sqrt(2.0))));
}

}  // namespace

TEST_CASE("uniform process with identity target reproduces inputs") {
    const auto p = ProcessSpec::uniform(0.0, 1.0, 7);
    const auto f = user_target([](double x) { return x; });
    const auto batch = draw_batch(p, f, 5, 1);
    REQUIRE(batch.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) REQUIRE(batch.outputs[i] == batch.x(i));
}

TEST_CASE("gamma CRF fixes 0 and 1") {
    const auto f = gamma_crf();
    const Vector stream = {0.0, 1.0};
    REQUIRE(f.eval(stream, 0) == 0.0);
    REQUIRE(f.eval(stream, 1) == 1.0);
}

TEST_CASE("mixture empirical mean matches the component average") {
    const auto p = crf_mixture(2024);
    const auto batch = draw_batch(p, gamma_crf(), 100000, 3);
    double mean = 0.0;
    for (double x : batch.inputs) mean += x;
    mean /= static_cast<double>(batch.inputs.size());
    double var = 0.0;
    for (double x : batch.inputs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(batch.inputs.size());
    const double se = std::sqrt(var / static_cast<double>(batch.inputs.size()));
    REQUIRE(std::abs(mean - 0.45) <= 3.0 * se);
}

TEST_CASE("mixture pdf tails, symmetry, and mass") {
    const auto p = crf_mixture(1);
    REQUIRE(mixture_pdf(p, 0.9) < 1e-10);

    const auto sym =
        ProcessSpec::gaussian_mixture({0.3, 0.6}, {0.02, 0.02}, {0.5, 0.5}, 0.0, 1.0, 1);
    REQUIRE(mixture_pdf(sym, 0.3) == Catch::Approx(mixture_pdf(sym, 0.6)).epsilon(1e-12));

    // midpoint quadrature of the density over [0,1]
    const std::size_t qn = 1000000;
    double mass = 0.0;
    for (std::size_t i = 0; i < qn; ++i) {
        const double x = (static_cast<double>(i) + 0.5) / static_cast<double>(qn);
        mass += mixture_pdf(p, x);
    }
    mass /= static_cast<double>(qn);
    REQUIRE(mass == Catch::Approx(1.0).margin(1e-6));

    REQUIRE_THROWS_AS(mixture_pdf(ProcessSpec::uniform(0, 1, 1), 0.5), WrongProcessTag);
}

TEST_CASE("synthetic channel closed-form cases") {
    // all kernel weight on the center tap, no nonlinearity: identity
    const auto ident = synthetic_channel({1.0}, 0, 0.0, 0.0, 0.0);
    const Vector stream = {0.3, -0.8, 0.5};
    for (std::size_t i = 0; i < stream.size(); ++i) REQUIRE(ident.eval(stream, i) == stream[i]);

    // a3 = -0.1 at input 1.0: 1 - 0.1 = 0.9
    const auto cubic = synthetic_channel({1.0}, 0, -0.1, 0.0, 0.0);
    const Vector one = {1.0};
    REQUIRE(cubic.eval(one, 0) == Catch::Approx(0.9));

    // full 5-tap kernel on a known window, hand-computed FIR + polynomial
    const Vector kernel = {0.05, -0.2, 1.0, 0.3, -0.1};
    const auto chan = synthetic_channel(kernel, 2, -0.15, 0.04, 0.0);
    const Vector win = {0.4, -0.3, 0.7, 0.2, -0.5};
    // kernel center 2 pairs kernel[2] with the current sample (index 2);
    // kernel[i] picks stream[pos + center - i].
    double v = 0.0;
    v += kernel[0] * win[4];
    v += kernel[1] * win[3];
    v += kernel[2] * win[2];
    v += kernel[3] * win[1];
    v += kernel[4] * win[0];
    const double expect = v - 0.15 * v * v * v + 0.04 * v * v * v * v * v;
    REQUIRE(chan.eval(win, 2) == Catch::Approx(expect).epsilon(1e-14));
    REQUIRE(chan.context_before() == 2);
    REQUIRE(chan.context_after() == 2);
}

TEST_CASE("batch windows are disjoint and increasing") {
    const auto p = ProcessSpec::uniform(0.0, 1.0, 11);
    const auto f = gamma_crf();
    double prev_end = -1.0;
    for (std::size_t k = 1; k <= 1000; ++k) {
        const auto b = draw_batch(p, f, 16, k);
        REQUIRE(b.window_start > prev_end);
        REQUIRE(b.window_end >= b.window_start);
        prev_end = b.window_end;
    }
}

TEST_CASE("batches are reproducible and independent across k") {
    const auto p = crf_mixture(31);
    const auto f = gamma_crf();
    const auto a = draw_batch(p, f, 64, 9);
    const auto b = draw_batch(p, f, 64, 9);
    REQUIRE(a.inputs == b.inputs);
    REQUIRE(a.outputs == b.outputs);

    // chi-square independence on quartile-binned pairs from consecutive
    // batches of a uniform process (exact quartiles at .25/.5/.75)
    const auto pu = ProcessSpec::uniform(0.0, 1.0, 17);
    std::size_t counts[4][4] = {};
    const std::size_t pairs = 4000;
    double prev = draw_batch(pu, f, 1, 0).x(0);
    for (std::size_t k = 1; k <= pairs; ++k) {
        const double cur = draw_batch(pu, f, 1, k).x(0);
        const auto bin = [](double x) {
            return std::min<std::size_t>(3, static_cast<std::size_t>(x * 4.0));
        };
        ++counts[bin(prev)][bin(cur)];
        prev = cur;
    }
    const double expected = static_cast<double>(pairs) / 16.0;
    double stat = 0.0;
    for (auto& row : counts)
        for (std::size_t j = 0; j < 4; ++j) {
            const double d = static_cast<double>(row[j]) - expected;
            stat += d * d / expected;
        }
    // chi-square(9) 0.999 quantile
    REQUIRE(stat < 27.877);
}

TEST_CASE("mixture histogram matches the density in total variation") {
    const auto p = crf_mixture(55);
    const std::size_t n = 1000000;
    const auto batch = draw_batch(p, gamma_crf(), n, 1);
    const std::size_t bins = 100;
    Vector hist(bins, 0.0);
    for (double x : batch.inputs) {
        const std::size_t b =
            std::min(bins - 1, static_cast<std::size_t>(x * static_cast<double>(bins)));
        hist[b] += 1.0;
    }
    double tv = 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
        const double a = static_cast<double>(b) / static_cast<double>(bins);
        const double c = static_cast<double>(b + 1) / static_cast<double>(bins);
        double prob = 0.0;
        for (std::size_t i = 0; i < p.means.size(); ++i)
            prob += p.weights[i] *
                    (normal_cdf(c, p.means[i], p.sigmas[i]) - normal_cdf(a, p.means[i], p.sigmas[i]));
        tv += std::abs(hist[b] / static_cast<double>(n) - prob);
    }
    tv *= 0.5;
    REQUIRE(tv <= 0.01);
}

TEST_CASE("correlated stream has the requested lag-1 correlation") {
    const auto p = ProcessSpec::correlated_stream(0.6, 0.4, 23);
    const auto batch = draw_batch(p, user_target([](double x) { return x; }), 200000, 1);
    const auto& x = batch.inputs;
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double c0 = 0.0, c1 = 0.0;
    for (std::size_t i = 0; i + 1 < x.size(); ++i) {
        c0 += (x[i] - mean) * (x[i] - mean);
        c1 += (x[i] - mean) * (x[i + 1] - mean);
    }
    REQUIRE(c1 / c0 == Catch::Approx(0.6).margin(0.01));
}

TEST_CASE("draw_batch carries requested context and channel context stays internal") {
    const auto p = ProcessSpec::uniform(-1.0, 1.0, 77);
    const auto chan = synthetic_channel({0.2, 1.0, 0.1}, 1, 0.0, 0.0, 0.0);
    const auto b = draw_batch(p, chan, 10, 2, 3, 2);
    REQUIRE(b.inputs.size() == 3 + 10 + 2);
    REQUIRE(b.lead == 3);
    REQUIRE(b.tail == 2);
    REQUIRE_THROWS_AS(draw_batch(p, chan, 0, 1), EmptyBatch);

    // outputs equal the channel applied to the batch's own stored inputs:
    // y_i = 0.2 x(i+1) + 1.0 x(i) + 0.1 x(i-1) for this kernel/center
    for (std::size_t i = 0; i < 10; ++i) {
        const auto si = static_cast<std::ptrdiff_t>(i);
        const double expect = 0.2 * b.x(si + 1) + 1.0 * b.x(si) + 0.1 * b.x(si - 1);
        REQUIRE(b.outputs[i] == Catch::Approx(expect).epsilon(1e-14));
    }
}
