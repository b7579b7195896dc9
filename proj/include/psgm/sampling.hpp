#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "psgm/numerics.hpp"

namespace psgm {

/// Stream-derived seed so that each batch index gets an independent engine.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return detail::splitmix64(base ^ (0x9e3779b97f4a7c15ULL * (stream + 0x51ULL)));
}

enum class ProcessTag { GaussianMixture, Uniform, CorrelatedStream };

/// Description of the stochastic process X(t) the inputs are drawn from.
struct ProcessSpec {
    ProcessTag tag = ProcessTag::Uniform;
    std::uint64_t seed = 0;

    // Gaussian mixture: component parameters plus the interval samples are
    // rejected into; Uniform: [lo, hi].
    Vector means;
    Vector sigmas;
    Vector weights;
    double lo = 0.0;
    double hi = 1.0;

    // AR(1) stream: x_t = correlation * x_{t-1} + innovation_sigma * eps_t,
    // started from the stationary distribution.
    double correlation = 0.0;
    double innovation_sigma = 1.0;

    static ProcessSpec gaussian_mixture(Vector means, Vector sigmas, Vector weights, double lo,
                                        double hi, std::uint64_t seed) {
        ProcessSpec p;
        p.tag = ProcessTag::GaussianMixture;
        p.means = std::move(means);
        p.sigmas = std::move(sigmas);
        p.weights = std::move(weights);
        p.lo = lo;
        p.hi = hi;
        p.seed = seed;
        p.validate();
        return p;
    }

    static ProcessSpec uniform(double lo, double hi, std::uint64_t seed) {
        ProcessSpec p;
        p.tag = ProcessTag::Uniform;
        p.lo = lo;
        p.hi = hi;
        p.seed = seed;
        p.validate();
        return p;
    }

    static ProcessSpec correlated_stream(double correlation, double innovation_sigma,
                                         std::uint64_t seed) {
        ProcessSpec p;
        p.tag = ProcessTag::CorrelatedStream;
        p.correlation = correlation;
        p.innovation_sigma = innovation_sigma;
        p.seed = seed;
        p.validate();
        return p;
    }

    void validate() const {
        switch (tag) {
            case ProcessTag::GaussianMixture: {
                if (means.empty() || means.size() != sigmas.size() ||
                    means.size() != weights.size())
                    throw ConfigError("mixture: means/sigmas/weights lengths differ");
                double wsum = 0.0;
                for (double w : weights) {
                    if (!(w > 0)) throw ConfigError("mixture: weights must be positive");
                    wsum += w;
                }
                if (std::abs(wsum - 1.0) > 1e-9)
                    throw ConfigError("mixture: weights must sum to 1");
                for (double s : sigmas)
                    if (!(s > 0)) throw ConfigError("mixture: sigmas must be positive");
                if (!(lo < hi)) throw ConfigError("mixture: lo must be < hi");
                break;
            }
            case ProcessTag::Uniform:
                if (!(lo < hi)) throw ConfigError("uniform: lo must be < hi");
                break;
            case ProcessTag::CorrelatedStream:
                if (!(std::abs(correlation) < 1.0))
                    throw ConfigError("correlated stream: |correlation| must be < 1");
                if (!(innovation_sigma > 0))
                    throw ConfigError("correlated stream: innovation sigma must be positive");
                break;
        }
    }
};

/// Normalized mixture density (integrates to 1 over the reals).
inline double mixture_pdf(const ProcessSpec& p, double x) {
    if (p.tag != ProcessTag::GaussianMixture)
        throw WrongProcessTag("mixture_pdf: process is not a Gaussian mixture");
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    double density = 0.0;
    for (std::size_t i = 0; i < p.means.size(); ++i) {
        const double z = (x - p.means[i]) / p.sigmas[i];
        density += p.weights[i] * inv_sqrt_2pi / p.sigmas[i] * std::exp(-0.5 * z * z);
    }
    return density;
}

enum class TargetTag { GammaCRF, SyntheticChannel, UserSupplied };

/// The unknown function observed through samples: y = f(x) (+ noise).
struct TargetFunction {
    TargetTag tag = TargetTag::GammaCRF;
    double exponent = 1.0 / 5.5;  // gamma-correction CRF model

    // Synthetic channel: odd polynomial v + a3 v^3 + a5 v^5 applied to a
    // short FIR combination of the sample window. kernel[kernel_center]
    // multiplies the current sample; earlier kernel entries reach into the
    // future, later ones into the past.
    Vector kernel;
    int kernel_center = 0;
    double a3 = 0.0;
    double a5 = 0.0;

    double noise_sigma = 0.0;
    std::function<double(double)> user_fn;

    int context_before() const {
        if (tag != TargetTag::SyntheticChannel || kernel.empty()) return 0;
        return static_cast<int>(kernel.size()) - 1 - kernel_center;
    }
    int context_after() const {
        if (tag != TargetTag::SyntheticChannel || kernel.empty()) return 0;
        return kernel_center;
    }

    /// Deterministic part of the observation at stream position pos.
    double eval(std::span<const double> stream, std::size_t pos) const {
        switch (tag) {
            case TargetTag::GammaCRF:
                return std::pow(std::max(stream[pos], 0.0), exponent);
            case TargetTag::UserSupplied:
                return user_fn(stream[pos]);
            case TargetTag::SyntheticChannel: {
                double v = 0.0;
                for (std::size_t i = 0; i < kernel.size(); ++i) {
                    const std::ptrdiff_t at = static_cast<std::ptrdiff_t>(pos) + kernel_center -
                                              static_cast<std::ptrdiff_t>(i);
                    v += kernel[i] * stream[static_cast<std::size_t>(at)];
                }
                const double v2 = v * v;
                return v * (1.0 + v2 * (a3 + v2 * a5));
            }
        }
        return 0.0;
    }
};

inline TargetFunction gamma_crf(double exponent = 1.0 / 5.5, double noise_sigma = 0.0) {
    TargetFunction f;
    f.tag = TargetTag::GammaCRF;
    f.exponent = exponent;
    f.noise_sigma = noise_sigma;
    return f;
}

inline TargetFunction synthetic_channel(Vector kernel, int kernel_center, double a3, double a5,
                                        double noise_sigma) {
    if (kernel.empty() || kernel.size() > 5)
        throw ConfigError("synthetic_channel: kernel must have 1..5 taps");
    if (kernel_center < 0 || kernel_center >= static_cast<int>(kernel.size()))
        throw ConfigError("synthetic_channel: kernel_center out of range");
    TargetFunction f;
    f.tag = TargetTag::SyntheticChannel;
    f.kernel = std::move(kernel);
    f.kernel_center = kernel_center;
    f.a3 = a3;
    f.a5 = a5;
    f.noise_sigma = noise_sigma;
    return f;
}

inline TargetFunction user_target(std::function<double(double)> fn, double noise_sigma = 0.0) {
    TargetFunction f;
    f.tag = TargetTag::UserSupplied;
    f.user_fn = std::move(fn);
    f.noise_sigma = noise_sigma;
    return f;
}

/// One iteration step worth of samples: inputs (with any requested leading /
/// trailing context) and the observed outputs for the N core positions.
struct SampleBatch {
    std::size_t k = 0;
    std::size_t lead = 0;
    std::size_t tail = 0;
    Vector inputs;   // lead + size() + tail values in time order
    Vector outputs;  // size() observations
    double window_start = 0.0;
    double window_end = 0.0;

    std::size_t size() const { return outputs.size(); }

    /// Core sample n in [0, size()); negative n reaches into the lead context.
    double x(std::ptrdiff_t n) const {
        return inputs[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(lead) + n)];
    }
};

namespace detail {

inline void draw_inputs(const ProcessSpec& p, std::mt19937_64& rng, std::span<double> out) {
    switch (p.tag) {
        case ProcessTag::Uniform: {
            std::uniform_real_distribution<double> u(p.lo, p.hi);
            for (double& x : out) x = u(rng);
            break;
        }
        case ProcessTag::GaussianMixture: {
            std::uniform_real_distribution<double> u01(0.0, 1.0);
            std::normal_distribution<double> gauss(0.0, 1.0);
            for (double& x : out) {
                for (int tries = 0;; ++tries) {
                    if (tries > 1000000)
                        throw Error("draw_batch: mixture rejection failed to land in [lo, hi]");
                    const double pick = u01(rng);
                    double acc = 0.0;
                    std::size_t c = p.means.size() - 1;
                    for (std::size_t i = 0; i < p.weights.size(); ++i) {
                        acc += p.weights[i];
                        if (pick <= acc) {
                            c = i;
                            break;
                        }
                    }
                    const double cand = p.means[c] + p.sigmas[c] * gauss(rng);
                    if (cand >= p.lo && cand <= p.hi) {
                        x = cand;
                        break;
                    }
                }
            }
            break;
        }
        case ProcessTag::CorrelatedStream: {
            std::normal_distribution<double> gauss(0.0, 1.0);
            const double stationary =
                p.innovation_sigma / std::sqrt(1.0 - p.correlation * p.correlation);
            double prev = stationary * gauss(rng);
            for (double& x : out) {
                x = prev;
                prev = p.correlation * prev + p.innovation_sigma * gauss(rng);
            }
            break;
        }
    }
}

}  // namespace detail

/// Draws batch k: fresh engine state derived from (seed, k), N core samples
/// plus the requested context, observations y = f(x) + noise. Batches for
/// distinct k occupy disjoint, increasing time windows.
inline void draw_batch_into(const ProcessSpec& p, const TargetFunction& f, std::size_t n,
                            std::size_t k, std::size_t lead, std::size_t tail, SampleBatch& out) {
    if (n == 0) throw EmptyBatch("draw_batch: batch size must be >= 1");
    std::mt19937_64 rng(derive_seed(p.seed, k));

    const std::size_t cb = lead + static_cast<std::size_t>(f.context_before());
    const std::size_t ca = tail + static_cast<std::size_t>(f.context_after());
    const std::size_t total = cb + n + ca;

    Vector& raw = out.inputs;
    raw.resize(total);
    detail::draw_inputs(p, rng, raw);

    out.outputs.resize(n);
    if (f.noise_sigma > 0.0) {
        std::normal_distribution<double> gauss(0.0, f.noise_sigma);
        for (std::size_t i = 0; i < n; ++i) out.outputs[i] = f.eval(raw, cb + i) + gauss(rng);
    } else {
        for (std::size_t i = 0; i < n; ++i) out.outputs[i] = f.eval(raw, cb + i);
    }

    // trim the channel's extra context away; keep exactly what was asked for
    const std::size_t begin = cb - lead;
    raw.erase(raw.begin() + static_cast<std::ptrdiff_t>(begin + lead + n + tail), raw.end());
    raw.erase(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(begin));

    out.k = k;
    out.lead = lead;
    out.tail = tail;
    out.window_start = static_cast<double>(k) * static_cast<double>(n + 1);
    out.window_end = out.window_start + static_cast<double>(n - 1);
}

inline SampleBatch draw_batch(const ProcessSpec& p, const TargetFunction& f, std::size_t n,
                              std::size_t k, std::size_t lead = 0, std::size_t tail = 0) {
    SampleBatch out;
    draw_batch_into(p, f, n, k, lead, tail, out);
    return out;
}

}  // namespace psgm
