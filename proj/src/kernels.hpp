#pragma once

// Row-level numeric kernels shared by the tensor ops and the streaming
// inference path. Both paths must run the exact same floating-point
// operation sequence so that streaming outputs stay bitwise equal to the
// recorded-graph forward.

#include "ttt4rec/tensor.hpp"

#include <cmath>
#include <span>

namespace ttt4rec::detail {

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
inline double norm_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

inline double gelu_scalar(double x) { return x * norm_cdf(x); }
inline double gelu_prime_scalar(double x) { return norm_cdf(x) + x * norm_pdf(x); }
inline double gelu_second_scalar(double x) { return norm_pdf(x) * (2.0 - x * x); }

// out = A.x with A row-major m*n; ascending-column accumulation per row.
inline void matvec_into(const double* a, Index m, Index n, const double* x, double* out) {
    for (Index i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double acc = 0.0;
        for (Index j = 0; j < n; ++j) {
            acc += arow[j] * x[j];
        }
        out[i] = acc;
    }
}

// out = Aᵀ.y with A row-major m*n; ascending-row accumulation per column.
inline void matvec_t_into(const double* a, Index m, Index n, const double* y, double* out) {
    for (Index j = 0; j < n; ++j) {
        double acc = 0.0;
        for (Index i = 0; i < m; ++i) {
            acc += a[i * n + j] * y[i];
        }
        out[j] = acc;
    }
}

inline double dot_span(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

// Zero-mean unit-variance normalization over one row, then affine gain/bias.
// Population variance; sigma = sqrt(var + eps).
inline void layer_norm_row(std::span<const double> x, std::span<const double> gain,
                           std::span<const double> bias, double eps, std::span<double> out,
                           double* inv_sigma_out = nullptr, double* mean_out = nullptr) {
    const Index d = static_cast<Index>(x.size());
    double mean = 0.0;
    for (Index i = 0; i < d; ++i) {
        mean += x[static_cast<std::size_t>(i)];
    }
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (Index i = 0; i < d; ++i) {
        const double c = x[static_cast<std::size_t>(i)] - mean;
        var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv_sigma = 1.0 / std::sqrt(var + eps);
    for (Index i = 0; i < d; ++i) {
        const double normed = (x[static_cast<std::size_t>(i)] - mean) * inv_sigma;
        out[static_cast<std::size_t>(i)] =
            normed * gain[static_cast<std::size_t>(i)] + bias[static_cast<std::size_t>(i)];
    }
    if (inv_sigma_out) {
        *inv_sigma_out = inv_sigma;
    }
    if (mean_out) {
        *mean_out = mean;
    }
}

// In-place pairwise rotation of one row by position*freq[pair].
inline void rope_rotate_row(std::span<double> r, Index position,
                            std::span<const double> freqs) {
    const Index pairs = static_cast<Index>(freqs.size());
    for (Index j = 0; j < pairs; ++j) {
        const double angle = static_cast<double>(position) * freqs[static_cast<std::size_t>(j)];
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x = r[static_cast<std::size_t>(2 * j)];
        const double y = r[static_cast<std::size_t>(2 * j + 1)];
        r[static_cast<std::size_t>(2 * j)] = x * c - y * s;
        r[static_cast<std::size_t>(2 * j + 1)] = x * s + y * c;
    }
}

// One output row of the causal depthwise convolution. `history` supplies the
// kernel-width trailing input rows oldest-first; null rows read as zero.
inline void causal_conv_row(std::span<const double* const> history, const double* kernel,
                            Index width, Index channels, double* out) {
    for (Index d = 0; d < channels; ++d) {
        double acc = 0.0;
        for (Index j = 0; j < width; ++j) {
            const double* xr = history[static_cast<std::size_t>(j)];
            if (xr) {
                acc += kernel[j * channels + d] * xr[d];
            }
        }
        out[d] = acc;
    }
}

}  // namespace ttt4rec::detail
