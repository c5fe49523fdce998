#pragma once

// Differentiable kernels for the two models: valid dilated 1-D convolution, ReLU, sigmoid,
// row-wise cosine and Pearson similarity, binary cross-entropy. Forward and backward passes are
// written out by hand; the models chain them in reverse order.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace eegmm {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// channels x time, row-major.
template <typename T>
struct Tensor2 {
    std::size_t channels = 0;
    std::size_t time = 0;
    std::vector<T> values;

    Tensor2() = default;
    Tensor2(std::size_t c, std::size_t t, T fill = T(0)) : channels(c), time(t), values(c * t, fill) {}

    T& operator()(std::size_t c, std::size_t t) { return values[c * time + t]; }
    T operator()(std::size_t c, std::size_t t) const { return values[c * time + t]; }
    std::span<T> row(std::size_t c) { return {values.data() + c * time, time}; }
    std::span<const T> row(std::size_t c) const { return {values.data() + c * time, time}; }

    [[nodiscard]] std::string shape() const
    {
        return "(" + std::to_string(channels) + " x " + std::to_string(time) + ")";
    }
};

/// weights laid out [out][in][tap]; bias may be empty.
template <typename T>
struct ConvKernel {
    std::size_t out_channels = 0;
    std::size_t in_channels = 0;
    std::size_t width = 1;
    std::size_t dilation = 1;
    std::vector<T> weights;
    std::vector<T> bias;

    [[nodiscard]] std::size_t extent() const { return dilation * (width - 1) + 1; }
};

/// Shape of a conv layer, for the span-based kernels.
struct ConvShape {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t width = 1;
    std::size_t dilation = 1;
    std::size_t in_time = 0;

    [[nodiscard]] std::size_t extent() const { return dilation * (width - 1) + 1; }
    [[nodiscard]] std::size_t out_time() const { return in_time - dilation * (width - 1); }
};

namespace detail {

template <typename T>
T dot(const T* a, const T* b, std::size_t n)
{
    // Eight independent partial sums: vectorizable, fixed summation order.
    T acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (std::size_t k = 0; k < 8; ++k) {
            acc[k] += a[i + k] * b[i + k];
        }
    }
    T tail = 0;
    for (; i < n; ++i) {
        tail += a[i] * b[i];
    }
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

template <typename T>
void axpy(T a, const T* x, T* y, std::size_t n)
{
    for (std::size_t i = 0; i < n; ++i) {
        y[i] += a * x[i];
    }
}

template <typename T>
T sum(const T* x, std::size_t n)
{
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += x[i];
    }
    return acc;
}

} // namespace detail

/// out[o][t] = bias[o] + sum_{i,j} w[o][i][j] * x[i][t + d*j]. `y` holds out_channels x out_time.
template <typename T>
void conv1d_forward(const ConvShape& s, std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y)
{
    const std::size_t to = s.out_time();
    for (std::size_t o = 0; o < s.out_channels; ++o) {
        T* yr = y.data() + o * to;
        const T b = bias.empty() ? T(0) : bias[o];
        for (std::size_t t = 0; t < to; ++t) {
            yr[t] = b;
        }
        for (std::size_t i = 0; i < s.in_channels; ++i) {
            const T* xr = x.data() + i * s.in_time;
            const T* wr = w.data() + (o * s.in_channels + i) * s.width;
            for (std::size_t j = 0; j < s.width; ++j) {
                detail::axpy(wr[j], xr + s.dilation * j, yr, to);
            }
        }
    }
}

/// Accumulates into gw, gb (if non-empty) and gx (if non-empty).
template <typename T>
void conv1d_backward(const ConvShape& s, std::span<const T> x, std::span<const T> w, std::span<const T> gy,
                     std::span<T> gx, std::span<T> gw, std::span<T> gb)
{
    const std::size_t to = s.out_time();
    for (std::size_t o = 0; o < s.out_channels; ++o) {
        const T* gyr = gy.data() + o * to;
        if (!gb.empty()) {
            gb[o] += detail::sum(gyr, to);
        }
        for (std::size_t i = 0; i < s.in_channels; ++i) {
            const T* xr = x.data() + i * s.in_time;
            const std::size_t wo = (o * s.in_channels + i) * s.width;
            for (std::size_t j = 0; j < s.width; ++j) {
                gw[wo + j] += detail::dot(gyr, xr + s.dilation * j, to);
                if (!gx.empty()) {
                    detail::axpy(w[wo + j], gyr, gx.data() + i * s.in_time + s.dilation * j, to);
                }
            }
        }
    }
}

template <typename T>
Tensor2<T> conv1d_valid(const Tensor2<T>& x, const ConvKernel<T>& k)
{
    if (k.width < 1 || k.dilation < 1) {
        throw DimensionError("kernel width and dilation must be >= 1");
    }
    if (x.channels != k.in_channels || x.time < k.extent()) {
        throw DimensionError("conv1d: input " + x.shape() + " incompatible with kernel (" +
                             std::to_string(k.out_channels) + " x " + std::to_string(k.in_channels) + " x " +
                             std::to_string(k.width) + ", dilation " + std::to_string(k.dilation) + ", extent " +
                             std::to_string(k.extent()) + ")");
    }
    if (k.weights.size() != k.out_channels * k.in_channels * k.width ||
        (!k.bias.empty() && k.bias.size() != k.out_channels)) {
        throw DimensionError("conv1d: kernel storage does not match its declared shape");
    }
    const ConvShape s{k.in_channels, k.out_channels, k.width, k.dilation, x.time};
    Tensor2<T> y(k.out_channels, s.out_time());
    conv1d_forward<T>(s, x.values, k.weights, k.bias, y.values);
    return y;
}

template <typename T>
void relu_inplace(std::span<T> x)
{
    for (auto& v : x) {
        v = v > T(0) ? v : T(0);
    }
}

template <typename T>
Tensor2<T> relu(Tensor2<T> x)
{
    relu_inplace<T>(x.values);
    return x;
}

/// g *= (y > 0), with y the ReLU output.
template <typename T>
void relu_backward(std::span<const T> y, std::span<T> g)
{
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!(y[i] > T(0))) {
            g[i] = T(0);
        }
    }
}

template <typename T>
T sigmoid(T x)
{
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
Tensor2<T> sigmoid(Tensor2<T> x)
{
    for (auto& v : x.values) {
        v = sigmoid(v);
    }
    return x;
}

// ---------------------------------------------------------------------------
// Similarities. Rows with zero norm (cosine) or zero variance (Pearson) score 0 with zero gradient.

template <typename T>
T cosine(std::span<const T> a, std::span<const T> b)
{
    const T ab = detail::dot(a.data(), b.data(), a.size());
    const T aa = detail::dot(a.data(), a.data(), a.size());
    const T bb = detail::dot(b.data(), b.data(), b.size());
    if (!(aa > T(0)) || !(bb > T(0))) {
        return T(0);
    }
    return ab / (std::sqrt(aa) * std::sqrt(bb));
}

/// Adds g * d cos(a, b)/da to ga and g * d cos(a, b)/db to gb (either may be empty).
template <typename T>
void cosine_backward(std::span<const T> a, std::span<const T> b, T g, std::span<T> ga, std::span<T> gb)
{
    const std::size_t n = a.size();
    const T ab = detail::dot(a.data(), b.data(), n);
    const T aa = detail::dot(a.data(), a.data(), n);
    const T bb = detail::dot(b.data(), b.data(), n);
    if (!(aa > T(0)) || !(bb > T(0))) {
        return;
    }
    const T na = std::sqrt(aa), nb = std::sqrt(bb);
    const T inv = T(1) / (na * nb);
    const T c = ab * inv;
    if (!ga.empty()) {
        const T kb = g * inv, ka = -g * c / aa;
        for (std::size_t i = 0; i < n; ++i) {
            ga[i] += kb * b[i] + ka * a[i];
        }
    }
    if (!gb.empty()) {
        const T ka = g * inv, kb = -g * c / bb;
        for (std::size_t i = 0; i < n; ++i) {
            gb[i] += ka * a[i] + kb * b[i];
        }
    }
}

template <typename T>
std::vector<T> cosine_rows(const Tensor2<T>& a, const Tensor2<T>& b)
{
    if (a.channels != b.channels || a.time != b.time) {
        throw DimensionError("cosine_rows: shapes " + a.shape() + " and " + b.shape() + " differ");
    }
    std::vector<T> out(a.channels);
    for (std::size_t c = 0; c < a.channels; ++c) {
        out[c] = cosine<T>(a.row(c), b.row(c));
    }
    return out;
}

namespace detail {

template <typename T>
std::vector<T> centered(std::span<const T> a)
{
    const T m = sum(a.data(), a.size()) / static_cast<T>(a.size());
    std::vector<T> out(a.begin(), a.end());
    for (auto& v : out) {
        v -= m;
    }
    return out;
}

template <typename T>
void remove_mean(std::span<T> g)
{
    const T m = sum(g.data(), g.size()) / static_cast<T>(g.size());
    for (auto& v : g) {
        v -= m;
    }
}

} // namespace detail

template <typename T>
T pearson(std::span<const T> a, std::span<const T> b)
{
    const auto ac = detail::centered(a);
    const auto bc = detail::centered(b);
    return cosine<T>(ac, bc);
}

/// Centering is a projection, so the cosine gradient of the centred rows is re-centred.
template <typename T>
void pearson_backward(std::span<const T> a, std::span<const T> b, T g, std::span<T> ga, std::span<T> gb)
{
    const auto ac = detail::centered(a);
    const auto bc = detail::centered(b);
    std::vector<T> tga(ga.empty() ? 0 : a.size(), T(0));
    std::vector<T> tgb(gb.empty() ? 0 : b.size(), T(0));
    cosine_backward<T>(ac, bc, g, tga, tgb);
    if (!ga.empty()) {
        detail::remove_mean<T>(tga);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += tga[i];
        }
    }
    if (!gb.empty()) {
        detail::remove_mean<T>(tgb);
        for (std::size_t i = 0; i < gb.size(); ++i) {
            gb[i] += tgb[i];
        }
    }
}

template <typename T>
std::vector<T> pearson_rows(const Tensor2<T>& a, const Tensor2<T>& b)
{
    if (a.channels != b.channels || a.time != b.time) {
        throw DimensionError("pearson_rows: shapes " + a.shape() + " and " + b.shape() + " differ");
    }
    std::vector<T> out(a.channels);
    for (std::size_t c = 0; c < a.channels; ++c) {
        out[c] = pearson<T>(a.row(c), b.row(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss

struct BceResult {
    double loss = 0.0;
    double dlogit = 0.0; // p - y
};

/// Binary cross-entropy of sigmoid(logit) against y in {0, 1}, evaluated in the overflow-free logit form
/// max(z, 0) - z*y + log(1 + exp(-|z|)).
inline BceResult bce_with_logit(double logit, double y)
{
    const double loss = std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
    return {loss, sigmoid(logit) - y};
}

/// Probability form; p is clamped away from 0 and 1 by the smallest double step.
inline double bce_loss(double p, double y)
{
    constexpr double tiny = 1e-300;
    return -(y * std::log(std::max(p, tiny)) + (1.0 - y) * std::log(std::max(1.0 - p, tiny)));
}

} // namespace eegmm
