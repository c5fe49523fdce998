#include "eegmm/signal.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace eegmm {

namespace {

using cplx = std::complex<double>;
constexpr double kPi = std::numbers::pi;

std::string fmt_hz(double v)
{
    std::ostringstream os;
    os << v << " Hz";
    return os.str();
}

} // namespace

// ---------------------------------------------------------------------------
// Gammatone

double erb_bandwidth(double hz) { return 24.7 * (4.37e-3 * hz + 1.0); }
double erb_rate(double hz) { return 21.4 * std::log10(4.37e-3 * hz + 1.0); }
double erb_rate_to_hz(double erb) { return (std::pow(10.0, erb / 21.4) - 1.0) / 4.37e-3; }

GammatoneBank GammatoneBank::erb_spaced(double rate, std::size_t subbands, double low_hz, double high_hz)
{
    if (subbands < 1) {
        throw ConfigError("gammatone filterbank needs at least one subband");
    }
    if (!(rate > 0.0)) {
        throw ConfigError("gammatone filterbank rate must be positive");
    }
    if (high_hz >= rate / 2.0) {
        throw ConfigError("highest gammatone centre frequency " + fmt_hz(high_hz) + " is not below Nyquist " +
                          fmt_hz(rate / 2.0));
    }
    GammatoneBank bank;
    bank.rate = rate;
    const double e0 = erb_rate(low_hz);
    const double e1 = erb_rate(high_hz);
    for (std::size_t k = 0; k < subbands; ++k) {
        const double frac = subbands == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(subbands - 1);
        const double fc = erb_rate_to_hz(e0 + frac * (e1 - e0));
        bank.centers.push_back(fc);
        bank.bandwidths.push_back(1.019 * erb_bandwidth(fc));
    }
    return bank;
}

MultichannelSeries gammatone_subbands(const Waveform& audio, const GammatoneBank& bank)
{
    if (audio.rate != bank.rate) {
        throw ConfigError("audio rate does not match gammatone bank rate");
    }
    const std::size_t n = audio.samples.size();
    MultichannelSeries out(bank.centers.size(), n, audio.rate);
    for (std::size_t k = 0; k < bank.centers.size(); ++k) {
        // Four cascaded complex one-pole resonators: (1 - a z^-1)^-4, a = lambda e^{i beta}.
        const double lambda = std::exp(-2.0 * kPi * bank.bandwidths[k] / audio.rate);
        const double beta = 2.0 * kPi * bank.centers[k] / audio.rate;
        const cplx a = std::polar(lambda, beta);
        // Real input splits evenly between +/- frequency; the real part then has unit gain at fc.
        const double gain = 2.0 * std::pow(1.0 - lambda, 4);
        cplx s1{}, s2{}, s3{}, s4{};
        auto dst = out.channel(k);
        for (std::size_t t = 0; t < n; ++t) {
            s1 = a * s1 + gain * audio.samples[t];
            s2 = a * s2 + s1;
            s3 = a * s3 + s2;
            s4 = a * s4 + s3;
            dst[t] = s4.real();
        }
    }
    return out;
}

MultichannelSeries gammatone_envelope(const Waveform& audio, std::size_t subbands, double compression)
{
    const auto bank = GammatoneBank::erb_spaced(audio.rate, subbands);
    const auto sub = gammatone_subbands(audio, bank);
    const std::size_t n = audio.samples.size();
    MultichannelSeries env(1, n, audio.rate);
    auto dst = env.channel(0);
    for (std::size_t k = 0; k < sub.channels(); ++k) {
        auto src = sub.channel(k);
        for (std::size_t t = 0; t < n; ++t) {
            dst[t] += std::pow(std::abs(src[t]), compression);
        }
    }
    const double inv = 1.0 / static_cast<double>(sub.channels());
    for (auto& v : dst) {
        v *= inv;
    }
    return env;
}

// ---------------------------------------------------------------------------
// Bands

BandSpec BandSpec::named(std::string_view label)
{
    struct Named {
        std::string_view name;
        double low, high;
    };
    static constexpr Named kBands[] = {
        {"delta", 0.5, 4.0}, {"theta", 4.0, 8.0}, {"alpha", 8.0, 14.0}, {"beta", 14.0, 32.0}};
    if (label == "broadband") {
        return {0.5, 32.0, "broadband"};
    }
    BandSpec out{0.0, 0.0, std::string(label)};
    std::size_t pos = 0;
    bool first = true;
    while (pos <= label.size()) {
        const auto next = label.find('+', pos);
        const auto part = label.substr(pos, next == std::string_view::npos ? label.size() - pos : next - pos);
        const Named* hit = nullptr;
        for (const auto& b : kBands) {
            if (b.name == part) {
                hit = &b;
            }
        }
        if (hit == nullptr) {
            throw ConfigError("unknown band label '" + std::string(part) + "'");
        }
        if (first) {
            out.low = hit->low;
            out.high = hit->high;
            first = false;
        } else if (hit->low == out.high) {
            out.high = hit->high;
        } else if (hit->high == out.low) {
            out.low = hit->low;
        } else {
            throw ConfigError("band combination '" + std::string(label) + "' is not contiguous");
        }
        if (next == std::string_view::npos) {
            break;
        }
        pos = next + 1;
    }
    return out;
}

std::vector<BandSpec> BandSpec::sweep_set()
{
    std::vector<BandSpec> out;
    for (const char* l : {"delta", "theta", "alpha", "beta", "broadband", "delta+theta", "delta+theta+alpha",
                          "delta+theta+alpha+beta"}) {
        out.push_back(named(l));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Chebyshev II design

namespace {

struct Zpk {
    std::vector<cplx> z;
    std::vector<cplx> p;
    double k = 1.0;
};

// Analog lowpass prototype with the stopband edge at 1 rad/s.
Zpk cheb2_prototype(int order, double rs_db)
{
    Zpk out;
    const double de = 1.0 / std::sqrt(std::pow(10.0, 0.1 * rs_db) - 1.0);
    const double mu = std::asinh(1.0 / de) / order;
    for (int m = -order + 1; m < order; m += 2) {
        if (order % 2 == 1 && m == 0) {
            continue; // zero at infinity
        }
        out.z.push_back(-std::conj(cplx(0.0, 1.0) / std::sin(m * kPi / (2.0 * order))));
    }
    for (int m = -order + 1; m < order; m += 2) {
        const cplx e = -std::exp(cplx(0.0, kPi * m / (2.0 * order)));
        const cplx pi(std::sinh(mu) * e.real(), std::cosh(mu) * e.imag());
        out.p.push_back(1.0 / pi);
    }
    cplx num(1.0), den(1.0);
    for (const auto& p : out.p) {
        num *= -p;
    }
    for (const auto& z : out.z) {
        den *= -z;
    }
    out.k = (num / den).real();
    return out;
}

Zpk lowpass_to_bandpass(const Zpk& lp, double w0, double bw)
{
    Zpk out;
    auto map = [&](const cplx& r, std::vector<cplx>& dst) {
        const cplx s = r * (bw / 2.0);
        const cplx d = std::sqrt(s * s - w0 * w0);
        dst.push_back(s + d);
        dst.push_back(s - d);
    };
    for (const auto& z : lp.z) {
        map(z, out.z);
    }
    for (const auto& p : lp.p) {
        map(p, out.p);
    }
    const std::size_t degree = lp.p.size() - lp.z.size();
    for (std::size_t i = 0; i < degree; ++i) {
        out.z.emplace_back(0.0, 0.0);
    }
    out.k = lp.k * std::pow(bw, static_cast<double>(degree));
    return out;
}

Zpk bilinear(const Zpk& a, double fs)
{
    Zpk out;
    const double fs2 = 2.0 * fs;
    cplx num(1.0), den(1.0);
    for (const auto& z : a.z) {
        out.z.push_back((fs2 + z) / (fs2 - z));
        num *= (fs2 - z);
    }
    for (const auto& p : a.p) {
        out.p.push_back((fs2 + p) / (fs2 - p));
        den *= (fs2 - p);
    }
    for (std::size_t i = a.z.size(); i < a.p.size(); ++i) {
        out.z.emplace_back(-1.0, 0.0);
    }
    out.k = a.k * (num / den).real();
    return out;
}

// Group roots into conjugate (or real) pairs.
std::vector<std::pair<cplx, cplx>> pair_roots(std::vector<cplx> roots)
{
    constexpr double tol = 1e-9;
    std::vector<std::pair<cplx, cplx>> pairs;
    std::vector<cplx> reals;
    std::vector<bool> used(roots.size(), false);
    for (std::size_t i = 0; i < roots.size(); ++i) {
        if (used[i]) {
            continue;
        }
        if (std::abs(roots[i].imag()) <= tol * std::max(1.0, std::abs(roots[i]))) {
            reals.emplace_back(roots[i].real(), 0.0);
            used[i] = true;
            continue;
        }
        std::size_t best = roots.size();
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t j = i + 1; j < roots.size(); ++j) {
            if (!used[j]) {
                const double d = std::abs(roots[j] - std::conj(roots[i]));
                if (d < best_d) {
                    best_d = d;
                    best = j;
                }
            }
        }
        if (best == roots.size()) {
            throw DesignError("unpaired complex root in filter design");
        }
        used[i] = used[best] = true;
        const cplx r = roots[i].imag() > 0 ? roots[i] : std::conj(roots[i]);
        pairs.emplace_back(r, std::conj(r));
    }
    std::sort(reals.begin(), reals.end(), [](const cplx& a, const cplx& b) { return a.real() < b.real(); });
    if (reals.size() % 2 != 0) {
        throw DesignError("odd number of real roots in filter design");
    }
    for (std::size_t i = 0; i < reals.size(); i += 2) {
        pairs.emplace_back(reals[i], reals[i + 1]);
    }
    return pairs;
}

std::vector<Biquad> zpk_to_sos(const Zpk& d, double center_rad)
{
    auto pole_pairs = pair_roots(d.p);
    auto zero_pairs = pair_roots(d.z);
    if (pole_pairs.size() != zero_pairs.size()) {
        throw DesignError("pole/zero section count mismatch");
    }
    // Poles nearest the unit circle go last.
    std::sort(pole_pairs.begin(), pole_pairs.end(),
              [](const auto& a, const auto& b) { return std::abs(a.first) < std::abs(b.first); });
    std::vector<Biquad> out;
    std::vector<bool> used(zero_pairs.size(), false);
    const cplx ejw = std::polar(1.0, center_rad);
    cplx total(1.0);
    for (auto it = pole_pairs.rbegin(); it != pole_pairs.rend(); ++it) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < zero_pairs.size(); ++j) {
            if (used[j]) {
                continue;
            }
            const double dd = std::min(std::abs(zero_pairs[j].first - it->first),
                                       std::abs(zero_pairs[j].second - it->first));
            if (dd < best_d) {
                best_d = dd;
                best = j;
            }
        }
        used[best] = true;
        const auto& zp = zero_pairs[best];
        Biquad q;
        q.b0 = 1.0;
        q.b1 = -(zp.first + zp.second).real();
        q.b2 = (zp.first * zp.second).real();
        q.a1 = -(it->first + it->second).real();
        q.a2 = (it->first * it->second).real();
        const cplx zi = 1.0 / ejw;
        const cplx h = (q.b0 + q.b1 * zi + q.b2 * zi * zi) / (1.0 + q.a1 * zi + q.a2 * zi * zi);
        const double g = 1.0 / std::abs(h);
        q.b0 *= g;
        q.b1 *= g;
        q.b2 *= g;
        total *= h * g;
        out.push_back(q);
    }
    std::reverse(out.begin(), out.end());
    // Unit magnitude at the centre; keep the sign of the true zpk gain.
    if ((total.real() < 0.0) != (d.k < 0.0) && !out.empty()) {
        out.front().b0 = -out.front().b0;
        out.front().b1 = -out.front().b1;
        out.front().b2 = -out.front().b2;
    }
    return out;
}

} // namespace

std::complex<double> frequency_response(std::span<const Biquad> sections, double hz, double rate)
{
    const cplx zi = std::polar(1.0, -2.0 * kPi * hz / rate);
    const cplx zi2 = zi * zi;
    cplx h(1.0);
    for (const auto& q : sections) {
        h *= (q.b0 + q.b1 * zi + q.b2 * zi2) / (1.0 + q.a1 * zi + q.a2 * zi2);
    }
    return h;
}

DesignCheck check_design(const FilterDesign& f, std::size_t grid_points)
{
    DesignCheck out;
    const double nyq = f.rate / 2.0;
    std::vector<double> grid;
    grid.reserve(2 * grid_points + 8);
    // Linear grid plus a log grid so narrow low-frequency transitions are sampled densely.
    for (std::size_t i = 0; i <= grid_points; ++i) {
        grid.push_back(nyq * static_cast<double>(i) / static_cast<double>(grid_points));
    }
    const double lo = f.stop_low_hz * 1e-3;
    for (std::size_t i = 0; i <= grid_points; ++i) {
        grid.push_back(lo * std::pow(nyq / lo, static_cast<double>(i) / static_cast<double>(grid_points)));
    }
    for (double e : {f.band.low, f.band.high, f.stop_low_hz, f.stop_high_hz}) {
        grid.push_back(e);
    }
    double peak = 0.0;
    double pass_min = std::numeric_limits<double>::infinity();
    double pass_max = 0.0;
    double stop_max = 0.0;
    for (double hz : grid) {
        const double m = std::abs(frequency_response(f, hz));
        peak = std::max(peak, m);
        if (hz >= f.band.low && hz <= f.band.high) {
            pass_min = std::min(pass_min, m);
            pass_max = std::max(pass_max, m);
        }
        if (hz <= f.stop_low_hz || hz >= f.stop_high_hz) {
            stop_max = std::max(stop_max, m);
        }
    }
    out.stopband_attenuation_db = 20.0 * std::log10(peak / std::max(stop_max, 1e-300));
    out.passband_ripple_db = 20.0 * std::log10(pass_max / pass_min);
    for (const auto& q : f.sections) {
        // Roots of z^2 + a1 z + a2.
        const cplx disc = std::sqrt(cplx(q.a1 * q.a1 - 4.0 * q.a2, 0.0));
        out.max_pole_radius = std::max({out.max_pole_radius, std::abs((-q.a1 + disc) / 2.0),
                                        std::abs((-q.a1 - disc) / 2.0)});
    }
    out.passed = out.stopband_attenuation_db >= f.stopband_attenuation_db &&
                 out.passband_ripple_db <= f.passband_ripple_db && out.max_pole_radius < 1.0;
    return out;
}

FilterDesign design_bandpass(const BandSpec& band, double rate, const BandpassOptions& opts)
{
    const double nyq = rate / 2.0;
    if (!(band.low > 0.0 && band.low < band.high && band.high < nyq)) {
        throw DesignError("band " + band.label + " (" + fmt_hz(band.low) + ", " + fmt_hz(band.high) +
                          ") requires 0 < low < high < Nyquist " + fmt_hz(nyq));
    }
    FilterDesign f;
    f.rate = rate;
    f.band = band;
    f.stop_low_hz = band.low * opts.low_stop_factor;
    f.stop_high_hz = band.high * opts.high_stop_factor;
    f.stopband_attenuation_db = opts.stopband_attenuation_db;
    f.passband_ripple_db = opts.passband_ripple_db;
    if (f.stop_high_hz >= nyq) {
        throw DesignError("upper stopband edge " + fmt_hz(f.stop_high_hz) + " is not below Nyquist " + fmt_hz(nyq));
    }

    auto warp = [&](double hz) { return 2.0 * rate * std::tan(kPi * hz / rate); };
    const double wp1 = warp(band.low), wp2 = warp(band.high);
    const double ws1 = warp(f.stop_low_hz), ws2 = warp(f.stop_high_hz);
    const double w0 = std::sqrt(wp1 * wp2);
    // Bandwidth such that the nearer stopband edge maps to the prototype's stopband edge.
    const double bw = std::min(std::abs(ws1 * ws1 - w0 * w0) / ws1, std::abs(ws2 * ws2 - w0 * w0) / ws2);
    const double omega_pass = (wp2 - wp1) / bw;
    if (!(omega_pass < 1.0)) {
        throw DesignError("transition bands too narrow for band " + band.label);
    }
    const double rs = opts.stopband_attenuation_db + opts.design_margin_db;
    const double de = 1.0 / std::sqrt(std::pow(10.0, 0.1 * rs) - 1.0);
    const double need = 1.0 / (de * std::sqrt(std::pow(10.0, 0.1 * opts.passband_ripple_db) - 1.0));
    int order = static_cast<int>(std::ceil(std::acosh(need) / std::acosh(1.0 / omega_pass) - 1e-9));
    order = std::max(order, 1);
    const double center_rad = 2.0 * std::atan(w0 / (2.0 * rate));

    for (; order <= opts.max_prototype_order; ++order) {
        const auto digital = bilinear(lowpass_to_bandpass(cheb2_prototype(order, rs), w0, bw), rate);
        f.sections = zpk_to_sos(digital, center_rad);
        f.prototype_order = order;
        f.check = check_design(f);
        if (f.check.passed) {
            return f;
        }
    }
    std::ostringstream os;
    os << "band " << band.label << " at " << rate << " Hz: no design up to order " << opts.max_prototype_order
       << " meets the constraints (last: stopband " << f.check.stopband_attenuation_db << " dB vs required "
       << f.stopband_attenuation_db << " dB, ripple " << f.check.passband_ripple_db << " dB vs allowed "
       << f.passband_ripple_db << " dB, pole radius " << f.check.max_pole_radius << ")";
    throw DesignError(os.str());
}

// ---------------------------------------------------------------------------
// Filtering

namespace {

// Steady-state DF2T states for a unit step, per section, scaled by the preceding sections' DC gain.
std::vector<std::array<double, 2>> step_initial_states(std::span<const Biquad> sections)
{
    std::vector<std::array<double, 2>> zi;
    double scale = 1.0;
    for (const auto& q : sections) {
        const double y = (q.b0 + q.b1 + q.b2) / (1.0 + q.a1 + q.a2);
        const double z2 = q.b2 - q.a2 * y;
        const double z1 = y - q.b0;
        zi.push_back({scale * z1, scale * z2});
        scale *= y;
    }
    return zi;
}

} // namespace

std::vector<double> sosfilt(std::span<const Biquad> sections, std::span<const double> x, double initial)
{
    std::vector<double> y(x.begin(), x.end());
    const auto zi = step_initial_states(sections);
    for (std::size_t s = 0; s < sections.size(); ++s) {
        const auto& q = sections[s];
        double z1 = zi[s][0] * initial;
        double z2 = zi[s][1] * initial;
        for (double& v : y) {
            const double in = v;
            const double out = q.b0 * in + z1;
            z1 = q.b1 * in - q.a1 * out + z2;
            z2 = q.b2 * in - q.a2 * out;
            v = out;
        }
    }
    return y;
}

std::vector<double> sosfiltfilt(std::span<const Biquad> sections, std::span<const double> x)
{
    const std::size_t n = x.size();
    if (n == 0) {
        return {};
    }
    // Mirror padding, long enough for the slowest pole to decay by 80 dB. Odd reflection would add a level
    // step at each edge that the low-frequency poles carry back into the signal.
    double r_max = 0.0;
    for (const auto& q : sections) {
        const std::complex<double> disc = std::sqrt(std::complex<double>(q.a1 * q.a1 - 4.0 * q.a2, 0.0));
        r_max = std::max({r_max, std::abs((-q.a1 + disc) / 2.0), std::abs((-q.a1 - disc) / 2.0)});
    }
    std::size_t pad = 3 * (2 * sections.size() + 1);
    if (r_max > 0.0 && r_max < 1.0) {
        pad = std::max(pad, static_cast<std::size_t>(std::ceil(std::log(1e-4) / std::log(r_max))));
    }
    pad = std::min(pad, n - 1);
    std::vector<double> ext;
    ext.reserve(n + 2 * pad);
    for (std::size_t i = pad; i >= 1; --i) {
        ext.push_back(x[i]);
    }
    ext.insert(ext.end(), x.begin(), x.end());
    for (std::size_t i = 1; i <= pad; ++i) {
        ext.push_back(x[n - 1 - i]);
    }
    auto fwd = sosfilt(sections, ext, ext.front());
    std::reverse(fwd.begin(), fwd.end());
    auto bwd = sosfilt(sections, fwd, fwd.front());
    std::reverse(bwd.begin(), bwd.end());
    return {bwd.begin() + static_cast<std::ptrdiff_t>(pad), bwd.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

MultichannelSeries apply_filter_zero_phase(const MultichannelSeries& x, const FilterDesign& f)
{
    if (x.rate() != f.rate) {
        throw ConfigError("series rate " + fmt_hz(x.rate()) + " does not match filter design rate " + fmt_hz(f.rate));
    }
    MultichannelSeries out(x.channels(), x.length(), x.rate());
    for (std::size_t c = 0; c < x.channels(); ++c) {
        const auto y = sosfiltfilt(f.sections, x.channel(c));
        std::copy(y.begin(), y.end(), out.channel(c).begin());
    }
    return out;
}

MultichannelSeries bandpass_series(const MultichannelSeries& x, const BandSpec& band, const BandpassOptions& opts)
{
    double rate = x.rate();
    while (band.high * opts.high_stop_factor >= rate / 2.0) {
        rate *= 2.0;
    }
    const auto design = design_bandpass(band, rate, opts);
    if (rate == x.rate()) {
        return apply_filter_zero_phase(x, design);
    }
    return resample(apply_filter_zero_phase(resample(x, rate), design), x.rate());
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

std::pair<long long, long long> rational_ratio(double from, double to)
{
    const auto is_int = [](double v) { return std::abs(v - std::round(v)) < 1e-9 && v < 1e15; };
    if (is_int(from) && is_int(to)) {
        const auto a = static_cast<long long>(std::llround(to));
        const auto b = static_cast<long long>(std::llround(from));
        const auto g = std::gcd(a, b);
        return {a / g, b / g};
    }
    // Continued fraction approximation of to/from.
    const double target = to / from;
    long long h0 = 0, h1 = 1, k0 = 1, k1 = 0;
    double v = target;
    for (int i = 0; i < 40; ++i) {
        const auto a = static_cast<long long>(std::floor(v));
        const long long h2 = a * h1 + h0, k2 = a * k1 + k0;
        h0 = h1;
        h1 = h2;
        k0 = k1;
        k1 = k2;
        if (std::abs(static_cast<double>(h1) / static_cast<double>(k1) - target) < 1e-12 * target) {
            break;
        }
        v = 1.0 / (v - static_cast<double>(a));
    }
    return {h1, k1};
}

double kaiser(double x, double beta)
{
    // x in [-1, 1]
    return std::cyl_bessel_i(0.0, beta * std::sqrt(std::max(0.0, 1.0 - x * x))) / std::cyl_bessel_i(0.0, beta);
}

} // namespace

MultichannelSeries resample(const MultichannelSeries& x, double to_rate)
{
    if (!(to_rate > 0.0)) {
        throw ConfigError("resample target rate must be positive");
    }
    if (to_rate == x.rate()) {
        return x;
    }
    const auto [up, down] = rational_ratio(x.rate(), to_rate);
    const long long n_in = static_cast<long long>(x.length());
    const long long n_out = (2 * n_in * up + down) / (2 * down);

    const long long factor = std::max(up, down);
    const long long half = 24 * factor;
    const double cutoff = 1.0 / static_cast<double>(factor);
    constexpr double beta = 8.6;
    std::vector<double> h(static_cast<std::size_t>(2 * half + 1));
    for (long long j = -half; j <= half; ++j) {
        const double t = cutoff * static_cast<double>(j);
        const double sinc = j == 0 ? 1.0 : std::sin(kPi * t) / (kPi * t);
        h[static_cast<std::size_t>(j + half)] =
            cutoff * sinc * kaiser(static_cast<double>(j) / static_cast<double>(half), beta);
    }
    // Each polyphase branch sums to one so DC passes exactly.
    for (long long r = 0; r < up; ++r) {
        double s = 0.0;
        for (long long j = r; j < 2 * half + 1; j += up) {
            s += h[static_cast<std::size_t>(j)];
        }
        for (long long j = r; j < 2 * half + 1; j += up) {
            h[static_cast<std::size_t>(j)] /= s;
        }
    }

    MultichannelSeries out(x.channels(), static_cast<std::size_t>(n_out), to_rate);
    for (std::size_t c = 0; c < x.channels(); ++c) {
        const auto src = x.channel(c);
        auto dst = out.channel(c);
        for (long long m = 0; m < n_out; ++m) {
            // Upsampled-domain position u = m*down; taps j = u + half - n*up.
            const long long u = m * down;
            long long n_lo = u - half <= 0 ? 0 : (u - half + up - 1) / up;
            long long n_hi = std::min(n_in - 1, (u + half) / up);
            double acc = 0.0;
            for (long long n = n_lo; n <= n_hi; ++n) {
                acc += h[static_cast<std::size_t>(u + half - n * up)] * src[static_cast<std::size_t>(n)];
            }
            dst[static_cast<std::size_t>(m)] = acc;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Referencing and normalization

MultichannelSeries common_average_reference(const MultichannelSeries& eeg)
{
    MultichannelSeries out = eeg;
    const std::size_t nc = eeg.channels();
    if (nc == 0) {
        throw ConfigError("common average reference needs at least one channel");
    }
    for (std::size_t t = 0; t < eeg.length(); ++t) {
        double m = 0.0;
        for (std::size_t c = 0; c < nc; ++c) {
            m += eeg.at(c, t);
        }
        m /= static_cast<double>(nc);
        for (std::size_t c = 0; c < nc; ++c) {
            out.at(c, t) = eeg.at(c, t) - m;
        }
    }
    return out;
}

namespace {

void standardize_rows(MultichannelSeries& s, std::span<const Interval> train, const std::string& what)
{
    std::size_t count = 0;
    for (const auto& iv : train) {
        if (iv.end > s.length()) {
            throw ConfigError("train interval exceeds recording length");
        }
        count += iv.size();
    }
    if (count == 0) {
        throw ConfigError("train range is empty");
    }
    for (std::size_t c = 0; c < s.channels(); ++c) {
        auto row = s.channel(c);
        double mean = 0.0;
        for (const auto& iv : train) {
            for (std::size_t t = iv.begin; t < iv.end; ++t) {
                mean += row[t];
            }
        }
        mean /= static_cast<double>(count);
        double var = 0.0;
        for (const auto& iv : train) {
            for (std::size_t t = iv.begin; t < iv.end; ++t) {
                var += (row[t] - mean) * (row[t] - mean);
            }
        }
        const double sd = std::sqrt(var / static_cast<double>(count));
        if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
            throw ConfigError("degenerate " + what + (s.channels() > 1 ? " channel " + std::to_string(c) : "") +
                              ": zero standard deviation on the train range");
        }
        for (auto& v : row) {
            v = (v - mean) / sd;
        }
    }
}

} // namespace

Recording normalize_with_train_stats(const Recording& rec, std::span<const Interval> train)
{
    Recording out = rec;
    standardize_rows(out.eeg, train, "EEG");
    standardize_rows(out.envelope, train, "envelope");
    return out;
}

// ---------------------------------------------------------------------------
// Pipeline

MultichannelSeries preprocess_eeg(const MultichannelSeries& raw, const PreprocessOptions& opts)
{
    MultichannelSeries x = raw.rate() > opts.intermediate_rate ? resample(raw, opts.intermediate_rate) : raw;
    x = common_average_reference(x);
    x = bandpass_series(x, opts.band);
    return resample(x, opts.target_rate);
}

MultichannelSeries preprocess_envelope_series(const MultichannelSeries& env, const PreprocessOptions& opts)
{
    MultichannelSeries x = env.rate() > opts.intermediate_rate ? resample(env, opts.intermediate_rate) : env;
    x = bandpass_series(x, opts.band);
    return resample(x, opts.target_rate);
}

MultichannelSeries preprocess_envelope(const Waveform& audio, const PreprocessOptions& opts)
{
    return preprocess_envelope_series(gammatone_envelope(audio, opts.gammatone_subbands, opts.compression), opts);
}

Recording trim_edges(const Recording& rec, double seconds)
{
    const auto n = static_cast<std::size_t>(std::llround(seconds * rec.rate()));
    if (2 * n >= rec.length()) {
        throw ConfigError("recording " + rec.subject_id + "/" + rec.stimulus_id + " too short to trim " +
                          std::to_string(seconds) + " s from both ends");
    }
    Recording out = rec;
    const Interval keep{n, rec.length() - n};
    out.eeg = rec.eeg.slice(keep);
    out.envelope = rec.envelope.slice(keep);
    return out;
}

} // namespace eegmm
