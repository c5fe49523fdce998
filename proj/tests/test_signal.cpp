#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "eegmm/signal.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>

using namespace eegmm;
using testutil::kPi;

namespace {

double db(double v) { return 20.0 * std::log10(v); }

double peak_passband_gain(const FilterDesign& f)
{
    double peak = 0.0;
    for (int i = 0; i <= 2000; ++i) {
        const double hz = f.band.low + (f.band.high - f.band.low) * i / 2000.0;
        peak = std::max(peak, std::abs(frequency_response(f, hz)));
    }
    return peak;
}

// Direct 4th-order gammatone impulse response convolution, normalized to unit gain at the centre.
std::vector<double> naive_gammatone(const std::vector<double>& x, double rate, double fc, double b)
{
    const std::size_t taps = static_cast<std::size_t>(0.06 * rate);
    std::vector<double> h(taps);
    double re = 0.0, im = 0.0;
    for (std::size_t n = 0; n < taps; ++n) {
        const double t = static_cast<double>(n) / rate;
        h[n] = t * t * t * std::exp(-2.0 * kPi * b * t) * std::cos(2.0 * kPi * fc * t);
        re += h[n] * std::cos(2.0 * kPi * fc * t);
        im -= h[n] * std::sin(2.0 * kPi * fc * t);
    }
    const double gain = std::hypot(re, im);
    std::vector<double> y(x.size(), 0.0);
    for (std::size_t t = 0; t < x.size(); ++t) {
        double acc = 0.0;
        for (std::size_t k = 0; k < taps && k <= t; ++k) {
            acc += h[k] * x[t - k];
        }
        y[t] = acc / gain;
    }
    return y;
}

double mean_abs(std::span<const double> x, std::size_t from)
{
    double s = 0.0;
    for (std::size_t i = from; i < x.size(); ++i) {
        s += std::abs(x[i]);
    }
    return s / static_cast<double>(x.size() - from);
}

MultichannelSeries single(const std::vector<double>& v, double rate) { return {1, v.size(), rate, v}; }

} // namespace

TEST_CASE("erb scale")
{
    CHECK(erb_bandwidth(1000.0) == doctest::Approx(24.7 * (4.37 + 1.0)).epsilon(1e-12));
    for (const double hz : {50.0, 440.0, 5000.0}) {
        CHECK(erb_rate_to_hz(erb_rate(hz)) == doctest::Approx(hz).epsilon(1e-12));
    }
    const auto bank = GammatoneBank::erb_spaced(16000.0);
    REQUIRE(bank.centers.size() == 28);
    CHECK(bank.centers.front() == doctest::Approx(50.0));
    CHECK(bank.centers.back() == doctest::Approx(5000.0));
    for (std::size_t i = 1; i + 1 < bank.centers.size(); ++i) {
        const double step1 = erb_rate(bank.centers[i]) - erb_rate(bank.centers[i - 1]);
        const double step2 = erb_rate(bank.centers[i + 1]) - erb_rate(bank.centers[i]);
        CHECK(step1 == doctest::Approx(step2).epsilon(1e-9));
    }
    CHECK_THROWS_AS(GammatoneBank::erb_spaced(8000.0), ConfigError);
}

TEST_CASE("envelope of silence is silent")
{
    const Waveform w(std::vector<double>(4000, 0.0), 16000.0);
    const auto env = gammatone_envelope(w);
    REQUIRE(env.length() == 4000);
    for (const double v : env.data()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("envelope is nonnegative and homogeneous of degree 0.6")
{
    const auto x = testutil::normals(3200, 7);
    const auto e1 = gammatone_envelope(Waveform(x, 16000.0));
    for (const double a : {0.25, 3.0, 40.0}) {
        std::vector<double> y(x);
        for (auto& v : y) {
            v *= a;
        }
        const auto e2 = gammatone_envelope(Waveform(y, 16000.0));
        const double factor = std::pow(a, 0.6);
        for (std::size_t t = 0; t < x.size(); ++t) {
            CHECK(e1.data()[t] >= 0.0);
            CHECK(e2.data()[t] == doctest::Approx(factor * e1.data()[t]).epsilon(1e-9));
        }
    }
}

TEST_CASE("tone at a centre frequency peaks in its own subband")
{
    const double rate = 16000.0;
    const auto bank = GammatoneBank::erb_spaced(rate);
    for (const std::size_t k : {4u, 12u, 20u}) {
        const auto tone = testutil::sine(4000, bank.centers[k], rate);
        const auto sub = gammatone_subbands(Waveform(tone, rate), bank);
        REQUIRE(sub.channels() == bank.centers.size());
        std::size_t lib_best = 0, ref_best = 0;
        double lib_max = -1.0, ref_max = -1.0;
        for (std::size_t c = 0; c < sub.channels(); ++c) {
            const double lib = mean_abs(sub.channel(c), 2000);
            const double ref = mean_abs(naive_gammatone(tone, rate, bank.centers[c], bank.bandwidths[c]), 2000);
            if (lib > lib_max) {
                lib_max = lib;
                lib_best = c;
            }
            if (ref > ref_max) {
                ref_max = ref;
                ref_best = c;
            }
            CHECK(lib == doctest::Approx(ref).epsilon(0.02));
        }
        CHECK(ref_best == k);
        CHECK(lib_best == k);
        // unit gain at the centre: the steady-state amplitude of the tone survives
        CHECK(lib_max == doctest::Approx(2.0 / kPi).epsilon(0.01));
    }
}

TEST_CASE("band labels")
{
    CHECK(BandSpec::named("delta").low == 0.5);
    CHECK(BandSpec::named("delta").high == 4.0);
    const auto dt = BandSpec::named("delta+theta");
    CHECK(dt.low == 0.5);
    CHECK(dt.high == 8.0);
    const auto all = BandSpec::named("delta+theta+alpha+beta");
    CHECK(all.low == 0.5);
    CHECK(all.high == 32.0);
    CHECK(BandSpec::named("alpha+theta").low == 4.0);
    CHECK_THROWS_AS(BandSpec::named("gamma"), ConfigError);
    CHECK_THROWS_AS(BandSpec::named("delta+alpha"), ConfigError);
    CHECK(BandSpec::sweep_set().size() == 8);
}

TEST_CASE("broadband design at 1024 Hz attenuates DC and 128 Hz by 80 dB")
{
    const auto f = design_bandpass({0.5, 32.0, "broadband"}, 1024.0);
    const double peak = peak_passband_gain(f);
    CHECK(db(std::abs(frequency_response(f, 0.0)) / peak) <= -80.0);
    CHECK(db(std::abs(frequency_response(f, 128.0)) / peak) <= -80.0);
    CHECK(f.check.passed);
}

TEST_CASE("theta design at 64 Hz passes 6 Hz")
{
    const auto f = design_bandpass({4.0, 8.0, "theta"}, 64.0);
    CHECK(std::abs(db(std::abs(frequency_response(f, 6.0)) / peak_passband_gain(f))) <= 1.0);
}

TEST_CASE("alpha design at 64 Hz rejects 2 Hz")
{
    const auto f = design_bandpass({8.0, 14.0, "alpha"}, 64.0);
    CHECK(db(std::abs(frequency_response(f, 2.0)) / peak_passband_gain(f)) <= -80.0);
}

TEST_CASE("every swept band meets the grid check at the intermediate rate")
{
    for (const auto& band : BandSpec::sweep_set()) {
        CAPTURE(band.label);
        const auto f = design_bandpass(band, 1024.0);
        CHECK(f.check.passed);
        const auto dense = check_design(f, 100000);
        CHECK(dense.stopband_attenuation_db >= 80.0);
        CHECK(dense.passband_ripple_db <= 1.0);
        CHECK(dense.max_pole_radius < 1.0);
    }
}

TEST_CASE("unmeetable designs name the violated constraint")
{
    try {
        design_bandpass({0.5, 32.0, "broadband"}, 64.0);
        FAIL("expected a design error");
    } catch (const DesignError& e) {
        CHECK(std::string(e.what()).find("Nyquist") != std::string::npos);
    }
    CHECK_THROWS_AS(design_bandpass({8.0, 4.0, "bad"}, 64.0), DesignError);
    BandpassOptions tight;
    tight.max_prototype_order = 2;
    try {
        design_bandpass({4.0, 8.0, "theta"}, 1024.0, tight);
        FAIL("expected a design error");
    } catch (const DesignError& e) {
        CHECK(std::string(e.what()).find("stopband") != std::string::npos);
    }
}

TEST_CASE("sosfilt matches the biquad difference equation")
{
    const auto f = design_bandpass({4.0, 8.0, "theta"}, 64.0);
    const auto x = testutil::normals(500, 3);
    std::vector<double> ref = x;
    for (const auto& s : f.sections) {
        std::vector<double> y(ref.size());
        for (std::size_t n = 0; n < ref.size(); ++n) {
            const double x1 = n >= 1 ? ref[n - 1] : 0.0, x2 = n >= 2 ? ref[n - 2] : 0.0;
            const double y1 = n >= 1 ? y[n - 1] : 0.0, y2 = n >= 2 ? y[n - 2] : 0.0;
            y[n] = s.b0 * ref[n] + s.b1 * x1 + s.b2 * x2 - s.a1 * y1 - s.a2 * y2;
        }
        ref = y;
    }
    const auto got = sosfilt(f.sections, x);
    for (std::size_t n = 0; n < x.size(); ++n) {
        CHECK(got[n] == doctest::Approx(ref[n]).epsilon(1e-10).scale(1e-12));
    }
}

TEST_CASE("zero-phase filtering removes DC")
{
    const double rate = 1024.0;
    const auto f = design_bandpass({0.5, 32.0, "broadband"}, rate);
    const auto y = apply_filter_zero_phase(single(std::vector<double>(20 * 1024, 3.0), rate), f);
    const std::size_t trim = 2 * 1024;
    for (std::size_t t = trim; t + trim < y.length(); ++t) {
        CHECK(std::abs(y.at(0, t)) <= 1e-3 * 3.0);
    }
}

TEST_CASE("zero-phase impulse response is symmetric")
{
    const auto f = design_bandpass({4.0, 8.0, "theta"}, 64.0);
    std::vector<double> x(4097, 0.0);
    const std::size_t mid = 2048;
    x[mid] = 1.0;
    const auto y = apply_filter_zero_phase(single(x, 64.0), f);
    REQUIRE(y.length() == x.size());
    std::size_t peak = 0;
    for (std::size_t t = 0; t < y.length(); ++t) {
        if (std::abs(y.at(0, t)) > std::abs(y.at(0, peak))) {
            peak = t;
        }
    }
    CHECK(peak + 1 >= mid);
    CHECK(peak <= mid + 1);
    for (std::size_t k = 1; k < 1500; ++k) {
        CHECK(std::abs(y.at(0, mid + k) - y.at(0, mid - k)) <= 1e-6);
    }
}

TEST_CASE("in-band sinusoid keeps its amplitude and phase")
{
    const double rate = 64.0;
    const auto f = design_bandpass(BandSpec::named("delta+theta"), rate);
    const auto x = testutil::sine(64 * 60, 6.0, rate);
    const auto y = apply_filter_zero_phase(single(x, rate), f);
    const std::size_t trim = 10 * 64;
    const std::span<const double> xs(x.data() + trim, x.size() - 2 * trim);
    const std::span<const double> ys(y.data().data() + trim, x.size() - 2 * trim);
    CHECK(std::abs(db(testutil::rms(ys) / testutil::rms(xs))) <= 2.0);
    // cross-correlation peaks at lag 0
    auto xcorr = [&](int lag) {
        double s = 0.0;
        for (std::size_t i = 100; i + 100 < xs.size(); ++i) {
            s += xs[i] * ys[i + lag];
        }
        return s;
    };
    for (const int lag : {-3, -2, -1, 1, 2, 3}) {
        CHECK(xcorr(0) > xcorr(lag));
    }
}

TEST_CASE("bandlimited noise probe is not delayed")
{
    const double rate = 64.0;
    const auto f = design_bandpass(BandSpec::named("theta"), rate);
    const auto probe = apply_filter_zero_phase(single(testutil::normals(64 * 120, 11), rate), f);
    const auto y = apply_filter_zero_phase(probe, design_bandpass(BandSpec::named("delta+theta+alpha"), rate));
    int best = 99;
    double best_v = -1e300;
    for (int lag = -8; lag <= 8; ++lag) {
        double s = 0.0;
        for (std::size_t i = 640; i + 640 < probe.length(); ++i) {
            s += probe.at(0, i) * y.at(0, i + lag);
        }
        if (s > best_v) {
            best_v = s;
            best = lag;
        }
    }
    CHECK(best == 0);
}

TEST_CASE("bandpass_series designs above the series rate when needed")
{
    const double rate = 64.0;
    const auto x = single(testutil::sine(64 * 60, 20.0, rate), rate);
    const auto beta = bandpass_series(x, BandSpec::named("beta"));
    const auto delta = bandpass_series(x, BandSpec::named("delta"));
    REQUIRE(beta.length() == x.length());
    const std::size_t trim = 10 * 64;
    const std::span<const double> xb(x.data().data() + trim, x.length() - 2 * trim);
    const std::span<const double> b(beta.data().data() + trim, x.length() - 2 * trim);
    const std::span<const double> d(delta.data().data() + trim, x.length() - 2 * trim);
    CHECK(std::abs(db(testutil::rms(b) / testutil::rms(xb))) <= 2.0);
    CHECK(db(testutil::rms(d) / testutil::rms(xb)) <= -60.0);
}

TEST_CASE("resampling to the same rate is the identity")
{
    const auto x = single(testutil::normals(1000, 5), 64.0);
    const auto y = resample(x, 64.0);
    CHECK(y.data() == x.data());
    CHECK(y.rate() == 64.0);
}

TEST_CASE("resampling keeps constants")
{
    const auto x = single(std::vector<double>(8192, 2.5), 1024.0);
    for (const double to : {64.0, 250.0, 2048.0}) {
        const auto y = resample(x, to);
        const std::size_t trim = y.length() / 4;
        for (std::size_t t = trim; t + trim < y.length(); ++t) {
            CHECK(std::abs(y.at(0, t) - 2.5) <= 1e-6);
        }
    }
}

TEST_CASE("resampled lengths follow the rounding rule")
{
    for (const auto& [n, from, to] : std::vector<std::tuple<std::size_t, double, double>>{
             {12345, 1000.0, 64.0}, {1001, 1024.0, 64.0}, {777, 64.0, 1024.0}, {5000, 44100.0, 1024.0}}) {
        const auto y = resample(single(std::vector<double>(n, 1.0), from), to);
        CHECK(y.length() == static_cast<std::size_t>(std::llround(static_cast<double>(n) * to / from)));
        CHECK(y.rate() == to);
    }
}

TEST_CASE("5 Hz sinusoid survives 1024 to 64 Hz")
{
    const auto x = single(testutil::sine(1024 * 20, 5.0, 1024.0), 1024.0);
    const auto y = resample(x, 64.0);
    REQUIRE(y.length() == 64 * 20);
    const auto ideal = testutil::sine(64 * 20, 5.0, 64.0);
    const std::size_t trim = 64 * 2;
    const std::span<const double> ys(y.data().data() + trim, y.length() - 2 * trim);
    const std::span<const double> is(ideal.data() + trim, ideal.size() - 2 * trim);
    CHECK(testutil::correlation(ys, is) >= 0.999);
    CHECK(testutil::rms(ys) == doctest::Approx(testutil::rms(is)).epsilon(0.01));
}

TEST_CASE("decimation suppresses content above the new Nyquist")
{
    const auto x = single(testutil::sine(1024 * 20, 100.0, 1024.0), 1024.0);
    const auto y = resample(x, 64.0);
    const std::span<const double> ys(y.data().data() + 128, y.length() - 256);
    CHECK(testutil::rms(ys) < 1e-3);
}

TEST_CASE("common average reference")
{
    const auto one = common_average_reference(single({1.0, 2.0, -4.0}, 64.0));
    for (const double v : one.data()) {
        CHECK(v == 0.0);
    }
    const auto two = common_average_reference(MultichannelSeries(2, 1, 64.0, {1.0, 3.0}));
    CHECK(two.at(0, 0) == -1.0);
    CHECK(two.at(1, 0) == 1.0);
    const auto big = common_average_reference(MultichannelSeries(64, 1000, 64.0, testutil::normals(64000, 9)));
    for (std::size_t t = 0; t < 1000; ++t) {
        double m = 0.0;
        for (std::size_t c = 0; c < 64; ++c) {
            m += big.at(c, t);
        }
        CHECK(std::abs(m / 64.0) < 1e-12);
    }
}

TEST_CASE("normalization uses training statistics")
{
    auto rec = testutil::random_recording(4, 1000, 64.0, 21);
    const std::vector<Interval> train = {{0, 400}, {600, 1000}};
    const auto n = normalize_with_train_stats(rec, train);
    auto train_samples = [&](std::span<const double> row) {
        std::vector<double> v(row.begin(), row.begin() + 400);
        v.insert(v.end(), row.begin() + 600, row.end());
        return v;
    };
    for (std::size_t c = 0; c < 4; ++c) {
        const auto v = train_samples(n.eeg.channel(c));
        CHECK(std::abs(testutil::mean(v)) < 1e-12);
        CHECK(testutil::stddev(v) == doctest::Approx(1.0).epsilon(1e-12));
    }
    const auto e = train_samples(n.envelope.channel(0));
    CHECK(std::abs(testutil::mean(e)) < 1e-12);
    CHECK(testutil::stddev(e) == doctest::Approx(1.0).epsilon(1e-12));

    SUBCASE("idempotent on standardized data")
    {
        const auto again = normalize_with_train_stats(n, train);
        for (std::size_t i = 0; i < n.eeg.data().size(); ++i) {
            CHECK(again.eeg.data()[i] == doctest::Approx(n.eeg.data()[i]).epsilon(1e-9).scale(1e-9));
        }
    }
    SUBCASE("affine invariant")
    {
        Recording scaled = rec;
        for (auto& v : scaled.eeg.data()) {
            v = 3.5 * v - 7.0;
        }
        for (auto& v : scaled.envelope.data()) {
            v = 0.2 * v + 1.0;
        }
        const auto m = normalize_with_train_stats(scaled, train);
        for (std::size_t i = 0; i < n.eeg.data().size(); ++i) {
            CHECK(m.eeg.data()[i] == doctest::Approx(n.eeg.data()[i]).epsilon(1e-9).scale(1e-9));
        }
        for (std::size_t i = 0; i < n.envelope.data().size(); ++i) {
            CHECK(m.envelope.data()[i] == doctest::Approx(n.envelope.data()[i]).epsilon(1e-9).scale(1e-9));
        }
    }
    SUBCASE("constant channel on the training range")
    {
        Recording bad = rec;
        for (std::size_t t = 0; t < 1000; ++t) {
            bad.eeg.at(2, t) = 5.0;
        }
        try {
            normalize_with_train_stats(bad, train);
            FAIL("expected a degenerate-channel error");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("channel 2") != std::string::npos);
        }
    }
    SUBCASE("empty training range")
    {
        CHECK_THROWS_AS(normalize_with_train_stats(rec, std::vector<Interval>{}), ConfigError);
    }
}

TEST_CASE("preprocessing chain lands on the target rate")
{
    const double raw_rate = 2048.0;
    const std::size_t n = static_cast<std::size_t>(raw_rate * 30);
    MultichannelSeries raw(3, n, raw_rate);
    for (std::size_t c = 0; c < 3; ++c) {
        const auto s = testutil::sine(n, 3.0 + c, raw_rate);
        std::copy(s.begin(), s.end(), raw.channel(c).begin());
    }
    const auto eeg = preprocess_eeg(raw);
    CHECK(eeg.rate() == 64.0);
    CHECK(eeg.channels() == 3);
    CHECK(eeg.length() == 64 * 30);
    for (std::size_t t = 0; t < eeg.length(); ++t) {
        CHECK(std::abs(eeg.at(0, t) + eeg.at(1, t) + eeg.at(2, t)) < 1e-9);
    }

    const auto audio = testutil::normals(16000 * 10, 4);
    const auto env = preprocess_envelope(Waveform(audio, 16000.0));
    CHECK(env.rate() == 64.0);
    CHECK(env.channels() == 1);
    CHECK(env.length() == 640);

    Recording r;
    r.eeg = MultichannelSeries(2, 640, 64.0, testutil::normals(1280, 1));
    r.envelope = MultichannelSeries(1, 640, 64.0, testutil::normals(640, 2));
    const auto trimmed = trim_edges(r, 2.0);
    CHECK(trimmed.length() == 640 - 256);
    CHECK(trimmed.eeg.at(1, 0) == r.eeg.at(1, 128));
    CHECK(trimmed.envelope.at(0, 0) == r.envelope.at(0, 128));
    CHECK_THROWS_AS(trim_edges(r, 5.0), ConfigError);
}
