#pragma once

// Auditory envelope extraction and the EEG/envelope filter chain.

#include "eegmm/series.hpp"

#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace eegmm {

// ---------------------------------------------------------------------------
// Gammatone filterbank

/// ERB (Hz) of the auditory filter centred at f Hz (Glasberg & Moore).
double erb_bandwidth(double hz);
/// ERB-rate scale value of f Hz.
double erb_rate(double hz);
double erb_rate_to_hz(double erb);

/// 4th-order gammatone filters, ERB-spaced.
struct GammatoneBank {
    double rate = 0.0;
    std::vector<double> centers;    // Hz
    std::vector<double> bandwidths; // Hz, 1.019 * ERB

    static GammatoneBank erb_spaced(double rate, std::size_t subbands = 28, double low_hz = 50.0,
                                    double high_hz = 5000.0);
};

/// Real subband signals, one channel per filter, unit gain at each centre frequency.
MultichannelSeries gammatone_subbands(const Waveform& audio, const GammatoneBank& bank);

/// Mean over subbands of |subband|^compression. One channel, same rate and length as the input.
MultichannelSeries gammatone_envelope(const Waveform& audio, std::size_t subbands = 28, double compression = 0.6);

// ---------------------------------------------------------------------------
// Bandpass design

struct BandSpec {
    double low = 0.0;  // Hz
    double high = 0.0; // Hz
    std::string label;

    /// delta, theta, alpha, beta, broadband, or contiguous '+'-joined combinations ("delta+theta").
    static BandSpec named(std::string_view label);
    /// The eight bands and band combinations swept over in the frequency-band experiment.
    static std::vector<BandSpec> sweep_set();
};

/// Transposed direct form II biquad, a0 == 1.
struct Biquad {
    double b0 = 1.0, b1 = 0.0, b2 = 0.0;
    double a1 = 0.0, a2 = 0.0;
};

struct BandpassOptions {
    double stopband_attenuation_db = 80.0;
    double passband_ripple_db = 1.0;
    /// Stopband edges as multiples of the cutoffs.
    double low_stop_factor = 0.5;
    double high_stop_factor = 1.25;
    /// Extra attenuation designed in so the grid check is not decided by rounding.
    double design_margin_db = 0.5;
    int max_prototype_order = 64;
};

struct DesignCheck {
    double stopband_attenuation_db = 0.0; // minimum over the stopband grid, relative to passband peak
    double passband_ripple_db = 0.0;      // max - min inside [low, high]
    double max_pole_radius = 0.0;
    bool passed = false;
};

/// Chebyshev type II bandpass as cascaded second-order sections.
struct FilterDesign {
    std::vector<Biquad> sections;
    double rate = 0.0;
    BandSpec band;
    double stop_low_hz = 0.0;
    double stop_high_hz = 0.0;
    int prototype_order = 0;
    double stopband_attenuation_db = 0.0; // required
    double passband_ripple_db = 0.0;      // allowed
    DesignCheck check;                    // measured at construction
};

/// Thrown when a design cannot meet its constraints; the message names the violated one.
class DesignError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

FilterDesign design_bandpass(const BandSpec& band, double rate, const BandpassOptions& opts = {});

std::complex<double> frequency_response(std::span<const Biquad> sections, double hz, double rate);
inline std::complex<double> frequency_response(const FilterDesign& f, double hz)
{
    return frequency_response(f.sections, hz, f.rate);
}

/// Measure the design on a dense frequency grid.
DesignCheck check_design(const FilterDesign& f, std::size_t grid_points = 20000);

// ---------------------------------------------------------------------------
// Filtering and resampling

/// Causal cascade filtering; `initial` scales the steady-state step initial conditions.
std::vector<double> sosfilt(std::span<const Biquad> sections, std::span<const double> x, double initial = 0.0);
/// Forward-backward filtering with odd-extension padding.
std::vector<double> sosfiltfilt(std::span<const Biquad> sections, std::span<const double> x);

MultichannelSeries apply_filter_zero_phase(const MultichannelSeries& x, const FilterDesign& f);

/// Filter `x` with the band, designing at an internally raised rate when the band's upper stopband
/// edge does not fit below the series' Nyquist frequency.
MultichannelSeries bandpass_series(const MultichannelSeries& x, const BandSpec& band,
                                   const BandpassOptions& opts = {});

/// Rational polyphase resampling with a Kaiser-windowed sinc anti-alias/anti-image filter.
/// Output length is round(length * to_rate / rate).
MultichannelSeries resample(const MultichannelSeries& x, double to_rate);

MultichannelSeries common_average_reference(const MultichannelSeries& eeg);

/// Standardize every EEG channel and the envelope with mean/std measured on `train`.
Recording normalize_with_train_stats(const Recording& rec, std::span<const Interval> train);

// ---------------------------------------------------------------------------
// Pipeline

struct PreprocessOptions {
    double intermediate_rate = 1024.0;
    double target_rate = 64.0;
    BandSpec band{0.5, 32.0, "broadband"};
    double trim_seconds = 2.0;
    std::size_t gammatone_subbands = 28;
    double compression = 0.6;
};

/// Downsample to the intermediate rate, re-reference, bandpass, downsample to the target rate.
MultichannelSeries preprocess_eeg(const MultichannelSeries& raw, const PreprocessOptions& opts = {});
/// Gammatone envelope, then the same bandpass/downsample chain as the EEG.
MultichannelSeries preprocess_envelope(const Waveform& audio, const PreprocessOptions& opts = {});
/// Bandpass/downsample chain for an envelope that is already extracted.
MultichannelSeries preprocess_envelope_series(const MultichannelSeries& env, const PreprocessOptions& opts = {});
/// Drop `seconds` from both ends of EEG and envelope.
Recording trim_edges(const Recording& rec, double seconds);

} // namespace eegmm
