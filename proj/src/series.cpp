#include "eegmm/series.hpp"

#include <cmath>
#include <string>

namespace eegmm {

Waveform::Waveform(std::vector<double> s, double r) : samples(std::move(s)), rate(r)
{
    if (!(rate > 0.0)) {
        throw ConfigError("waveform rate must be positive");
    }
    for (double v : samples) {
        if (!std::isfinite(v)) {
            throw ConfigError("waveform contains non-finite samples");
        }
    }
}

MultichannelSeries::MultichannelSeries(std::size_t channels, std::size_t length, double rate)
    : MultichannelSeries(channels, length, rate, std::vector<double>(channels * length, 0.0))
{
}

MultichannelSeries::MultichannelSeries(std::size_t channels,
                                       std::size_t length,
                                       double rate,
                                       std::vector<double> data)
    : channels_(channels), length_(length), rate_(rate), data_(std::move(data))
{
    if (!(rate_ > 0.0)) {
        throw ConfigError("series rate must be positive");
    }
    if (data_.size() != channels_ * length_) {
        throw ConfigError("series data size " + std::to_string(data_.size()) + " does not match " +
                          std::to_string(channels_) + " x " + std::to_string(length_));
    }
}

MultichannelSeries MultichannelSeries::slice(Interval iv) const
{
    if (iv.end > length_ || iv.begin > iv.end) {
        throw ConfigError("slice [" + std::to_string(iv.begin) + ", " + std::to_string(iv.end) +
                          ") out of range for length " + std::to_string(length_));
    }
    MultichannelSeries out(channels_, iv.size(), rate_);
    for (std::size_t c = 0; c < channels_; ++c) {
        auto src = channel(c);
        auto dst = out.channel(c);
        std::copy(src.begin() + static_cast<std::ptrdiff_t>(iv.begin),
                  src.begin() + static_cast<std::ptrdiff_t>(iv.end),
                  dst.begin());
    }
    return out;
}

void MultichannelSeries::set_rate(double r)
{
    if (!(r > 0.0)) {
        throw ConfigError("series rate must be positive");
    }
    rate_ = r;
}

void Recording::validate() const
{
    if (eeg.channels() < 1 || eeg.channels() > 64) {
        throw ConfigError("recording " + subject_id + "/" + stimulus_id + ": EEG must have 1..64 channels, has " +
                          std::to_string(eeg.channels()));
    }
    if (envelope.channels() != 1) {
        throw ConfigError("recording " + subject_id + "/" + stimulus_id + ": envelope must have 1 channel");
    }
    if (eeg.rate() != envelope.rate() || eeg.length() != envelope.length()) {
        throw ConfigError("recording " + subject_id + "/" + stimulus_id +
                          ": EEG and envelope differ in rate or length");
    }
}

} // namespace eegmm
