#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace eegmm {

/// Thrown for invalid configuration or violated preconditions.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Half-open sample interval [begin, end).
struct Interval {
    std::size_t begin = 0;
    std::size_t end = 0;

    [[nodiscard]] std::size_t size() const { return end > begin ? end - begin : 0; }
    [[nodiscard]] bool empty() const { return size() == 0; }
    [[nodiscard]] bool contains(std::size_t i) const { return i >= begin && i < end; }
    [[nodiscard]] bool contains(const Interval& o) const { return o.begin >= begin && o.end <= end; }
    [[nodiscard]] bool overlaps(const Interval& o) const { return begin < o.end && o.begin < end; }

    friend bool operator==(const Interval&, const Interval&) = default;
};

/// Single-channel audio.
struct Waveform {
    std::vector<double> samples;
    double rate = 0.0;

    Waveform() = default;
    Waveform(std::vector<double> s, double r);
};

/// Channel-major multichannel signal: channel c occupies data[c*length, (c+1)*length).
class MultichannelSeries {
public:
    MultichannelSeries() = default;
    MultichannelSeries(std::size_t channels, std::size_t length, double rate);
    MultichannelSeries(std::size_t channels, std::size_t length, double rate, std::vector<double> data);

    [[nodiscard]] std::size_t channels() const { return channels_; }
    [[nodiscard]] std::size_t length() const { return length_; }
    [[nodiscard]] double rate() const { return rate_; }

    [[nodiscard]] std::span<double> channel(std::size_t c) { return {data_.data() + c * length_, length_}; }
    [[nodiscard]] std::span<const double> channel(std::size_t c) const
    {
        return {data_.data() + c * length_, length_};
    }

    double& at(std::size_t c, std::size_t t) { return data_[c * length_ + t]; }
    [[nodiscard]] double at(std::size_t c, std::size_t t) const { return data_[c * length_ + t]; }

    [[nodiscard]] std::vector<double>& data() { return data_; }
    [[nodiscard]] const std::vector<double>& data() const { return data_; }

    /// Copy of samples [iv.begin, iv.end) of every channel.
    [[nodiscard]] MultichannelSeries slice(Interval iv) const;

    void set_rate(double r);

private:
    std::size_t channels_ = 0;
    std::size_t length_ = 0;
    double rate_ = 0.0;
    std::vector<double> data_;
};

/// One subject listening to one stimulus: EEG plus the aligned stimulus envelope.
struct Recording {
    std::string subject_id;
    std::string stimulus_id;
    MultichannelSeries eeg;
    MultichannelSeries envelope;
    std::map<std::string, std::string> metadata;

    [[nodiscard]] std::size_t length() const { return eeg.length(); }
    [[nodiscard]] double rate() const { return eeg.rate(); }

    /// Throws ConfigError unless eeg and envelope agree in rate/length and 1 <= channels <= 64.
    void validate() const;
};

} // namespace eegmm
