#pragma once

// Recording storage, splitting, windowing and match/mismatch example construction.

#include "eegmm/series.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace eegmm {

// ---------------------------------------------------------------------------
// Splits

/// Train keeps its two chunks apart so no window crosses into val/test.
struct SplitRecording {
    std::vector<Interval> train;
    Interval val;
    Interval test;
    std::size_t length = 0;
};

enum class Part { train, val, test, whole };

Part parse_part(const std::string& s);
const char* part_name(Part p);

/// 80/10/10 split with val/test taken from the middle: val starts at round(0.4 L), |val| = |test| = round(0.1 L).
/// Throws ConfigError if length < 10 * min_window or the split would leave an empty part.
SplitRecording split_recording(std::size_t length, std::size_t min_window = 0);
SplitRecording split_recording(const Recording& rec, std::size_t min_window = 0);

std::vector<Interval> part_intervals(const SplitRecording& s, Part part);

// ---------------------------------------------------------------------------
// Windows

/// round(window * (1 - overlap)); throws if the hop would be zero or overlap is outside [0, 1).
std::size_t window_hop(std::size_t window, double overlap);

/// Window starts inside each interval, leaving `imposter_offset` samples after each window so its
/// imposter segment stays inside the same interval. Per interval of length T:
/// floor((T - offset - W) / hop) + 1 windows, or none when T - offset < W.
std::vector<std::size_t> make_windows(std::span<const Interval> intervals, std::size_t window,
                                      std::size_t imposter_offset, double overlap = 0.9);

// ---------------------------------------------------------------------------
// Examples

enum class Target : std::uint8_t { first_is_match, second_is_match };

/// Non-owning view of one EEG window with its matched and imposter envelope segments.
/// The referenced Recording must outlive the example.
struct MatchMismatchExample {
    const Recording* source = nullptr;
    std::size_t recording_index = 0;
    std::size_t start = 0;
    std::size_t window = 0;
    std::size_t imposter_start = 0;

    [[nodiscard]] std::size_t channels() const { return source->eeg.channels(); }
    [[nodiscard]] std::span<const double> eeg_row(std::size_t c) const
    {
        return source->eeg.channel(c).subspan(start, window);
    }
    [[nodiscard]] std::span<const double> matched() const { return source->envelope.channel(0).subspan(start, window); }
    [[nodiscard]] std::span<const double> imposter() const
    {
        return source->envelope.channel(0).subspan(imposter_start, window);
    }
    [[nodiscard]] const std::string& subject_id() const { return source->subject_id; }
    [[nodiscard]] const std::string& stimulus_id() const { return source->stimulus_id; }
};

/// One scored item: an example presented with the match in slot A or in slot B.
struct Trial {
    std::size_t example = 0;
    Target target = Target::first_is_match;
};

struct ExampleOptions {
    double overlap = 0.9;
    double imposter_seconds = 1.0;
};

std::vector<MatchMismatchExample> build_examples(const Recording& rec, const SplitRecording& split, Part part,
                                                 std::size_t window, const ExampleOptions& opts = {},
                                                 std::size_t recording_index = 0);

/// Both orderings of every example, match-first immediately followed by match-second.
std::vector<Trial> expand_orderings(std::size_t example_count);

/// Item index batches. Shuffled deterministically when a seed is given; the last partial batch is kept.
std::vector<std::vector<std::size_t>> batch_iterator(std::size_t item_count, std::size_t batch_size,
                                                     std::optional<std::uint64_t> shuffle_seed);

/// Deterministic Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// On-disk format

struct ManifestEntry {
    std::string subject_id;
    std::string stimulus_id;
    std::string eeg_path; // relative to the manifest directory
    std::string env_path;
    double rate = 0.0;
    std::size_t channels = 0;
    std::size_t length = 0;
    std::map<std::string, std::string> metadata;
};

struct DatasetManifest {
    int version = 1;
    std::vector<ManifestEntry> recordings;
    std::filesystem::path directory; // not serialized
};

/// Raw little-endian float32, channel-major, no header.
void write_series(const std::filesystem::path& path, const MultichannelSeries& s);
MultichannelSeries read_series(const std::filesystem::path& path, std::size_t channels, std::size_t length,
                               double rate);

DatasetManifest read_manifest(const std::filesystem::path& manifest_path);
void write_manifest(const std::filesystem::path& manifest_path, const DatasetManifest& m);

/// Throws ConfigError naming the first missing or size-mismatched file.
void verify_manifest(const DatasetManifest& m);

std::vector<Recording> load_recordings(const DatasetManifest& m);

/// Write one EEG and one envelope file per recording plus manifest.json into `dir`.
DatasetManifest save_dataset(const std::filesystem::path& dir, std::span<const Recording> recordings);

} // namespace eegmm
