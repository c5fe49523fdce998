#pragma once

// Synthetic EEG forward model: a surrogate speech envelope, a per-subject temporal response and
// spatial pattern, and 1/f-shaped multichannel noise.

#include "eegmm/dataset.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace eegmm {

struct SynthSubjectConfig {
    std::string subject_id;
    std::uint64_t seed = 0;
    std::vector<double> pattern;   // unit norm, one weight per channel
    std::vector<double> kernel;    // response FIR over lags 0..500 ms
    double latency_jitter_ms = 8.0; // std of a per-recording kernel shift
    bool nonlinear = false;         // log-compress the envelope before convolution
    double neural_gain = 1.0;       // 0 gives a subject without any response
    double noise_scale = 1.0;
    std::vector<double> channel_scale; // per-channel noise multiplier
    double response_snr_db = -6.0;  // response/noise power ratio without acoustic noise
    double srt_db = -7.0;           // behavioral speech reception threshold
    double snr_at_srt_db = -14.0;   // response/noise ratio at the SRT
    double slope = 1.0;             // response dB per acoustic dB
    std::vector<std::string> conditions; // acoustic SNR labels recorded for this subject ("none" = no noise)

    /// Throws ConfigError if the pattern is not unit norm, the kernel has no energy or the noise scale is not positive.
    void validate() const;
    /// Response/noise ratio (dB) for an acoustic SNR; nullopt (no noise) maps to response_snr_db.
    [[nodiscard]] double response_db(std::optional<double> acoustic_snr_db) const;
};

nlohmann::json subject_config_to_json(const SynthSubjectConfig& c);
SynthSubjectConfig subject_config_from_json(const nlohmann::json& j);

/// Nonnegative lognormal envelope at `rate` whose log is a Gaussian process with std `log_std` and most
/// power in 2-8 Hz.
MultichannelSeries generate_envelope(double duration_s, std::uint64_t seed, double rate = 64.0, double log_std = 1.0);

/// The two terms of a synthetic recording before summation.
struct SynthComponents {
    MultichannelSeries response; // scaled to the requested ratio
    MultichannelSeries noise;
    double gain = 0.0;
};

SynthComponents generate_components(const MultichannelSeries& envelope, const SynthSubjectConfig& cfg,
                                    std::optional<double> acoustic_snr_db, std::uint64_t recording_seed);

/// eeg = response + noise; metadata snr_db is the acoustic SNR or "none".
Recording generate_recording(const MultichannelSeries& envelope, const SynthSubjectConfig& cfg,
                             std::optional<double> acoustic_snr_db, std::uint64_t recording_seed,
                             const std::string& stimulus_id);

struct SynthManifest {
    std::size_t subjects = 6;
    std::size_t recordings_per_subject = 1;
    double duration_s = 600.0;
    double rate = 64.0;
    std::size_t channels = 64;
    std::uint64_t seed = 1;
    bool nonlinear = false;
    double response_snr_db = -6.0;
    double response_snr_spread_db = 1.0; // per-subject std around response_snr_db
    double rotation_deg = 15.0;          // spread of subject patterns around the population pattern
    std::size_t held_out_subjects = 0;   // extra subjects with a strongly rotated pattern
    double held_out_rotation_deg = 75.0;
    bool snr_conditions = false; // one recording per acoustic condition instead of story recordings
    double condition_duration_s = 120.0;
    double envelope_log_std = 1.0; // heavier envelope peaks make the compressive curve stronger
    std::string prefix = "S";

    void validate() const;
};

nlohmann::json synth_manifest_to_json(const SynthManifest& m);
/// Unknown fields are rejected; missing ones keep their defaults.
SynthManifest synth_manifest_from_json(const nlohmann::json& j);

/// Subject configs of a suite; ids are prefix + 2-digit index, held-out subjects get prefix + "H".
std::vector<SynthSubjectConfig> make_subject_configs(const SynthManifest& m);

/// All recordings of a suite in subject order.
std::vector<Recording> generate_recordings(const SynthManifest& m);

/// Writes the dataset (manifest.json plus series files), subjects/<id>.json, synth.json and
/// behavioral_srt.csv (subject_id,srt_db) into `dir`.
DatasetManifest generate_suite(const SynthManifest& m, const std::filesystem::path& dir);

} // namespace eegmm
