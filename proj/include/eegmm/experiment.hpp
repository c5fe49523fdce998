#pragma once

// Experiment configuration and the batch commands behind the command-line tool.

#include "eegmm/evaluation.hpp"
#include "eegmm/models.hpp"
#include "eegmm/signal.hpp"
#include "eegmm/synth.hpp"
#include "eegmm/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace eegmm {

struct SweepConfig {
    std::vector<double> window_s;                       // segment lengths
    std::vector<std::string> bands;                     // band labels
    std::vector<std::pair<std::size_t, std::size_t>> kn; // (kernel, layers)
    std::vector<std::size_t> subjects;                  // training subject counts
    std::vector<double> finetune_minutes;
    std::vector<std::vector<std::string>> finetune_groups; // trainable group sets
    std::vector<std::string> models;                    // "dilated", "baseline"; empty = config model
};

struct FinetuneSection {
    std::filesystem::path pretrained;
    std::vector<std::string> trainable; // groups to train; all others frozen
    std::optional<double> minutes;
};

struct ExperimentConfig {
    std::filesystem::path dataset;
    std::filesystem::path held_out;
    std::filesystem::path checkpoint;
    std::filesystem::path out;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    ModelSpec model = DilatedModelSpec{};
    bool model_given = false;
    TrainConfig train;
    std::optional<std::string> band; // bandpass applied to loaded recordings
    double trim_s = 2.0;             // trimmed after band filtering
    std::vector<std::string> subjects; // restrict the dataset to these subjects
    std::string part = "test";
    std::optional<SynthManifest> synth;
    SweepConfig sweep;
    FinetuneSection finetune;
    std::filesystem::path fits;       // correlate input
    std::filesystem::path behavioral; // correlate input
    nlohmann::json plotdata = nlohmann::json::object();
    std::filesystem::path raw_manifest; // preprocess input
    PreprocessOptions preprocess;
};

/// Validates the whole document (unknown fields, types, ranges) before any work starts and throws
/// ConfigError with the dotted field path on the first violation.
ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Canonical JSON of a parsed config (stable key order, no timestamps).
nlohmann::json experiment_config_to_json(const ExperimentConfig& c);

/// manifest.json path for a dataset given as a directory or a manifest file.
std::filesystem::path manifest_path(const std::filesystem::path& dataset);

/// Loads, optionally band-filters and edge-trims, and then standardizes every recording with its own
/// training-split statistics.
std::vector<Recording> load_prepared(const std::filesystem::path& dataset, const std::vector<std::string>& subjects,
                                     const std::optional<std::string>& band, double trim_s);

/// Standardize each recording with the statistics of its own training split.
std::vector<Recording> normalize_recordings(std::vector<Recording> recs);

/// Model spec with its window replaced.
ModelSpec with_window(ModelSpec spec, std::size_t window);

// ---------------------------------------------------------------------------
// Raw input for preprocessing

struct RawEntry {
    std::string subject_id;
    std::string stimulus_id;
    std::string eeg_path;
    double eeg_rate = 0.0;
    std::size_t channels = 0;
    std::size_t eeg_length = 0;
    std::string audio_path;
    double audio_rate = 0.0;
    std::size_t audio_length = 0;
    std::map<std::string, std::string> metadata;
};

/// raw_manifest.json: {version, recordings: [RawEntry fields]}; series files as in the dataset format.
std::vector<RawEntry> read_raw_manifest(const std::filesystem::path& path);
void write_raw_manifest(const std::filesystem::path& path, const std::vector<RawEntry>& entries);

// ---------------------------------------------------------------------------
// Commands. Each writes into cfg.out and returns normally only when every output was produced.

void cmd_synth(const ExperimentConfig& cfg);
void cmd_preprocess(const ExperimentConfig& cfg);
void cmd_train(const ExperimentConfig& cfg);
void cmd_eval(const ExperimentConfig& cfg);
void cmd_finetune(const ExperimentConfig& cfg);
void cmd_sweep(const ExperimentConfig& cfg);
void cmd_psychometric(const ExperimentConfig& cfg);
void cmd_correlate(const ExperimentConfig& cfg);
void cmd_plotdata(const ExperimentConfig& cfg);

/// Names of the plot-data tables cmd_plotdata can emit.
std::vector<std::string> plotdata_tables();

} // namespace eegmm
