// eegmm: batch experiments over EEG match/mismatch datasets. One subcommand per experiment; all
// outputs land in --out.

#include "eegmm/experiment.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

namespace {

using nlohmann::json;

struct Overrides {
    std::string config;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
    std::map<std::string, std::string> paths; // top-level string fields
};

json load_document(const std::string& path)
{
    if (path.empty()) {
        return json::object();
    }
    std::ifstream in(path);
    if (!in) {
        throw eegmm::ConfigError("missing config file " + path);
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw eegmm::ConfigError(path + " is not valid JSON: " + e.what());
    }
}

eegmm::ExperimentConfig resolve(const Overrides& o)
{
    auto doc = load_document(o.config);
    if (!doc.is_object()) {
        throw eegmm::ConfigError(o.config + " must hold a JSON object");
    }
    if (o.out) {
        doc["out"] = *o.out;
    }
    if (o.seed) {
        doc["seed"] = *o.seed;
    }
    if (o.jobs) {
        doc["jobs"] = *o.jobs;
    }
    for (const auto& [key, value] : o.paths) {
        if (key == "pretrained") {
            doc["finetune"]["pretrained"] = value;
        } else {
            doc[key] = value;
        }
    }
    return eegmm::parse_experiment_config(doc);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"EEG match/mismatch experiments"};
    app.require_subcommand(1);

    struct Command {
        const char* name;
        const char* help;
        void (*run)(const eegmm::ExperimentConfig&);
        std::vector<std::pair<std::string, std::string>> path_flags; // flag, config field
    };
    const std::vector<Command> commands = {
        {"synth", "Generate a synthetic dataset suite", eegmm::cmd_synth, {}},
        {"preprocess", "Turn raw EEG and audio into a prepared dataset", eegmm::cmd_preprocess,
         {{"raw-manifest", "raw_manifest"}}},
        {"train", "Train a model and score it on the test split", eegmm::cmd_train, {{"dataset", "dataset"}}},
        {"eval", "Score a checkpoint on a dataset", eegmm::cmd_eval,
         {{"dataset", "dataset"}, {"checkpoint", "checkpoint"}, {"part", "part"}}},
        {"finetune", "Fine-tune a pretrained model per subject", eegmm::cmd_finetune,
         {{"dataset", "dataset"}, {"pretrained", "pretrained"}}},
        {"sweep", "Train one model per sweep value", eegmm::cmd_sweep,
         {{"dataset", "dataset"}, {"held-out", "held_out"}, {"pretrained", "pretrained"}}},
        {"psychometric", "Accuracy per acoustic SNR and per-subject psychometric fits", eegmm::cmd_psychometric,
         {{"dataset", "dataset"}, {"checkpoint", "checkpoint"}}},
        {"correlate", "Correlate fitted midpoints with behavioral SRTs", eegmm::cmd_correlate,
         {{"fits", "fits"}, {"behavioral", "behavioral"}}},
        {"plotdata", "Emit one CSV per requested figure table", eegmm::cmd_plotdata, {}},
    };

    std::vector<Overrides> overrides(commands.size());
    std::vector<std::map<std::string, std::string>> flag_values(commands.size());
    std::vector<CLI::App*> subs;
    for (std::size_t i = 0; i < commands.size(); ++i) {
        auto* sub = app.add_subcommand(commands[i].name, commands[i].help);
        auto& o = overrides[i];
        sub->add_option("--config", o.config, "Experiment config (JSON)");
        sub->add_option("--out", o.out, "Output directory");
        sub->add_option("--seed", o.seed, "Seed for initialization and shuffling");
        sub->add_option("--jobs", o.jobs, "Worker threads for sweeps")->check(CLI::PositiveNumber);
        for (const auto& [flag, field] : commands[i].path_flags) {
            sub->add_option("--" + flag, flag_values[i][field], "Overrides " + field);
        }
        subs.push_back(sub);
    }

    CLI11_PARSE(app, argc, argv);

    for (std::size_t i = 0; i < commands.size(); ++i) {
        if (!subs[i]->parsed()) {
            continue;
        }
        for (const auto& [field, value] : flag_values[i]) {
            if (!value.empty()) {
                overrides[i].paths[field] = value;
            }
        }
        try {
            const auto cfg = resolve(overrides[i]);
            commands[i].run(cfg);
            return 0;
        } catch (const eegmm::ConfigError& e) {
            std::cerr << "eegmm " << commands[i].name << ": " << e.what() << '\n';
            return 2;
        } catch (const std::exception& e) {
            std::cerr << "eegmm " << commands[i].name << ": " << e.what() << '\n';
            return 1;
        }
    }
    return 1;
}
