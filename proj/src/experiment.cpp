#include "eegmm/experiment.hpp"

#include "eegmm/csv.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace eegmm {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config parsing

namespace {

/// Field-by-field reader for one JSON object that rejects unknown keys on finish().
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) {
            throw ConfigError(where() + " must be an object");
        }
    }

    [[nodiscard]] std::string where(const std::string& key = {}) const
    {
        if (key.empty()) {
            return path_.empty() ? "config" : path_;
        }
        return path_.empty() ? key : path_ + "." + key;
    }

    const json* get(const std::string& key)
    {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() || it->is_null() ? nullptr : &*it;
    }

    std::optional<std::string> string(const std::string& key)
    {
        const auto* v = get(key);
        if (v == nullptr) {
            return std::nullopt;
        }
        if (!v->is_string()) {
            throw ConfigError(where(key) + " must be a string");
        }
        return v->get<std::string>();
    }

    std::optional<double> number(const std::string& key)
    {
        const auto* v = get(key);
        if (v == nullptr) {
            return std::nullopt;
        }
        if (!v->is_number()) {
            throw ConfigError(where(key) + " must be a number");
        }
        return v->get<double>();
    }

    std::optional<std::uint64_t> count(const std::string& key)
    {
        const auto* v = get(key);
        if (v == nullptr) {
            return std::nullopt;
        }
        return as_count(*v, where(key));
    }

    std::optional<bool> boolean(const std::string& key)
    {
        const auto* v = get(key);
        if (v == nullptr) {
            return std::nullopt;
        }
        if (!v->is_boolean()) {
            throw ConfigError(where(key) + " must be true or false");
        }
        return v->get<bool>();
    }

    const json* array(const std::string& key)
    {
        const auto* v = get(key);
        if (v != nullptr && !v->is_array()) {
            throw ConfigError(where(key) + " must be an array");
        }
        return v;
    }

    const json* object(const std::string& key)
    {
        const auto* v = get(key);
        if (v != nullptr && !v->is_object()) {
            throw ConfigError(where(key) + " must be an object");
        }
        return v;
    }

    void finish() const
    {
        for (const auto& [key, value] : j_.items()) {
            if (seen_.count(key) == 0) {
                throw ConfigError(where(key) + " is not a known field");
            }
        }
    }

    static std::uint64_t as_count(const json& v, const std::string& where)
    {
        if (v.is_number_unsigned()) {
            return v.get<std::uint64_t>();
        }
        if (v.is_number_integer() && v.get<long long>() >= 0) {
            return static_cast<std::uint64_t>(v.get<long long>());
        }
        throw ConfigError(where + " must be a non-negative integer");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

std::vector<std::string> string_list(const json& a, const std::string& where)
{
    std::vector<std::string> out;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a[i].is_string()) {
            throw ConfigError(where + "[" + std::to_string(i) + "] must be a string");
        }
        out.push_back(a[i].get<std::string>());
    }
    return out;
}

std::vector<double> number_list(const json& a, const std::string& where)
{
    std::vector<double> out;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a[i].is_number()) {
            throw ConfigError(where + "[" + std::to_string(i) + "] must be a number");
        }
        out.push_back(a[i].get<double>());
    }
    return out;
}

ModelSpec parse_model(const json& j)
{
    Fields f(j, "model");
    const auto type = f.string("type").value_or("dilated");
    if (type == "dilated") {
        DilatedModelSpec d;
        d.kernel = f.count("kernel").value_or(d.kernel);
        d.layers = f.count("layers").value_or(d.layers);
        d.spatial_filters = f.count("spatial_filters").value_or(d.spatial_filters);
        d.dilated_filters = f.count("dilated_filters").value_or(d.dilated_filters);
        d.input_channels = f.count("input_channels").value_or(d.input_channels);
        d.window = f.count("window").value_or(d.window);
        d.conv_bias = f.boolean("conv_bias").value_or(d.conv_bias);
        const auto head = f.string("head").value_or("per_index");
        if (head != "per_index" && head != "all_pairs") {
            throw ConfigError("model.head must be \"per_index\" or \"all_pairs\"");
        }
        d.head = head == "per_index" ? HeadWiring::per_index : HeadWiring::all_pairs;
        f.finish();
        return d;
    }
    if (type == "baseline") {
        BaselineModelSpec b;
        b.taps = f.count("taps").value_or(b.taps);
        b.input_channels = f.count("input_channels").value_or(b.input_channels);
        b.window = f.count("window").value_or(b.window);
        f.finish();
        return b;
    }
    throw ConfigError("model.type must be \"dilated\" or \"baseline\", got \"" + type + "\"");
}

void check_group_names(const std::vector<std::string>& names, const std::string& where)
{
    for (std::size_t i = 0; i < names.size(); ++i) {
        try {
            parse_group(names[i]);
        } catch (const ConfigError&) {
            throw ConfigError(where + "[" + std::to_string(i) + "]: unknown parameter group \"" + names[i] + "\"");
        }
    }
}

} // namespace

ExperimentConfig parse_experiment_config(const json& doc)
{
    Fields f(doc, "");
    ExperimentConfig c;
    c.dataset = f.string("dataset").value_or("");
    c.held_out = f.string("held_out").value_or("");
    c.checkpoint = f.string("checkpoint").value_or("");
    c.out = f.string("out").value_or("");
    c.seed = f.count("seed").value_or(0);
    c.jobs = f.count("jobs").value_or(1);
    if (c.jobs < 1) {
        throw ConfigError("jobs must be >= 1");
    }
    if (const auto* m = f.object("model")) {
        c.model = parse_model(*m);
        c.model_given = true;
        build_model(c.model, 0); // rejects receptive fields wider than the window
    }
    if (const auto* t = f.object("train")) {
        if (t->contains("seed")) {
            throw ConfigError("train.seed is not a known field (use the top-level seed)");
        }
        c.train = train_config_from_json(*t);
    }
    c.band = f.string("band");
    if (c.band) {
        BandSpec::named(*c.band);
    }
    c.trim_s = f.number("trim_s").value_or(c.trim_s);
    if (!(c.trim_s >= 0.0)) {
        throw ConfigError("trim_s must be >= 0");
    }
    if (const auto* s = f.array("subjects")) {
        c.subjects = string_list(*s, "subjects");
    }
    c.part = f.string("part").value_or(c.part);
    parse_part(c.part);
    if (const auto* s = f.object("synth")) {
        json sj = *s;
        if (!sj.contains("seed")) {
            sj["seed"] = c.seed;
        }
        try {
            c.synth = synth_manifest_from_json(sj);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(e.what()));
        }
    }
    if (const auto* s = f.object("sweep")) {
        Fields sf(*s, "sweep");
        if (const auto* a = sf.array("window_s")) {
            c.sweep.window_s = number_list(*a, "sweep.window_s");
            for (std::size_t i = 0; i < c.sweep.window_s.size(); ++i) {
                if (!(c.sweep.window_s[i] > 0.0)) {
                    throw ConfigError("sweep.window_s[" + std::to_string(i) + "] must be > 0");
                }
            }
        }
        if (const auto* a = sf.array("bands")) {
            c.sweep.bands = string_list(*a, "sweep.bands");
            for (std::size_t i = 0; i < c.sweep.bands.size(); ++i) {
                try {
                    BandSpec::named(c.sweep.bands[i]);
                } catch (const ConfigError& e) {
                    throw ConfigError("sweep.bands[" + std::to_string(i) + "]: " + e.what());
                }
            }
        }
        if (const auto* a = sf.array("kn")) {
            for (std::size_t i = 0; i < a->size(); ++i) {
                const auto& p = (*a)[i];
                const std::string w = "sweep.kn[" + std::to_string(i) + "]";
                if (!p.is_array() || p.size() != 2) {
                    throw ConfigError(w + " must be a [kernel, layers] pair");
                }
                c.sweep.kn.emplace_back(Fields::as_count(p[0], w + "[0]"), Fields::as_count(p[1], w + "[1]"));
            }
        }
        if (const auto* a = sf.array("subjects")) {
            for (std::size_t i = 0; i < a->size(); ++i) {
                const auto n = Fields::as_count((*a)[i], "sweep.subjects[" + std::to_string(i) + "]");
                if (n < 1) {
                    throw ConfigError("sweep.subjects[" + std::to_string(i) + "] must be >= 1");
                }
                c.sweep.subjects.push_back(n);
            }
        }
        if (const auto* a = sf.array("finetune_minutes")) {
            c.sweep.finetune_minutes = number_list(*a, "sweep.finetune_minutes");
            for (std::size_t i = 0; i < c.sweep.finetune_minutes.size(); ++i) {
                if (!(c.sweep.finetune_minutes[i] > 0.0)) {
                    throw ConfigError("sweep.finetune_minutes[" + std::to_string(i) + "] must be > 0");
                }
            }
        }
        if (const auto* a = sf.array("finetune_groups")) {
            for (std::size_t i = 0; i < a->size(); ++i) {
                const std::string w = "sweep.finetune_groups[" + std::to_string(i) + "]";
                if (!(*a)[i].is_array() || (*a)[i].empty()) {
                    throw ConfigError(w + " must be a nonempty array of group names");
                }
                auto names = string_list((*a)[i], w);
                check_group_names(names, w);
                c.sweep.finetune_groups.push_back(std::move(names));
            }
        }
        if (const auto* a = sf.array("models")) {
            c.sweep.models = string_list(*a, "sweep.models");
            for (std::size_t i = 0; i < c.sweep.models.size(); ++i) {
                if (c.sweep.models[i] != "dilated" && c.sweep.models[i] != "baseline") {
                    throw ConfigError("sweep.models[" + std::to_string(i) + "] must be \"dilated\" or \"baseline\"");
                }
            }
        }
        sf.finish();
    }
    if (const auto* s = f.object("finetune")) {
        Fields ff(*s, "finetune");
        c.finetune.pretrained = ff.string("pretrained").value_or("");
        if (const auto* a = ff.array("trainable")) {
            c.finetune.trainable = string_list(*a, "finetune.trainable");
            check_group_names(c.finetune.trainable, "finetune.trainable");
            if (c.finetune.trainable.empty()) {
                throw ConfigError("finetune.trainable must name at least one group");
            }
        }
        c.finetune.minutes = ff.number("minutes");
        if (c.finetune.minutes && !(*c.finetune.minutes > 0.0)) {
            throw ConfigError("finetune.minutes must be > 0");
        }
        ff.finish();
    }
    c.fits = f.string("fits").value_or("");
    c.behavioral = f.string("behavioral").value_or("");
    if (const auto* p = f.object("plotdata")) {
        const auto names = plotdata_tables();
        for (const auto& [key, value] : p->items()) {
            if (std::find(names.begin(), names.end(), key) == names.end()) {
                throw ConfigError("plotdata." + key + " is not a known table");
            }
        }
        c.plotdata = *p;
    }
    c.raw_manifest = f.string("raw_manifest").value_or("");
    if (const auto* p = f.object("preprocess")) {
        Fields pf(*p, "preprocess");
        c.preprocess.intermediate_rate = pf.number("intermediate_rate").value_or(c.preprocess.intermediate_rate);
        c.preprocess.target_rate = pf.number("target_rate").value_or(c.preprocess.target_rate);
        if (const auto b = pf.string("band")) {
            c.preprocess.band = BandSpec::named(*b);
        }
        c.preprocess.trim_seconds = pf.number("trim_s").value_or(c.preprocess.trim_seconds);
        c.preprocess.gammatone_subbands = pf.count("subbands").value_or(c.preprocess.gammatone_subbands);
        c.preprocess.compression = pf.number("compression").value_or(c.preprocess.compression);
        if (!(c.preprocess.intermediate_rate > 0.0) || !(c.preprocess.target_rate > 0.0)) {
            throw ConfigError("preprocess rates must be > 0");
        }
        if (!(c.preprocess.trim_seconds >= 0.0)) {
            throw ConfigError("preprocess.trim_s must be >= 0");
        }
        if (!(c.preprocess.compression > 0.0)) {
            throw ConfigError("preprocess.compression must be > 0");
        }
        pf.finish();
    }
    f.finish();
    return c;
}

ExperimentConfig load_experiment_config(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("missing config file " + path.string());
    }
    json doc;
    try {
        in >> doc;
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + " is not valid JSON: " + e.what());
    }
    return parse_experiment_config(doc);
}

json experiment_config_to_json(const ExperimentConfig& c)
{
    json j;
    j["dataset"] = c.dataset.string();
    j["held_out"] = c.held_out.string();
    j["checkpoint"] = c.checkpoint.string();
    j["out"] = c.out.string();
    j["seed"] = c.seed;
    j["model"] = model_spec_to_json(c.model);
    j["train"] = train_config_to_json(c.train);
    j["train"].erase("seed");
    j["band"] = c.band ? json(*c.band) : json(nullptr);
    j["trim_s"] = c.trim_s;
    j["subjects"] = c.subjects;
    j["part"] = c.part;
    if (c.synth) {
        j["synth"] = synth_manifest_to_json(*c.synth);
    }
    json s;
    s["window_s"] = c.sweep.window_s;
    s["bands"] = c.sweep.bands;
    s["kn"] = json::array();
    for (const auto& [k, n] : c.sweep.kn) {
        s["kn"].push_back({k, n});
    }
    s["subjects"] = c.sweep.subjects;
    s["finetune_minutes"] = c.sweep.finetune_minutes;
    s["finetune_groups"] = c.sweep.finetune_groups;
    s["models"] = c.sweep.models;
    j["sweep"] = s;
    j["finetune"] = {{"pretrained", c.finetune.pretrained.string()},
                     {"trainable", c.finetune.trainable},
                     {"minutes", c.finetune.minutes ? json(*c.finetune.minutes) : json(nullptr)}};
    j["fits"] = c.fits.string();
    j["behavioral"] = c.behavioral.string();
    j["plotdata"] = c.plotdata;
    j["raw_manifest"] = c.raw_manifest.string();
    return j;
}

// ---------------------------------------------------------------------------
// Data

fs::path manifest_path(const fs::path& dataset)
{
    if (dataset.empty()) {
        throw ConfigError("no dataset given (set \"dataset\" in the config or pass --dataset)");
    }
    if (fs::is_directory(dataset)) {
        return dataset / "manifest.json";
    }
    return dataset;
}

std::vector<Recording> normalize_recordings(std::vector<Recording> recs)
{
    for (auto& r : recs) {
        const auto split = split_recording(r);
        r = normalize_with_train_stats(r, split.train);
    }
    return recs;
}

std::vector<Recording> load_prepared(const fs::path& dataset, const std::vector<std::string>& subjects,
                                     const std::optional<std::string>& band, double trim_s)
{
    const auto mpath = manifest_path(dataset);
    if (!fs::exists(mpath)) {
        throw ConfigError("missing dataset manifest " + mpath.string());
    }
    auto manifest = read_manifest(mpath);
    if (!subjects.empty()) {
        std::vector<ManifestEntry> keep;
        for (const auto& s : subjects) {
            bool found = false;
            for (const auto& e : manifest.recordings) {
                if (e.subject_id == s) {
                    keep.push_back(e);
                    found = true;
                }
            }
            if (!found) {
                throw ConfigError("subject " + s + " does not appear in " + mpath.string());
            }
        }
        manifest.recordings = std::move(keep);
    }
    verify_manifest(manifest);
    auto recs = load_recordings(manifest);
    if (recs.empty()) {
        throw ConfigError("dataset " + mpath.string() + " has no recordings");
    }
    if (band) {
        const auto spec = BandSpec::named(*band);
        for (auto& r : recs) {
            r.eeg = bandpass_series(r.eeg, spec);
            r.envelope = bandpass_series(r.envelope, spec);
            r = trim_edges(r, trim_s);
        }
    }
    return normalize_recordings(std::move(recs));
}

ModelSpec with_window(ModelSpec spec, std::size_t window)
{
    std::visit([&](auto& s) { s.window = window; }, spec);
    return spec;
}

namespace {

std::size_t seconds_to_samples(double seconds, double rate)
{
    return static_cast<std::size_t>(std::llround(seconds * rate));
}

void check_channels(const ModelSpec& spec, const std::vector<Recording>& recs)
{
    const std::size_t want = std::visit([](const auto& s) { return s.input_channels; }, spec);
    for (const auto& r : recs) {
        if (r.eeg.channels() != want) {
            throw ConfigError("model.input_channels is " + std::to_string(want) + " but recording " + r.subject_id +
                              "/" + r.stimulus_id + " has " + std::to_string(r.eeg.channels()) + " channels");
        }
    }
}

void require(const fs::path& p, const std::string& what)
{
    if (p.empty()) {
        throw ConfigError("no " + what + " given");
    }
    if (!fs::exists(p)) {
        throw ConfigError("missing " + what + " " + p.string());
    }
}

fs::path require_out(const ExperimentConfig& cfg)
{
    if (cfg.out.empty()) {
        throw ConfigError("no output directory given (set \"out\" in the config or pass --out)");
    }
    fs::create_directories(cfg.out);
    return cfg.out;
}

void write_json(const fs::path& path, const json& j)
{
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << j.dump(2) << '\n';
    if (!f) {
        throw ConfigError("cannot write " + path.string());
    }
}

std::string now_iso()
{
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

/// Timestamps live here and nowhere else.
class RunLog {
public:
    explicit RunLog(const fs::path& path) : out_(path, std::ios::app) {}
    void line(const std::string& msg)
    {
        std::lock_guard lock(mu_);
        out_ << now_iso() << ' ' << msg << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
    std::mutex mu_;
};

ModelSpec spec_of_type(const ExperimentConfig& cfg, const std::string& type)
{
    const bool dilated = std::holds_alternative<DilatedModelSpec>(cfg.model);
    if ((type == "dilated") == dilated) {
        return cfg.model;
    }
    const std::size_t channels = std::visit([](const auto& s) { return s.input_channels; }, cfg.model);
    const std::size_t window = std::visit([](const auto& s) { return s.window; }, cfg.model);
    if (type == "dilated") {
        DilatedModelSpec d;
        d.input_channels = channels;
        d.window = window;
        return d;
    }
    BaselineModelSpec b;
    b.input_channels = channels;
    b.window = window;
    return b;
}

std::string model_type(const ModelSpec& s)
{
    return std::holds_alternative<DilatedModelSpec>(s) ? "dilated" : "baseline";
}

void set_metadata(ModelState& m, const TrainResult& r, const TrainConfig& tc)
{
    m.metadata["batch_size"] = std::to_string(tc.batch_size);
    m.metadata["best_epoch"] = std::to_string(r.history.best_epoch);
    m.metadata["best_val_loss"] = format_number(r.history.best_val_loss);
    m.metadata["epochs_run"] = std::to_string(r.history.epochs.empty() ? 0 : r.history.epochs.back().epoch);
    m.metadata["stop_reason"] = r.history.stop_reason;
    m.metadata["train_config"] = train_config_to_json(tc).dump();
}

/// Trains with per-epoch metrics written to `<dir>/metrics.csv` and saves `<dir>/model.ckpt`.
TrainResult train_into(const fs::path& dir, const ModelSpec& spec, const WindowSets& sets, const TrainConfig& tc,
                       std::uint64_t seed, const std::set<ParamGroup>& frozen = {},
                       const ModelState* initial = nullptr)
{
    fs::create_directories(dir);
    CsvWriter metrics(dir / "metrics.csv", {"epoch", "train_loss", "val_loss", "val_acc"});
    const ModelState init = initial != nullptr ? *initial : build_model(spec, seed);
    auto result = train(init, sets.train, sets.val, tc, frozen, [&](const EpochRecord& e) {
        metrics.row({std::to_string(e.epoch), format_number(e.train_loss), format_number(e.val_loss),
                     format_number(e.val_acc)});
    });
    metrics.close();
    set_metadata(result.model, result, tc);
    save_checkpoint(dir / "model.ckpt", result.model);
    return result;
}

struct FinetuneRow {
    std::string subject_id;
    double before = 0.0;
    double after = 0.0;
};

std::set<ParamGroup> frozen_from_trainable(const ModelState& model, const std::vector<std::string>& trainable)
{
    std::set<ParamGroup> frozen;
    std::set<ParamGroup> train_set;
    for (const auto& t : trainable) {
        train_set.insert(parse_group(t));
    }
    const auto groups = parameter_groups(model);
    for (const auto g : train_set) {
        if (groups.count(g) == 0) {
            throw ConfigError(std::string("trainable group ") + group_name(g) + " does not exist in this model");
        }
    }
    for (const auto& [g, names] : groups) {
        if (!trainable.empty() && train_set.count(g) == 0) {
            frozen.insert(g);
        }
    }
    return frozen;
}

std::vector<FinetuneRow> finetune_subjects(const ModelState& pretrained, const std::vector<Recording>& recs,
                                           const std::vector<std::string>& trainable, std::optional<double> minutes,
                                           const TrainConfig& tc, const fs::path& dir)
{
    const auto frozen = frozen_from_trainable(pretrained, trainable);
    std::vector<FinetuneRow> rows;
    for (const auto& id : subject_ids(recs)) {
        std::vector<Recording> mine;
        for (const auto& r : recs) {
            if (r.subject_id == id) {
                mine.push_back(r);
            }
        }
        const auto sets = make_window_sets(mine, pretrained.window(), {}, minutes);
        FinetuneRow row;
        row.subject_id = id;
        row.before = evaluate(pretrained, sets.test).overall();
        FinetuneConfig fc;
        fc.frozen = frozen;
        fc.minutes = minutes;
        fc.train = tc;
        auto res = finetune(pretrained, sets.train, sets.val, fc);
        for (std::size_t i = 0; i < pretrained.params.size(); ++i) {
            if (frozen.count(pretrained.params[i].group) != 0 &&
                pretrained.params[i].values != res.model.params[i].values) {
                throw TrainingError("frozen parameter " + pretrained.params[i].name + " changed while fine-tuning");
            }
        }
        row.after = evaluate(res.model, sets.test).overall();
        set_metadata(res.model, res, tc);
        if (!dir.empty()) {
            fs::create_directories(dir);
            save_checkpoint(dir / (id + ".ckpt"), res.model);
        }
        rows.push_back(row);
    }
    return rows;
}

std::string join(const std::vector<std::string>& v, const std::string& sep)
{
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += (i > 0 ? sep : "") + v[i];
    }
    return s;
}

} // namespace

// ---------------------------------------------------------------------------
// Raw manifest

std::vector<RawEntry> read_raw_manifest(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("missing raw manifest " + path.string());
    }
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + " is not valid JSON: " + e.what());
    }
    std::vector<RawEntry> out;
    if (!j.contains("recordings") || !j["recordings"].is_array()) {
        throw ConfigError(path.string() + ": recordings must be an array");
    }
    for (std::size_t i = 0; i < j["recordings"].size(); ++i) {
        const auto& e = j["recordings"][i];
        const std::string w = path.string() + ": recordings[" + std::to_string(i) + "].";
        auto need = [&](const char* k) -> const json& {
            if (!e.contains(k)) {
                throw ConfigError(w + k + " is missing");
            }
            return e.at(k);
        };
        RawEntry r;
        try {
            r.subject_id = need("subject_id").get<std::string>();
            r.stimulus_id = need("stimulus_id").get<std::string>();
            r.eeg_path = need("eeg_path").get<std::string>();
            r.eeg_rate = need("eeg_rate").get<double>();
            r.channels = need("channels").get<std::size_t>();
            r.eeg_length = need("eeg_length").get<std::size_t>();
            r.audio_path = need("audio_path").get<std::string>();
            r.audio_rate = need("audio_rate").get<double>();
            r.audio_length = need("audio_length").get<std::size_t>();
            if (e.contains("metadata")) {
                r.metadata = e["metadata"].get<std::map<std::string, std::string>>();
            }
        } catch (const json::type_error& ex) {
            throw ConfigError(w + " has a field of the wrong type: " + ex.what());
        }
        out.push_back(std::move(r));
    }
    return out;
}

void write_raw_manifest(const fs::path& path, const std::vector<RawEntry>& entries)
{
    json j;
    j["version"] = 1;
    j["recordings"] = json::array();
    for (const auto& r : entries) {
        j["recordings"].push_back({{"subject_id", r.subject_id},
                                   {"stimulus_id", r.stimulus_id},
                                   {"eeg_path", r.eeg_path},
                                   {"eeg_rate", r.eeg_rate},
                                   {"channels", r.channels},
                                   {"eeg_length", r.eeg_length},
                                   {"audio_path", r.audio_path},
                                   {"audio_rate", r.audio_rate},
                                   {"audio_length", r.audio_length},
                                   {"metadata", r.metadata}});
    }
    write_json(path, j);
}

// ---------------------------------------------------------------------------
// Commands

void cmd_synth(const ExperimentConfig& cfg)
{
    if (!cfg.synth) {
        throw ConfigError("synth needs a \"synth\" section in the config");
    }
    const auto out = require_out(cfg);
    generate_suite(*cfg.synth, out);
}

void cmd_preprocess(const ExperimentConfig& cfg)
{
    require(cfg.raw_manifest, "raw manifest");
    const auto out = require_out(cfg);
    const auto entries = read_raw_manifest(cfg.raw_manifest);
    const auto base = cfg.raw_manifest.parent_path();
    std::vector<Recording> recs;
    for (const auto& e : entries) {
        require(base / e.eeg_path, "EEG file");
        require(base / e.audio_path, "audio file");
        const auto eeg = read_series(base / e.eeg_path, e.channels, e.eeg_length, e.eeg_rate);
        const auto audio = read_series(base / e.audio_path, 1, e.audio_length, e.audio_rate);
        Recording r;
        r.subject_id = e.subject_id;
        r.stimulus_id = e.stimulus_id;
        r.metadata = e.metadata;
        r.eeg = preprocess_eeg(eeg, cfg.preprocess);
        const Waveform wav(std::vector<double>(audio.channel(0).begin(), audio.channel(0).end()), e.audio_rate);
        r.envelope = preprocess_envelope(wav, cfg.preprocess);
        const std::size_t n = std::min(r.eeg.length(), r.envelope.length());
        r.eeg = r.eeg.slice({0, n});
        r.envelope = r.envelope.slice({0, n});
        recs.push_back(trim_edges(r, cfg.preprocess.trim_seconds));
    }
    save_dataset(out, recs);
}

void cmd_train(const ExperimentConfig& cfg)
{
    const auto out = require_out(cfg);
    RunLog log(out / "run.log");
    log.line("train start");
    const auto recs = load_prepared(cfg.dataset, cfg.subjects, cfg.band, cfg.trim_s);
    check_channels(cfg.model, recs);
    const std::size_t window = std::visit([](const auto& s) { return s.window; }, cfg.model);
    build_model(cfg.model, cfg.seed);
    const auto sets = make_window_sets(recs, window);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    write_json(out / "config.json", experiment_config_to_json(cfg));
    const auto result = train_into(out, cfg.model, sets, tc, cfg.seed);
    const auto report = evaluate(result.model, sets.test);
    write_accuracy_csv(out / "test_accuracy.csv", report);
    write_subject_csv(out / "test_subjects.csv", report);
    write_json(out / "summary.json", {{"best_epoch", result.history.best_epoch},
                                      {"best_val_loss", result.history.best_val_loss},
                                      {"stop_reason", result.history.stop_reason},
                                      {"train_windows", sets.train.size()},
                                      {"val_windows", sets.val.size()},
                                      {"test_windows", sets.test.size()},
                                      {"test_accuracy", report.overall()},
                                      {"test_median_subject_accuracy", report.median_subject()}});
    log.line("train done: best epoch " + std::to_string(result.history.best_epoch));
}

void cmd_eval(const ExperimentConfig& cfg)
{
    require(cfg.checkpoint, "checkpoint");
    const auto out = require_out(cfg);
    const auto model = load_checkpoint(cfg.checkpoint);
    const auto recs = load_prepared(cfg.dataset, cfg.subjects, cfg.band, cfg.trim_s);
    check_channels(model.spec, recs);
    const auto part = parse_part(cfg.part);
    std::vector<MatchMismatchExample> ex;
    for (std::size_t r = 0; r < recs.size(); ++r) {
        SplitRecording split;
        if (part == Part::whole) {
            split.length = recs[r].length();
        } else {
            split = split_recording(recs[r], model.window());
        }
        const auto e = build_examples(recs[r], split, part, model.window(), {}, r);
        ex.insert(ex.end(), e.begin(), e.end());
    }
    const auto report = evaluate(model, ex);
    write_accuracy_csv(out / "accuracy.csv", report);
    write_subject_csv(out / "subjects.csv", report);
    write_json(out / "summary.json", {{"part", cfg.part},
                                      {"windows", ex.size()},
                                      {"accuracy", report.overall()},
                                      {"median_subject_accuracy", report.median_subject()}});
}

void cmd_finetune(const ExperimentConfig& cfg)
{
    const fs::path pre = !cfg.finetune.pretrained.empty() ? cfg.finetune.pretrained : cfg.checkpoint;
    require(pre, "pretrained checkpoint");
    const auto out = require_out(cfg);
    const auto model = load_checkpoint(pre);
    const auto recs = load_prepared(cfg.dataset, cfg.subjects, cfg.band, cfg.trim_s);
    check_channels(model.spec, recs);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    const auto rows = finetune_subjects(model, recs, cfg.finetune.trainable, cfg.finetune.minutes, tc, out / "models");
    CsvWriter w(out / "finetune.csv", {"subject_id", "before", "after"});
    std::vector<double> before, after;
    for (const auto& r : rows) {
        w.row({r.subject_id, format_number(r.before), format_number(r.after)});
        before.push_back(r.before);
        after.push_back(r.after);
    }
    w.close();
    json summary = {{"subjects", rows.size()},
                    {"trainable", cfg.finetune.trainable},
                    {"minutes", cfg.finetune.minutes ? json(*cfg.finetune.minutes) : json(nullptr)}};
    try {
        const auto wx = wilcoxon_signed_rank(before, after);
        summary["wilcoxon_w"] = wx.statistic;
        summary["wilcoxon_p"] = wx.p;
        summary["improved"] = wx.w_plus > wx.w_minus;
    } catch (const ConfigError&) {
        summary["wilcoxon_w"] = nullptr;
        summary["wilcoxon_p"] = nullptr;
    }
    write_json(out / "summary.json", summary);
}

namespace {

struct SweepRow {
    std::string axis;
    std::string value;
    std::string model;
    std::string subject_id;
    double accuracy = 0.0;
};

struct SweepJob {
    std::string axis;
    std::string value;
    std::function<std::vector<SweepRow>(const fs::path&)> run;
};

std::string sanitize(std::string s)
{
    for (auto& ch : s) {
        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '.' && ch != '-') {
            ch = '_';
        }
    }
    return s;
}

} // namespace

void cmd_sweep(const ExperimentConfig& cfg)
{
    const auto out = require_out(cfg);
    RunLog log(out / "run.log");
    const auto base = load_prepared(cfg.dataset, cfg.subjects, cfg.band, cfg.trim_s);
    const double rate = base.front().rate();
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    const std::vector<std::string> models =
        cfg.sweep.models.empty() ? std::vector<std::string>{model_type(cfg.model)} : cfg.sweep.models;

    std::vector<SweepJob> jobs;
    auto rows_from = [](const std::string& axis, const std::string& value, const std::string& model,
                        const AccuracyReport& rep) {
        std::vector<SweepRow> rows;
        for (const auto& [id, acc] : rep.subject_mean) {
            rows.push_back({axis, value, model, id, acc});
        }
        return rows;
    };
    auto train_job = [&, rows_from](const std::string& axis, const std::string& value, const ModelSpec& spec,
                                    const std::optional<std::string>& band) {
        build_model(spec, cfg.seed); // validated before any job runs
        check_channels(spec, base);
        const std::string mtype = model_type(spec);
        jobs.push_back({axis, value, [&, axis, value, spec, band, mtype, rows_from](const fs::path& dir) {
                            std::vector<Recording> filtered;
                            if (band) {
                                filtered = load_prepared(cfg.dataset, cfg.subjects, band, cfg.trim_s);
                            }
                            const auto& recs = band ? filtered : base;
                            const std::size_t window = std::visit([](const auto& s) { return s.window; }, spec);
                            const auto sets = make_window_sets(recs, window);
                            const auto res = train_into(dir, spec, sets, tc, cfg.seed);
                            return rows_from(axis, value, mtype, evaluate(res.model, sets.test));
                        }});
    };

    for (const double w : cfg.sweep.window_s) {
        for (const auto& m : models) {
            train_job("window_s", format_number(w), with_window(spec_of_type(cfg, m), seconds_to_samples(w, rate)),
                      cfg.band);
        }
    }
    for (const auto& [k, n] : cfg.sweep.kn) {
        DilatedModelSpec d = std::get<DilatedModelSpec>(spec_of_type(cfg, "dilated"));
        d.kernel = k;
        d.layers = n;
        train_job("kn", std::to_string(k) + "x" + std::to_string(n), d, cfg.band);
    }
    for (const auto& b : cfg.sweep.bands) {
        for (const auto& m : models) {
            train_job("band", b, spec_of_type(cfg, m), b);
        }
    }
    if (!cfg.sweep.subjects.empty()) {
        require(cfg.held_out, "held-out dataset");
        const auto pool_ids = subject_ids(base);
        for (const auto c : cfg.sweep.subjects) {
            if (c > pool_ids.size()) {
                throw ConfigError("sweep.subjects asks for " + std::to_string(c) + " subjects but the dataset has " +
                                  std::to_string(pool_ids.size()));
            }
        }
        const auto held = std::make_shared<std::vector<Recording>>(
            load_prepared(cfg.held_out, {}, cfg.band, cfg.trim_s));
        for (const auto c : cfg.sweep.subjects) {
            const ModelSpec spec = cfg.model;
            jobs.push_back({"subjects", std::to_string(c), [&, c, spec, held](const fs::path& dir) {
                                const std::size_t window = std::visit([](const auto& s) { return s.window; }, spec);
                                const auto order = seeded_permutation(pool_ids.size(), cfg.seed);
                                std::set<std::string> chosen;
                                for (std::size_t i = 0; i < c; ++i) {
                                    chosen.insert(pool_ids[order[i]]);
                                }
                                std::vector<Recording> recs;
                                for (const auto& r : base) {
                                    if (chosen.count(r.subject_id) != 0) {
                                        recs.push_back(r);
                                    }
                                }
                                const auto sets = make_window_sets(recs, window);
                                const auto res = train_into(dir, spec, sets, tc, cfg.seed);
                                const auto held_sets = make_window_sets(*held, window);
                                return rows_from("subjects", std::to_string(c), model_type(spec),
                                                 evaluate(res.model, held_sets.test));
                            }});
        }
    }
    if (!cfg.sweep.finetune_minutes.empty() || !cfg.sweep.finetune_groups.empty()) {
        require(cfg.finetune.pretrained, "pretrained checkpoint (finetune.pretrained)");
        const auto pre = std::make_shared<ModelState>(load_checkpoint(cfg.finetune.pretrained));
        check_channels(pre->spec, base);
        for (const double minutes : cfg.sweep.finetune_minutes) {
            const auto trainable = cfg.finetune.trainable;
            frozen_from_trainable(*pre, trainable);
            jobs.push_back({"finetune_minutes", format_number(minutes),
                            [&, minutes, trainable, pre](const fs::path& dir) {
                                std::vector<SweepRow> rows;
                                for (const auto& r : finetune_subjects(*pre, base, trainable, minutes, tc, dir)) {
                                    rows.push_back({"finetune_minutes", format_number(minutes), model_type(pre->spec),
                                                    r.subject_id, r.after});
                                }
                                return rows;
                            }});
        }
        for (const auto& groups : cfg.sweep.finetune_groups) {
            frozen_from_trainable(*pre, groups);
            const auto label = join(groups, "+");
            const auto minutes = cfg.finetune.minutes;
            jobs.push_back({"finetune_groups", label, [&, groups, label, minutes, pre](const fs::path& dir) {
                                std::vector<SweepRow> rows;
                                for (const auto& r : finetune_subjects(*pre, base, groups, minutes, tc, dir)) {
                                    rows.push_back(
                                        {"finetune_groups", label, model_type(pre->spec), r.subject_id, r.after});
                                }
                                return rows;
                            }});
        }
    }
    if (jobs.empty()) {
        throw ConfigError("sweep has no axis values (set sweep.window_s, bands, kn, subjects, finetune_minutes or "
                          "finetune_groups)");
    }
    write_json(out / "config.json", experiment_config_to_json(cfg));

    std::vector<std::vector<SweepRow>> results(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            const auto dir = out / "jobs" /
                             (std::to_string(i) + "_" + jobs[i].axis + "_" + sanitize(jobs[i].value));
            try {
                log.line("job " + std::to_string(i) + " " + jobs[i].axis + "=" + jobs[i].value + " start");
                results[i] = jobs[i].run(dir);
                log.line("job " + std::to_string(i) + " done");
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t workers = std::min(cfg.jobs, jobs.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) {
        pool.emplace_back(worker);
    }
    worker();
    for (auto& t : pool) {
        t.join();
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    CsvWriter w(out / "summary.csv", {"axis", "value", "model", "subject_id", "accuracy"});
    for (const auto& rows : results) {
        for (const auto& r : rows) {
            w.row({r.axis, r.value, r.model, r.subject_id, format_number(r.accuracy)});
        }
    }
    w.close();
}

void cmd_psychometric(const ExperimentConfig& cfg)
{
    require(cfg.checkpoint, "checkpoint");
    const auto out = require_out(cfg);
    const auto model = load_checkpoint(cfg.checkpoint);
    const auto recs = load_prepared(cfg.dataset, cfg.subjects, cfg.band, cfg.trim_s);
    check_channels(model.spec, recs);
    std::vector<std::string> warnings;
    const auto rows = evaluate_per_snr(model, recs, {}, &warnings);
    for (const auto& w : warnings) {
        std::cerr << "warning: " << w << '\n';
    }
    write_snr_csv(out / "snr_accuracy.csv", rows);
    write_fit_csv(out / "fits.csv", fit_subjects(rows));
}

void cmd_correlate(const ExperimentConfig& cfg)
{
    require(cfg.fits, "fit table");
    require(cfg.behavioral, "behavioral SRT table");
    const auto out = require_out(cfg);
    const auto fits = read_fit_csv(cfg.fits);
    const auto table = read_csv(cfg.behavioral);
    const auto cs = table.column("subject_id"), cv = table.column("srt_db");
    std::map<std::string, double> behavioral;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        try {
            behavioral[table.rows[i][cs]] = std::stod(table.rows[i][cv]);
        } catch (const std::exception&) {
            throw ConfigError(cfg.behavioral.string() + " row " + std::to_string(i + 1) + ": srt_db is not a number");
        }
    }
    const auto res = correlate_srt(fits, behavioral);
    CsvWriter w(out / "correlation.csv", {"n", "r", "p", "excluded"});
    w.row({std::to_string(res.n), format_number(res.r), format_number(res.p), join(res.excluded, ";")});
    w.close();
    CsvWriter pairs(out / "srt_pairs.csv", {"subject_id", "srt_behavioral_db", "srt_objective_db", "used"});
    for (const auto& f : fits) {
        const auto it = behavioral.find(f.subject_id);
        const auto srt = estimate_srt(f.fit);
        pairs.row({f.subject_id, it == behavioral.end() ? "" : format_number(it->second), format_number(f.fit.alpha),
                   srt && it != behavioral.end() ? "1" : "0"});
    }
    pairs.close();
}

// ---------------------------------------------------------------------------
// Plot data

std::vector<std::string> plotdata_tables()
{
    return {"paradigm",        "architecture",    "segment_length",          "frequency_band",
            "receptive_field", "held_out",        "learning_curve",          "finetune_learning_curve",
            "finetune_layers", "srt_scatter"};
}

namespace {

CsvTable sweep_rows(const json& src, const std::string& table, const std::string& axis)
{
    if (!src.is_string()) {
        throw ConfigError("plotdata." + table + " must be the path of a sweep summary.csv");
    }
    const fs::path p = src.get<std::string>();
    require(p, "sweep summary for plotdata." + table);
    auto t = read_csv(p);
    const auto ca = t.column("axis");
    std::vector<std::vector<std::string>> keep;
    for (auto& r : t.rows) {
        if (r[ca] == axis) {
            keep.push_back(std::move(r));
        }
    }
    t.rows = std::move(keep);
    if (t.rows.empty()) {
        throw ConfigError(p.string() + " has no rows for sweep axis " + axis + " (plotdata." + table + ")");
    }
    return t;
}

} // namespace

void cmd_plotdata(const ExperimentConfig& cfg)
{
    const auto out = require_out(cfg);
    if (cfg.plotdata.empty()) {
        throw ConfigError("plotdata needs a \"plotdata\" section naming the tables to emit");
    }
    const double rate = 64.0;
    for (const auto& [name, src] : cfg.plotdata.items()) {
        const fs::path path = out / (name + ".csv");
        if (name == "paradigm") {
            const std::size_t window = std::visit([](const auto& s) { return s.window; }, cfg.model);
            const auto shift = seconds_to_samples(1.0, rate);
            CsvWriter w(path, {"segment", "start_s", "end_s"});
            w.row({"eeg", "0", format_number(window / rate)});
            w.row({"matched_envelope", "0", format_number(window / rate)});
            w.row({"imposter_envelope", format_number(shift / rate), format_number((shift + window) / rate)});
            w.close();
        } else if (name == "architecture") {
            CsvWriter w(path, {"model", "layer", "in_channels", "out_channels", "kernel", "dilation", "output_length",
                               "parameters"});
            const auto dspec = std::get<DilatedModelSpec>(spec_of_type(cfg, "dilated"));
            const auto bspec = std::get<BaselineModelSpec>(spec_of_type(cfg, "baseline"));
            const auto dm = build_dilated(dspec, cfg.seed);
            const auto bm = build_baseline(bspec, cfg.seed);
            auto count = [](const ModelState& m, const std::string& prefix) {
                std::size_t n = 0;
                for (const auto& p : m.params) {
                    if (p.name.rfind(prefix, 0) == 0) {
                        n += p.values.size();
                    }
                }
                return std::to_string(n);
            };
            const auto bl = bspec.window - bspec.taps + 1;
            w.row({"baseline", "decoder", std::to_string(bspec.input_channels), "1", std::to_string(bspec.taps), "1",
                   std::to_string(bl), count(bm, "decoder.")});
            w.row({"baseline", "head", "2", "1", "1", "1", "1", count(bm, "head.")});
            w.row({"dilated", "spatial", std::to_string(dspec.input_channels), std::to_string(dspec.spatial_filters),
                   "1", "1", std::to_string(dspec.window), count(dm, "spatial.")});
            std::size_t len = dspec.window;
            const auto dil = dilation_schedule(dspec.kernel, dspec.layers);
            for (std::size_t l = 0; l < dspec.layers; ++l) {
                len -= dil[l] * (dspec.kernel - 1);
                const auto tag = std::to_string(l + 1);
                w.row({"dilated", "eeg_dilated." + tag,
                       std::to_string(l == 0 ? dspec.spatial_filters : dspec.dilated_filters),
                       std::to_string(dspec.dilated_filters), std::to_string(dspec.kernel), std::to_string(dil[l]),
                       std::to_string(len), count(dm, "eeg_dilated." + tag + ".")});
                w.row({"dilated", "env_dilated." + tag, std::to_string(l == 0 ? 1 : dspec.dilated_filters),
                       std::to_string(dspec.dilated_filters), std::to_string(dspec.kernel), std::to_string(dil[l]),
                       std::to_string(len), count(dm, "env_dilated." + tag + ".")});
            }
            w.row({"dilated", "head", std::to_string(dm.param("head.weight").values.size()), "1", "1", "1", "1",
                   count(dm, "head.")});
            w.close();
        } else if (name == "segment_length" || name == "frequency_band" || name == "learning_curve" ||
                   name == "finetune_learning_curve" || name == "finetune_layers") {
            static const std::map<std::string, std::pair<std::string, std::string>> axes = {
                {"segment_length", {"window_s", "window_s"}},
                {"frequency_band", {"band", "band"}},
                {"learning_curve", {"subjects", "training_subjects"}},
                {"finetune_learning_curve", {"finetune_minutes", "minutes_per_subject"}},
                {"finetune_layers", {"finetune_groups", "trainable_groups"}}};
            const auto& [axis, column] = axes.at(name);
            const auto t = sweep_rows(src, name, axis);
            const auto cv = t.column("value"), cm = t.column("model"), cs = t.column("subject_id"),
                       cacc = t.column("accuracy");
            CsvWriter w(path, {column, "model", "subject_id", "accuracy"});
            for (const auto& r : t.rows) {
                w.row({r[cv], r[cm], r[cs], r[cacc]});
            }
            w.close();
        } else if (name == "receptive_field") {
            const auto t = sweep_rows(src, name, "kn");
            const auto cv = t.column("value"), cm = t.column("model"), cs = t.column("subject_id"),
                       cacc = t.column("accuracy");
            CsvWriter w(path, {"kernel", "layers", "receptive_field_samples", "receptive_field_ms", "model",
                               "subject_id", "accuracy"});
            for (const auto& r : t.rows) {
                const auto x = r[cv].find('x');
                const auto k = std::stoul(r[cv].substr(0, x));
                const auto n = std::stoul(r[cv].substr(x + 1));
                const auto rf = receptive_field(k, n);
                w.row({std::to_string(k), std::to_string(n), std::to_string(rf), format_number(1000.0 * rf / rate),
                       r[cm], r[cs], r[cacc]});
            }
            w.close();
        } else if (name == "held_out") {
            if (!src.is_object()) {
                throw ConfigError("plotdata.held_out must map dataset labels to subjects.csv paths from eval");
            }
            CsvWriter w(path, {"dataset", "subject_id", "accuracy"});
            for (const auto& [label, p] : src.items()) {
                if (!p.is_string()) {
                    throw ConfigError("plotdata.held_out." + label + " must be a path");
                }
                require(p.get<std::string>(), "subject table for plotdata.held_out." + label);
                const auto t = read_csv(p.get<std::string>());
                const auto cs = t.column("subject_id"), ca = t.column("mean_accuracy");
                for (const auto& r : t.rows) {
                    w.row({label, r[cs], r[ca]});
                }
            }
            w.close();
        } else if (name == "srt_scatter") {
            if (!src.is_string()) {
                throw ConfigError("plotdata.srt_scatter must be the path of srt_pairs.csv from correlate");
            }
            require(src.get<std::string>(), "SRT pair table for plotdata.srt_scatter");
            const auto t = read_csv(src.get<std::string>());
            const auto cs = t.column("subject_id"), cb = t.column("srt_behavioral_db"),
                       co = t.column("srt_objective_db"), cu = t.column("used");
            CsvWriter w(path, {"subject_id", "srt_behavioral_db", "srt_objective_db"});
            for (const auto& r : t.rows) {
                if (r[cu] == "1") {
                    w.row({r[cs], r[cb], r[co]});
                }
            }
            w.close();
        }
    }
}

} // namespace eegmm
