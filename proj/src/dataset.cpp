#include "eegmm/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace eegmm {

Part parse_part(const std::string& s)
{
    if (s == "train") {
        return Part::train;
    }
    if (s == "val") {
        return Part::val;
    }
    if (s == "test") {
        return Part::test;
    }
    if (s == "whole") {
        return Part::whole;
    }
    throw ConfigError("unknown part '" + s + "' (expected train, val, test or whole)");
}

const char* part_name(Part p)
{
    switch (p) {
    case Part::train:
        return "train";
    case Part::val:
        return "val";
    case Part::test:
        return "test";
    case Part::whole:
        return "whole";
    }
    return "?";
}

SplitRecording split_recording(std::size_t length, std::size_t min_window)
{
    if (length < 10 || length < 10 * min_window) {
        throw ConfigError("recording of " + std::to_string(length) + " samples is too short to split (need >= " +
                          std::to_string(std::max<std::size_t>(10, 10 * min_window)) + ")");
    }
    // round-half-up of 10% and 40%
    const std::size_t tenth = (length + 5) / 10;
    const std::size_t val_begin = (4 * length + 5) / 10;
    SplitRecording s;
    s.length = length;
    s.val = {val_begin, val_begin + tenth};
    s.test = {val_begin + tenth, val_begin + 2 * tenth};
    s.train = {{0, val_begin}, {s.test.end, length}};
    return s;
}

SplitRecording split_recording(const Recording& rec, std::size_t min_window)
{
    return split_recording(rec.length(), min_window);
}

std::vector<Interval> part_intervals(const SplitRecording& s, Part part)
{
    switch (part) {
    case Part::train:
        return s.train;
    case Part::val:
        return {s.val};
    case Part::test:
        return {s.test};
    case Part::whole:
        return {{0, s.length}};
    }
    return {};
}

std::size_t window_hop(std::size_t window, double overlap)
{
    if (!(overlap >= 0.0 && overlap < 1.0)) {
        throw ConfigError("window overlap must lie in [0, 1)");
    }
    const auto hop = static_cast<std::size_t>(std::llround(static_cast<double>(window) * (1.0 - overlap)));
    if (hop < 1) {
        throw ConfigError("window hop rounds to zero for window " + std::to_string(window));
    }
    return hop;
}

std::vector<std::size_t> make_windows(std::span<const Interval> intervals, std::size_t window,
                                      std::size_t imposter_offset, double overlap)
{
    const std::size_t hop = window_hop(window, overlap);
    std::vector<std::size_t> starts;
    for (const auto& iv : intervals) {
        const std::size_t t = iv.size();
        if (t < imposter_offset || t - imposter_offset < window) {
            continue;
        }
        const std::size_t count = (t - imposter_offset - window) / hop + 1;
        for (std::size_t k = 0; k < count; ++k) {
            starts.push_back(iv.begin + k * hop);
        }
    }
    return starts;
}

std::vector<MatchMismatchExample> build_examples(const Recording& rec, const SplitRecording& split, Part part,
                                                 std::size_t window, const ExampleOptions& opts,
                                                 std::size_t recording_index)
{
    const auto offset = static_cast<std::size_t>(std::llround(opts.imposter_seconds * rec.rate()));
    const auto intervals = part_intervals(split, part);
    std::vector<MatchMismatchExample> out;
    for (std::size_t s : make_windows(intervals, window, offset, opts.overlap)) {
        MatchMismatchExample ex;
        ex.source = &rec;
        ex.recording_index = recording_index;
        ex.start = s;
        ex.window = window;
        ex.imposter_start = s + offset;
        out.push_back(ex);
    }
    return out;
}

std::vector<Trial> expand_orderings(std::size_t example_count)
{
    std::vector<Trial> out;
    out.reserve(2 * example_count);
    for (std::size_t i = 0; i < example_count; ++i) {
        out.push_back({i, Target::first_is_match});
        out.push_back({i, Target::second_is_match});
    }
    return out;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed)
{
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) {
        idx[i] = i;
    }
    std::mt19937_64 rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

std::vector<std::vector<std::size_t>> batch_iterator(std::size_t item_count, std::size_t batch_size,
                                                     std::optional<std::uint64_t> shuffle_seed)
{
    if (batch_size < 1) {
        throw ConfigError("batch size must be at least 1");
    }
    std::vector<std::size_t> order;
    if (shuffle_seed) {
        order = seeded_permutation(item_count, *shuffle_seed);
    } else {
        order.resize(item_count);
        for (std::size_t i = 0; i < item_count; ++i) {
            order[i] = i;
        }
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < item_count; i += batch_size) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(item_count, i + batch_size)));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// Files

namespace {

std::uint32_t to_le(std::uint32_t v)
{
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
}

} // namespace

void write_series(const std::filesystem::path& path, const MultichannelSeries& s)
{
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw ConfigError("cannot open " + path.string() + " for writing");
    }
    std::vector<std::uint32_t> buf(s.data().size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const auto v = static_cast<float>(s.data()[i]);
        buf[i] = to_le(std::bit_cast<std::uint32_t>(v));
    }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!f) {
        throw ConfigError("write failed for " + path.string());
    }
}

MultichannelSeries read_series(const std::filesystem::path& path, std::size_t channels, std::size_t length,
                               double rate)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw ConfigError("missing series file " + path.string());
    }
    const std::size_t n = channels * length;
    std::vector<std::uint32_t> buf(n);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
    if (static_cast<std::size_t>(f.gcount()) != n * 4 || f.peek() != std::char_traits<char>::eof()) {
        throw ConfigError("series file " + path.string() + " does not hold " + std::to_string(channels) + " x " +
                          std::to_string(length) + " float32 samples");
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        data[i] = static_cast<double>(std::bit_cast<float>(to_le(buf[i])));
    }
    return {channels, length, rate, std::move(data)};
}

DatasetManifest read_manifest(const std::filesystem::path& manifest_path)
{
    std::ifstream f(manifest_path);
    if (!f) {
        throw ConfigError("missing manifest " + manifest_path.string());
    }
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
    }
    DatasetManifest m;
    m.directory = manifest_path.parent_path();
    try {
        m.version = j.at("version").get<int>();
        std::size_t i = 0;
        for (const auto& r : j.at("recordings")) {
            ManifestEntry e;
            const std::string where = "recordings[" + std::to_string(i++) + "].";
            auto need = [&](const char* key) -> const nlohmann::json& {
                if (!r.contains(key)) {
                    throw ConfigError("manifest field " + where + key + " is missing");
                }
                return r.at(key);
            };
            e.subject_id = need("subject_id").get<std::string>();
            e.stimulus_id = need("stimulus_id").get<std::string>();
            e.eeg_path = need("eeg_path").get<std::string>();
            e.env_path = need("env_path").get<std::string>();
            e.rate = need("rate").get<double>();
            e.channels = need("channels").get<std::size_t>();
            e.length = need("length").get<std::size_t>();
            if (r.contains("metadata")) {
                for (const auto& [k, v] : r.at("metadata").items()) {
                    e.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
                }
            }
            m.recordings.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("manifest " + manifest_path.string() + ": " + e.what());
    }
    if (m.version != 1) {
        throw ConfigError("unsupported manifest version " + std::to_string(m.version));
    }
    return m;
}

void write_manifest(const std::filesystem::path& manifest_path, const DatasetManifest& m)
{
    nlohmann::json j;
    j["version"] = m.version;
    j["recordings"] = nlohmann::json::array();
    for (const auto& e : m.recordings) {
        nlohmann::json r;
        r["subject_id"] = e.subject_id;
        r["stimulus_id"] = e.stimulus_id;
        r["eeg_path"] = e.eeg_path;
        r["env_path"] = e.env_path;
        r["rate"] = e.rate;
        r["channels"] = e.channels;
        r["length"] = e.length;
        r["metadata"] = e.metadata;
        j["recordings"].push_back(r);
    }
    std::ofstream f(manifest_path, std::ios::trunc);
    if (!f) {
        throw ConfigError("cannot open " + manifest_path.string() + " for writing");
    }
    f << j.dump(2) << '\n';
}

void verify_manifest(const DatasetManifest& m)
{
    for (const auto& e : m.recordings) {
        for (const auto& [rel, ch] : {std::pair{e.eeg_path, e.channels}, std::pair{e.env_path, std::size_t{1}}}) {
            const auto p = m.directory / rel;
            if (!std::filesystem::exists(p)) {
                throw ConfigError("missing series file " + p.string());
            }
            const auto want = ch * e.length * 4;
            if (std::filesystem::file_size(p) != want) {
                throw ConfigError("series file " + p.string() + " has " +
                                  std::to_string(std::filesystem::file_size(p)) + " bytes, manifest declares " +
                                  std::to_string(want));
            }
        }
    }
}

std::vector<Recording> load_recordings(const DatasetManifest& m)
{
    verify_manifest(m);
    std::vector<Recording> out;
    for (const auto& e : m.recordings) {
        Recording r;
        r.subject_id = e.subject_id;
        r.stimulus_id = e.stimulus_id;
        r.metadata = e.metadata;
        r.eeg = read_series(m.directory / e.eeg_path, e.channels, e.length, e.rate);
        r.envelope = read_series(m.directory / e.env_path, 1, e.length, e.rate);
        r.validate();
        out.push_back(std::move(r));
    }
    return out;
}

DatasetManifest save_dataset(const std::filesystem::path& dir, std::span<const Recording> recordings)
{
    std::filesystem::create_directories(dir);
    DatasetManifest m;
    m.directory = dir;
    for (const auto& r : recordings) {
        r.validate();
        ManifestEntry e;
        e.subject_id = r.subject_id;
        e.stimulus_id = r.stimulus_id;
        const std::string stem = r.subject_id + "_" + r.stimulus_id;
        e.eeg_path = stem + "_eeg.f32";
        e.env_path = stem + "_env.f32";
        e.rate = r.rate();
        e.channels = r.eeg.channels();
        e.length = r.length();
        e.metadata = r.metadata;
        write_series(dir / e.eeg_path, r.eeg);
        write_series(dir / e.env_path, r.envelope);
        m.recordings.push_back(std::move(e));
    }
    write_manifest(dir / "manifest.json", m);
    return m;
}

} // namespace eegmm
