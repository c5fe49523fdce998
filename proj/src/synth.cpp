#include "eegmm/synth.hpp"

#include "eegmm/csv.hpp"
#include "eegmm/signal.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace eegmm {

namespace {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Box-Muller keeps the stream identical across standard libraries
    double normal()
    {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::vector<double> normals(std::size_t n)
    {
        std::vector<double> v(n);
        for (auto& x : v) {
            x = normal();
        }
        return v;
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

std::uint64_t mix(std::uint64_t a, std::uint64_t b)
{
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double mean_of(std::span<const double> x)
{
    double s = 0.0;
    for (double v : x) {
        s += v;
    }
    return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

void standardize(std::vector<double>& x)
{
    const double m = mean_of(x);
    double ss = 0.0;
    for (auto& v : x) {
        v -= m;
        ss += v * v;
    }
    const double sd = std::sqrt(ss / static_cast<double>(x.size()));
    if (sd > 0.0) {
        for (auto& v : x) {
            v /= sd;
        }
    }
}

double norm_of(std::span<const double> x)
{
    double s = 0.0;
    for (double v : x) {
        s += v * v;
    }
    return std::sqrt(s);
}

// Sum of octave-spaced AR(1) processes: roughly 1/f from rate/(2*pi*2^(levels-1)) up to Nyquist.
std::vector<double> pink_noise(std::size_t n, Rng& rng)
{
    constexpr int levels = 7;
    std::vector<double> out(n, 0.0);
    for (int i = 0; i < levels; ++i) {
        const double a = std::exp(-1.0 / std::ldexp(1.0, i));
        const double b = std::sqrt(1.0 - a * a);
        double state = rng.normal();
        for (std::size_t t = 0; t < n; ++t) {
            state = a * state + b * rng.normal();
            out[t] += state;
        }
    }
    const double s = 1.0 / std::sqrt(static_cast<double>(levels));
    for (auto& v : out) {
        v *= s;
    }
    return out;
}

std::vector<double> zero_mean_unit(std::vector<double> v)
{
    const double m = mean_of(v);
    for (auto& x : v) {
        x -= m;
    }
    const double n = norm_of(v);
    for (auto& x : v) {
        x /= n;
    }
    return v;
}

std::vector<double> make_kernel(double rate, Rng& rng)
{
    const std::size_t taps = static_cast<std::size_t>(std::floor(0.5 * rate)) + 1;
    const double l1 = 0.100 + 0.012 * rng.normal();
    const double l2 = 0.200 + 0.018 * rng.normal();
    const double a1 = 1.0 * (1.0 + 0.15 * rng.normal());
    const double a2 = 0.7 * (1.0 + 0.15 * rng.normal());
    const double s1 = 0.030, s2 = 0.045;
    std::vector<double> k(taps);
    for (std::size_t j = 0; j < taps; ++j) {
        const double t = static_cast<double>(j) / rate;
        k[j] = a1 * std::exp(-0.5 * std::pow((t - l1) / s1, 2)) - a2 * std::exp(-0.5 * std::pow((t - l2) / s2, 2));
    }
    const double n = norm_of(k);
    for (auto& v : k) {
        v /= n;
    }
    return k;
}

std::string condition_label(std::optional<double> snr)
{
    return snr ? format_number(*snr) : std::string("none");
}

} // namespace

// ---------------------------------------------------------------------------
// Subject config

void SynthSubjectConfig::validate() const
{
    if (pattern.empty() || std::abs(norm_of(pattern) - 1.0) > 1e-9) {
        throw ConfigError("synth subject " + subject_id + ": spatial pattern must have unit norm");
    }
    if (!(norm_of(kernel) > 0.0)) {
        throw ConfigError("synth subject " + subject_id + ": response kernel has no energy");
    }
    if (!(noise_scale > 0.0)) {
        throw ConfigError("synth subject " + subject_id + ": noise_scale must be > 0");
    }
    if (!channel_scale.empty() && channel_scale.size() != pattern.size()) {
        throw ConfigError("synth subject " + subject_id + ": channel_scale length differs from pattern");
    }
    if (!(neural_gain >= 0.0)) {
        throw ConfigError("synth subject " + subject_id + ": neural_gain must be >= 0");
    }
}

double SynthSubjectConfig::response_db(std::optional<double> acoustic_snr_db) const
{
    if (!acoustic_snr_db) {
        return response_snr_db;
    }
    return snr_at_srt_db + slope * (*acoustic_snr_db - srt_db);
}

nlohmann::json subject_config_to_json(const SynthSubjectConfig& c)
{
    return {{"subject_id", c.subject_id},
            {"seed", c.seed},
            {"pattern", c.pattern},
            {"kernel", c.kernel},
            {"latency_jitter_ms", c.latency_jitter_ms},
            {"nonlinear", c.nonlinear},
            {"neural_gain", c.neural_gain},
            {"noise_scale", c.noise_scale},
            {"channel_scale", c.channel_scale},
            {"response_snr_db", c.response_snr_db},
            {"srt_db", c.srt_db},
            {"snr_at_srt_db", c.snr_at_srt_db},
            {"slope", c.slope},
            {"conditions", c.conditions}};
}

SynthSubjectConfig subject_config_from_json(const nlohmann::json& j)
{
    SynthSubjectConfig c;
    c.subject_id = j.at("subject_id").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.pattern = j.at("pattern").get<std::vector<double>>();
    c.kernel = j.at("kernel").get<std::vector<double>>();
    c.latency_jitter_ms = j.value("latency_jitter_ms", c.latency_jitter_ms);
    c.nonlinear = j.value("nonlinear", c.nonlinear);
    c.neural_gain = j.value("neural_gain", c.neural_gain);
    c.noise_scale = j.value("noise_scale", c.noise_scale);
    c.channel_scale = j.value("channel_scale", c.channel_scale);
    c.response_snr_db = j.value("response_snr_db", c.response_snr_db);
    c.srt_db = j.value("srt_db", c.srt_db);
    c.snr_at_srt_db = j.value("snr_at_srt_db", c.snr_at_srt_db);
    c.slope = j.value("slope", c.slope);
    c.conditions = j.value("conditions", c.conditions);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Signals

MultichannelSeries generate_envelope(double duration_s, std::uint64_t seed, double rate, double log_std)
{
    if (!(duration_s > 0.0) || !(rate > 0.0) || !(log_std > 0.0)) {
        throw ConfigError("generate_envelope: duration, rate and log_std must be > 0");
    }
    const auto n = static_cast<std::size_t>(std::llround(duration_s * rate));
    if (n == 0) {
        throw ConfigError("generate_envelope: duration shorter than one sample");
    }
    Rng rng(mix(seed, 0xe11e));
    const auto syllabic = design_bandpass({2.0, 8.0, "syllabic"}, rate);
    const auto broad = design_bandpass({0.5, std::min(16.0, 0.3 * rate), "broad"}, rate);
    auto g1 = sosfiltfilt(syllabic.sections, rng.normals(n));
    auto g2 = sosfiltfilt(broad.sections, rng.normals(n));
    standardize(g1);
    standardize(g2);
    std::vector<double> g(n);
    for (std::size_t t = 0; t < n; ++t) {
        g[t] = g1[t] + 0.4 * g2[t];
    }
    standardize(g);
    MultichannelSeries env(1, n, rate);
    auto out = env.channel(0);
    for (std::size_t t = 0; t < n; ++t) {
        out[t] = std::exp(log_std * g[t]);
    }
    return env;
}

SynthComponents generate_components(const MultichannelSeries& envelope, const SynthSubjectConfig& cfg,
                                    std::optional<double> acoustic_snr_db, std::uint64_t recording_seed)
{
    cfg.validate();
    if (envelope.channels() != 1) {
        throw ConfigError("synthetic envelope must have one channel");
    }
    const std::size_t n = envelope.length();
    const std::size_t channels = cfg.pattern.size();
    const double rate = envelope.rate();
    Rng rng(mix(cfg.seed, recording_seed));

    // stimulus drive
    std::vector<double> drive(envelope.channel(0).begin(), envelope.channel(0).end());
    if (cfg.nonlinear) {
        for (auto& v : drive) {
            v = std::log(std::max(v, 1e-12));
        }
    }
    standardize(drive);
    const auto shift = static_cast<std::ptrdiff_t>(std::llround(rng.normal() * cfg.latency_jitter_ms * 1e-3 * rate));
    std::vector<double> r(n, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < cfg.kernel.size(); ++j) {
            const auto src = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(j) - shift;
            if (src >= 0 && src < static_cast<std::ptrdiff_t>(n)) {
                acc += cfg.kernel[j] * drive[static_cast<std::size_t>(src)];
            }
        }
        r[t] = acc;
    }

    // noise: independent pink per channel plus pink latent sources with random topographies
    constexpr std::size_t latent = 8;
    SynthComponents out{MultichannelSeries(channels, n, rate), MultichannelSeries(channels, n, rate), 0.0};
    for (std::size_t c = 0; c < channels; ++c) {
        const auto p = pink_noise(n, rng);
        auto dst = out.noise.channel(c);
        for (std::size_t t = 0; t < n; ++t) {
            dst[t] = std::sqrt(0.5) * p[t];
        }
    }
    for (std::size_t l = 0; l < latent; ++l) {
        auto topo = rng.normals(channels);
        const double tn = norm_of(topo);
        const auto src = pink_noise(n, rng);
        const double w = std::sqrt(0.5 * static_cast<double>(channels) / latent) / tn;
        for (std::size_t c = 0; c < channels; ++c) {
            auto dst = out.noise.channel(c);
            const double a = w * topo[c];
            for (std::size_t t = 0; t < n; ++t) {
                dst[t] += a * src[t];
            }
        }
    }
    double noise_power = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
        const double s = cfg.noise_scale * (cfg.channel_scale.empty() ? 1.0 : cfg.channel_scale[c]);
        for (auto& v : out.noise.channel(c)) {
            v *= s;
            noise_power += v * v;
        }
    }
    noise_power /= static_cast<double>(channels * n);

    double unit_power = 0.0;
    for (double v : r) {
        unit_power += v * v;
    }
    unit_power /= static_cast<double>(channels * n); // pattern has unit norm
    const double ratio = std::pow(10.0, cfg.response_db(acoustic_snr_db) / 10.0);
    out.gain = unit_power > 0.0 ? cfg.neural_gain * std::sqrt(ratio * noise_power / unit_power) : 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
        const double a = out.gain * cfg.pattern[c];
        auto dst = out.response.channel(c);
        for (std::size_t t = 0; t < n; ++t) {
            dst[t] = a * r[t];
        }
    }
    return out;
}

Recording generate_recording(const MultichannelSeries& envelope, const SynthSubjectConfig& cfg,
                             std::optional<double> acoustic_snr_db, std::uint64_t recording_seed,
                             const std::string& stimulus_id)
{
    auto comp = generate_components(envelope, cfg, acoustic_snr_db, recording_seed);
    Recording rec;
    rec.subject_id = cfg.subject_id;
    rec.stimulus_id = stimulus_id;
    auto& eeg = comp.response.data();
    const auto& noise = comp.noise.data();
    for (std::size_t i = 0; i < eeg.size(); ++i) {
        eeg[i] += noise[i];
    }
    rec.eeg = std::move(comp.response);
    rec.envelope = envelope;
    rec.metadata["snr_db"] = condition_label(acoustic_snr_db);
    rec.metadata["source"] = "synthetic";
    return rec;
}

// ---------------------------------------------------------------------------
// Suites

void SynthManifest::validate() const
{
    if (subjects + held_out_subjects < 1) {
        throw ConfigError("synth.subjects must be >= 1");
    }
    if (!snr_conditions && recordings_per_subject < 1) {
        throw ConfigError("synth.recordings_per_subject must be >= 1");
    }
    const double dur = snr_conditions ? condition_duration_s : duration_s;
    if (!(dur >= 60.0)) {
        throw ConfigError(std::string("synth.") + (snr_conditions ? "condition_duration_s" : "duration_s") +
                          " must be >= 60");
    }
    if (!(rate > 0.0)) {
        throw ConfigError("synth.rate must be > 0");
    }
    if (!(envelope_log_std > 0.0)) {
        throw ConfigError("synth.envelope_log_std must be > 0");
    }
    if (channels < 1 || channels > 64) {
        throw ConfigError("synth.channels must lie in 1..64");
    }
    if (subjects > 99 || held_out_subjects > 99) {
        throw ConfigError("synth supports at most 99 subjects per group");
    }
}

nlohmann::json synth_manifest_to_json(const SynthManifest& m)
{
    return {{"subjects", m.subjects},
            {"recordings_per_subject", m.recordings_per_subject},
            {"duration_s", m.duration_s},
            {"rate", m.rate},
            {"channels", m.channels},
            {"seed", m.seed},
            {"nonlinear", m.nonlinear},
            {"response_snr_db", m.response_snr_db},
            {"response_snr_spread_db", m.response_snr_spread_db},
            {"rotation_deg", m.rotation_deg},
            {"held_out_subjects", m.held_out_subjects},
            {"held_out_rotation_deg", m.held_out_rotation_deg},
            {"snr_conditions", m.snr_conditions},
            {"condition_duration_s", m.condition_duration_s},
            {"envelope_log_std", m.envelope_log_std},
            {"prefix", m.prefix}};
}

SynthManifest synth_manifest_from_json(const nlohmann::json& j)
{
    if (!j.is_object()) {
        throw ConfigError("synth must be an object");
    }
    SynthManifest m;
    const auto defaults = synth_manifest_to_json(m);
    for (const auto& [key, value] : j.items()) {
        if (!defaults.contains(key)) {
            throw ConfigError("synth." + key + " is not a known field");
        }
        const auto& d = defaults.at(key);
        const bool ok = (d.is_boolean() && value.is_boolean()) || (d.is_string() && value.is_string()) ||
                        (d.is_number_unsigned() && (value.is_number_unsigned() ||
                                                    (value.is_number_integer() && value.get<long long>() >= 0))) ||
                        (d.is_number_float() && value.is_number());
        if (!ok) {
            throw ConfigError("synth." + key + " has the wrong type (expected " + std::string(d.type_name()) + ")");
        }
    }
    m.subjects = j.value("subjects", m.subjects);
    m.recordings_per_subject = j.value("recordings_per_subject", m.recordings_per_subject);
    m.duration_s = j.value("duration_s", m.duration_s);
    m.rate = j.value("rate", m.rate);
    m.channels = j.value("channels", m.channels);
    m.seed = j.value("seed", m.seed);
    m.nonlinear = j.value("nonlinear", m.nonlinear);
    m.response_snr_db = j.value("response_snr_db", m.response_snr_db);
    m.response_snr_spread_db = j.value("response_snr_spread_db", m.response_snr_spread_db);
    m.rotation_deg = j.value("rotation_deg", m.rotation_deg);
    m.held_out_subjects = j.value("held_out_subjects", m.held_out_subjects);
    m.held_out_rotation_deg = j.value("held_out_rotation_deg", m.held_out_rotation_deg);
    m.snr_conditions = j.value("snr_conditions", m.snr_conditions);
    m.condition_duration_s = j.value("condition_duration_s", m.condition_duration_s);
    m.envelope_log_std = j.value("envelope_log_std", m.envelope_log_std);
    m.prefix = j.value("prefix", m.prefix);
    m.validate();
    return m;
}

std::vector<SynthSubjectConfig> make_subject_configs(const SynthManifest& m)
{
    m.validate();
    Rng rng(mix(m.seed, 0x5eed));
    const auto population = zero_mean_unit(rng.normals(m.channels));

    std::vector<std::string> conditions;
    if (m.snr_conditions) {
        for (const double s : {-12.5, -9.5, -6.5, -3.5, -0.5, 2.5}) {
            conditions.push_back(format_number(s));
        }
        conditions.emplace_back("none");
    }

    std::vector<SynthSubjectConfig> out;
    const std::size_t total = m.subjects + m.held_out_subjects;
    for (std::size_t s = 0; s < total; ++s) {
        const bool held = s >= m.subjects;
        const std::size_t idx = held ? s - m.subjects + 1 : s + 1;
        Rng srng(mix(m.seed, 1000 + s));
        SynthSubjectConfig c;
        char id[16];
        std::snprintf(id, sizeof(id), "%02zu", idx);
        c.subject_id = m.prefix + (held ? "H" : "") + id;
        c.seed = mix(m.seed, 2000 + s);

        // rotate the population pattern toward a random orthogonal direction
        auto u = srng.normals(m.channels);
        const double um = mean_of(u);
        for (auto& v : u) {
            v -= um;
        }
        double proj = 0.0;
        for (std::size_t i = 0; i < m.channels; ++i) {
            proj += u[i] * population[i];
        }
        for (std::size_t i = 0; i < m.channels; ++i) {
            u[i] -= proj * population[i];
        }
        const double un = norm_of(u);
        const double deg = held ? m.held_out_rotation_deg : m.rotation_deg * (0.5 + srng.uniform());
        const double th = deg * std::numbers::pi / 180.0;
        c.pattern.resize(m.channels);
        for (std::size_t i = 0; i < m.channels; ++i) {
            c.pattern[i] = std::cos(th) * population[i] + (un > 0.0 ? std::sin(th) * u[i] / un : 0.0);
        }
        const double pn = norm_of(c.pattern);
        for (auto& v : c.pattern) {
            v /= pn;
        }

        c.kernel = make_kernel(m.rate, srng);
        c.nonlinear = m.nonlinear;
        c.channel_scale.resize(m.channels);
        for (auto& v : c.channel_scale) {
            v = std::exp(0.2 * srng.normal());
        }
        c.response_snr_db = m.response_snr_db + m.response_snr_spread_db * srng.normal();
        c.srt_db = -7.0 + 1.5 * srng.normal();
        c.snr_at_srt_db = c.response_snr_db - 10.0;
        c.slope = 1.0;
        c.conditions = conditions;
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<Recording> generate_recordings(const SynthManifest& m)
{
    const auto configs = make_subject_configs(m);
    std::vector<Recording> recs;
    for (const auto& c : configs) {
        if (m.snr_conditions) {
            for (std::size_t k = 0; k < c.conditions.size(); ++k) {
                const auto env = generate_envelope(m.condition_duration_s, mix(m.seed, 500 + k), m.rate, m.envelope_log_std);
                const std::optional<double> snr =
                    c.conditions[k] == "none" ? std::nullopt : std::optional<double>(std::stod(c.conditions[k]));
                recs.push_back(generate_recording(env, c, snr, k, "snr_" + c.conditions[k]));
            }
        } else {
            for (std::size_t r = 0; r < m.recordings_per_subject; ++r) {
                const auto env = generate_envelope(m.duration_s, mix(m.seed, r), m.rate, m.envelope_log_std);
                char id[16];
                std::snprintf(id, sizeof(id), "story%02zu", r + 1);
                recs.push_back(generate_recording(env, c, std::nullopt, r, id));
            }
        }
    }
    return recs;
}

DatasetManifest generate_suite(const SynthManifest& m, const std::filesystem::path& dir)
{
    const auto configs = make_subject_configs(m);
    const auto recs = generate_recordings(m);
    std::filesystem::create_directories(dir / "subjects");
    auto manifest = save_dataset(dir, recs);
    for (const auto& c : configs) {
        std::ofstream f(dir / "subjects" / (c.subject_id + ".json"), std::ios::binary | std::ios::trunc);
        f << subject_config_to_json(c).dump(2) << '\n';
        if (!f) {
            throw ConfigError("cannot write subject config for " + c.subject_id);
        }
    }
    {
        std::ofstream f(dir / "synth.json", std::ios::binary | std::ios::trunc);
        f << synth_manifest_to_json(m).dump(2) << '\n';
    }
    CsvWriter w(dir / "behavioral_srt.csv", {"subject_id", "srt_db"});
    for (const auto& c : configs) {
        w.row({c.subject_id, format_number(c.srt_db)});
    }
    w.close();
    return manifest;
}

} // namespace eegmm
