#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "eegmm/csv.hpp"
#include "eegmm/evaluation.hpp"
#include "eegmm/synth.hpp"
#include "test_util.hpp"

#include <cmath>
#include <complex>
#include <fstream>
#include <set>

using namespace eegmm;

namespace {

SynthSubjectConfig one_subject(std::size_t channels = 8)
{
    SynthManifest m;
    m.channels = channels;
    m.subjects = 1;
    return make_subject_configs(m).at(0);
}

double power(std::span<const double> x)
{
    double s = 0.0;
    for (const double v : x) {
        s += v * v;
    }
    return s / static_cast<double>(x.size());
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

} // namespace

TEST_CASE("envelope spectrum peaks in the syllabic band")
{
    const auto env = generate_envelope(240.0, 3);
    const auto x = env.channel(0);
    CHECK(env.rate() == 64.0);
    CHECK(env.length() == 240 * 64);
    const double mu = testutil::mean(x);
    // Welch average over 4 s segments
    const std::size_t seg = 256;
    std::vector<double> psd(seg / 2 + 1, 0.0);
    for (std::size_t s = 0; s + seg <= x.size(); s += seg / 2) {
        for (std::size_t k = 1; k <= seg / 2; ++k) {
            std::complex<double> acc = 0.0;
            for (std::size_t t = 0; t < seg; ++t) {
                const double hann = 0.5 - 0.5 * std::cos(2.0 * testutil::kPi * t / seg);
                acc += hann * (x[s + t] - mu) * std::polar(1.0, -2.0 * testutil::kPi * k * t / seg);
            }
            psd[k] += std::norm(acc);
        }
    }
    std::size_t peak = 1;
    for (std::size_t k = 1; k < psd.size(); ++k) {
        if (psd[k] > psd[peak]) {
            peak = k;
        }
    }
    const double hz = peak * 64.0 / seg;
    CHECK(hz >= 2.0);
    CHECK(hz <= 8.0);
}

TEST_CASE("envelopes are nonnegative and seeded")
{
    const auto a = generate_envelope(60.0, 9);
    const auto b = generate_envelope(60.0, 9);
    const auto c = generate_envelope(60.0, 10);
    CHECK(a.data() == b.data());
    CHECK(a.data() != c.data());
    for (const double v : a.channel(0)) {
        CHECK(v >= 0.0);
    }
    CHECK_THROWS_AS(generate_envelope(0.0, 1), ConfigError);
    CHECK_THROWS_AS(generate_envelope(10.0, 1, 64.0, 0.0), ConfigError);
}

TEST_CASE("noiseless limit reproduces the filtered envelope")
{
    auto cfg = one_subject();
    cfg.latency_jitter_ms = 0.0;
    const auto env = generate_envelope(60.0, 4);
    const auto comp = generate_components(env, cfg, std::nullopt, 0);
    std::vector<double> drive(env.channel(0).begin(), env.channel(0).end());
    const double mu = testutil::mean(drive), sd = testutil::stddev(drive);
    for (auto& v : drive) {
        v = (v - mu) / sd;
    }
    std::vector<double> filtered(drive.size(), 0.0);
    for (std::size_t t = 0; t < drive.size(); ++t) {
        for (std::size_t j = 0; j < cfg.kernel.size() && j <= t; ++j) {
            filtered[t] += cfg.kernel[j] * drive[t - j];
        }
    }
    for (std::size_t c = 0; c < cfg.pattern.size(); ++c) {
        const auto ch = comp.response.channel(c);
        const double r = testutil::correlation(ch, filtered);
        CHECK(std::abs(std::abs(r) - 1.0) <= 1e-12);
        CHECK(ch[100] == doctest::Approx(comp.gain * cfg.pattern[c] * filtered[100]).epsilon(1e-12));
    }

    // a response far above the noise floor makes the recorded EEG the same signal
    cfg.response_snr_db = 200.0;
    const auto rec = generate_recording(env, cfg, std::nullopt, 0, "story01");
    CHECK(std::abs(std::abs(testutil::correlation(rec.eeg.channel(0), filtered)) - 1.0) <= 1e-12);
}

TEST_CASE("response to noise power ratio follows the requested dB")
{
    auto cfg = one_subject(16);
    const auto env = generate_envelope(120.0, 5);
    for (const double db : {-20.0, -6.0, 0.0, 10.0}) {
        cfg.response_snr_db = db;
        const auto comp = generate_components(env, cfg, std::nullopt, 1);
        const double ratio = power(comp.response.data()) / power(comp.noise.data());
        CHECK(ratio == doctest::Approx(std::pow(10.0, db / 10.0)).epsilon(0.05));
    }
    cfg.snr_at_srt_db = -14.0;
    cfg.srt_db = -7.0;
    cfg.slope = 1.0;
    CHECK(cfg.response_db(-7.0) == -14.0);
    CHECK(cfg.response_db(-4.0) == -11.0);
    CHECK(cfg.response_db(std::nullopt) == 10.0);
    const auto lo = generate_components(env, cfg, -12.5, 1);
    const auto hi = generate_components(env, cfg, 2.5, 1);
    CHECK(power(hi.response.data()) / power(lo.response.data()) == doctest::Approx(std::pow(10.0, 1.5)).epsilon(1e-9));
}

TEST_CASE("a zero-gain subject records pure noise")
{
    auto cfg = one_subject();
    cfg.neural_gain = 0.0;
    const auto env = generate_envelope(60.0, 6);
    const auto comp = generate_components(env, cfg, std::nullopt, 2);
    for (const double v : comp.response.data()) {
        CHECK(v == 0.0);
    }
    const auto rec = generate_recording(env, cfg, std::nullopt, 2, "x");
    CHECK(rec.eeg.data() == comp.noise.data());
}

TEST_CASE("the nonlinear flag changes the drive but not the power law")
{
    auto cfg = one_subject();
    cfg.latency_jitter_ms = 0.0;
    const auto env = generate_envelope(60.0, 7);
    const auto lin = generate_components(env, cfg, std::nullopt, 3);
    cfg.nonlinear = true;
    const auto nl = generate_components(env, cfg, std::nullopt, 3);
    CHECK(nl.noise.data() == lin.noise.data());
    const double r = std::abs(testutil::correlation(nl.response.channel(0), lin.response.channel(0)));
    CHECK(r < 0.99);
    CHECK(r > 0.3);
    CHECK(power(nl.response.data()) == doctest::Approx(power(lin.response.data())).epsilon(0.01));
}

TEST_CASE("subject configs validate and round-trip")
{
    const auto cfg = one_subject();
    CHECK(testutil::rms(cfg.pattern) * std::sqrt(static_cast<double>(cfg.pattern.size())) == doctest::Approx(1.0));
    CHECK(cfg.kernel.size() == 33); // 0..500 ms at 64 Hz
    const auto back = subject_config_from_json(subject_config_to_json(cfg));
    CHECK(back.pattern == cfg.pattern);
    CHECK(back.kernel == cfg.kernel);
    CHECK(back.seed == cfg.seed);
    CHECK(back.response_snr_db == cfg.response_snr_db);

    auto bad = cfg;
    bad.pattern[0] += 0.1;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("unit norm"), ConfigError);
    bad = cfg;
    std::fill(bad.kernel.begin(), bad.kernel.end(), 0.0);
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("energy"), ConfigError);
    bad = cfg;
    bad.noise_scale = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("subjects differ but share a population pattern")
{
    SynthManifest m;
    m.subjects = 4;
    m.held_out_subjects = 1;
    const auto cfgs = make_subject_configs(m);
    REQUIRE(cfgs.size() == 5);
    CHECK(cfgs[0].subject_id == "S01");
    CHECK(cfgs[3].subject_id == "S04");
    CHECK(cfgs[4].subject_id == "SH01");
    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            s += a[i] * b[i];
        }
        return s;
    };
    CHECK(dot(cfgs[0].pattern, cfgs[1].pattern) > 0.7);
    CHECK(std::abs(dot(cfgs[0].pattern, cfgs[4].pattern)) < 0.6);
    CHECK(cfgs[0].seed != cfgs[1].seed);
}

TEST_CASE("manifest validation and JSON")
{
    SynthManifest m;
    m.duration_s = 30.0;
    CHECK_THROWS_WITH_AS(m.validate(), doctest::Contains("duration_s"), ConfigError);
    m = {};
    m.channels = 65;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m = {};
    m.subjects = 3;
    m.nonlinear = true;
    m.envelope_log_std = 1.5;
    const auto back = synth_manifest_from_json(synth_manifest_to_json(m));
    CHECK(back.subjects == 3);
    CHECK(back.nonlinear);
    CHECK(back.envelope_log_std == 1.5);
    CHECK_THROWS_AS(synth_manifest_from_json({{"subject", 3}}), ConfigError);
}

TEST_CASE("suites on disk")
{
    SynthManifest m;
    m.subjects = 5;
    m.recordings_per_subject = 2;
    m.duration_s = 60.0;
    m.channels = 4;
    const auto a = testutil::temp_dir("suite_a");
    const auto b = testutil::temp_dir("suite_b");
    const auto manifest = generate_suite(m, a);
    generate_suite(m, b);
    CHECK(manifest.recordings.size() == 10);
    std::set<std::string> subjects;
    for (const auto& e : manifest.recordings) {
        subjects.insert(e.subject_id);
        CHECK(e.channels == 4);
        CHECK(e.length == 60 * 64);
        CHECK(e.metadata.at("snr_db") == "none");
    }
    CHECK(subjects.size() == 5);
    CHECK_NOTHROW(verify_manifest(read_manifest(a / "manifest.json")));

    std::size_t files = 0;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(a)) {
        if (!entry.is_regular_file()) {
            continue;
        }
        ++files;
        const auto rel = std::filesystem::relative(entry.path(), a);
        CAPTURE(rel.string());
        CHECK(slurp(entry.path()) == slurp(b / rel));
    }
    CHECK(files == 10 * 2 + 1 + 5 + 2);

    const auto cfg = subject_config_from_json(nlohmann::json::parse(slurp(a / "subjects" / "S02.json")));
    CHECK(cfg.subject_id == "S02");
    CHECK(synth_manifest_from_json(nlohmann::json::parse(slurp(a / "synth.json"))).subjects == 5);
    const auto srt = read_csv(a / "behavioral_srt.csv");
    CHECK(srt.header == std::vector<std::string>{"subject_id", "srt_db"});
    CHECK(srt.rows.size() == 5);

    // the persisted configs regenerate the suite's subjects
    const auto again = subject_config_from_json(nlohmann::json::parse(slurp(a / "subjects" / "S01.json")));
    CHECK(again.pattern == make_subject_configs(m)[0].pattern);
}

TEST_CASE("speech-in-noise suites cover the condition grid")
{
    SynthManifest m;
    m.subjects = 2;
    m.channels = 4;
    m.snr_conditions = true;
    m.condition_duration_s = 60.0;
    const auto recs = generate_recordings(m);
    CHECK(recs.size() == 14);
    std::set<std::string> labels;
    for (const auto& r : recs) {
        if (r.subject_id == "S01") {
            labels.insert(r.metadata.at("snr_db"));
        }
    }
    std::set<std::string> expected{"none"};
    for (const double s : snr_grid()) {
        std::ostringstream os;
        os << s;
        expected.insert(os.str());
    }
    CHECK(labels == expected);
    for (const auto& r : recs) {
        const auto snr = recording_snr(r);
        CHECK(snr.has_value() == (r.metadata.at("snr_db") != "none"));
    }
}
