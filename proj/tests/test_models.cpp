#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "eegmm/gradcheck.hpp"
#include "eegmm/models.hpp"
#include "test_util.hpp"

#include <cmath>
#include <fstream>
#include <set>

using namespace eegmm;

namespace {

void randomize(ModelState& m, std::uint64_t seed, double scale = 0.5)
{
    std::uint64_t s = seed;
    for (auto& p : m.params) {
        p.values = testutil::normals(p.values.size(), ++s);
        for (auto& v : p.values) {
            v *= scale;
        }
    }
}

void make_positive(ModelState& m, std::uint64_t seed)
{
    randomize(m, seed);
    for (auto& p : m.params) {
        for (auto& v : p.values) {
            v = 0.1 + 0.05 * std::abs(v);
        }
    }
}

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double cos_sim(const std::vector<double>& a, const std::vector<double>& b)
{
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return aa == 0.0 || bb == 0.0 ? 0.0 : ab / std::sqrt(aa * bb);
}

} // namespace

TEST_CASE("receptive field law")
{
    CHECK(receptive_field(3, 3) == 27);
    CHECK(1000.0 * 27 / 64.0 == doctest::Approx(420.0).epsilon(0.01));
    CHECK(receptive_field(2, 1) == 2);
    CHECK(receptive_field(5, 0) == 1);
    CHECK_THROWS_AS(receptive_field(3, 100), ConfigError);
    CHECK_THROWS_AS(receptive_field(0, 2), ConfigError);
    for (std::size_t K = 1; K <= 6; ++K) {
        for (std::size_t N = 0; N <= 6; ++N) {
            const auto d = dilation_schedule(K, N);
            REQUIRE(d.size() == N);
            std::size_t span = 1, p = 1;
            for (std::size_t l = 0; l < N; ++l) {
                CHECK(d[l] == p);
                span += (K - 1) * d[l];
                p *= K;
            }
            CHECK(span == receptive_field(K, N));
        }
    }
}

TEST_CASE("impulse sensitivity extent equals K^N")
{
    for (std::size_t K = 2; K <= 4; ++K) {
        for (std::size_t N = 1; receptive_field(K, N) <= 64; ++N) {
            const std::size_t rf = receptive_field(K, N);
            CAPTURE(K);
            CAPTURE(N);
            DilatedModelSpec spec{K, N, 2, 3, 3, 2 * rf + 8, true, HeadWiring::per_index};
            auto model = build_dilated(spec, 1);
            make_positive(model, K * 100 + N);
            Network<double> net(model);
            std::vector<double> eeg(spec.input_channels * spec.window);
            for (std::size_t i = 0; i < eeg.size(); ++i) {
                eeg[i] = 1.0 + 0.1 * std::sin(0.37 * static_cast<double>(i));
            }
            std::vector<double> env(eeg.begin(), eeg.begin() + static_cast<long>(spec.window));
            const auto base = net.eeg_embedding(eeg);
            const auto base_env = net.envelope_embedding(env);
            CHECK(base.time == dilated_output_length(spec));
            const std::size_t t0 = spec.window / 2;
            eeg[t0] += 1.0;
            env[t0] += 1.0;
            const auto hit = net.eeg_embedding(eeg);
            const auto hit_env = net.envelope_embedding(env);
            std::size_t first = base.time, last = 0, changed = 0, changed_env = 0;
            for (std::size_t t = 0; t < base.time; ++t) {
                bool c = false, ce = false;
                for (std::size_t f = 0; f < base.channels; ++f) {
                    c = c || hit(f, t) != base(f, t);
                    ce = ce || hit_env(f, t) != base_env(f, t);
                }
                if (c) {
                    ++changed;
                    first = std::min(first, t);
                    last = std::max(last, t);
                }
                changed_env += ce ? 1 : 0;
            }
            CHECK(changed == rf);
            CHECK(last - first + 1 == rf);
            CHECK(changed_env == rf);
        }
    }
}

TEST_CASE("dilated output length for K=3, N=5, W=640")
{
    DilatedModelSpec spec{3, 5, 8, 16, 64, 640, true, HeadWiring::per_index};
    CHECK(dilated_output_length(spec) == 398);
    auto model = build_dilated(spec, 3);
    Network<double> net(model);
    const auto eeg = testutil::normals(64 * 640, 4);
    const auto env = testutil::normals(640, 5);
    const auto e = net.eeg_embedding(eeg);
    const auto a = net.envelope_embedding(env);
    CHECK(e.channels == 16);
    CHECK(e.time == 398);
    CHECK(a.channels == 16);
    CHECK(a.time == 398);
}

TEST_CASE("parameter count by enumeration")
{
    DilatedModelSpec spec{3, 1, 8, 16, 64, 640, false, HeadWiring::per_index};
    const auto model = build_dilated(spec, 0);
    const std::size_t spatial = 64 * 8;
    const std::size_t eeg_dilated = 8 * 16 * 3;
    const std::size_t env_dilated = 1 * 16 * 3;
    const std::size_t head = 2 * 16 + 1;
    CHECK(spatial + eeg_dilated + env_dilated + head == 977);
    CHECK(model.parameter_count() == 977);

    DilatedModelSpec full{3, 5, 8, 16, 64, 640, true, HeadWiring::per_index};
    std::size_t expected = 64 * 8 + 8;
    for (std::size_t l = 1; l <= 5; ++l) {
        expected += (l == 1 ? 8 : 16) * 16 * 3 + 16;
        expected += (l == 1 ? 1 : 16) * 16 * 3 + 16;
    }
    expected += 2 * 16 + 1;
    CHECK(build_dilated(full, 0).parameter_count() == expected);

    DilatedModelSpec pairs = full;
    pairs.head = HeadWiring::all_pairs;
    CHECK(build_dilated(pairs, 0).param("head.weight").values.size() == 2 * 16 * 16);
    CHECK(build_baseline({16, 64, 640}, 0).parameter_count() == 64 * 16 + 1 + 2 + 1);
}

TEST_CASE("builders reject impossible specs")
{
    CHECK_THROWS_AS(build_dilated({3, 6, 8, 16, 64, 640, true, HeadWiring::per_index}, 0), ConfigError);
    CHECK_THROWS_AS(build_dilated({3, 0, 8, 16, 64, 640, true, HeadWiring::per_index}, 0), ConfigError);
    CHECK_NOTHROW(build_dilated({3, 3, 8, 16, 64, 27, true, HeadWiring::per_index}, 0));
    CHECK_THROWS_AS(build_baseline({640, 64, 640}, 0), ConfigError);
}

TEST_CASE("initialization is seeded and Glorot-bounded")
{
    DilatedModelSpec spec;
    const auto a = build_dilated(spec, 7), b = build_dilated(spec, 7), c = build_dilated(spec, 8);
    CHECK(a.params[0].values == b.params[0].values);
    CHECK(a.params[0].values != c.params[0].values);
    const double limit = std::sqrt(6.0 / (64.0 + 8.0));
    for (const double v : a.param("spatial.weight").values) {
        CHECK(std::abs(v) <= limit);
    }
    for (const double v : a.param("spatial.bias").values) {
        CHECK(v == 0.0);
    }
    CHECK(a.param("head.bias").values[0] == 0.0);
}

TEST_CASE("parameter groups partition the parameters")
{
    const auto model = build_dilated({3, 5, 8, 16, 64, 640, true, HeadWiring::per_index}, 0);
    const auto groups = parameter_groups(model);
    CHECK(groups.size() == 4);
    std::multiset<std::string> seen;
    for (const auto& [g, names] : groups) {
        for (const auto& n : names) {
            seen.insert(n);
            CHECK(model.param(n).group == g);
        }
    }
    CHECK(seen.size() == model.params.size());
    for (const auto& p : model.params) {
        CHECK(seen.count(p.name) == 1);
    }
    CHECK(groups.at(ParamGroup::output) == std::vector<std::string>{"head.weight", "head.bias"});
    const auto base = parameter_groups(build_baseline({}, 0));
    CHECK(base.size() == 2);
    CHECK(base.count(ParamGroup::decoder) == 1);
    CHECK(base.count(ParamGroup::output) == 1);
    for (const auto g : {ParamGroup::spatial_eeg, ParamGroup::dilated_eeg, ParamGroup::dilated_env, ParamGroup::output,
                         ParamGroup::decoder}) {
        CHECK(parse_group(group_name(g)) == g);
    }
    CHECK_THROWS_AS(parse_group("conv"), ConfigError);
}

TEST_CASE("one envelope stack serves both slots")
{
    const auto model = build_dilated({3, 2, 4, 4, 8, 64, true, HeadWiring::per_index}, 0);
    std::size_t env_weights = 0;
    for (const auto& p : model.params) {
        env_weights += p.group == ParamGroup::dilated_env ? 1 : 0;
    }
    CHECK(env_weights == 4); // weight and bias per layer, no per-slot copies
}

TEST_CASE("hand-computed forward pass of a tiny dilated model")
{
    DilatedModelSpec spec{2, 1, 2, 2, 2, 8, true, HeadWiring::per_index};
    auto model = build_dilated(spec, 0);
    randomize(model, 31);
    const auto x = testutil::normals(16, 32);
    const auto ea = testutil::normals(8, 33);
    const auto eb = testutil::normals(8, 34);
    const auto& Ws = model.param("spatial.weight").values;
    const auto& bs = model.param("spatial.bias").values;
    const auto& We = model.param("eeg_dilated.1.weight").values;
    const auto& be = model.param("eeg_dilated.1.bias").values;
    const auto& Wn = model.param("env_dilated.1.weight").values;
    const auto& bn = model.param("env_dilated.1.bias").values;
    const auto& hw = model.param("head.weight").values;
    const double hb = model.param("head.bias").values[0];

    double s[2][8];
    for (int f = 0; f < 2; ++f) {
        for (int t = 0; t < 8; ++t) {
            s[f][t] = bs[f] + Ws[f * 2 + 0] * x[0 * 8 + t] + Ws[f * 2 + 1] * x[1 * 8 + t];
        }
    }
    std::vector<std::vector<double>> E(2, std::vector<double>(7)), A(2, std::vector<double>(7)),
        B(2, std::vector<double>(7));
    for (int g = 0; g < 2; ++g) {
        for (int t = 0; t < 7; ++t) {
            double v = be[g];
            for (int f = 0; f < 2; ++f) {
                v += We[(g * 2 + f) * 2 + 0] * s[f][t] + We[(g * 2 + f) * 2 + 1] * s[f][t + 1];
            }
            E[g][t] = std::max(0.0, v);
            A[g][t] = std::max(0.0, bn[g] + Wn[g * 2 + 0] * ea[t] + Wn[g * 2 + 1] * ea[t + 1]);
            B[g][t] = std::max(0.0, bn[g] + Wn[g * 2 + 0] * eb[t] + Wn[g * 2 + 1] * eb[t + 1]);
        }
    }
    double z = hb;
    for (int g = 0; g < 2; ++g) {
        z += hw[g] * cos_sim(E[g], A[g]) + hw[2 + g] * cos_sim(E[g], B[g]);
    }
    CHECK(std::abs(forward(model, x, ea, eb) - sig(z)) <= 1e-10);
}

TEST_CASE("hand-computed forward pass of the baseline")
{
    BaselineModelSpec spec{3, 2, 8};
    auto model = build_baseline(spec, 0);
    randomize(model, 41);
    const auto x = testutil::normals(16, 42);
    const auto ea = testutil::normals(8, 43);
    const auto eb = testutil::normals(8, 44);
    const auto& W = model.param("decoder.weight").values;
    const double b = model.param("decoder.bias").values[0];
    std::vector<double> r(6);
    for (int t = 0; t < 6; ++t) {
        r[t] = b;
        for (int c = 0; c < 2; ++c) {
            for (int j = 0; j < 3; ++j) {
                r[t] += W[c * 3 + j] * x[c * 8 + t + j];
            }
        }
    }
    const std::vector<double> a6(ea.begin(), ea.begin() + 6), b6(eb.begin(), eb.begin() + 6);
    const auto& hw = model.param("head.weight").values;
    const double z =
        model.param("head.bias").values[0] + hw[0] * testutil::correlation(r, a6) + hw[1] * testutil::correlation(r, b6);
    CHECK(std::abs(forward(model, x, ea, eb) - sig(z)) <= 1e-10);
    Network<double> net(model);
    CHECK(net.reconstruction(x).time == 6);
}

TEST_CASE("baseline reconstruction length for a 10 s window")
{
    const auto model = build_baseline({16, 64, 640}, 1);
    Network<double> net(model);
    CHECK(net.reconstruction(testutil::normals(64 * 640, 2)).time == 625);
}

TEST_CASE("baseline is invariant to scaling the decoder kernel")
{
    auto model = build_baseline({16, 8, 128}, 2);
    randomize(model, 50);
    const auto x = testutil::normals(8 * 128, 51);
    const auto a = testutil::normals(128, 52), b = testutil::normals(128, 53);
    const double p = forward(model, x, a, b);
    for (auto& v : model.param("decoder.weight").values) {
        v *= 3.7;
    }
    CHECK(forward(model, x, a, b) == doctest::Approx(p).epsilon(1e-12));
}

TEST_CASE("antisymmetric baseline head flips p under a slot swap")
{
    auto model = build_baseline({16, 8, 128}, 2);
    randomize(model, 60);
    model.param("head.weight").values = {1.3, -1.3};
    model.param("head.bias").values = {0.0};
    const auto x = testutil::normals(8 * 128, 61);
    const auto a = testutil::normals(128, 62), b = testutil::normals(128, 63);
    CHECK(forward(model, x, a, b) == doctest::Approx(1.0 - forward(model, x, b, a)).epsilon(1e-12));
}

TEST_CASE("identical envelopes are symmetric under a slot swap")
{
    auto model = build_dilated({3, 2, 4, 4, 6, 64, true, HeadWiring::per_index}, 9);
    randomize(model, 70);
    const auto x = testutil::normals(6 * 64, 71);
    const auto a = testutil::normals(64, 72);
    Network<double> net(model);
    const auto l = net.forward(x, a, a);
    CHECK(l.ab == l.ba);
    const auto b = testutil::normals(64, 73);
    const auto l2 = net.forward(x, a, b);
    CHECK(forward(model, x, b, a) == doctest::Approx(sig(l2.ba)).epsilon(1e-14));
    CHECK(forward(model, x, a, b) == doctest::Approx(sig(l2.ab)).epsilon(1e-14));
}

TEST_CASE("all-zero EEG gives the head bias")
{
    auto model = build_dilated({3, 2, 4, 4, 6, 64, true, HeadWiring::per_index}, 9);
    model.param("head.bias").values[0] = 0.3;
    const std::vector<double> x(6 * 64, 0.0);
    const auto a = testutil::normals(64, 80), b = testutil::normals(64, 81);
    CHECK(forward(model, x, a, b) == doctest::Approx(sig(0.3)).epsilon(1e-15));
}

TEST_CASE("forward rejects mismatched shapes")
{
    const auto model = build_dilated({3, 2, 4, 4, 6, 64, true, HeadWiring::per_index}, 9);
    const auto a = testutil::normals(64, 1);
    CHECK_THROWS_AS(forward(model, testutil::normals(5 * 64, 2), a, a), DimensionError);
    CHECK_THROWS_AS(forward(model, testutil::normals(6 * 64, 2), a, testutil::normals(63, 3)), DimensionError);
    const auto rec = testutil::random_recording(5, 64 * 30, 64.0, 4);
    const auto ex = build_examples(rec, split_recording(rec, 64), Part::train, 64);
    CHECK_THROWS_AS(forward(model, ex.at(0), Target::first_is_match), DimensionError);
}

TEST_CASE("64-bit gradients of the full dilated model")
{
    DilatedModelSpec spec{2, 2, 4, 4, 64, 64, true, HeadWiring::per_index};
    auto model = build_dilated(spec, 11);
    randomize(model, 90, 0.3);
    const auto x = testutil::normals(64 * 64, 91);
    const auto a = testutil::normals(64, 92), b = testutil::normals(64, 93);
    Network<double> net(model);
    auto loss = [&] {
        net.refresh(model);
        const auto l = net.forward(x, a, b);
        return bce_with_logit(l.ab, 1.0).loss + bce_with_logit(l.ba, 0.0).loss;
    };
    loss();
    const auto l = net.forward(x, a, b);
    auto grads = zero_gradients<double>(model);
    net.backward(bce_with_logit(l.ab, 1.0).dlogit, bce_with_logit(l.ba, 0.0).dlogit, grads);
    std::vector<GradCheckTarget> targets;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        targets.push_back({model.params[i].name, model.params[i].values, grads[i]});
    }
    const auto report = grad_check(targets, loss, 1e-6, 1e-4);
    CHECK(report.passed);
    CHECK(report.checked == model.parameter_count());
    CHECK(report.max_error <= 1e-4);
}

TEST_CASE("baseline and all-pairs gradients")
{
    BaselineModelSpec bspec{5, 4, 40};
    DilatedModelSpec dspec{2, 2, 3, 3, 4, 40, true, HeadWiring::all_pairs};
    for (const ModelSpec spec : {ModelSpec{bspec}, ModelSpec{dspec}}) {
        auto model = build_model(spec, 12);
        randomize(model, 100, 0.4);
        const auto x = testutil::normals(4 * 40, 101);
        const auto a = testutil::normals(40, 102), b = testutil::normals(40, 103);
        Network<double> net(model);
        auto loss = [&] {
            net.refresh(model);
            const auto l = net.forward(x, a, b);
            return bce_with_logit(l.ab, 0.0).loss + bce_with_logit(l.ba, 1.0).loss;
        };
        const auto l = net.forward(x, a, b);
        auto grads = zero_gradients<double>(model);
        net.backward(bce_with_logit(l.ab, 0.0).dlogit, bce_with_logit(l.ba, 1.0).dlogit, grads);
        std::vector<GradCheckTarget> targets;
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            targets.push_back({model.params[i].name, model.params[i].values, grads[i]});
        }
        CHECK(grad_check(targets, loss, 1e-6, 1e-4).passed);
    }
}

TEST_CASE("float and double networks agree")
{
    auto model = build_dilated({3, 3, 8, 16, 16, 128, true, HeadWiring::per_index}, 13);
    const auto rec = testutil::random_recording(16, 64 * 40, 64.0, 14);
    const auto ex = build_examples(rec, split_recording(rec, 128), Part::train, 128);
    Network<float> nf(model);
    Network<double> nd(model);
    for (std::size_t i = 0; i < 5; ++i) {
        const auto lf = nf.forward(ex[i]);
        const auto ld = nd.forward(ex[i]);
        CHECK(lf.ab == doctest::Approx(ld.ab).epsilon(1e-4));
        CHECK(lf.ba == doctest::Approx(ld.ba).epsilon(1e-4));
    }
}

TEST_CASE("model spec JSON")
{
    DilatedModelSpec d{4, 2, 5, 6, 32, 320, false, HeadWiring::all_pairs};
    const auto back = std::get<DilatedModelSpec>(model_spec_from_json(model_spec_to_json(d)));
    CHECK(back.kernel == 4);
    CHECK(back.layers == 2);
    CHECK(back.spatial_filters == 5);
    CHECK(back.dilated_filters == 6);
    CHECK(back.input_channels == 32);
    CHECK(back.window == 320);
    CHECK_FALSE(back.conv_bias);
    CHECK(back.head == HeadWiring::all_pairs);
    const auto b = std::get<BaselineModelSpec>(model_spec_from_json(model_spec_to_json(BaselineModelSpec{9, 3, 99})));
    CHECK(b.taps == 9);
    CHECK(b.input_channels == 3);
    CHECK(b.window == 99);
    CHECK_THROWS_AS(model_spec_from_json({{"type", "lstm"}}), ConfigError);
}

TEST_CASE("checkpoints round-trip and are byte-stable")
{
    const auto dir = testutil::temp_dir("ckpt");
    auto model = build_dilated({3, 2, 4, 4, 6, 64, true, HeadWiring::per_index}, 21);
    model.metadata["batch_size"] = "64";
    save_checkpoint(dir / "a.ckpt", model);
    save_checkpoint(dir / "b.ckpt", model);
    std::ifstream fa(dir / "a.ckpt", std::ios::binary), fb(dir / "b.ckpt", std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(sa == sb);
    CHECK(sa.substr(0, 8) == "EEGMMCKP");
    const auto back = load_checkpoint(dir / "a.ckpt");
    CHECK(back.seed == 21);
    CHECK(back.metadata.at("batch_size") == "64");
    REQUIRE(back.params.size() == model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        CHECK(back.params[i].name == model.params[i].name);
        CHECK(back.params[i].shape == model.params[i].shape);
        CHECK(back.params[i].group == model.params[i].group);
        for (std::size_t k = 0; k < model.params[i].values.size(); ++k) {
            CHECK(back.params[i].values[k] == static_cast<double>(static_cast<float>(model.params[i].values[k])));
        }
    }
    // a float-exact model survives bit for bit
    save_checkpoint(dir / "c.ckpt", back);
    const auto again = load_checkpoint(dir / "c.ckpt");
    for (std::size_t i = 0; i < back.params.size(); ++i) {
        CHECK(again.params[i].values == back.params[i].values);
    }

    SUBCASE("corrupt files are rejected")
    {
        std::ofstream(dir / "short.ckpt", std::ios::binary) << sa.substr(0, sa.size() - 3);
        CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), ConfigError);
        std::ofstream(dir / "long.ckpt", std::ios::binary) << sa << "x";
        CHECK_THROWS_AS(load_checkpoint(dir / "long.ckpt"), ConfigError);
        std::string bad = sa;
        bad[0] = 'X';
        std::ofstream(dir / "magic.ckpt", std::ios::binary) << bad;
        CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), ConfigError);
        CHECK_THROWS_AS(load_checkpoint(dir / "nothing.ckpt"), ConfigError);
    }
}
