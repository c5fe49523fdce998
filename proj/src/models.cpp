#include "eegmm/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

namespace eegmm {

const char* group_name(ParamGroup g)
{
    switch (g) {
    case ParamGroup::spatial_eeg:
        return "spatial_eeg";
    case ParamGroup::dilated_eeg:
        return "dilated_eeg";
    case ParamGroup::dilated_env:
        return "dilated_env";
    case ParamGroup::output:
        return "output";
    case ParamGroup::decoder:
        return "decoder";
    }
    return "?";
}

ParamGroup parse_group(const std::string& s)
{
    for (auto g : {ParamGroup::spatial_eeg, ParamGroup::dilated_eeg, ParamGroup::dilated_env, ParamGroup::output,
                   ParamGroup::decoder}) {
        if (s == group_name(g)) {
            return g;
        }
    }
    throw ConfigError("unknown parameter group '" + s + "'");
}

// ---------------------------------------------------------------------------
// Spec

nlohmann::json model_spec_to_json(const ModelSpec& spec)
{
    nlohmann::json j;
    if (const auto* d = std::get_if<DilatedModelSpec>(&spec)) {
        j["type"] = "dilated";
        j["kernel"] = d->kernel;
        j["layers"] = d->layers;
        j["spatial_filters"] = d->spatial_filters;
        j["dilated_filters"] = d->dilated_filters;
        j["input_channels"] = d->input_channels;
        j["window"] = d->window;
        j["conv_bias"] = d->conv_bias;
        j["head"] = d->head == HeadWiring::per_index ? "per_index" : "all_pairs";
    } else {
        const auto& b = std::get<BaselineModelSpec>(spec);
        j["type"] = "baseline";
        j["taps"] = b.taps;
        j["input_channels"] = b.input_channels;
        j["window"] = b.window;
    }
    return j;
}

ModelSpec model_spec_from_json(const nlohmann::json& j)
{
    const auto type = j.at("type").get<std::string>();
    if (type == "dilated") {
        DilatedModelSpec d;
        d.kernel = j.value("kernel", d.kernel);
        d.layers = j.value("layers", d.layers);
        d.spatial_filters = j.value("spatial_filters", d.spatial_filters);
        d.dilated_filters = j.value("dilated_filters", d.dilated_filters);
        d.input_channels = j.value("input_channels", d.input_channels);
        d.window = j.value("window", d.window);
        d.conv_bias = j.value("conv_bias", d.conv_bias);
        const auto head = j.value("head", std::string("per_index"));
        if (head != "per_index" && head != "all_pairs") {
            throw ConfigError("model.head must be per_index or all_pairs");
        }
        d.head = head == "per_index" ? HeadWiring::per_index : HeadWiring::all_pairs;
        return d;
    }
    if (type == "baseline") {
        BaselineModelSpec b;
        b.taps = j.value("taps", b.taps);
        b.input_channels = j.value("input_channels", b.input_channels);
        b.window = j.value("window", b.window);
        return b;
    }
    throw ConfigError("model.type must be dilated or baseline, got '" + type + "'");
}

std::size_t receptive_field(std::size_t kernel, std::size_t layers)
{
    if (kernel < 1) {
        throw ConfigError("kernel size must be >= 1");
    }
    std::size_t rf = 1;
    for (std::size_t l = 0; l < layers; ++l) {
        if (rf > std::numeric_limits<std::size_t>::max() / kernel) {
            throw ConfigError("receptive field " + std::to_string(kernel) + "^" + std::to_string(layers) +
                              " overflows");
        }
        rf *= kernel;
    }
    return rf;
}

std::vector<std::size_t> dilation_schedule(std::size_t kernel, std::size_t layers)
{
    std::vector<std::size_t> d;
    std::size_t v = 1;
    for (std::size_t l = 0; l < layers; ++l) {
        d.push_back(v);
        v *= kernel;
    }
    return d;
}

std::size_t dilated_output_length(const DilatedModelSpec& spec)
{
    return spec.window - (receptive_field(spec.kernel, spec.layers) - 1);
}

// ---------------------------------------------------------------------------
// State

std::size_t ModelState::window() const
{
    return std::visit([](const auto& s) { return s.window; }, spec);
}

std::size_t ModelState::input_channels() const
{
    return std::visit([](const auto& s) { return s.input_channels; }, spec);
}

std::size_t ModelState::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& p : params) {
        n += p.values.size();
    }
    return n;
}

std::size_t ModelState::index_of(const std::string& name) const
{
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].name == name) {
            return i;
        }
    }
    throw ConfigError("model has no parameter named '" + name + "'");
}

namespace {

class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    double uniform(double limit)
    {
        const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
        return (2.0 * u - 1.0) * limit;
    }

    Parameter conv(std::string name, ParamGroup g, std::size_t out, std::size_t in, std::size_t k)
    {
        Parameter p{std::move(name), {out, in, k}, g, std::vector<double>(out * in * k)};
        const double limit = std::sqrt(6.0 / static_cast<double>(in * k + out * k));
        for (auto& v : p.values) {
            v = uniform(limit);
        }
        return p;
    }

    Parameter dense(std::string name, ParamGroup g, std::size_t in)
    {
        Parameter p{std::move(name), {in}, g, std::vector<double>(in)};
        const double limit = std::sqrt(6.0 / static_cast<double>(in + 1));
        for (auto& v : p.values) {
            v = uniform(limit);
        }
        return p;
    }

    static Parameter zeros(std::string name, ParamGroup g, std::size_t n)
    {
        return {std::move(name), {n}, g, std::vector<double>(n, 0.0)};
    }

private:
    std::mt19937_64 rng_;
};

} // namespace

ModelState build_dilated(const DilatedModelSpec& spec, std::uint64_t seed)
{
    if (spec.kernel < 1 || spec.layers < 1 || spec.spatial_filters < 1 || spec.dilated_filters < 1 ||
        spec.input_channels < 1) {
        throw ConfigError("dilated model needs kernel, layers, filters and channels >= 1");
    }
    const auto rf = receptive_field(spec.kernel, spec.layers);
    if (rf > spec.window) {
        throw ConfigError("receptive field " + std::to_string(rf) + " exceeds window of " +
                          std::to_string(spec.window) + " samples");
    }
    ModelState m;
    m.spec = spec;
    m.seed = seed;
    Initializer init(seed);
    const auto f1 = spec.spatial_filters, f2 = spec.dilated_filters;
    m.params.push_back(init.conv("spatial.weight", ParamGroup::spatial_eeg, f1, spec.input_channels, 1));
    if (spec.conv_bias) {
        m.params.push_back(Initializer::zeros("spatial.bias", ParamGroup::spatial_eeg, f1));
    }
    for (std::size_t l = 1; l <= spec.layers; ++l) {
        const std::string pre = "eeg_dilated." + std::to_string(l);
        m.params.push_back(init.conv(pre + ".weight", ParamGroup::dilated_eeg, f2, l == 1 ? f1 : f2, spec.kernel));
        if (spec.conv_bias) {
            m.params.push_back(Initializer::zeros(pre + ".bias", ParamGroup::dilated_eeg, f2));
        }
    }
    for (std::size_t l = 1; l <= spec.layers; ++l) {
        const std::string pre = "env_dilated." + std::to_string(l);
        m.params.push_back(init.conv(pre + ".weight", ParamGroup::dilated_env, f2, l == 1 ? 1 : f2, spec.kernel));
        if (spec.conv_bias) {
            m.params.push_back(Initializer::zeros(pre + ".bias", ParamGroup::dilated_env, f2));
        }
    }
    const std::size_t scores = spec.head == HeadWiring::per_index ? f2 : f2 * f2;
    m.params.push_back(init.dense("head.weight", ParamGroup::output, 2 * scores));
    m.params.push_back(Initializer::zeros("head.bias", ParamGroup::output, 1));
    return m;
}

ModelState build_baseline(const BaselineModelSpec& spec, std::uint64_t seed)
{
    if (spec.taps < 1 || spec.taps >= spec.window) {
        throw ConfigError("baseline taps must satisfy 1 <= taps < window");
    }
    ModelState m;
    m.spec = spec;
    m.seed = seed;
    Initializer init(seed);
    m.params.push_back(init.conv("decoder.weight", ParamGroup::decoder, 1, spec.input_channels, spec.taps));
    m.params.push_back(Initializer::zeros("decoder.bias", ParamGroup::decoder, 1));
    m.params.push_back(init.dense("head.weight", ParamGroup::output, 2));
    m.params.push_back(Initializer::zeros("head.bias", ParamGroup::output, 1));
    return m;
}

ModelState build_model(const ModelSpec& spec, std::uint64_t seed)
{
    if (const auto* d = std::get_if<DilatedModelSpec>(&spec)) {
        return build_dilated(*d, seed);
    }
    return build_baseline(std::get<BaselineModelSpec>(spec), seed);
}

std::map<ParamGroup, std::vector<std::string>> parameter_groups(const ModelState& model)
{
    std::map<ParamGroup, std::vector<std::string>> out;
    for (const auto& p : model.params) {
        out[p.group].push_back(p.name);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Network

template <typename T>
Network<T>::Network(const ModelState& model)
{
    auto idx = [&](const std::string& name) { return model.index_of(name); };
    auto opt_idx = [&](const std::string& name) {
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            if (model.params[i].name == name) {
                return i;
            }
        }
        return npos;
    };
    window_ = model.window();
    channels_ = model.input_channels();
    if (const auto* d = std::get_if<DilatedModelSpec>(&model.spec)) {
        dilated_ = true;
        wiring_ = d->head;
        filters_ = d->dilated_filters;
        spatial_ = {{channels_, d->spatial_filters, 1, 1, window_}, idx("spatial.weight"), opt_idx("spatial.bias")};
        const auto dil = dilation_schedule(d->kernel, d->layers);
        std::size_t len = window_;
        for (std::size_t l = 1; l <= d->layers; ++l) {
            const std::string el = "eeg_dilated." + std::to_string(l);
            const std::string nl = "env_dilated." + std::to_string(l);
            eeg_layers_.push_back({{l == 1 ? d->spatial_filters : filters_, filters_, d->kernel, dil[l - 1], len},
                                   idx(el + ".weight"),
                                   opt_idx(el + ".bias")});
            env_layers_.push_back(
                {{l == 1 ? 1 : filters_, filters_, d->kernel, dil[l - 1], len}, idx(nl + ".weight"), opt_idx(nl + ".bias")});
            len = eeg_layers_.back().shape.out_time();
        }
        eeg_acts_.resize(d->layers);
        env1_acts_.resize(d->layers);
        env2_acts_.resize(d->layers);
        for (std::size_t l = 0; l < d->layers; ++l) {
            const auto n = eeg_layers_[l].shape.out_channels * eeg_layers_[l].shape.out_time();
            eeg_acts_[l].resize(n);
            env1_acts_[l].resize(n);
            env2_acts_[l].resize(n);
        }
        s_.resize(d->spatial_filters * window_);
        const std::size_t scores = wiring_ == HeadWiring::per_index ? filters_ : filters_ * filters_;
        scores1_.resize(scores);
        scores2_.resize(scores);
    } else {
        const auto& b = std::get<BaselineModelSpec>(model.spec);
        dilated_ = false;
        filters_ = 1;
        decoder_ = {{channels_, 1, b.taps, 1, window_}, idx("decoder.weight"), idx("decoder.bias")};
        recon_.resize(decoder_.shape.out_time());
        scores1_.resize(1);
        scores2_.resize(1);
    }
    head_w_ = idx("head.weight");
    head_b_ = idx("head.bias");
    x_.resize(channels_ * window_);
    e1_.resize(window_);
    e2_.resize(window_);
    refresh(model);
}

template <typename T>
void Network<T>::refresh(const ModelState& model)
{
    w_.resize(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const auto& v = model.params[i].values;
        w_[i].resize(v.size());
        for (std::size_t k = 0; k < v.size(); ++k) {
            w_[i][k] = static_cast<T>(v[k]);
        }
    }
}

template <typename T>
void Network<T>::forward_stack(const std::vector<Layer>& layers, std::span<const T> input,
                               std::vector<std::vector<T>>& acts)
{
    std::span<const T> in = input;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        conv1d_forward<T>(layers[l].shape, in, weights(layers[l].weight), bias_of(layers[l].bias), acts[l]);
        relu_inplace<T>(acts[l]);
        in = acts[l];
    }
}

template <typename T>
void Network<T>::backward_stack(const std::vector<Layer>& layers, std::span<const T> input,
                                std::vector<std::vector<T>>& acts, std::vector<T> top_grad, Gradients<T>& grads,
                                std::vector<T>* input_grad)
{
    std::vector<T> g = std::move(top_grad);
    for (std::size_t l = layers.size(); l-- > 0;) {
        relu_backward<T>(acts[l], g);
        const auto& L = layers[l];
        const std::span<const T> x = l == 0 ? input : std::span<const T>(acts[l - 1]);
        std::vector<T> gx;
        if (l > 0 || input_grad != nullptr) {
            gx.assign(L.shape.in_channels * L.shape.in_time, T(0));
        }
        std::span<T> gb = L.bias == npos ? std::span<T>{} : std::span<T>(grads[L.bias]);
        conv1d_backward<T>(L.shape, x, weights(L.weight), g, gx, grads[L.weight], gb);
        g = std::move(gx);
    }
    if (input_grad != nullptr) {
        *input_grad = std::move(g);
    }
}

template <typename T>
typename Network<T>::Logits Network<T>::forward(std::span<const T> eeg, std::span<const T> env1,
                                                std::span<const T> env2)
{
    if (eeg.size() != channels_ * window_ || env1.size() != window_ || env2.size() != window_) {
        throw DimensionError("network expects EEG " + std::to_string(channels_) + " x " + std::to_string(window_) +
                             " and envelopes of " + std::to_string(window_) + " samples, got " +
                             std::to_string(eeg.size()) + " EEG values and envelopes of " +
                             std::to_string(env1.size()) + "/" + std::to_string(env2.size()));
    }
    std::copy(eeg.begin(), eeg.end(), x_.begin());
    std::copy(env1.begin(), env1.end(), e1_.begin());
    std::copy(env2.begin(), env2.end(), e2_.begin());
    return run();
}

template <typename T>
typename Network<T>::Logits Network<T>::run()
{
    if (dilated_) {
        conv1d_forward<T>(spatial_.shape, x_, weights(spatial_.weight), bias_of(spatial_.bias), s_);
        forward_stack(eeg_layers_, s_, eeg_acts_);
        forward_stack(env_layers_, e1_, env1_acts_);
        forward_stack(env_layers_, e2_, env2_acts_);
        const std::size_t len = eeg_layers_.back().shape.out_time();
        const auto& E = eeg_acts_.back();
        const auto& A = env1_acts_.back();
        const auto& B = env2_acts_.back();
        auto row = [&](const std::vector<T>& m, std::size_t f) { return std::span<const T>(m.data() + f * len, len); };
        if (wiring_ == HeadWiring::per_index) {
            for (std::size_t f = 0; f < filters_; ++f) {
                scores1_[f] = cosine<T>(row(E, f), row(A, f));
                scores2_[f] = cosine<T>(row(E, f), row(B, f));
            }
        } else {
            for (std::size_t i = 0; i < filters_; ++i) {
                for (std::size_t j = 0; j < filters_; ++j) {
                    scores1_[i * filters_ + j] = cosine<T>(row(E, i), row(A, j));
                    scores2_[i * filters_ + j] = cosine<T>(row(E, i), row(B, j));
                }
            }
        }
    } else {
        conv1d_forward<T>(decoder_.shape, x_, weights(decoder_.weight), bias_of(decoder_.bias), recon_);
        const std::size_t len = recon_.size();
        scores1_[0] = pearson<T>(recon_, std::span<const T>(e1_.data(), len));
        scores2_[0] = pearson<T>(recon_, std::span<const T>(e2_.data(), len));
    }

    const std::size_t n = scores1_.size();
    const auto& hw = w_[head_w_];
    double ab = static_cast<double>(w_[head_b_][0]);
    double ba = ab;
    for (std::size_t k = 0; k < n; ++k) {
        ab += static_cast<double>(hw[k]) * scores1_[k] + static_cast<double>(hw[n + k]) * scores2_[k];
        ba += static_cast<double>(hw[k]) * scores2_[k] + static_cast<double>(hw[n + k]) * scores1_[k];
    }
    return {ab, ba};
}

template <typename T>
Tensor2<T> Network<T>::eeg_embedding(std::span<const T> eeg)
{
    if (!dilated_) {
        throw ConfigError("eeg_embedding needs the dilated model");
    }
    if (eeg.size() != channels_ * window_) {
        throw DimensionError("eeg_embedding expects " + std::to_string(channels_) + " x " + std::to_string(window_) +
                             " values");
    }
    std::copy(eeg.begin(), eeg.end(), x_.begin());
    conv1d_forward<T>(spatial_.shape, x_, weights(spatial_.weight), bias_of(spatial_.bias), s_);
    forward_stack(eeg_layers_, s_, eeg_acts_);
    Tensor2<T> out(filters_, eeg_layers_.back().shape.out_time());
    out.values = eeg_acts_.back();
    return out;
}

template <typename T>
Tensor2<T> Network<T>::envelope_embedding(std::span<const T> env)
{
    if (!dilated_) {
        throw ConfigError("envelope_embedding needs the dilated model");
    }
    if (env.size() != window_) {
        throw DimensionError("envelope_embedding expects " + std::to_string(window_) + " samples");
    }
    std::copy(env.begin(), env.end(), e1_.begin());
    forward_stack(env_layers_, e1_, env1_acts_);
    Tensor2<T> out(filters_, env_layers_.back().shape.out_time());
    out.values = env1_acts_.back();
    return out;
}

template <typename T>
Tensor2<T> Network<T>::reconstruction(std::span<const T> eeg)
{
    if (dilated_) {
        throw ConfigError("reconstruction needs the baseline model");
    }
    if (eeg.size() != channels_ * window_) {
        throw DimensionError("reconstruction expects " + std::to_string(channels_) + " x " + std::to_string(window_) +
                             " values");
    }
    std::copy(eeg.begin(), eeg.end(), x_.begin());
    conv1d_forward<T>(decoder_.shape, x_, weights(decoder_.weight), bias_of(decoder_.bias), recon_);
    Tensor2<T> out(1, recon_.size());
    out.values = recon_;
    return out;
}

template <typename T>
typename Network<T>::Logits Network<T>::forward(const MatchMismatchExample& ex)
{
    if (ex.channels() != channels_ || ex.window != window_) {
        throw DimensionError("example has " + std::to_string(ex.channels()) + " channels x " +
                             std::to_string(ex.window) + " samples, model expects " + std::to_string(channels_) +
                             " x " + std::to_string(window_));
    }
    for (std::size_t c = 0; c < channels_; ++c) {
        const auto r = ex.eeg_row(c);
        std::transform(r.begin(), r.end(), x_.begin() + static_cast<std::ptrdiff_t>(c * window_),
                       [](double v) { return static_cast<T>(v); });
    }
    const auto cast = [](double v) { return static_cast<T>(v); };
    std::transform(ex.matched().begin(), ex.matched().end(), e1_.begin(), cast);
    std::transform(ex.imposter().begin(), ex.imposter().end(), e2_.begin(), cast);
    return run();
}

template <typename T>
void Network<T>::backward(double g_ab, double g_ba, Gradients<T>& grads)
{
    const std::size_t n = scores1_.size();
    const auto& hw = w_[head_w_];
    std::vector<T> gs1(n), gs2(n);
    for (std::size_t k = 0; k < n; ++k) {
        grads[head_w_][k] += static_cast<T>(g_ab * scores1_[k] + g_ba * scores2_[k]);
        grads[head_w_][n + k] += static_cast<T>(g_ab * scores2_[k] + g_ba * scores1_[k]);
        gs1[k] = static_cast<T>(g_ab * hw[k] + g_ba * hw[n + k]);
        gs2[k] = static_cast<T>(g_ab * hw[n + k] + g_ba * hw[k]);
    }
    grads[head_b_][0] += static_cast<T>(g_ab + g_ba);

    if (dilated_) {
        const std::size_t len = eeg_layers_.back().shape.out_time();
        const auto& E = eeg_acts_.back();
        const auto& A = env1_acts_.back();
        const auto& B = env2_acts_.back();
        std::vector<T> gE(E.size(), T(0)), gA(A.size(), T(0)), gB(B.size(), T(0));
        auto row = [&](const std::vector<T>& m, std::size_t f) { return std::span<const T>(m.data() + f * len, len); };
        auto mrow = [&](std::vector<T>& m, std::size_t f) { return std::span<T>(m.data() + f * len, len); };
        if (wiring_ == HeadWiring::per_index) {
            for (std::size_t f = 0; f < filters_; ++f) {
                cosine_backward<T>(row(E, f), row(A, f), gs1[f], mrow(gE, f), mrow(gA, f));
                cosine_backward<T>(row(E, f), row(B, f), gs2[f], mrow(gE, f), mrow(gB, f));
            }
        } else {
            for (std::size_t i = 0; i < filters_; ++i) {
                for (std::size_t j = 0; j < filters_; ++j) {
                    cosine_backward<T>(row(E, i), row(A, j), gs1[i * filters_ + j], mrow(gE, i), mrow(gA, j));
                    cosine_backward<T>(row(E, i), row(B, j), gs2[i * filters_ + j], mrow(gE, i), mrow(gB, j));
                }
            }
        }
        backward_stack(env_layers_, e1_, env1_acts_, std::move(gA), grads, nullptr);
        backward_stack(env_layers_, e2_, env2_acts_, std::move(gB), grads, nullptr);
        std::vector<T> gS;
        backward_stack(eeg_layers_, s_, eeg_acts_, std::move(gE), grads, &gS);
        std::span<T> gb = spatial_.bias == npos ? std::span<T>{} : std::span<T>(grads[spatial_.bias]);
        conv1d_backward<T>(spatial_.shape, x_, weights(spatial_.weight), gS, {}, grads[spatial_.weight], gb);
    } else {
        const std::size_t len = recon_.size();
        std::vector<T> gr(len, T(0));
        pearson_backward<T>(recon_, std::span<const T>(e1_.data(), len), gs1[0], gr, {});
        pearson_backward<T>(recon_, std::span<const T>(e2_.data(), len), gs2[0], gr, {});
        conv1d_backward<T>(decoder_.shape, x_, weights(decoder_.weight), gr, {}, grads[decoder_.weight],
                           grads[decoder_.bias]);
    }
}

template class Network<float>;
template class Network<double>;

double forward(const ModelState& model, std::span<const double> eeg, std::span<const double> env_a,
               std::span<const double> env_b)
{
    Network<double> net(model);
    return sigmoid(net.forward(eeg, env_a, env_b).ab);
}

double forward(const ModelState& model, const MatchMismatchExample& ex, Target ordering)
{
    Network<double> net(model);
    const auto l = net.forward(ex);
    return sigmoid(ordering == Target::first_is_match ? l.ab : l.ba);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'E', 'E', 'G', 'M', 'M', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put_le(std::ostream& os, U v)
{
    unsigned char b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    }
    os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(std::istream& is)
{
    unsigned char b[sizeof(U)] = {};
    is.read(reinterpret_cast<char*>(b), sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<U>(b[i]) << (8 * i);
    }
    return v;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelState& model)
{
    nlohmann::json h;
    h["format"] = "eegmm-checkpoint";
    h["spec"] = model_spec_to_json(model.spec);
    h["seed"] = model.seed;
    h["metadata"] = model.metadata;
    nlohmann::json groups;
    for (const auto& [g, names] : parameter_groups(model)) {
        groups[group_name(g)] = names;
    }
    h["groups"] = groups;
    std::size_t offset = 0;
    for (const auto& p : model.params) {
        h["parameters"].push_back(
            {{"name", p.name}, {"shape", p.shape}, {"group", group_name(p.group)}, {"offset", offset},
             {"count", p.values.size()}});
        offset += p.values.size();
    }
    const std::string header = h.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw ConfigError("cannot open " + path.string() + " for writing");
    }
    f.write(kMagic, sizeof(kMagic));
    put_le<std::uint32_t>(f, kVersion);
    put_le<std::uint64_t>(f, header.size());
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& p : model.params) {
        for (double v : p.values) {
            put_le<std::uint32_t>(f, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
    }
    if (!f) {
        throw ConfigError("write failed for " + path.string());
    }
}

ModelState load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw ConfigError("missing checkpoint " + path.string());
    }
    char magic[8] = {};
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw ConfigError(path.string() + " is not an eegmm checkpoint");
    }
    const auto version = get_le<std::uint32_t>(f);
    if (version != kVersion) {
        throw ConfigError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto hlen = get_le<std::uint64_t>(f);
    std::string header(hlen, '\0');
    f.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!f) {
        throw ConfigError("truncated checkpoint header in " + path.string());
    }
    const auto h = nlohmann::json::parse(header);
    ModelState m = build_model(model_spec_from_json(h.at("spec")), h.at("seed").get<std::uint64_t>());
    m.metadata = h.at("metadata").get<std::map<std::string, std::string>>();
    const auto& plist = h.at("parameters");
    if (plist.size() != m.params.size()) {
        throw ConfigError("checkpoint parameter list does not match its spec");
    }
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        auto& p = m.params[i];
        if (plist[i].at("name").get<std::string>() != p.name || plist[i].at("count").get<std::size_t>() != p.values.size()) {
            throw ConfigError("checkpoint parameter " + plist[i].at("name").get<std::string>() +
                              " does not match the model layout");
        }
        for (auto& v : p.values) {
            v = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(f)));
        }
    }
    if (!f || f.peek() != std::char_traits<char>::eof()) {
        throw ConfigError("checkpoint blob size mismatch in " + path.string());
    }
    return m;
}

} // namespace eegmm
