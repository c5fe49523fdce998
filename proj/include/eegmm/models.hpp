#pragma once

// The baseline convolutional decoder and the dilated convolutional match/mismatch network.

#include "eegmm/dataset.hpp"
#include "eegmm/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace eegmm {

enum class ParamGroup { spatial_eeg, dilated_eeg, dilated_env, output, decoder };

const char* group_name(ParamGroup g);
ParamGroup parse_group(const std::string& s);

/// per_index: cosine(EEG filter f, envelope filter f), 2*F2 scores.
/// all_pairs: cosine(EEG filter i, envelope filter j), 2*F2*F2 scores.
enum class HeadWiring { per_index, all_pairs };

struct DilatedModelSpec {
    std::size_t kernel = 3;          // K, taps per dilated layer
    std::size_t layers = 3;          // N
    std::size_t spatial_filters = 8; // F1
    std::size_t dilated_filters = 16; // F2
    std::size_t input_channels = 64;
    std::size_t window = 640;
    bool conv_bias = true;
    HeadWiring head = HeadWiring::per_index;
};

struct BaselineModelSpec {
    std::size_t taps = 16; // 0..234 ms at 64 Hz
    std::size_t input_channels = 64;
    std::size_t window = 640;
};

using ModelSpec = std::variant<DilatedModelSpec, BaselineModelSpec>;

nlohmann::json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

/// K^N, the number of input samples feeding one output sample of N dilated layers with
/// dilation K^(l-1) at layer l. Throws ConfigError on overflow.
std::size_t receptive_field(std::size_t kernel, std::size_t layers);

/// Dilation of each layer: 1, K, K^2, ...
std::vector<std::size_t> dilation_schedule(std::size_t kernel, std::size_t layers);

/// Time length after the dilated stack.
std::size_t dilated_output_length(const DilatedModelSpec& spec);

struct Parameter {
    std::string name;
    std::vector<std::size_t> shape;
    ParamGroup group = ParamGroup::output;
    std::vector<double> values;
};

struct ModelState {
    ModelSpec spec;
    std::vector<Parameter> params;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> metadata;

    [[nodiscard]] bool is_dilated() const { return std::holds_alternative<DilatedModelSpec>(spec); }
    [[nodiscard]] std::size_t window() const;
    [[nodiscard]] std::size_t input_channels() const;
    [[nodiscard]] std::size_t parameter_count() const;
    [[nodiscard]] std::size_t index_of(const std::string& name) const;
    [[nodiscard]] const Parameter& param(const std::string& name) const { return params[index_of(name)]; }
    Parameter& param(const std::string& name) { return params[index_of(name)]; }
};

/// Glorot-uniform conv/dense weights, zero biases.
ModelState build_dilated(const DilatedModelSpec& spec, std::uint64_t seed);
ModelState build_baseline(const BaselineModelSpec& spec, std::uint64_t seed);
ModelState build_model(const ModelSpec& spec, std::uint64_t seed);

/// Group -> parameter names, in declaration order. A partition of all parameters.
std::map<ParamGroup, std::vector<std::string>> parameter_groups(const ModelState& model);

/// Per-parameter gradient buffers, parallel to ModelState::params.
template <typename T>
using Gradients = std::vector<std::vector<T>>;

template <typename T>
Gradients<T> zero_gradients(const ModelState& model)
{
    Gradients<T> g;
    for (const auto& p : model.params) {
        g.emplace_back(p.values.size(), T(0));
    }
    return g;
}

/// Evaluates a model on one window for both envelope orderings at once, keeping activations for
/// the backward pass. Weights are copied in at construction (or refresh()).
template <typename T>
class Network {
public:
    explicit Network(const ModelState& model);

    /// Re-read weights after the ModelState changed.
    void refresh(const ModelState& model);

    /// Logits of "slot A is the match": `ab` with env1 in slot A and env2 in slot B, `ba` swapped.
    struct Logits {
        double ab = 0.0;
        double ba = 0.0;
    };

    /// eeg: input_channels x window (channel-major), env1/env2: window samples each.
    Logits forward(std::span<const T> eeg, std::span<const T> env1, std::span<const T> env2);
    /// env1 = matched, env2 = imposter.
    Logits forward(const MatchMismatchExample& ex);

    /// Dilated-path outputs (F2 x output length) for one EEG window or one envelope segment.
    /// Throws ConfigError for the baseline model.
    Tensor2<T> eeg_embedding(std::span<const T> eeg);
    Tensor2<T> envelope_embedding(std::span<const T> env);
    /// Baseline decoder output (1 x window - taps + 1). Throws ConfigError for the dilated model.
    Tensor2<T> reconstruction(std::span<const T> eeg);

    /// Accumulate parameter gradients for dLoss/dlogit_ab = g_ab, dLoss/dlogit_ba = g_ba
    /// from the most recent forward().
    void backward(double g_ab, double g_ba, Gradients<T>& grads);

private:
    struct Layer {
        ConvShape shape;
        std::size_t weight = 0; // parameter index
        std::size_t bias = 0;   // parameter index, or npos
    };
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    Logits run(); // on the loaded x_, e1_, e2_

    void forward_stack(const std::vector<Layer>& layers, std::span<const T> input, std::vector<std::vector<T>>& acts);
    void backward_stack(const std::vector<Layer>& layers, std::span<const T> input,
                        std::vector<std::vector<T>>& acts, std::vector<T> top_grad, Gradients<T>& grads,
                        std::vector<T>* input_grad);
    std::span<const T> weights(std::size_t idx) const { return w_[idx]; }
    std::span<const T> bias_of(std::size_t idx) const
    {
        return idx == npos ? std::span<const T>{} : std::span<const T>(w_[idx]);
    }

    bool dilated_ = true;
    std::size_t channels_ = 0;
    std::size_t window_ = 0;
    HeadWiring wiring_ = HeadWiring::per_index;
    std::size_t filters_ = 0; // F2 (dilated) or 1 (baseline)
    std::vector<std::vector<T>> w_;

    // dilated
    Layer spatial_;
    std::vector<Layer> eeg_layers_;
    std::vector<Layer> env_layers_;
    // baseline
    Layer decoder_;
    std::size_t head_w_ = 0, head_b_ = 0;

    std::vector<T> x_, e1_, e2_, s_;
    std::vector<std::vector<T>> eeg_acts_, env1_acts_, env2_acts_;
    std::vector<T> scores1_, scores2_;
    std::vector<T> recon_;
};

extern template class Network<float>;
extern template class Network<double>;

/// Probability that slot A holds the match, 64-bit evaluation.
double forward(const ModelState& model, std::span<const double> eeg, std::span<const double> env_a,
               std::span<const double> env_b);
double forward(const ModelState& model, const MatchMismatchExample& ex, Target ordering);

// ---------------------------------------------------------------------------
// Checkpoints: "EEGMMCKP", u32 version, u64 header bytes, JSON header, float32 LE blob.

void save_checkpoint(const std::filesystem::path& path, const ModelState& model);
ModelState load_checkpoint(const std::filesystem::path& path);

} // namespace eegmm
