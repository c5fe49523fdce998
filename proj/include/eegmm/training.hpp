#pragma once

// Adam, early stopping with best-weight restoration, and group-frozen fine-tuning.

#include "eegmm/dataset.hpp"
#include "eegmm/models.hpp"

#include <json.hpp>

#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace eegmm {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t max_epochs = 400;
    std::size_t patience = 5;
    std::size_t batch_size = 64; // items; each window contributes both orderings
    std::uint64_t seed = 0;
    double min_delta = 1e-6; // validation loss must drop by at least this much to count

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
/// Missing fields keep their defaults; unknown fields are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// First and second moments for one parameter block.
struct AdamMoments {
    std::vector<double> m;
    std::vector<double> v;
};

/// One bias-corrected Adam update at step t >= 1. Throws TrainingError naming `name` on a
/// non-finite gradient.
void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& moments, std::size_t t,
               const TrainConfig& cfg, const std::string& name = "param");

class AdamOptimizer {
public:
    AdamOptimizer(const ModelState& model, TrainConfig cfg, std::set<ParamGroup> frozen = {});
    void step(ModelState& model, const Gradients<double>& grads);
    [[nodiscard]] std::size_t steps() const { return t_; }

private:
    TrainConfig cfg_;
    std::set<ParamGroup> frozen_;
    std::vector<AdamMoments> moments_;
    std::size_t t_ = 0;
};

/// Patience bookkeeping. Epochs are numbered from 1.
class EarlyStopping {
public:
    EarlyStopping(std::size_t patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

    /// Returns true when `val_loss` is a new best.
    bool update(std::size_t epoch, double val_loss);
    [[nodiscard]] bool should_stop() const { return since_best_ >= patience_; }
    [[nodiscard]] std::size_t best_epoch() const { return best_epoch_; }
    [[nodiscard]] double best_loss() const { return best_loss_; }

private:
    std::size_t patience_;
    double min_delta_;
    std::size_t best_epoch_ = 0;
    double best_loss_ = std::numeric_limits<double>::infinity();
    std::size_t since_best_ = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0; // 0 = initial weights kept
    double best_val_loss = 0.0;
    std::string stop_reason; // "patience", "max_epochs"
};

struct TrainResult {
    ModelState model;
    TrainHistory history;
};

/// Mean BCE over both orderings of every example and the two-ordering decision accuracy.
struct LossAccuracy {
    double loss = 0.0;
    double accuracy = 0.0;
    std::size_t decisions = 0;
};
LossAccuracy loss_and_accuracy(const ModelState& model, std::span<const MatchMismatchExample> examples);

/// Mean BCE and its gradient over the given windows (both orderings each). 64-bit.
double loss_and_gradient(const ModelState& model, std::span<const MatchMismatchExample> examples,
                         Gradients<double>& grads);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains until validation loss stalls for `patience` epochs or `max_epochs` is reached and
/// returns the best-epoch weights. Windows are shuffled per epoch with seed + epoch; both
/// orderings of a window stay in the same batch. Parameters in `frozen` groups are not updated.
/// Throws TrainingError on a non-finite loss.
TrainResult train(const ModelState& initial, std::span<const MatchMismatchExample> train_set,
                  std::span<const MatchMismatchExample> val_set, const TrainConfig& cfg,
                  const std::set<ParamGroup>& frozen = {}, const EpochCallback& on_epoch = {});

struct FinetuneConfig {
    std::set<ParamGroup> frozen;
    std::optional<double> minutes; // training data per subject; all of it when unset
    TrainConfig train;
};

/// Throws ConfigError when every group of the model is frozen or a frozen group does not exist.
TrainResult finetune(const ModelState& pretrained, std::span<const MatchMismatchExample> train_set,
                     std::span<const MatchMismatchExample> val_set, const FinetuneConfig& fcfg);

/// Keeps the leading intervals (in order) up to `max_samples` total, cutting the last one short.
std::vector<Interval> limit_intervals(std::span<const Interval> intervals, std::size_t max_samples);

// ---------------------------------------------------------------------------
// Dataset assembly

/// Train/val/test windows of a set of recordings, each recording split on its own.
struct WindowSets {
    std::vector<MatchMismatchExample> train;
    std::vector<MatchMismatchExample> val;
    std::vector<MatchMismatchExample> test;
};

/// `train_minutes` limits the training windows of each recording to its leading training data.
WindowSets make_window_sets(std::span<const Recording> recordings, std::size_t window,
                            const ExampleOptions& opts = {}, std::optional<double> train_minutes = {});

// ---------------------------------------------------------------------------
// Learning curve

struct LearningCurveRow {
    std::size_t subject_count = 0;
    std::vector<std::string> training_subjects;
    std::map<std::string, double> accuracy; // held-out subject -> accuracy
};

/// For each count, trains a fresh model on the first `count` subjects of a seeded subject order
/// and evaluates it on the held-out recordings.
std::vector<LearningCurveRow> learning_curve(std::span<const Recording> pool, std::span<const Recording> held_out,
                                             std::span<const std::size_t> counts, const ModelSpec& spec,
                                             const TrainConfig& cfg, const ExampleOptions& opts = {});

/// Subject ids in first-appearance order.
std::vector<std::string> subject_ids(std::span<const Recording> recordings);

} // namespace eegmm
