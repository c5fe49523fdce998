#include "eegmm/training.hpp"

#include "eegmm/evaluation.hpp"

#include <algorithm>
#include <cmath>

namespace eegmm {

void TrainConfig::validate() const
{
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw ConfigError(std::string("train.") + name + " must be a positive number");
        }
    };
    positive(learning_rate, "learning_rate");
    positive(epsilon, "epsilon");
    if (!(beta1 > 0.0 && beta1 < 1.0)) {
        throw ConfigError("train.beta1 must lie in (0, 1)");
    }
    if (!(beta2 > 0.0 && beta2 < 1.0)) {
        throw ConfigError("train.beta2 must lie in (0, 1)");
    }
    if (batch_size < 1) {
        throw ConfigError("train.batch_size must be >= 1");
    }
    if (patience < 1) {
        throw ConfigError("train.patience must be >= 1");
    }
    if (max_epochs > 0 && patience > max_epochs) {
        throw ConfigError("train.patience must not exceed train.max_epochs");
    }
    if (!(min_delta >= 0.0)) {
        throw ConfigError("train.min_delta must be >= 0");
    }
}

nlohmann::json train_config_to_json(const TrainConfig& c)
{
    return {{"learning_rate", c.learning_rate}, {"beta1", c.beta1},         {"beta2", c.beta2},
            {"epsilon", c.epsilon},             {"max_epochs", c.max_epochs}, {"patience", c.patience},
            {"batch_size", c.batch_size},       {"seed", c.seed},           {"min_delta", c.min_delta}};
}

TrainConfig train_config_from_json(const nlohmann::json& j)
{
    if (!j.is_object()) {
        throw ConfigError("train must be an object");
    }
    TrainConfig c;
    for (const auto& [key, value] : j.items()) {
        auto number = [&, k = key]() {
            if (!value.is_number()) {
                throw ConfigError("train." + k + " must be a number");
            }
            return value.get<double>();
        };
        auto count = [&, k = key]() {
            if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<long long>() >= 0)) {
                throw ConfigError("train." + k + " must be a non-negative integer");
            }
            return value.get<std::uint64_t>();
        };
        if (key == "learning_rate") {
            c.learning_rate = number();
        } else if (key == "beta1") {
            c.beta1 = number();
        } else if (key == "beta2") {
            c.beta2 = number();
        } else if (key == "epsilon") {
            c.epsilon = number();
        } else if (key == "min_delta") {
            c.min_delta = number();
        } else if (key == "max_epochs") {
            c.max_epochs = count();
        } else if (key == "patience") {
            c.patience = count();
        } else if (key == "batch_size") {
            c.batch_size = count();
        } else if (key == "seed") {
            c.seed = count();
        } else {
            throw ConfigError("train." + key + " is not a known field");
        }
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& mo, std::size_t t,
               const TrainConfig& cfg, const std::string& name)
{
    if (t < 1) {
        throw ConfigError("adam_step: t must be >= 1");
    }
    if (grads.size() != params.size()) {
        throw DimensionError("adam_step: " + name + " has " + std::to_string(params.size()) + " values but " +
                             std::to_string(grads.size()) + " gradients");
    }
    mo.m.resize(params.size(), 0.0);
    mo.v.resize(params.size(), 0.0);
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(grads[i])) {
            throw TrainingError("non-finite gradient in " + name + "[" + std::to_string(i) + "]");
        }
    }
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
        mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mh = mo.m[i] / c1;
        const double vh = mo.v[i] / c2;
        params[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
    }
}

AdamOptimizer::AdamOptimizer(const ModelState& model, TrainConfig cfg, std::set<ParamGroup> frozen)
    : cfg_(cfg), frozen_(std::move(frozen)), moments_(model.params.size())
{
}

void AdamOptimizer::step(ModelState& model, const Gradients<double>& grads)
{
    ++t_;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        auto& p = model.params[i];
        if (frozen_.count(p.group) != 0) {
            continue;
        }
        adam_step(p.values, grads[i], moments_[i], t_, cfg_, p.name);
    }
}

// ---------------------------------------------------------------------------
// Early stopping

bool EarlyStopping::update(std::size_t epoch, double val_loss)
{
    if (val_loss <= best_loss_ - min_delta_ || (std::isinf(best_loss_) && std::isfinite(val_loss))) {
        best_loss_ = val_loss;
        best_epoch_ = epoch;
        since_best_ = 0;
        return true;
    }
    ++since_best_;
    return false;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

struct PairLoss {
    double loss = 0.0; // summed over both orderings
    double g_ab = 0.0;
    double g_ba = 0.0;
};

// Slot A holds the match in ordering ab (target 1) and the imposter in ordering ba (target 0).
PairLoss pair_loss(double ab, double ba)
{
    const auto first = bce_with_logit(ab, 1.0);
    const auto second = bce_with_logit(ba, 0.0);
    return {first.loss + second.loss, first.dlogit, second.dlogit};
}

} // namespace

LossAccuracy loss_and_accuracy(const ModelState& model, std::span<const MatchMismatchExample> examples)
{
    LossAccuracy out;
    if (examples.empty()) {
        return out;
    }
    Network<float> net(model);
    double loss = 0.0;
    std::size_t correct = 0;
    for (const auto& ex : examples) {
        const auto l = net.forward(ex);
        loss += pair_loss(l.ab, l.ba).loss;
        correct += (sigmoid(l.ab) > 0.5 ? 1 : 0) + (sigmoid(l.ba) < 0.5 ? 1 : 0);
    }
    out.decisions = 2 * examples.size();
    out.loss = loss / static_cast<double>(out.decisions);
    out.accuracy = static_cast<double>(correct) / static_cast<double>(out.decisions);
    return out;
}

double loss_and_gradient(const ModelState& model, std::span<const MatchMismatchExample> examples,
                         Gradients<double>& grads)
{
    if (examples.empty()) {
        return 0.0;
    }
    Network<double> net(model);
    const double n = 2.0 * static_cast<double>(examples.size());
    double loss = 0.0;
    for (const auto& ex : examples) {
        const auto l = net.forward(ex);
        const auto pl = pair_loss(l.ab, l.ba);
        loss += pl.loss;
        net.backward(pl.g_ab / n, pl.g_ba / n, grads);
    }
    return loss / n;
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(const ModelState& initial, std::span<const MatchMismatchExample> train_set,
                  std::span<const MatchMismatchExample> val_set, const TrainConfig& cfg,
                  const std::set<ParamGroup>& frozen, const EpochCallback& on_epoch)
{
    cfg.validate();
    if (train_set.empty() || val_set.empty()) {
        throw ConfigError("training needs nonempty train and validation sets (got " +
                          std::to_string(train_set.size()) + " and " + std::to_string(val_set.size()) +
                          " windows)");
    }
    TrainResult result{initial, {}};
    ModelState model = initial;
    ModelState best = initial;
    AdamOptimizer opt(model, cfg, frozen);
    EarlyStopping stopper(cfg.patience, cfg.min_delta);
    Network<float> net(model);

    {
        const auto tr = loss_and_accuracy(model, train_set);
        const auto va = loss_and_accuracy(model, val_set);
        if (!std::isfinite(tr.loss) || !std::isfinite(va.loss)) {
            throw TrainingError("non-finite loss at epoch 0");
        }
        stopper.update(0, va.loss);
        const EpochRecord rec{0, tr.loss, va.loss, va.accuracy};
        result.history.epochs.push_back(rec);
        if (on_epoch) {
            on_epoch(rec);
        }
    }

    const std::size_t windows_per_batch = (cfg.batch_size + 1) / 2;
    Gradients<float> gf = zero_gradients<float>(model);
    Gradients<double> gd = zero_gradients<double>(model);
    result.history.stop_reason = "max_epochs";

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto batches = batch_iterator(train_set.size(), windows_per_batch, cfg.seed + epoch);
        double epoch_loss = 0.0;
        std::size_t items = 0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            for (auto& g : gf) {
                std::fill(g.begin(), g.end(), 0.0f);
            }
            const double n = 2.0 * static_cast<double>(batches[b].size());
            double batch_loss = 0.0;
            for (const std::size_t idx : batches[b]) {
                const auto l = net.forward(train_set[idx]);
                const auto pl = pair_loss(l.ab, l.ba);
                batch_loss += pl.loss;
                net.backward(pl.g_ab / n, pl.g_ba / n, gf);
            }
            if (!std::isfinite(batch_loss)) {
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                    std::to_string(b));
            }
            epoch_loss += batch_loss;
            items += batches[b].size() * 2;
            for (std::size_t i = 0; i < gf.size(); ++i) {
                std::copy(gf[i].begin(), gf[i].end(), gd[i].begin());
            }
            opt.step(model, gd);
            net.refresh(model);
        }
        const auto va = loss_and_accuracy(model, val_set);
        if (!std::isfinite(va.loss)) {
            throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
        }
        const EpochRecord rec{epoch, epoch_loss / static_cast<double>(items), va.loss, va.accuracy};
        result.history.epochs.push_back(rec);
        if (stopper.update(epoch, va.loss)) {
            best = model;
        }
        if (on_epoch) {
            on_epoch(rec);
        }
        if (stopper.should_stop()) {
            result.history.stop_reason = "patience";
            break;
        }
    }
    result.history.best_epoch = stopper.best_epoch();
    result.history.best_val_loss = stopper.best_loss();
    result.model = std::move(best);
    return result;
}

TrainResult finetune(const ModelState& pretrained, std::span<const MatchMismatchExample> train_set,
                     std::span<const MatchMismatchExample> val_set, const FinetuneConfig& fcfg)
{
    const auto groups = parameter_groups(pretrained);
    for (const auto g : fcfg.frozen) {
        if (groups.count(g) == 0) {
            throw ConfigError(std::string("frozen group ") + group_name(g) + " does not exist in this model");
        }
    }
    if (fcfg.frozen.size() >= groups.size()) {
        throw ConfigError("every parameter group is frozen; nothing to fine-tune");
    }
    return train(pretrained, train_set, val_set, fcfg.train, fcfg.frozen);
}

std::vector<Interval> limit_intervals(std::span<const Interval> intervals, std::size_t max_samples)
{
    std::vector<Interval> out;
    std::size_t left = max_samples;
    for (const auto& iv : intervals) {
        if (left == 0) {
            break;
        }
        const std::size_t take = std::min(left, iv.size());
        out.push_back({iv.begin, iv.begin + take});
        left -= take;
    }
    return out;
}

WindowSets make_window_sets(std::span<const Recording> recordings, std::size_t window, const ExampleOptions& opts,
                            std::optional<double> train_minutes)
{
    WindowSets out;
    for (std::size_t r = 0; r < recordings.size(); ++r) {
        const auto& rec = recordings[r];
        auto split = split_recording(rec, window);
        const auto add = [&](std::vector<MatchMismatchExample>& dst, Part part) {
            const auto ex = build_examples(rec, split, part, window, opts, r);
            dst.insert(dst.end(), ex.begin(), ex.end());
        };
        add(out.val, Part::val);
        add(out.test, Part::test);
        if (train_minutes) {
            if (!(*train_minutes >= 0.0)) {
                throw ConfigError("training minutes must be >= 0");
            }
            const auto samples = static_cast<std::size_t>(std::llround(*train_minutes * 60.0 * rec.rate()));
            split.train = limit_intervals(split.train, samples);
        }
        add(out.train, Part::train);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Learning curve

std::vector<std::string> subject_ids(std::span<const Recording> recordings)
{
    std::vector<std::string> ids;
    for (const auto& r : recordings) {
        if (std::find(ids.begin(), ids.end(), r.subject_id) == ids.end()) {
            ids.push_back(r.subject_id);
        }
    }
    return ids;
}

std::vector<LearningCurveRow> learning_curve(std::span<const Recording> pool, std::span<const Recording> held_out,
                                             std::span<const std::size_t> counts, const ModelSpec& spec,
                                             const TrainConfig& cfg, const ExampleOptions& opts)
{
    const auto ids = subject_ids(pool);
    for (const auto c : counts) {
        if (c < 1 || c > ids.size()) {
            throw ConfigError("subject count " + std::to_string(c) + " outside 1.." + std::to_string(ids.size()));
        }
    }
    const auto order = seeded_permutation(ids.size(), cfg.seed);
    const std::size_t window = std::visit([](const auto& s) { return s.window; }, spec);
    const auto held = make_window_sets(held_out, window, opts);

    std::vector<LearningCurveRow> rows;
    for (const auto count : counts) {
        LearningCurveRow row;
        row.subject_count = count;
        for (std::size_t i = 0; i < count; ++i) {
            row.training_subjects.push_back(ids[order[i]]);
        }
        std::vector<Recording> chosen;
        for (const auto& r : pool) {
            if (std::find(row.training_subjects.begin(), row.training_subjects.end(), r.subject_id) !=
                row.training_subjects.end()) {
                chosen.push_back(r);
            }
        }
        const auto sets = make_window_sets(chosen, window, opts);
        const auto trained = train(build_model(spec, cfg.seed), sets.train, sets.val, cfg);
        const auto report = evaluate(trained.model, held.test);
        row.accuracy = report.subject_mean;
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace eegmm
