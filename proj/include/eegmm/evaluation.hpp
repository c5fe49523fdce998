#pragma once

// Accuracy aggregation, per-SNR evaluation, psychometric fitting and the paired/correlation statistics.

#include "eegmm/dataset.hpp"
#include "eegmm/models.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace eegmm {

class FitError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Accuracy

struct RecordingAccuracy {
    std::string subject_id;
    std::string stimulus_id;
    std::size_t correct = 0;
    std::size_t total = 0;
    [[nodiscard]] double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

struct AccuracyReport {
    std::vector<RecordingAccuracy> recordings; // first-appearance order
    std::map<std::string, double> subject_mean; // unweighted over the subject's recordings
    std::size_t correct = 0;
    std::size_t total = 0;
    [[nodiscard]] double overall() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
    /// Median of the per-subject means.
    [[nodiscard]] double median_subject() const;
};

/// Fills subject means and totals from per-recording counts.
AccuracyReport summarize(std::vector<RecordingAccuracy> recordings);

/// p(slot A holds the match) for an example presented in the given ordering.
using Predictor = std::function<double(const MatchMismatchExample&, Target)>;

/// Scores both orderings of every example; a decision is correct when p > 0.5 for a slot-A match
/// or p < 0.5 for a slot-B match, so p = 0.5 is always wrong.
AccuracyReport evaluate(std::span<const MatchMismatchExample> examples, const Predictor& predict);
AccuracyReport evaluate(const ModelState& model, std::span<const MatchMismatchExample> examples);

// ---------------------------------------------------------------------------
// Per-SNR evaluation

/// snr_db metadata value of a recording; nullopt for "none" (no noise). Throws when missing or unparsable.
std::optional<double> recording_snr(const Recording& rec);

struct SnrAccuracy {
    std::string subject_id;
    std::optional<double> snr_db; // nullopt = no-noise condition
    double accuracy = 0.0;
    std::size_t decisions = 0;
    bool exclude_from_fit = false; // set for the no-noise condition
};

/// Accuracy per (subject, SNR) over whole recordings at the model's window length. Conditions with no
/// usable window are skipped and reported in `warnings`.
std::vector<SnrAccuracy> evaluate_per_snr(const ModelState& model, std::span<const Recording> recordings,
                                          const ExampleOptions& opts = {},
                                          std::vector<std::string>* warnings = nullptr);

/// The acoustic SNR grid of the speech-in-noise conditions, in dB; the no-noise condition is separate.
std::vector<double> snr_grid();

// ---------------------------------------------------------------------------
// Psychometric curve

struct PsychometricPoint {
    double snr_db = 0.0;
    double accuracy = 0.0;
};

struct PsychometricFit {
    double alpha = 0.0; // midpoint, dB
    double beta = 1.0;  // slope parameter, dB
    double gamma = 0.5;
    double lambda = 0.0;
    double residual = 0.0; // sum of squared residuals
    std::size_t iterations = 0;
    bool converged = false;
    bool at_boundary = false;
};

inline constexpr double kBetaMin = 0.05;
inline constexpr double kBetaMax = 50.0;
inline constexpr double kBoundaryTolerance = 1e-6;

/// gamma + (1 - gamma - lambda) / (1 + exp(-(snr - alpha) / beta))
double psychometric(double snr_db, double alpha, double beta, double gamma = 0.5, double lambda = 0.0);

/// Levenberg-Marquardt over (alpha, beta) with gamma = 0.5, lambda = 0, beta kept in [0.05, 50] and alpha
/// within the tested SNR span widened by one span each side, best of a 3x3 grid of starts. at_boundary is
/// set when either parameter ends on a bound; a curve flat on an asymptote over the data reports the
/// lower slope bound. Throws FitError with fewer than 3 points or a non-finite input.
PsychometricFit fit_psychometric(std::span<const PsychometricPoint> points);

/// alpha, or nullopt when the fit did not converge or touched a slope bound.
std::optional<double> estimate_srt(const PsychometricFit& fit);

// ---------------------------------------------------------------------------
// Statistics

struct CorrelationResult {
    double r = 0.0;
    std::size_t n = 0;
    double p = 1.0; // two-sided
    std::vector<std::string> excluded;
};

/// Two-sided p of a Pearson r from n pairs via the t distribution with n - 2 degrees of freedom.
double pearson_p_value(double r, std::size_t n);

/// Throws ConfigError for n < 3, unequal lengths or a zero-variance argument.
CorrelationResult pearson_with_p(std::span<const double> x, std::span<const double> y);

struct WilcoxonResult {
    double statistic = 0.0; // min(W+, W-)
    double w_plus = 0.0;
    double w_minus = 0.0;
    std::size_t n = 0; // pairs with a nonzero difference
    double p = 1.0;    // two-sided
    bool exact = false;
};

/// Signed-rank test on b - a with zero differences dropped and average ranks for ties. Exact null
/// distribution for n <= 25, normal approximation with tie correction above. Throws ConfigError when
/// every difference is zero or the lengths differ.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

// ---------------------------------------------------------------------------
// CSV tables

/// subject_id,stimulus_id,correct,total,accuracy
void write_accuracy_csv(const std::filesystem::path& path, const AccuracyReport& report);
/// subject_id,mean_accuracy
void write_subject_csv(const std::filesystem::path& path, const AccuracyReport& report);
/// subject_id,snr_db,accuracy,decisions,exclude_from_fit  (snr_db "none" for no noise)
void write_snr_csv(const std::filesystem::path& path, std::span<const SnrAccuracy> rows);
std::vector<SnrAccuracy> read_snr_csv(const std::filesystem::path& path);

struct SubjectFit {
    std::string subject_id;
    PsychometricFit fit;
};
/// subject_id,alpha,beta,gamma,lambda,residual,converged,at_boundary
void write_fit_csv(const std::filesystem::path& path, std::span<const SubjectFit> fits);
std::vector<SubjectFit> read_fit_csv(const std::filesystem::path& path);

/// Fits every subject's per-SNR accuracies, skipping rows flagged for exclusion.
std::vector<SubjectFit> fit_subjects(std::span<const SnrAccuracy> rows);

/// Correlates fitted midpoints with behavioral SRTs over the subjects present in both tables whose
/// fit is usable; unusable fits are listed in `excluded`.
CorrelationResult correlate_srt(std::span<const SubjectFit> fits, const std::map<std::string, double>& behavioral);

} // namespace eegmm
