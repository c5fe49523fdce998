#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace eegmm {

/// A named block of values that the loss depends on, with its analytic gradient.
struct GradCheckTarget {
    std::string name;
    std::span<double> values;
    std::span<const double> analytic;
};

struct GradCheckFailure {
    std::string name;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double error = 0.0;
};

struct GradCheckReport {
    bool passed = true;
    double max_error = 0.0;
    std::size_t checked = 0;
    std::vector<GradCheckFailure> failures;

    /// "name[index]" of every failure.
    [[nodiscard]] std::vector<std::string> failing_names() const;
};

/// Central differences on every entry; error = |analytic - numeric| / max(1, |analytic|).
/// Values are perturbed in place and restored. Failures are reported, never thrown.
GradCheckReport grad_check(std::span<const GradCheckTarget> targets, const std::function<double()>& loss,
                           double epsilon = 1e-6, double tolerance = 1e-6);

} // namespace eegmm
