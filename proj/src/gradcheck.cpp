#include "eegmm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace eegmm {

std::vector<std::string> GradCheckReport::failing_names() const
{
    std::vector<std::string> out;
    for (const auto& f : failures) {
        out.push_back(f.name + "[" + std::to_string(f.index) + "]");
    }
    return out;
}

GradCheckReport grad_check(std::span<const GradCheckTarget> targets, const std::function<double()>& loss,
                           double epsilon, double tolerance)
{
    GradCheckReport report;
    for (const auto& t : targets) {
        if (t.values.size() != t.analytic.size()) {
            throw std::invalid_argument("grad_check: gradient size mismatch for " + t.name);
        }
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            const double orig = t.values[i];
            t.values[i] = orig + epsilon;
            const double up = loss();
            t.values[i] = orig - epsilon;
            const double down = loss();
            t.values[i] = orig;
            const double numeric = (up - down) / (2.0 * epsilon);
            const double err = std::abs(t.analytic[i] - numeric) / std::max(1.0, std::abs(t.analytic[i]));
            report.max_error = std::max(report.max_error, err);
            ++report.checked;
            if (!(err <= tolerance)) {
                report.passed = false;
                report.failures.push_back({t.name, i, t.analytic[i], numeric, err});
            }
        }
    }
    return report;
}

} // namespace eegmm
