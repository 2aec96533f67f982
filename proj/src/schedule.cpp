#include "inkdiff/schedule.hpp"

#include "inkdiff/error.hpp"

#include <string>

namespace inkdiff {

VarianceSchedule::VarianceSchedule(std::vector<double> betas) {
    if (betas.empty()) throw Error(ErrorCode::InvalidRange, "schedule needs at least one step");
    beta_.reserve(betas.size() + 1);
    alpha_.reserve(betas.size() + 1);
    alpha_bar_.reserve(betas.size() + 1);
    beta_.push_back(0.0);
    alpha_.push_back(1.0);
    alpha_bar_.push_back(1.0);
    for (std::size_t i = 0; i < betas.size(); ++i) {
        const double b = betas[i];
        if (!(b > 0.0 && b < 1.0))
            throw Error(ErrorCode::InvalidRange, "beta_" + std::to_string(i + 1) + " outside (0,1)");
        beta_.push_back(b);
        alpha_.push_back(1.0 - b);
        alpha_bar_.push_back(alpha_bar_.back() * (1.0 - b));
    }
}

double VarianceSchedule::posterior_variance(int t) const {
    if (t < 1 || t > T()) throw Error(ErrorCode::InvalidRange, "posterior variance needs 1 <= t <= T");
    return (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * beta(t);
}

VarianceSchedule linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1 || !(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw Error(ErrorCode::InvalidRange, "linear schedule needs T >= 1 and 0 < start <= end < 1");
    std::vector<double> betas(static_cast<std::size_t>(T));
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
        betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
    }
    return VarianceSchedule(std::move(betas));
}

std::pair<double, double> scale_schedule_for_T(int reference_T, int target_T, double beta_start, double beta_end) {
    if (reference_T < 1 || target_T < 1) throw Error(ErrorCode::InvalidRange, "step counts must be positive");
    const double factor = static_cast<double>(reference_T) / target_T;
    const double start = beta_start * factor;
    const double end = beta_end * factor;
    if (end >= 1.0) throw Error(ErrorCode::InvalidRange, "scaled beta_end reaches 1");
    return {start, end};
}

}  // namespace inkdiff
