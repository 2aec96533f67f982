#pragma once

#include <utility>
#include <vector>

namespace inkdiff {

/// Forward-process constants. Arrays are indexed by timestep: beta[t] and
/// alpha[t] for t in 1..T (index 0 unused and set to 0 / 1), alpha_bar[t]
/// for t in 0..T with alpha_bar[0] = 1. Accumulated in double precision.
class VarianceSchedule {
public:
    /// Builds from explicit betas (beta_1..beta_T). Throws InvalidRange
    /// unless every beta lies in (0, 1).
    explicit VarianceSchedule(std::vector<double> betas);

    int T() const { return static_cast<int>(beta_.size()) - 1; }
    double beta(int t) const { return beta_.at(static_cast<std::size_t>(t)); }
    double alpha(int t) const { return alpha_.at(static_cast<std::size_t>(t)); }
    double alpha_bar(int t) const { return alpha_bar_.at(static_cast<std::size_t>(t)); }

    /// beta_1..beta_T, the serialisable form.
    std::vector<double> betas() const { return {beta_.begin() + 1, beta_.end()}; }
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }

    /// Posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t.
    double posterior_variance(int t) const;

    /// True when alpha_bar_T > 1e-2, i.e. the chain does not reach noise.
    bool weak_terminal_noise() const { return alpha_bar_.back() > 1e-2; }

    bool operator==(const VarianceSchedule&) const = default;

private:
    std::vector<double> beta_;
    std::vector<double> alpha_;
    std::vector<double> alpha_bar_;
};

/// Linearly spaced betas, inclusive of both endpoints.
VarianceSchedule linear_schedule(int T, double beta_start, double beta_end);

/// Endpoints multiplied by reference_T / target_T so the total noise
/// injected stays roughly constant when T shrinks.
std::pair<double, double> scale_schedule_for_T(int reference_T, int target_T, double beta_start = 1e-4,
                                               double beta_end = 0.02);

}  // namespace inkdiff
