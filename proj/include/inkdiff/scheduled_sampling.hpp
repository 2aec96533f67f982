#pragma once

// Training latents drawn from the model's own short rollouts: jump to
// y_{t+m} with the forward process, then take m reverse steps with the
// current denoiser, outside gradient tracking.

#include "inkdiff/diffusion.hpp"

namespace inkdiff {

struct ScheduledSamplingConfig {
    bool enabled = false;
    int m = 1;
    double p_start = 0.0;
    double p_end = 0.5;

    void validate() const;
    bool operator==(const ScheduledSamplingConfig&) const = default;
};

/// p_start + (p_end - p_start) * step / total_steps, indexed by optimizer step.
double mix_probability(long step, long total_steps, const ScheduledSamplingConfig& cfg);

enum class Branch { standard, scheduled };

/// Consumes exactly one uniform draw whatever the outcome, so disabling the
/// feature never shifts later draws.
Branch choose_branch(double probability, bool enabled, Stream& rng);
Branch choose_branch(long step, long total_steps, const ScheduledSamplingConfig& cfg, Stream& rng);

/// min(m, T - t)
int effective_depth(int m, int t, int T);

/// y_{t+m'} = forward_sample(y0, t+m', z), then m' reverse steps; the noise
/// of the step leaving y_s comes from rng.derive(s). Costs exactly m'
/// gradient-free model evaluations.
template <class T>
std::vector<T> rollout_sample(std::span<const T> y0, const Shape& shape, int t, int m, std::span<const T> z,
                              EpsModel<T>& model, const TokenIds& tokens, const VarianceSchedule& sched,
                              const SamplerConfig& sampler, const Stream& rng);

}  // namespace inkdiff
