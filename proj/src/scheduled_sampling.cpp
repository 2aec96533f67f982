#include "inkdiff/scheduled_sampling.hpp"

#include "inkdiff/error.hpp"

#include <algorithm>

namespace inkdiff {

void ScheduledSamplingConfig::validate() const {
    if (m < 0) throw Error(ErrorCode::ConfigError, "ss.m must be >= 0");
    if (!(0.0 <= p_start && p_start <= p_end && p_end <= 1.0))
        throw Error(ErrorCode::ConfigError, "need 0 <= ss.p_start <= ss.p_end <= 1");
}

double mix_probability(long step, long total_steps, const ScheduledSamplingConfig& cfg) {
    if (step < 0 || total_steps < 0 || step > total_steps)
        throw Error(ErrorCode::InvalidRange, "step outside 0..total_steps");
    if (total_steps == 0) return cfg.p_start;
    return cfg.p_start + (cfg.p_end - cfg.p_start) * static_cast<double>(step) / static_cast<double>(total_steps);
}

Branch choose_branch(double probability, bool enabled, Stream& rng) {
    const double u = rng.uniform();
    return enabled && u < probability ? Branch::scheduled : Branch::standard;
}

Branch choose_branch(long step, long total_steps, const ScheduledSamplingConfig& cfg, Stream& rng) {
    return choose_branch(mix_probability(step, total_steps, cfg), cfg.enabled, rng);
}

int effective_depth(int m, int t, int T) { return std::max(0, std::min(m, T - t)); }

template <class T>
std::vector<T> rollout_sample(std::span<const T> y0, const Shape& shape, int t, int m, std::span<const T> z,
                              EpsModel<T>& model, const TokenIds& tokens, const VarianceSchedule& sched,
                              const SamplerConfig& sampler, const Stream& rng) {
    if (t < 1 || t > sched.T()) throw Error(ErrorCode::InvalidRange, "rollout timestep outside 1..T");
    const int depth = effective_depth(m, t, sched.T());
    std::vector<T> y = forward_sample<T>(y0, t + depth, z, sched);
    for (int s = t + depth; s > t; --s) {
        std::vector<T> eps = model.eval(y, shape, s, tokens);
        Stream step_rng = rng.derive(static_cast<std::uint64_t>(s));
        std::vector<T> noise = step_rng.normal_vector<T>(y.size());
        y = reverse_step<T>(y, s, eps, sched, sampler, noise);
    }
    return y;
}

template std::vector<float> rollout_sample<float>(std::span<const float>, const Shape&, int, int, std::span<const float>,
                                                  EpsModel<float>&, const TokenIds&, const VarianceSchedule&,
                                                  const SamplerConfig&, const Stream&);
template std::vector<double> rollout_sample<double>(std::span<const double>, const Shape&, int, int,
                                                    std::span<const double>, EpsModel<double>&, const TokenIds&,
                                                    const VarianceSchedule&, const SamplerConfig&, const Stream&);

}  // namespace inkdiff
