#pragma once

// The noise-regression training objective with optional scheduled sampling.

#include "inkdiff/scheduled_sampling.hpp"

#include <optional>

namespace inkdiff {

template <class T>
struct TrainingExample {
    std::span<const T> y0;
    const TokenIds* tokens = nullptr;
    std::uint64_t index = 0;  // corpus index; keys the example's random stream
};

struct LossOptions {
    ScheduledSamplingConfig ss;
    double mix_probability = 0.0;
    SamplerConfig rollout;  // sigma mode of the rollout's reverse steps
    bool backward = true;   // accumulate parameter gradients
};

template <class T>
struct LossResult {
    double loss = 0.0;  // mean over the batch of per-example MSE
    std::vector<double> per_example;
    std::vector<int> timesteps;
    std::vector<Branch> branches;
    std::vector<std::vector<T>> y_t;  // realised model inputs
};

/// Example i draws from step_rng.derive(index_i), in order: t = 1 +
/// uniform_int(T), the branch uniform, the forward noise z, and (scheduled
/// branch only) the rollout noise from a "rollout" child stream. The target
/// is recomputed from the realised y_t. Gradients, scaled by 1/B, are added
/// to the model parameters' grad buffers in corpus-index order.
///
/// With `injected_y_t`, the same draws are made but example i uses
/// (*injected_y_t)[i] as its y_t and no rollout is run.
template <class T>
LossResult<T> training_loss(std::span<const TrainingExample<T>> batch, EpsModel<T>& model, const Shape& shape,
                            const VarianceSchedule& sched, const LossOptions& opts, const Stream& step_rng,
                            const std::vector<std::vector<T>>* injected_y_t = nullptr);

}  // namespace inkdiff
