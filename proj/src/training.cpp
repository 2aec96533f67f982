#include "inkdiff/training.hpp"

#include "inkdiff/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace inkdiff {

template <class T>
LossResult<T> training_loss(std::span<const TrainingExample<T>> batch, EpsModel<T>& model, const Shape& shape,
                            const VarianceSchedule& sched, const LossOptions& opts, const Stream& step_rng,
                            const std::vector<std::vector<T>>* injected_y_t) {
    if (batch.empty()) throw Error(ErrorCode::InvalidRange, "empty batch");
    if (injected_y_t && injected_y_t->size() != batch.size())
        throw Error(ErrorCode::ShapeMismatch, "injected latents do not match the batch");
    const std::size_t n = numel(shape);
    const T seed = T(1) / static_cast<T>(batch.size());
    LossResult<T> res;
    res.per_example.resize(batch.size());
    res.timesteps.resize(batch.size());
    res.branches.resize(batch.size());
    res.y_t.resize(batch.size());
    // Visit examples by corpus index so the loss and the gradient sums do not
    // depend on the order of the batch.
    std::vector<std::size_t> order(batch.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return batch[a].index < batch[b].index; });
    double total = 0.0;
    for (const std::size_t i : order) {
        const auto& ex = batch[i];
        if (ex.y0.size() != n || !ex.tokens) throw Error(ErrorCode::ShapeMismatch, "malformed training example", i);
        Stream rng = step_rng.derive(ex.index);
        const int t = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(sched.T())));
        const Branch br = choose_branch(opts.mix_probability, opts.ss.enabled, rng);
        std::vector<T> z = rng.normal_vector<T>(n);

        std::vector<T> y_t;
        if (injected_y_t) {
            y_t = (*injected_y_t)[i];
            if (y_t.size() != n) throw Error(ErrorCode::ShapeMismatch, "injected latent has the wrong size", i);
        } else if (br == Branch::scheduled) {
            y_t = rollout_sample<T>(ex.y0, shape, t, opts.ss.m, z, model, *ex.tokens, sched, opts.rollout,
                                    rng.derive(tag("rollout")));
        } else {
            y_t = forward_sample<T>(ex.y0, t, z, sched);
        }
        const std::vector<T> target = true_eps<T>(ex.y0, y_t, t, sched);

        Tape<T> tape(opts.backward);
        Var y = tape.constant(shape, y_t);
        Var eps_hat = model.forward(tape, y, t, *ex.tokens);
        Var loss = ad::mse(tape, eps_hat, std::span<const T>(target));
        const double value = static_cast<double>(tape.value(loss)[0]);
        if (!std::isfinite(value))
            throw Error(ErrorCode::NumericalDivergence,
                        "non-finite loss for example " + std::to_string(ex.index), static_cast<std::size_t>(ex.index));
        if (opts.backward && tape.needs_grad(loss)) tape.backward(loss, seed);

        total += value;
        res.per_example[i] = value;
        res.timesteps[i] = t;
        res.branches[i] = br;
        res.y_t[i] = std::move(y_t);
    }
    res.loss = total / static_cast<double>(batch.size());
    return res;
}

template LossResult<float> training_loss<float>(std::span<const TrainingExample<float>>, EpsModel<float>&,
                                                const Shape&, const VarianceSchedule&, const LossOptions&,
                                                const Stream&, const std::vector<std::vector<float>>*);
template LossResult<double> training_loss<double>(std::span<const TrainingExample<double>>, EpsModel<double>&,
                                                  const Shape&, const VarianceSchedule&, const LossOptions&,
                                                  const Stream&, const std::vector<std::vector<double>>*);

}  // namespace inkdiff
