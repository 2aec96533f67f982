#pragma once

// Forward noising, the eps-parameterised reverse step, ancestral sampling and
// the ELBO diagnostic. Latents are flat row-major arrays of H*W values with
// data mapped to [-1, 1]; the model sees them as [1, H, W].

#include "inkdiff/denoiser.hpp"
#include "inkdiff/image.hpp"
#include "inkdiff/markup.hpp"
#include "inkdiff/rng.hpp"
#include "inkdiff/schedule.hpp"

#include <span>
#include <vector>

namespace inkdiff {

std::vector<float> data_to_latent(const ImageBuffer& img);
/// Inverse affine map, clamped to [0, 1].
ImageBuffer latent_to_data(std::span<const float> latent, int height, int width);

/// sqrt(abar_t) y0 + sqrt(1 - abar_t) noise
template <class T>
std::vector<T> forward_sample(std::span<const T> y0, int t, std::span<const T> noise, const VarianceSchedule& sched);

/// (y_t - sqrt(abar_t) y0) / sqrt(1 - abar_t): the noise that produced y_t.
template <class T>
std::vector<T> true_eps(std::span<const T> y0, std::span<const T> y_t, int t, const VarianceSchedule& sched);

/// (1/sqrt(alpha_t)) (y_t - beta_t / sqrt(1 - abar_t) eps_hat)
template <class T>
std::vector<T> mu_theta(std::span<const T> y_t, std::span<const T> eps_hat, int t, const VarianceSchedule& sched);

template <class T>
struct GaussianLatent {
    std::vector<T> mean;
    double variance = 0.0;  // isotropic
};

/// Q(y_{t-1} | y_t, y0).
template <class T>
GaussianLatent<T> posterior_q(std::span<const T> y_t, std::span<const T> y0, int t, const VarianceSchedule& sched);

enum class SigmaMode { beta, posterior };

const char* to_string(SigmaMode m);
SigmaMode sigma_mode_from_string(std::string_view name);

struct SamplerConfig {
    SigmaMode sigma_mode = SigmaMode::beta;
    bool clamp_final = true;  // clamp the returned latent to [-1, 1]
    std::uint64_t seed = 0;
};

/// Reverse-step standard deviation; zero at t = 1.
double reverse_sigma(int t, const VarianceSchedule& sched, SigmaMode mode);

/// mu_theta + sigma_t noise.
template <class T>
std::vector<T> reverse_step(std::span<const T> y_t, int t, std::span<const T> eps_hat, const VarianceSchedule& sched,
                            const SamplerConfig& cfg, std::span<const T> noise);

struct Snapshot {
    int step;  // reverse steps taken, T - t
    ImageBuffer image;
};

struct SampleResult {
    ImageBuffer image;
    std::vector<float> latent;  // y_0
    std::vector<Snapshot> snapshots;
};

/// Ancestral sampling from y_T ~ N(0, I). y_T is drawn from rng.derive(0)
/// and the noise of the step leaving y_t from rng.derive(t). Snapshots are
/// taken after `step` reverse steps for each requested step in [0, T].
SampleResult sample(const TokenIds& tokens, EpsModel<float>& model, const VarianceSchedule& sched,
                    const SamplerConfig& cfg, int height, int width, const Stream& rng,
                    std::span<const int> snapshot_steps = {});

/// Predicts the exact noise for one memorised clean latent. Useful as an
/// ideal denoiser.
template <class T>
class NoiseOracle : public EpsModel<T> {
public:
    NoiseOracle(std::vector<T> y0, const VarianceSchedule& sched) : y0_(std::move(y0)), sched_(sched) {}

protected:
    Var predict(Tape<T>& tape, Var y_t, int t, const TokenIds&) override {
        return tape.constant(tape.shape(y_t), true_eps<T>(y0_, tape.value(y_t), t, sched_));
    }

private:
    std::vector<T> y0_;
    const VarianceSchedule& sched_;
};

/// KL(N(m1, v1) || N(m2, v2)) for scalars.
double gaussian_kl(double m1, double v1, double m2, double v2);

struct ElboReport {
    std::vector<double> kl;  // kl[t] for t = 2..T, summed over pixels; kl[0], kl[1] unused
    double reconstruction = 0.0;  // -log N(y0; mu_theta(y_1), beta_1 I) at t = 1
    double total() const;
};

/// Monte-Carlo estimate over `samples_per_t` draws of y_t ~ Q(y_t | y0).
/// `shape` is what the model expects, usually [1, H, W].
template <class T>
ElboReport elbo_diagnostic(std::span<const T> y0, const Shape& shape, const TokenIds& tokens, EpsModel<T>& model,
                           const VarianceSchedule& sched, SigmaMode mode, int samples_per_t, const Stream& rng);

}  // namespace inkdiff
