#include "inkdiff/diffusion.hpp"

#include "inkdiff/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace inkdiff {

namespace {

void check_t(int t, const VarianceSchedule& sched) {
    if (t < 1 || t > sched.T())
        throw Error(ErrorCode::InvalidRange, "timestep " + std::to_string(t) + " outside 1.." + std::to_string(sched.T()));
}

void check_same(std::size_t a, std::size_t b) {
    if (a != b) throw Error(ErrorCode::ShapeMismatch, "latent sizes differ");
}

}  // namespace

std::vector<float> data_to_latent(const ImageBuffer& img) {
    img.validate();
    std::vector<float> out(img.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2.0f * img.pixels[i] - 1.0f;
    return out;
}

ImageBuffer latent_to_data(std::span<const float> latent, int height, int width) {
    if (height < 1 || width < 1 || latent.size() != static_cast<std::size_t>(height) * width)
        throw Error(ErrorCode::ShapeMismatch, "latent does not match " + std::to_string(height) + "x" + std::to_string(width));
    ImageBuffer img(height, width);
    for (std::size_t i = 0; i < latent.size(); ++i) img.pixels[i] = std::clamp((latent[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
    return img;
}

template <class T>
std::vector<T> forward_sample(std::span<const T> y0, int t, std::span<const T> noise, const VarianceSchedule& sched) {
    check_t(t, sched);
    check_same(y0.size(), noise.size());
    const double a = std::sqrt(sched.alpha_bar(t));
    const double b = std::sqrt(1.0 - sched.alpha_bar(t));
    std::vector<T> out(y0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a * y0[i] + b * noise[i]);
    return out;
}

template <class T>
std::vector<T> true_eps(std::span<const T> y0, std::span<const T> y_t, int t, const VarianceSchedule& sched) {
    check_t(t, sched);
    check_same(y0.size(), y_t.size());
    const double a = std::sqrt(sched.alpha_bar(t));
    const double b = std::sqrt(1.0 - sched.alpha_bar(t));
    std::vector<T> out(y0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>((y_t[i] - a * y0[i]) / b);
    return out;
}

template <class T>
std::vector<T> mu_theta(std::span<const T> y_t, std::span<const T> eps_hat, int t, const VarianceSchedule& sched) {
    check_t(t, sched);
    check_same(y_t.size(), eps_hat.size());
    const double inv = 1.0 / std::sqrt(sched.alpha(t));
    const double coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
    std::vector<T> out(y_t.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(inv * (y_t[i] - coef * eps_hat[i]));
    return out;
}

template <class T>
GaussianLatent<T> posterior_q(std::span<const T> y_t, std::span<const T> y0, int t, const VarianceSchedule& sched) {
    check_t(t, sched);
    check_same(y_t.size(), y0.size());
    const double denom = 1.0 - sched.alpha_bar(t);
    const double c0 = std::sqrt(sched.alpha_bar(t - 1)) * sched.beta(t) / denom;
    const double ct = std::sqrt(sched.alpha(t)) * (1.0 - sched.alpha_bar(t - 1)) / denom;
    GaussianLatent<T> g;
    g.mean.resize(y0.size());
    for (std::size_t i = 0; i < y0.size(); ++i) g.mean[i] = static_cast<T>(c0 * y0[i] + ct * y_t[i]);
    g.variance = sched.posterior_variance(t);
    return g;
}

const char* to_string(SigmaMode m) { return m == SigmaMode::beta ? "beta" : "posterior"; }

SigmaMode sigma_mode_from_string(std::string_view name) {
    if (name == "beta") return SigmaMode::beta;
    if (name == "posterior") return SigmaMode::posterior;
    throw Error(ErrorCode::ConfigError, "unknown sigma mode '" + std::string(name) + "'");
}

double reverse_sigma(int t, const VarianceSchedule& sched, SigmaMode mode) {
    check_t(t, sched);
    if (t == 1) return 0.0;
    return std::sqrt(mode == SigmaMode::beta ? sched.beta(t) : sched.posterior_variance(t));
}

template <class T>
std::vector<T> reverse_step(std::span<const T> y_t, int t, std::span<const T> eps_hat, const VarianceSchedule& sched,
                            const SamplerConfig& cfg, std::span<const T> noise) {
    std::vector<T> out = mu_theta(y_t, eps_hat, t, sched);
    const double sigma = reverse_sigma(t, sched, cfg.sigma_mode);
    if (sigma == 0.0) return out;
    check_same(out.size(), noise.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(out[i] + sigma * noise[i]);
    return out;
}

SampleResult sample(const TokenIds& tokens, EpsModel<float>& model, const VarianceSchedule& sched,
                    const SamplerConfig& cfg, int height, int width, const Stream& rng,
                    std::span<const int> snapshot_steps) {
    const int T = sched.T();
    for (int s : snapshot_steps)
        if (s < 0 || s > T) throw Error(ErrorCode::InvalidRange, "snapshot step " + std::to_string(s) + " outside 0..T");
    const std::size_t n = static_cast<std::size_t>(height) * width;
    const Shape shape{1, height, width};
    SampleResult res;
    Stream prior = rng.derive(0);
    std::vector<float> y = prior.normal_vector<float>(n);
    auto snap = [&](int step) {
        for (int s : snapshot_steps)
            if (s == step) {
                res.snapshots.push_back({step, latent_to_data(y, height, width)});
                break;
            }
    };
    snap(0);
    for (int t = T; t >= 1; --t) {
        std::vector<float> eps = model.eval(y, shape, t, tokens);
        std::vector<float> noise;
        if (reverse_sigma(t, sched, cfg.sigma_mode) > 0.0) {
            Stream step_rng = rng.derive(static_cast<std::uint64_t>(t));
            noise = step_rng.normal_vector<float>(n);
        }
        y = reverse_step<float>(y, t, eps, sched, cfg, noise);
        snap(T - t + 1);
    }
    if (cfg.clamp_final)
        for (auto& v : y) v = std::clamp(v, -1.0f, 1.0f);
    res.image = latent_to_data(y, height, width);
    res.latent = std::move(y);
    return res;
}

double gaussian_kl(double m1, double v1, double m2, double v2) {
    if (!(v1 > 0.0) || !(v2 > 0.0)) throw Error(ErrorCode::InvalidRange, "Gaussian KL needs positive variances");
    return 0.5 * (std::log(v2 / v1) + (v1 + (m1 - m2) * (m1 - m2)) / v2 - 1.0);
}

double ElboReport::total() const {
    double s = reconstruction;
    for (std::size_t t = 2; t < kl.size(); ++t) s += kl[t];
    return s;
}

template <class T>
ElboReport elbo_diagnostic(std::span<const T> y0, const Shape& shape, const TokenIds& tokens, EpsModel<T>& model,
                           const VarianceSchedule& sched, SigmaMode mode, int samples_per_t, const Stream& rng) {
    if (samples_per_t < 1) throw Error(ErrorCode::InvalidRange, "need at least one sample per timestep");
    const int steps = sched.T();
    const std::size_t n = y0.size();
    if (numel(shape) != n) throw Error(ErrorCode::ShapeMismatch, "latent does not match " + shape_str(shape));
    ElboReport rep;
    rep.kl.assign(static_cast<std::size_t>(steps) + 1, 0.0);
    for (int t = 1; t <= steps; ++t) {
        double acc = 0.0;
        for (int s = 0; s < samples_per_t; ++s) {
            Stream r = rng.derive({static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(s)});
            std::vector<T> z = r.normal_vector<T>(n);
            std::vector<T> y_t = forward_sample<T>(y0, t, z, sched);
            std::vector<T> eps = model.eval(y_t, shape, t, tokens);
            std::vector<T> mu = mu_theta<T>(y_t, eps, t, sched);
            if (t == 1) {
                const double var = sched.beta(1);
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = static_cast<double>(y0[i]) - mu[i];
                    acc += 0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
                }
            } else {
                GaussianLatent<T> q = posterior_q<T>(y_t, y0, t, sched);
                const double sigma = reverse_sigma(t, sched, mode);
                for (std::size_t i = 0; i < n; ++i) acc += gaussian_kl(q.mean[i], q.variance, mu[i], sigma * sigma);
            }
        }
        acc /= samples_per_t;
        if (t == 1)
            rep.reconstruction = acc;
        else
            rep.kl[static_cast<std::size_t>(t)] = acc;
    }
    return rep;
}

#define INKDIFF_INSTANTIATE(T)                                                                                      \
    template std::vector<T> forward_sample<T>(std::span<const T>, int, std::span<const T>, const VarianceSchedule&); \
    template std::vector<T> true_eps<T>(std::span<const T>, std::span<const T>, int, const VarianceSchedule&);       \
    template std::vector<T> mu_theta<T>(std::span<const T>, std::span<const T>, int, const VarianceSchedule&);       \
    template GaussianLatent<T> posterior_q<T>(std::span<const T>, std::span<const T>, int, const VarianceSchedule&); \
    template std::vector<T> reverse_step<T>(std::span<const T>, int, std::span<const T>, const VarianceSchedule&,    \
                                            const SamplerConfig&, std::span<const T>);                               \
    template ElboReport elbo_diagnostic<T>(std::span<const T>, const Shape&, const TokenIds&, EpsModel<T>&,                        \
                                           const VarianceSchedule&, SigmaMode, int, const Stream&);

INKDIFF_INSTANTIATE(float)
INKDIFF_INSTANTIATE(double)

#undef INKDIFF_INSTANTIATE

}  // namespace inkdiff
