#pragma once

// The noise-prediction network eps(y_t, t, tokens) and its optimizer.

#include "inkdiff/autodiff.hpp"
#include "inkdiff/markup.hpp"
#include "inkdiff/rng.hpp"

#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace inkdiff {

enum class ConditioningMode { pooled, cross_attn, cross_attn_pos };

const char* to_string(ConditioningMode m);
ConditioningMode conditioning_from_string(std::string_view name);

/// Anything that predicts the noise in a latent. Latents are [1, H, W].
template <class T>
class EpsModel {
public:
    virtual ~EpsModel() = default;

    /// Records the prediction on `tape`. Every call counts as one evaluation.
    Var forward(Tape<T>& tape, Var y_t, int t, const TokenIds& tokens) {
        ++evaluations_;
        return predict(tape, y_t, t, tokens);
    }

    /// Gradient-free prediction.
    std::vector<T> eval(std::span<const T> y_t, const Shape& shape, int t, const TokenIds& tokens);

    long evaluations() const { return evaluations_; }
    void reset_evaluations() { evaluations_ = 0; }

protected:
    virtual Var predict(Tape<T>& tape, Var y_t, int t, const TokenIds& tokens) = 0;

private:
    long evaluations_ = 0;
};

struct DenoiserConfig {
    int height = 32;
    int width = 96;
    int channels = 32;   // base width c; levels use c, 2c, 4c
    int embed_dim = 64;  // token embedding width
    int time_dim = 64;   // sinusoidal feature count (even)
    int vocab = 0;       // 0 = markup vocabulary size
    int max_len = 48;
    ConditioningMode mode = ConditioningMode::cross_attn_pos;

    void validate() const;
    bool operator==(const DenoiserConfig&) const = default;
};

template <class T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
    bool decay = false;  // receives weight decay
};

/// Sinusoidal timestep features: [sin(t w_0..), cos(t w_0..)] with
/// w_i = 10000^(-i/(d/2)).
std::vector<double> sinusoidal_features(int t, int d);

/// Two-level encoder-decoder: res blocks at widths c, 2c, 4c, cross-attention
/// to the tokens at the bottleneck, skip concatenation on the way up. The
/// output conv reads silu(h) without a final norm, so the global mean of the
/// input stays visible to the prediction. Which tensors exist depends on the
/// conditioning mode.
template <class T>
class UNet : public EpsModel<T> {
public:
    /// Parameters are drawn from rng.derive(tag(name)) per tensor.
    UNet(DenoiserConfig cfg, const Stream& init_rng);

    const DenoiserConfig& config() const { return cfg_; }

    std::vector<NamedParam<T>>& params() { return params_; }
    const std::vector<NamedParam<T>>& params() const { return params_; }
    Tensor<T>& param(std::string_view name);
    const Tensor<T>& param(std::string_view name) const;
    std::size_t parameter_count() const;
    void zero_grad();

    /// Token embeddings plus learned positional offsets -> [L, embed_dim].
    Var embed_tokens(Tape<T>& tape, const TokenIds& tokens);
    /// Masked mean of embed_tokens rows -> [embed_dim]; zero for all-pad input.
    Var pooled_tokens(Tape<T>& tape, const TokenIds& tokens);
    /// Sinusoidal features through the two-layer projection -> [1, 4c].
    Var time_embedding(Tape<T>& tape, int t);

protected:
    Var predict(Tape<T>& tape, Var y_t, int t, const TokenIds& tokens) override;

private:
    Tensor<T>& add(const std::string& name, Shape shape, bool decay);
    Var p(Tape<T>& tape, std::string_view name) { return tape.param(param(name)); }
    Var linear(Tape<T>& tape, Var x, std::string_view w, std::string_view b);
    Var norm(Tape<T>& tape, Var x, const std::string& prefix);
    Var res_block(Tape<T>& tape, Var x, const std::string& prefix, int cin, int cout, Var cond_act);
    Var cross_attention(Tape<T>& tape, Var h, Var tokens_emb, const TokenIds& tokens);

    DenoiserConfig cfg_;
    std::vector<NamedParam<T>> params_;
};

struct OptimizerConfig {
    double lr = 1e-4;
    long warmup = 500;
    long total_steps = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// lr(step) = base * min(step/warmup, 1) * 0.5 * (1 + cos(pi * step/total)).
double learning_rate(const OptimizerConfig& cfg, long step);

/// AdamW with decoupled weight decay. Moments are kept per parameter in the
/// order of the parameter list they were created for.
template <class T>
class AdamW {
public:
    AdamW() = default;
    AdamW(OptimizerConfig cfg, const std::vector<NamedParam<T>>& params);

    /// Applies one update using each parameter's accumulated grad, then
    /// advances the step counter. Throws NumericalDivergence (nothing is
    /// modified) if any gradient is non-finite.
    void step(std::vector<NamedParam<T>>& params);

    long steps_taken() const { return step_; }
    const OptimizerConfig& config() const { return cfg_; }
    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }
    void set_step(long s) { step_ = s; }

private:
    OptimizerConfig cfg_;
    long step_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

}  // namespace inkdiff
