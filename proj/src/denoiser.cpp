#include "inkdiff/denoiser.hpp"

#include "inkdiff/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace inkdiff {

const char* to_string(ConditioningMode m) {
    switch (m) {
        case ConditioningMode::pooled: return "pooled";
        case ConditioningMode::cross_attn: return "cross_attn";
        case ConditioningMode::cross_attn_pos: return "cross_attn_pos";
    }
    return "?";
}

ConditioningMode conditioning_from_string(std::string_view name) {
    if (name == "pooled") return ConditioningMode::pooled;
    if (name == "cross_attn") return ConditioningMode::cross_attn;
    if (name == "cross_attn_pos") return ConditioningMode::cross_attn_pos;
    throw Error(ErrorCode::ConfigError, "unknown conditioning mode '" + std::string(name) + "'");
}

void DenoiserConfig::validate() const {
    if (height < 4 || width < 4 || height % 4 || width % 4)
        throw Error(ErrorCode::ConfigError, "canvas sides must be positive multiples of 4");
    if (channels < 1 || embed_dim < 1 || time_dim < 2 || time_dim % 2 || max_len < 2)
        throw Error(ErrorCode::ConfigError, "denoiser widths must be positive (time_dim even)");
    if (vocab < 0) throw Error(ErrorCode::ConfigError, "negative vocabulary size");
}

template <class T>
std::vector<T> EpsModel<T>::eval(std::span<const T> y_t, const Shape& shape, int t, const TokenIds& tokens) {
    Tape<T> tape(false);
    Var y = tape.constant(shape, std::vector<T>(y_t.begin(), y_t.end()));
    Var out = forward(tape, y, t, tokens);
    auto v = tape.value(out);
    return {v.begin(), v.end()};
}

std::vector<double> sinusoidal_features(int t, int d) {
    const int half = d / 2;
    std::vector<double> out(static_cast<std::size_t>(d));
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[static_cast<std::size_t>(i)] = std::sin(t * freq);
        out[static_cast<std::size_t>(half + i)] = std::cos(t * freq);
    }
    return out;
}

namespace {

int groups_for(int channels) { return std::gcd(channels, 8); }

}  // namespace

template <class T>
Tensor<T>& UNet<T>::add(const std::string& name, Shape shape, bool decay) {
    params_.push_back({name, Tensor<T>(std::move(shape)), decay});
    return params_.back().tensor;
}

template <class T>
UNet<T>::UNet(DenoiserConfig cfg, const Stream& init_rng) : cfg_(cfg) {
    if (cfg_.vocab == 0) cfg_.vocab = vocab_size();
    cfg_.validate();
    const int c = cfg_.channels, c4 = 4 * c, d = cfg_.embed_dim;

    params_.reserve(96);
    add("emb.token", {cfg_.vocab, d}, false);
    add("emb.pos", {cfg_.max_len, d}, false);
    add("time.w1", {cfg_.time_dim, c4}, true);
    add("time.b1", {c4}, false);
    add("time.w2", {c4, c4}, true);
    add("time.b2", {c4}, false);
    const bool pooled = cfg_.mode == ConditioningMode::pooled;
    if (pooled) {
        add("pool.w", {d, c4}, true);
        add("pool.b", {c4}, false);
    }

    add("unet.in.w", {c, 1, 3, 3}, true);
    add("unet.in.b", {c}, false);
    auto block = [&](const std::string& pre, int cin, int cout) {
        add(pre + ".norm1.g", {cin}, false);
        add(pre + ".norm1.b", {cin}, false);
        add(pre + ".conv1.w", {cout, cin, 3, 3}, true);
        add(pre + ".conv1.b", {cout}, false);
        add(pre + ".emb.w", {c4, cout}, true);
        add(pre + ".emb.b", {cout}, false);
        add(pre + ".norm2.g", {cout}, false);
        add(pre + ".norm2.b", {cout}, false);
        add(pre + ".conv2.w", {cout, cout, 3, 3}, true);
        add(pre + ".conv2.b", {cout}, false);
        if (cin != cout) {
            add(pre + ".skip.w", {cout, cin, 1, 1}, true);
            add(pre + ".skip.b", {cout}, false);
        }
    };
    block("unet.down0", c, c);
    add("unet.down0.down.w", {2 * c, c, 3, 3}, true);
    add("unet.down0.down.b", {2 * c}, false);
    block("unet.down1", 2 * c, 2 * c);
    add("unet.down1.down.w", {c4, 2 * c, 3, 3}, true);
    add("unet.down1.down.b", {c4}, false);
    block("unet.mid", c4, c4);

    if (!pooled) {
        add("attn.norm.g", {c4}, false);
        add("attn.norm.b", {c4}, false);
        add("attn.wq", {c4, c4}, true);
        add("attn.wk", {d, c4}, true);
        add("attn.wv", {d, c4}, true);
        add("attn.wo", {c4, c4}, true);
    }
    if (cfg_.mode == ConditioningMode::cross_attn_pos) {
        add("pos.row", {cfg_.height / 4, c4}, false);
        add("pos.col", {cfg_.width / 4, c4}, false);
    }

    add("unet.up1.up.w", {c4, 2 * c, 2, 2}, true);
    add("unet.up1.up.b", {2 * c}, false);
    block("unet.up1", c4, 2 * c);
    add("unet.up0.up.w", {2 * c, c, 2, 2}, true);
    add("unet.up0.up.b", {c}, false);
    block("unet.up0", 2 * c, c);

    add("head.w", {1, c, 3, 3}, true);
    add("head.b", {1}, false);

    auto ends_with = [](const std::string& s, std::string_view suffix) {
        return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    for (auto& np : params_) {
        auto& v = np.tensor.value;
        const Shape& s = np.tensor.shape;
        Stream rng = init_rng.derive(tag(np.name.c_str()));
        if (np.name.rfind("emb.", 0) == 0 || np.name.rfind("pos.", 0) == 0) {
            for (auto& x : v) x = static_cast<T>(0.02 * rng.normal());
        } else if (ends_with(np.name, ".g")) {
            std::fill(v.begin(), v.end(), T(1));
        } else if (np.name == "head.w" || !np.decay) {
            std::fill(v.begin(), v.end(), T(0));
        } else {
            // Conv [Co,Ci,k,k] and transposed conv [Ci,Co,2,2] / linear [in,out].
            int fan_in = s.size() == 4 ? (np.name.ends_with(".up.w") ? s[0] : s[1] * s[2] * s[3]) : s[0];
            const double bound = std::sqrt(6.0 / fan_in);
            for (auto& x : v) x = static_cast<T>(bound * (2.0 * rng.uniform() - 1.0));
        }
    }
}

template <class T>
Tensor<T>& UNet<T>::param(std::string_view name) {
    for (auto& np : params_)
        if (np.name == name) return np.tensor;
    throw Error(ErrorCode::ConfigError, "no parameter named '" + std::string(name) + "'");
}

template <class T>
const Tensor<T>& UNet<T>::param(std::string_view name) const {
    return const_cast<UNet*>(this)->param(name);
}

template <class T>
std::size_t UNet<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& np : params_) n += np.tensor.size();
    return n;
}

template <class T>
void UNet<T>::zero_grad() {
    for (auto& np : params_) np.tensor.zero_grad();
}

template <class T>
Var UNet<T>::linear(Tape<T>& tape, Var x, std::string_view w, std::string_view b) {
    return ad::add_row_vector(tape, ad::matmul(tape, x, p(tape, w)), p(tape, b));
}

template <class T>
Var UNet<T>::norm(Tape<T>& tape, Var x, const std::string& prefix) {
    const int channels = tape.shape(x)[0];
    return ad::group_norm(tape, x, p(tape, prefix + ".g"), p(tape, prefix + ".b"), groups_for(channels));
}

template <class T>
Var UNet<T>::res_block(Tape<T>& tape, Var x, const std::string& pre, int cin, int cout, Var cond_act) {
    Var h = ad::silu(tape, norm(tape, x, pre + ".norm1"));
    h = ad::conv2d(tape, h, p(tape, pre + ".conv1.w"), p(tape, pre + ".conv1.b"), 1);
    Var e = linear(tape, cond_act, pre + ".emb.w", pre + ".emb.b");
    h = ad::add_channel_vector(tape, h, e);
    h = ad::silu(tape, norm(tape, h, pre + ".norm2"));
    h = ad::conv2d(tape, h, p(tape, pre + ".conv2.w"), p(tape, pre + ".conv2.b"), 1);
    Var skip = cin == cout ? x : ad::conv2d(tape, x, p(tape, pre + ".skip.w"), p(tape, pre + ".skip.b"), 1);
    return ad::add(tape, h, skip);
}

template <class T>
Var UNet<T>::embed_tokens(Tape<T>& tape, const TokenIds& tokens) {
    const int len = static_cast<int>(tokens.ids.size());
    if (len > cfg_.max_len)
        throw Error(ErrorCode::ShapeMismatch, "token sequence longer than " + std::to_string(cfg_.max_len));
    std::vector<int> positions(static_cast<std::size_t>(len));
    std::iota(positions.begin(), positions.end(), 0);
    Var tok = ad::embedding(tape, p(tape, "emb.token"), std::span<const int>(tokens.ids));
    Var pos = ad::embedding(tape, p(tape, "emb.pos"), std::span<const int>(positions));
    return ad::add(tape, tok, pos);
}

template <class T>
Var UNet<T>::pooled_tokens(Tape<T>& tape, const TokenIds& tokens) {
    // mean(token + pos) split as mean(token) + mean(pos). Token rows are summed
    // in sorted-id order so the result is bit-identical under any reordering.
    if (tokens.ids.size() > static_cast<std::size_t>(cfg_.max_len))
        throw Error(ErrorCode::ShapeMismatch, "token sequence longer than " + std::to_string(cfg_.max_len));
    std::vector<int> ids, positions;
    for (std::size_t i = 0; i < tokens.ids.size(); ++i)
        if (i < tokens.mask.size() && tokens.mask[i]) {
            ids.push_back(tokens.ids[i]);
            positions.push_back(static_cast<int>(i));
        }
    if (ids.empty()) return tape.constant({cfg_.embed_dim}, std::vector<T>(static_cast<std::size_t>(cfg_.embed_dim), T(0)));
    std::sort(ids.begin(), ids.end());
    const std::vector<unsigned char> all(ids.size(), 1);
    Var tok = ad::masked_mean_rows(tape, ad::embedding(tape, p(tape, "emb.token"), std::span<const int>(ids)),
                                   std::span<const unsigned char>(all));
    Var pos = ad::masked_mean_rows(tape, ad::embedding(tape, p(tape, "emb.pos"), std::span<const int>(positions)),
                                   std::span<const unsigned char>(all));
    return ad::add(tape, tok, pos);
}

template <class T>
Var UNet<T>::time_embedding(Tape<T>& tape, int t) {
    auto feats = sinusoidal_features(t, cfg_.time_dim);
    Var f = tape.constant({1, cfg_.time_dim}, std::vector<T>(feats.begin(), feats.end()));
    Var h = ad::silu(tape, linear(tape, f, "time.w1", "time.b1"));
    return linear(tape, h, "time.w2", "time.b2");
}

template <class T>
Var UNet<T>::cross_attention(Tape<T>& tape, Var h, Var tokens_emb, const TokenIds& tokens) {
    const Shape s = tape.shape(h);
    const int ch = s[0], hh = s[1], ww = s[2], hw = hh * ww;
    Var x = ad::transpose(tape, ad::reshape(tape, norm(tape, h, "attn.norm"), {ch, hw}));
    Var q = ad::matmul(tape, x, p(tape, "attn.wq"));
    if (cfg_.mode == ConditioningMode::cross_attn_pos) {
        std::vector<int> rows(static_cast<std::size_t>(hw)), cols(static_cast<std::size_t>(hw));
        for (int i = 0; i < hw; ++i) {
            rows[static_cast<std::size_t>(i)] = i / ww;
            cols[static_cast<std::size_t>(i)] = i % ww;
        }
        q = ad::add(tape, q, ad::embedding(tape, p(tape, "pos.row"), std::span<const int>(rows)));
        q = ad::add(tape, q, ad::embedding(tape, p(tape, "pos.col"), std::span<const int>(cols)));
    }
    Var k = ad::matmul(tape, tokens_emb, p(tape, "attn.wk"));
    Var v = ad::matmul(tape, tokens_emb, p(tape, "attn.wv"));
    Var o = ad::attention(tape, q, k, v, std::span<const unsigned char>(tokens.mask));
    o = ad::matmul(tape, o, p(tape, "attn.wo"));
    return ad::add(tape, h, ad::reshape(tape, ad::transpose(tape, o), s));
}

template <class T>
Var UNet<T>::predict(Tape<T>& tape, Var y_t, int t, const TokenIds& tokens) {
    if (tape.shape(y_t) != Shape{1, cfg_.height, cfg_.width})
        throw Error(ErrorCode::ShapeMismatch, "latent " + shape_str(tape.shape(y_t)) + " does not match the canvas");
    if (t < 1) throw Error(ErrorCode::InvalidRange, "timestep must be >= 1");
    const int c = cfg_.channels;

    Var cond = time_embedding(tape, t);
    if (cfg_.mode == ConditioningMode::pooled) {
        Var pooled = ad::reshape(tape, pooled_tokens(tape, tokens), {1, cfg_.embed_dim});
        cond = ad::add(tape, cond, linear(tape, pooled, "pool.w", "pool.b"));
    }
    Var cond_act = ad::silu(tape, cond);

    Var h = ad::conv2d(tape, y_t, p(tape, "unet.in.w"), p(tape, "unet.in.b"), 1);
    Var d0 = res_block(tape, h, "unet.down0", c, c, cond_act);
    h = ad::conv2d(tape, d0, p(tape, "unet.down0.down.w"), p(tape, "unet.down0.down.b"), 2);
    Var d1 = res_block(tape, h, "unet.down1", 2 * c, 2 * c, cond_act);
    h = ad::conv2d(tape, d1, p(tape, "unet.down1.down.w"), p(tape, "unet.down1.down.b"), 2);
    h = res_block(tape, h, "unet.mid", 4 * c, 4 * c, cond_act);
    if (cfg_.mode != ConditioningMode::pooled) h = cross_attention(tape, h, embed_tokens(tape, tokens), tokens);

    h = ad::conv_transpose2x2(tape, h, p(tape, "unet.up1.up.w"), p(tape, "unet.up1.up.b"));
    h = res_block(tape, ad::concat_channels(tape, h, d1), "unet.up1", 4 * c, 2 * c, cond_act);
    h = ad::conv_transpose2x2(tape, h, p(tape, "unet.up0.up.w"), p(tape, "unet.up0.up.b"));
    h = res_block(tape, ad::concat_channels(tape, h, d0), "unet.up0", 2 * c, c, cond_act);

    h = ad::silu(tape, h);
    Var out = ad::conv2d(tape, h, p(tape, "head.w"), p(tape, "head.b"), 1);
    for (T x : tape.value(out))
        if (!std::isfinite(x)) throw Error(ErrorCode::NumericalDivergence, "non-finite denoiser output");
    return out;
}

// Optimizer ------------------------------------------------------------------------

double learning_rate(const OptimizerConfig& cfg, long step) {
    const double warm = cfg.warmup > 0 ? std::min(1.0, static_cast<double>(step) / cfg.warmup) : 1.0;
    const double frac = cfg.total_steps > 0 ? std::min(1.0, static_cast<double>(step) / cfg.total_steps) : 0.0;
    return cfg.lr * warm * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

template <class T>
AdamW<T>::AdamW(OptimizerConfig cfg, const std::vector<NamedParam<T>>& params) : cfg_(cfg) {
    for (const auto& np : params) {
        m_.emplace_back(np.tensor.size(), T(0));
        v_.emplace_back(np.tensor.size(), T(0));
    }
}

template <class T>
void AdamW<T>::step(std::vector<NamedParam<T>>& params) {
    if (params.size() != m_.size()) throw Error(ErrorCode::ShapeMismatch, "optimizer built for a different model");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& g = params[i].tensor.grad;
        if (!g.empty() && g.size() != params[i].tensor.size())
            throw Error(ErrorCode::ShapeMismatch, "gradient shape differs for " + params[i].name);
        for (T x : g)
            if (!std::isfinite(x)) throw Error(ErrorCode::NumericalDivergence, "non-finite gradient in " + params[i].name);
    }
    const long s = step_ + 1;
    const double lr = learning_rate(cfg_, s);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& tensor = params[i].tensor;
        const double wd = params[i].decay ? cfg_.weight_decay : 0.0;
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < tensor.size(); ++j) {
            const double g = tensor.grad.empty() ? 0.0 : static_cast<double>(tensor.grad[j]);
            const double mj = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            const double vj = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            double x = static_cast<double>(tensor.value[j]);
            x -= lr * wd * x;
            x -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
            tensor.value[j] = static_cast<T>(x);
        }
    }
    step_ = s;
}

template class EpsModel<float>;
template class EpsModel<double>;
template class UNet<float>;
template class UNet<double>;
template class AdamW<float>;
template class AdamW<double>;

}  // namespace inkdiff
