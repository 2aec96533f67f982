#include "doctest.h"

#include "inkdiff/denoiser.hpp"
#include "inkdiff/error.hpp"
#include "test_support.hpp"

#include <cmath>
#include <numbers>

using namespace inkdiff;

namespace {

DenoiserConfig tiny(ConditioningMode mode) {
    DenoiserConfig c;
    c.height = 8;
    c.width = 24;
    c.channels = 4;
    c.embed_dim = 8;
    c.time_dim = 8;
    c.max_len = 12;
    c.mode = mode;
    return c;
}

template <class T>
void randomize(UNet<T>& net, std::string_view name, std::uint64_t seed, double scale) {
    Stream r(seed);
    for (auto& v : net.param(name).value) v = static_cast<T>(scale * r.normal());
}

std::vector<double> latent(int h, int w, std::uint64_t seed) {
    Stream r(seed);
    return r.normal_vector<double>(static_cast<std::size_t>(h) * w);
}

TokenIds tokens_for(const char* src, int max_len = 12) { return encode(parse_source(src, Grammar::formula), max_len); }

}  // namespace

TEST_CASE("parameter names are stable") {
    UNet<float> net(DenoiserConfig{}, Stream(1));
    for (const char* n : {"emb.token", "emb.pos", "time.w1", "unet.in.w", "unet.down0.conv1.w", "unet.down1.down.w",
                          "unet.mid.norm1.g", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "pos.row", "pos.col",
                          "unet.up1.up.w", "unet.up0.skip.w", "head.w", "head.b"})
        CHECK_NOTHROW(net.param(n));
    CHECK(net.param("emb.token").shape == Shape{vocab_size(), 64});
    CHECK(net.param("pos.row").shape == Shape{8, 128});
    CHECK(net.param("pos.col").shape == Shape{24, 128});
    CHECK_THROWS_AS(net.param("nope"), Error);
    for (const auto& np : net.params()) {
        for (float v : np.tensor.value) REQUIRE(std::isfinite(v));
        const bool bias_or_norm = np.name.ends_with(".b") || np.name.ends_with(".g") || np.name.starts_with("emb.") ||
                                  np.name.starts_with("pos.");
        if (bias_or_norm) CHECK_FALSE(np.decay);
    }
    CHECK(net.param("unet.in.w").value != std::vector<float>(net.param("unet.in.w").size(), 0.0f));
    UNet<float> pooled(tiny(ConditioningMode::pooled), Stream(1));
    CHECK_THROWS_AS(pooled.param("attn.wq"), Error);
}

TEST_CASE("initialisation is seeded per tensor") {
    UNet<float> a(tiny(ConditioningMode::cross_attn), Stream(3));
    UNet<float> b(tiny(ConditioningMode::cross_attn), Stream(3));
    UNet<float> c(tiny(ConditioningMode::cross_attn), Stream(4));
    CHECK(a.param("unet.mid.conv1.w").value == b.param("unet.mid.conv1.w").value);
    CHECK(a.param("unet.mid.conv1.w").value != c.param("unet.mid.conv1.w").value);
    // The shared tensors of two modes agree, since each is drawn from its own named stream.
    UNet<float> d(tiny(ConditioningMode::cross_attn_pos), Stream(3));
    CHECK(a.param("unet.mid.conv1.w").value == d.param("unet.mid.conv1.w").value);
}

TEST_CASE("zero head predicts zero noise") {
    for (auto mode : {ConditioningMode::pooled, ConditioningMode::cross_attn, ConditioningMode::cross_attn_pos}) {
        UNet<double> net(tiny(mode), Stream(5));
        const auto y = latent(8, 24, 6);
        for (int t : {1, 50, 1000}) {
            const auto out = net.eval(std::span<const double>(y), {1, 8, 24}, t, tokens_for("a^{2}b"));
            REQUIRE(out.size() == y.size());
            for (double v : out) CHECK(v == 0.0);
        }
    }
}

TEST_CASE("forward validates its inputs and counts evaluations") {
    UNet<double> net(tiny(ConditioningMode::cross_attn), Stream(5));
    const auto y = latent(8, 24, 6);
    CHECK(net.evaluations() == 0);
    net.eval(std::span<const double>(y), {1, 8, 24}, 3, tokens_for("ab"));
    net.eval(std::span<const double>(y), {1, 8, 24}, 4, tokens_for("ab"));
    CHECK(net.evaluations() == 2);
    net.reset_evaluations();
    CHECK(net.evaluations() == 0);
    CHECK_THROWS_AS(net.eval(std::span<const double>(y), {1, 6, 32}, 3, tokens_for("ab")), Error);
    CHECK_THROWS_AS(net.eval(std::span<const double>(y), {1, 8, 24}, 0, tokens_for("ab")), Error);
    CHECK_THROWS_AS(net.eval(std::span<const double>(y), {1, 8, 24}, 3, tokens_for("ab", 20)), Error);
}

TEST_CASE("sinusoidal features") {
    for (int t : {1, 7, 999}) {
        const auto f = sinusoidal_features(t, 16);
        REQUIRE(f.size() == 16);
        for (int i = 0; i < 8; ++i) CHECK(std::abs(f[i] * f[i] + f[i + 8] * f[i + 8] - 1.0) < 1e-12);
        CHECK(f[0] == std::sin(static_cast<double>(t)));
    }
    CHECK(sinusoidal_features(5, 16) == sinusoidal_features(5, 16));
}

TEST_CASE("timestep embeddings never collide") {
    UNet<double> net(tiny(ConditioningMode::pooled), Stream(8));
    const int T = 10000;
    std::vector<std::vector<double>> raw;
    raw.reserve(T);
    for (int t = 1; t <= T; ++t) raw.push_back(sinusoidal_features(t, 8));
    // Sort and compare neighbours: a collision would produce two equal vectors.
    std::sort(raw.begin(), raw.end());
    for (std::size_t i = 1; i < raw.size(); ++i) REQUIRE(raw[i] != raw[i - 1]);

    std::vector<std::vector<double>> proj;
    for (int t = 1; t <= 1000; ++t) {
        Tape<double> tp(false);
        const auto v = tp.value(net.time_embedding(tp, t));
        proj.emplace_back(v.begin(), v.end());
    }
    std::sort(proj.begin(), proj.end());
    for (std::size_t i = 1; i < proj.size(); ++i) REQUIRE(proj[i] != proj[i - 1]);
}

TEST_CASE("pooling matches an independent masked mean") {
    UNet<double> net(tiny(ConditioningMode::pooled), Stream(9));
    randomize(net, "emb.token", 10, 1.0);
    randomize(net, "emb.pos", 11, 1.0);
    const auto& tok = net.param("emb.token");
    const auto& pos = net.param("emb.pos");
    const int d = 8;

    const auto ids = tokens_for("x+1_{k}");
    Tape<double> tp(false);
    const auto got = tp.value(net.pooled_tokens(tp, ids));
    double worst = 0;
    for (int j = 0; j < d; ++j) {
        double sum = 0;
        int n = 0;
        for (std::size_t i = 0; i < ids.ids.size(); ++i) {
            if (!ids.mask[i]) continue;
            sum += tok.value[ids.ids[i] * d + j] + pos.value[i * d + j];
            ++n;
        }
        worst = std::max(worst, std::abs(sum / n - got[j]));
    }
    CHECK(worst < 1e-12);

    TokenIds pad{std::vector<int>(12, kPadId), std::vector<unsigned char>(12, 0)};
    Tape<double> tp2(false);
    for (double v : tp2.value(net.pooled_tokens(tp2, pad))) CHECK(v == 0.0);

    TokenIds one{{kBosId, 0, 0}, {1, 0, 0}};
    Tape<double> tp3(false);
    const auto single = tp3.value(net.pooled_tokens(tp3, one));
    for (int j = 0; j < d; ++j) CHECK(single[j] == tok.value[kBosId * d + j] + pos.value[j]);
}

TEST_CASE("pooled mode ignores token order, cross attention does not") {
    const auto y = latent(8, 24, 12);
    auto a = tokens_for("ab+1");
    auto b = a;
    std::swap(b.ids[1], b.ids[3]);
    std::swap(b.ids[2], b.ids[4]);
    REQUIRE(a.ids != b.ids);

    UNet<float> pooled(tiny(ConditioningMode::pooled), Stream(13));
    randomize(pooled, "head.w", 14, 0.3);
    randomize(pooled, "emb.token", 15, 1.0);
    randomize(pooled, "emb.pos", 16, 1.0);
    std::vector<float> yf(y.begin(), y.end());
    const auto pa = pooled.eval(std::span<const float>(yf), {1, 8, 24}, 20, a);
    const auto pb = pooled.eval(std::span<const float>(yf), {1, 8, 24}, 20, b);
    CHECK(pa == pb);
    CHECK(pa != pooled.eval(std::span<const float>(yf), {1, 8, 24}, 20, tokens_for("ab+2")));

    UNet<float> attn(tiny(ConditioningMode::cross_attn), Stream(13));
    randomize(attn, "head.w", 14, 0.3);
    randomize(attn, "emb.token", 15, 1.0);
    randomize(attn, "emb.pos", 16, 1.0);
    CHECK(attn.eval(std::span<const float>(yf), {1, 8, 24}, 20, a) !=
          attn.eval(std::span<const float>(yf), {1, 8, 24}, 20, b));
}

TEST_CASE("row embeddings only matter with positional queries") {
    const auto y = latent(8, 24, 17);
    const auto ids = tokens_for("q^{2}");
    {
        UNet<double> net(tiny(ConditioningMode::cross_attn_pos), Stream(18));
        randomize(net, "head.w", 19, 0.3);
        randomize(net, "emb.token", 20, 1.0);
        const auto before = net.eval(std::span<const double>(y), {1, 8, 24}, 9, ids);
        net.param("pos.row").value[3] += 0.5;
        CHECK(net.eval(std::span<const double>(y), {1, 8, 24}, 9, ids) != before);
    }
    {
        UNet<double> net(tiny(ConditioningMode::cross_attn), Stream(18));
        CHECK_THROWS_AS(net.param("pos.row"), Error);
    }
}

TEST_CASE("full model gradients match finite differences") {
    for (auto mode : {ConditioningMode::pooled, ConditioningMode::cross_attn, ConditioningMode::cross_attn_pos}) {
        CAPTURE(to_string(mode));
        UNet<double> net(tiny(mode), Stream(21));
        randomize(net, "head.w", 22, 0.3);
        randomize(net, "head.b", 23, 0.1);
        randomize(net, "emb.token", 24, 0.5);
        if (mode != ConditioningMode::pooled) {
            randomize(net, "attn.wo", 25, 0.3);
        }
        const auto y = latent(8, 24, 26);
        const auto target = latent(8, 24, 27);
        const auto ids = tokens_for("a^{2}b");
        auto loss_fn = [&](bool grad) {
            Tape<double> tp(grad);
            const Var out = net.forward(tp, tp.constant({1, 8, 24}, y), 37, ids);
            const Var l = ad::mse(tp, out, std::span<const double>(target));
            if (grad) tp.backward(l);
            return tp.value(l)[0];
        };
        net.zero_grad();
        loss_fn(true);

        // Probe a fixed subset of entries in every tensor.
        double worst = 0;
        std::string worst_name;
        for (auto& np : net.params()) {
            auto& t = np.tensor;
            const std::size_t stride = std::max<std::size_t>(1, t.size() / 6);
            for (std::size_t i = 0; i < t.size(); i += stride) {
                const double numeric = testing::fd_slope(t.value[i], [&] { return loss_fn(false); });
                const double rel = testing::rel_error(t.grad[i], numeric, 1e-6);
                if (rel > worst) {
                    worst = rel;
                    worst_name = np.name;
                }
            }
        }
        CAPTURE(worst_name);
        CHECK(worst <= 1e-4);
    }
}

TEST_CASE("learning rate schedule") {
    OptimizerConfig cfg;
    cfg.lr = 1e-4;
    cfg.warmup = 500;
    cfg.total_steps = 6000;
    CHECK(learning_rate(cfg, 0) == 0.0);
    CHECK(std::abs(learning_rate(cfg, 250) - 1e-4 * 0.5 * 0.5 * (1 + std::cos(std::numbers::pi * 250 / 6000.0))) <
          1e-18);
    CHECK(std::abs(learning_rate(cfg, 500) - 1e-4 * 0.5 * (1 + std::cos(std::numbers::pi * 500 / 6000.0))) < 1e-18);
    CHECK(std::abs(learning_rate(cfg, 6000)) < 1e-18);
    CHECK(std::abs(learning_rate(cfg, 9000)) < 1e-18);
}

TEST_CASE("adamw update rules") {
    SUBCASE("zero gradient and zero decay leave parameters unchanged") {
        std::vector<NamedParam<double>> ps;
        ps.push_back({"w", Tensor<double>({3}, std::vector<double>{1, -2, 3}), true});
        OptimizerConfig cfg;
        cfg.weight_decay = 0.0;
        cfg.total_steps = 10;
        cfg.warmup = 0;
        AdamW<double> opt(cfg, ps);
        ps[0].tensor.zero_grad();
        for (int i = 0; i < 5; ++i) opt.step(ps);
        CHECK(ps[0].tensor.value == std::vector<double>{1, -2, 3});
        CHECK(opt.steps_taken() == 5);
    }
    SUBCASE("first step closed form") {
        std::vector<NamedParam<double>> ps;
        ps.push_back({"w", Tensor<double>({2}, std::vector<double>{1.0, 2.0}), true});
        ps.push_back({"b", Tensor<double>({1}, std::vector<double>{0.5}), false});
        OptimizerConfig cfg;
        cfg.lr = 0.1;
        cfg.warmup = 2;
        cfg.total_steps = 4;
        cfg.weight_decay = 0.1;
        AdamW<double> opt(cfg, ps);
        ps[0].tensor.grad = {0.3, -0.2};
        ps[1].tensor.grad = {0.7};
        opt.step(ps);
        const double lr = 0.1 * 0.5 * 0.5 * (1 + std::cos(std::numbers::pi / 4));
        auto upd = [&](double x, double g, double wd) {
            x -= lr * wd * x;
            return x - lr * g / (std::abs(g) + 1e-8);
        };
        CHECK(std::abs(ps[0].tensor.value[0] - upd(1.0, 0.3, 0.1)) < 1e-15);
        CHECK(std::abs(ps[0].tensor.value[1] - upd(2.0, -0.2, 0.1)) < 1e-15);
        CHECK(std::abs(ps[1].tensor.value[0] - upd(0.5, 0.7, 0.0)) < 1e-15);
    }
    SUBCASE("non-finite gradient is rejected before any change") {
        std::vector<NamedParam<double>> ps;
        ps.push_back({"a", Tensor<double>({1}, std::vector<double>{1.0}), true});
        ps.push_back({"b", Tensor<double>({1}, std::vector<double>{1.0}), true});
        OptimizerConfig cfg;
        cfg.total_steps = 10;
        AdamW<double> opt(cfg, ps);
        ps[0].tensor.grad = {1.0};
        ps[1].tensor.grad = {std::nan("")};
        CHECK_THROWS_AS(opt.step(ps), Error);
        CHECK(ps[0].tensor.value[0] == 1.0);
        CHECK(opt.steps_taken() == 0);
        CHECK(opt.first_moments()[0][0] == 0.0);
    }
    SUBCASE("quadratic converges") {
        std::vector<NamedParam<double>> ps;
        ps.push_back({"x", Tensor<double>({1}, std::vector<double>{0.0}), false});
        OptimizerConfig cfg;
        cfg.lr = 0.1;
        cfg.warmup = 10;
        cfg.total_steps = 1000;
        AdamW<double> opt(cfg, ps);
        for (int i = 0; i < 1000; ++i) {
            ps[0].tensor.grad = {2.0 * (ps[0].tensor.value[0] - 3.0)};
            opt.step(ps);
        }
        CHECK(std::abs(ps[0].tensor.value[0] - 3.0) < 1e-3);
    }
}

TEST_CASE("training steps are bit-reproducible") {
    auto run = [] {
        UNet<float> net(tiny(ConditioningMode::cross_attn_pos), Stream(40));
        OptimizerConfig cfg;
        cfg.lr = 1e-3;
        cfg.warmup = 1;
        cfg.total_steps = 3;
        AdamW<float> opt(cfg, net.params());
        const auto y = latent(8, 24, 41);
        std::vector<float> yf(y.begin(), y.end());
        for (int s = 0; s < 3; ++s) {
            net.zero_grad();
            Tape<float> tp(true);
            const Var out = net.forward(tp, tp.constant({1, 8, 24}, yf), 5 + s, tokens_for("ab"));
            tp.backward(ad::mse(tp, out, std::span<const float>(yf)));
            opt.step(net.params());
        }
        std::vector<float> all;
        for (const auto& np : net.params()) all.insert(all.end(), np.tensor.value.begin(), np.tensor.value.end());
        return all;
    };
    CHECK(run() == run());
}
