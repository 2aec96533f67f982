// Acceptance suite. `--group fast` runs the exact property checks,
// `--group desk` the desk-scale training comparison. One line per criterion.

#include "inkdiff/autodiff.hpp"
#include "inkdiff/denoiser.hpp"
#include "inkdiff/diffusion.hpp"
#include "inkdiff/error.hpp"
#include "inkdiff/harness.hpp"
#include "inkdiff/image.hpp"
#include "inkdiff/markup.hpp"
#include "inkdiff/metrics.hpp"
#include "inkdiff/schedule.hpp"
#include "inkdiff/scheduled_sampling.hpp"
#include "inkdiff/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"
#include "test_support.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

using namespace inkdiff;
using json = nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Outcome()>& body) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.pass) ++failures;
    char buf[64];
    std::snprintf(buf, sizeof buf, " [%.1fs]", secs);
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << title << " | " << o.detail << buf
              << std::endl;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1 ---------------------------------------------------------------------------------

Outcome forward_moments() {
    const auto sched = linear_schedule(1000, 1e-4, 0.02);
    Stream pick(0);
    const int draws = 10000, pixels = 4;
    double worst_mean_se = 0, worst_var_rel = 0;
    bool ok = true;
    for (int trial = 0; trial < 5; ++trial) {
        const int t = 1 + static_cast<int>(pick.uniform_int(1000));
        std::vector<double> y0(pixels);
        for (auto& v : y0) v = 2 * pick.uniform() - 1;
        std::vector<double> s1(pixels, 0), s2(pixels, 0);
        Stream noise = pick.derive({tag("draws"), static_cast<std::uint64_t>(trial)});
        for (int i = 0; i < draws; ++i) {
            const auto z = noise.normal_vector<double>(pixels);
            const auto y = forward_sample<double>(y0, t, z, sched);
            for (int p = 0; p < pixels; ++p) {
                s1[p] += y[p];
                s2[p] += y[p] * y[p];
            }
        }
        const double var_true = 1 - sched.alpha_bar(t);
        for (int p = 0; p < pixels; ++p) {
            const double mean = s1[p] / draws;
            const double var = s2[p] / draws - mean * mean;
            const double se = std::sqrt(var_true / draws);
            const double mean_se = std::abs(mean - std::sqrt(sched.alpha_bar(t)) * y0[p]) / se;
            const double var_rel = std::abs(var - var_true) / var_true;
            worst_mean_se = std::max(worst_mean_se, mean_se);
            worst_var_rel = std::max(worst_var_rel, var_rel);
            ok = ok && mean_se <= 3.0 && var_rel <= 0.05;
        }
    }
    return {ok, "worst mean deviation " + fmt(worst_mean_se) + " SE (<= 3), worst variance error " +
                    fmt(100 * worst_var_rel) + "% (<= 5%)"};
}

// 2 ---------------------------------------------------------------------------------

Outcome gaussian_identity() {
    const auto sched = linear_schedule(1000, 1e-4, 0.02);
    Stream r(1);
    const std::size_t n = 32 * 96;
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int t = 1 + static_cast<int>(r.uniform_int(1000));
        std::vector<double> y0(n);
        for (auto& v : y0) v = 2 * r.uniform() - 1;
        const auto z = r.normal_vector<double>(n);
        const auto y_t = forward_sample<double>(y0, t, z, sched);
        const auto mu = mu_theta<double>(y_t, z, t, sched);
        const auto q = posterior_q<double>(y_t, y0, t, sched);
        for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(mu[i] - q.mean[i]));
    }
    return {worst <= 1e-9, "max |mu_theta - posterior mean| = " + fmt(worst) + " (<= 1e-9)"};
}

// 3 ---------------------------------------------------------------------------------

ExperimentConfig tiny_experiment() {
    ExperimentConfig cfg;
    cfg.canvas.width = 48;
    cfg.corpus.count = 70;
    cfg.corpus.lengths = {3, 6};
    cfg.corpus.split_counts = {50, 10, 10};
    cfg.schedule = {10, 0.01, 0.2};
    cfg.model.channels = 4;
    cfg.model.embed_dim = 8;
    cfg.model.time_dim = 8;
    cfg.model.max_len = 24;
    cfg.train.epochs = 5;
    cfg.train.batch_size = 5;
    cfg.train.warmup = 5;
    cfg.train.lr = 1e-3;
    cfg.seed = 3;
    return cfg;
}

Outcome degeneracy(const fs::path& work) {
    const auto dir = work / "degeneracy";
    fs::remove_all(dir);
    auto base = tiny_experiment();
    cmd_generate(base, dir / "corpus", false);

    auto depth0 = base;
    depth0.ss.enabled = true;
    depth0.ss.m = 0;
    auto flat = base;
    flat.ss.enabled = true;
    flat.ss.p_end = 0.0;
    auto live = base;
    live.ss.enabled = true;
    live.ss.p_end = 1.0;

    const fs::path last = fs::path("checkpoints") / "epoch_005" / "tensors.bin";
    cmd_train(base, dir / "corpus", dir / "plain");
    cmd_train(depth0, dir / "corpus", dir / "m0");
    cmd_train(flat, dir / "corpus", dir / "p0");
    cmd_train(live, dir / "corpus", dir / "live");
    const auto ck = load_checkpoint(dir / "plain" / "checkpoints" / "epoch_005");
    const auto plain = testing::file_bytes(dir / "plain" / last);
    const bool m0 = testing::file_bytes(dir / "m0" / last) == plain;
    const bool p0 = testing::file_bytes(dir / "p0" / last) == plain;
    const bool differs = testing::file_bytes(dir / "live" / last) != plain;
    return {ck.step == 50 && m0 && p0 && differs,
            std::to_string(ck.step) + " steps; m=0 identical: " + (m0 ? "yes" : "no") +
                ", p_end=0 identical: " + (p0 ? "yes" : "no") + ", active rollout differs: " + (differs ? "yes" : "no")};
}

// 4 ---------------------------------------------------------------------------------

DenoiserConfig tiny_denoiser(ConditioningMode mode = ConditioningMode::cross_attn_pos) {
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
std::vector<T> all_grads(UNet<T>& net) {
    std::vector<T> g;
    for (const auto& np : net.params()) g.insert(g.end(), np.tensor.grad.begin(), np.tensor.grad.end());
    return g;
}

Outcome stop_gradient() {
    const auto [lo, hi] = scale_schedule_for_T(1000, 100);
    const auto sched = linear_schedule(100, lo, hi);
    UNet<float> net(tiny_denoiser(), Stream(40));
    Stream init(41);
    for (auto& v : net.param("head.w").value) v = static_cast<float>(0.3 * init.normal());
    std::vector<std::vector<float>> y0s;
    std::vector<TokenIds> toks;
    const char* sources[] = {"ab", "k_{2}", "x^{y}+1", "q", "a_{b}c", "z+z"};
    for (int i = 0; i < 6; ++i) {
        Stream r(50 + i);
        y0s.push_back(r.normal_vector<float>(192));
        toks.push_back(encode(parse_source(sources[i], Grammar::formula), 12));
    }
    std::vector<TrainingExample<float>> batch;
    for (int i = 0; i < 6; ++i) batch.push_back({y0s[i], &toks[i], static_cast<std::uint64_t>(i)});

    LossOptions on;
    on.ss.enabled = true;
    on.ss.m = 1;
    on.mix_probability = 1.0;
    int batches = 0, scheduled = 0;
    bool ok = true;
    for (std::uint64_t step = 0; step < 5; ++step) {
        const Stream rng = Stream(60).derive(step);
        net.zero_grad();
        const auto rolled = training_loss<float>(batch, net, {1, 8, 24}, sched, on, rng);
        const auto g_rolled = all_grads(net);
        net.zero_grad();
        const auto injected = training_loss<float>(batch, net, {1, 8, 24}, sched, on, rng, &rolled.y_t);
        ok = ok && injected.per_example == rolled.per_example && all_grads(net) == g_rolled;
        for (std::size_t i = 0; i < rolled.branches.size(); ++i)
            scheduled += rolled.branches[i] == Branch::scheduled && effective_depth(1, rolled.timesteps[i], 100) == 1;
        ++batches;
    }
    return {ok && scheduled > 0, std::to_string(batches) + " batches, " + std::to_string(scheduled) +
                                     " examples through a one-step rollout; gradients " + (ok ? "identical" : "differ")};
}

// 5 ---------------------------------------------------------------------------------

Outcome gradients() {
    using testing::grad_check;
    using testing::random_tensor;
    std::vector<std::pair<std::string, double>> ops;
    auto a = random_tensor({3, 4}, 1), b = random_tensor({3, 4}, 2);
    ops.emplace_back("add", grad_check({&a, &b}, [&](Tape<double>& t) { return ad::add(t, t.param(a), t.param(b)); }));
    ops.emplace_back("sub", grad_check({&a, &b}, [&](Tape<double>& t) { return ad::sub(t, t.param(a), t.param(b)); }));
    ops.emplace_back("mul", grad_check({&a, &b}, [&](Tape<double>& t) { return ad::mul(t, t.param(a), t.param(b)); }));
    ops.emplace_back("scale", grad_check({&a}, [&](Tape<double>& t) { return ad::scale(t, t.param(a), -1.7); }));
    ops.emplace_back("silu", grad_check({&a}, [&](Tape<double>& t) { return ad::silu(t, t.param(a)); }));
    ops.emplace_back("reshape", grad_check({&a}, [&](Tape<double>& t) { return ad::reshape(t, t.param(a), {2, 6}); }));

    auto m = random_tensor({3, 5}, 3), n = random_tensor({5, 2}, 4), v = random_tensor({2}, 5);
    ops.emplace_back("matmul", grad_check({&m, &n}, [&](Tape<double>& t) { return ad::matmul(t, t.param(m), t.param(n)); }));
    ops.emplace_back("transpose", grad_check({&m}, [&](Tape<double>& t) { return ad::transpose(t, t.param(m)); }));
    ops.emplace_back("add_row_vector", grad_check({&m, &n, &v}, [&](Tape<double>& t) {
                         return ad::add_row_vector(t, ad::matmul(t, t.param(m), t.param(n)), t.param(v));
                     }));

    auto x = random_tensor({3, 4, 5}, 6), y = random_tensor({2, 4, 5}, 7), c = random_tensor({3}, 8);
    ops.emplace_back("add_channel_vector", grad_check({&x, &c}, [&](Tape<double>& t) {
                         return ad::add_channel_vector(t, t.param(x), t.param(c));
                     }));
    ops.emplace_back("concat_channels", grad_check({&x, &y}, [&](Tape<double>& t) {
                         return ad::concat_channels(t, t.param(x), t.param(y));
                     }));

    auto img = random_tensor({2, 5, 6}, 10), w3 = random_tensor({3, 2, 3, 3}, 11), w1 = random_tensor({4, 2, 1, 1}, 12),
         cb = random_tensor({3}, 13);
    ops.emplace_back("conv2d", grad_check({&img, &w3, &cb}, [&](Tape<double>& t) {
                         return ad::conv2d(t, t.param(img), t.param(w3), t.param(cb), 1);
                     }));
    ops.emplace_back("conv2d stride 2", grad_check({&img, &w3, &cb}, [&](Tape<double>& t) {
                         return ad::conv2d(t, t.param(img), t.param(w3), t.param(cb), 2);
                     }));
    ops.emplace_back("conv2d 1x1", grad_check({&img, &w1}, [&](Tape<double>& t) {
                         return ad::conv2d(t, t.param(img), t.param(w1), Var{}, 1);
                     }));

    auto lo = random_tensor({3, 2, 3}, 14), wt = random_tensor({3, 2, 2, 2}, 15), bt = random_tensor({2}, 16);
    ops.emplace_back("conv_transpose2x2", grad_check({&lo, &wt, &bt}, [&](Tape<double>& t) {
                         return ad::conv_transpose2x2(t, t.param(lo), t.param(wt), t.param(bt));
                     }));

    auto gx = random_tensor({4, 3, 5}, 17, 2.0), gg = random_tensor({4}, 18), gb = random_tensor({4}, 19);
    for (int groups : {1, 2, 4})
        ops.emplace_back("group_norm/" + std::to_string(groups), grad_check({&gx, &gg, &gb}, [&](Tape<double>& t) {
                             return ad::group_norm(t, t.param(gx), t.param(gg), t.param(gb), groups);
                         }));

    auto q = random_tensor({4, 3}, 20), k = random_tensor({5, 3}, 21), av = random_tensor({5, 2}, 22);
    const std::vector<unsigned char> mask = {1, 1, 0, 1, 0};
    ops.emplace_back("attention", grad_check({&q, &k, &av}, [&](Tape<double>& t) {
                         return ad::attention(t, t.param(q), t.param(k), t.param(av),
                                              std::span<const unsigned char>(mask));
                     }));

    auto table = random_tensor({7, 3}, 23);
    const std::vector<int> ids = {2, 5, 5, 0};
    const std::vector<unsigned char> keep = {1, 0, 1, 1};
    ops.emplace_back("embedding", grad_check({&table}, [&](Tape<double>& t) {
                         return ad::embedding(t, t.param(table), std::span<const int>(ids));
                     }));
    ops.emplace_back("masked_mean_rows", grad_check({&table}, [&](Tape<double>& t) {
                         return ad::masked_mean_rows(t, ad::embedding(t, t.param(table), std::span<const int>(ids)),
                                                     std::span<const unsigned char>(keep));
                     }));

    double worst_op = 0;
    std::string worst_op_name;
    for (const auto& [name, err] : ops)
        if (err >= worst_op) {
            worst_op = err;
            worst_op_name = name;
        }

    // End to end through the whole denoiser, every mode, every tensor probed.
    double worst_model = 0;
    std::string worst_tensor;
    for (auto mode : {ConditioningMode::pooled, ConditioningMode::cross_attn, ConditioningMode::cross_attn_pos}) {
        UNet<double> net(tiny_denoiser(mode), Stream(30));
        Stream init(31);
        for (auto& np : net.params())
            if (np.name.starts_with("head.") || np.name == "attn.wo")
                for (auto& val : np.tensor.value) val = 0.3 * init.normal();
        const auto y_in = Stream(32).normal_vector<double>(192);
        const auto target = Stream(33).normal_vector<double>(192);
        const auto toks = encode(parse_source("a^{2}b", Grammar::formula), 12);
        auto loss_fn = [&](bool grad) {
            Tape<double> tp(grad);
            const Var out = net.forward(tp, tp.constant({1, 8, 24}, y_in), 37, toks);
            const Var l = ad::mse(tp, out, std::span<const double>(target));
            if (grad) tp.backward(l);
            return tp.value(l)[0];
        };
        net.zero_grad();
        loss_fn(true);
        for (auto& np : net.params()) {
            auto& t = np.tensor;
            const std::size_t stride = std::max<std::size_t>(1, t.size() / 6);
            for (std::size_t i = 0; i < t.size(); i += stride) {
                const double numeric = testing::fd_slope(t.value[i], [&] { return loss_fn(false); });
                const double err = testing::rel_error(t.grad[i], numeric, 1e-6);
                if (err > worst_model) {
                    worst_model = err;
                    worst_tensor = std::string(to_string(mode)) + ":" + np.name;
                }
            }
        }
    }
    return {worst_op <= 1e-6 && worst_model <= 1e-4,
            std::to_string(ops.size()) + " op checks, worst " + fmt(worst_op) + " (" + worst_op_name +
                ", <= 1e-6); full model worst " + fmt(worst_model) + " (" + worst_tensor + ", <= 1e-4)"};
}

// 6 ---------------------------------------------------------------------------------

Outcome dtw_oracle() {
    Stream r(6);
    const int pairs = 10000;
    int mismatches = 0;
    for (int i = 0; i < pairs; ++i) {
        const int h = 1 + static_cast<int>(r.uniform_int(6));
        const int wa = 1 + static_cast<int>(r.uniform_int(6));
        const int wb = 1 + static_cast<int>(r.uniform_int(6));
        const auto a = testing::random_binary(h, wa, r), b = testing::random_binary(h, wb, r);
        mismatches += dtw_binary(a, b, 1) != testing::brute_force_dtw(a, b, 1);
    }
    return {mismatches == 0, std::to_string(pairs) + " pairs, " + std::to_string(mismatches) + " mismatches"};
}

// 7 ---------------------------------------------------------------------------------

ImageBuffer shift_rows(const ImageBuffer& img, int s) {
    ImageBuffer out(img.height, img.width, 1.0f);
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            if (r - s >= 0 && r - s < img.height) out.at(r, c) = img.at(r - s, c);
    return out;
}

Outcome metric_identities(const fs::path& work) {
    const auto dir = work / "identities";
    fs::remove_all(dir);
    fs::create_directories(dir / "images");
    const auto canvas = CanvasSpec::formula_default();
    const auto examples = generate_corpus(Grammar::formula, 100, {}, Stream(7), canvas);
    for (std::size_t i = 0; i < examples.size(); ++i) write_pgm(dir / "images" / image_name(i), examples[i].image);
    const auto rep = cmd_eval(dir / "images", dir / "images", dir / "eval");
    int bad = 0;
    for (const auto& row : rep.rows)
        bad += !(row.dtw == 0.0 && row.rmse == 0.0 && row.ssim == 1.0 && row.ergas == 0.0 && row.rase == 0.0 &&
                 row.psnr == kPsnrCap);

    const int max_shift = DtwConfig{}.max_shift(canvas.height);
    int shift_bad = 0, shifted = 0;
    for (const auto& ex : examples)
        for (int s = -max_shift; s <= max_shift; ++s) {
            shift_bad += dtw_distance(shift_rows(ex.image, s), ex.image) != 0.0;
            ++shifted;
        }
    return {rep.rows.size() == 100 && bad == 0 && shift_bad == 0,
            std::to_string(rep.rows.size()) + " self-evaluations, " + std::to_string(bad) + " off identity; " +
                std::to_string(shifted) + " shifts within +-" + std::to_string(max_shift) + " rows, " +
                std::to_string(shift_bad) + " with nonzero DTW"};
}

// 10 --------------------------------------------------------------------------------

Outcome perturbation_monotone(const fs::path& work) {
    const auto dir = work / "perturb";
    fs::remove_all(dir);
    ExperimentConfig cfg;
    cfg.corpus.count = 500;
    cfg.corpus.lengths = {5, 12};
    cfg.corpus.split_counts = {300, 100, 100};
    cfg.seed = 10;
    cmd_generate(cfg, dir / "corpus", false);
    bool ok = true;
    std::string detail;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto rows = cmd_perturb(dir / "corpus", 5, seed, 100, dir / ("seed" + std::to_string(seed)));
        bool mono = rows.size() == 6;
        for (std::size_t k = 0; k < rows.size(); ++k) {
            mono = mono && rows[k].scored == 100 && rows[k].skipped == 0;
            if (k > 0) mono = mono && rows[k].dtw >= rows[k - 1].dtw;
        }
        ok = ok && mono;
        detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ":";
        for (const auto& r : rows) detail += " " + fmt(r.dtw);
    }
    return {ok, "mean DTW for k=0..5, 100 programs: " + detail};
}

// 11 --------------------------------------------------------------------------------

Outcome reproducibility(const fs::path& work) {
    const auto dir = work / "repro";
    fs::remove_all(dir);
    auto cfg = tiny_experiment();
    cfg.train.epochs = 3;
    cfg.ss.enabled = true;
    cfg.ss.p_end = 0.5;
    std::vector<int> snaps = {0, 5, 10};
    auto pipeline = [&](const fs::path& root, bool split_training) {
        cmd_generate(cfg, root / "corpus", false);
        if (split_training) {
            TrainOptions first;
            first.stop_after = 1;
            cmd_train(cfg, root / "corpus", root / "run", first);
            // Continue from a copy that went through a save/load cycle.
            const auto ck = load_checkpoint(root / "run" / "checkpoints" / "epoch_001");
            save_checkpoint(root / "reloaded", ck);
            TrainOptions rest;
            rest.resume = root / "reloaded";
            cmd_train(cfg, root / "corpus", root / "run", rest);
            fs::remove_all(root / "reloaded");
        } else {
            cmd_train(cfg, root / "corpus", root / "run");
        }
        const auto corpus = load_corpus(root / "corpus");
        cmd_sample(root / "run" / "checkpoints" / "epoch_003", request_from_split(corpus, "test"), root / "samples", 5,
                   snaps);
        cmd_eval(root / "samples", root / "corpus" / "images", root / "eval");
        cmd_perturb(root / "corpus", 3, 4, 0, root / "perturb");
    };
    pipeline(dir / "a", false);
    pipeline(dir / "b", false);
    pipeline(dir / "c", true);

    // Wall-clock fields are the only permitted difference.
    auto comparable = [](const fs::path& root) {
        auto files = testing::tree_bytes(root);
        for (auto& [name, bytes] : files) {
            if (!name.ends_with("train_log.jsonl")) continue;
            std::istringstream in(bytes);
            std::string line, cleaned;
            while (std::getline(in, line)) {
                auto j = json::parse(line);
                j.erase("wall_seconds");
                cleaned += j.dump() + "\n";
            }
            bytes = cleaned;
        }
        return files;
    };
    const auto a = comparable(dir / "a"), b = comparable(dir / "b"), c = comparable(dir / "c");
    return {!a.empty() && a == b && a == c, std::to_string(a.size()) + " files; rerun " +
                                                (a == b ? "identical" : "differs") + ", resumed run " +
                                                (a == c ? "identical" : "differs")};
}

// 8, 9 ------------------------------------------------------------------------------

ExperimentConfig desk_experiment(std::uint64_t seed, bool scheduled) {
    auto cfg = desk_config();
    cfg.seed = seed;
    cfg.ss.enabled = scheduled;
    cfg.ss.m = 1;
    cfg.ss.p_start = 0.0;
    cfg.ss.p_end = 0.5;
    return cfg;
}

struct DeskRun {
    double dtw = 0, rmse = 0;
    double train_seconds = 0, sample_seconds = 0;
};

double logged_seconds(const fs::path& log) {
    double total = 0;
    std::ifstream in(log);
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) total += json::parse(line).at("wall_seconds").get<double>();
    return total;
}

fs::path latest_checkpoint(const fs::path& run) {
    fs::path best;
    if (!fs::exists(run / "checkpoints")) return best;
    for (const auto& e : fs::directory_iterator(run / "checkpoints"))
        if (fs::exists(e.path() / "tensors.bin") && (best.empty() || e.path().filename() > best.filename())) best = e.path();
    return best;
}

// Runs (or finishes) one training + sampling + evaluation. Completed stages
// left in `run` by an earlier invocation with the same config are reused.
DeskRun desk_run(const ExperimentConfig& cfg, const fs::path& corpus, const fs::path& run) {
    char ck_name[32];
    std::snprintf(ck_name, sizeof ck_name, "epoch_%03d", cfg.train.epochs);
    const auto final_ck = run / "checkpoints" / ck_name;
    if (!fs::exists(final_ck / "tensors.bin")) {
        TrainOptions opts;
        const auto latest = latest_checkpoint(run);
        if (!latest.empty())
            opts.resume = latest;
        else
            fs::remove_all(run);
        opts.on_epoch = [&](const EpochRecord& r) {
            std::cout << "    " << run.filename().string() << " epoch " << r.epoch << " loss " << fmt(r.loss) << " p "
                      << fmt(r.ss_probability) << " " << fmt(r.wall_seconds) << "s" << std::endl;
        };
        cmd_train(cfg, corpus, run, opts);
    }
    if (config_to_json(load_checkpoint(final_ck).config) != config_to_json(cfg))
        throw Error(ErrorCode::ConfigError, run.string() + " was trained with a different config");

    DeskRun out;
    out.train_seconds = logged_seconds(run / "train_log.jsonl");
    const auto timing = run / "sample_seconds.json";
    if (!fs::exists(timing)) {
        fs::remove_all(run / "samples");
        const auto t0 = std::chrono::steady_clock::now();
        cmd_sample(final_ck, request_from_split(load_corpus(corpus), "test"), run / "samples", 1000 + cfg.seed);
        std::ofstream(timing) << json{{"seconds", elapsed_since(t0)}}.dump() << "\n";
    }
    out.sample_seconds = json::parse(testing::file_bytes(timing)).at("seconds").get<double>();
    const auto rep = cmd_eval(run / "samples", corpus / "images", run / "eval");
    out.dtw = rep.mean.dtw;
    out.rmse = rep.mean.rmse;
    return out;
}

void desk_group(const fs::path& work) {
    fs::create_directories(work);
    const auto corpus = work / "corpus";
    if (!fs::exists(corpus / "manifest.json")) {
        fs::remove_all(corpus);
        cmd_generate(desk_experiment(0, false), corpus, false);
    }
    const std::vector<std::uint64_t> seeds = {0, 1, 2};
    std::vector<DeskRun> base, ss;
    double longest = 0;
    for (auto seed : seeds) {
        for (bool scheduled : {false, true}) {
            const auto name = std::string(scheduled ? "ss" : "baseline") + "_seed" + std::to_string(seed);
            const auto r = desk_run(desk_experiment(seed, scheduled), corpus, work / name);
            std::cout << "  " << name << ": dtw " << fmt(r.dtw) << " rmse " << fmt(r.rmse) << " train "
                      << fmt(r.train_seconds) << "s sample " << fmt(r.sample_seconds) << "s" << std::endl;
            longest = std::max(longest, r.train_seconds + r.sample_seconds);
            (scheduled ? ss : base).push_back(r);
        }
    }
    auto mean = [](const std::vector<DeskRun>& v, double DeskRun::*f) {
        double s = 0;
        for (const auto& r : v) s += r.*f;
        return s / static_cast<double>(v.size());
    };
    const double bd = mean(base, &DeskRun::dtw), sd = mean(ss, &DeskRun::dtw);
    const double br = mean(base, &DeskRun::rmse), sr = mean(ss, &DeskRun::rmse);
    report(8, "scheduled sampling does not hurt test DTW or RMSE", [&] {
        return Outcome{sd <= bd && sr <= br && longest <= 3600.0,
                       "mean DTW " + fmt(sd) + " vs baseline " + fmt(bd) + ", mean RMSE " + fmt(sr) + " vs " + fmt(br) +
                           ", longest run " + fmt(longest / 60) + " min (<= 60)"};
    });
    const double bt = mean(base, &DeskRun::train_seconds), st = mean(ss, &DeskRun::train_seconds);
    report(9, "scheduled sampling training overhead", [&] {
        return Outcome{st <= 1.15 * bt, "mean train time " + fmt(st) + "s vs " + fmt(bt) + "s, ratio " +
                                            fmt(st / bt) + " (<= 1.15)"};
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string group = "fast";
    std::string work = "acceptance_work";
    std::vector<int> only;
    app.add_option("--group", group, "fast or desk")->check(CLI::IsMember({"fast", "desk"}));
    app.add_option("--work", work, "scratch directory");
    app.add_option("--only", only, "run only these fast-group criteria");
    CLI11_PARSE(app, argc, argv);

    const fs::path dir(work);
    fs::create_directories(dir);
    auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
    try {
        if (group == "fast") {
            if (wanted(1)) report(1, "forward-process moments", forward_moments);
            if (wanted(2)) report(2, "posterior mean identity", gaussian_identity);
            if (wanted(3)) report(3, "degenerate scheduled sampling is plain training", [&] { return degeneracy(dir); });
            if (wanted(4)) report(4, "rollout is a constant for the gradient", stop_gradient);
            if (wanted(5)) report(5, "gradients match finite differences", gradients);
            if (wanted(6)) report(6, "DTW equals exhaustive alignment", dtw_oracle);
            if (wanted(7)) report(7, "metric identities and shift invariance", [&] { return metric_identities(dir); });
            if (wanted(10)) report(10, "perturbation curve is monotone", [&] { return perturbation_monotone(dir); });
            if (wanted(11)) report(11, "reproducible pipeline and resume", [&] { return reproducibility(dir); });
        } else {
            desk_group(dir);
        }
    } catch (const std::exception& e) {
        std::cout << "FAIL " << group << " group aborted: " << e.what() << std::endl;
        return 1;
    }
    return failures == 0 ? 0 : 1;
}
