#pragma once

#include "inkdiff/autodiff.hpp"
#include "inkdiff/metrics.hpp"
#include "inkdiff/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

namespace testing {

inline std::filesystem::path scratch_dir(const std::string& name) {
    const char* env = std::getenv("INKDIFF_TEST_TMP");
    std::filesystem::path base = env ? env : std::filesystem::temp_directory_path() / "inkdiff_tests";
    auto dir = base / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Every regular file under `dir`, relative path -> contents.
inline std::vector<std::pair<std::string, std::string>> tree_bytes(const std::filesystem::path& dir) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out.emplace_back(std::filesystem::relative(e.path(), dir).string(), file_bytes(e.path()));
    std::sort(out.begin(), out.end());
    return out;
}

/// Five-point central difference of `f` along the coordinate `x`, which is
/// restored afterwards. Truncation error is O(h^4).
inline double fd_slope(double& x, const std::function<double()>& f, double h = 1e-3) {
    const double keep = x;
    x = keep + 2 * h;
    const double p2 = f();
    x = keep + h;
    const double p1 = f();
    x = keep - h;
    const double m1 = f();
    x = keep - 2 * h;
    const double m2 = f();
    x = keep;
    return (-p2 + 8 * p1 - 8 * m1 + m2) / (12 * h);
}

/// |a - n| / max(|a|, |n|, floor).
inline double rel_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Largest relative error between an analytic gradient and finite
/// differences of `f` around `x`.
inline double max_fd_error(std::vector<double>& x, const std::vector<double>& analytic,
                           const std::function<double()>& f, double h = 1e-3, double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        worst = std::max(worst, rel_error(analytic.empty() ? 0.0 : analytic[i], fd_slope(x[i], f, h), floor));
    return worst;
}

inline inkdiff::Tensor<double> random_tensor(inkdiff::Shape s, std::uint64_t seed, double scale = 1.0) {
    inkdiff::Tensor<double> t(std::move(s));
    inkdiff::Stream r(seed);
    for (auto& v : t.value) v = scale * r.normal();
    return t;
}

using Builder = std::function<inkdiff::Var(inkdiff::Tape<double>&)>;

/// Worst relative error between backprop and central differences of
/// mse(build(), target) over every entry of every tensor in `params`.
inline double grad_check(std::vector<inkdiff::Tensor<double>*> params, const Builder& build, std::uint64_t seed = 99) {
    using namespace inkdiff;
    std::vector<double> target;
    {
        Tape<double> probe(false);
        const Var out = build(probe);
        Stream r(seed);
        target.resize(probe.value(out).size());
        for (auto& v : target) v = r.normal();
    }
    auto loss = [&] {
        Tape<double> tp(false);
        const Var out = build(tp);
        return tp.value(ad::mse(tp, out, std::span<const double>(target)))[0];
    };
    for (auto* p : params) p->zero_grad();
    {
        Tape<double> tp(true);
        const Var out = build(tp);
        tp.backward(ad::mse(tp, out, std::span<const double>(target)));
    }
    double worst = 0.0;
    for (auto* p : params) worst = std::max(worst, max_fd_error(p->value, p->grad, loss, 1e-3, 1e-6));
    return worst;
}

inline std::vector<unsigned char> column(const inkdiff::BinaryImage& b, int c) {
    std::vector<unsigned char> out(static_cast<std::size_t>(b.height));
    for (int r = 0; r < b.height; ++r) out[static_cast<std::size_t>(r)] = b.at(r, c);
    return out;
}

/// Shifted column comparison over every row either column can reach.
inline double column_cost_oracle(const std::vector<unsigned char>& a, const std::vector<unsigned char>& b, int k) {
    const int h = static_cast<int>(a.size());
    double best = std::numeric_limits<double>::infinity();
    for (int s = -k; s <= k; ++s) {
        double sq = 0;
        for (int r = -k; r < h + k; ++r) {
            const int av = (r >= 0 && r < h) ? a[static_cast<std::size_t>(r)] : 0;
            const int br = r - s;
            const int bv = (br >= 0 && br < h) ? b[static_cast<std::size_t>(br)] : 0;
            sq += (av - bv) * (av - bv);
        }
        best = std::min(best, std::sqrt(sq));
    }
    return best;
}

/// Minimum cost over every monotone alignment path, enumerated explicitly.
inline double brute_force_dtw(const inkdiff::BinaryImage& a, const inkdiff::BinaryImage& b, int k) {
    std::vector<std::vector<double>> cost(static_cast<std::size_t>(a.width),
                                          std::vector<double>(static_cast<std::size_t>(b.width)));
    for (int i = 0; i < a.width; ++i)
        for (int j = 0; j < b.width; ++j) cost[i][j] = column_cost_oracle(column(a, i), column(b, j), k);
    double best = std::numeric_limits<double>::infinity();
    std::function<void(int, int, double)> walk = [&](int i, int j, double acc) {
        acc += cost[i][j];
        if (i == a.width - 1 && j == b.width - 1) {
            best = std::min(best, acc);
            return;
        }
        if (i + 1 < a.width) walk(i + 1, j, acc);
        if (j + 1 < b.width) walk(i, j + 1, acc);
        if (i + 1 < a.width && j + 1 < b.width) walk(i + 1, j + 1, acc);
    };
    walk(0, 0, 0.0);
    return best;
}

inline inkdiff::BinaryImage random_binary(int h, int w, inkdiff::Stream& r, double density = 0.4) {
    inkdiff::BinaryImage b(h, w);
    for (auto& v : b.bits) v = r.uniform() < density;
    return b;
}

}  // namespace testing
