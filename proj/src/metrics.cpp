#include "inkdiff/metrics.hpp"

#include "inkdiff/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

namespace inkdiff {

namespace {

void require_same_shape(const ImageBuffer& a, const ImageBuffer& b) {
    if (a.height != b.height || a.width != b.width)
        throw Error(ErrorCode::ShapeMismatch, std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                                                  std::to_string(b.height) + "x" + std::to_string(b.width));
}

// Row-major 0..255 copy.
std::vector<double> scaled(const ImageBuffer& img) {
    std::vector<double> out(img.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 255.0 * img.pixels[i];
    return out;
}

double mean_squared_error(const ImageBuffer& gen, const ImageBuffer& gt) {
    require_same_shape(gen, gt);
    if (gen.size() == 0) throw Error(ErrorCode::ShapeMismatch, "empty images");
    double acc = 0.0;
    for (std::size_t i = 0; i < gen.size(); ++i) {
        const double d = 255.0 * gen.pixels[i] - 255.0 * gt.pixels[i];
        acc += d * d;
    }
    return acc / static_cast<double>(gen.size());
}

// Box sums over every fully contained win x win window.
struct WindowSums {
    int rows, cols;
    std::vector<double> sum;
};

WindowSums box_sums(const std::vector<double>& v, int h, int w, int win) {
    WindowSums out{h - win + 1, w - win + 1, {}};
    out.sum.assign(static_cast<std::size_t>(out.rows) * out.cols, 0.0);
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) {
            double s = 0.0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) s += v[static_cast<std::size_t>(r + i) * w + c + j];
            out.sum[static_cast<std::size_t>(r) * out.cols + c] = s;
        }
    return out;
}

std::vector<double> product(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

int block_size(const ImageBuffer& img) { return std::min({8, img.height, img.width}); }

}  // namespace

int DtwConfig::max_shift(int height) const { return static_cast<int>(std::floor(shift_fraction * height)); }

void DtwConfig::validate() const {
    if (!(shift_fraction >= 0.0 && shift_fraction < 1.0)) throw Error(ErrorCode::ConfigError, "shift_fraction outside [0,1)");
    if (!(threshold > 0.0f && threshold < 1.0f)) throw Error(ErrorCode::ConfigError, "threshold outside (0,1)");
}

BinaryImage binarize(const ImageBuffer& img, float threshold) {
    if (!(threshold > 0.0f && threshold < 1.0f)) throw Error(ErrorCode::InvalidRange, "threshold outside (0,1)");
    BinaryImage b(img.height, img.width);
    for (std::size_t i = 0; i < img.size(); ++i) b.bits[i] = img.pixels[i] < threshold ? 1 : 0;
    return b;
}

ImageBuffer to_image(const BinaryImage& b) {
    ImageBuffer img(b.height, b.width);
    for (std::size_t i = 0; i < b.bits.size(); ++i) img.pixels[i] = b.bits[i] ? 0.0f : 1.0f;
    return img;
}

double column_cost(std::span<const unsigned char> a, std::span<const unsigned char> b, int max_shift) {
    if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "column heights differ");
    if (max_shift < 0) throw Error(ErrorCode::InvalidRange, "negative shift window");
    const int h = static_cast<int>(a.size());
    auto at = [h](std::span<const unsigned char> col, int r) { return r >= 0 && r < h ? col[static_cast<std::size_t>(r)] : 0; };
    int best = std::numeric_limits<int>::max();
    for (int s = -max_shift; s <= max_shift; ++s) {
        int mismatches = 0;
        for (int r = std::min(0, s); r < std::max(h, h + s); ++r) mismatches += at(a, r) != at(b, r - s);
        best = std::min(best, mismatches);
    }
    return std::sqrt(static_cast<double>(best));
}

namespace {

using Wide = unsigned __int128;
constexpr int kMaskOffset = 32;

std::vector<Wide> column_masks(const BinaryImage& img) {
    std::vector<Wide> out(static_cast<std::size_t>(img.width), 0);
    for (int c = 0; c < img.width; ++c)
        for (int r = 0; r < img.height; ++r)
            if (img.at(r, c)) out[static_cast<std::size_t>(c)] |= Wide(1) << (kMaskOffset + r);
    return out;
}

int popcount(Wide x) {
    return std::popcount(static_cast<std::uint64_t>(x)) + std::popcount(static_cast<std::uint64_t>(x >> 64));
}

}  // namespace

double dtw_binary(const BinaryImage& a, const BinaryImage& b, int max_shift) {
    if (a.height != b.height) throw Error(ErrorCode::ShapeMismatch, "DTW needs equal heights");
    if (max_shift < 0) throw Error(ErrorCode::InvalidRange, "negative shift window");
    const int n = a.width, m = b.width;
    if (n == 0 || m == 0) throw Error(ErrorCode::ShapeMismatch, "DTW of an empty image");

    std::vector<double> cost(static_cast<std::size_t>(n) * m);
    if (a.height <= 64 && max_shift <= kMaskOffset) {
        const auto ma = column_masks(a);
        const auto mb = column_masks(b);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) {
                int best = std::numeric_limits<int>::max();
                for (int s = -max_shift; s <= max_shift; ++s) {
                    const Wide shifted = s >= 0 ? mb[static_cast<std::size_t>(j)] << s : mb[static_cast<std::size_t>(j)] >> -s;
                    best = std::min(best, popcount(ma[static_cast<std::size_t>(i)] ^ shifted));
                }
                cost[static_cast<std::size_t>(i) * m + j] = std::sqrt(static_cast<double>(best));
            }
    } else {
        std::vector<unsigned char> ca(static_cast<std::size_t>(a.height)), cb(ca.size());
        for (int i = 0; i < n; ++i) {
            for (int r = 0; r < a.height; ++r) ca[static_cast<std::size_t>(r)] = a.at(r, i);
            for (int j = 0; j < m; ++j) {
                for (int r = 0; r < b.height; ++r) cb[static_cast<std::size_t>(r)] = b.at(r, j);
                cost[static_cast<std::size_t>(i) * m + j] = column_cost(ca, cb, max_shift);
            }
        }
    }

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> prev(static_cast<std::size_t>(m), inf), cur(static_cast<std::size_t>(m));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            double best;
            if (i == 0 && j == 0)
                best = 0.0;
            else {
                best = prev[static_cast<std::size_t>(j)];
                if (j > 0) best = std::min({best, cur[static_cast<std::size_t>(j - 1)], prev[static_cast<std::size_t>(j - 1)]});
            }
            cur[static_cast<std::size_t>(j)] = best + cost[static_cast<std::size_t>(i) * m + j];
        }
        std::swap(prev, cur);
    }
    return prev[static_cast<std::size_t>(m - 1)];
}

double dtw_distance(const ImageBuffer& gen, const ImageBuffer& gt, const DtwConfig& cfg) {
    cfg.validate();
    if (gen.height != gt.height) throw Error(ErrorCode::ShapeMismatch, "DTW needs equal heights");
    return dtw_binary(binarize(gen, cfg.threshold), binarize(gt, cfg.threshold), cfg.max_shift(gen.height));
}

double rmse(const ImageBuffer& gen, const ImageBuffer& gt) { return std::sqrt(mean_squared_error(gen, gt)); }

double psnr(const ImageBuffer& gen, const ImageBuffer& gt) {
    const double mse = mean_squared_error(gen, gt);
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

double ssim(const ImageBuffer& gen, const ImageBuffer& gt) {
    require_same_shape(gen, gt);
    const int h = gen.height, w = gen.width;
    int win = std::min({11, h, w});
    if (win % 2 == 0) --win;
    if (win < 1) throw Error(ErrorCode::ShapeMismatch, "empty images");
    const int half = win / 2;
    std::vector<double> kernel(static_cast<std::size_t>(win) * win);
    double ksum = 0.0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            const double di = i - half, dj = j - half;
            const double v = std::exp(-(di * di + dj * dj) / (2.0 * 1.5 * 1.5));
            kernel[static_cast<std::size_t>(i) * win + j] = v;
            ksum += v;
        }
    for (auto& v : kernel) v /= ksum;

    const auto x = scaled(gen);
    const auto y = scaled(gt);
    const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
    double acc = 0.0;
    int count = 0;
    for (int r = 0; r + win <= h; ++r)
        for (int c = 0; c + win <= w; ++c) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    const double k = kernel[static_cast<std::size_t>(i) * win + j];
                    const double a = x[static_cast<std::size_t>(r + i) * w + c + j];
                    const double b = y[static_cast<std::size_t>(r + i) * w + c + j];
                    mx += k * a;
                    my += k * b;
                    xx += k * a * a;
                    yy += k * b * b;
                    xy += k * a * b;
                }
            const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
            acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    return acc / count;
}

double uqi(const ImageBuffer& gen, const ImageBuffer& gt) {
    require_same_shape(gen, gt);
    const int win = block_size(gen);
    const auto x = scaled(gt);
    const auto y = scaled(gen);
    const int h = gen.height, w = gen.width;
    const double n = static_cast<double>(win) * win;
    const auto sx = box_sums(x, h, w, win), sy = box_sums(y, h, w, win);
    const auto sxx = box_sums(product(x, x), h, w, win), syy = box_sums(product(y, y), h, w, win);
    const auto sxy = box_sums(product(x, y), h, w, win);
    double acc = 0.0;
    for (std::size_t i = 0; i < sx.sum.size(); ++i) {
        const double a = sx.sum[i], b = sy.sum[i];
        const double num = 4.0 * (n * sxy.sum[i] - a * b) * a * b;
        const double d1 = n * (sxx.sum[i] + syy.sum[i]) - a * a - b * b;
        const double d2 = a * a + b * b;
        double q = 1.0;
        if (d1 * d2 != 0.0)
            q = num / (d1 * d2);
        else if (d1 == 0.0 && d2 != 0.0)
            q = 2.0 * a * b / d2;
        acc += q;
    }
    return acc / static_cast<double>(sx.sum.size());
}

namespace {

// Per-window (local RMSE / local reference mean), skipping zero-mean windows.
double mean_relative_rmse(const ImageBuffer& gen, const ImageBuffer& gt) {
    require_same_shape(gen, gt);
    const int win = block_size(gen);
    const auto x = scaled(gt);
    const auto y = scaled(gen);
    std::vector<double> sq(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) sq[i] = (x[i] - y[i]) * (x[i] - y[i]);
    const auto err = box_sums(sq, gen.height, gen.width, win);
    const auto ref = box_sums(x, gen.height, gen.width, win);
    const double n = static_cast<double>(win) * win;
    double acc = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < err.sum.size(); ++i) {
        const double mean = ref.sum[i] / n;
        if (mean == 0.0) continue;
        acc += std::sqrt(err.sum[i] / n) / mean;
        ++count;
    }
    return count ? acc / count : 0.0;
}

}  // namespace

double ergas(const ImageBuffer& gen, const ImageBuffer& gt) { return 100.0 * 4.0 * mean_relative_rmse(gen, gt); }

double rase(const ImageBuffer& gen, const ImageBuffer& gt) { return 100.0 * mean_relative_rmse(gen, gt); }

double scc(const ImageBuffer& gen, const ImageBuffer& gt) {
    require_same_shape(gen, gt);
    const int h = gen.height, w = gen.width;
    if (h < 3 || w < 3) throw Error(ErrorCode::ShapeMismatch, "SCC needs at least 3x3 images");
    auto high_pass = [h, w](const std::vector<double>& v) {
        std::vector<double> out;
        out.reserve(static_cast<std::size_t>(h - 2) * (w - 2));
        for (int r = 1; r + 1 < h; ++r)
            for (int c = 1; c + 1 < w; ++c) {
                double s = 0.0;
                for (int i = -1; i <= 1; ++i)
                    for (int j = -1; j <= 1; ++j) s += v[static_cast<std::size_t>(r + i) * w + c + j];
                out.push_back(9.0 * v[static_cast<std::size_t>(r) * w + c] - s);
            }
        return out;
    };
    const auto a = high_pass(scaled(gen));
    const auto b = high_pass(scaled(gt));
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double saa = 0, sbb = 0, sab = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
        sab += (a[i] - ma) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return a == b ? 1.0 : 0.0;
    return sab / std::sqrt(saa * sbb);
}

ClassicalMetrics classical_metrics(const ImageBuffer& gen, const ImageBuffer& gt) {
    return {ssim(gen, gt), psnr(gen, gt), uqi(gen, gt), ergas(gen, gt), scc(gen, gt), rase(gen, gt)};
}

const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names{"dtw", "rmse", "ssim", "psnr", "uqi", "ergas", "scc", "rase"};
    return names;
}

double metric_value(const MetricRow& row, std::string_view metric) {
    if (metric == "dtw") return row.dtw;
    if (metric == "rmse") return row.rmse;
    if (metric == "ssim") return row.ssim;
    if (metric == "psnr") return row.psnr;
    if (metric == "uqi") return row.uqi;
    if (metric == "ergas") return row.ergas;
    if (metric == "scc") return row.scc;
    if (metric == "rase") return row.rase;
    throw Error(ErrorCode::ConfigError, "unknown metric '" + std::string(metric) + "'");
}

MetricRow score_pair(const ImageBuffer& gen, const ImageBuffer& gt, const DtwConfig& cfg) {
    MetricRow row;
    row.dtw = dtw_distance(gen, gt, cfg);
    row.rmse = rmse(gen, gt);
    const auto c = classical_metrics(gen, gt);
    row.ssim = c.ssim;
    row.psnr = c.psnr;
    row.uqi = c.uqi;
    row.ergas = c.ergas;
    row.scc = c.scc;
    row.rase = c.rase;
    return row;
}

MetricReport score_all(std::span<const ImageBuffer> gen, std::span<const ImageBuffer> gt,
                       std::span<const std::string> names, const DtwConfig& cfg) {
    if (gen.size() != gt.size() || names.size() != gen.size())
        throw Error(ErrorCode::ShapeMismatch, "misaligned image sets: " + std::to_string(gen.size()) + " generated, " +
                                                  std::to_string(gt.size()) + " reference");
    MetricReport rep;
    rep.mean.name = "mean";
    for (std::size_t i = 0; i < gen.size(); ++i) {
        MetricRow row = score_pair(gen[i], gt[i], cfg);
        row.name = names[i];
        rep.rows.push_back(row);
    }
    if (!rep.rows.empty()) {
        const double n = static_cast<double>(rep.rows.size());
        for (const auto& r : rep.rows) {
            rep.mean.dtw += r.dtw;
            rep.mean.rmse += r.rmse;
            rep.mean.ssim += r.ssim;
            rep.mean.psnr += r.psnr;
            rep.mean.uqi += r.uqi;
            rep.mean.ergas += r.ergas;
            rep.mean.scc += r.scc;
            rep.mean.rase += r.rase;
        }
        rep.mean.dtw /= n;
        rep.mean.rmse /= n;
        rep.mean.ssim /= n;
        rep.mean.psnr /= n;
        rep.mean.uqi /= n;
        rep.mean.ergas /= n;
        rep.mean.scc /= n;
        rep.mean.rase /= n;
    }
    return rep;
}

}  // namespace inkdiff
