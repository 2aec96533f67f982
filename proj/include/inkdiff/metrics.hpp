#pragma once

// Image comparison: column-series DTW on binarised images, RMSE, and the
// classical single-band similarity metrics. Intensities are taken on the
// 0-255 scale (value * 255) for everything except binarisation.

#include "inkdiff/image.hpp"

#include <span>
#include <string>
#include <vector>

namespace inkdiff {

struct BinaryImage {
    int height = 0;
    int width = 0;
    std::vector<unsigned char> bits;  // 1 = ink

    BinaryImage() = default;
    BinaryImage(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}
    unsigned char at(int r, int c) const { return bits[static_cast<std::size_t>(r) * width + c]; }
    unsigned char& at(int r, int c) { return bits[static_cast<std::size_t>(r) * width + c]; }
    bool operator==(const BinaryImage&) const = default;
};

struct DtwConfig {
    double shift_fraction = 0.10;
    float threshold = 0.5f;

    int max_shift(int height) const;
    void validate() const;
};

/// Ink where intensity < threshold.
BinaryImage binarize(const ImageBuffer& img, float threshold = 0.5f);
/// Binary images are read back as 0 = ink, 1 = paper.
ImageBuffer to_image(const BinaryImage& b);

/// min over |s| <= max_shift of the Euclidean distance between a and b moved
/// down by s. Rows are compared on the union of both supports, so ink pushed
/// off the canvas still counts as a mismatch and the cost is symmetric.
double column_cost(std::span<const unsigned char> a, std::span<const unsigned char> b, int max_shift);

/// DTW over the column sequences with steps (1,0), (0,1), (1,1), no band and
/// no normalisation; local cost is column_cost.
double dtw_binary(const BinaryImage& a, const BinaryImage& b, int max_shift);
double dtw_distance(const ImageBuffer& gen, const ImageBuffer& gt, const DtwConfig& cfg = {});

double rmse(const ImageBuffer& gen, const ImageBuffer& gt);

inline constexpr double kPsnrCap = 100.0;

double ssim(const ImageBuffer& gen, const ImageBuffer& gt);
double psnr(const ImageBuffer& gen, const ImageBuffer& gt);
double uqi(const ImageBuffer& gen, const ImageBuffer& gt);
double ergas(const ImageBuffer& gen, const ImageBuffer& gt);
double scc(const ImageBuffer& gen, const ImageBuffer& gt);
double rase(const ImageBuffer& gen, const ImageBuffer& gt);

struct ClassicalMetrics {
    double ssim = 0, psnr = 0, uqi = 0, ergas = 0, scc = 0, rase = 0;
};

ClassicalMetrics classical_metrics(const ImageBuffer& gen, const ImageBuffer& gt);

struct MetricRow {
    std::string name;
    double dtw = 0, rmse = 0, ssim = 0, psnr = 0, uqi = 0, ergas = 0, scc = 0, rase = 0;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    MetricRow mean;  // name "mean"
};

/// Column order used by reports.
const std::vector<std::string>& metric_names();
double metric_value(const MetricRow& row, std::string_view metric);

MetricRow score_pair(const ImageBuffer& gen, const ImageBuffer& gt, const DtwConfig& cfg = {});
MetricReport score_all(std::span<const ImageBuffer> gen, std::span<const ImageBuffer> gt,
                       std::span<const std::string> names, const DtwConfig& cfg = {});

}  // namespace inkdiff
