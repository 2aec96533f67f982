#pragma once

// Experiment plumbing behind the command-line tool: configuration, corpus
// directories, checkpoints and the five pipeline commands.

#include "inkdiff/denoiser.hpp"
#include "inkdiff/diffusion.hpp"
#include "inkdiff/markup.hpp"
#include "inkdiff/metrics.hpp"
#include "inkdiff/scheduled_sampling.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace inkdiff {

namespace fs = std::filesystem;

struct CorpusConfig {
    int count = 1250;
    LengthRange lengths;
    std::vector<double> split{0.8, 0.1, 0.1};  // train / val / test fractions
    std::vector<int> split_counts;             // overrides `split` when non-empty
};

struct ScheduleConfig {
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

struct TrainConfig {
    double lr = 1e-4;
    long warmup = 500;
    int epochs = 100;
    int batch_size = 16;
    double weight_decay = 0.01;
};

struct ExperimentConfig {
    Grammar grammar = Grammar::formula;
    CanvasSpec canvas;
    CorpusConfig corpus;
    ScheduleConfig schedule;
    DenoiserConfig model;  // height/width always follow the canvas
    TrainConfig train;
    ScheduledSamplingConfig ss;
    SigmaMode sigma_mode = SigmaMode::beta;
    std::uint64_t seed = 0;

    /// Throws ConfigError on the first violated constraint.
    void validate() const;
    VarianceSchedule make_schedule() const;
    DenoiserConfig denoiser() const;  // `model` sized to the canvas
};

/// Small-CPU preset: 32x96 formulas, T = 100 with endpoints scaled from the
/// T = 1000 defaults, 1000 train / 128 test, 30 epochs, batch 16, lr 1e-3
/// with 200 warmup steps.
ExperimentConfig desk_config();

/// JSON text <-> config. Missing keys keep their defaults; unknown keys are
/// rejected.
ExperimentConfig config_from_json(std::string_view text, const ExperimentConfig& base = {});
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const fs::path& path, const ExperimentConfig& base = {});

// Corpus --------------------------------------------------------------------------

struct Corpus {
    Grammar grammar = Grammar::formula;
    CanvasSpec canvas;
    std::uint64_t seed = 0;
    std::vector<MarkupProgram> programs;
    std::vector<ImageBuffer> images;
    std::vector<int> train, val, test;

    std::size_t size() const { return programs.size(); }
};

/// Seeded shuffle of [0, n) cut into consecutive train/val/test runs.
void split_indices(int n, const CorpusConfig& cfg, const Stream& rng, std::vector<int>& train, std::vector<int>& val,
                   std::vector<int>& test);

std::string image_name(std::size_t index);  // "000042.pgm"

/// Writes manifest.json, markup.txt and images/. Refuses a non-empty `out`
/// unless `force`.
Corpus cmd_generate(const ExperimentConfig& cfg, const fs::path& out, bool force);
Corpus load_corpus(const fs::path& dir);

// Checkpoints -----------------------------------------------------------------------

inline constexpr int kCheckpointFormat = 1;

struct Checkpoint {
    ExperimentConfig config;
    int epoch = 0;  // completed epochs
    long step = 0;  // optimizer steps taken
    std::vector<double> betas;
    std::vector<NamedParam<float>> params;
    std::vector<std::vector<float>> first_moments, second_moments;
};

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& dir);

/// Model with the checkpoint's weights.
std::unique_ptr<UNet<float>> restore_model(const Checkpoint& ckpt);

// Training ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double loss = 0.0;
    double ss_probability = 0.0;  // ramp value at the epoch's last step
    double wall_seconds = 0.0;
};

struct TrainOptions {
    std::optional<fs::path> resume;  // checkpoint directory
    std::optional<int> stop_after;   // stop once this many epochs are complete
    bool force = false;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    std::vector<EpochRecord> log;  // epochs run by this call
    fs::path last_checkpoint;
    double train_seconds = 0.0;    // sum of epoch wall times of this call
};

/// Trains on corpus.train, writing out/train_log.jsonl and
/// out/checkpoints/epoch_NNN after every epoch.
TrainResult cmd_train(const ExperimentConfig& cfg, const fs::path& corpus_dir, const fs::path& out,
                      const TrainOptions& opts = {});

// Sampling, evaluation, perturbation ------------------------------------------------

struct SampleRequest {
    std::vector<MarkupProgram> programs;
    std::vector<std::string> names;  // output file names, index-aligned
};

SampleRequest request_from_split(const Corpus& corpus, std::string_view split);
SampleRequest request_from_sources(const std::vector<std::string>& sources, Grammar grammar);

/// Writes one PGM per request entry; with snapshots, also
/// trajectories/<stem>/step_K.pgm. Example i uses
/// Stream(seed).derive({tag("sample"), i}).
void cmd_sample(const fs::path& checkpoint, const SampleRequest& req, const fs::path& out, std::uint64_t seed,
                std::span<const int> snapshot_steps = {}, bool force = false);

/// Pairs every PGM in `generated` with the same-named file in `reference`
/// and writes metrics.csv and metrics.json into `out`.
MetricReport cmd_eval(const fs::path& generated, const fs::path& reference, const fs::path& out,
                      const DtwConfig& cfg = {});

void write_metric_report(const MetricReport& rep, const fs::path& out, const std::string& config_json = {});

struct PerturbRow {
    int k = 0;
    int scored = 0;
    int skipped = 0;  // programs with fewer than k leaves
    double dtw = 0.0;
    double rmse = 0.0;
    bool operator==(const PerturbRow&) const = default;
};

/// For k = 0..k_max perturbs the first `limit` test programs (all when
/// limit <= 0), renders and scores them against the unperturbed images.
/// Writes perturbation.csv when `out` is non-empty.
std::vector<PerturbRow> cmd_perturb(const fs::path& corpus_dir, int k_max, std::uint64_t seed, int limit,
                                    const fs::path& out = {});

/// Fractional k at which the curve reaches `dtw`, by linear interpolation;
/// clamped to [0, k_max].
double equivalent_symbols_removed(const std::vector<PerturbRow>& curve, double dtw);

}  // namespace inkdiff
