// inkdiff command-line tool: generate, train, sample, eval, perturb.

#include "inkdiff/error.hpp"
#include "inkdiff/harness.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

using namespace inkdiff;

struct Common {
    std::string preset = "default";
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool force = false;

    void attach(CLI::App* cmd, bool out_required = true) {
        cmd->add_option("--preset", preset, "base settings before --config")
            ->check(CLI::IsMember({"default", "desk"}));
        cmd->add_option("--config", config, "experiment config (JSON), applied over the preset");
        cmd->add_option("--seed", seed, "override the config seed");
        auto* o = cmd->add_option("--out", out, "output directory");
        if (out_required) o->required();
        cmd->add_flag("--force", force, "overwrite existing outputs");
    }

    ExperimentConfig unchecked() const {
        const ExperimentConfig base = preset == "desk" ? desk_config() : ExperimentConfig{};
        ExperimentConfig cfg = config.empty() ? base : load_config(config, base);
        if (seed) cfg.seed = *seed;
        return cfg;
    }

    ExperimentConfig load() const {
        ExperimentConfig cfg = unchecked();
        cfg.validate();
        return cfg;
    }
};

std::vector<int> parse_steps(const std::string& list) {
    std::vector<int> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stoi(item));
    return out;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::FormatError, "cannot read " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(line);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Markup-to-image diffusion toolkit"};
    app.require_subcommand(1);

    Common gen_opts;
    std::optional<int> count;
    auto* gen = app.add_subcommand("generate", "build a rendered markup corpus");
    gen_opts.attach(gen);
    gen->add_option("--count", count, "override corpus.count");

    Common train_opts;
    std::string train_corpus, resume;
    std::optional<int> stop_after;
    auto* train = app.add_subcommand("train", "train a denoiser on a corpus");
    train_opts.attach(train);
    train->add_option("--corpus", train_corpus, "corpus directory")->required();
    train->add_option("--resume", resume, "checkpoint directory to continue from");
    train->add_option("--stop-after", stop_after, "stop once this many epochs are complete");

    Common sample_opts;
    std::string checkpoint, sample_corpus, split = "test", markup_file, snapshots;
    std::vector<std::string> markup;
    auto* smp = app.add_subcommand("sample", "generate images from markup");
    sample_opts.attach(smp);
    smp->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    smp->add_option("--corpus", sample_corpus, "take markup from this corpus");
    smp->add_option("--split", split, "corpus split: train, val, test or all");
    smp->add_option("--markup", markup, "markup source (repeatable)");
    smp->add_option("--markup-file", markup_file, "file with one markup source per line");
    smp->add_option("--snapshots", snapshots, "comma-separated reverse-step counts to dump");

    Common eval_opts;
    std::string generated, reference;
    double shift_fraction = 0.10;
    float threshold = 0.5f;
    auto* ev = app.add_subcommand("eval", "score generated images against references");
    eval_opts.attach(ev);
    ev->add_option("--generated", generated, "directory of generated PGMs")->required();
    ev->add_option("--reference", reference, "directory of reference PGMs")->required();
    ev->add_option("--shift-fraction", shift_fraction, "DTW vertical slack as a fraction of height");
    ev->add_option("--threshold", threshold, "binarisation threshold");

    Common pert_opts;
    std::string pert_corpus, compare;
    int k_max = 5, limit = 0;
    auto* pert = app.add_subcommand("perturb", "score renders with k symbols removed");
    pert_opts.attach(pert);
    pert->add_option("--corpus", pert_corpus, "corpus directory")->required();
    pert->add_option("--k-max", k_max, "largest number of removed symbols");
    pert->add_option("--limit", limit, "use only the first N test programs");
    pert->add_option("--compare", compare, "metrics.json of a model to place on the curve");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            ExperimentConfig cfg = gen_opts.unchecked();
            if (count) {
                cfg.corpus.count = *count;
                cfg.corpus.split_counts.clear();
            }
            const Corpus c = cmd_generate(cfg, gen_opts.out, gen_opts.force);
            std::cout << "wrote " << c.size() << " examples (" << c.train.size() << " train, " << c.val.size() << " val, "
                      << c.test.size() << " test) to " << gen_opts.out << "\n";
        } else if (*train) {
            const ExperimentConfig cfg = train_opts.load();
            TrainOptions to;
            if (!resume.empty()) to.resume = resume;
            to.stop_after = stop_after;
            to.force = train_opts.force;
            to.on_epoch = [](const EpochRecord& r) {
                std::cout << "epoch " << r.epoch << " loss " << r.loss << " p_ss " << r.ss_probability << " ("
                          << r.wall_seconds << " s)" << std::endl;
            };
            const auto res = cmd_train(cfg, train_corpus, train_opts.out, to);
            std::cout << "last checkpoint: " << res.last_checkpoint.string() << "\n";
        } else if (*smp) {
            const Checkpoint ck = load_checkpoint(checkpoint);
            SampleRequest req;
            if (!sample_corpus.empty()) {
                req = request_from_split(load_corpus(sample_corpus), split);
            } else {
                std::vector<std::string> sources = markup;
                if (!markup_file.empty())
                    for (auto& s : read_lines(markup_file)) sources.push_back(s);
                if (sources.empty()) throw Error(ErrorCode::ConfigError, "give --corpus, --markup or --markup-file");
                req = request_from_sources(sources, ck.config.grammar);
            }
            const std::uint64_t seed = sample_opts.seed.value_or(ck.config.seed);
            const auto steps = parse_steps(snapshots);
            cmd_sample(checkpoint, req, sample_opts.out, seed, steps, sample_opts.force);
            std::cout << "wrote " << req.programs.size() << " images to " << sample_opts.out << "\n";
        } else if (*ev) {
            DtwConfig dc;
            dc.shift_fraction = shift_fraction;
            dc.threshold = threshold;
            if (std::filesystem::exists(std::filesystem::path(eval_opts.out) / "metrics.csv") && !eval_opts.force)
                throw Error(ErrorCode::PathCollision, eval_opts.out + " already holds metrics (use --force)");
            const auto rep = cmd_eval(generated, reference, eval_opts.out, dc);
            if (!eval_opts.config.empty()) write_metric_report(rep, eval_opts.out, config_to_json(eval_opts.load()));
            std::cout << "scored " << rep.rows.size() << " pairs: dtw " << rep.mean.dtw << " rmse " << rep.mean.rmse
                      << "\n";
        } else if (*pert) {
            const std::uint64_t seed = pert_opts.seed.value_or(pert_opts.load().seed);
            if (std::filesystem::exists(std::filesystem::path(pert_opts.out) / "perturbation.csv") && !pert_opts.force)
                throw Error(ErrorCode::PathCollision, pert_opts.out + " already holds a perturbation curve (use --force)");
            const auto rows = cmd_perturb(pert_corpus, k_max, seed, limit, pert_opts.out);
            for (const auto& r : rows)
                std::cout << "k=" << r.k << " dtw " << r.dtw << " rmse " << r.rmse << " (" << r.scored << " scored, "
                          << r.skipped << " skipped)\n";
            if (!compare.empty()) {
                std::ifstream in(compare);
                const auto j = nlohmann::json::parse(in);
                const double dtw = j.at("mean").at("dtw").get<double>();
                const double k = equivalent_symbols_removed(rows, dtw);
                std::cout << "model DTW " << dtw << " ~ " << k << " symbols removed\n";
                std::ofstream(std::filesystem::path(pert_opts.out) / "equivalent.json")
                    << nlohmann::json{{"dtw", dtw}, {"equivalent_symbols_removed", k}}.dump(2) << "\n";
            }
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
