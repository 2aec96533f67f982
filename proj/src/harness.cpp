#include "inkdiff/harness.hpp"

#include "inkdiff/error.hpp"
#include "inkdiff/training.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace inkdiff {

using nlohmann::json;

// Config -----------------------------------------------------------------------------

void ExperimentConfig::validate() const {
    canvas.validate();
    if (canvas.height % 4 || canvas.width % 4) throw Error(ErrorCode::ConfigError, "canvas sides must be multiples of 4");
    if (corpus.count < 1) throw Error(ErrorCode::ConfigError, "corpus.count must be >= 1");
    if (corpus.lengths.min < 1 || corpus.lengths.min > corpus.lengths.max)
        throw Error(ErrorCode::ConfigError, "corpus lengths need 1 <= min <= max");
    if (!corpus.split_counts.empty()) {
        if (corpus.split_counts.size() != 3) throw Error(ErrorCode::ConfigError, "corpus.split_counts needs 3 entries");
        long sum = 0;
        for (int c : corpus.split_counts) {
            if (c < 0) throw Error(ErrorCode::ConfigError, "negative split count");
            sum += c;
        }
        if (sum != corpus.count) throw Error(ErrorCode::ConfigError, "corpus.split_counts must sum to corpus.count");
    } else {
        if (corpus.split.size() != 3) throw Error(ErrorCode::ConfigError, "corpus.split needs 3 fractions");
        double sum = 0.0;
        for (double f : corpus.split) {
            if (!(f >= 0.0)) throw Error(ErrorCode::ConfigError, "negative split fraction");
            sum += f;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw Error(ErrorCode::ConfigError, "split fractions must sum to 1");
    }
    if (schedule.T < 1) throw Error(ErrorCode::ConfigError, "schedule.T must be >= 1");
    if (!(schedule.beta_start > 0.0 && schedule.beta_start <= schedule.beta_end && schedule.beta_end < 1.0))
        throw Error(ErrorCode::ConfigError, "need 0 < beta_start <= beta_end < 1");
    denoiser().validate();
    if (!(train.lr > 0.0) || train.warmup < 0 || train.epochs < 1 || train.batch_size < 1 || train.weight_decay < 0.0)
        throw Error(ErrorCode::ConfigError, "train needs lr > 0, warmup >= 0, epochs >= 1, batch_size >= 1");
    ss.validate();
}

VarianceSchedule ExperimentConfig::make_schedule() const {
    return linear_schedule(schedule.T, schedule.beta_start, schedule.beta_end);
}

DenoiserConfig ExperimentConfig::denoiser() const {
    DenoiserConfig d = model;
    d.height = canvas.height;
    d.width = canvas.width;
    return d;
}

ExperimentConfig desk_config() {
    ExperimentConfig cfg;
    cfg.corpus.count = 1128;
    cfg.corpus.split_counts = {1000, 0, 128};
    cfg.schedule.T = 100;
    std::tie(cfg.schedule.beta_start, cfg.schedule.beta_end) = scale_schedule_for_T(1000, 100);
    cfg.train.epochs = 30;
    cfg.train.batch_size = 16;
    // 1,875 steps in total, so a shorter warmup and a larger step than the full-scale defaults.
    cfg.train.lr = 1e-3;
    cfg.train.warmup = 200;
    return cfg;
}

namespace {

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw Error(ErrorCode::ConfigError, where + " must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!ok.count(it.key())) throw Error(ErrorCode::ConfigError, "unknown config key '" + where + "." + it.key() + "'");
}

template <class V>
void read(const json& obj, const char* key, V& dst) {
    if (obj.contains(key)) {
        try {
            dst = obj.at(key).get<V>();
        } catch (const json::exception& e) {
            throw Error(ErrorCode::ConfigError, std::string("bad value for '") + key + "': " + e.what());
        }
    }
}

json config_json(const ExperimentConfig& c) {
    json j;
    j["grammar"] = to_string(c.grammar);
    j["canvas"] = {{"height", c.canvas.height}, {"width", c.canvas.width}, {"baseline_row", c.canvas.baseline_row}};
    j["corpus"] = {{"count", c.corpus.count},
                   {"min_length", c.corpus.lengths.min},
                   {"max_length", c.corpus.lengths.max},
                   {"split", c.corpus.split},
                   {"split_counts", c.corpus.split_counts}};
    j["schedule"] = {{"T", c.schedule.T}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}};
    j["model"] = {{"mode", to_string(c.model.mode)},
                  {"channels", c.model.channels},
                  {"embed_dim", c.model.embed_dim},
                  {"time_dim", c.model.time_dim},
                  {"max_len", c.model.max_len}};
    j["train"] = {{"lr", c.train.lr},
                  {"warmup", c.train.warmup},
                  {"epochs", c.train.epochs},
                  {"batch_size", c.train.batch_size},
                  {"weight_decay", c.train.weight_decay}};
    j["ss"] = {{"enabled", c.ss.enabled}, {"m", c.ss.m}, {"p_start", c.ss.p_start}, {"p_end", c.ss.p_end}};
    j["sampler"] = {{"sigma_mode", to_string(c.sigma_mode)}};
    j["seed"] = c.seed;
    return j;
}

ExperimentConfig config_from(const json& j, ExperimentConfig c) {
    check_keys(j, "config", {"grammar", "canvas", "corpus", "schedule", "model", "train", "ss", "sampler", "seed"});
    if (j.contains("grammar")) {
        const Grammar g = grammar_from_string(j.at("grammar").get<std::string>());
        if (g != c.grammar) c.canvas = CanvasSpec::for_grammar(g);
        c.grammar = g;
    }
    if (j.contains("canvas")) {
        const json& o = j.at("canvas");
        check_keys(o, "canvas", {"height", "width", "baseline_row"});
        read(o, "height", c.canvas.height);
        read(o, "width", c.canvas.width);
        read(o, "baseline_row", c.canvas.baseline_row);
    }
    if (j.contains("corpus")) {
        const json& o = j.at("corpus");
        check_keys(o, "corpus", {"count", "min_length", "max_length", "split", "split_counts"});
        read(o, "count", c.corpus.count);
        read(o, "min_length", c.corpus.lengths.min);
        read(o, "max_length", c.corpus.lengths.max);
        read(o, "split", c.corpus.split);
        read(o, "split_counts", c.corpus.split_counts);
    }
    if (j.contains("schedule")) {
        const json& o = j.at("schedule");
        check_keys(o, "schedule", {"T", "beta_start", "beta_end"});
        read(o, "T", c.schedule.T);
        read(o, "beta_start", c.schedule.beta_start);
        read(o, "beta_end", c.schedule.beta_end);
    }
    if (j.contains("model")) {
        const json& o = j.at("model");
        check_keys(o, "model", {"mode", "channels", "embed_dim", "time_dim", "max_len"});
        if (o.contains("mode")) c.model.mode = conditioning_from_string(o.at("mode").get<std::string>());
        read(o, "channels", c.model.channels);
        read(o, "embed_dim", c.model.embed_dim);
        read(o, "time_dim", c.model.time_dim);
        read(o, "max_len", c.model.max_len);
    }
    if (j.contains("train")) {
        const json& o = j.at("train");
        check_keys(o, "train", {"lr", "warmup", "epochs", "batch_size", "weight_decay"});
        read(o, "lr", c.train.lr);
        read(o, "warmup", c.train.warmup);
        read(o, "epochs", c.train.epochs);
        read(o, "batch_size", c.train.batch_size);
        read(o, "weight_decay", c.train.weight_decay);
    }
    if (j.contains("ss")) {
        const json& o = j.at("ss");
        check_keys(o, "ss", {"enabled", "m", "p_start", "p_end"});
        read(o, "enabled", c.ss.enabled);
        read(o, "m", c.ss.m);
        read(o, "p_start", c.ss.p_start);
        read(o, "p_end", c.ss.p_end);
    }
    if (j.contains("sampler")) {
        const json& o = j.at("sampler");
        check_keys(o, "sampler", {"sigma_mode"});
        if (o.contains("sigma_mode")) c.sigma_mode = sigma_mode_from_string(o.at("sigma_mode").get<std::string>());
    }
    read(j, "seed", c.seed);
    c.model.height = c.canvas.height;
    c.model.width = c.canvas.width;
    return c;
}

json parse_json(std::string_view text, const std::string& what) {
    try {
        return json::parse(text.begin(), text.end());
    } catch (const json::exception& e) {
        throw Error(ErrorCode::FormatError, what + ": " + e.what());
    }
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::FormatError, "cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::FormatError, "cannot write " + path.string());
    out << text;
    if (!out) throw Error(ErrorCode::FormatError, "write failed for " + path.string());
}

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && (!fs::is_directory(p) || !fs::is_empty(p)); }

void prepare_output(const fs::path& out, bool force) {
    if (non_empty_dir(out) && !force)
        throw Error(ErrorCode::PathCollision, out.string() + " already exists (use --force to overwrite)");
    fs::create_directories(out);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

ExperimentConfig config_from_json(std::string_view text, const ExperimentConfig& base) {
    ExperimentConfig c = config_from(parse_json(text, "config"), base);
    c.validate();
    return c;
}

std::string config_to_json(const ExperimentConfig& cfg) { return config_json(cfg).dump(2); }

ExperimentConfig load_config(const fs::path& path, const ExperimentConfig& base) {
    return config_from_json(read_text(path), base);
}

// Corpus ------------------------------------------------------------------------------

void split_indices(int n, const CorpusConfig& cfg, const Stream& rng, std::vector<int>& train, std::vector<int>& val,
                   std::vector<int>& test) {
    int n_train, n_val;
    if (!cfg.split_counts.empty()) {
        if (cfg.split_counts.size() != 3 || cfg.split_counts[0] + cfg.split_counts[1] + cfg.split_counts[2] != n)
            throw Error(ErrorCode::ConfigError, "split counts must sum to the corpus size");
        n_train = cfg.split_counts[0];
        n_val = cfg.split_counts[1];
    } else {
        if (cfg.split.size() != 3 || std::abs(cfg.split[0] + cfg.split[1] + cfg.split[2] - 1.0) > 1e-9)
            throw Error(ErrorCode::ConfigError, "split fractions must sum to 1");
        n_train = static_cast<int>(std::llround(cfg.split[0] * n));
        n_val = std::min(n - n_train, static_cast<int>(std::llround(cfg.split[1] * n)));
    }
    Stream r = rng;
    const auto order = permutation(static_cast<std::size_t>(n), r);
    train.clear();
    val.clear();
    test.clear();
    for (int i = 0; i < n; ++i) {
        const int idx = static_cast<int>(order[static_cast<std::size_t>(i)]);
        (i < n_train ? train : i < n_train + n_val ? val : test).push_back(idx);
    }
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    std::sort(test.begin(), test.end());
}

std::string image_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu.pgm", index);
    return buf;
}

Corpus cmd_generate(const ExperimentConfig& cfg, const fs::path& out, bool force) {
    cfg.validate();
    prepare_output(out, force);
    const Stream root(cfg.seed);
    auto examples = generate_corpus(cfg.grammar, cfg.corpus.count, cfg.corpus.lengths, root.derive(tag("corpus")), cfg.canvas);

    Corpus c;
    c.grammar = cfg.grammar;
    c.canvas = cfg.canvas;
    c.seed = cfg.seed;
    for (auto& ex : examples) {
        c.programs.push_back(std::move(ex.program));
        c.images.push_back(std::move(ex.image));
    }
    split_indices(static_cast<int>(c.size()), cfg.corpus, root.derive(tag("split")), c.train, c.val, c.test);

    fs::remove_all(out / "images");
    fs::create_directories(out / "images");
    std::string markup;
    for (std::size_t i = 0; i < c.size(); ++i) {
        markup += to_source(c.programs[i]) + "\n";
        write_pgm(out / "images" / image_name(i), c.images[i]);
    }
    write_text(out / "markup.txt", markup);

    json m;
    m["format"] = 1;
    m["grammar"] = to_string(c.grammar);
    m["canvas"] = {{"height", c.canvas.height}, {"width", c.canvas.width}, {"baseline_row", c.canvas.baseline_row}};
    m["seed"] = c.seed;
    m["count"] = c.size();
    m["split"] = {{"train", c.train}, {"val", c.val}, {"test", c.test}};
    m["config"] = config_json(cfg);
    write_text(out / "manifest.json", m.dump(2) + "\n");
    return c;
}

Corpus load_corpus(const fs::path& dir) {
    const json m = parse_json(read_text(dir / "manifest.json"), (dir / "manifest.json").string());
    Corpus c;
    try {
        if (m.at("format").get<int>() != 1) throw Error(ErrorCode::FormatError, "unsupported corpus format");
        c.grammar = grammar_from_string(m.at("grammar").get<std::string>());
        c.canvas = CanvasSpec::for_grammar(c.grammar);
        c.canvas.height = m.at("canvas").at("height").get<int>();
        c.canvas.width = m.at("canvas").at("width").get<int>();
        c.canvas.baseline_row = m.at("canvas").at("baseline_row").get<int>();
        c.seed = m.at("seed").get<std::uint64_t>();
        c.train = m.at("split").at("train").get<std::vector<int>>();
        c.val = m.at("split").at("val").get<std::vector<int>>();
        c.test = m.at("split").at("test").get<std::vector<int>>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::FormatError, "corpus manifest: " + std::string(e.what()));
    }
    const std::size_t count = m.at("count").get<std::size_t>();

    std::istringstream lines(read_text(dir / "markup.txt"));
    std::string line;
    while (std::getline(lines, line)) c.programs.push_back(parse_source(line, c.grammar));
    if (c.programs.size() != count)
        throw Error(ErrorCode::FormatError, "markup.txt has " + std::to_string(c.programs.size()) + " lines, manifest says " +
                                                std::to_string(count));
    for (std::size_t i = 0; i < count; ++i) {
        c.images.push_back(read_pgm(dir / "images" / image_name(i)));
        if (c.images.back().height != c.canvas.height || c.images.back().width != c.canvas.width)
            throw Error(ErrorCode::FormatError, image_name(i) + " does not match the canvas");
    }
    std::vector<int> seen(count, 0);
    for (const auto* part : {&c.train, &c.val, &c.test})
        for (int i : *part) {
            if (i < 0 || static_cast<std::size_t>(i) >= count || seen[static_cast<std::size_t>(i)]++)
                throw Error(ErrorCode::FormatError, "corpus split is not a partition of the examples");
        }
    if (c.train.size() + c.val.size() + c.test.size() != count)
        throw Error(ErrorCode::FormatError, "corpus split does not cover every example");
    return c;
}

// Checkpoints -----------------------------------------------------------------------------

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw Error(ErrorCode::FormatError, "truncated tensor blob");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += 4;
    return v;
}

void put_tensor(std::string& out, const std::string& name, const Shape& shape, const std::vector<float>& values) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : values) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

struct BlobEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

std::vector<BlobEntry> read_blob(const std::string& blob) {
    std::size_t pos = 0;
    if (blob.compare(0, 4, "IDTB") != 0) throw Error(ErrorCode::FormatError, "not a tensor blob");
    pos = 4;
    const std::uint32_t count = get_u32(blob, pos);
    std::vector<BlobEntry> out;
    for (std::uint32_t k = 0; k < count; ++k) {
        BlobEntry e;
        const std::uint32_t len = get_u32(blob, pos);
        if (pos + len > blob.size()) throw Error(ErrorCode::FormatError, "truncated tensor name");
        e.name = blob.substr(pos, len);
        pos += len;
        const std::uint32_t ndim = get_u32(blob, pos);
        for (std::uint32_t d = 0; d < ndim; ++d) e.shape.push_back(static_cast<int>(get_u32(blob, pos)));
        e.values.resize(numel(e.shape));
        for (auto& v : e.values) v = std::bit_cast<float>(get_u32(blob, pos));
        out.push_back(std::move(e));
    }
    if (pos != blob.size()) throw Error(ErrorCode::FormatError, "trailing bytes in tensor blob");
    return out;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& ck) {
    fs::create_directories(dir);
    std::string blob = "IDTB";
    const bool with_moments = !ck.first_moments.empty();
    put_u32(blob, static_cast<std::uint32_t>(ck.params.size() * (with_moments ? 3 : 1)));
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
        const auto& p = ck.params[i];
        put_tensor(blob, p.name, p.tensor.shape, p.tensor.value);
        if (with_moments) {
            put_tensor(blob, "adam.m/" + p.name, p.tensor.shape, ck.first_moments.at(i));
            put_tensor(blob, "adam.v/" + p.name, p.tensor.shape, ck.second_moments.at(i));
        }
    }
    write_text(dir / "tensors.bin", blob);

    json m;
    m["format"] = kCheckpointFormat;
    m["config"] = config_json(ck.config);
    m["epoch"] = ck.epoch;
    m["step"] = ck.step;
    m["rng"] = {{"algorithm", "philox4x32-10"}, {"seed", ck.config.seed}, {"epoch", ck.epoch}, {"step", ck.step}};
    m["schedule"] = {{"betas", ck.betas}};
    m["optimizer_state"] = with_moments;
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir) {
    const json m = parse_json(read_text(dir / "manifest.json"), (dir / "manifest.json").string());
    Checkpoint ck;
    try {
        const int format = m.at("format").get<int>();
        if (format != kCheckpointFormat)
            throw Error(ErrorCode::FormatError, "unknown checkpoint format version " + std::to_string(format));
        ck.config = config_from(m.at("config"), ExperimentConfig{});
        ck.epoch = m.at("epoch").get<int>();
        ck.step = m.at("step").get<long>();
        ck.betas = m.at("schedule").at("betas").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::FormatError, "checkpoint manifest: " + std::string(e.what()));
    }
    ck.config.validate();

    UNet<float> layout(ck.config.denoiser(), Stream(0));
    auto entries = read_blob(read_text(dir / "tensors.bin"));
    auto find = [&](const std::string& name) -> BlobEntry& {
        for (auto& e : entries)
            if (e.name == name) return e;
        throw Error(ErrorCode::FormatError, "checkpoint lacks tensor " + name);
    };
    const bool with_moments = m.value("optimizer_state", false);
    for (auto& np : layout.params()) {
        BlobEntry& e = find(np.name);
        if (e.shape != np.tensor.shape)
            throw Error(ErrorCode::FormatError, np.name + " has shape " + shape_str(e.shape) + ", expected " +
                                                    shape_str(np.tensor.shape));
        ck.params.push_back({np.name, Tensor<float>(e.shape, std::move(e.values)), np.decay});
        if (with_moments) {
            ck.first_moments.push_back(std::move(find("adam.m/" + np.name).values));
            ck.second_moments.push_back(std::move(find("adam.v/" + np.name).values));
        }
    }
    return ck;
}

std::unique_ptr<UNet<float>> restore_model(const Checkpoint& ck) {
    auto model = std::make_unique<UNet<float>>(ck.config.denoiser(), Stream(0));
    auto& params = model->params();
    if (params.size() != ck.params.size()) throw Error(ErrorCode::FormatError, "checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].name != ck.params[i].name || params[i].tensor.shape != ck.params[i].tensor.shape)
            throw Error(ErrorCode::FormatError, "checkpoint parameter " + ck.params[i].name + " does not fit the model");
        params[i].tensor.value = ck.params[i].tensor.value;
    }
    return model;
}

// Training -----------------------------------------------------------------------------

namespace {

std::string epoch_dir(int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%03d", epoch);
    return buf;
}

std::string log_line(const EpochRecord& r) {
    json j;
    j["epoch"] = r.epoch;
    j["loss"] = r.loss;
    j["ss_probability"] = r.ss_probability;
    j["wall_seconds"] = r.wall_seconds;
    return j.dump() + "\n";
}

}  // namespace

TrainResult cmd_train(const ExperimentConfig& cfg, const fs::path& corpus_dir, const fs::path& out,
                      const TrainOptions& opts) {
    cfg.validate();
    const Corpus corpus = load_corpus(corpus_dir);
    if (corpus.grammar != cfg.grammar || corpus.canvas != cfg.canvas)
        throw Error(ErrorCode::ConfigError, "corpus grammar/canvas differ from the config");
    if (corpus.train.empty()) throw Error(ErrorCode::ConfigError, "corpus has no training examples");

    const fs::path log_path = out / "train_log.jsonl";
    if (!opts.resume && !opts.force && (fs::exists(log_path) || fs::exists(out / "checkpoints")))
        throw Error(ErrorCode::PathCollision, out.string() + " already holds a training run (use --force)");
    fs::create_directories(out / "checkpoints");

    const VarianceSchedule sched = cfg.make_schedule();
    const Stream root(cfg.seed);
    UNet<float> model(cfg.denoiser(), root.derive(tag("init")));

    const long n = static_cast<long>(corpus.train.size());
    const long per_epoch = (n + cfg.train.batch_size - 1) / cfg.train.batch_size;
    const long total_steps = per_epoch * cfg.train.epochs;
    OptimizerConfig oc;
    oc.lr = cfg.train.lr;
    oc.warmup = cfg.train.warmup;
    oc.total_steps = total_steps;
    oc.weight_decay = cfg.train.weight_decay;
    AdamW<float> opt(oc, model.params());

    int start_epoch = 0;
    long step = 0;
    std::string previous_log;
    if (opts.resume) {
        Checkpoint ck = load_checkpoint(*opts.resume);
        if (config_to_json(ck.config) != config_to_json(cfg))
            throw Error(ErrorCode::ConfigError, "checkpoint was written under a different config");
        if (ck.betas != sched.betas()) throw Error(ErrorCode::ConfigError, "checkpoint schedule differs");
        if (ck.first_moments.empty()) throw Error(ErrorCode::FormatError, "checkpoint has no optimizer state");
        auto& params = model.params();
        for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.value = ck.params.at(i).tensor.value;
        opt.first_moments() = ck.first_moments;
        opt.second_moments() = ck.second_moments;
        opt.set_step(ck.step);
        start_epoch = ck.epoch;
        step = ck.step;
        if (fs::exists(log_path)) {
            std::istringstream lines(read_text(log_path));
            std::string line;
            while (std::getline(lines, line))
                if (!line.empty() && json::parse(line).at("epoch").get<int>() <= start_epoch) previous_log += line + "\n";
        }
    }
    write_text(log_path, previous_log);

    std::vector<std::vector<float>> latents(corpus.size());
    std::vector<TokenIds> tokens(corpus.size());
    for (int idx : corpus.train) {
        latents[static_cast<std::size_t>(idx)] = data_to_latent(corpus.images[static_cast<std::size_t>(idx)]);
        tokens[static_cast<std::size_t>(idx)] = encode(corpus.programs[static_cast<std::size_t>(idx)], cfg.model.max_len);
    }
    const Shape shape{1, cfg.canvas.height, cfg.canvas.width};
    LossOptions lo;
    lo.ss = cfg.ss;
    lo.rollout.sigma_mode = cfg.sigma_mode;

    TrainResult result;
    const int last_epoch = opts.stop_after ? std::min(cfg.train.epochs, *opts.stop_after) : cfg.train.epochs;
    for (int e = start_epoch; e < last_epoch; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        Stream shuffle = root.derive({tag("shuffle"), static_cast<std::uint64_t>(e)});
        const auto perm = permutation(static_cast<std::size_t>(n), shuffle);
        double loss_sum = 0.0;
        double last_p = 0.0;
        for (long b = 0; b < per_epoch; ++b) {
            std::vector<TrainingExample<float>> batch;
            for (long i = b * cfg.train.batch_size; i < std::min(n, (b + 1) * cfg.train.batch_size); ++i) {
                const auto idx = static_cast<std::size_t>(corpus.train[perm[static_cast<std::size_t>(i)]]);
                batch.push_back({latents[idx], &tokens[idx], idx});
            }
            lo.mix_probability = mix_probability(step, total_steps, cfg.ss);
            last_p = cfg.ss.enabled ? lo.mix_probability : 0.0;
            model.zero_grad();
            const auto res = training_loss<float>(batch, model, shape, sched, lo,
                                                  root.derive({tag("step"), static_cast<std::uint64_t>(step)}));
            opt.step(model.params());
            loss_sum += res.loss * static_cast<double>(batch.size());
            ++step;
        }
        EpochRecord rec;
        rec.epoch = e + 1;
        rec.loss = loss_sum / static_cast<double>(n);
        rec.ss_probability = last_p;
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        Checkpoint ck;
        ck.config = cfg;
        ck.epoch = e + 1;
        ck.step = step;
        ck.betas = sched.betas();
        ck.params = model.params();
        ck.first_moments = opt.first_moments();
        ck.second_moments = opt.second_moments();
        result.last_checkpoint = out / "checkpoints" / epoch_dir(e + 1);
        save_checkpoint(result.last_checkpoint, ck);

        {
            std::ofstream log(log_path, std::ios::binary | std::ios::app);
            log << log_line(rec);
        }
        result.train_seconds += rec.wall_seconds;
        result.log.push_back(rec);
        if (opts.on_epoch) opts.on_epoch(rec);
    }
    return result;
}

// Sampling -------------------------------------------------------------------------------

SampleRequest request_from_split(const Corpus& corpus, std::string_view split) {
    const std::vector<int>* part = split == "train" ? &corpus.train
                                   : split == "val" ? &corpus.val
                                   : split == "test" ? &corpus.test
                                                     : nullptr;
    SampleRequest req;
    if (split == "all") {
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            req.programs.push_back(corpus.programs[i]);
            req.names.push_back(image_name(i));
        }
        return req;
    }
    if (!part) throw Error(ErrorCode::ConfigError, "unknown split '" + std::string(split) + "'");
    for (int i : *part) {
        req.programs.push_back(corpus.programs[static_cast<std::size_t>(i)]);
        req.names.push_back(image_name(static_cast<std::size_t>(i)));
    }
    return req;
}

SampleRequest request_from_sources(const std::vector<std::string>& sources, Grammar grammar) {
    SampleRequest req;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        req.programs.push_back(parse_source(sources[i], grammar));
        req.names.push_back(image_name(i));
    }
    return req;
}

void cmd_sample(const fs::path& checkpoint, const SampleRequest& req, const fs::path& out, std::uint64_t seed,
                std::span<const int> snapshot_steps, bool force) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const VarianceSchedule sched(ck.betas);
    auto model = restore_model(ck);
    if (req.programs.size() != req.names.size()) throw Error(ErrorCode::ShapeMismatch, "sample request is misaligned");
    for (const auto& p : req.programs)
        if (p.grammar != ck.config.grammar) throw Error(ErrorCode::ConfigError, "markup grammar differs from the checkpoint's");
    prepare_output(out, force);

    SamplerConfig sc;
    sc.sigma_mode = ck.config.sigma_mode;
    sc.seed = seed;
    const Stream root(seed);
    for (std::size_t i = 0; i < req.programs.size(); ++i) {
        const TokenIds ids = encode(req.programs[i], ck.config.model.max_len);
        const auto res = sample(ids, *model, sched, sc, ck.config.canvas.height, ck.config.canvas.width,
                                root.derive({tag("sample"), static_cast<std::uint64_t>(i)}), snapshot_steps);
        write_pgm(out / req.names[i], res.image);
        if (!res.snapshots.empty()) {
            const fs::path traj = out / "trajectories" / fs::path(req.names[i]).stem();
            fs::create_directories(traj);
            for (const auto& s : res.snapshots) write_pgm(traj / ("step_" + std::to_string(s.step) + ".pgm"), s.image);
        }
    }
}

// Evaluation --------------------------------------------------------------------------------

void write_metric_report(const MetricReport& rep, const fs::path& out, const std::string& config_json_text) {
    fs::create_directories(out);
    std::string csv = "name";
    for (const auto& m : metric_names()) csv += "," + m;
    csv += "\n";
    auto row = [&](const MetricRow& r) {
        csv += r.name;
        for (const auto& m : metric_names()) csv += "," + fmt(metric_value(r, m));
        csv += "\n";
    };
    for (const auto& r : rep.rows) row(r);
    row(rep.mean);
    write_text(out / "metrics.csv", csv);

    json j;
    j["count"] = rep.rows.size();
    for (const auto& m : metric_names()) j["mean"][m] = metric_value(rep.mean, m);
    if (!config_json_text.empty()) j["config"] = json::parse(config_json_text);
    write_text(out / "metrics.json", j.dump(2) + "\n");
}

MetricReport cmd_eval(const fs::path& generated, const fs::path& reference, const fs::path& out, const DtwConfig& cfg) {
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(generated))
        if (entry.is_regular_file() && entry.path().extension() == ".pgm") names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty()) throw Error(ErrorCode::ShapeMismatch, "no PGM images in " + generated.string());
    std::vector<ImageBuffer> gen, gt;
    for (const auto& name : names) {
        if (!fs::exists(reference / name))
            throw Error(ErrorCode::ShapeMismatch, "misaligned directories: " + name + " has no reference image");
        gen.push_back(read_pgm(generated / name));
        gt.push_back(read_pgm(reference / name));
    }
    MetricReport rep = score_all(gen, gt, names, cfg);
    write_metric_report(rep, out);
    return rep;
}

// Perturbation ---------------------------------------------------------------------------------

std::vector<PerturbRow> cmd_perturb(const fs::path& corpus_dir, int k_max, std::uint64_t seed, int limit,
                                    const fs::path& out) {
    if (k_max < 1) throw Error(ErrorCode::InvalidRange, "k_max must be >= 1");
    const Corpus corpus = load_corpus(corpus_dir);
    std::vector<int> programs = corpus.test;
    if (limit > 0 && static_cast<std::size_t>(limit) < programs.size()) programs.resize(static_cast<std::size_t>(limit));
    const Stream root(seed);
    std::vector<PerturbRow> rows;
    for (int k = 0; k <= k_max; ++k) {
        PerturbRow row;
        row.k = k;
        for (int idx : programs) {
            const auto& prog = corpus.programs[static_cast<std::size_t>(idx)];
            if (leaf_count(prog) < k) {
                ++row.skipped;
                continue;
            }
            Stream rng = root.derive({tag("perturb"), static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(idx)});
            const ImageBuffer img = render(perturb(prog, k, rng), corpus.canvas);
            const ImageBuffer& ref = corpus.images[static_cast<std::size_t>(idx)];
            row.dtw += dtw_distance(img, ref);
            row.rmse += rmse(img, ref);
            ++row.scored;
        }
        if (row.scored) {
            row.dtw /= row.scored;
            row.rmse /= row.scored;
        }
        rows.push_back(row);
    }
    if (!out.empty()) {
        fs::create_directories(out);
        std::string csv = "k,scored,skipped,dtw,rmse\n";
        for (const auto& r : rows)
            csv += std::to_string(r.k) + "," + std::to_string(r.scored) + "," + std::to_string(r.skipped) + "," + fmt(r.dtw) +
                   "," + fmt(r.rmse) + "\n";
        write_text(out / "perturbation.csv", csv);
    }
    return rows;
}

double equivalent_symbols_removed(const std::vector<PerturbRow>& curve, double dtw) {
    if (curve.empty()) throw Error(ErrorCode::InvalidRange, "empty perturbation curve");
    if (dtw <= curve.front().dtw) return curve.front().k;
    for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
        const double lo = curve[i].dtw, hi = curve[i + 1].dtw;
        if (dtw >= lo && dtw <= hi) return hi > lo ? curve[i].k + (dtw - lo) / (hi - lo) : curve[i].k;
    }
    return curve.back().k;
}

}  // namespace inkdiff
