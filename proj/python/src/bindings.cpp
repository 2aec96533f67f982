#include "inkdiff/diffusion.hpp"
#include "inkdiff/error.hpp"
#include "inkdiff/harness.hpp"
#include "inkdiff/markup.hpp"
#include "inkdiff/metrics.hpp"
#include "inkdiff/schedule.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>

namespace py = pybind11;
using namespace inkdiff;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

ImageBuffer image_from(const FloatArray& a) {
    if (a.ndim() != 2) throw Error(ErrorCode::ShapeMismatch, "expected a 2-D image array");
    ImageBuffer img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::copy_n(a.data(), img.size(), img.pixels.begin());
    return img;
}

FloatArray array_from(const ImageBuffer& img) {
    return FloatArray(std::vector<py::ssize_t>{img.height, img.width}, img.pixels.data());
}

std::vector<double> vec(const DoubleArray& a) { return {a.data(), a.data() + a.size()}; }

DoubleArray array_from(const std::vector<double>& v) {
    return DoubleArray(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())}, v.data());
}

void check_same(const DoubleArray& a, const DoubleArray& b) {
    if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "latent sizes differ");
}

ExperimentConfig config_of(const std::string& json) { return json.empty() ? ExperimentConfig{} : config_from_json(json); }

py::dict row_dict(const MetricRow& r) {
    py::dict d;
    d["name"] = r.name;
    for (const auto& m : metric_names()) d[py::str(m)] = metric_value(r, m);
    return d;
}

py::dict report_dict(const MetricReport& rep) {
    py::list rows;
    for (const auto& r : rep.rows) rows.append(row_dict(r));
    py::dict d;
    d["rows"] = rows;
    d["mean"] = row_dict(rep.mean);
    return d;
}

py::handle error_type;

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Markup rendering, diffusion math, metrics and the experiment pipeline";

    error_type = py::exception<Error>(m, "InkdiffError", PyExc_RuntimeError).release();
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object err = py::reinterpret_borrow<py::object>(error_type)(e.what());
            err.attr("code") = to_string(e.code());
            err.attr("position") = e.position() == Error::npos ? py::object(py::none()) : py::int_(e.position());
            PyErr_SetObject(error_type.ptr(), err.ptr());
        }
    });

    // Markup
    m.def("vocabulary", [] { return std::string(glyph_vocabulary()); });
    m.def("vocab_size", &vocab_size);
    m.def("normalize", [](const std::string& src, const std::string& grammar) {
        return to_source(parse_source(src, grammar_from_string(grammar)));
    }, py::arg("source"), py::arg("grammar") = "formula");
    m.def("render", [](const std::string& src, const std::string& grammar, int height, int width) {
        CanvasSpec canvas;
        canvas.height = height;
        canvas.width = width;
        return array_from(render(parse_source(src, grammar_from_string(grammar)), canvas));
    }, py::arg("source"), py::arg("grammar") = "formula", py::arg("height") = 32, py::arg("width") = 96);
    m.def("encode", [](const std::string& src, const std::string& grammar, int max_len) {
        const auto ids = encode(parse_source(src, grammar_from_string(grammar)), max_len);
        return py::make_tuple(ids.ids, std::vector<int>(ids.mask.begin(), ids.mask.end()));
    }, py::arg("source"), py::arg("grammar") = "formula", py::arg("max_len") = 48);
    m.def("leaf_count", [](const std::string& src, const std::string& grammar) {
        return leaf_count(parse_source(src, grammar_from_string(grammar)));
    }, py::arg("source"), py::arg("grammar") = "formula");
    m.def("perturb", [](const std::string& src, int k, std::uint64_t seed, const std::string& grammar) {
        Stream rng(seed);
        return to_source(perturb(parse_source(src, grammar_from_string(grammar)), k, rng));
    }, py::arg("source"), py::arg("k"), py::arg("seed"), py::arg("grammar") = "formula");

    // Schedule and diffusion
    m.def("linear_alpha_bars", [](int T, double beta_start, double beta_end) {
        return array_from(linear_schedule(T, beta_start, beta_end).alpha_bars());
    }, py::arg("T") = 1000, py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02);
    m.def("forward_sample", [](const DoubleArray& y0, int t, const DoubleArray& noise, int T, double beta_start, double beta_end) {
        check_same(y0, noise);
        const auto sched = linear_schedule(T, beta_start, beta_end);
        const auto a = vec(y0), n = vec(noise);
        return array_from(forward_sample<double>(a, t, n, sched));
    }, py::arg("y0"), py::arg("t"), py::arg("noise"), py::arg("T") = 1000,
       py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02);
    m.def("mu_theta", [](const DoubleArray& y_t, const DoubleArray& eps_hat, int t, int T, double beta_start, double beta_end) {
        check_same(y_t, eps_hat);
        const auto sched = linear_schedule(T, beta_start, beta_end);
        const auto a = vec(y_t), e = vec(eps_hat);
        return array_from(mu_theta<double>(a, e, t, sched));
    }, py::arg("y_t"), py::arg("eps_hat"), py::arg("t"), py::arg("T") = 1000,
       py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02);
    m.def("posterior_q", [](const DoubleArray& y_t, const DoubleArray& y0, int t, int T, double beta_start, double beta_end) {
        check_same(y_t, y0);
        const auto sched = linear_schedule(T, beta_start, beta_end);
        const auto a = vec(y_t), b = vec(y0);
        const auto q = posterior_q<double>(a, b, t, sched);
        return py::make_tuple(array_from(q.mean), q.variance);
    }, py::arg("y_t"), py::arg("y0"), py::arg("t"), py::arg("T") = 1000,
       py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02);

    // Metrics
    m.def("dtw", [](const FloatArray& gen, const FloatArray& gt) { return dtw_distance(image_from(gen), image_from(gt)); });
    m.def("rmse", [](const FloatArray& gen, const FloatArray& gt) { return rmse(image_from(gen), image_from(gt)); });
    m.def("score_pair", [](const FloatArray& gen, const FloatArray& gt) {
        return row_dict(score_pair(image_from(gen), image_from(gt)));
    });

    // Pipeline; configs travel as JSON text
    m.def("desk_config", [] { return config_to_json(desk_config()); });
    m.def("default_config", [] { return config_to_json(ExperimentConfig{}); });
    m.def("generate", [](const std::string& config, const fs::path& out, bool force) {
        return cmd_generate(config_of(config), out, force).size();
    }, py::arg("config"), py::arg("out"), py::arg("force") = false);
    m.def("train", [](const std::string& config, const fs::path& corpus, const fs::path& out,
                      std::optional<fs::path> resume, bool force) {
        const auto cfg = config_of(config);
        cfg.validate();
        TrainOptions opts;
        opts.resume = std::move(resume);
        opts.force = force;
        TrainResult res;
        {
            py::gil_scoped_release nogil;
            res = cmd_train(cfg, corpus, out, opts);
        }
        return py::make_tuple(res.last_checkpoint, res.train_seconds);
    }, py::arg("config"), py::arg("corpus"), py::arg("out"), py::arg("resume") = py::none(), py::arg("force") = false);
    m.def("sample", [](const fs::path& checkpoint, const fs::path& corpus, const std::string& split,
                       const fs::path& out, std::uint64_t seed, bool force) {
        const auto req = request_from_split(load_corpus(corpus), split);
        py::gil_scoped_release nogil;
        cmd_sample(checkpoint, req, out, seed, {}, force);
    }, py::arg("checkpoint"), py::arg("corpus"), py::arg("split"), py::arg("out"), py::arg("seed"),
       py::arg("force") = false);
    m.def("evaluate", [](const fs::path& generated, const fs::path& reference, const fs::path& out) {
        return report_dict(cmd_eval(generated, reference, out));
    });
    m.def("perturbation_curve", [](const fs::path& corpus, int k_max, std::uint64_t seed, int limit) {
        py::list rows;
        for (const auto& r : cmd_perturb(corpus, k_max, seed, limit)) {
            py::dict d;
            d["k"] = r.k;
            d["scored"] = r.scored;
            d["skipped"] = r.skipped;
            d["dtw"] = r.dtw;
            d["rmse"] = r.rmse;
            rows.append(d);
        }
        return rows;
    }, py::arg("corpus"), py::arg("k_max"), py::arg("seed"), py::arg("limit") = 0);
}
