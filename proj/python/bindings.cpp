// Python bindings for the core library.

#include "eegmm/experiment.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <map>

namespace py = pybind11;
using namespace eegmm;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::span<const double> view(const Array& a)
{
    return {a.data(), static_cast<std::size_t>(a.size())};
}

py::dict fit_to_dict(const PsychometricFit& f)
{
    py::dict d;
    d["alpha"] = f.alpha;
    d["beta"] = f.beta;
    d["gamma"] = f.gamma;
    d["lambda"] = f.lambda;
    d["residual"] = f.residual;
    d["iterations"] = f.iterations;
    d["converged"] = f.converged;
    d["at_boundary"] = f.at_boundary;
    return d;
}

void run_command(const std::string& name, const std::string& config_json)
{
    static const std::map<std::string, void (*)(const ExperimentConfig&)> commands = {
        {"synth", cmd_synth},         {"preprocess", cmd_preprocess},     {"train", cmd_train},
        {"eval", cmd_eval},           {"finetune", cmd_finetune},         {"sweep", cmd_sweep},
        {"psychometric", cmd_psychometric}, {"correlate", cmd_correlate}, {"plotdata", cmd_plotdata}};
    const auto it = commands.find(name);
    if (it == commands.end()) {
        throw ConfigError("unknown command '" + name + "'");
    }
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(config_json);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    const auto cfg = parse_experiment_config(doc);
    py::gil_scoped_release release;
    it->second(cfg);
}

} // namespace

PYBIND11_MODULE(_core, m)
{
    m.doc() = "EEG match/mismatch models, synthetic data and statistics";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
    py::register_exception<FitError>(m, "FitError", PyExc_ValueError);

    m.def("receptive_field", &receptive_field, py::arg("kernel"), py::arg("layers"));
    m.def("dilation_schedule", &dilation_schedule, py::arg("kernel"), py::arg("layers"));

    py::class_<ModelState>(m, "Model")
        .def_static(
            "build",
            [](const std::string& spec_json, std::uint64_t seed) {
                return build_model(model_spec_from_json(nlohmann::json::parse(spec_json)), seed);
            },
            py::arg("spec_json"), py::arg("seed") = 0)
        .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p); }, py::arg("path"))
        .def("save", [](const ModelState& s, const std::filesystem::path& p) { save_checkpoint(p, s); }, py::arg("path"))
        .def_property_readonly("window", &ModelState::window)
        .def_property_readonly("input_channels", &ModelState::input_channels)
        .def_property_readonly("parameter_count", &ModelState::parameter_count)
        .def_property_readonly("is_dilated", &ModelState::is_dilated)
        .def_property_readonly("spec_json", [](const ModelState& s) { return model_spec_to_json(s.spec).dump(); })
        .def(
            "parameter",
            [](const ModelState& s, const std::string& name) {
                const auto& p = s.param(name);
                return Array(static_cast<py::ssize_t>(p.values.size()), p.values.data());
            },
            py::arg("name"))
        .def("parameter_names",
             [](const ModelState& s) {
                 std::vector<std::string> names;
                 for (const auto& p : s.params) {
                     names.push_back(p.name);
                 }
                 return names;
             })
        .def(
            "predict",
            [](const ModelState& s, const Array& eeg, const Array& env_a, const Array& env_b) {
                if (eeg.ndim() != 2 || static_cast<std::size_t>(eeg.shape(0)) != s.input_channels() ||
                    static_cast<std::size_t>(eeg.shape(1)) != s.window()) {
                    throw ConfigError("eeg must have shape (" + std::to_string(s.input_channels()) + ", " +
                                      std::to_string(s.window()) + ")");
                }
                return forward(s, view(eeg), view(env_a), view(env_b));
            },
            py::arg("eeg"), py::arg("env_a"), py::arg("env_b"),
            "Probability that env_a is the envelope matching the EEG.");

    m.def("psychometric", &psychometric, py::arg("snr_db"), py::arg("alpha"), py::arg("beta"), py::arg("gamma") = 0.5,
          py::arg("lambda_") = 0.0);
    m.def(
        "fit_psychometric",
        [](const std::vector<double>& snr, const std::vector<double>& acc) {
            if (snr.size() != acc.size()) {
                throw ConfigError("snr and accuracy lists differ in length");
            }
            std::vector<PsychometricPoint> pts;
            for (std::size_t i = 0; i < snr.size(); ++i) {
                pts.push_back({snr[i], acc[i]});
            }
            return fit_to_dict(fit_psychometric(pts));
        },
        py::arg("snr_db"), py::arg("accuracy"));
    m.def("snr_grid", &snr_grid);
    m.def(
        "pearson_with_p",
        [](const Array& x, const Array& y) {
            const auto c = pearson_with_p(view(x), view(y));
            return py::make_tuple(c.r, c.p, c.n);
        },
        py::arg("x"), py::arg("y"), "(r, two-sided p, n)");
    m.def(
        "wilcoxon_signed_rank",
        [](const Array& a, const Array& b) {
            const auto w = wilcoxon_signed_rank(view(a), view(b));
            py::dict d;
            d["statistic"] = w.statistic;
            d["w_plus"] = w.w_plus;
            d["w_minus"] = w.w_minus;
            d["n"] = w.n;
            d["p"] = w.p;
            d["exact"] = w.exact;
            return d;
        },
        py::arg("a"), py::arg("b"));

    m.def(
        "generate_envelope",
        [](double duration_s, std::uint64_t seed, double rate, double log_std) {
            const auto env = generate_envelope(duration_s, seed, rate, log_std);
            const auto c = env.channel(0);
            return Array(static_cast<py::ssize_t>(c.size()), c.data());
        },
        py::arg("duration_s"), py::arg("seed"), py::arg("rate") = 64.0, py::arg("log_std") = 1.0);

    m.def("run_command", &run_command, py::arg("command"), py::arg("config_json"),
          "Runs a batch command with a JSON configuration document.");
}
