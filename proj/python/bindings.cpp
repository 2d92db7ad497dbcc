// SPDX-License-Identifier: Apache-2.0
//
// Python extension. Structured values (configs, reports) cross the boundary as JSON
// text; the package wrapper turns them into dicts. Tensors become numpy arrays.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "dynakv/error.hpp"
#include "dynakv/eviction.hpp"
#include "dynakv/gate.hpp"
#include "dynakv/harness.hpp"
#include "dynakv/kv_store.hpp"
#include "dynakv/model.hpp"
#include "dynakv/spectral.hpp"
#include "dynakv/tokenizer.hpp"

namespace py = pybind11;
using namespace dynakv;
using nlohmann::json;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data(), t.data() + t.size(), out.mutable_data());
    return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

model::Mode mode_of(const std::string& s) { return model::parse_mode(s); }

json memory_json(const kv::MemoryReport& m) {
    return {{"total_floats", m.total_floats},   {"key_floats", m.key_floats},
            {"value_floats", m.value_floats},   {"clamped_tokens", m.clamped},
            {"tokens_per_layer", m.tokens_per_layer}, {"floats_per_layer", m.floats_per_layer},
            {"rate_overall", m.rate_overall},   {"rate_key", m.rate_key},
            {"rate_value", m.rate_value},       {"rate_per_layer", m.rate_per_layer}};
}

harness::RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed,
                               std::optional<std::string> out) {
    auto cfg = harness::RunConfig::load(path);
    harness::Overrides o;
    o.seed = seed;
    o.out_dir = std::move(out);
    harness::apply_overrides(cfg, o);
    return cfg;
}

}  // namespace

PYBIND11_MODULE(_dynakv, m) {
    m.doc() = "Spectral KV-cache compression toy model";

    auto base = py::register_exception<Error>(m, "DynakvError", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<RankError>(m, "RankError", base.ptr());
    py::register_exception<InvertibilityError>(m, "InvertibilityError", base.ptr());
    py::register_exception<InsufficientDataError>(m, "InsufficientDataError", base.ptr());
    py::register_exception<ContractError>(m, "ContractError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());

    m.attr("BOS") = text::kBos;
    m.attr("DEFAULT_TAU") = gate::kDefaultTau;
    m.def("tokenize", [](const std::string& s) { return text::tokenize(s); });
    m.def("detokenize", [](const std::vector<int>& ids) { return text::detokenize(ids); });

    // Gate.
    m.def(
        "soft_mask",
        [](py::array_t<double> W, py::array_t<double> b, py::array_t<double> x) {
            const Tensor bt = from_numpy(b);
            auto g = gate::GateParams::initial(bt.size(), 0, Stream::Key);
            g.W.mutable_value() = from_numpy(W);
            g.b.mutable_value() = bt;
            return to_numpy(gate::soft_mask_values(g, from_numpy(x)));
        },
        py::arg("W"), py::arg("b"), py::arg("x"), "Soft retention mask for rows of spectral coefficients x.");
    m.def(
        "harden", [](const std::vector<double>& mask, double tau) { return gate::harden(mask, tau).retained; },
        py::arg("mask"), py::arg("tau") = gate::kDefaultTau, "Number of leading dimensions kept at threshold tau.");

    // Spectral basis.
    m.def(
        "compute_basis",
        [](py::array_t<double> samples) {
            const Tensor x = from_numpy(samples);
            spectral::CovarianceAccumulator acc(x.cols());
            acc.accumulate(x);
            const auto b = spectral::compute_basis(acc);
            return py::make_tuple(to_numpy(b.U), to_numpy(b.U_inv), b.eigenvalues);
        },
        py::arg("samples"), "PCA basis (U, U_inv, eigenvalues) of the rows of samples.");

    // Cache accounting and eviction arithmetic.
    py::class_<kv::RaggedKVCache>(m, "RaggedKVCache")
        .def(py::init([](std::size_t n_layers, std::size_t n_heads, std::size_t head_dim) {
                 return kv::RaggedKVCache({n_layers, n_heads, head_dim, kv::kDefaultRopeBase});
             }),
             py::arg("n_layers"), py::arg("n_heads"), py::arg("head_dim"))
        .def(
            "append",
            [](kv::RaggedKVCache& c, std::size_t layer, const std::vector<double>& k, const std::vector<double>& v,
               std::size_t position) { c.append(layer, k, v, position); },
            py::arg("layer"), py::arg("key"), py::arg("value"), py::arg("position"))
        .def("tokens", &kv::RaggedKVCache::tokens, py::arg("layer"))
        .def_property_readonly("total_floats", &kv::RaggedKVCache::total_floats)
        .def("memory_report", [](const kv::RaggedKVCache& c) { return memory_json(kv::memory_report(c)).dump(); });
    m.def("combined_budget", &evict::combined_budget, py::arg("keep_ratio"), py::arg("retain_rate"));

    // Model.
    py::class_<model::Model>(m, "Model")
        .def_static(
            "init",
            [](const std::string& config_json, std::uint64_t seed) {
                return model::Model::init(model::ModelConfig::from_json(json::parse(config_json)), seed);
            },
            py::arg("config_json"), py::arg("seed") = 0)
        .def_static("load", &model::Model::load, py::arg("path"))
        .def("save", &model::Model::save, py::arg("path"))
        .def_property_readonly("config_json", [](const model::Model& mdl) { return mdl.config().to_json().dump(); })
        .def(
            "forward",
            [](const model::Model& mdl, const std::vector<int>& tokens, const std::string& mode, double tau) {
                Tensor logits;
                {
                    py::gil_scoped_release release;
                    logits = model::forward(mdl, tokens, {.mode = mode_of(mode), .tau = tau});
                }
                return to_numpy(logits);
            },
            py::arg("tokens"), py::arg("mode") = "full", py::arg("tau") = gate::kDefaultTau,
            "Logits (T × vocab) for a token sequence in full, soft or hard mode.")
        .def(
            "hard_memory",
            [](const model::Model& mdl, const std::vector<int>& tokens, double tau) {
                model::InferenceSession s(mdl, {.mode = model::Mode::Hard, .tau = tau});
                s.forward(tokens);
                return memory_json(kv::memory_report(s.cache())).dump();
            },
            py::arg("tokens"), py::arg("tau") = gate::kDefaultTau,
            "Memory report of the ragged cache after prefilling tokens in hard mode.");

    // Harness subcommands. Each returns the report as JSON text.
    auto command = [&m](const char* name, json (*fn)(const harness::RunConfig&)) {
        m.def(
            name,
            [fn](const std::string& config, std::optional<std::uint64_t> seed, std::optional<std::string> out) {
                const auto cfg = load_config(config, seed, std::move(out));
                json rep;
                {
                    py::gil_scoped_release release;
                    rep = fn(cfg);
                }
                return rep.dump();
            },
            py::arg("config"), py::arg("seed") = py::none(), py::arg("out") = py::none());
    };
    command("calibrate", &harness::cmd_calibrate);
    command("train", &harness::cmd_train);
    command("evaluate", &harness::cmd_eval);
    command("analyze", &harness::cmd_analyze);
    command("bench", &harness::cmd_bench);
    m.def("config_hash", [](const std::filesystem::path& path) { return harness::RunConfig::load(path).hash(); },
          py::arg("config"));
}
