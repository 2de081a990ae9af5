// Python bindings for the core operations: synthetic data, dataset
// preparation, training, evaluation, checkpoints, and a few numeric
// primitives that are handy for spot checks from notebooks.

#include <ttt4rec/checkpoint.hpp>
#include <ttt4rec/eval.hpp>
#include <ttt4rec/gradcheck.hpp>
#include <ttt4rec/model.hpp>
#include <ttt4rec/runconfig.hpp>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

namespace py = pybind11;
using namespace ttt4rec;

namespace {

std::vector<double> py_gelu(const std::vector<double>& xs) {
    auto t = gelu(make_tensor({static_cast<Index>(xs.size())}, xs));
    return t->data;
}

std::vector<double> py_rope(const std::vector<double>& row_values, Index position,
                            double rotation_factor) {
    const auto d = static_cast<Index>(row_values.size());
    RopeConfig cfg(d, rotation_factor);
    auto t = rope_apply(make_tensor({1, d}, row_values), position, cfg);
    return t->data;
}

SynthSpec build_spec(std::int64_t users, Index items, std::int64_t length, std::uint64_t seed,
                     const std::vector<std::string>& regimes,
                     const std::vector<double>& switch_points) {
    SynthSpec spec;
    spec.users = users;
    spec.vocab = items;
    spec.seq_len = length;
    spec.seed = seed;
    spec.switch_points = switch_points;
    Rng rng = Rng(seed).fork(0xE6u);
    for (const auto& name : regimes) {
        if (name == "cycle") {
            spec.regimes.push_back(shared_regime(cycle_regime(items, rng)));
        } else if (name == "uniform") {
            spec.regimes.push_back(shared_regime(uniform_regime(items)));
        } else if (name.rfind("markov", 0) == 0) {
            int fanout = 4;
            const auto colon = name.find(':');
            if (colon != std::string::npos) {
                fanout = std::stoi(name.substr(colon + 1));
            }
            spec.regimes.push_back(shared_regime(random_markov_regime(items, fanout, rng)));
        } else if (name.rfind("personal", 0) == 0) {
            Index support = 8;
            int fanout = 2;
            const auto c1 = name.find(':');
            if (c1 != std::string::npos) {
                const auto c2 = name.find(':', c1 + 1);
                support = std::stol(name.substr(c1 + 1, c2 - c1 - 1));
                if (c2 != std::string::npos) {
                    fanout = std::stoi(name.substr(c2 + 1));
                }
            }
            spec.regimes.push_back(personal_regime(support, fanout));
        } else {
            throw ConfigError("unknown regime: " + name);
        }
    }
    return spec;
}

py::dict report_to_dict(const EvalReport& report) {
    py::dict out;
    py::list rows;
    for (const auto& r : report.rows) {
        py::dict row;
        row["segment"] = r.segment;
        row["metric"] = r.metric;
        row["cutoff"] = r.cutoff;
        row["value"] = r.value;
        row["instances"] = r.instances;
        rows.append(row);
    }
    out["rows"] = rows;
    out["instances"] = report.instances;
    return out;
}

}  // namespace

PYBIND11_MODULE(_ttt4rec, m) {
    m.doc() = "Sequential recommender with per-token adaptive hidden states";
    m.attr("__version__") = "0.1.0";

    py::register_exception<Error>(m, "Ttt4recError");

    m.def("gelu", &py_gelu, py::arg("values"));
    m.def("rope_apply", &py_rope, py::arg("row"), py::arg("position"),
          py::arg("rotation_factor") = 1000.0);
    m.def("softmax", [](const std::vector<double>& v) { return softmax(v); }, py::arg("scores"));
    m.def(
        "rank_of_target",
        [](const std::vector<double>& scores, Index target) {
            return rank_of_target(scores, target);
        },
        py::arg("scores"), py::arg("target"));
    m.def(
        "metrics_at_k",
        [](Index rank, int k) {
            auto [hr, ndcg] = metrics_at_k(rank, k);
            return py::make_tuple(hr, ndcg);
        },
        py::arg("rank"), py::arg("k"));

    m.def(
        "synth_generate",
        [](const std::string& path, std::int64_t users, Index items, std::int64_t length,
           std::uint64_t seed, const std::vector<std::string>& regimes,
           const std::vector<double>& switch_points) {
            synth_generate_file(build_spec(users, items, length, seed, regimes, switch_points),
                                path);
        },
        py::arg("path"), py::arg("users") = 50, py::arg("items") = 100, py::arg("length") = 20,
        py::arg("seed") = 1, py::arg("regimes") = std::vector<std::string>{"markov:4"},
        py::arg("switch_points") = std::vector<double>{});

    m.def(
        "prepare_dataset",
        [](const std::string& input, const std::string& output, const std::string& ratios,
           int min_len, bool strict) {
            auto parsed = parse_interactions_file(input, strict);
            auto ds = build_dataset(parsed.interactions, min_len, parse_ratios(ratios), ratios);
            save_dataset(ds, output);
            py::dict summary;
            summary["users"] = ds.users.size();
            summary["items"] = ds.vocab();
            summary["interactions"] = ds.interactions();
            summary["mean_length"] = ds.mean_length();
            summary["malformed"] = parsed.malformed;
            return summary;
        },
        py::arg("input"), py::arg("output"), py::arg("ratios") = "3:2:5",
        py::arg("min_len") = 1, py::arg("strict") = false);

    py::class_<SequenceDataset>(m, "Dataset")
        .def_static("load", &load_dataset, py::arg("path"))
        .def_property_readonly("vocab", &SequenceDataset::vocab)
        .def_property_readonly("users", [](const SequenceDataset& d) { return d.users.size(); })
        .def_property_readonly("interactions", &SequenceDataset::interactions)
        .def_property_readonly("mean_length", &SequenceDataset::mean_length);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("embed_dim", &ModelConfig::embed_dim)
        .def_readwrite("blocks", &ModelConfig::blocks)
        .def_readwrite("inner_hidden", &ModelConfig::inner_hidden)
        .def_readwrite("rope_factor", &ModelConfig::rope_factor)
        .def_readwrite("inner_lr", &ModelConfig::inner_lr)
        .def_readwrite("adapt_at_eval", &ModelConfig::adapt_at_eval)
        .def_readwrite("dropout", &ModelConfig::dropout_rate)
        .def_readwrite("max_context", &ModelConfig::max_context)
        .def_readwrite("outer_lr", &ModelConfig::outer_lr)
        .def_readwrite("batch_size", &ModelConfig::batch_size)
        .def_readwrite("epochs", &ModelConfig::epochs)
        .def_readwrite("seed", &ModelConfig::seed)
        .def_readwrite("tie_head", &ModelConfig::tie_head)
        .def_readwrite("conv_width", &ModelConfig::conv_width)
        .def_property(
            "backbone",
            [](const ModelConfig& c) { return std::string(backbone_name(c.backbone)); },
            [](ModelConfig& c, const std::string& s) { c.backbone = parse_backbone(s); })
        .def_property(
            "inner", [](const ModelConfig& c) { return std::string(inner_name(c.inner)); },
            [](ModelConfig& c, const std::string& s) { c.inner = parse_inner(s); });

    py::class_<Model>(m, "Model")
        .def(py::init<const ModelConfig&, Index>(), py::arg("config"), py::arg("vocab"))
        .def_property_readonly("vocab", &Model::vocab)
        .def(
            "fit",
            [](Model& model, const SequenceDataset& data, int epochs) {
                AdamState opt(model.parameters(), model.config().outer_lr);
                std::vector<double> losses;
                {
                    py::gil_scoped_release release;
                    for (int epoch = 0; epoch < epochs; ++epoch) {
                        losses.push_back(train_epoch(model, data, opt, epoch).mean_loss);
                    }
                }
                return losses;
            },
            py::arg("dataset"), py::arg("epochs"))
        .def(
            "evaluate",
            [](const Model& model, const SequenceDataset& data, const std::string& segment,
               const std::vector<int>& cutoffs, bool adapt) {
                EvalOptions opts;
                opts.segment = parse_segment(segment);
                opts.cutoffs = cutoffs;
                opts.adapt = adapt;
                EvalReport report;
                {
                    py::gil_scoped_release release;
                    report = evaluate(model, data, opts);
                }
                return report_to_dict(report);
            },
            py::arg("dataset"), py::arg("segment") = "test",
            py::arg("cutoffs") = std::vector<int>{10, 50}, py::arg("adapt") = true)
        .def(
            "recommend",
            [](const Model& model, const SequenceDataset& data,
               const std::vector<std::string>& items, int top_k) {
                std::vector<std::int32_t> idx;
                for (const auto& it : items) {
                    const auto i = data.index_of(it);
                    if (i < 0) {
                        throw DataError("unknown item id: " + it);
                    }
                    idx.push_back(i);
                }
                auto window = truncate_context(idx, model.config().max_context);
                auto stream = model.stream_begin(model.config().adapt_at_eval);
                for (auto i : window) {
                    model.stream_push(stream, i);
                }
                auto scores = model.stream_scores(stream);
                auto probs = softmax(scores);
                std::vector<Index> order(scores.size());
                for (std::size_t i = 0; i < order.size(); ++i) {
                    order[i] = static_cast<Index>(i);
                }
                std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
                    return scores[static_cast<std::size_t>(a)] >
                           scores[static_cast<std::size_t>(b)];
                });
                py::list out;
                const auto take = std::min<std::size_t>(
                    order.size(), static_cast<std::size_t>(std::max(top_k, 0)));
                for (std::size_t r = 0; r < take; ++r) {
                    out.append(py::make_tuple(
                        data.items[static_cast<std::size_t>(order[r] + 1)],
                        probs[static_cast<std::size_t>(order[r])]));
                }
                return out;
            },
            py::arg("dataset"), py::arg("items"), py::arg("top_k") = 10)
        .def("save", &checkpoint_save, py::arg("path"))
        .def_static("load", &checkpoint_load, py::arg("path"), py::arg("config"),
                    py::arg("vocab"));
}
