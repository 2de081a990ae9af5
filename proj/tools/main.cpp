// Command-line front end: data preparation, training, evaluation, ad-hoc
// recommendation, gradient verification, and synthetic benchmark generation.
// Exit codes: 0 success, 1 validation/config/data error, 2 numerical failure.

#include <ttt4rec/checkpoint.hpp>
#include <ttt4rec/eval.hpp>
#include <ttt4rec/gradcheck.hpp>
#include <ttt4rec/model.hpp>
#include <ttt4rec/runconfig.hpp>

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace {

using namespace ttt4rec;

std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

void echo_header(std::ostream& out, const RunConfig& cfg, const std::string& command) {
    out << "# command=" << command << "\n";
    for (const auto& line : config_echo_lines(cfg)) {
        out << "# " << line << "\n";
    }
}

int cmd_prepare(const std::string& input, const std::string& ratios_text, int min_len,
                const std::string& out_path, bool strict) {
    auto parsed = parse_interactions_file(input, strict);
    auto ratios = parse_ratios(ratios_text);
    auto ds = build_dataset(parsed.interactions, min_len, ratios, ratios_text);
    save_dataset(ds, out_path);
    std::cout << "users,items,interactions,mean_length,malformed\n";
    char mean_buf[32];
    std::snprintf(mean_buf, sizeof(mean_buf), "%.4f", ds.mean_length());
    std::cout << ds.users.size() << ',' << ds.vocab() << ',' << ds.interactions() << ','
              << mean_buf << ',' << parsed.malformed << "\n";
    return 0;
}

int cmd_synth(const std::string& out_path, std::int64_t users, Index items, std::int64_t length,
              std::uint64_t seed, const std::string& regimes_text,
              const std::string& switch_text) {
    SynthSpec spec;
    spec.users = users;
    spec.vocab = items;
    spec.seq_len = length;
    spec.seed = seed;

    Rng regime_rng = Rng(seed).fork(0xE6u);
    std::stringstream rs(regimes_text);
    std::string token;
    while (std::getline(rs, token, ',')) {
        if (token == "cycle") {
            spec.regimes.push_back(shared_regime(cycle_regime(items, regime_rng)));
        } else if (token == "uniform") {
            spec.regimes.push_back(shared_regime(uniform_regime(items)));
        } else if (token.rfind("markov", 0) == 0) {
            int fanout = 4;
            const auto colon = token.find(':');
            if (colon != std::string::npos) {
                fanout = std::stoi(token.substr(colon + 1));
            }
            spec.regimes.push_back(shared_regime(random_markov_regime(items, fanout, regime_rng)));
        } else if (token.rfind("personal", 0) == 0) {
            Index support = 8;
            int fanout = 2;
            const auto c1 = token.find(':');
            if (c1 != std::string::npos) {
                const auto c2 = token.find(':', c1 + 1);
                support = std::stol(token.substr(c1 + 1, c2 - c1 - 1));
                if (c2 != std::string::npos) {
                    fanout = std::stoi(token.substr(c2 + 1));
                }
            }
            spec.regimes.push_back(personal_regime(support, fanout));
        } else {
            throw ConfigError("unknown regime '" + token +
                              "' (expected cycle|uniform|markov[:fanout]|personal[:support[:fanout]])");
        }
    }
    if (!switch_text.empty()) {
        std::stringstream ss(switch_text);
        while (std::getline(ss, token, ',')) {
            spec.switch_points.push_back(std::stod(token));
        }
    }
    synth_generate_file(spec, out_path);
    std::cout << "wrote " << out_path << " (" << users << " users, " << items << " items, "
              << length << " steps each)\n";
    return 0;
}

int cmd_train(const std::string& config_path) {
    auto cfg = parse_run_config_file(config_path);
    set_finite_checks(cfg.finite_checks);
    if (cfg.data_path.empty()) {
        throw ConfigError("train needs data= in the config");
    }
    if (cfg.checkpoint_path.empty()) {
        throw ConfigError("train needs checkpoint= in the config");
    }
    auto data = load_dataset(cfg.data_path);
    Model model(cfg.model, data.vocab());
    AdamState opt(model.parameters(), cfg.model.outer_lr);

    std::filesystem::create_directories(cfg.report_dir);
    std::ofstream loss_csv(join_path(cfg.report_dir, "train_loss.csv"));
    if (!loss_csv) {
        throw IoError("cannot write the loss report in " + cfg.report_dir);
    }
    echo_header(loss_csv, cfg, "train");
    loss_csv << "epoch,mean_loss,target_positions\n";

    for (int epoch = 0; epoch < cfg.model.epochs; ++epoch) {
        auto result = train_epoch(model, data, opt, epoch);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", result.mean_loss);
        loss_csv << epoch << ',' << buf << ',' << result.target_positions << "\n";
        loss_csv.flush();
        std::cout << "epoch " << epoch << " loss " << buf << "\n";
        checkpoint_save(model, cfg.checkpoint_path);
    }
    if (cfg.model.epochs == 0) {
        checkpoint_save(model, cfg.checkpoint_path);  // checkpoint equals initialization
    }
    std::cout << "checkpoint " << cfg.checkpoint_path << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint_override,
             const std::string& segment_text) {
    auto cfg = parse_run_config_file(config_path);
    set_finite_checks(cfg.finite_checks);
    if (!checkpoint_override.empty()) {
        cfg.checkpoint_path = checkpoint_override;
    }
    if (cfg.data_path.empty() || cfg.checkpoint_path.empty()) {
        throw ConfigError("eval needs data= and checkpoint= (config or flags)");
    }
    auto data = load_dataset(cfg.data_path);
    auto model = checkpoint_load(cfg.checkpoint_path, cfg.model, data.vocab());

    EvalOptions opts;
    opts.segment = parse_segment(segment_text);
    opts.cutoffs = cfg.cutoffs;
    opts.adapt = cfg.model.adapt_at_eval;
    opts.threads = cfg.threads;
    auto report = evaluate(model, data, opts);

    std::filesystem::create_directories(cfg.report_dir);
    const auto path = join_path(cfg.report_dir, "eval_" + segment_text + ".csv");
    std::ofstream csv(path);
    if (!csv) {
        throw IoError("cannot write " + path);
    }
    std::vector<std::string> echo{"command=eval", "segment=" + segment_text};
    auto lines = config_echo_lines(cfg);
    echo.insert(echo.end(), lines.begin(), lines.end());
    write_report_csv(report, csv, echo);

    std::ostringstream stdout_csv;
    write_report_csv(report, stdout_csv, {});
    std::cout << stdout_csv.str();
    return 0;
}

int cmd_recommend(const std::string& config_path, const std::string& checkpoint_override,
                  const std::string& items_text, int top_k) {
    auto cfg = parse_run_config_file(config_path);
    set_finite_checks(cfg.finite_checks);
    if (!checkpoint_override.empty()) {
        cfg.checkpoint_path = checkpoint_override;
    }
    if (cfg.data_path.empty() || cfg.checkpoint_path.empty()) {
        throw ConfigError("recommend needs data= and checkpoint= (config or flags)");
    }
    auto data = load_dataset(cfg.data_path);
    auto model = checkpoint_load(cfg.checkpoint_path, cfg.model, data.vocab());

    std::vector<std::int32_t> items;
    std::stringstream ss(items_text);
    std::string token;
    while (std::getline(ss, token, ',')) {
        const auto idx = data.index_of(token);
        if (idx < 0) {
            throw DataError("unknown item id: " + token);
        }
        items.push_back(idx);
    }
    if (items.empty()) {
        throw ConfigError("recommend needs at least one item");
    }
    auto window = truncate_context(items, cfg.model.max_context);

    auto stream = model.stream_begin(cfg.model.adapt_at_eval);
    for (auto it : window) {
        model.stream_push(stream, it);
    }
    auto scores = model.stream_scores(stream);
    auto probs = softmax(scores);

    // rank all items, clamp the cutoff to the vocabulary
    std::vector<Index> order(static_cast<std::size_t>(model.vocab()));
    for (Index i = 0; i < model.vocab(); ++i) {
        order[static_cast<std::size_t>(i)] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
        return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(std::max(top_k, 0)),
                                            order.size());
    std::cout << "item_id,probability\n";
    for (std::size_t r = 0; r < take; ++r) {
        const Index idx = order[r];
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", probs[static_cast<std::size_t>(idx)]);
        std::cout << data.items[static_cast<std::size_t>(idx + 1)] << ',' << buf << "\n";
    }
    return 0;
}

// The gradient verification suite: op-level checks, differentiation through
// the inner updates, and the full micro model on all four variants.
int cmd_gradcheck(const std::string& micro_config_path, bool corrupt) {
    set_finite_checks(true);
    Index d = 4;
    Index vocab = 6;
    Index n = 4;
    Index inner_hidden = 6;
    if (!micro_config_path.empty()) {
        auto cfg = parse_run_config_file(micro_config_path);
        d = cfg.model.embed_dim;
        inner_hidden = cfg.model.inner_hidden;
    }

    struct Entry {
        std::string name;
        double worst;
        bool passed;
    };
    std::vector<Entry> entries;
    auto run = [&](const std::string& name, const GradCheckReport& report) {
        entries.push_back({name, report.worst(), report.passed()});
    };

    Rng rng(12345);
    {
        auto a = randn({n, d}, 0.0, 1.0, rng, true);
        auto b = randn({d, n}, 0.0, 1.0, rng, true);
        auto vec = randn({d}, 0.0, 1.0, rng, true);
        auto kernel = randn({4, d}, 0.0, 1.0, rng, true);
        auto gain = randn({d}, 1.0, 0.1, rng, true);
        auto bias = randn({d}, 0.0, 0.1, rng, true);
        auto probe = [&](Shape shape) {
            const Index count = numel(shape);
            std::vector<double> v(static_cast<std::size_t>(count));
            for (auto& x : v) {
                x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * (0.5 + rng.uniform01());
            }
            return make_tensor(std::move(shape), std::move(v));
        };
        auto probe_nd = probe({n, d});
        auto probe_nn = probe({n, n});
        auto probe_n = probe({n});
        std::vector<std::pair<std::string, TensorPtr>> params{
            {"a", a}, {"b", b}, {"vec", vec}, {"kernel", kernel}, {"gain", gain}, {"bias", bias}};
        std::vector<std::int32_t> targets(static_cast<std::size_t>(n), 1);
        run("matmul", finite_diff_check([&] { return dot(matmul(a, b), probe_nn); }, params));
        run("matvec", finite_diff_check([&] { return dot(matvec(a, vec), probe_n); }, params));
        run("gelu", finite_diff_check([&] { return dot(gelu(a), probe_nd); }, params));
        run("gelu_prime",
            finite_diff_check([&] { return dot(gelu_prime(a), probe_nd); }, params));
        run("layer_norm",
            finite_diff_check([&] { return dot(layer_norm(a, gain, bias), probe_nd); }, params));
        run("softmax_cross_entropy", finite_diff_check(
                                         [&] {
                                             return softmax_cross_entropy(
                                                 matmul(a, b), targets);
                                         },
                                         params));
        run("causal_depthwise_conv1d",
            finite_diff_check(
                [&] { return dot(causal_depthwise_conv1d(a, kernel), probe_nd); }, params));
        if (corrupt) {
            // Self-test hook: an op whose registered backward is wrong by
            // construction must make the suite fail.
            auto bad = [&]() {
                auto out = make_tensor(a->shape, a->data, true);
                detail::record_op("corrupted", {a}, out, [a2 = a, o = out.get()]() {
                    std::vector<double> g(o->grad.size());
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        g[i] = o->grad[i] * 1.01;
                    }
                    a2->accum_grad(g);
                });
                return sum_all(out);
            };
            run("corrupted_selftest", finite_diff_check(bad, params));
        }
    }

    // differentiation through the inner updates
    {
        auto x = randn({8, d}, 0.0, 1.0, rng);
        auto probe = randn({8, d}, 0.0, 1.0, rng);
        for (auto kind : {InnerKind::linear, InnerKind::mlp}) {
            ViewProjections proj;
            proj.key = randn({d, d}, 0.0, 0.5, rng, true);
            proj.query = randn({d, d}, 0.0, 0.5, rng, true);
            proj.value = randn({d, d}, 0.0, 0.5, rng, true);
            auto state = kind == InnerKind::linear ? make_linear_state(d)
                                                   : make_mlp_state(d, inner_hidden, rng);
            std::vector<std::uint8_t> valid(8, 1);
            auto loss = [&]() {
                auto views = project_views(x, proj);
                auto result = ttt_scan(views.key, views.value, views.query, state,
                                       InnerLoopConfig{0.1, true}, valid);
                return dot(result.outputs, probe);
            };
            std::vector<std::pair<std::string, TensorPtr>> params{
                {"key", proj.key}, {"query", proj.query}, {"value", proj.value}};
            for (const auto& t : state.tensors()) {
                params.emplace_back("state", t);
            }
            run(std::string("ttt_scan_outer_") + inner_name(kind),
                finite_diff_check(loss, params));
        }
    }

    // full micro model, all four variants
    {
        std::vector<std::int32_t> items{2, 5, 1, 4};
        std::vector<std::int32_t> targets{4, 0, 3, 2};
        std::vector<std::uint8_t> mask(items.size(), 1);
        for (auto backbone : {BackboneKind::transformer, BackboneKind::mamba}) {
            for (auto inner : {InnerKind::linear, InnerKind::mlp}) {
                ModelConfig cfg;
                cfg.embed_dim = d;
                cfg.inner_hidden = inner_hidden;
                cfg.backbone = backbone;
                cfg.inner = inner;
                cfg.dropout_rate = 0.0;
                cfg.max_context = 16;
                cfg.seed = 99;
                Model model(cfg, vocab);
                Rng init_rng(cfg.seed * 17 + static_cast<std::uint64_t>(inner));
                randomize_parameters(model, 0.3, init_rng);
                auto loss = [&]() {
                    Rng r(1);
                    auto h = model.forward_sequence(items, mask, Mode::eval, r);
                    std::vector<TensorPtr> rows;
                    for (Index t = 0; t < static_cast<Index>(items.size()); ++t) {
                        rows.push_back(row(h, t));
                    }
                    auto logits = matmul(stack_rows(rows), transpose(model.head_matrix()));
                    return softmax_cross_entropy(logits, targets);
                };
                auto params = model.named_parameters();
                run(std::string("model_") + backbone_name(backbone) + "_" + inner_name(inner),
                    finite_diff_check(loss, params));
            }
        }
    }

    bool all_passed = true;
    std::cout << "check,max_rel_error,tolerance,status\n";
    for (const auto& e : entries) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.3e", e.worst);
        std::cout << e.name << ',' << buf << ",1e-4," << (e.passed ? "pass" : "FAIL") << "\n";
        all_passed = all_passed && e.passed;
    }
    return all_passed ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ttt4rec: adaptive sequential recommender"};
    app.require_subcommand(1);

    // prepare
    std::string in_path;
    std::string ratios = "3:2:5";
    int min_len = 1;
    std::string out_path;
    bool strict = false;
    auto* prepare = app.add_subcommand("prepare", "build a dataset from an interaction log");
    prepare->add_option("--input", in_path, "raw interaction csv/tsv")->required();
    prepare->add_option("--ratios", ratios, "train:val:test split");
    prepare->add_option("--min-len", min_len, "minimum interactions per user");
    prepare->add_option("--out", out_path, "prepared dataset path")->required();
    prepare->add_flag("--strict", strict, "fail on the first malformed row");

    // synth
    std::string synth_out;
    std::int64_t users = 50;
    Index items = 100;
    std::int64_t length = 20;
    std::uint64_t seed = 1;
    std::string regimes = "markov:4";
    std::string switches;
    auto* synth = app.add_subcommand("synth", "generate a synthetic interaction log");
    synth->add_option("--out", synth_out, "output csv path")->required();
    synth->add_option("--users", users, "number of users");
    synth->add_option("--items", items, "vocabulary size");
    synth->add_option("--length", length, "sequence length per user");
    synth->add_option("--seed", seed, "generator seed");
    synth->add_option("--regimes", regimes,
                      "comma list: cycle|uniform|markov[:fanout]|personal[:support[:fanout]]");
    synth->add_option("--switch", switches, "comma list of switch fractions in (0,1)");

    // train / eval / recommend
    std::string config_path;
    auto* train = app.add_subcommand("train", "train a model from a config");
    train->add_option("--config", config_path, "run config path")->required();

    std::string eval_config;
    std::string eval_checkpoint;
    std::string segment = "test";
    auto* eval_cmd = app.add_subcommand("eval", "rank every instance of a split");
    eval_cmd->add_option("--config", eval_config, "run config path")->required();
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint override");
    eval_cmd->add_option("--segment", segment, "train|val|test");

    std::string rec_config;
    std::string rec_checkpoint;
    std::string rec_items;
    int top_k = 10;
    auto* rec = app.add_subcommand("recommend", "score the next item for an ad-hoc history");
    rec->add_option("--config", rec_config, "run config path")->required();
    rec->add_option("--checkpoint", rec_checkpoint, "checkpoint override");
    rec->add_option("--items", rec_items, "comma-separated item ids")->required();
    rec->add_option("--top-k", top_k, "list length");

    std::string micro_config;
    bool corrupt = false;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference verification suite");
    gradcheck->add_option("--micro-config", micro_config, "optional config for micro dims");
    gradcheck->add_flag("--selftest-corrupt", corrupt,
                        "inject a wrong gradient to prove the suite catches it");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*prepare) {
            return cmd_prepare(in_path, ratios, min_len, out_path, strict);
        }
        if (*synth) {
            return cmd_synth(synth_out, users, items, length, seed, regimes, switches);
        }
        if (*train) {
            return cmd_train(config_path);
        }
        if (*eval_cmd) {
            return cmd_eval(eval_config, eval_checkpoint, segment);
        }
        if (*rec) {
            return cmd_recommend(rec_config, rec_checkpoint, rec_items, top_k);
        }
        if (*gradcheck) {
            return cmd_gradcheck(micro_config, corrupt);
        }
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const ttt4rec::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
