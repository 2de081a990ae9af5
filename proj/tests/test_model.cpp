#include <ttt4rec/checkpoint.hpp>
#include <ttt4rec/gradcheck.hpp>
#include <ttt4rec/model.hpp>

#include <doctest.h>

#include "test_support.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace ttt4rec;
using ttt4rec::testing::ones_mask;

namespace {

ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.embed_dim = 4;
    cfg.blocks = 1;
    cfg.inner_hidden = 6;
    cfg.max_context = 16;
    cfg.dropout_rate = 0.0;
    cfg.batch_size = 8;
    cfg.seed = 5;
    return cfg;
}

// One global deterministic cycle shared by every user: the next item is a
// function of the previous one, so the data is perfectly memorizable.
SequenceDataset cycle_dataset(Index vocab, int users, int seq_len, std::uint64_t seed,
                              const std::string& ratios = "3:2:5") {
    SynthSpec spec;
    spec.users = users;
    spec.vocab = vocab;
    spec.seq_len = seq_len;
    spec.seed = seed;
    Rng r(seed);
    spec.regimes.push_back(shared_regime(cycle_regime(vocab, r)));
    std::ostringstream out;
    synth_generate(spec, out);
    std::istringstream in(out.str());
    return build_dataset(parse_interactions(in).interactions, 1, parse_ratios(ratios), ratios);
}

SequenceDataset uniform_dataset(Index vocab, int users, int seq_len, std::uint64_t seed) {
    SynthSpec spec;
    spec.users = users;
    spec.vocab = vocab;
    spec.seq_len = seq_len;
    spec.seed = seed;
    spec.regimes.push_back(shared_regime(uniform_regime(vocab)));
    std::ostringstream out;
    synth_generate(spec, out);
    std::istringstream in(out.str());
    return build_dataset(parse_interactions(in).interactions, 1, parse_ratios("3:2:5"));
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("config validation lists every problem at once") {
    ModelConfig cfg;
    cfg.embed_dim = -3;
    cfg.blocks = 0;
    cfg.dropout_rate = 1.5;
    try {
        cfg.validate();
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("embed_dim") != std::string::npos);
        CHECK(msg.find("blocks") != std::string::npos);
        CHECK(msg.find("dropout") != std::string::npos);
    }
}

TEST_CASE("a batch of one equals the unbatched forward bitwise") {
    auto cfg = micro_config();
    Model model(cfg, 9);
    std::vector<std::int32_t> items{3, 1, 4, 1, 5};
    auto mask = ones_mask(items.size());
    Rng r1(1);
    Rng r2(1);
    auto a = model.forward_sequence(items, mask, Mode::eval, r1);
    auto b = model.forward_sequence(items, mask, Mode::eval, r2);
    CHECK(a->data == b->data);
}

TEST_CASE("padded prefixes emit zeros and match the bare run bitwise") {
    for (auto backbone : {BackboneKind::transformer, BackboneKind::mamba}) {
        auto cfg = micro_config();
        cfg.backbone = backbone;
        Model model(cfg, 9);
        std::vector<std::int32_t> bare{3, 1, 4};
        auto bare_mask = ones_mask(bare.size());
        std::vector<std::int32_t> padded{0, 0, 3, 1, 4};
        std::vector<std::uint8_t> padded_mask{0, 0, 1, 1, 1};
        Rng r1(1);
        Rng r2(1);
        auto direct = model.forward_sequence(bare, bare_mask, Mode::eval, r1);
        auto padded_out = model.forward_sequence(padded, padded_mask, Mode::eval, r2);
        const Index d = cfg.embed_dim;
        for (Index j = 0; j < 2 * d; ++j) {
            CHECK(padded_out->data[static_cast<std::size_t>(j)] == 0.0);
        }
        for (Index t = 0; t < 3; ++t) {
            for (Index j = 0; j < d; ++j) {
                CHECK(padded_out->data[static_cast<std::size_t>((t + 2) * d + j)] ==
                      direct->data[static_cast<std::size_t>(t * d + j)]);
            }
        }
    }
}

TEST_CASE("eval forward is deterministic and train dropout is seed-driven") {
    auto cfg = micro_config();
    cfg.dropout_rate = 0.4;
    Model model(cfg, 9);
    std::vector<std::int32_t> items{2, 7, 5, 1};
    auto mask = ones_mask(items.size());
    Rng e1(11);
    Rng e2(77);
    CHECK(model.forward_sequence(items, mask, Mode::eval, e1)->data ==
          model.forward_sequence(items, mask, Mode::eval, e2)->data);
    Rng t1(11);
    Rng t1_again(11);
    Rng t2(12);
    auto a = model.forward_sequence(items, mask, Mode::train, t1);
    auto b = model.forward_sequence(items, mask, Mode::train, t1_again);
    auto c = model.forward_sequence(items, mask, Mode::train, t2);
    CHECK(a->data == b->data);
    CHECK(a->data != c->data);
}

TEST_CASE("predict_scores") {
    auto cfg = micro_config();
    Model model(cfg, 10);
    const Index d = cfg.embed_dim;

    auto zero_h = zeros({d});
    auto logits = model.predict_scores(zero_h);
    CHECK(logits->shape == Shape{10});
    for (double v : logits->data) {
        CHECK(v == 0.0);
    }
    auto probs = softmax(logits->data);
    for (double p : probs) {
        CHECK(p == doctest::Approx(0.1).epsilon(1e-12));
    }

    // argmax agrees with explicit dot products
    Rng rng(3);
    auto h = randn({d}, 0.0, 1.0, rng);
    auto scores = model.predict_scores(h);
    auto head = model.head_matrix();
    Index best = 0;
    double best_score = -1e300;
    for (Index i = 0; i < 10; ++i) {
        double s = 0.0;
        for (Index j = 0; j < d; ++j) {
            s += head->data[static_cast<std::size_t>(i * d + j)] *
                 h->data[static_cast<std::size_t>(j)];
        }
        CHECK(scores->data[static_cast<std::size_t>(i)] == doctest::Approx(s).epsilon(1e-12));
        if (s > best_score) {
            best_score = s;
            best = i;
        }
    }
    Index argmax = 0;
    for (Index i = 1; i < 10; ++i) {
        if (scores->data[static_cast<std::size_t>(i)] >
            scores->data[static_cast<std::size_t>(argmax)]) {
            argmax = i;
        }
    }
    CHECK(argmax == best);

    // softmax over the scores sums to one
    auto p = softmax(scores->data);
    double total = 0.0;
    for (double v : p) {
        total += v;
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
}

TEST_CASE("full-model outer gradients match finite differences on the micro setup") {
    // every variant of the backbone x inner grid, dim 4, six items, one block
    std::vector<std::int32_t> items{2, 5, 1, 4};
    std::vector<std::int32_t> targets{4, 0, 3, 2};
    for (auto backbone : {BackboneKind::transformer, BackboneKind::mamba}) {
        for (auto inner : {InnerKind::linear, InnerKind::mlp}) {
            auto cfg = micro_config();
            cfg.backbone = backbone;
            cfg.inner = inner;
            Model model(cfg, 6);
            // moderate weight scales keep every gradient coordinate clear of
            // the finite-difference noise floor
            Rng init_rng(cfg.seed * 17 + static_cast<std::uint64_t>(inner));
            randomize_parameters(model, 0.3, init_rng);
            auto mask = ones_mask(items.size());
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
            auto report = finite_diff_check(loss, params, 1e-4);
            INFO(backbone_name(backbone), "+", inner_name(inner), " worst ", report.worst());
            CHECK(report.passed());
        }
    }
}

TEST_CASE("no dead parameters on a smoke batch") {
    auto cfg = micro_config();
    cfg.embed_dim = 8;
    cfg.inner_hidden = 6;
    for (auto backbone : {BackboneKind::transformer, BackboneKind::mamba}) {
        cfg.backbone = backbone;
        Model model(cfg, 12);
        auto data = cycle_dataset(12, 6, 12, 3, "8:1:1");
        auto norms = gradient_norms(model, data);
        for (const auto& [name, norm] : norms) {
            INFO(backbone_name(backbone), " parameter ", name);
            CHECK(norm > 0.0);
        }
    }
}

TEST_CASE("training memorizes a single sequence") {
    auto cfg = micro_config();
    cfg.embed_dim = 16;
    cfg.inner = InnerKind::linear;
    cfg.outer_lr = 0.01;
    cfg.batch_size = 1;
    auto data = cycle_dataset(8, 1, 12, 17, "8:1:1");
    Model model(cfg, data.vocab());
    AdamState opt(model.parameters(), cfg.outer_lr);
    double loss = 1e9;
    for (int epoch = 0; epoch < 400 && loss >= 0.01; ++epoch) {
        loss = train_epoch(model, data, opt, epoch).mean_loss;
    }
    CHECK(loss < 0.01);
}

TEST_CASE("zero learning rate freezes the loss") {
    auto cfg = micro_config();
    auto data = cycle_dataset(10, 4, 10, 23, "8:1:1");
    Model model(cfg, data.vocab());
    AdamState opt(model.parameters(), cfg.outer_lr);
    opt.learning_rate = 0.0;
    const double first = train_epoch(model, data, opt, 0).mean_loss;
    const double second = train_epoch(model, data, opt, 0).mean_loss;
    CHECK(first == second);
}

TEST_CASE("first-epoch loss sits near the uniform baseline") {
    auto cfg = micro_config();
    cfg.embed_dim = 8;
    const Index vocab = 50;
    auto data = uniform_dataset(vocab, 20, 12, 29);
    Model model(cfg, vocab);
    AdamState opt(model.parameters(), cfg.outer_lr);
    const double loss = train_epoch(model, data, opt, 0).mean_loss;
    const double baseline = std::log(static_cast<double>(vocab));
    CHECK(loss > 0.9 * baseline);
    CHECK(loss < 1.1 * baseline);
}

TEST_CASE("twenty epochs halve the loss for all four variants") {
    for (auto backbone : {BackboneKind::transformer, BackboneKind::mamba}) {
        for (auto inner : {InnerKind::linear, InnerKind::mlp}) {
            ModelConfig cfg;
            cfg.embed_dim = 16;
            cfg.inner_hidden = 16;
            cfg.backbone = backbone;
            cfg.inner = inner;
            cfg.dropout_rate = 0.0;
            cfg.max_context = 32;
            cfg.outer_lr = 0.003;
            cfg.batch_size = 16;
            cfg.seed = 31;
            auto data = cycle_dataset(30, 50, 12, 31, "6:2:2");
            Model model(cfg, data.vocab());
            AdamState opt(model.parameters(), cfg.outer_lr);
            const double first = train_epoch(model, data, opt, 0).mean_loss;
            double last = first;
            for (int epoch = 1; epoch < 20; ++epoch) {
                last = train_epoch(model, data, opt, epoch).mean_loss;
            }
            INFO(backbone_name(backbone), "+", inner_name(inner), " first ", first, " last ",
                 last);
            CHECK(last <= 0.5 * first);
        }
    }
}

TEST_CASE("streaming inference equals the graph forward bitwise") {
    for (auto backbone : {BackboneKind::transformer, BackboneKind::mamba}) {
        for (auto inner : {InnerKind::linear, InnerKind::mlp}) {
            auto cfg = micro_config();
            cfg.embed_dim = 8;
            cfg.backbone = backbone;
            cfg.inner = inner;
            cfg.inner_hidden = 5;
            cfg.blocks = (inner == InnerKind::linear) ? 2 : 1;  // cover stacked blocks too
            Model model(cfg, 11);
            std::vector<std::int32_t> items{4, 9, 2, 2, 7, 1};
            auto mask = ones_mask(items.size());
            Rng r(1);
            auto h = model.forward_sequence(items, mask, Mode::eval, r);

            auto stream = model.stream_begin(true);
            for (std::int32_t it : items) {
                model.stream_push(stream, it);
            }
            const Index d = cfg.embed_dim;
            for (Index j = 0; j < d; ++j) {
                CHECK(stream.last_h[static_cast<std::size_t>(j)] ==
                      h->data[static_cast<std::size_t>((items.size() - 1) * d + j)]);
            }
            auto graph_scores = model.predict_scores(row(h, static_cast<Index>(items.size()) - 1));
            auto stream_scores = model.stream_scores(stream);
            CHECK(stream_scores == graph_scores->data);
        }
    }
}

TEST_CASE("checkpoint round trip") {
    auto cfg = micro_config();
    cfg.embed_dim = 8;
    Model model(cfg, 14);
    std::vector<std::int32_t> items{3, 11, 7};
    auto mask = ones_mask(items.size());
    Rng r1(1);
    auto before = model.forward_sequence(items, mask, Mode::eval, r1);

    const auto path = temp_path("ttt4rec_ckpt_test.bin");
    checkpoint_save(model, path);
    auto loaded = checkpoint_load(path, cfg, 14);
    Rng r2(1);
    auto after = loaded.forward_sequence(items, mask, Mode::eval, r2);
    CHECK(before->data == after->data);

    // saving the loaded model reproduces the file byte for byte
    const auto path2 = temp_path("ttt4rec_ckpt_test2.bin");
    checkpoint_save(loaded, path2);
    std::ifstream f1(path, std::ios::binary);
    std::ifstream f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);

    // the file leads with the magic bytes
    CHECK(b1.rfind("TTT4REC1", 0) == 0);

    // a different dimension is rejected up front
    auto other = cfg;
    other.embed_dim = 16;
    CHECK_THROWS_AS(checkpoint_load(path, other, 14), ConfigError);

    // truncation is rejected
    const auto path3 = temp_path("ttt4rec_ckpt_test3.bin");
    {
        std::ofstream out(path3, std::ios::binary);
        out.write(b1.data(), static_cast<std::streamsize>(b1.size() / 2));
    }
    CHECK_THROWS_AS(checkpoint_load(path3, cfg, 14), IoError);

    // corrupting the magic is rejected
    const auto path4 = temp_path("ttt4rec_ckpt_test4.bin");
    {
        std::string corrupted = b1;
        corrupted[0] = 'X';
        std::ofstream out(path4, std::ios::binary);
        out.write(corrupted.data(), static_cast<std::streamsize>(corrupted.size()));
    }
    CHECK_THROWS_AS(checkpoint_load(path4, cfg, 14), IoError);

    for (const auto& p : {path, path2, path3, path4}) {
        std::remove(p.c_str());
    }
}

TEST_CASE("tied prediction head ranks with the embedding rows") {
    auto cfg = micro_config();
    cfg.tie_head = true;
    Model model(cfg, 9);
    auto head = model.head_matrix();
    CHECK(head->shape == Shape{9, cfg.embed_dim});
    const auto& table = model.embedding().table.weights;
    for (Index i = 0; i < 9; ++i) {
        for (Index j = 0; j < cfg.embed_dim; ++j) {
            CHECK(head->data[static_cast<std::size_t>(i * cfg.embed_dim + j)] ==
                  table->data[static_cast<std::size_t>((i + 1) * cfg.embed_dim + j)]);
        }
    }
    // no separate head parameter, and training still reaches every parameter
    for (const auto& [name, p] : model.named_parameters()) {
        CHECK(name.find("head") == std::string::npos);
    }
    auto data = cycle_dataset(9, 4, 10, 41, "8:1:1");
    auto norms = gradient_norms(model, data);
    for (const auto& [name, norm] : norms) {
        INFO("parameter ", name);
        CHECK(norm > 0.0);
    }

    // streaming scores agree with the graph head
    std::vector<std::int32_t> items{2, 7, 4};
    auto mask = ones_mask(items.size());
    Rng r(1);
    auto h = model.forward_sequence(items, mask, Mode::eval, r);
    auto graph_scores = model.predict_scores(row(h, 2));
    auto stream = model.stream_begin(true);
    for (auto it : items) {
        model.stream_push(stream, it);
    }
    CHECK(model.stream_scores(stream) == graph_scores->data);
}

TEST_CASE("train epoch reports the position count it optimized") {
    auto cfg = micro_config();
    auto data = cycle_dataset(10, 4, 10, 37, "8:1:1");
    Model model(cfg, data.vocab());
    AdamState opt(model.parameters(), cfg.outer_lr);
    auto result = train_epoch(model, data, opt, 0);
    // 8:1:1 over 10 items puts 8 in train, which yields 7 target positions
    CHECK(result.target_positions == 4 * 7);
    CHECK(std::isfinite(result.mean_loss));
}
