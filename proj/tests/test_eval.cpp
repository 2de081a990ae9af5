#include <ttt4rec/eval.hpp>

#include <doctest.h>

#include "test_support.hpp"

#include <cmath>
#include <sstream>

using namespace ttt4rec;

namespace {

SequenceDataset markov_dataset(Index vocab, int users, int seq_len, std::uint64_t seed) {
    SynthSpec spec;
    spec.users = users;
    spec.vocab = vocab;
    spec.seq_len = seq_len;
    spec.seed = seed;
    Rng r(seed);
    spec.regimes.push_back(shared_regime(random_markov_regime(vocab, 4, r)));
    std::ostringstream out;
    synth_generate(spec, out);
    std::istringstream in(out.str());
    return build_dataset(parse_interactions(in).interactions, 1, parse_ratios("3:2:5"));
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

ModelConfig small_config(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.embed_dim = 8;
    cfg.inner = InnerKind::linear;
    cfg.inner_hidden = 6;
    cfg.dropout_rate = 0.0;
    cfg.max_context = 64;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("rank_of_target") {
    std::vector<double> unique_max{0.1, 0.9, 0.3};
    CHECK(rank_of_target(unique_max, 1) == 1);

    std::vector<double> all_equal(5, 0.25);
    CHECK(rank_of_target(all_equal, 2) == 5);  // pessimistic ties

    std::vector<double> mixed{3.0, 1.0, 2.0};
    CHECK(rank_of_target(mixed, 2) == 2);

    CHECK_THROWS_AS(rank_of_target(mixed, 5), ShapeError);
}

TEST_CASE("metrics_at_k") {
    auto [hr1, ndcg1] = metrics_at_k(1, 10);
    CHECK(hr1 == 1.0);
    CHECK(ndcg1 == 1.0);

    auto [hr4, ndcg4] = metrics_at_k(4, 10);
    CHECK(hr4 == 1.0);
    CHECK(ndcg4 == doctest::Approx(1.0 / std::log2(5.0)).epsilon(1e-12));
    CHECK(ndcg4 == doctest::Approx(0.43067655807339306).epsilon(1e-12));

    auto [hr11, ndcg11] = metrics_at_k(11, 10);
    CHECK(hr11 == 0.0);
    CHECK(ndcg11 == 0.0);
}

TEST_CASE("evaluate matches the brute-force oracle exactly") {
    // small data so the oracle covers every instance, including window shifts
    auto data = markov_dataset(15, 3, 12, 7);
    auto cfg = small_config(7);
    cfg.max_context = 5;  // forces window shifts mid-segment
    Model model(cfg, data.vocab());

    for (auto segment : {Segment::val, Segment::test}) {
        for (bool adapt : {true, false}) {
            EvalOptions opts;
            opts.segment = segment;
            opts.cutoffs = {5};
            opts.adapt = adapt;
            auto report = evaluate(model, data, opts);
            auto oracle = testing::brute_force_evaluate(model, data, segment, 5, adapt);
            CHECK(report.instances == oracle.instances);
            CHECK(report.hr(5) == oracle.hr);
            CHECK(report.ndcg(5) == oracle.ndcg);
        }
    }
}

TEST_CASE("random scores on uniform targets land near the expected hit rate") {
    // Uniform iid items make the target independent of any fixed scorer, so
    // HR@10 over 100 items concentrates at 0.10.
    auto data = uniform_dataset(100, 100, 100, 11);
    auto cfg = small_config(11);
    cfg.max_context = 128;
    Model model(cfg, data.vocab());
    EvalOptions opts;
    opts.segment = Segment::test;
    opts.cutoffs = {10};
    auto report = evaluate(model, data, opts);
    CHECK(report.instances >= 5000);
    CHECK(std::abs(report.hr(10) - 0.10) <= 0.02);
}

TEST_CASE("frozen ablation equals an inner_lr=0 model bitwise") {
    auto data = markov_dataset(12, 4, 14, 13);
    auto cfg = small_config(13);
    Model adaptive(cfg, data.vocab());

    auto frozen_cfg = cfg;
    frozen_cfg.inner_lr = 0.0;
    Model frozen(frozen_cfg, data.vocab());
    // same parameters, different inner learning rate
    auto src = adaptive.named_parameters();
    auto dst = frozen.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i].second->data = src[i].second->data;
    }

    EvalOptions ablation;
    ablation.segment = Segment::test;
    ablation.adapt = false;
    auto a = evaluate(adaptive, data, ablation);

    EvalOptions plain;
    plain.segment = Segment::test;
    plain.adapt = true;
    auto b = evaluate(frozen, data, plain);

    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].value == b.rows[i].value);
        CHECK(a.rows[i].instances == b.rows[i].instances);
    }
}

TEST_CASE("report invariants") {
    auto data = markov_dataset(20, 5, 15, 17);
    auto cfg = small_config(17);
    Model model(cfg, data.vocab());
    EvalOptions opts;
    opts.segment = Segment::test;
    opts.cutoffs = {10, 50};
    auto report = evaluate(model, data, opts);
    CHECK(report.hr(50) >= report.hr(10));
    CHECK(report.ndcg(50) >= report.ndcg(10));
    for (const auto& r : report.rows) {
        CHECK(r.value >= 0.0);
        CHECK(r.value <= 1.0);
    }
    CHECK(report.ndcg(10) <= report.hr(10));
    CHECK(report.ndcg(50) <= report.hr(50));
}

TEST_CASE("thread count does not change the report") {
    auto data = markov_dataset(14, 6, 12, 19);
    auto cfg = small_config(19);
    Model model(cfg, data.vocab());
    EvalOptions one;
    one.segment = Segment::test;
    one.threads = 1;
    EvalOptions four;
    four.segment = Segment::test;
    four.threads = 4;
    auto a = evaluate(model, data, one);
    auto b = evaluate(model, data, four);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].value == b.rows[i].value);
    }
}

TEST_CASE("instance counts follow the split") {
    auto data = markov_dataset(10, 4, 20, 23);
    auto cfg = small_config(23);
    Model model(cfg, data.vocab());
    EvalOptions val_opts;
    val_opts.segment = Segment::val;
    EvalOptions test_opts;
    test_opts.segment = Segment::test;
    auto val_report = evaluate(model, data, val_opts);
    auto test_report = evaluate(model, data, test_opts);
    // 3:2:5 over 20 items: 6/4/10 per user
    CHECK(val_report.instances == 4 * 4);
    CHECK(test_report.instances == 4 * 10);
}

TEST_CASE("empty segments are reported as errors") {
    // with only 3 items per user, the val segment is empty under 3:2:5
    auto data = markov_dataset(8, 2, 3, 29);
    auto cfg = small_config(29);
    Model model(cfg, data.vocab());
    EvalOptions opts;
    opts.segment = Segment::val;
    CHECK_THROWS_AS(evaluate(model, data, opts), DataError);
}

TEST_CASE("per-user rows average back to the aggregate") {
    auto data = markov_dataset(12, 5, 14, 37);
    auto cfg = small_config(37);
    Model model(cfg, data.vocab());
    EvalOptions opts;
    opts.segment = Segment::test;
    opts.cutoffs = {10};
    opts.per_user = true;
    auto report = evaluate(model, data, opts);
    REQUIRE(report.per_user.size() == data.users.size());
    double weighted = 0.0;
    std::int64_t total = 0;
    for (const auto& u : report.per_user) {
        CHECK(u.instances > 0);
        CHECK(u.hr.size() == 1);
        weighted += u.hr[0] * static_cast<double>(u.instances);
        total += u.instances;
    }
    CHECK(total == report.instances);
    CHECK(weighted / static_cast<double>(total) == doctest::Approx(report.hr(10)).epsilon(1e-12));
}

TEST_CASE("csv report shape") {
    auto data = markov_dataset(10, 3, 12, 31);
    auto cfg = small_config(31);
    Model model(cfg, data.vocab());
    EvalOptions opts;
    opts.segment = Segment::test;
    auto report = evaluate(model, data, opts);
    std::ostringstream out;
    write_report_csv(report, out, {"seed=31"});
    const std::string text = out.str();
    CHECK(text.find("# seed=31\n") != std::string::npos);
    CHECK(text.find("segment,metric,cutoff,value,instances\n") != std::string::npos);
    CHECK(text.find("test,hr,10,") != std::string::npos);
    CHECK(text.find("test,ndcg,50,") != std::string::npos);
}
