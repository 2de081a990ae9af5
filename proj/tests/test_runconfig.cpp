#include <ttt4rec/runconfig.hpp>

#include <doctest.h>

using namespace ttt4rec;

TEST_CASE("defaults parse back to themselves") {
    auto cfg = RunConfig::defaults();
    std::string text;
    for (const auto& line : config_echo_lines(cfg)) {
        text += line + "\n";
    }
    auto reparsed = parse_run_config_text(text);
    CHECK(config_echo_lines(reparsed) == config_echo_lines(cfg));
}

TEST_CASE("keys and comments") {
    auto cfg = parse_run_config_text(
        "# a comment\n"
        "embed_dim=32\n"
        "backbone=mamba\n"
        "inner=linear\n"
        "targets=last\n"
        "cutoffs=1,10\n"
        "seed=7  # trailing comment\n");
    CHECK(cfg.model.embed_dim == 32);
    CHECK(cfg.model.backbone == BackboneKind::mamba);
    CHECK(cfg.model.inner == InnerKind::linear);
    CHECK(cfg.model.targets_all == false);
    CHECK(cfg.cutoffs == std::vector<int>{1, 10});
    CHECK(cfg.model.seed == 7);
}

TEST_CASE("unknown keys are rejected and all problems reported together") {
    try {
        parse_run_config_text("embed_dim=32\nnot_a_key=1\nalso_bad=2\nbackbone=marmot\n");
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("not_a_key") != std::string::npos);
        CHECK(msg.find("also_bad") != std::string::npos);
        CHECK(msg.find("marmot") != std::string::npos);
    }
}

TEST_CASE("model validation runs after parsing") {
    CHECK_THROWS_AS(parse_run_config_text("embed_dim=7\n"), ConfigError);  // odd dim
    CHECK_THROWS_AS(parse_run_config_text("ratios=3:0:5\n"), ConfigError);
}
