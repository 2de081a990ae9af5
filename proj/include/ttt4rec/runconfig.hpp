#pragma once

#include "ttt4rec/eval.hpp"
#include "ttt4rec/model.hpp"

#include <string>
#include <vector>

namespace ttt4rec {

// Flat key=value run description ('#' starts a comment). Every key has a
// default; unknown keys are rejected, and validation reports every offending
// key at once. The effective key set is echoed into every CSV output so a
// run can be replayed from its own header.
struct RunConfig {
    ModelConfig model;

    std::string data_path;
    std::string checkpoint_path;
    std::string report_dir{"."};

    std::string ratios{"3:2:5"};
    int min_seq_len{1};

    std::vector<int> cutoffs{10, 50};
    int threads{1};
    bool finite_checks{true};

    static RunConfig defaults() { return RunConfig{}; }
};

RunConfig parse_run_config_text(const std::string& text);
RunConfig parse_run_config_file(const std::string& path);

// Canonical key=value lines for the effective configuration.
std::vector<std::string> config_echo_lines(const RunConfig& cfg);

}  // namespace ttt4rec
