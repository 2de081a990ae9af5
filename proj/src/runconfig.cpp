#include "ttt4rec/runconfig.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ttt4rec {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0;
    std::size_t b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) {
        ++a;
    }
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) {
        --b;
    }
    return s.substr(a, b - a);
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no") {
        return false;
    }
    throw ConfigError("expected a boolean, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        out.push_back(std::stoi(trim(tok)));
    }
    if (out.empty()) {
        throw ConfigError("expected a comma-separated integer list, got '" + v + "'");
    }
    return out;
}

std::string format_double(double v) {
    // Integers print bare; everything else keeps full precision.
    if (v == std::floor(v) && std::abs(v) < 1e15) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.0f", v);
        return buf;
    }
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text) {
    RunConfig cfg;
    std::vector<std::string> problems;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            problems.push_back("line " + std::to_string(line_no) + ": expected key=value, got '" +
                               line + "'");
            continue;
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            if (key == "embed_dim") {
                cfg.model.embed_dim = std::stol(value);
            } else if (key == "blocks") {
                cfg.model.blocks = std::stoi(value);
            } else if (key == "backbone") {
                cfg.model.backbone = parse_backbone(value);
            } else if (key == "inner") {
                cfg.model.inner = parse_inner(value);
            } else if (key == "inner_hidden") {
                cfg.model.inner_hidden = std::stol(value);
            } else if (key == "rope_factor") {
                cfg.model.rope_factor = std::stod(value);
            } else if (key == "inner_lr") {
                cfg.model.inner_lr = std::stod(value);
            } else if (key == "adapt_at_eval") {
                cfg.model.adapt_at_eval = parse_bool(value);
            } else if (key == "dropout") {
                cfg.model.dropout_rate = std::stod(value);
            } else if (key == "max_context") {
                cfg.model.max_context = std::stol(value);
            } else if (key == "outer_lr") {
                cfg.model.outer_lr = std::stod(value);
            } else if (key == "batch_size") {
                cfg.model.batch_size = std::stoi(value);
            } else if (key == "epochs") {
                cfg.model.epochs = std::stoi(value);
            } else if (key == "seed") {
                cfg.model.seed = std::stoull(value);
            } else if (key == "tie_head") {
                cfg.model.tie_head = parse_bool(value);
            } else if (key == "targets") {
                if (value == "all") {
                    cfg.model.targets_all = true;
                } else if (value == "last") {
                    cfg.model.targets_all = false;
                } else {
                    throw ConfigError("targets must be all|last, got '" + value + "'");
                }
            } else if (key == "conv_width") {
                cfg.model.conv_width = std::stol(value);
            } else if (key == "data") {
                cfg.data_path = value;
            } else if (key == "checkpoint") {
                cfg.checkpoint_path = value;
            } else if (key == "report_dir") {
                cfg.report_dir = value;
            } else if (key == "ratios") {
                parse_ratios(value);  // validates
                cfg.ratios = value;
            } else if (key == "min_seq_len") {
                cfg.min_seq_len = std::stoi(value);
            } else if (key == "cutoffs") {
                cfg.cutoffs = parse_int_list(value);
            } else if (key == "threads") {
                cfg.threads = std::stoi(value);
            } else if (key == "finite_checks") {
                cfg.finite_checks = parse_bool(value);
            } else {
                problems.push_back("unknown key '" + key + "'");
            }
        } catch (const ConfigError& e) {
            problems.push_back("key '" + key + "': " + e.what());
        } catch (const std::exception&) {
            problems.push_back("key '" + key + "': cannot parse value '" + value + "'");
        }
    }
    if (!problems.empty()) {
        std::string joined;
        for (std::size_t i = 0; i < problems.size(); ++i) {
            if (i) {
                joined += "; ";
            }
            joined += problems[i];
        }
        throw ConfigError("config errors: " + joined);
    }
    try {
        cfg.model.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("config errors: ") + e.what());
    }
    return cfg;
}

RunConfig parse_run_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config file: " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config_text(buf.str());
}

std::vector<std::string> config_echo_lines(const RunConfig& cfg) {
    std::vector<std::string> lines;
    auto put = [&](const std::string& k, const std::string& v) { lines.push_back(k + "=" + v); };
    put("embed_dim", std::to_string(cfg.model.embed_dim));
    put("blocks", std::to_string(cfg.model.blocks));
    put("backbone", backbone_name(cfg.model.backbone));
    put("inner", inner_name(cfg.model.inner));
    put("inner_hidden", std::to_string(cfg.model.inner_hidden));
    put("rope_factor", format_double(cfg.model.rope_factor));
    put("inner_lr", format_double(cfg.model.inner_lr));
    put("adapt_at_eval", cfg.model.adapt_at_eval ? "true" : "false");
    put("dropout", format_double(cfg.model.dropout_rate));
    put("max_context", std::to_string(cfg.model.max_context));
    put("outer_lr", format_double(cfg.model.outer_lr));
    put("batch_size", std::to_string(cfg.model.batch_size));
    put("epochs", std::to_string(cfg.model.epochs));
    put("seed", std::to_string(cfg.model.seed));
    put("tie_head", cfg.model.tie_head ? "true" : "false");
    put("targets", cfg.model.targets_all ? "all" : "last");
    put("conv_width", std::to_string(cfg.model.conv_width));
    put("data", cfg.data_path);
    put("checkpoint", cfg.checkpoint_path);
    put("report_dir", cfg.report_dir);
    put("ratios", cfg.ratios);
    put("min_seq_len", std::to_string(cfg.min_seq_len));
    {
        std::string ks;
        for (std::size_t i = 0; i < cfg.cutoffs.size(); ++i) {
            if (i) {
                ks += ",";
            }
            ks += std::to_string(cfg.cutoffs[i]);
        }
        put("cutoffs", ks);
    }
    put("threads", std::to_string(cfg.threads));
    put("finite_checks", cfg.finite_checks ? "true" : "false");
    return lines;
}

}  // namespace ttt4rec
