#include "ttt4rec/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace ttt4rec {

namespace {

std::vector<std::string> split_line(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(delim, start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') {
        s.pop_back();
    }
    return s;
}

}  // namespace

ParseResult parse_interactions(std::istream& in, bool strict) {
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError("interaction file is empty (missing header)");
    }
    line = strip_cr(line);
    const char delim = line.find('\t') != std::string::npos ? '\t' : ',';
    auto header = split_line(line, delim);
    if (header.size() < 3 || header[0] != "user_id" || header[1] != "item_id" ||
        header[2] != "timestamp") {
        throw DataError("expected header user_id,item_id,timestamp, got: " + line);
    }

    ParseResult result;
    std::int64_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (line.empty()) {
            continue;
        }
        auto fields = split_line(line, delim);
        bool ok = fields.size() >= 3 && !fields[0].empty() && !fields[1].empty();
        std::int64_t ts = 0;
        if (ok) {
            const auto& s = fields[2];
            auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), ts);
            ok = ec == std::errc() && ptr == s.data() + s.size() && ts >= 0;
        }
        if (!ok) {
            if (strict) {
                throw DataError("malformed interaction at line " + std::to_string(line_no) +
                                ": " + line);
            }
            ++result.malformed;
            continue;
        }
        result.interactions.push_back({fields[0], fields[1], ts});
    }
    return result;
}

ParseResult parse_interactions_file(const std::string& path, bool strict) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open interaction file: " + path);
    }
    return parse_interactions(in, strict);
}

SplitRatios parse_ratios(const std::string& text) {
    auto parts = split_line(text, ':');
    if (parts.size() != 3) {
        throw ConfigError("ratios must look like train:val:test, got: " + text);
    }
    SplitRatios r;
    double* slots[3] = {&r.train, &r.val, &r.test};
    for (int i = 0; i < 3; ++i) {
        try {
            *slots[i] = std::stod(parts[static_cast<std::size_t>(i)]);
        } catch (const std::exception&) {
            throw ConfigError("ratios must be numeric, got: " + text);
        }
        if (*slots[i] <= 0.0) {
            throw ConfigError("ratio components must be positive, got: " + text);
        }
    }
    return r;
}

std::int64_t SequenceDataset::interactions() const {
    std::int64_t n = 0;
    for (const auto& u : users) {
        n += u.length();
    }
    return n;
}

double SequenceDataset::mean_length() const {
    if (users.empty()) {
        return 0.0;
    }
    return static_cast<double>(interactions()) / static_cast<double>(users.size());
}

std::int32_t SequenceDataset::index_of(const std::string& item_id) const {
    auto it = item_index.find(item_id);
    return it == item_index.end() ? -1 : it->second;
}

SequenceDataset build_dataset(const std::vector<Interaction>& interactions,
                              std::int32_t min_seq_len, const SplitRatios& ratios,
                              const std::string& ratios_text) {
    if (min_seq_len < 1) {
        throw ConfigError("minimum sequence length must be >= 1");
    }
    SequenceDataset ds;
    ds.ratios = ratios;
    ds.min_seq_len = min_seq_len;
    ds.ratios_text = ratios_text;
    ds.items.push_back("");  // padding slot

    // Group interactions per user in first-appearance order.
    std::unordered_map<std::string, std::size_t> user_slot;
    struct RawUser {
        std::string id;
        std::vector<std::size_t> rows;
    };
    std::vector<RawUser> raw;
    for (std::size_t i = 0; i < interactions.size(); ++i) {
        const auto& inter = interactions[i];
        auto [it, inserted] = user_slot.try_emplace(inter.user_id, raw.size());
        if (inserted) {
            raw.push_back({inter.user_id, {}});
        }
        raw[it->second].rows.push_back(i);
    }

    const double total = ratios.total();
    for (auto& ru : raw) {
        if (static_cast<std::int32_t>(ru.rows.size()) < min_seq_len) {
            continue;
        }
        // Chronological order; ties keep input file order.
        std::stable_sort(ru.rows.begin(), ru.rows.end(), [&](std::size_t a, std::size_t b) {
            return interactions[a].timestamp < interactions[b].timestamp;
        });
        UserSequence seq;
        seq.user_id = ru.id;
        seq.items.reserve(ru.rows.size());
        seq.timestamps.reserve(ru.rows.size());
        for (std::size_t rowi : ru.rows) {
            const auto& inter = interactions[rowi];
            auto [it, inserted] =
                ds.item_index.try_emplace(inter.item_id,
                                          static_cast<std::int32_t>(ds.items.size()));
            if (inserted) {
                ds.items.push_back(inter.item_id);
            }
            seq.items.push_back(it->second);
            seq.timestamps.push_back(inter.timestamp);
        }
        const auto n = static_cast<std::int32_t>(seq.items.size());
        seq.train_end = static_cast<std::int32_t>(
            std::floor(static_cast<double>(n) * ratios.train / total));
        seq.val_end = seq.train_end + static_cast<std::int32_t>(std::floor(
                                          static_cast<double>(n) * ratios.val / total));
        ds.users.push_back(std::move(seq));
    }
    if (ds.users.empty()) {
        throw DataError("no users survive the minimum-length filter (min " +
                        std::to_string(min_seq_len) + ")");
    }
    return ds;
}

std::span<const std::int32_t> truncate_context(std::span<const std::int32_t> prefix,
                                               Index max_context) {
    if (max_context < 1) {
        throw ConfigError("max_context must be >= 1");
    }
    if (static_cast<Index>(prefix.size()) <= max_context) {
        return prefix;
    }
    return prefix.subspan(prefix.size() - static_cast<std::size_t>(max_context));
}

void save_dataset(const SequenceDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write dataset file: " + path);
    }
    out << "ttt4rec-dataset v1\n";
    out << "ratios=" << ds.ratios_text << "\n";
    out << "min_len=" << ds.min_seq_len << "\n";
    out << "users=" << ds.users.size() << "\n";
    out << "items=" << ds.vocab() << "\n";
    out << "interactions=" << ds.interactions() << "\n";
    char mean_buf[32];
    std::snprintf(mean_buf, sizeof(mean_buf), "%.4f", ds.mean_length());
    out << "mean_length=" << mean_buf << "\n";
    out << "[items]\n";
    for (std::size_t i = 1; i < ds.items.size(); ++i) {
        out << ds.items[i] << "\n";
    }
    out << "[users]\n";
    for (const auto& u : ds.users) {
        out << u.user_id << '\t' << u.length() << '\t' << u.train_end << '\t' << u.val_end
            << '\t';
        for (std::size_t i = 0; i < u.items.size(); ++i) {
            if (i) {
                out << ',';
            }
            out << u.items[i];
        }
        out << '\t';
        for (std::size_t i = 0; i < u.timestamps.size(); ++i) {
            if (i) {
                out << ',';
            }
            out << u.timestamps[i];
        }
        out << '\n';
    }
    if (!out) {
        throw IoError("failed while writing dataset file: " + path);
    }
}

SequenceDataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open dataset file: " + path);
    }
    std::string line;
    if (!std::getline(in, line) || strip_cr(line) != "ttt4rec-dataset v1") {
        throw IoError("not a ttt4rec dataset file: " + path);
    }
    SequenceDataset ds;
    ds.items.push_back("");
    std::size_t expect_users = 0;
    std::size_t expect_items = 0;
    while (std::getline(in, line)) {
        line = strip_cr(line);
        if (line == "[items]") {
            break;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw IoError("malformed dataset header line: " + line);
        }
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "ratios") {
            ds.ratios_text = value;
            ds.ratios = parse_ratios(value);
        } else if (key == "min_len") {
            ds.min_seq_len = static_cast<std::int32_t>(std::stol(value));
        } else if (key == "users") {
            expect_users = static_cast<std::size_t>(std::stoul(value));
        } else if (key == "items") {
            expect_items = static_cast<std::size_t>(std::stoul(value));
        }
        // interactions / mean_length are derivable; ignored on load
    }
    for (std::size_t i = 0; i < expect_items; ++i) {
        if (!std::getline(in, line)) {
            throw IoError("dataset file truncated in item list: " + path);
        }
        line = strip_cr(line);
        ds.item_index.emplace(line, static_cast<std::int32_t>(ds.items.size()));
        ds.items.push_back(line);
    }
    if (!std::getline(in, line) || strip_cr(line) != "[users]") {
        throw IoError("dataset file missing [users] section: " + path);
    }
    for (std::size_t ui = 0; ui < expect_users; ++ui) {
        if (!std::getline(in, line)) {
            throw IoError("dataset file truncated in user list: " + path);
        }
        line = strip_cr(line);
        auto fields = split_line(line, '\t');
        if (fields.size() != 6) {
            throw IoError("malformed user row: " + line);
        }
        UserSequence u;
        u.user_id = fields[0];
        const auto n = static_cast<std::size_t>(std::stoul(fields[1]));
        u.train_end = static_cast<std::int32_t>(std::stol(fields[2]));
        u.val_end = static_cast<std::int32_t>(std::stol(fields[3]));
        for (const auto& tok : split_line(fields[4], ',')) {
            u.items.push_back(static_cast<std::int32_t>(std::stol(tok)));
        }
        for (const auto& tok : split_line(fields[5], ',')) {
            u.timestamps.push_back(std::stoll(tok));
        }
        if (u.items.size() != n || u.timestamps.size() != n) {
            throw IoError("user row length mismatch: " + line);
        }
        for (std::int32_t idx : u.items) {
            if (idx < 1 || idx > ds.vocab()) {
                throw IoError("user row references unknown item index " + std::to_string(idx));
            }
        }
        ds.users.push_back(std::move(u));
    }
    return ds;
}

// ---- synthetic benchmarks ----

MarkovRegime cycle_regime(Index vocab, Rng& rng) {
    MarkovRegime r;
    r.vocab = vocab;
    r.transitions.assign(static_cast<std::size_t>(vocab * vocab), 0.0);
    // Random permutation arranged as one cycle over all items.
    std::vector<Index> order(static_cast<std::size_t>(vocab));
    std::iota(order.begin(), order.end(), Index{1});
    for (Index i = vocab - 1; i > 0; --i) {
        const Index j = rng.uniform_index(i + 1);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    for (Index i = 0; i < vocab; ++i) {
        const Index from = order[static_cast<std::size_t>(i)];
        const Index to = order[static_cast<std::size_t>((i + 1) % vocab)];
        r.transitions[static_cast<std::size_t>((from - 1) * vocab + (to - 1))] = 1.0;
    }
    return r;
}

MarkovRegime random_markov_regime(Index vocab, int fanout, Rng& rng) {
    if (fanout < 1 || static_cast<Index>(fanout) > vocab) {
        throw ConfigError("markov regime fanout must be in [1, vocab]");
    }
    MarkovRegime r;
    r.vocab = vocab;
    r.transitions.assign(static_cast<std::size_t>(vocab * vocab), 0.0);
    std::vector<Index> candidates(static_cast<std::size_t>(vocab));
    for (Index from = 1; from <= vocab; ++from) {
        std::iota(candidates.begin(), candidates.end(), Index{1});
        // Partial shuffle picks `fanout` distinct successors.
        for (int k = 0; k < fanout; ++k) {
            const Index j = k + rng.uniform_index(vocab - k);
            std::swap(candidates[static_cast<std::size_t>(k)],
                      candidates[static_cast<std::size_t>(j)]);
        }
        double total = 0.0;
        std::vector<double> weights(static_cast<std::size_t>(fanout));
        for (int k = 0; k < fanout; ++k) {
            const double w = 0.25 + rng.uniform01();
            weights[static_cast<std::size_t>(k)] = w;
            total += w;
        }
        for (int k = 0; k < fanout; ++k) {
            const Index to = candidates[static_cast<std::size_t>(k)];
            r.transitions[static_cast<std::size_t>((from - 1) * vocab + (to - 1))] =
                weights[static_cast<std::size_t>(k)] / total;
        }
    }
    return r;
}

MarkovRegime uniform_regime(Index vocab) {
    MarkovRegime r;
    r.vocab = vocab;
    r.transitions.assign(static_cast<std::size_t>(vocab * vocab),
                         1.0 / static_cast<double>(vocab));
    return r;
}

SynthRegime shared_regime(MarkovRegime matrix) {
    SynthRegime r;
    r.shared = std::move(matrix);
    return r;
}

SynthRegime personal_regime(Index support, int fanout) {
    if (support < 2 || fanout < 1 || static_cast<Index>(fanout) >= support) {
        throw ConfigError("personal regime needs support >= 2 and fanout in [1, support)");
    }
    SynthRegime r;
    r.personal = true;
    r.personal_support = support;
    r.personal_fanout = fanout;
    return r;
}

namespace {

Index sample_next(const MarkovRegime& regime, Index from, Rng& rng) {
    const double u = rng.uniform01();
    double acc = 0.0;
    const std::size_t base = static_cast<std::size_t>((from - 1) * regime.vocab);
    for (Index to = 1; to <= regime.vocab; ++to) {
        acc += regime.transitions[base + static_cast<std::size_t>(to - 1)];
        if (u < acc) {
            return to;
        }
    }
    return regime.vocab;  // guard against rounding at the row tail
}

// A user's own chain over a small random subset: fanout successors with
// random weights inside the subset, everything else jumps uniformly in.
MarkovRegime draw_personal_chain(Index vocab, Index support, int fanout, Rng& rng) {
    MarkovRegime r;
    r.vocab = vocab;
    r.transitions.assign(static_cast<std::size_t>(vocab * vocab), 0.0);
    std::vector<Index> pool(static_cast<std::size_t>(vocab));
    std::iota(pool.begin(), pool.end(), Index{1});
    for (Index k = 0; k < support; ++k) {
        const Index j = k + rng.uniform_index(vocab - k);
        std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(j)]);
    }
    std::vector<Index> subset(pool.begin(), pool.begin() + support);
    const double into = 1.0 / static_cast<double>(support);
    for (Index from = 1; from <= vocab; ++from) {
        const std::size_t base = static_cast<std::size_t>((from - 1) * vocab);
        const bool member =
            std::find(subset.begin(), subset.end(), from) != subset.end();
        if (!member) {
            for (Index to : subset) {
                r.transitions[base + static_cast<std::size_t>(to - 1)] = into;
            }
            continue;
        }
        // fanout distinct successors within the subset, excluding self loops
        std::vector<Index> succ = subset;
        succ.erase(std::find(succ.begin(), succ.end(), from));
        for (int k = 0; k < fanout; ++k) {
            const Index j = k + rng.uniform_index(static_cast<Index>(succ.size()) - k);
            std::swap(succ[static_cast<std::size_t>(k)], succ[static_cast<std::size_t>(j)]);
        }
        double total = 0.0;
        std::vector<double> weights(static_cast<std::size_t>(fanout));
        for (int k = 0; k < fanout; ++k) {
            weights[static_cast<std::size_t>(k)] = 0.25 + rng.uniform01();
            total += weights[static_cast<std::size_t>(k)];
        }
        for (int k = 0; k < fanout; ++k) {
            r.transitions[base + static_cast<std::size_t>(succ[static_cast<std::size_t>(k)] - 1)] =
                weights[static_cast<std::size_t>(k)] / total;
        }
    }
    return r;
}

}  // namespace

void synth_generate(const SynthSpec& spec, std::ostream& out) {
    if (spec.regimes.empty()) {
        throw ConfigError("synthetic spec needs at least one regime");
    }
    if (spec.switch_points.size() + 1 != spec.regimes.size()) {
        throw ConfigError("synthetic spec needs exactly one switch point between regimes");
    }
    for (const auto& r : spec.regimes) {
        if (!r.personal && r.shared.vocab != spec.vocab) {
            throw ConfigError("regime vocabulary does not match the generator settings");
        }
        if (r.personal && r.personal_support > spec.vocab) {
            throw ConfigError("personal regime support exceeds the vocabulary");
        }
    }
    std::vector<Index> switch_steps;
    for (double f : spec.switch_points) {
        if (f <= 0.0 || f >= 1.0) {
            throw ConfigError("switch points must be fractions in (0, 1)");
        }
        switch_steps.push_back(
            static_cast<Index>(std::floor(f * static_cast<double>(spec.seq_len))));
    }

    Rng master(spec.seed);
    out << "user_id,item_id,timestamp\n";
    const int user_width = spec.users >= 10000 ? 6 : 4;
    for (std::int64_t u = 0; u < spec.users; ++u) {
        Rng rng = master.fork(static_cast<std::uint64_t>(u));
        // Personal slots draw this user's chains up front so shared-only
        // specs consume the stream exactly as before.
        std::vector<const MarkovRegime*> active(spec.regimes.size());
        std::vector<MarkovRegime> personal;
        personal.reserve(spec.regimes.size());
        for (std::size_t s = 0; s < spec.regimes.size(); ++s) {
            if (spec.regimes[s].personal) {
                personal.push_back(draw_personal_chain(spec.vocab,
                                                       spec.regimes[s].personal_support,
                                                       spec.regimes[s].personal_fanout, rng));
                active[s] = &personal.back();
            } else {
                active[s] = &spec.regimes[s].shared;
            }
        }
        Index current = 1 + rng.uniform_index(spec.vocab);
        if (spec.regimes[0].personal) {
            // start inside the user's own support
            current = sample_next(*active[0], current, rng);
        }
        std::size_t regime_idx = 0;
        for (std::int64_t step = 0; step < spec.seq_len; ++step) {
            while (regime_idx < switch_steps.size() &&
                   step >= switch_steps[regime_idx]) {
                ++regime_idx;
            }
            if (step > 0) {
                current = sample_next(*active[regime_idx], current, rng);
            }
            char user_buf[24];
            std::snprintf(user_buf, sizeof(user_buf), "u%0*lld", user_width,
                          static_cast<long long>(u));
            out << user_buf << ",i" << current << ',' << step << "\n";
        }
    }
}

void synth_generate_file(const SynthSpec& spec, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write synthetic data file: " + path);
    }
    synth_generate(spec, out);
    if (!out) {
        throw IoError("failed while writing synthetic data file: " + path);
    }
}

}  // namespace ttt4rec
