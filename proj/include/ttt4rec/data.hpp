#pragma once

#include "ttt4rec/common.hpp"
#include "ttt4rec/tensor.hpp"

#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ttt4rec {

struct Interaction {
    std::string user_id;
    std::string item_id;
    std::int64_t timestamp{0};
};

struct ParseResult {
    std::vector<Interaction> interactions;
    std::int64_t malformed{0};
};

// Delimited text with header user_id,item_id,timestamp (comma or tab).
// Lenient mode counts malformed rows and skips them; strict mode fails at
// the first offending line, naming its number.
ParseResult parse_interactions(std::istream& in, bool strict = false);
ParseResult parse_interactions_file(const std::string& path, bool strict = false);

struct SplitRatios {
    double train{3.0};
    double val{2.0};
    double test{5.0};
    double total() const { return train + val + test; }
};

SplitRatios parse_ratios(const std::string& text);  // "3:2:5"

struct UserSequence {
    std::string user_id;
    std::vector<std::int32_t> items;  // dense indices, always >= 1
    std::vector<std::int64_t> timestamps;
    std::int32_t train_end{0};
    std::int32_t val_end{0};

    std::int32_t length() const { return static_cast<std::int32_t>(items.size()); }
};

// Per-user chronological sequences over a dense item vocabulary. Index 0 is
// reserved for padding and never assigned to a real item; items and users
// are numbered by first appearance in the input, so re-parsing the same file
// reproduces the same indices.
struct SequenceDataset {
    std::vector<std::string> items;  // items[0] is the padding placeholder
    std::unordered_map<std::string, std::int32_t> item_index;
    std::vector<UserSequence> users;
    SplitRatios ratios;
    std::int32_t min_seq_len{1};
    std::string ratios_text{"3:2:5"};

    std::int32_t vocab() const { return static_cast<std::int32_t>(items.size()) - 1; }
    std::int64_t interactions() const;
    double mean_length() const;
    // -1 when unknown.
    std::int32_t index_of(const std::string& item_id) const;
};

// Group by user, stable-sort by timestamp, drop users shorter than
// min_seq_len, then split per user: floor for train and val, remainder to
// test.
SequenceDataset build_dataset(const std::vector<Interaction>& interactions,
                              std::int32_t min_seq_len, const SplitRatios& ratios,
                              const std::string& ratios_text = "3:2:5");

// Keep the most recent max_context items of a prefix.
std::span<const std::int32_t> truncate_context(std::span<const std::int32_t> prefix,
                                               Index max_context);

void save_dataset(const SequenceDataset& data, const std::string& path);
SequenceDataset load_dataset(const std::string& path);

// ---- synthetic benchmarks ----

// Row-stochastic transition matrix over items 1..vocab.
struct MarkovRegime {
    Index vocab{0};
    std::vector<double> transitions;  // vocab x vocab, row-major

    double prob(Index from, Index to) const {
        return transitions[static_cast<std::size_t>((from - 1) * vocab + (to - 1))];
    }
};

// Deterministic single-cycle permutation: every row is one-hot.
MarkovRegime cycle_regime(Index vocab, Rng& rng);
// Each row spreads mass over `fanout` random successors with random weights.
MarkovRegime random_markov_regime(Index vocab, int fanout, Rng& rng);
MarkovRegime uniform_regime(Index vocab);

// One segment of the per-user walk. A shared slot applies the same matrix to
// every user; a personal slot draws each user their own chain over a small
// random item subset (items outside the subset jump uniformly into it), the
// kind of user-specific, globally unpredictable pattern a per-token adaptive
// model can pick up within one sequence.
struct SynthRegime {
    MarkovRegime shared;
    bool personal{false};
    Index personal_support{8};
    int personal_fanout{2};
};

SynthRegime shared_regime(MarkovRegime matrix);
SynthRegime personal_regime(Index support, int fanout);

struct SynthSpec {
    std::int64_t users{50};
    Index vocab{100};
    std::int64_t seq_len{20};
    std::uint64_t seed{1};
    std::vector<SynthRegime> regimes;     // at least one
    std::vector<double> switch_points;    // fractions of seq_len, size regimes-1
};

// Deterministic given the seed: same spec, same bytes. Every user walks the
// regime chain, switching transition matrices at the given points, which
// plants a mid-sequence behavior shift for adaptation benchmarks.
void synth_generate(const SynthSpec& spec, std::ostream& out);
void synth_generate_file(const SynthSpec& spec, const std::string& path);

}  // namespace ttt4rec
