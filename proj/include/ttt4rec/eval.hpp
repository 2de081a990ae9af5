#pragma once

#include "ttt4rec/model.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace ttt4rec {

enum class Segment { train, val, test };

Segment parse_segment(const std::string& s);
const char* segment_name(Segment s);

struct EvalOptions {
    Segment segment{Segment::test};
    std::vector<int> cutoffs{10, 50};
    bool adapt{true};               // false forces a frozen inner loop
    bool record_inner_loss{false};  // collect per-instance reconstruction losses
    bool per_user{false};           // keep per-user means alongside the aggregate
    int threads{0};                 // 0: honor TTT4REC_THREADS, else 1
};

struct InnerLossSample {
    std::int64_t user{0};
    std::int64_t position{0};  // absolute index in the user's full sequence
    double loss{0.0};
};

struct EvalReport {
    struct Row {
        std::string segment;
        std::string metric;  // "hr" or "ndcg"
        int cutoff{0};
        double value{0.0};
        std::int64_t instances{0};
    };
    struct UserRow {
        std::string user_id;
        std::int64_t instances{0};
        std::vector<double> hr;    // one per requested cutoff
        std::vector<double> ndcg;
    };
    std::vector<Row> rows;
    std::int64_t instances{0};
    std::vector<UserRow> per_user;  // filled when EvalOptions::per_user
    std::vector<InnerLossSample> inner_losses;

    double value_of(const std::string& metric, int cutoff) const;
    double hr(int cutoff) const { return value_of("hr", cutoff); }
    double ndcg(int cutoff) const { return value_of("ndcg", cutoff); }
};

// 1 + number of competitors ranked ahead; ties count as ahead (pessimistic),
// so reported metrics are a lower bound and deterministic everywhere.
Index rank_of_target(std::span<const double> scores, Index target);

// hr = rank <= k; ndcg = 1/log2(rank+1) within the cutoff, else 0.
std::pair<double, double> metrics_at_k(Index rank, int k);

// Full ranking over all items for every position of the chosen segment.
// The context is everything before the position, truncated to the model's
// window; positions with an empty context are skipped. Users are independent
// shards; per-user results merge in user order, so thread count does not
// change the output.
EvalReport evaluate(const Model& model, const SequenceDataset& data, const EvalOptions& opts);

// CSV: header comments (one per config line), then
// segment,metric,cutoff,value,instances.
void write_report_csv(const EvalReport& report, std::ostream& out,
                      const std::vector<std::string>& config_echo);

}  // namespace ttt4rec
