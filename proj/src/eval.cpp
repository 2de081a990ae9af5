#include "ttt4rec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ostream>
#include <thread>

namespace ttt4rec {

Segment parse_segment(const std::string& s) {
    if (s == "train") {
        return Segment::train;
    }
    if (s == "val") {
        return Segment::val;
    }
    if (s == "test") {
        return Segment::test;
    }
    throw ConfigError("unknown segment: " + s + " (expected train|val|test)");
}

const char* segment_name(Segment s) {
    switch (s) {
        case Segment::train: return "train";
        case Segment::val: return "val";
        default: return "test";
    }
}

double EvalReport::value_of(const std::string& metric, int cutoff) const {
    for (const auto& r : rows) {
        if (r.metric == metric && r.cutoff == cutoff) {
            return r.value;
        }
    }
    throw Error("report has no " + metric + "@" + std::to_string(cutoff) + " row");
}

Index rank_of_target(std::span<const double> scores, Index target) {
    if (target < 0 || target >= static_cast<Index>(scores.size())) {
        throw ShapeError("rank_of_target: target out of range");
    }
    const double ts = scores[static_cast<std::size_t>(target)];
    Index ahead = 0;
    for (Index i = 0; i < static_cast<Index>(scores.size()); ++i) {
        if (i == target) {
            continue;
        }
        if (scores[static_cast<std::size_t>(i)] >= ts) {
            ++ahead;
        }
    }
    return 1 + ahead;
}

std::pair<double, double> metrics_at_k(Index rank, int k) {
    if (rank < 1 || k < 1) {
        throw Error("metrics_at_k: rank and cutoff must be >= 1");
    }
    if (rank > static_cast<Index>(k)) {
        return {0.0, 0.0};
    }
    return {1.0, 1.0 / std::log2(static_cast<double>(rank) + 1.0)};
}

namespace {

struct UserResult {
    std::vector<double> hr_sums;    // one per cutoff
    std::vector<double> ndcg_sums;
    std::int64_t instances{0};
    std::vector<InnerLossSample> inner_losses;
};

void segment_bounds(const UserSequence& u, Segment segment, Index& begin, Index& end) {
    switch (segment) {
        case Segment::train:
            begin = 0;
            end = u.train_end;
            break;
        case Segment::val:
            begin = u.train_end;
            end = u.val_end;
            break;
        default:
            begin = u.val_end;
            end = u.length();
            break;
    }
}

UserResult evaluate_user(const Model& model, const UserSequence& u, std::int64_t user_index,
                         const EvalOptions& opts) {
    UserResult res;
    res.hr_sums.assign(opts.cutoffs.size(), 0.0);
    res.ndcg_sums.assign(opts.cutoffs.size(), 0.0);

    Index begin = 0;
    Index end = 0;
    segment_bounds(u, opts.segment, begin, end);
    const Index max_context = model.config().max_context;

    Model::Stream stream = model.stream_begin(opts.adapt);
    Index streamed_from = -1;  // window start the stream was built on, -1 = stale

    // Position 0 has no context to rank from and is skipped.
    for (Index p = std::max<Index>(begin, 1); p < end; ++p) {
        const Index window_start = std::max<Index>(0, p - max_context);
        if (streamed_from != window_start) {
            // Window shifted (or first instance): rebuild over exactly the
            // truncated context. While the window start is stable the stream
            // instead grows one token per instance below, which is bitwise
            // identical to the rebuild because the scan is causal and the
            // rotary positions are anchored at the window start.
            stream = model.stream_begin(opts.adapt);
            streamed_from = window_start;
            for (Index t = window_start; t < p; ++t) {
                model.stream_push(stream, u.items[static_cast<std::size_t>(t)]);
            }
        }
        auto scores = model.stream_scores(stream);
        const Index target = u.items[static_cast<std::size_t>(p)] - 1;
        const Index rank = rank_of_target(scores, target);
        for (std::size_t c = 0; c < opts.cutoffs.size(); ++c) {
            auto [hr, ndcg] = metrics_at_k(rank, opts.cutoffs[c]);
            res.hr_sums[c] += hr;
            res.ndcg_sums[c] += ndcg;
        }
        res.instances += 1;

        const Index next_start = std::max<Index>(0, p + 1 - max_context);
        if (next_start == window_start) {
            // The observed item joins the context for the next instance.
            model.stream_push(stream, u.items[static_cast<std::size_t>(p)]);
            if (opts.record_inner_loss) {
                res.inner_losses.push_back({user_index, p, stream.last_inner_loss});
            }
        } else {
            if (opts.record_inner_loss) {
                // Measure the reconstruction loss for this token, then drop
                // the stream; the next instance rebuilds its shifted window.
                model.stream_push(stream, u.items[static_cast<std::size_t>(p)]);
                res.inner_losses.push_back({user_index, p, stream.last_inner_loss});
            }
            streamed_from = -1;
        }
    }
    return res;
}

int resolve_threads(int requested) {
    int n = requested > 0 ? requested : 1;
    // The environment caps, never raises, the worker count.
    if (const char* env = std::getenv("TTT4REC_THREADS")) {
        const int cap = std::atoi(env);
        if (cap > 0) {
            n = std::min(n, cap);
        }
    }
    return n;
}

}  // namespace

EvalReport evaluate(const Model& model, const SequenceDataset& data, const EvalOptions& opts) {
    if (opts.cutoffs.empty()) {
        throw ConfigError("evaluate: need at least one cutoff");
    }
    for (int k : opts.cutoffs) {
        if (k < 1) {
            throw ConfigError("evaluate: cutoffs must be >= 1");
        }
    }

    const int threads = std::min<int>(resolve_threads(opts.threads),
                                      static_cast<int>(data.users.size()));
    std::vector<UserResult> per_user(data.users.size());

    auto run_range = [&](std::size_t from, std::size_t to) {
        for (std::size_t i = from; i < to; ++i) {
            per_user[i] = evaluate_user(model, data.users[i], static_cast<std::int64_t>(i), opts);
        }
    };
    if (threads <= 1) {
        run_range(0, data.users.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (data.users.size() + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            const std::size_t from = static_cast<std::size_t>(t) * chunk;
            const std::size_t to = std::min(from + chunk, data.users.size());
            if (from < to) {
                pool.emplace_back(run_range, from, to);
            }
        }
        for (auto& th : pool) {
            th.join();
        }
    }

    // Merge in user order so the result is independent of the thread count.
    EvalReport report;
    std::vector<double> hr(opts.cutoffs.size(), 0.0);
    std::vector<double> ndcg(opts.cutoffs.size(), 0.0);
    for (std::size_t ui = 0; ui < per_user.size(); ++ui) {
        const auto& ur = per_user[ui];
        report.instances += ur.instances;
        for (std::size_t c = 0; c < opts.cutoffs.size(); ++c) {
            hr[c] += ur.hr_sums[c];
            ndcg[c] += ur.ndcg_sums[c];
        }
        report.inner_losses.insert(report.inner_losses.end(), ur.inner_losses.begin(),
                                   ur.inner_losses.end());
        if (opts.per_user && ur.instances > 0) {
            EvalReport::UserRow row;
            row.user_id = data.users[ui].user_id;
            row.instances = ur.instances;
            for (std::size_t c = 0; c < opts.cutoffs.size(); ++c) {
                row.hr.push_back(ur.hr_sums[c] / static_cast<double>(ur.instances));
                row.ndcg.push_back(ur.ndcg_sums[c] / static_cast<double>(ur.instances));
            }
            report.per_user.push_back(std::move(row));
        }
    }
    if (report.instances == 0) {
        throw DataError(std::string("segment '") + segment_name(opts.segment) +
                        "' has no evaluation instances");
    }
    for (std::size_t c = 0; c < opts.cutoffs.size(); ++c) {
        report.rows.push_back({segment_name(opts.segment), "hr", opts.cutoffs[c],
                               hr[c] / static_cast<double>(report.instances),
                               report.instances});
        report.rows.push_back({segment_name(opts.segment), "ndcg", opts.cutoffs[c],
                               ndcg[c] / static_cast<double>(report.instances),
                               report.instances});
    }
    return report;
}

void write_report_csv(const EvalReport& report, std::ostream& out,
                      const std::vector<std::string>& config_echo) {
    for (const auto& line : config_echo) {
        out << "# " << line << "\n";
    }
    out << "segment,metric,cutoff,value,instances\n";
    char buf[64];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%.6f", r.value);
        out << r.segment << ',' << r.metric << ',' << r.cutoff << ',' << buf << ','
            << r.instances << "\n";
    }
}

}  // namespace ttt4rec
