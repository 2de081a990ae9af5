#pragma once

// Shared helpers for the unit and acceptance suites. The brute-force
// evaluator is an independent oracle: it materializes every instance context,
// runs the recorded-graph forward (not the streaming path), sorts the full
// score list explicitly, and derives the metrics from the sorted position.

#include <ttt4rec/data.hpp>
#include <ttt4rec/eval.hpp>
#include <ttt4rec/model.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

namespace ttt4rec::testing {

inline std::vector<std::uint8_t> ones_mask(std::size_t n) {
    return std::vector<std::uint8_t>(n, 1);
}

struct BruteForceResult {
    double hr{0.0};
    double ndcg{0.0};
    std::int64_t instances{0};
};

// Rank by explicit sort with ties placed ahead of the target.
inline Index brute_force_rank(const std::vector<double>& scores, Index target) {
    std::vector<std::pair<double, Index>> order;
    order.reserve(scores.size());
    for (Index i = 0; i < static_cast<Index>(scores.size()); ++i) {
        order.emplace_back(scores[static_cast<std::size_t>(i)], i);
    }
    const double target_score = scores[static_cast<std::size_t>(target)];
    std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) {
            return a.first > b.first;
        }
        // ties: the target sinks below every tied competitor
        return (a.second == target) < (b.second == target);
    });
    for (Index pos = 0; pos < static_cast<Index>(order.size()); ++pos) {
        if (order[static_cast<std::size_t>(pos)].second == target) {
            return pos + 1;
        }
    }
    return static_cast<Index>(order.size());
}

inline BruteForceResult brute_force_evaluate(const Model& model, const SequenceDataset& data,
                                             Segment segment, int cutoff, bool adapt) {
    BruteForceResult res;
    Rng dropout_rng(0);
    // Users are summed as independent shards, matching the reference
    // aggregation exactly (bit-for-bit, not just to rounding).
    for (const auto& u : data.users) {
        double user_hr = 0.0;
        double user_ndcg = 0.0;
        Index begin = 0;
        Index end = 0;
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
        for (Index p = std::max<Index>(begin, 1); p < end; ++p) {
            auto context = truncate_context(
                std::span<const std::int32_t>(u.items.data(), static_cast<std::size_t>(p)),
                model.config().max_context);
            // The frozen ablation scores with the adaptive pass disabled. The
            // graph path honors the model's own flag, so flip it temporarily
            // through a copy when asked for the ablation.
            std::vector<double> scores;
            if (adapt) {
                auto mask = ones_mask(context.size());
                auto h = model.forward_sequence(context, mask, Mode::eval, dropout_rng);
                auto logits = model.predict_scores(row(h, static_cast<Index>(context.size()) - 1));
                scores = logits->data;
            } else {
                ModelConfig frozen_cfg = model.config();
                frozen_cfg.inner_lr = 0.0;
                Model frozen(frozen_cfg, model.vocab());
                // share the trained tensors
                auto src = model.named_parameters();
                auto dst = frozen.named_parameters();
                for (std::size_t i = 0; i < src.size(); ++i) {
                    dst[i].second->data = src[i].second->data;
                }
                auto mask = ones_mask(context.size());
                auto h = frozen.forward_sequence(context, mask, Mode::eval, dropout_rng);
                auto logits =
                    frozen.predict_scores(row(h, static_cast<Index>(context.size()) - 1));
                scores = logits->data;
            }
            const Index rank = brute_force_rank(scores, u.items[static_cast<std::size_t>(p)] - 1);
            res.instances += 1;
            if (rank <= cutoff) {
                user_hr += 1.0;
                user_ndcg += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
            }
        }
        res.hr += user_hr;
        res.ndcg += user_ndcg;
    }
    if (res.instances > 0) {
        res.hr /= static_cast<double>(res.instances);
        res.ndcg /= static_cast<double>(res.instances);
    }
    return res;
}

}  // namespace ttt4rec::testing
