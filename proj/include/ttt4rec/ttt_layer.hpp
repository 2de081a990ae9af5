#pragma once

#include "ttt4rec/tensor.hpp"

#include <span>
#include <vector>

namespace ttt4rec {

enum class InnerKind { linear, mlp };

// The hidden state is itself a small model: a single map for the linear
// kind, a two-layer bottleneck for the mlp kind. The tensors here are graph
// nodes, so a state produced mid-scan carries its derivation with it.
struct TTTState {
    InnerKind kind{InnerKind::linear};
    TensorPtr linear_map;                // dim x dim            (linear)
    TensorPtr mlp_hidden, mlp_readout;   // hidden x dim, dim x hidden  (mlp)

    std::vector<TensorPtr> tensors() const;
    bool finite() const;
};

TTTState make_linear_state(Index dim);                              // zero init
TTTState make_mlp_state(Index dim, Index hidden, Rng& rng);         // N(0, 0.02) init

// Key/query/value maps, applied to column vectors. A backbone that merges
// the key and query paths supplies shared_kq instead of key/query.
struct ViewProjections {
    TensorPtr key, query, value;  // dim x dim
    TensorPtr shared_kq;          // dim x dim, set only for the merged form
    bool shared() const { return shared_kq != nullptr; }
};

struct InnerLoopConfig {
    double learning_rate{0.1};
    bool adapt_at_eval{true};
};

struct Views {
    TensorPtr key, value, query;
};

// x may be a single token [dim] or a sequence [n x dim] (applied row-wise).
// Merged projections emit the same node for key and query; the caller routes
// them through its own per-path transforms.
Views project_views(const TensorPtr& x, const ViewProjections& proj);

// f(key; state): the state's prediction of the value view.
TensorPtr inner_predict(const TensorPtr& key_view, const TTTState& state);

// Squared reconstruction error ||f(key; state) - value||^2.
TensorPtr inner_loss(const TensorPtr& key_view, const TensorPtr& value_view,
                     const TTTState& state);

// One gradient step on the reconstruction loss, written in closed form with
// ordinary differentiable ops so outer-loop gradients flow through the
// update itself. Both mlp factors step from their pre-update values.
TTTState inner_step(const TensorPtr& key_view, const TensorPtr& value_view,
                    const TTTState& state, double learning_rate);

struct ScanResult {
    TensorPtr outputs;                // n x dim; masked rows are zero
    TTTState final_state;
    std::vector<double> step_losses;  // reconstruction loss per position, 0 where masked
};

// Sequential pass: for each valid position, measure the reconstruction loss,
// update the state, and emit f(query; updated state). Masked positions carry
// the state through unchanged and emit zeros. learning_rate == 0 keeps the
// initial state everywhere, making the layer a static per-token map.
ScanResult ttt_scan(const TensorPtr& keys, const TensorPtr& values, const TensorPtr& queries,
                    const TTTState& initial, const InnerLoopConfig& cfg,
                    std::span<const std::uint8_t> valid);

}  // namespace ttt4rec
