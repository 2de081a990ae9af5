#pragma once

#include "ttt4rec/embedding.hpp"
#include "ttt4rec/ttt_layer.hpp"

#include <string>
#include <utility>
#include <vector>

namespace ttt4rec {

enum class BackboneKind { transformer, mamba };

// Everything one residual block owns. Both variants wrap the per-token
// adaptive scan; the mamba form merges the key/query projections, runs each
// path through its own causal convolution, and gates the normalized scan
// output before a final projection.
struct ResidualBlockParams {
    BackboneKind backbone{BackboneKind::transformer};

    TensorPtr ln1_gain, ln1_bias;        // before the sequence block
    TensorPtr ln2_gain, ln2_bias;        // before the feed-forward block
    TensorPtr ln_out_gain, ln_out_bias;  // on the scan output, inside the block

    ViewProjections proj;
    TTTState init_state;  // learnable start state, cloned per sequence

    // mamba extras
    TensorPtr conv_key, conv_query;  // width x dim depthwise kernels
    TensorPtr gate_proj, out_proj;   // dim x dim

    // feed-forward: dim -> 4*dim -> dim with gelu between
    TensorPtr ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

ResidualBlockParams make_residual_block(BackboneKind backbone, InnerKind inner, Index dim,
                                        Index inner_hidden, Index conv_width, Rng& rng);

void collect_parameters(const ResidualBlockParams& block, const std::string& prefix,
                        std::vector<std::pair<std::string, TensorPtr>>& out);

// Distinct projections, scan, then a normalization on the way out.
TensorPtr seq_block_transformer(const TensorPtr& x, const ResidualBlockParams& p,
                                const InnerLoopConfig& cfg,
                                std::span<const std::uint8_t> valid,
                                std::vector<double>* step_losses = nullptr);

// Shared key/query projection fed through per-path causal convolutions; the
// normalized scan output is gated by gelu(gate_proj x) and projected out.
TensorPtr seq_block_mamba(const TensorPtr& x, const ResidualBlockParams& p,
                          const InnerLoopConfig& cfg, std::span<const std::uint8_t> valid,
                          std::vector<double>* step_losses = nullptr);

// h = x + seq_block(norm(x)); out = h + ffn(norm(h)). Branch outputs are
// zeroed at masked rows so padding stays exactly zero through the stack.
TensorPtr residual_block(const TensorPtr& x, const ResidualBlockParams& p,
                         const InnerLoopConfig& cfg, std::span<const std::uint8_t> valid,
                         std::vector<double>* step_losses = nullptr);

}  // namespace ttt4rec
