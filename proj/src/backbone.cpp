#include "ttt4rec/backbone.hpp"

namespace ttt4rec {

ResidualBlockParams make_residual_block(BackboneKind backbone, InnerKind inner, Index dim,
                                        Index inner_hidden, Index conv_width, Rng& rng) {
    ResidualBlockParams p;
    p.backbone = backbone;

    auto ln_pair = [&](TensorPtr& gain, TensorPtr& bias) {
        gain = full(Shape{dim}, 1.0, true);
        bias = zeros(Shape{dim}, true);
    };
    ln_pair(p.ln1_gain, p.ln1_bias);
    ln_pair(p.ln2_gain, p.ln2_bias);
    ln_pair(p.ln_out_gain, p.ln_out_bias);

    if (backbone == BackboneKind::transformer) {
        p.proj.key = randn(Shape{dim, dim}, 0.0, 0.02, rng, true);
        p.proj.query = randn(Shape{dim, dim}, 0.0, 0.02, rng, true);
    } else {
        p.proj.shared_kq = randn(Shape{dim, dim}, 0.0, 0.02, rng, true);
        p.conv_key = randn(Shape{conv_width, dim}, 0.0, 0.02, rng, true);
        p.conv_query = randn(Shape{conv_width, dim}, 0.0, 0.02, rng, true);
        p.gate_proj = randn(Shape{dim, dim}, 0.0, 0.02, rng, true);
        p.out_proj = randn(Shape{dim, dim}, 0.0, 0.02, rng, true);
    }
    p.proj.value = randn(Shape{dim, dim}, 0.0, 0.02, rng, true);

    p.init_state = (inner == InnerKind::linear) ? make_linear_state(dim)
                                                : make_mlp_state(dim, inner_hidden, rng);

    p.ffn_w1 = randn(Shape{4 * dim, dim}, 0.0, 0.02, rng, true);
    p.ffn_b1 = zeros(Shape{4 * dim}, true);
    p.ffn_w2 = randn(Shape{dim, 4 * dim}, 0.0, 0.02, rng, true);
    p.ffn_b2 = zeros(Shape{dim}, true);
    return p;
}

void collect_parameters(const ResidualBlockParams& p, const std::string& prefix,
                        std::vector<std::pair<std::string, TensorPtr>>& out) {
    auto put = [&](const char* name, const TensorPtr& t) {
        if (t) {
            out.emplace_back(prefix + name, t);
        }
    };
    put("ln1.gain", p.ln1_gain);
    put("ln1.bias", p.ln1_bias);
    put("ln2.gain", p.ln2_gain);
    put("ln2.bias", p.ln2_bias);
    put("ln_out.gain", p.ln_out_gain);
    put("ln_out.bias", p.ln_out_bias);
    put("proj.key", p.proj.key);
    put("proj.query", p.proj.query);
    put("proj.value", p.proj.value);
    put("proj.shared_kq", p.proj.shared_kq);
    put("state.linear", p.init_state.linear_map);
    put("state.hidden", p.init_state.mlp_hidden);
    put("state.readout", p.init_state.mlp_readout);
    put("conv.key", p.conv_key);
    put("conv.query", p.conv_query);
    put("gate", p.gate_proj);
    put("out_proj", p.out_proj);
    put("ffn.w1", p.ffn_w1);
    put("ffn.b1", p.ffn_b1);
    put("ffn.w2", p.ffn_w2);
    put("ffn.b2", p.ffn_b2);
}

namespace {

void append_losses(std::vector<double>* sink, const std::vector<double>& losses) {
    if (sink) {
        sink->insert(sink->end(), losses.begin(), losses.end());
    }
}

}  // namespace

TensorPtr seq_block_transformer(const TensorPtr& x, const ResidualBlockParams& p,
                                const InnerLoopConfig& cfg,
                                std::span<const std::uint8_t> valid,
                                std::vector<double>* step_losses) {
    auto views = project_views(x, p.proj);
    auto scanned = ttt_scan(views.key, views.value, views.query, p.init_state, cfg, valid);
    append_losses(step_losses, scanned.step_losses);
    return layer_norm(scanned.outputs, p.ln_out_gain, p.ln_out_bias);
}

TensorPtr seq_block_mamba(const TensorPtr& x, const ResidualBlockParams& p,
                          const InnerLoopConfig& cfg, std::span<const std::uint8_t> valid,
                          std::vector<double>* step_losses) {
    auto views = project_views(x, p.proj);
    auto keys = causal_depthwise_conv1d(views.key, p.conv_key);
    auto queries = causal_depthwise_conv1d(views.query, p.conv_query);
    auto scanned = ttt_scan(keys, views.value, queries, p.init_state, cfg, valid);
    append_losses(step_losses, scanned.step_losses);
    auto gate = gelu(matmul(x, transpose(p.gate_proj)));
    auto gated = mul(layer_norm(scanned.outputs, p.ln_out_gain, p.ln_out_bias), gate);
    return matmul(gated, transpose(p.out_proj));
}

TensorPtr residual_block(const TensorPtr& x, const ResidualBlockParams& p,
                         const InnerLoopConfig& cfg, std::span<const std::uint8_t> valid,
                         std::vector<double>* step_losses) {
    // Padded rows must enter the sequence block as exact zeros: the mamba
    // convolution reads across positions, and a norm bias would leak into the
    // first valid outputs otherwise.
    auto normed = mask_rows(layer_norm(x, p.ln1_gain, p.ln1_bias), valid);
    auto seq_out = (p.backbone == BackboneKind::transformer)
                       ? seq_block_transformer(normed, p, cfg, valid, step_losses)
                       : seq_block_mamba(normed, p, cfg, valid, step_losses);
    auto h = add(x, mask_rows(seq_out, valid));

    auto ffn_in = layer_norm(h, p.ln2_gain, p.ln2_bias);
    auto mid = gelu(add_row_broadcast(matmul(ffn_in, transpose(p.ffn_w1)), p.ffn_b1));
    auto ffn_out = add_row_broadcast(matmul(mid, transpose(p.ffn_w2)), p.ffn_b2);
    return add(h, mask_rows(ffn_out, valid));
}

}  // namespace ttt4rec
