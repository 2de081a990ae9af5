#include "ttt4rec/embedding.hpp"

#include "kernels.hpp"

#include <cmath>

namespace ttt4rec {

RopeConfig::RopeConfig(Index dim, double factor) : rotation_factor(factor) {
    if (dim <= 0 || dim % 2 != 0) {
        throw ConfigError("rotary encoding needs an even embedding dimension, got " +
                          std::to_string(dim));
    }
    if (factor <= 0.0) {
        throw ConfigError("rotation factor must be positive");
    }
    freqs.resize(static_cast<std::size_t>(dim / 2));
    for (Index j = 0; j < dim / 2; ++j) {
        freqs[static_cast<std::size_t>(j)] =
            std::pow(factor, -2.0 * static_cast<double>(j) / static_cast<double>(dim));
    }
}

TensorPtr rope_apply(const TensorPtr& x, Index first_position, const RopeConfig& cfg) {
    if (x->shape.size() != 2) {
        throw ShapeError("rope_apply: expected a sequence matrix, got " + shape_str(x->shape));
    }
    const Index n = x->shape[0];
    const Index d = x->shape[1];
    if (d % 2 != 0 || static_cast<Index>(cfg.freqs.size()) != d / 2) {
        throw ShapeError("rope_apply: dimension " + std::to_string(d) +
                         " does not match the rotation config");
    }
    std::vector<double> out_d = x->data;
    for (Index t = 0; t < n; ++t) {
        detail::rope_rotate_row(
            std::span<double>(out_d.data() + t * d, static_cast<std::size_t>(d)),
            first_position + t, cfg.freqs);
    }
    auto out = make_tensor(x->shape, std::move(out_d), detail::any_requires_grad({x}));
    detail::check_finite("rope_apply", *out);
    if (out->requires_grad) {
        // Rotations are orthogonal: the pullback rotates the gradient back by
        // the negated angles.
        std::vector<double> freqs = cfg.freqs;
        detail::record_op("rope_apply", {x}, out,
                          [x, freqs = std::move(freqs), first_position, n, d, o = out.get()]() {
                              std::vector<double> g = o->grad;
                              std::vector<double> neg(freqs.size());
                              for (std::size_t j = 0; j < freqs.size(); ++j) {
                                  neg[j] = -freqs[j];
                              }
                              for (Index t = 0; t < n; ++t) {
                                  detail::rope_rotate_row(
                                      std::span<double>(g.data() + t * d,
                                                        static_cast<std::size_t>(d)),
                                      first_position + t, neg);
                              }
                              x->accum_grad(g);
                          });
    }
    return out;
}

ItemEmbeddingTable::ItemEmbeddingTable(Index vocab_size, Index embed_dim, Rng& rng)
    : vocab(vocab_size), dim(embed_dim) {
    if (vocab_size < 1) {
        throw ConfigError("embedding table needs at least one item");
    }
    weights = randn(Shape{vocab_size + 1, embed_dim}, 0.0, 0.02, rng, true);
    // Row 0 is the padding item and stays zero.
    for (Index j = 0; j < embed_dim; ++j) {
        weights->data[static_cast<std::size_t>(j)] = 0.0;
    }
}

TensorPtr ItemEmbeddingTable::lookup(std::span<const std::int32_t> items) const {
    for (std::int32_t it : items) {
        if (it < 0 || static_cast<Index>(it) > vocab) {
            throw DataError("item index " + std::to_string(it) + " out of range [0, " +
                            std::to_string(vocab) + "]");
        }
    }
    return gather_rows(weights, items);
}

void ItemEmbeddingTable::clear_padding_grad() const {
    if (weights->grad.empty()) {
        return;
    }
    for (Index j = 0; j < dim; ++j) {
        weights->grad[static_cast<std::size_t>(j)] = 0.0;
    }
}

EmbeddingLayer::EmbeddingLayer(Index vocab, Index dim, double rotation_factor, double rate,
                               Rng& rng)
    : table(vocab, dim, rng), rope(dim, rotation_factor), dropout_rate(rate) {
    ln_gain = full(Shape{dim}, 1.0, true);
    ln_bias = zeros(Shape{dim}, true);
}

TensorPtr EmbeddingLayer::forward(std::span<const std::int32_t> items, Mode mode,
                                  Rng& dropout_rng, Index first_position) const {
    auto embedded = table.lookup(items);
    auto rotated = rope_apply(embedded, first_position, rope);
    auto dropped = dropout(rotated, dropout_rate, dropout_rng, mode == Mode::train);
    return layer_norm(dropped, ln_gain, ln_bias);
}

}  // namespace ttt4rec
