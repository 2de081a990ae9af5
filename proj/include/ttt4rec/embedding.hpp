#pragma once

#include "ttt4rec/tensor.hpp"

#include <span>
#include <vector>

namespace ttt4rec {

enum class Mode { train, eval };

// Pairwise rotation frequencies for rotary position encoding.
// freqs[j] = rotation_factor^(-2j/dim), strictly decreasing for factor > 1.
struct RopeConfig {
    double rotation_factor{1000.0};
    std::vector<double> freqs;

    RopeConfig() = default;
    RopeConfig(Index dim, double rotation_factor);
};

// Rotates each coordinate pair (2j, 2j+1) of every row by
// (first_position + row) * freqs[j]. Rotations are isometries, so norms are
// preserved and dot products depend only on relative position offsets.
TensorPtr rope_apply(const TensorPtr& x, Index first_position, const RopeConfig& cfg);

// Item embedding matrix with row 0 reserved for padding. The padding row
// starts zero and must be kept out of gradient updates (clear_padding_grad
// before each optimizer step).
struct ItemEmbeddingTable {
    TensorPtr weights;  // (vocab+1) x dim
    Index vocab{0};
    Index dim{0};

    ItemEmbeddingTable() = default;
    ItemEmbeddingTable(Index vocab, Index dim, Rng& rng);

    // Row gather; gradients scatter back to the touched rows only.
    TensorPtr lookup(std::span<const std::int32_t> items) const;
    void clear_padding_grad() const;
};

// Lookup -> rotary position encoding -> dropout -> layer norm.
struct EmbeddingLayer {
    ItemEmbeddingTable table;
    RopeConfig rope;
    TensorPtr ln_gain, ln_bias;
    double dropout_rate{0.2};

    EmbeddingLayer() = default;
    EmbeddingLayer(Index vocab, Index dim, double rotation_factor, double dropout_rate, Rng& rng);

    // first_position offsets the rotary phase; a left-padded sequence passes
    // the negated pad length so its first real item sits at phase zero,
    // keeping padded and bare runs bitwise identical.
    TensorPtr forward(std::span<const std::int32_t> items, Mode mode, Rng& dropout_rng,
                      Index first_position = 0) const;
};

}  // namespace ttt4rec
