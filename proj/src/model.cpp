#include "ttt4rec/model.hpp"

#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ttt4rec {

void ModelConfig::validate() const {
    std::vector<std::string> problems;
    auto require = [&](bool ok, const std::string& msg) {
        if (!ok) {
            problems.push_back(msg);
        }
    };
    require(embed_dim > 0, "embed_dim must be positive");
    require(embed_dim % 2 == 0, "embed_dim must be even for rotary encoding");
    require(blocks >= 1, "blocks must be >= 1");
    require(inner_hidden > 0, "inner_hidden must be positive");
    require(rope_factor > 0.0, "rope_factor must be positive");
    require(inner_lr >= 0.0, "inner_lr must be >= 0");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, "dropout must be in [0, 1)");
    require(max_context >= 1, "max_context must be >= 1");
    require(outer_lr > 0.0, "outer_lr must be positive");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(epochs >= 0, "epochs must be >= 0");
    require(conv_width >= 1, "conv_width must be >= 1");
    if (!problems.empty()) {
        std::string joined;
        for (std::size_t i = 0; i < problems.size(); ++i) {
            if (i) {
                joined += "; ";
            }
            joined += problems[i];
        }
        throw ConfigError("invalid model configuration: " + joined);
    }
}

const char* backbone_name(BackboneKind k) {
    return k == BackboneKind::transformer ? "transformer" : "mamba";
}

const char* inner_name(InnerKind k) { return k == InnerKind::linear ? "linear" : "mlp"; }

BackboneKind parse_backbone(const std::string& s) {
    if (s == "transformer") {
        return BackboneKind::transformer;
    }
    if (s == "mamba") {
        return BackboneKind::mamba;
    }
    throw ConfigError("unknown backbone: " + s + " (expected transformer|mamba)");
}

InnerKind parse_inner(const std::string& s) {
    if (s == "linear") {
        return InnerKind::linear;
    }
    if (s == "mlp") {
        return InnerKind::mlp;
    }
    throw ConfigError("unknown inner model: " + s + " (expected linear|mlp)");
}

namespace {

// Keep parameters exactly representable in checkpoint precision so a freshly
// initialized model round-trips through save/load bitwise.
void quantize_to_storage(const std::vector<std::pair<std::string, TensorPtr>>& params) {
    for (const auto& [name, p] : params) {
        for (auto& v : p->data) {
            v = static_cast<double>(static_cast<float>(v));
        }
    }
}

}  // namespace

Model::Model(const ModelConfig& cfg, Index vocab) : cfg_(cfg), vocab_(vocab) {
    cfg_.validate();
    if (vocab < 1) {
        throw ConfigError("model needs a vocabulary of at least one item");
    }
    Rng rng(cfg_.seed);
    Rng embed_rng = rng.fork(1);
    embedding_ = EmbeddingLayer(vocab, cfg_.embed_dim, cfg_.rope_factor, cfg_.dropout_rate,
                                embed_rng);
    for (int b = 0; b < cfg_.blocks; ++b) {
        Rng block_rng = rng.fork(100 + static_cast<std::uint64_t>(b));
        blocks_.push_back(make_residual_block(cfg_.backbone, cfg_.inner, cfg_.embed_dim,
                                              cfg_.inner_hidden, cfg_.conv_width, block_rng));
    }
    if (!cfg_.tie_head) {
        Rng head_rng = rng.fork(2);
        head_ = randn(Shape{vocab, cfg_.embed_dim}, 0.0, 0.02, head_rng, true);
    }
    quantize_to_storage(named_parameters());
}

std::vector<std::pair<std::string, TensorPtr>> Model::named_parameters() const {
    std::vector<std::pair<std::string, TensorPtr>> out;
    out.emplace_back("embedding.table", embedding_.table.weights);
    out.emplace_back("embedding.ln.gain", embedding_.ln_gain);
    out.emplace_back("embedding.ln.bias", embedding_.ln_bias);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        collect_parameters(blocks_[b], "block" + std::to_string(b) + ".", out);
    }
    if (head_) {
        out.emplace_back("head.matrix", head_);
    }
    return out;
}

std::vector<TensorPtr> Model::parameters() const {
    std::vector<TensorPtr> out;
    for (auto& [name, p] : named_parameters()) {
        out.push_back(p);
    }
    return out;
}

void Model::zero_grad() const {
    for (auto& [name, p] : named_parameters()) {
        p->zero_grad();
    }
}

TensorPtr Model::forward_sequence(std::span<const std::int32_t> items,
                                  std::span<const std::uint8_t> valid, Mode mode,
                                  Rng& dropout_rng, std::vector<double>* step_losses) const {
    if (items.size() != valid.size()) {
        throw ShapeError("forward_sequence: items and mask lengths disagree");
    }
    if (static_cast<Index>(items.size()) > cfg_.max_context) {
        throw ShapeError("forward_sequence: sequence longer than max_context");
    }
    InnerLoopConfig inner_cfg;
    inner_cfg.adapt_at_eval = cfg_.adapt_at_eval;
    inner_cfg.learning_rate =
        (mode == Mode::eval && !cfg_.adapt_at_eval) ? 0.0 : cfg_.inner_lr;

    // Rotary phases anchor at the first real item so a left-padded run stays
    // bitwise equal to the bare run of the same window.
    Index pad = 0;
    while (pad < static_cast<Index>(valid.size()) && !valid[static_cast<std::size_t>(pad)]) {
        ++pad;
    }
    auto x = embedding_.forward(items, mode, dropout_rng, -pad);
    x = mask_rows(x, valid);
    for (const auto& block : blocks_) {
        x = residual_block(x, block, inner_cfg, valid, step_losses);
    }
    return x;
}

TensorPtr Model::head_matrix() const {
    if (head_) {
        return head_;
    }
    // Tied head: rank items with their own embeddings (padding row excluded).
    std::vector<std::int32_t> idx(static_cast<std::size_t>(vocab_));
    std::iota(idx.begin(), idx.end(), 1);
    return gather_rows(embedding_.table.weights, idx);
}

TensorPtr Model::predict_scores(const TensorPtr& h) const {
    return matvec(head_matrix(), h);
}

// ---- streaming inference ----

Model::Stream Model::stream_begin(bool adapt) const {
    Stream s;
    s.adapt = adapt;
    s.blocks.resize(blocks_.size());
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const auto& init = blocks_[b].init_state;
        auto& bs = s.blocks[b];
        if (init.kind == InnerKind::linear) {
            bs.linear_map = init.linear_map->data;
        } else {
            bs.mlp_hidden = init.mlp_hidden->data;
            bs.mlp_readout = init.mlp_readout->data;
        }
        if (blocks_[b].backbone == BackboneKind::mamba) {
            bs.conv_history.assign(static_cast<std::size_t>(cfg_.conv_width - 1), {});
        }
    }
    s.last_h.assign(static_cast<std::size_t>(cfg_.embed_dim), 0.0);
    return s;
}

void Model::stream_push(Stream& s, std::int32_t item) const {
    const Index d = cfg_.embed_dim;
    if (item < 1 || static_cast<Index>(item) > vocab_) {
        throw DataError("stream_push: item index " + std::to_string(item) + " out of range");
    }
    const double inner_lr = s.adapt ? cfg_.inner_lr : 0.0;
    const double step = 2.0 * inner_lr;

    // Embedding row: lookup, rotate, layer norm (dropout is identity in eval).
    std::vector<double> x(static_cast<std::size_t>(d));
    const double* erow = embedding_.table.weights->data.data() + item * d;
    std::copy(erow, erow + d, x.begin());
    detail::rope_rotate_row(x, s.position, embedding_.rope.freqs);
    std::vector<double> normed(static_cast<std::size_t>(d));
    detail::layer_norm_row(x, embedding_.ln_gain->data, embedding_.ln_bias->data, 1e-5, normed);
    x = normed;

    std::vector<double> u(static_cast<std::size_t>(d));
    std::vector<double> k(static_cast<std::size_t>(d));
    std::vector<double> q(static_cast<std::size_t>(d));
    std::vector<double> v(static_cast<std::size_t>(d));
    std::vector<double> out_row(static_cast<std::size_t>(d));
    std::vector<double> y(static_cast<std::size_t>(d));
    double loss_sum = 0.0;

    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const auto& p = blocks_[b];
        auto& bs = s.blocks[b];

        detail::layer_norm_row(x, p.ln1_gain->data, p.ln1_bias->data, 1e-5, u);

        if (p.backbone == BackboneKind::transformer) {
            detail::matvec_into(p.proj.key->data.data(), d, d, u.data(), k.data());
            detail::matvec_into(p.proj.query->data.data(), d, d, u.data(), q.data());
        } else {
            std::vector<double> srow(static_cast<std::size_t>(d));
            detail::matvec_into(p.proj.shared_kq->data.data(), d, d, u.data(), srow.data());
            // History rows oldest-first, then the current row.
            std::vector<const double*> history(static_cast<std::size_t>(cfg_.conv_width));
            for (Index j = 0; j + 1 < cfg_.conv_width; ++j) {
                const auto& hist = bs.conv_history[static_cast<std::size_t>(j)];
                history[static_cast<std::size_t>(j)] = hist.empty() ? nullptr : hist.data();
            }
            history[static_cast<std::size_t>(cfg_.conv_width - 1)] = srow.data();
            detail::causal_conv_row(history, p.conv_key->data.data(), cfg_.conv_width, d,
                                    k.data());
            detail::causal_conv_row(history, p.conv_query->data.data(), cfg_.conv_width, d,
                                    q.data());
            if (cfg_.conv_width > 1) {
                bs.conv_history.erase(bs.conv_history.begin());
                bs.conv_history.push_back(std::move(srow));
            }
        }
        detail::matvec_into(p.proj.value->data.data(), d, d, u.data(), v.data());

        // Reconstruction loss against the incoming state, then the update.
        double loss = 0.0;
        if (p.init_state.kind == InnerKind::linear) {
            std::vector<double> pred(static_cast<std::size_t>(d));
            detail::matvec_into(bs.linear_map.data(), d, d, k.data(), pred.data());
            std::vector<double> residual(static_cast<std::size_t>(d));
            for (Index i = 0; i < d; ++i) {
                residual[static_cast<std::size_t>(i)] =
                    pred[static_cast<std::size_t>(i)] - v[static_cast<std::size_t>(i)];
                loss += residual[static_cast<std::size_t>(i)] *
                        residual[static_cast<std::size_t>(i)];
            }
            if (inner_lr > 0.0) {
                for (Index i = 0; i < d; ++i) {
                    const double ri = residual[static_cast<std::size_t>(i)];
                    double* wrow = bs.linear_map.data() + i * d;
                    for (Index j = 0; j < d; ++j) {
                        wrow[j] = wrow[j] - (ri * k[static_cast<std::size_t>(j)]) * step;
                    }
                }
            }
            detail::matvec_into(bs.linear_map.data(), d, d, q.data(), out_row.data());
        } else {
            const Index hidden = cfg_.inner_hidden;
            std::vector<double> pre(static_cast<std::size_t>(hidden));
            detail::matvec_into(bs.mlp_hidden.data(), hidden, d, k.data(), pre.data());
            std::vector<double> act(static_cast<std::size_t>(hidden));
            for (Index i = 0; i < hidden; ++i) {
                act[static_cast<std::size_t>(i)] =
                    detail::gelu_scalar(pre[static_cast<std::size_t>(i)]);
            }
            std::vector<double> pred(static_cast<std::size_t>(d));
            detail::matvec_into(bs.mlp_readout.data(), d, hidden, act.data(), pred.data());
            std::vector<double> residual(static_cast<std::size_t>(d));
            for (Index i = 0; i < d; ++i) {
                residual[static_cast<std::size_t>(i)] =
                    pred[static_cast<std::size_t>(i)] - v[static_cast<std::size_t>(i)];
                loss += residual[static_cast<std::size_t>(i)] *
                        residual[static_cast<std::size_t>(i)];
            }
            if (inner_lr > 0.0) {
                // back = (W2ᵀ residual) ⊙ gelu'(pre), taken at the old readout.
                std::vector<double> back(static_cast<std::size_t>(hidden));
                detail::matvec_t_into(bs.mlp_readout.data(), d, hidden, residual.data(),
                                      back.data());
                for (Index i = 0; i < hidden; ++i) {
                    back[static_cast<std::size_t>(i)] =
                        back[static_cast<std::size_t>(i)] *
                        detail::gelu_prime_scalar(pre[static_cast<std::size_t>(i)]);
                }
                for (Index i = 0; i < d; ++i) {
                    const double ri = residual[static_cast<std::size_t>(i)];
                    double* wrow = bs.mlp_readout.data() + i * hidden;
                    for (Index j = 0; j < hidden; ++j) {
                        wrow[j] = wrow[j] - (ri * act[static_cast<std::size_t>(j)]) * step;
                    }
                }
                for (Index i = 0; i < hidden; ++i) {
                    const double bi = back[static_cast<std::size_t>(i)];
                    double* wrow = bs.mlp_hidden.data() + i * d;
                    for (Index j = 0; j < d; ++j) {
                        wrow[j] = wrow[j] - (bi * k[static_cast<std::size_t>(j)]) * step;
                    }
                }
            }
            // out = W2 gelu(W1 q) with the updated state
            std::vector<double> pre_q(static_cast<std::size_t>(hidden));
            detail::matvec_into(bs.mlp_hidden.data(), hidden, d, q.data(), pre_q.data());
            for (Index i = 0; i < hidden; ++i) {
                pre_q[static_cast<std::size_t>(i)] =
                    detail::gelu_scalar(pre_q[static_cast<std::size_t>(i)]);
            }
            detail::matvec_into(bs.mlp_readout.data(), d, hidden, pre_q.data(), out_row.data());
        }
        bs.last_inner_loss = loss;
        loss_sum += loss;

        detail::layer_norm_row(out_row, p.ln_out_gain->data, p.ln_out_bias->data, 1e-5, y);
        if (p.backbone == BackboneKind::mamba) {
            std::vector<double> gate(static_cast<std::size_t>(d));
            detail::matvec_into(p.gate_proj->data.data(), d, d, u.data(), gate.data());
            for (Index i = 0; i < d; ++i) {
                gate[static_cast<std::size_t>(i)] =
                    detail::gelu_scalar(gate[static_cast<std::size_t>(i)]);
                y[static_cast<std::size_t>(i)] =
                    y[static_cast<std::size_t>(i)] * gate[static_cast<std::size_t>(i)];
            }
            std::vector<double> projected(static_cast<std::size_t>(d));
            detail::matvec_into(p.out_proj->data.data(), d, d, y.data(), projected.data());
            y = projected;
        }
        std::vector<double> h(static_cast<std::size_t>(d));
        for (Index i = 0; i < d; ++i) {
            h[static_cast<std::size_t>(i)] =
                x[static_cast<std::size_t>(i)] + y[static_cast<std::size_t>(i)];
        }

        std::vector<double> ffn_in(static_cast<std::size_t>(d));
        detail::layer_norm_row(h, p.ln2_gain->data, p.ln2_bias->data, 1e-5, ffn_in);
        const Index mid_dim = 4 * d;
        std::vector<double> mid(static_cast<std::size_t>(mid_dim));
        detail::matvec_into(p.ffn_w1->data.data(), mid_dim, d, ffn_in.data(), mid.data());
        for (Index i = 0; i < mid_dim; ++i) {
            mid[static_cast<std::size_t>(i)] =
                mid[static_cast<std::size_t>(i)] + p.ffn_b1->data[static_cast<std::size_t>(i)];
            mid[static_cast<std::size_t>(i)] =
                detail::gelu_scalar(mid[static_cast<std::size_t>(i)]);
        }
        std::vector<double> ffn_out(static_cast<std::size_t>(d));
        detail::matvec_into(p.ffn_w2->data.data(), d, mid_dim, mid.data(), ffn_out.data());
        for (Index i = 0; i < d; ++i) {
            ffn_out[static_cast<std::size_t>(i)] =
                ffn_out[static_cast<std::size_t>(i)] + p.ffn_b2->data[static_cast<std::size_t>(i)];
            x[static_cast<std::size_t>(i)] =
                h[static_cast<std::size_t>(i)] + ffn_out[static_cast<std::size_t>(i)];
        }
    }

    s.last_h = x;
    s.last_inner_loss = blocks_.empty() ? 0.0 : loss_sum / static_cast<double>(blocks_.size());
    s.position += 1;
}

std::vector<double> Model::stream_scores(const Stream& s) const {
    std::vector<double> scores(static_cast<std::size_t>(vocab_));
    const Index d = cfg_.embed_dim;
    if (head_) {
        detail::matvec_into(head_->data.data(), vocab_, d, s.last_h.data(), scores.data());
    } else {
        // Tied head: item i scores against embedding row i (+1 for padding).
        const double* table = embedding_.table.weights->data.data();
        for (Index i = 0; i < vocab_; ++i) {
            scores[static_cast<std::size_t>(i)] = detail::dot_span(
                std::span<const double>(table + (i + 1) * d, static_cast<std::size_t>(d)),
                s.last_h);
        }
    }
    return scores;
}

// ---- training ----

namespace {

struct TrainInstance {
    std::vector<std::int32_t> inputs;
    std::vector<std::int32_t> targets;  // class indices (item - 1), aligned with inputs
};

std::vector<TrainInstance> training_instances(const Model& model, const SequenceDataset& data) {
    std::vector<TrainInstance> out;
    const Index max_context = model.config().max_context;
    for (const auto& u : data.users) {
        if (u.train_end < 2) {
            continue;
        }
        const auto len = static_cast<Index>(u.train_end);
        Index first = 0;
        if (len - 1 > max_context) {
            first = len - 1 - max_context;
        }
        TrainInstance inst;
        for (Index t = first; t + 1 < len; ++t) {
            inst.inputs.push_back(u.items[static_cast<std::size_t>(t)]);
            inst.targets.push_back(u.items[static_cast<std::size_t>(t + 1)] - 1);
        }
        if (!inst.inputs.empty()) {
            out.push_back(std::move(inst));
        }
    }
    return out;
}

}  // namespace

TrainResult train_epoch(const Model& model, const SequenceDataset& data, AdamState& opt,
                        int epoch_index) {
    auto instances = training_instances(model, data);
    if (instances.empty()) {
        throw DataError("no training instances: every training segment is shorter than 2");
    }
    Rng shuffle_rng = Rng(model.config().seed).fork(0x5u + static_cast<std::uint64_t>(epoch_index));
    for (std::size_t i = instances.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(shuffle_rng.uniform_index(static_cast<Index>(i)));
        std::swap(instances[i - 1], instances[j]);
    }

    const auto params = model.parameters();
    const bool per_position = model.config().targets_all;
    const int batch_size = model.config().batch_size;
    double loss_sum = 0.0;
    std::int64_t rows_total = 0;

    std::size_t cursor = 0;
    int batch_index = 0;
    while (cursor < instances.size()) {
        const std::size_t end = std::min(cursor + static_cast<std::size_t>(batch_size),
                                         instances.size());
        GradTape tape;
        std::vector<TensorPtr> loss_rows;
        std::vector<std::int32_t> loss_targets;
        for (std::size_t i = cursor; i < end; ++i) {
            const auto& inst = instances[i];
            const auto n = static_cast<Index>(inst.inputs.size());
            std::vector<std::uint8_t> valid(static_cast<std::size_t>(n), 1);
            Rng dropout_rng = Rng(model.config().seed)
                                  .fork(0xD0u)
                                  .fork(static_cast<std::uint64_t>(epoch_index))
                                  .fork(static_cast<std::uint64_t>(i));
            auto h = model.forward_sequence(inst.inputs, valid, Mode::train, dropout_rng);
            if (per_position) {
                for (Index t = 0; t < n; ++t) {
                    loss_rows.push_back(row(h, t));
                    loss_targets.push_back(inst.targets[static_cast<std::size_t>(t)]);
                }
            } else {
                loss_rows.push_back(row(h, n - 1));
                loss_targets.push_back(inst.targets.back());
            }
        }
        try {
            auto stacked = stack_rows(loss_rows);
            auto logits = matmul(stacked, transpose(model.head_matrix()));
            auto loss = softmax_cross_entropy(logits, loss_targets);
            if (!std::isfinite(loss->item())) {
                throw NumericError("loss is not finite");
            }
            tape.backward(loss);
            loss_sum += loss->item() * static_cast<double>(loss_targets.size());
            rows_total += static_cast<std::int64_t>(loss_targets.size());
        } catch (const NumericError& e) {
            throw NumericError("training diverged at batch " + std::to_string(batch_index) +
                               ": " + e.what());
        }
        model.clear_padding_grad();
        adam_step(params, opt);
        model.zero_grad();
        cursor = end;
        ++batch_index;
    }
    return {loss_sum / static_cast<double>(rows_total), rows_total};
}

void randomize_parameters(const Model& model, double weight_scale, Rng& rng) {
    for (const auto& [name, p] : model.named_parameters()) {
        const bool is_gain = name.find("gain") != std::string::npos;
        const bool is_bias =
            name.find("bias") != std::string::npos || name.find("ffn.b") != std::string::npos;
        for (auto& v : p->data) {
            if (is_gain) {
                v = 1.0 + rng.normal(0.0, 0.1);
            } else if (is_bias) {
                v = rng.normal(0.0, 0.1);
            } else {
                v = rng.normal(0.0, weight_scale);
            }
        }
    }
    // The padding embedding row stays zero.
    const auto& table = model.embedding().table;
    for (Index j = 0; j < table.dim; ++j) {
        table.weights->data[static_cast<std::size_t>(j)] = 0.0;
    }
}

std::vector<std::pair<std::string, double>> gradient_norms(const Model& model,
                                                           const SequenceDataset& data) {
    auto instances = training_instances(model, data);
    if (instances.empty()) {
        throw DataError("no training instances for the gradient report");
    }
    const std::size_t take = std::min<std::size_t>(instances.size(),
                                                   static_cast<std::size_t>(
                                                       model.config().batch_size));
    model.zero_grad();
    {
        GradTape tape;
        std::vector<TensorPtr> loss_rows;
        std::vector<std::int32_t> loss_targets;
        for (std::size_t i = 0; i < take; ++i) {
            const auto& inst = instances[i];
            const auto n = static_cast<Index>(inst.inputs.size());
            std::vector<std::uint8_t> valid(static_cast<std::size_t>(n), 1);
            Rng dropout_rng = Rng(model.config().seed).fork(0xBEEFu).fork(i);
            auto h = model.forward_sequence(inst.inputs, valid, Mode::eval, dropout_rng);
            for (Index t = 0; t < n; ++t) {
                loss_rows.push_back(row(h, t));
                loss_targets.push_back(inst.targets[static_cast<std::size_t>(t)]);
            }
        }
        auto logits = matmul(stack_rows(loss_rows), transpose(model.head_matrix()));
        auto loss = softmax_cross_entropy(logits, loss_targets);
        tape.backward(loss);
    }
    std::vector<std::pair<std::string, double>> norms;
    for (const auto& [name, p] : model.named_parameters()) {
        double sq = 0.0;
        for (std::size_t i = 0; i < p->data.size(); ++i) {
            const double g = p->grad_at(static_cast<Index>(i));
            sq += g * g;
        }
        norms.emplace_back(name, std::sqrt(sq));
    }
    model.zero_grad();
    return norms;
}

}  // namespace ttt4rec
