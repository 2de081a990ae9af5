#include "ttt4rec/ttt_layer.hpp"

#include <cmath>

namespace ttt4rec {

std::vector<TensorPtr> TTTState::tensors() const {
    if (kind == InnerKind::linear) {
        return {linear_map};
    }
    return {mlp_hidden, mlp_readout};
}

bool TTTState::finite() const {
    for (const auto& t : tensors()) {
        for (double v : t->data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
    }
    return true;
}

TTTState make_linear_state(Index dim) {
    TTTState s;
    s.kind = InnerKind::linear;
    s.linear_map = zeros(Shape{dim, dim}, true);
    return s;
}

TTTState make_mlp_state(Index dim, Index hidden, Rng& rng) {
    TTTState s;
    s.kind = InnerKind::mlp;
    s.mlp_hidden = randn(Shape{hidden, dim}, 0.0, 0.02, rng, true);
    s.mlp_readout = randn(Shape{dim, hidden}, 0.0, 0.02, rng, true);
    return s;
}

Views project_views(const TensorPtr& x, const ViewProjections& proj) {
    const bool seq = x->shape.size() == 2;
    auto apply = [&](const TensorPtr& m) {
        return seq ? matmul(x, transpose(m)) : matvec(m, x);
    };
    Views v;
    if (proj.shared()) {
        v.key = apply(proj.shared_kq);
        v.query = v.key;
    } else {
        v.key = apply(proj.key);
        v.query = apply(proj.query);
    }
    v.value = apply(proj.value);
    return v;
}

TensorPtr inner_predict(const TensorPtr& key_view, const TTTState& state) {
    if (state.kind == InnerKind::linear) {
        return matvec(state.linear_map, key_view);
    }
    return matvec(state.mlp_readout, gelu(matvec(state.mlp_hidden, key_view)));
}

TensorPtr inner_loss(const TensorPtr& key_view, const TensorPtr& value_view,
                     const TTTState& state) {
    auto residual = sub(inner_predict(key_view, state), value_view);
    return dot(residual, residual);
}

namespace {

// One gradient step on the reconstruction loss, sharing the residual between
// the reported loss and the update. Both mlp factors step from their
// pre-update values, matching the gradient taken at the incoming state.
TTTState step_from_residual(const TensorPtr& key_view, const TensorPtr& value_view,
                            const TTTState& state, double learning_rate, double* loss_out) {
    TTTState next = state;
    const double step = 2.0 * learning_rate;
    TensorPtr residual;
    if (state.kind == InnerKind::linear) {
        // grad = 2 (W k - v) kᵀ
        residual = sub(matvec(state.linear_map, key_view), value_view);
        next.linear_map = sub(state.linear_map, scale(outer(residual, key_view), step));
    } else {
        // f(k) = W2 gelu(W1 k)
        auto pre = matvec(state.mlp_hidden, key_view);
        auto activated = gelu(pre);
        residual = sub(matvec(state.mlp_readout, activated), value_view);
        auto back = mul(matvec_t(state.mlp_readout, residual), gelu_prime(pre));
        next.mlp_readout = sub(state.mlp_readout, scale(outer(residual, activated), step));
        next.mlp_hidden = sub(state.mlp_hidden, scale(outer(back, key_view), step));
    }
    if (loss_out) {
        double loss = 0.0;
        for (double rv : residual->data) {
            loss += rv * rv;
        }
        *loss_out = loss;
    }
    return next;
}

}  // namespace

TTTState inner_step(const TensorPtr& key_view, const TensorPtr& value_view,
                    const TTTState& state, double learning_rate) {
    return step_from_residual(key_view, value_view, state, learning_rate, nullptr);
}

ScanResult ttt_scan(const TensorPtr& keys, const TensorPtr& values, const TensorPtr& queries,
                    const TTTState& initial, const InnerLoopConfig& cfg,
                    std::span<const std::uint8_t> valid) {
    if (keys->shape != values->shape || keys->shape != queries->shape) {
        throw ShapeError("ttt_scan: view shapes disagree: " + shape_str(keys->shape) + ", " +
                         shape_str(values->shape) + ", " + shape_str(queries->shape));
    }
    if (keys->shape.size() != 2) {
        throw ShapeError("ttt_scan: expected sequence views, got " + shape_str(keys->shape));
    }
    const Index n = keys->shape[0];
    const Index d = keys->shape[1];
    if (static_cast<Index>(valid.size()) != n) {
        throw ShapeError("ttt_scan: mask length does not match sequence length");
    }
    if (cfg.learning_rate < 0.0) {
        throw ConfigError("ttt_scan: inner learning rate must be >= 0");
    }

    ScanResult result;
    result.step_losses.assign(static_cast<std::size_t>(n), 0.0);
    TTTState state = initial;
    std::vector<TensorPtr> out_rows(static_cast<std::size_t>(n));
    const bool check = finite_checks_enabled();

    for (Index t = 0; t < n; ++t) {
        if (!valid[static_cast<std::size_t>(t)]) {
            // State carries through unchanged; the position emits zeros.
            out_rows[static_cast<std::size_t>(t)] = zeros(Shape{d});
            continue;
        }
        try {
            auto k = row(keys, t);
            auto v = row(values, t);
            auto q = row(queries, t);
            double loss = 0.0;
            if (cfg.learning_rate > 0.0) {
                state = step_from_residual(k, v, state, cfg.learning_rate, &loss);
                if (check && !state.finite()) {
                    throw NumericError("inner state is not finite");
                }
            } else {
                auto residual = sub(inner_predict(k, state), v);
                for (double rv : residual->data) {
                    loss += rv * rv;
                }
            }
            result.step_losses[static_cast<std::size_t>(t)] = loss;
            out_rows[static_cast<std::size_t>(t)] = inner_predict(q, state);
        } catch (const NumericError& e) {
            throw NumericError("inner update diverged at token " + std::to_string(t) + ": " +
                               e.what());
        }
    }

    result.outputs = stack_rows(out_rows);
    result.final_state = state;
    return result;
}

}  // namespace ttt4rec
