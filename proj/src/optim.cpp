#include "ttt4rec/optim.hpp"

#include <cmath>

namespace ttt4rec {

AdamState::AdamState(std::span<const TensorPtr> params, double lr) : learning_rate(lr) {
    first_moment.reserve(params.size());
    second_moment.reserve(params.size());
    for (const auto& p : params) {
        first_moment.emplace_back(p->data.size(), 0.0);
        second_moment.emplace_back(p->data.size(), 0.0);
    }
}

void adam_step(std::span<const TensorPtr> params, AdamState& state) {
    if (params.size() != state.first_moment.size()) {
        throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters vs " +
                         std::to_string(state.first_moment.size()) + " moment slots");
    }
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& p = params[pi];
        auto& m = state.first_moment[pi];
        auto& v = state.second_moment[pi];
        if (m.size() != p->data.size()) {
            throw ShapeError("adam_step: moment shape does not match parameter " +
                             shape_str(p->shape));
        }
        for (std::size_t i = 0; i < p->data.size(); ++i) {
            const double g = p->grad_at(static_cast<Index>(i));
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            p->data[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

}  // namespace ttt4rec
