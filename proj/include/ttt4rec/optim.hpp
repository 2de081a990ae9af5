#pragma once

#include "ttt4rec/tensor.hpp"

#include <span>
#include <vector>

namespace ttt4rec {

// Bias-corrected Adam. One state covers a fixed parameter list; the moment
// buffers are sized from the parameters at construction and must keep
// matching them on every step.
struct AdamState {
    double learning_rate{0.001};
    double beta1{0.9};
    double beta2{0.999};
    double eps{1e-8};
    std::int64_t step_count{0};
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;

    AdamState() = default;
    explicit AdamState(std::span<const TensorPtr> params, double learning_rate = 0.001);
};

// Applies one update using each parameter's accumulated .grad (an empty grad
// reads as zero). Increments the step counter.
void adam_step(std::span<const TensorPtr> params, AdamState& state);

}  // namespace ttt4rec
