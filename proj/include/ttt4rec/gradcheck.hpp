#pragma once

#include "ttt4rec/tensor.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace ttt4rec {

struct GradCheckEntry {
    std::string name;
    double max_rel_error{0.0};
    bool passed{true};
};

struct GradCheckReport {
    double tolerance{1e-4};
    double step{1e-5};
    std::vector<GradCheckEntry> entries;

    bool passed() const;
    double worst() const;
};

// Compares tape gradients of loss() against central finite differences, one
// coordinate at a time, for each listed parameter. loss() must rebuild its
// graph from the parameters on every call; it is invoked once under a tape
// and then 2*numel times per parameter without one. Per-coordinate error is
// |g_ad - g_fd| / (|g_fd| + 1e-8). Report-only: never throws on mismatch.
GradCheckReport finite_diff_check(const std::function<TensorPtr()>& loss,
                                  std::span<const std::pair<std::string, TensorPtr>> params,
                                  double tolerance = 1e-4, double step = 1e-5);

}  // namespace ttt4rec
