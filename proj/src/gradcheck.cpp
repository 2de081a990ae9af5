#include "ttt4rec/gradcheck.hpp"

#include <cmath>

namespace ttt4rec {

bool GradCheckReport::passed() const {
    for (const auto& e : entries) {
        if (!e.passed) {
            return false;
        }
    }
    return true;
}

double GradCheckReport::worst() const {
    double w = 0.0;
    for (const auto& e : entries) {
        w = std::max(w, e.max_rel_error);
    }
    return w;
}

GradCheckReport finite_diff_check(const std::function<TensorPtr()>& loss,
                                  std::span<const std::pair<std::string, TensorPtr>> params,
                                  double tolerance, double step) {
    GradCheckReport report;
    report.tolerance = tolerance;
    report.step = step;

    // Analytic pass.
    std::vector<std::vector<double>> analytic;
    {
        for (const auto& [name, p] : params) {
            p->zero_grad();
        }
        GradTape tape;
        auto out = loss();
        tape.backward(out);
        for (const auto& [name, p] : params) {
            analytic.push_back(p->grad);
        }
    }

    // Central differences, one coordinate at a time.
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& [name, p] = params[pi];
        GradCheckEntry entry;
        entry.name = name;
        for (std::size_t i = 0; i < p->data.size(); ++i) {
            const double saved = p->data[i];
            p->data[i] = saved + step;
            const double up = loss()->item();
            p->data[i] = saved - step;
            const double down = loss()->item();
            p->data[i] = saved;
            const double fd = (up - down) / (2.0 * step);
            const double ad = analytic[pi][i];
            const double rel = std::abs(ad - fd) / (std::abs(fd) + 1e-8);
            entry.max_rel_error = std::max(entry.max_rel_error, rel);
        }
        entry.passed = entry.max_rel_error <= tolerance;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace ttt4rec
