#pragma once

#include "ttt4rec/common.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ttt4rec {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major tensor of doubles. Gradients live beside the values and
// are filled in by GradTape::backward; `grad` stays empty until the tensor
// is touched by a backward pass or zero_grad.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad{false};
    std::vector<double> grad;

    Tensor(Shape s, std::vector<double> d, bool req);

    Index size() const { return static_cast<Index>(data.size()); }
    Index rows() const { return shape.empty() ? 1 : shape.front(); }
    Index cols() const { return shape.empty() ? 1 : shape.back(); }
    double item() const;

    void ensure_grad();
    void zero_grad();
    void accum_grad(std::span<const double> g);
    double grad_at(Index i) const {
        return grad.empty() ? 0.0 : grad[static_cast<std::size_t>(i)];
    }
};

TensorPtr make_tensor(Shape shape, std::vector<double> data, bool requires_grad = false);
TensorPtr zeros(Shape shape, bool requires_grad = false);
TensorPtr full(Shape shape, double value, bool requires_grad = false);
TensorPtr scalar_tensor(double value, bool requires_grad = false);
TensorPtr randn(const Shape& shape, double mean, double stdev, Rng& rng,
                bool requires_grad = false);

namespace detail {

bool taping();
// Register a custom differentiable op on the active tape. `backward` reads
// output->grad (never empty when invoked) and accumulates into input grads.
void record_op(const char* name, std::vector<TensorPtr> inputs, TensorPtr output,
               std::function<void()> backward);
void check_finite(const char* op, const Tensor& t);
bool any_requires_grad(std::initializer_list<TensorPtr> inputs);

}  // namespace detail

// Records every differentiable op executed while active on this thread.
// backward replays the records once, in reverse execution order, which is a
// reverse topological order of the DAG since inputs always precede their
// consumers. A tape is consumed by backward and cannot be replayed twice.
class GradTape {
public:
    GradTape();
    ~GradTape();
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    void backward(const TensorPtr& output);  // scalar outputs, seed 1
    void backward(const TensorPtr& output, std::span<const double> seed);

    std::size_t op_count() const { return records_.size(); }

private:
    friend void detail::record_op(const char*, std::vector<TensorPtr>, TensorPtr,
                                  std::function<void()>);
    struct Record {
        const char* op;
        std::vector<TensorPtr> inputs;
        TensorPtr output;
        std::function<void()> backward;
    };
    std::vector<Record> records_;
    GradTape* previous_{nullptr};
    bool consumed_{false};
};

// ---- differentiable operations ----

TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double factor);
TensorPtr add_scalar(const TensorPtr& a, double value);
TensorPtr sum_all(const TensorPtr& a);
TensorPtr dot(const TensorPtr& a, const TensorPtr& b);
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr matvec(const TensorPtr& a, const TensorPtr& x);    // A·x
TensorPtr matvec_t(const TensorPtr& a, const TensorPtr& y);  // Aᵀ·y
TensorPtr outer(const TensorPtr& u, const TensorPtr& v);
TensorPtr transpose(const TensorPtr& a);
TensorPtr row(const TensorPtr& x, Index r);
TensorPtr stack_rows(std::span<const TensorPtr> rows);
TensorPtr mask_rows(const TensorPtr& x, std::span<const std::uint8_t> keep);
TensorPtr gather_rows(const TensorPtr& table, std::span<const std::int32_t> indices);
TensorPtr add_row_broadcast(const TensorPtr& x, const TensorPtr& bias);
TensorPtr gelu(const TensorPtr& x);
// First derivative of gelu, itself differentiable (used by closed-form
// inner-loop updates).
TensorPtr gelu_prime(const TensorPtr& x);
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     double eps = 1e-5);
// Mean over rows of -log softmax(logits)[target], max-stabilized.
TensorPtr softmax_cross_entropy(const TensorPtr& logits,
                                std::span<const std::int32_t> targets);
// Per-channel causal convolution; out[t] = sum_j kernel[j]*x[t-k+1+j], zeros
// outside the sequence, so no position ever reads the future.
TensorPtr causal_depthwise_conv1d(const TensorPtr& x, const TensorPtr& kernel);
// Inverted dropout with explicit RNG; identity when !training or rate == 0.
TensorPtr dropout(const TensorPtr& x, double rate, Rng& rng, bool training);

// Plain numeric helper (no graph participation).
std::vector<double> softmax(std::span<const double> logits);

}  // namespace ttt4rec
