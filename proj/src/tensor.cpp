#include "ttt4rec/tensor.hpp"

#include "kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <utility>

namespace ttt4rec {

namespace {

std::atomic<bool> g_finite_checks{true};
thread_local GradTape* t_active_tape = nullptr;

}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

std::int64_t Rng::uniform_index(std::int64_t n) {
    if (n <= 0) {
        throw Error("uniform_index: n must be positive");
    }
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
}

double Rng::normal(double mean, double stdev) {
    // Box-Muller, single sample per call.
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    return mean + stdev * r * std::cos(6.283185307179586476925286766559 * u2);
}

Rng Rng::fork(std::uint64_t stream) const {
    Rng mix(state_ ^ (0x9e3779b97f4a7c15ull * (stream + 1)));
    mix.next_u64();
    return Rng(mix.next_u64());
}

Index numel(const Shape& shape) {
    Index n = 1;
    for (Index d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            os << 'x';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d, bool req)
    : shape(std::move(s)), data(std::move(d)), requires_grad(req) {
    for (Index dim : shape) {
        if (dim <= 0) {
            throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
    }
    if (numel(shape) != static_cast<Index>(data.size())) {
        throw ShapeError("shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data.size()));
    }
}

double Tensor::item() const {
    if (size() != 1) {
        throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape));
    }
    return data[0];
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) {
        grad.assign(data.size(), 0.0);
    }
}

void Tensor::zero_grad() {
    grad.assign(data.size(), 0.0);
}

void Tensor::accum_grad(std::span<const double> g) {
    if (g.size() != data.size()) {
        throw ShapeError("gradient length " + std::to_string(g.size()) +
                         " does not match tensor of size " + std::to_string(data.size()));
    }
    ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
        grad[i] += g[i];
    }
}

TensorPtr make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

TensorPtr zeros(Shape shape, bool requires_grad) {
    const Index n = numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                       requires_grad);
}

TensorPtr full(Shape shape, double value, bool requires_grad) {
    const Index n = numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
                       requires_grad);
}

TensorPtr scalar_tensor(double value, bool requires_grad) {
    return make_tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

TensorPtr randn(const Shape& shape, double mean, double stdev, Rng& rng, bool requires_grad) {
    const Index n = numel(shape);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (auto& v : d) {
        v = rng.normal(mean, stdev);
    }
    return make_tensor(shape, std::move(d), requires_grad);
}

// ---- tape ----

GradTape::GradTape() {
    previous_ = t_active_tape;
    t_active_tape = this;
}

GradTape::~GradTape() {
    t_active_tape = previous_;
}

void GradTape::backward(const TensorPtr& output) {
    if (!output || output->size() != 1) {
        throw ShapeError("backward requires a scalar output" +
                         (output ? (", got " + shape_str(output->shape)) : std::string()));
    }
    const double one = 1.0;
    backward(output, std::span<const double>(&one, 1));
}

void GradTape::backward(const TensorPtr& output, std::span<const double> seed) {
    if (consumed_) {
        throw Error("tape already consumed by a previous backward pass");
    }
    if (!output) {
        throw Error("backward requires an output tensor");
    }
    if (static_cast<Index>(seed.size()) != output->size()) {
        throw ShapeError("backward seed length does not match output size");
    }
    consumed_ = true;
    output->accum_grad(seed);
    // Reverse replay: one visit per recorded node. Records whose output never
    // received a gradient lie off every path to the seed and propagate nothing.
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        if (!it->output->grad.empty()) {
            it->backward();
        }
        // Release the record's graph references as we go so peak memory decays
        // during the pass.
        it->backward = nullptr;
        it->inputs.clear();
        it->output.reset();
    }
    records_.clear();
}

namespace detail {

bool taping() { return t_active_tape != nullptr; }

void record_op(const char* name, std::vector<TensorPtr> inputs, TensorPtr output,
               std::function<void()> backward) {
    GradTape* tape = t_active_tape;
    if (!tape) {
        return;
    }
    tape->records_.push_back(
        GradTape::Record{name, std::move(inputs), std::move(output), std::move(backward)});
}

void check_finite(const char* op, const Tensor& t) {
    if (!finite_checks_enabled()) {
        return;
    }
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

bool any_requires_grad(std::initializer_list<TensorPtr> inputs) {
    if (!taping()) {
        return false;
    }
    for (const auto& t : inputs) {
        if (t && t->requires_grad) {
            return true;
        }
    }
    return false;
}

}  // namespace detail

// ---- elementwise ----

static void require_same_shape(const char* op, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) {
        throw ShapeError(std::string(op) + ": shapes disagree: " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    }
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape("add", a, b);
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = a->data[i] + b->data[i];
    }
    auto out = make_tensor(a->shape, std::move(d),
                           detail::any_requires_grad({a, b}));
    detail::check_finite("add", *out);
    if (out->requires_grad) {
        detail::record_op("add", {a, b}, out, [a, b, o = out.get()]() {
            if (a->requires_grad) {
                a->accum_grad(o->grad);
            }
            if (b->requires_grad) {
                b->accum_grad(o->grad);
            }
        });
    }
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape("sub", a, b);
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = a->data[i] - b->data[i];
    }
    auto out = make_tensor(a->shape, std::move(d), detail::any_requires_grad({a, b}));
    detail::check_finite("sub", *out);
    if (out->requires_grad) {
        detail::record_op("sub", {a, b}, out, [a, b, o = out.get()]() {
            if (a->requires_grad) {
                a->accum_grad(o->grad);
            }
            if (b->requires_grad) {
                std::vector<double> g(o->grad.size());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] = -o->grad[i];
                }
                b->accum_grad(g);
            }
        });
    }
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape("mul", a, b);
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = a->data[i] * b->data[i];
    }
    auto out = make_tensor(a->shape, std::move(d), detail::any_requires_grad({a, b}));
    detail::check_finite("mul", *out);
    if (out->requires_grad) {
        detail::record_op("mul", {a, b}, out, [a, b, o = out.get()]() {
            if (a->requires_grad) {
                std::vector<double> g(o->grad.size());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] = o->grad[i] * b->data[i];
                }
                a->accum_grad(g);
            }
            if (b->requires_grad) {
                std::vector<double> g(o->grad.size());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] = o->grad[i] * a->data[i];
                }
                b->accum_grad(g);
            }
        });
    }
    return out;
}

TensorPtr scale(const TensorPtr& a, double factor) {
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = a->data[i] * factor;
    }
    auto out = make_tensor(a->shape, std::move(d), detail::any_requires_grad({a}));
    detail::check_finite("scale", *out);
    if (out->requires_grad) {
        detail::record_op("scale", {a}, out, [a, factor, o = out.get()]() {
            std::vector<double> g(o->grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] = o->grad[i] * factor;
            }
            a->accum_grad(g);
        });
    }
    return out;
}

TensorPtr add_scalar(const TensorPtr& a, double value) {
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = a->data[i] + value;
    }
    auto out = make_tensor(a->shape, std::move(d), detail::any_requires_grad({a}));
    detail::check_finite("add_scalar", *out);
    if (out->requires_grad) {
        detail::record_op("add_scalar", {a}, out,
                          [a, o = out.get()]() { a->accum_grad(o->grad); });
    }
    return out;
}

TensorPtr sum_all(const TensorPtr& a) {
    double s = 0.0;
    for (double v : a->data) {
        s += v;
    }
    auto out = make_tensor(Shape{}, {s}, detail::any_requires_grad({a}));
    detail::check_finite("sum_all", *out);
    if (out->requires_grad) {
        detail::record_op("sum_all", {a}, out, [a, o = out.get()]() {
            std::vector<double> g(a->data.size(), o->grad[0]);
            a->accum_grad(g);
        });
    }
    return out;
}

TensorPtr dot(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape("dot", a, b);
    const double s = detail::dot_span(a->data, b->data);
    auto out = make_tensor(Shape{}, {s}, detail::any_requires_grad({a, b}));
    detail::check_finite("dot", *out);
    if (out->requires_grad) {
        detail::record_op("dot", {a, b}, out, [a, b, o = out.get()]() {
            const double go = o->grad[0];
            if (a->requires_grad) {
                std::vector<double> g(a->data.size());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] = go * b->data[i];
                }
                a->accum_grad(g);
            }
            if (b->requires_grad) {
                std::vector<double> g(b->data.size());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] = go * a->data[i];
                }
                b->accum_grad(g);
            }
        });
    }
    return out;
}

// ---- linear algebra ----

static void require_rank2(const char* op, const TensorPtr& t) {
    if (t->shape.size() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t->shape));
    }
}

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    require_rank2("matmul", a);
    require_rank2("matmul", b);
    const Index m = a->shape[0];
    const Index k = a->shape[1];
    const Index n = b->shape[1];
    if (b->shape[0] != k) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a->shape) + " x " +
                         shape_str(b->shape));
    }
    std::vector<double> d(static_cast<std::size_t>(m * n));
    for (Index i = 0; i < m; ++i) {
        const double* arow = a->data.data() + i * k;
        for (Index j = 0; j < n; ++j) {
            double acc = 0.0;
            for (Index p = 0; p < k; ++p) {
                acc += arow[p] * b->data[static_cast<std::size_t>(p * n + j)];
            }
            d[static_cast<std::size_t>(i * n + j)] = acc;
        }
    }
    auto out = make_tensor(Shape{m, n}, std::move(d), detail::any_requires_grad({a, b}));
    detail::check_finite("matmul", *out);
    if (out->requires_grad) {
        detail::record_op("matmul", {a, b}, out, [a, b, m, k, n, o = out.get()]() {
            // dA = dC·Bᵀ, dB = Aᵀ·dC
            if (a->requires_grad) {
                std::vector<double> g(a->data.size(), 0.0);
                for (Index i = 0; i < m; ++i) {
                    for (Index p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (Index j = 0; j < n; ++j) {
                            acc += o->grad[static_cast<std::size_t>(i * n + j)] *
                                   b->data[static_cast<std::size_t>(p * n + j)];
                        }
                        g[static_cast<std::size_t>(i * k + p)] = acc;
                    }
                }
                a->accum_grad(g);
            }
            if (b->requires_grad) {
                std::vector<double> g(b->data.size(), 0.0);
                for (Index p = 0; p < k; ++p) {
                    for (Index j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (Index i = 0; i < m; ++i) {
                            acc += a->data[static_cast<std::size_t>(i * k + p)] *
                                   o->grad[static_cast<std::size_t>(i * n + j)];
                        }
                        g[static_cast<std::size_t>(p * n + j)] = acc;
                    }
                }
                b->accum_grad(g);
            }
        });
    }
    return out;
}

static void require_vector(const char* op, const TensorPtr& t) {
    if (t->shape.size() != 1) {
        throw ShapeError(std::string(op) + ": expected a vector, got " + shape_str(t->shape));
    }
}

TensorPtr matvec(const TensorPtr& a, const TensorPtr& x) {
    require_rank2("matvec", a);
    require_vector("matvec", x);
    const Index m = a->shape[0];
    const Index n = a->shape[1];
    if (x->shape[0] != n) {
        throw ShapeError("matvec: shapes disagree: " + shape_str(a->shape) + " x " +
                         shape_str(x->shape));
    }
    std::vector<double> d(static_cast<std::size_t>(m));
    detail::matvec_into(a->data.data(), m, n, x->data.data(), d.data());
    auto out = make_tensor(Shape{m}, std::move(d), detail::any_requires_grad({a, x}));
    detail::check_finite("matvec", *out);
    if (out->requires_grad) {
        detail::record_op("matvec", {a, x}, out, [a, x, m, n, o = out.get()]() {
            if (a->requires_grad) {
                std::vector<double> g(a->data.size());
                for (Index i = 0; i < m; ++i) {
                    const double gi = o->grad[static_cast<std::size_t>(i)];
                    for (Index j = 0; j < n; ++j) {
                        g[static_cast<std::size_t>(i * n + j)] =
                            gi * x->data[static_cast<std::size_t>(j)];
                    }
                }
                a->accum_grad(g);
            }
            if (x->requires_grad) {
                std::vector<double> g(static_cast<std::size_t>(n));
                detail::matvec_t_into(a->data.data(), m, n, o->grad.data(), g.data());
                x->accum_grad(g);
            }
        });
    }
    return out;
}

TensorPtr matvec_t(const TensorPtr& a, const TensorPtr& y) {
    require_rank2("matvec_t", a);
    require_vector("matvec_t", y);
    const Index m = a->shape[0];
    const Index n = a->shape[1];
    if (y->shape[0] != m) {
        throw ShapeError("matvec_t: shapes disagree: " + shape_str(a->shape) + " vs " +
                         shape_str(y->shape));
    }
    std::vector<double> d(static_cast<std::size_t>(n));
    detail::matvec_t_into(a->data.data(), m, n, y->data.data(), d.data());
    auto out = make_tensor(Shape{n}, std::move(d), detail::any_requires_grad({a, y}));
    detail::check_finite("matvec_t", *out);
    if (out->requires_grad) {
        detail::record_op("matvec_t", {a, y}, out, [a, y, m, n, o = out.get()]() {
            if (a->requires_grad) {
                std::vector<double> g(a->data.size());
                for (Index i = 0; i < m; ++i) {
                    const double yi = y->data[static_cast<std::size_t>(i)];
                    for (Index j = 0; j < n; ++j) {
                        g[static_cast<std::size_t>(i * n + j)] =
                            yi * o->grad[static_cast<std::size_t>(j)];
                    }
                }
                a->accum_grad(g);
            }
            if (y->requires_grad) {
                std::vector<double> g(static_cast<std::size_t>(m));
                detail::matvec_into(a->data.data(), m, n, o->grad.data(), g.data());
                y->accum_grad(g);
            }
        });
    }
    return out;
}

TensorPtr outer(const TensorPtr& u, const TensorPtr& v) {
    require_vector("outer", u);
    require_vector("outer", v);
    const Index m = u->shape[0];
    const Index n = v->shape[0];
    std::vector<double> d(static_cast<std::size_t>(m * n));
    for (Index i = 0; i < m; ++i) {
        const double ui = u->data[static_cast<std::size_t>(i)];
        for (Index j = 0; j < n; ++j) {
            d[static_cast<std::size_t>(i * n + j)] = ui * v->data[static_cast<std::size_t>(j)];
        }
    }
    auto out = make_tensor(Shape{m, n}, std::move(d), detail::any_requires_grad({u, v}));
    detail::check_finite("outer", *out);
    if (out->requires_grad) {
        detail::record_op("outer", {u, v}, out, [u, v, m, n, o = out.get()]() {
            if (u->requires_grad) {
                std::vector<double> g(static_cast<std::size_t>(m));
                detail::matvec_into(o->grad.data(), m, n, v->data.data(), g.data());
                u->accum_grad(g);
            }
            if (v->requires_grad) {
                std::vector<double> g(static_cast<std::size_t>(n));
                detail::matvec_t_into(o->grad.data(), m, n, u->data.data(), g.data());
                v->accum_grad(g);
            }
        });
    }
    return out;
}

TensorPtr transpose(const TensorPtr& a) {
    require_rank2("transpose", a);
    const Index m = a->shape[0];
    const Index n = a->shape[1];
    std::vector<double> d(a->data.size());
    for (Index i = 0; i < m; ++i) {
        for (Index j = 0; j < n; ++j) {
            d[static_cast<std::size_t>(j * m + i)] = a->data[static_cast<std::size_t>(i * n + j)];
        }
    }
    auto out = make_tensor(Shape{n, m}, std::move(d), detail::any_requires_grad({a}));
    if (out->requires_grad) {
        detail::record_op("transpose", {a}, out, [a, m, n, o = out.get()]() {
            std::vector<double> g(a->data.size());
            for (Index i = 0; i < m; ++i) {
                for (Index j = 0; j < n; ++j) {
                    g[static_cast<std::size_t>(i * n + j)] =
                        o->grad[static_cast<std::size_t>(j * m + i)];
                }
            }
            a->accum_grad(g);
        });
    }
    return out;
}

// ---- structural ops ----

TensorPtr row(const TensorPtr& x, Index r) {
    require_rank2("row", x);
    const Index n = x->shape[0];
    const Index d = x->shape[1];
    if (r < 0 || r >= n) {
        throw ShapeError("row: index " + std::to_string(r) + " out of range for " +
                         shape_str(x->shape));
    }
    std::vector<double> out_d(x->data.begin() + r * d, x->data.begin() + (r + 1) * d);
    auto out = make_tensor(Shape{d}, std::move(out_d), detail::any_requires_grad({x}));
    if (out->requires_grad) {
        detail::record_op("row", {x}, out, [x, r, d, o = out.get()]() {
            x->ensure_grad();
            for (Index j = 0; j < d; ++j) {
                x->grad[static_cast<std::size_t>(r * d + j)] +=
                    o->grad[static_cast<std::size_t>(j)];
            }
        });
    }
    return out;
}

TensorPtr stack_rows(std::span<const TensorPtr> rows) {
    if (rows.empty()) {
        throw ShapeError("stack_rows: need at least one row");
    }
    const Index d = rows[0]->size();
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(d) * rows.size());
    bool req = false;
    for (const auto& r : rows) {
        if (r->shape.size() != 1 || r->size() != d) {
            throw ShapeError("stack_rows: inconsistent row shapes");
        }
        data.insert(data.end(), r->data.begin(), r->data.end());
        req = req || r->requires_grad;
    }
    req = req && detail::taping();
    auto out = make_tensor(Shape{static_cast<Index>(rows.size()), d}, std::move(data), req);
    if (req) {
        std::vector<TensorPtr> inputs(rows.begin(), rows.end());
        auto captured = inputs;
        detail::record_op("stack_rows", std::move(inputs), out,
                          [captured = std::move(captured), d, o = out.get()]() {
                              for (std::size_t r = 0; r < captured.size(); ++r) {
                                  const auto& t = captured[r];
                                  if (!t->requires_grad) {
                                      continue;
                                  }
                                  t->accum_grad(std::span<const double>(
                                      o->grad.data() + r * static_cast<std::size_t>(d),
                                      static_cast<std::size_t>(d)));
                              }
                          });
    }
    return out;
}

TensorPtr mask_rows(const TensorPtr& x, std::span<const std::uint8_t> keep) {
    require_rank2("mask_rows", x);
    const Index n = x->shape[0];
    const Index d = x->shape[1];
    if (static_cast<Index>(keep.size()) != n) {
        throw ShapeError("mask_rows: mask length " + std::to_string(keep.size()) +
                         " does not match rows of " + shape_str(x->shape));
    }
    std::vector<double> out_d(x->data.size(), 0.0);
    for (Index t = 0; t < n; ++t) {
        if (keep[static_cast<std::size_t>(t)]) {
            std::copy(x->data.begin() + t * d, x->data.begin() + (t + 1) * d,
                      out_d.begin() + t * d);
        }
    }
    auto out = make_tensor(x->shape, std::move(out_d), detail::any_requires_grad({x}));
    if (out->requires_grad) {
        std::vector<std::uint8_t> mask(keep.begin(), keep.end());
        detail::record_op("mask_rows", {x}, out,
                          [x, mask = std::move(mask), n, d, o = out.get()]() {
                              std::vector<double> g(x->data.size(), 0.0);
                              for (Index t = 0; t < n; ++t) {
                                  if (!mask[static_cast<std::size_t>(t)]) {
                                      continue;
                                  }
                                  for (Index j = 0; j < d; ++j) {
                                      g[static_cast<std::size_t>(t * d + j)] =
                                          o->grad[static_cast<std::size_t>(t * d + j)];
                                  }
                              }
                              x->accum_grad(g);
                          });
    }
    return out;
}

TensorPtr gather_rows(const TensorPtr& table, std::span<const std::int32_t> indices) {
    require_rank2("gather_rows", table);
    const Index rows_in = table->shape[0];
    const Index d = table->shape[1];
    std::vector<double> data(indices.size() * static_cast<std::size_t>(d));
    for (std::size_t t = 0; t < indices.size(); ++t) {
        const Index r = indices[t];
        if (r < 0 || r >= rows_in) {
            throw ShapeError("gather_rows: index " + std::to_string(r) +
                             " out of range for table " + shape_str(table->shape));
        }
        std::copy(table->data.begin() + r * d, table->data.begin() + (r + 1) * d,
                  data.begin() + static_cast<Index>(t) * d);
    }
    auto out = make_tensor(Shape{static_cast<Index>(indices.size()), d}, std::move(data),
                           detail::any_requires_grad({table}));
    if (out->requires_grad) {
        std::vector<std::int32_t> idx(indices.begin(), indices.end());
        detail::record_op("gather_rows", {table}, out,
                          [table, idx = std::move(idx), d, o = out.get()]() {
                              table->ensure_grad();
                              for (std::size_t t = 0; t < idx.size(); ++t) {
                                  const Index r = idx[t];
                                  for (Index j = 0; j < d; ++j) {
                                      table->grad[static_cast<std::size_t>(r * d + j)] +=
                                          o->grad[t * static_cast<std::size_t>(d) +
                                                  static_cast<std::size_t>(j)];
                                  }
                              }
                          });
    }
    return out;
}

TensorPtr add_row_broadcast(const TensorPtr& x, const TensorPtr& bias) {
    require_rank2("add_row_broadcast", x);
    require_vector("add_row_broadcast", bias);
    const Index n = x->shape[0];
    const Index d = x->shape[1];
    if (bias->shape[0] != d) {
        throw ShapeError("add_row_broadcast: bias " + shape_str(bias->shape) +
                         " does not match columns of " + shape_str(x->shape));
    }
    std::vector<double> out_d(x->data.size());
    for (Index t = 0; t < n; ++t) {
        for (Index j = 0; j < d; ++j) {
            out_d[static_cast<std::size_t>(t * d + j)] =
                x->data[static_cast<std::size_t>(t * d + j)] +
                bias->data[static_cast<std::size_t>(j)];
        }
    }
    auto out = make_tensor(x->shape, std::move(out_d), detail::any_requires_grad({x, bias}));
    detail::check_finite("add_row_broadcast", *out);
    if (out->requires_grad) {
        detail::record_op("add_row_broadcast", {x, bias}, out, [x, bias, n, d, o = out.get()]() {
            if (x->requires_grad) {
                x->accum_grad(o->grad);
            }
            if (bias->requires_grad) {
                std::vector<double> g(static_cast<std::size_t>(d), 0.0);
                for (Index t = 0; t < n; ++t) {
                    for (Index j = 0; j < d; ++j) {
                        g[static_cast<std::size_t>(j)] +=
                            o->grad[static_cast<std::size_t>(t * d + j)];
                    }
                }
                bias->accum_grad(g);
            }
        });
    }
    return out;
}

// ---- nonlinearities and norms ----

TensorPtr gelu(const TensorPtr& x) {
    std::vector<double> d(x->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = detail::gelu_scalar(x->data[i]);
    }
    auto out = make_tensor(x->shape, std::move(d), detail::any_requires_grad({x}));
    detail::check_finite("gelu", *out);
    if (out->requires_grad) {
        detail::record_op("gelu", {x}, out, [x, o = out.get()]() {
            std::vector<double> g(o->grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] = o->grad[i] * detail::gelu_prime_scalar(x->data[i]);
            }
            x->accum_grad(g);
        });
    }
    return out;
}

TensorPtr gelu_prime(const TensorPtr& x) {
    std::vector<double> d(x->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = detail::gelu_prime_scalar(x->data[i]);
    }
    auto out = make_tensor(x->shape, std::move(d), detail::any_requires_grad({x}));
    detail::check_finite("gelu_prime", *out);
    if (out->requires_grad) {
        detail::record_op("gelu_prime", {x}, out, [x, o = out.get()]() {
            std::vector<double> g(o->grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] = o->grad[i] * detail::gelu_second_scalar(x->data[i]);
            }
            x->accum_grad(g);
        });
    }
    return out;
}

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     double eps) {
    if (eps <= 0.0) {
        throw ConfigError("layer_norm: eps must be positive");
    }
    require_vector("layer_norm", gain);
    require_vector("layer_norm", bias);
    if (x->shape.empty()) {
        throw ShapeError("layer_norm: input must have at least one axis");
    }
    const Index d = x->shape.back();
    if (gain->shape[0] != d || bias->shape[0] != d) {
        throw ShapeError("layer_norm: feature size " + std::to_string(d) +
                         " does not match gain " + shape_str(gain->shape) + " / bias " +
                         shape_str(bias->shape));
    }
    const Index rows_n = x->size() / d;
    std::vector<double> out_d(x->data.size());
    std::vector<double> inv_sigma(static_cast<std::size_t>(rows_n));
    std::vector<double> means(static_cast<std::size_t>(rows_n));
    for (Index r = 0; r < rows_n; ++r) {
        detail::layer_norm_row(
            std::span<const double>(x->data.data() + r * d, static_cast<std::size_t>(d)),
            gain->data, bias->data, eps,
            std::span<double>(out_d.data() + r * d, static_cast<std::size_t>(d)),
            &inv_sigma[static_cast<std::size_t>(r)], &means[static_cast<std::size_t>(r)]);
    }
    auto out = make_tensor(x->shape, std::move(out_d), detail::any_requires_grad({x, gain, bias}));
    detail::check_finite("layer_norm", *out);
    if (out->requires_grad) {
        detail::record_op(
            "layer_norm", {x, gain, bias}, out,
            [x, gain, bias, rows_n, d, inv_sigma = std::move(inv_sigma),
             means = std::move(means), o = out.get()]() {
                std::vector<double> gx(x->requires_grad ? x->data.size() : 0, 0.0);
                std::vector<double> ggain(gain->requires_grad ? gain->data.size() : 0, 0.0);
                std::vector<double> gbias(bias->requires_grad ? bias->data.size() : 0, 0.0);
                std::vector<double> normed(static_cast<std::size_t>(d));
                std::vector<double> gh(static_cast<std::size_t>(d));
                for (Index r = 0; r < rows_n; ++r) {
                    const double is = inv_sigma[static_cast<std::size_t>(r)];
                    const double mu = means[static_cast<std::size_t>(r)];
                    for (Index j = 0; j < d; ++j) {
                        normed[static_cast<std::size_t>(j)] =
                            (x->data[static_cast<std::size_t>(r * d + j)] - mu) * is;
                    }
                    double mean_gh = 0.0;
                    double mean_gh_normed = 0.0;
                    for (Index j = 0; j < d; ++j) {
                        const double go = o->grad[static_cast<std::size_t>(r * d + j)];
                        const double g = go * gain->data[static_cast<std::size_t>(j)];
                        gh[static_cast<std::size_t>(j)] = g;
                        mean_gh += g;
                        mean_gh_normed += g * normed[static_cast<std::size_t>(j)];
                        if (gain->requires_grad) {
                            ggain[static_cast<std::size_t>(j)] +=
                                go * normed[static_cast<std::size_t>(j)];
                        }
                        if (bias->requires_grad) {
                            gbias[static_cast<std::size_t>(j)] += go;
                        }
                    }
                    mean_gh /= static_cast<double>(d);
                    mean_gh_normed /= static_cast<double>(d);
                    if (x->requires_grad) {
                        for (Index j = 0; j < d; ++j) {
                            gx[static_cast<std::size_t>(r * d + j)] =
                                is * (gh[static_cast<std::size_t>(j)] - mean_gh -
                                      normed[static_cast<std::size_t>(j)] * mean_gh_normed);
                        }
                    }
                }
                if (x->requires_grad) {
                    x->accum_grad(gx);
                }
                if (gain->requires_grad) {
                    gain->accum_grad(ggain);
                }
                if (bias->requires_grad) {
                    bias->accum_grad(gbias);
                }
            });
    }
    return out;
}

TensorPtr softmax_cross_entropy(const TensorPtr& logits, std::span<const std::int32_t> targets) {
    require_rank2("softmax_cross_entropy", logits);
    const Index b = logits->shape[0];
    const Index c = logits->shape[1];
    if (static_cast<Index>(targets.size()) != b) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(b) + " rows");
    }
    for (std::int32_t t : targets) {
        if (t < 0 || t >= c) {
            throw ShapeError("softmax_cross_entropy: target " + std::to_string(t) +
                             " out of range [0, " + std::to_string(c) + ")");
        }
    }
    // Cache the row softmax for the backward pass.
    std::vector<double> probs(logits->data.size());
    double loss = 0.0;
    for (Index r = 0; r < b; ++r) {
        const double* lr = logits->data.data() + r * c;
        double mx = lr[0];
        for (Index j = 1; j < c; ++j) {
            mx = std::max(mx, lr[j]);
        }
        double z = 0.0;
        for (Index j = 0; j < c; ++j) {
            const double e = std::exp(lr[j] - mx);
            probs[static_cast<std::size_t>(r * c + j)] = e;
            z += e;
        }
        const double log_z = std::log(z);
        for (Index j = 0; j < c; ++j) {
            probs[static_cast<std::size_t>(r * c + j)] /= z;
        }
        const Index t = targets[static_cast<std::size_t>(r)];
        loss += log_z - (lr[t] - mx);
    }
    loss /= static_cast<double>(b);
    auto out = make_tensor(Shape{}, {loss}, detail::any_requires_grad({logits}));
    detail::check_finite("softmax_cross_entropy", *out);
    if (out->requires_grad) {
        std::vector<std::int32_t> tgt(targets.begin(), targets.end());
        detail::record_op("softmax_cross_entropy", {logits}, out,
                          [logits, probs = std::move(probs), tgt = std::move(tgt), b, c,
                           o = out.get()]() {
                              const double go = o->grad[0] / static_cast<double>(b);
                              std::vector<double> g(logits->data.size());
                              for (Index r = 0; r < b; ++r) {
                                  for (Index j = 0; j < c; ++j) {
                                      double p = probs[static_cast<std::size_t>(r * c + j)];
                                      if (j == tgt[static_cast<std::size_t>(r)]) {
                                          p -= 1.0;
                                      }
                                      g[static_cast<std::size_t>(r * c + j)] = go * p;
                                  }
                              }
                              logits->accum_grad(g);
                          });
    }
    return out;
}

TensorPtr causal_depthwise_conv1d(const TensorPtr& x, const TensorPtr& kernel) {
    require_rank2("causal_depthwise_conv1d", x);
    require_rank2("causal_depthwise_conv1d", kernel);
    const Index n = x->shape[0];
    const Index d = x->shape[1];
    const Index width = kernel->shape[0];
    if (kernel->shape[1] != d) {
        throw ShapeError("causal_depthwise_conv1d: channel counts disagree: input " +
                         shape_str(x->shape) + " vs kernel " + shape_str(kernel->shape));
    }
    if (width < 1) {
        throw ShapeError("causal_depthwise_conv1d: kernel width must be >= 1");
    }
    std::vector<double> out_d(x->data.size());
    std::vector<const double*> history(static_cast<std::size_t>(width));
    for (Index t = 0; t < n; ++t) {
        for (Index j = 0; j < width; ++j) {
            const Index src = t - width + 1 + j;
            history[static_cast<std::size_t>(j)] = (src >= 0) ? x->data.data() + src * d : nullptr;
        }
        detail::causal_conv_row(history, kernel->data.data(), width, d, out_d.data() + t * d);
    }
    auto out = make_tensor(x->shape, std::move(out_d), detail::any_requires_grad({x, kernel}));
    detail::check_finite("causal_depthwise_conv1d", *out);
    if (out->requires_grad) {
        detail::record_op(
            "causal_depthwise_conv1d", {x, kernel}, out, [x, kernel, n, d, width, o = out.get()]() {
                if (x->requires_grad) {
                    std::vector<double> g(x->data.size(), 0.0);
                    for (Index t = 0; t < n; ++t) {
                        for (Index j = 0; j < width; ++j) {
                            const Index src = t - width + 1 + j;
                            if (src < 0) {
                                continue;
                            }
                            for (Index ch = 0; ch < d; ++ch) {
                                g[static_cast<std::size_t>(src * d + ch)] +=
                                    kernel->data[static_cast<std::size_t>(j * d + ch)] *
                                    o->grad[static_cast<std::size_t>(t * d + ch)];
                            }
                        }
                    }
                    x->accum_grad(g);
                }
                if (kernel->requires_grad) {
                    std::vector<double> g(kernel->data.size(), 0.0);
                    for (Index t = 0; t < n; ++t) {
                        for (Index j = 0; j < width; ++j) {
                            const Index src = t - width + 1 + j;
                            if (src < 0) {
                                continue;
                            }
                            for (Index ch = 0; ch < d; ++ch) {
                                g[static_cast<std::size_t>(j * d + ch)] +=
                                    x->data[static_cast<std::size_t>(src * d + ch)] *
                                    o->grad[static_cast<std::size_t>(t * d + ch)];
                            }
                        }
                    }
                    kernel->accum_grad(g);
                }
            });
    }
    return out;
}

TensorPtr dropout(const TensorPtr& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ConfigError("dropout: rate must be in [0, 1)");
    }
    if (!training || rate == 0.0) {
        return x;  // identity, same node
    }
    const double keep = 1.0 - rate;
    const double inv_keep = 1.0 / keep;
    std::vector<double> mask(x->data.size());
    std::vector<double> d(x->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double m = rng.bernoulli(keep) ? inv_keep : 0.0;
        mask[i] = m;
        d[i] = x->data[i] * m;
    }
    auto out = make_tensor(x->shape, std::move(d), detail::any_requires_grad({x}));
    detail::check_finite("dropout", *out);
    if (out->requires_grad) {
        detail::record_op("dropout", {x}, out, [x, mask = std::move(mask), o = out.get()]() {
            std::vector<double> g(o->grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] = o->grad[i] * mask[i];
            }
            x->accum_grad(g);
        });
    }
    return out;
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.size());
    if (logits.empty()) {
        return p;
    }
    double mx = logits[0];
    for (double v : logits) {
        mx = std::max(mx, v);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        z += p[i];
    }
    for (auto& v : p) {
        v /= z;
    }
    return p;
}

}  // namespace ttt4rec
