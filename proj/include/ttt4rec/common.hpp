#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ttt4rec {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dimension disagreements between tensors.
class ShapeError : public Error {
public:
    using Error::Error;
};

// NaN/Inf surfaced from an operation, or a diverged inner state.
class NumericError : public Error {
public:
    using Error::Error;
};

// Bad configuration values or unknown keys.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed input data.
class DataError : public Error {
public:
    using Error::Error;
};

// File format or read/write failures.
class IoError : public Error {
public:
    using Error::Error;
};

// Deterministic splittable RNG (splitmix64 core). Distributions are
// hand-rolled so streams do not depend on standard-library internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // [0, n)
    std::int64_t uniform_index(std::int64_t n);

    double normal(double mean, double stdev);

    bool bernoulli(double p) { return uniform01() < p; }

    // Independent stream derived from the current state and a stream id.
    Rng fork(std::uint64_t stream) const;

private:
    std::uint64_t state_;
};

// Post-op NaN/Inf scanning. On by default; training runs may switch it off.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

}  // namespace ttt4rec
