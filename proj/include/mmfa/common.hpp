#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmfa {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad dimensions or invalid hyperparameters.
struct ConfigError : Error { using Error::Error; };
// Caller-supplied data does not match the model/operation contract.
struct InputError : Error { using Error::Error; };
// Operation invoked before its prerequisite state exists (e.g. no recorded trace).
struct StateError : Error { using Error::Error; };
// Sequence layout ranges overlap or do not cover the token space.
struct LayoutError : Error { using Error::Error; };
// Trace does not contain the blocks an aggregation rule needs.
struct ArchitectureError : Error { using Error::Error; };
// Dataset files: parse failures, empty sets, malformed lines.
struct DataError : Error { using Error::Error; };
// Candidate or benchmark generation failed.
struct GenerationError : Error { using Error::Error; };
// Attack iteration failures (non-finite gradients etc.).
struct AttackError : Error { using Error::Error; };

// Deterministic RNG used everywhere seeds matter. Draws are identical across
// platforms, unlike std::uniform_real_distribution.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    std::uint64_t next_u64() {
        // splitmix64
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

private:
    std::uint64_t state_;
};

// Dense [0,1] RGB raster, channel-major: data[(c*H + y)*W + x].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> data;  // 3 * height * width

    Image() = default;
    Image(int h, int w) : height(h), width(w), data(static_cast<size_t>(3) * h * w, 0.0) {}

    double& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
    size_t size() const { return data.size(); }
};

using TokenSeq = std::vector<int>;

struct MultimodalExample {
    Image image;
    TokenSeq tokens;
    int label = 0;
    std::string category;  // optional tag, empty when absent
};

}  // namespace mmfa
