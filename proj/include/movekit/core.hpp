// Copyright (c) 2026 The movekit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace movekit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr const char* kVersion = "0.3.0";

// ---------------------------------------------------------------------------
// Errors. Each class maps onto one CLI exit-code family (see tools/).

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or size contract violated (mismatched vectors, bad ranks).
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A configuration record that cannot describe a valid model or run.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed, empty or out-of-range data.
class DataError : public Error {
public:
    using Error::Error;
};

/// Training or evaluation produced non-finite values.
class NumericalError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Expressive manifolds. Index order is the expert order everywhere.

enum class Manifold : int { Angry = 0, Happy = 1, Sad = 2, Laugh = 3, Cry = 4 };

inline constexpr int kNumManifolds = 5;
inline constexpr std::array<Manifold, kNumManifolds> kAllManifolds = {
    Manifold::Angry, Manifold::Happy, Manifold::Sad, Manifold::Laugh, Manifold::Cry};

inline std::string_view to_string(Manifold m) {
    switch (m) {
    case Manifold::Angry: return "Angry";
    case Manifold::Happy: return "Happy";
    case Manifold::Sad: return "Sad";
    case Manifold::Laugh: return "Laugh";
    case Manifold::Cry: return "Cry";
    }
    return "?";
}

inline Manifold manifold_from_string(std::string_view s) {
    for (Manifold m : kAllManifolds)
        if (to_string(m) == s) return m;
    throw DataError("unknown manifold label '" + std::string(s) + "'");
}

inline Manifold manifold_from_index(int i) {
    if (i < 0 || i >= kNumManifolds) throw DataError("manifold index out of range: " + std::to_string(i));
    return static_cast<Manifold>(i);
}

inline int index_of(Manifold m) { return static_cast<int>(m); }

// ---------------------------------------------------------------------------
// Projection sites that carry MoVE layers inside a transformer block.

enum class ProjectionSite : int { Query = 0, Key = 1, Value = 2, Output = 3, FeedForwardGate = 4 };

inline constexpr int kNumSites = 5;
inline constexpr std::array<ProjectionSite, kNumSites> kAllSites = {
    ProjectionSite::Query, ProjectionSite::Key, ProjectionSite::Value, ProjectionSite::Output,
    ProjectionSite::FeedForwardGate};

inline std::string_view to_string(ProjectionSite s) {
    switch (s) {
    case ProjectionSite::Query: return "q";
    case ProjectionSite::Key: return "k";
    case ProjectionSite::Value: return "v";
    case ProjectionSite::Output: return "o";
    case ProjectionSite::FeedForwardGate: return "gate";
    }
    return "?";
}

inline int index_of(ProjectionSite s) { return static_cast<int>(s); }

inline ProjectionSite site_from_string(std::string_view s) {
    for (ProjectionSite p : kAllSites)
        if (to_string(p) == s) return p;
    throw DataError("unknown projection site '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Seeding. Every random stream is derived from a root seed plus a path of
// integer tags, so streams never depend on the order in which they are used.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

template <typename... Tags>
std::uint64_t derive_seed(std::uint64_t root, Tags... tags) {
    std::uint64_t h = splitmix64(root);
    ((h = splitmix64(h ^ static_cast<std::uint64_t>(tags))), ...);
    return h;
}

using Rng = std::mt19937_64;

inline Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    // Fill row-major so the draw order is independent of Eigen's storage order.
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

} // namespace movekit
