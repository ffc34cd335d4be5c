#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Core>

namespace pkpd {

using Rng = std::mt19937_64;

// SplitMix64 step, used to decorrelate derived seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic per-stream seed so parallel workers draw independent streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(splitmix64(base) ^ (0x632be59bd9b4e019ULL * (stream + 1)));
}

inline double runif(Rng& rng, double lo = 0.0, double hi = 1.0) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Uniform integer on [lo, hi], both ends included.
inline int runif_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double rnorm(Rng& rng, double mean = 0.0, double sd = 1.0) {
  return std::normal_distribution<double>(mean, sd)(rng);
}

inline Eigen::VectorXd rnorm_vector(Rng& rng, Eigen::Index n, double mean = 0.0,
                                    double sd = 1.0) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rnorm(rng, mean, sd);
  return v;
}

inline Eigen::MatrixXd rnorm_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols,
                                    double mean = 0.0, double sd = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rnorm(rng, mean, sd);
  return m;
}

}  // namespace pkpd
