#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "polarquant/tensor_io.hpp"

namespace polarquant {

/// Haar-distributed d x d orthogonal matrix S, regenerated from its seed.
/// Row vectors are rotated as x * S and restored as y * S^T.
class RotationMatrix {
 public:
  /// Exact identity; used as a test hook and for the "no preconditioning"
  /// baseline.
  static RotationMatrix identity(std::size_t d);

  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  bool is_identity() const { return identity_; }

  double operator()(std::size_t i, std::size_t j) const { return entries_[i * dim_ + j]; }
  std::span<const double> entries() const { return entries_; }

  /// out = x * S
  void rotate(std::span<const double> x, std::span<double> out) const;
  /// out = y * S^T
  void unrotate(std::span<const double> y, std::span<double> out) const;

 private:
  friend RotationMatrix build_rotation(std::size_t d, std::uint64_t seed);
  RotationMatrix(std::size_t d, std::uint64_t seed, std::vector<double> entries, bool identity)
      : dim_(d), seed_(seed), identity_(identity), entries_(std::move(entries)) {}

  std::size_t dim_ = 0;
  std::uint64_t seed_ = 0;
  bool identity_ = false;
  std::vector<double> entries_;  // row-major
};

/// QR of a seeded Gaussian matrix with the R diagonal made positive, which
/// makes Q uniformly distributed over the orthogonal group.
RotationMatrix build_rotation(std::size_t d, std::uint64_t seed);

/// Row-wise X * S. Throws std::invalid_argument on dimension mismatch.
EmbeddingMatrix apply(const EmbeddingMatrix& x, const RotationMatrix& s);
/// Row-wise X * S^T.
EmbeddingMatrix apply_inverse(const EmbeddingMatrix& x, const RotationMatrix& s);

/// m x d matrix of i.i.d. N(0,1) entries. Only used to check the Gaussian
/// projection statistics; production preconditioning uses rotations.
struct GaussianSketch {
  std::size_t out_dim = 0;
  std::size_t in_dim = 0;
  std::uint64_t seed = 0;
  std::vector<double> entries;  // row-major out_dim x in_dim
};

GaussianSketch build_gaussian_sketch(std::size_t m, std::size_t d, std::uint64_t seed);

/// Row i of the result is S * x_i (length m).
EmbeddingMatrix apply_sketch(const EmbeddingMatrix& x, const GaussianSketch& sketch);

}  // namespace polarquant
