#include "polarquant/precondition.hpp"

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

#include "polarquant/parallel.hpp"
#include "polarquant/random.hpp"

namespace polarquant {
namespace {

void check_dims(const EmbeddingMatrix& x, const RotationMatrix& s, const char* op) {
  if (x.cols() != s.dim()) {
    throw std::invalid_argument(std::string(op) + ": matrix has " + std::to_string(x.cols()) +
                                " columns, rotation has dimension " + std::to_string(s.dim()));
  }
}

template <bool kInverse>
EmbeddingMatrix transform_rows(const EmbeddingMatrix& x, const RotationMatrix& s) {
  EmbeddingMatrix out(x.rows(), x.cols());
  const std::size_t d = x.cols();
  parallel_for(x.rows(), [&](std::size_t begin, std::size_t end) {
    std::vector<double> in(d);
    std::vector<double> res(d);
    for (std::size_t i = begin; i < end; ++i) {
      const auto src = x.row(i);
      std::copy(src.begin(), src.end(), in.begin());
      if constexpr (kInverse) {
        s.unrotate(in, res);
      } else {
        s.rotate(in, res);
      }
      auto dst = out.row(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] = static_cast<float>(res[j]);
    }
  });
  return out;
}

}  // namespace

RotationMatrix RotationMatrix::identity(std::size_t d) {
  if (d == 0) throw std::invalid_argument("RotationMatrix::identity: d must be positive");
  std::vector<double> entries(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) entries[i * d + i] = 1.0;
  return RotationMatrix(d, 0, std::move(entries), true);
}

void RotationMatrix::rotate(std::span<const double> x, std::span<double> out) const {
  if (x.size() != dim_ || out.size() != dim_) {
    throw std::invalid_argument("RotationMatrix::rotate: dimension mismatch");
  }
  if (identity_) {
    std::copy(x.begin(), x.end(), out.begin());
    return;
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < dim_; ++i) {
    const double xi = x[i];
    const double* row = entries_.data() + i * dim_;
    for (std::size_t j = 0; j < dim_; ++j) out[j] += xi * row[j];
  }
}

void RotationMatrix::unrotate(std::span<const double> y, std::span<double> out) const {
  if (y.size() != dim_ || out.size() != dim_) {
    throw std::invalid_argument("RotationMatrix::unrotate: dimension mismatch");
  }
  if (identity_) {
    std::copy(y.begin(), y.end(), out.begin());
    return;
  }
  for (std::size_t i = 0; i < dim_; ++i) {
    const double* row = entries_.data() + i * dim_;
    double acc = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) acc += y[j] * row[j];
    out[i] = acc;
  }
}

RotationMatrix build_rotation(std::size_t d, std::uint64_t seed) {
  if (d == 0) throw std::invalid_argument("build_rotation: d must be positive");
  Rng rng(seed);
  Eigen::MatrixXd gaussian(d, d);
  for (Eigen::Index i = 0; i < gaussian.rows(); ++i) {
    for (Eigen::Index j = 0; j < gaussian.cols(); ++j) gaussian(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd& r = qr.matrixQR();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  std::vector<double> entries(d * d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      entries[i * d + j] = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  return RotationMatrix(d, seed, std::move(entries), false);
}

EmbeddingMatrix apply(const EmbeddingMatrix& x, const RotationMatrix& s) {
  check_dims(x, s, "apply");
  return transform_rows<false>(x, s);
}

EmbeddingMatrix apply_inverse(const EmbeddingMatrix& x, const RotationMatrix& s) {
  check_dims(x, s, "apply_inverse");
  return transform_rows<true>(x, s);
}

GaussianSketch build_gaussian_sketch(std::size_t m, std::size_t d, std::uint64_t seed) {
  if (m == 0 || d == 0) {
    throw std::invalid_argument("build_gaussian_sketch: dimensions must be positive");
  }
  GaussianSketch sketch{m, d, seed, std::vector<double>(m * d)};
  Rng rng(seed);
  for (auto& v : sketch.entries) v = rng.normal();
  return sketch;
}

EmbeddingMatrix apply_sketch(const EmbeddingMatrix& x, const GaussianSketch& sketch) {
  if (x.cols() != sketch.in_dim) {
    throw std::invalid_argument("apply_sketch: matrix has " + std::to_string(x.cols()) +
                                " columns, sketch expects " + std::to_string(sketch.in_dim));
  }
  EmbeddingMatrix out(x.rows(), sketch.out_dim);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    auto dst = out.row(r);
    for (std::size_t i = 0; i < sketch.out_dim; ++i) {
      const double* srow = sketch.entries.data() + i * sketch.in_dim;
      double acc = 0.0;
      for (std::size_t j = 0; j < sketch.in_dim; ++j) acc += srow[j] * row[j];
      dst[i] = static_cast<float>(acc);
    }
  }
  return out;
}

}  // namespace polarquant
