#pragma once

// Per-vector kernels for orthogonal factors. They are templates over the
// element type so tests can instantiate them with an operation-counting
// scalar; the library instantiates them with double.

#include <cstddef>
#include <span>

namespace sptn::detail {

/// One planar rotation acting on coordinates (r, s):
///   x_r <- c*x_r + s*x_s,  x_s <- c*x_s - s*x_r.
struct PlanarRotation {
  int r;
  int s;
  double c;
  double sn;
};

template <typename Scalar>
inline void rotate(const PlanarRotation& g, Scalar* x) {
  const Scalar a = x[g.r];
  const Scalar b = x[g.s];
  x[g.r] = a * g.c + b * g.sn;
  x[g.s] = b * g.c - a * g.sn;
}

/// Applies the rotations in the given order: 4 multiplications and 2
/// additions each.
template <typename Scalar>
inline void apply_rotations(std::span<const PlanarRotation> sequence,
                            Scalar* x) {
  for (const auto& g : sequence) rotate(g, x);
}

/// Batched form of apply_rotations over a column-major dim x n block: every
/// rotation sweeps the two affected rows. Same operation count per vector.
template <typename Scalar>
inline void apply_rotations_batch(std::span<const PlanarRotation> sequence,
                                  Scalar* x, int dim, std::size_t n) {
  const auto step = static_cast<std::size_t>(dim);
  for (const auto& g : sequence) {
    Scalar* xr = x + g.r;
    Scalar* xs = x + g.s;
    for (std::size_t k = 0; k < n * step; k += step) {
      const Scalar a = xr[k];
      const Scalar b = xs[k];
      xr[k] = a * g.c + b * g.sn;
      xs[k] = b * g.c - a * g.sn;
    }
  }
}

/// Applies reflections x <- x - (y_i . x) z_i with z_i = 2 y_i / |y_i|^2
/// precomputed, in the order given by `order`. `ys` and `zs` hold d vectors
/// of length d contiguously (column-major d x d). 2d multiplications per
/// reflection.
template <typename Scalar>
inline void apply_reflections(const double* ys, const double* zs, int dim,
                              std::span<const int> order, Scalar* x) {
  for (int i : order) {
    const double* y = ys + static_cast<std::ptrdiff_t>(i) * dim;
    const double* z = zs + static_cast<std::ptrdiff_t>(i) * dim;
    Scalar dot = x[0] * y[0];
    for (int k = 1; k < dim; ++k) dot = dot + x[k] * y[k];
    for (int k = 0; k < dim; ++k) x[k] = x[k] - dot * z[k];
  }
}

}  // namespace sptn::detail
