#pragma once

#include <functional>
#include <span>
#include <vector>

namespace metadock::linalg {

using Vec = std::vector<double>;

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
Vec scaled(std::span<const double> x, double alpha);
bool all_finite(std::span<const double> x);

/// Gradient of some scalar objective at the given point.
using GradientFn = std::function<Vec(std::span<const double>)>;
/// Linear operator applied to a vector.
using MatVec = std::function<Vec(std::span<const double>)>;

struct HvpOptions {
  double eps0 = 1e-4;
  double guard = 1e-12;
};

/// Hessian-vector product by central differences of gradients:
///   (grad(p + e v) - grad(p - e v)) / (2 e),  e = eps0 * max(|p|, 1) / (|v| + guard).
/// Zero `v` short-circuits to a zero vector.
Vec hvp(const GradientFn& grad, std::span<const double> params, std::span<const double> v, HvpOptions opts = {});

struct CgResult {
  Vec x;
  double residual_norm = 0.0;
  /// residual_norm / |b| (0 when b == 0).
  double relative_residual = 0.0;
  int iterations = 0;
  bool converged = false;
  /// |b - A x_k| after each iteration, starting with k = 0.
  std::vector<double> residual_history;
};

/// Krylov solve of A x = b for symmetric positive-definite A, started from x = 0.
///
/// Uses the conjugate-residual recurrence: same cost as classic CG (one matvec per
/// iteration) but each iterate minimises |b - A x| over the Krylov space, so the
/// reported residual never increases. Stops once |r| <= tol * |b| or after
/// max_iters iterations. Throws NumericalError on non-finite values.
CgResult cg_solve(const MatVec& matvec, std::span<const double> b, int max_iters, double tol);

}  // namespace metadock::linalg
