#include "metadock/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "metadock/tensor.hpp"

namespace metadock::linalg {

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ShapeError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Vec scaled(std::span<const double> x, double alpha) {
  Vec out(x.begin(), x.end());
  for (auto& v : out) v *= alpha;
  return out;
}

bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

Vec hvp(const GradientFn& grad, std::span<const double> params, std::span<const double> v, HvpOptions opts) {
  if (params.size() != v.size()) {
    throw ShapeError("hvp: direction has " + std::to_string(v.size()) + " entries, params " +
                     std::to_string(params.size()));
  }
  const double vnorm = norm(v);
  if (vnorm == 0.0) return Vec(params.size(), 0.0);
  const double eps = opts.eps0 * std::max(norm(params), 1.0) / (vnorm + opts.guard);

  Vec plus(params.begin(), params.end());
  Vec minus(params.begin(), params.end());
  axpy(eps, v, plus);
  axpy(-eps, v, minus);
  const Vec gp = grad(plus);
  const Vec gm = grad(minus);
  if (gp.size() != params.size() || gm.size() != params.size()) throw ShapeError("hvp: gradient length mismatch");
  Vec out(params.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * eps);
  return out;
}

CgResult cg_solve(const MatVec& matvec, std::span<const double> b, int max_iters, double tol) {
  if (!all_finite(b)) throw NumericalError("cg_solve: right-hand side has non-finite entries");
  const std::size_t n = b.size();
  CgResult result;
  result.x.assign(n, 0.0);
  const double bnorm = norm(b);
  Vec r(b.begin(), b.end());
  double rnorm = bnorm;
  result.residual_history.push_back(rnorm);

  auto finish = [&](bool converged) {
    result.residual_norm = rnorm;
    result.relative_residual = bnorm > 0.0 ? rnorm / bnorm : 0.0;
    result.converged = converged;
    return result;
  };

  if (rnorm <= tol * bnorm || bnorm == 0.0) return finish(true);

  auto apply = [&](std::span<const double> v) {
    Vec out = matvec(v);
    if (out.size() != n) throw ShapeError("cg_solve: operator changed vector length");
    if (!all_finite(out)) throw NumericalError("cg_solve: operator produced non-finite values");
    return out;
  };

  Vec Ar = apply(r);
  Vec p = r;
  Vec Ap = Ar;
  double rAr = dot(r, Ar);

  for (int it = 0; it < max_iters; ++it) {
    const double ApAp = dot(Ap, Ap);
    if (ApAp <= 0.0 || !std::isfinite(ApAp) || !std::isfinite(rAr)) {
      throw NumericalError("cg_solve: breakdown at iteration " + std::to_string(it) + " (|Ap|^2 = " +
                           std::to_string(ApAp) + ")");
    }
    const double alpha = rAr / ApAp;
    axpy(alpha, p, result.x);
    axpy(-alpha, Ap, r);
    rnorm = norm(r);
    result.iterations = it + 1;
    result.residual_history.push_back(rnorm);
    if (!std::isfinite(rnorm)) throw NumericalError("cg_solve: residual became non-finite");
    if (rnorm <= tol * bnorm) return finish(true);
    if (it + 1 == max_iters) break;

    Ar = apply(r);
    const double rAr_next = dot(r, Ar);
    const double beta = rAr_next / rAr;
    rAr = rAr_next;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = r[i] + beta * p[i];
      Ap[i] = Ar[i] + beta * Ap[i];
    }
  }
  return finish(false);
}

}  // namespace metadock::linalg
