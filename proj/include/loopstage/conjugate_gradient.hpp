#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stop_token>
#include <vector>

namespace loopstage {

struct SolveReport {
  int iterations = 0;
  double relative_residual = 0.0;
  bool converged = false;
  bool cancelled = false;
};

// Symmetric sparse matrix in compressed-row form (both triangles stored).
struct CsrMatrix {
  int rows = 0;
  std::vector<int> row_start;  // size rows + 1
  std::vector<int> column;
  std::vector<double> value;

  void multiply(std::span<const double> x, std::span<double> y) const {
    for (int r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (int i = row_start[r]; i < row_start[r + 1]; ++i) {
        acc += value[i] * x[column[i]];
      }
      y[r] = acc;
    }
  }
};

// Jacobi-preconditioned conjugate gradient for a symmetric positive definite
// operator. `apply(x, y)` computes y = A x; `diagonal` holds diag(A). Stops
// once ||b - A x|| <= tolerance * ||b||. `x` holds the initial guess.
template <typename Apply>
SolveReport conjugate_gradient(Apply&& apply, std::span<const double> diagonal,
                               std::span<const double> b, std::span<double> x,
                               double tolerance, int max_iterations,
                               std::stop_token stop = {}) {
  const std::size_t n = b.size();
  SolveReport report;
  double b_norm = 0.0;
  for (double v : b) b_norm += v * v;
  b_norm = std::sqrt(b_norm);
  if (b_norm == 0.0) {
    for (auto& v : x) v = 0.0;
    report.converged = true;
    return report;
  }

  std::vector<double> r(n), z(n), p(n), q(n);
  apply(std::span<const double>(x.data(), n), std::span<double>(q));
  double r_norm2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    r[i] = b[i] - q[i];
    r_norm2 += r[i] * r[i];
  }
  double rz = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = diagonal[i] > 0.0 ? r[i] / diagonal[i] : r[i];
    p[i] = z[i];
    rz += r[i] * z[i];
  }

  while (true) {
    report.relative_residual = std::sqrt(r_norm2) / b_norm;
    if (report.relative_residual <= tolerance) {
      report.converged = true;
      return report;
    }
    if (report.iterations >= max_iterations) return report;
    if (stop.stop_requested()) {
      report.cancelled = true;
      return report;
    }
    apply(std::span<const double>(p), std::span<double>(q));
    double pq = 0.0;
    for (std::size_t i = 0; i < n; ++i) pq += p[i] * q[i];
    if (pq <= 0.0) return report;  // operator not positive definite
    const double step = rz / pq;
    r_norm2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += step * p[i];
      r[i] -= step * q[i];
      r_norm2 += r[i] * r[i];
    }
    double rz_next = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = diagonal[i] > 0.0 ? r[i] / diagonal[i] : r[i];
      rz_next += r[i] * z[i];
    }
    const double ratio = rz_next / rz;
    rz = rz_next;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + ratio * p[i];
    ++report.iterations;
  }
}

}  // namespace loopstage
