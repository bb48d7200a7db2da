#include "fpb/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fpb {

namespace {

constexpr double kJacobiTol = 1e-12;
constexpr int kMaxSweeps = 60;

void require_matrix(const Tensor& a, const char* who) {
  if (a.ndim() != 2 || a.size() == 0) {
    throw std::invalid_argument(std::string(who) + ": expects a non-empty 2-D matrix, got " +
                                shape_str(a.shape()));
  }
}

// One-sided Jacobi on a tall-or-square matrix (m >= n): orthogonalizes the
// columns of B = A * V by plane rotations, accumulating V.
SvdResult svd_tall(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor b = a;           // working copy, becomes U * diag(s)
  Tensor v({n, n});
  for (std::size_t i = 0; i < n; ++i) v.at(i, i) = 1.0;

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double app = 0, aqq = 0, apq = 0;
        for (std::size_t i = 0; i < m; ++i) {
          const double bp = b.at(i, p), bq = b.at(i, q);
          app += bp * bp;
          aqq += bq * bq;
          apq += bp * bq;
        }
        if (std::fabs(apq) <= kJacobiTol * std::sqrt(app * aqq) || apq == 0.0) continue;
        rotated = true;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0 ? 1.0 : -1.0) / (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double bp = b.at(i, p), bq = b.at(i, q);
          b.at(i, p) = c * bp - s * bq;
          b.at(i, q) = s * bp + c * bq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v.at(i, p), vq = v.at(i, q);
          v.at(i, p) = c * vp - s * vq;
          v.at(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  Tensor s({n});
  for (std::size_t j = 0; j < n; ++j) {
    double nrm = 0;
    for (std::size_t i = 0; i < m; ++i) nrm += b.at(i, j) * b.at(i, j);
    s[j] = std::sqrt(nrm);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return s[x] > s[y]; });

  SvdResult r;
  r.u = Tensor({m, n});
  r.s = Tensor({n});
  r.vt = Tensor({n, n});
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    r.s[k] = s[j];
    if (s[j] > 0) {
      const double inv = 1.0 / s[j];
      for (std::size_t i = 0; i < m; ++i) r.u.at(i, k) = b.at(i, j) * inv;
    }
    for (std::size_t i = 0; i < n; ++i) r.vt.at(k, i) = v.at(i, j);
  }
  return r;
}

}  // namespace

SvdResult svd(const Tensor& a) {
  require_matrix(a, "svd");
  if (a.rows() >= a.cols()) return svd_tall(a);
  // Wide matrix: factor the transpose and swap roles. A^T = U' S V'^T implies
  // A = V' S U'^T, so U = V'^T^T-columns and Vt = U'^T.
  SvdResult t = svd_tall(transpose2d(a));
  SvdResult r;
  r.s = t.s;
  r.u = transpose2d(t.vt);
  r.vt = transpose2d(t.u);
  return r;
}

Tensor pinv(const Tensor& a, double rcond) {
  require_matrix(a, "pinv");
  SvdResult r = svd(a);
  const std::size_t k = r.s.size();
  const double smax = r.s.size() ? r.s[0] : 0.0;
  const double cut = rcond * smax;
  // pinv = V * diag(1/s) * U^T, dropping singular values at or below the cut.
  Tensor vs({a.cols(), k});  // V * diag(1/s or 0)
  for (std::size_t i = 0; i < a.cols(); ++i)
    for (std::size_t j = 0; j < k; ++j)
      vs.at(i, j) = (r.s[j] > cut && r.s[j] > 0.0) ? r.vt.at(j, i) / r.s[j] : 0.0;
  return matmul(vs, transpose2d(r.u));
}

std::size_t effective_rank(const Tensor& a, double mass_frac) {
  require_matrix(a, "effective_rank");
  if (mass_frac <= 0.0 || mass_frac > 1.0) {
    throw std::invalid_argument("effective_rank: mass fraction must be in (0,1]");
  }
  SvdResult r = svd(a);
  double total = 0;
  for (std::size_t i = 0; i < r.s.size(); ++i) total += r.s[i];
  if (total == 0.0) return 0;
  const double target = mass_frac * total;
  double acc = 0;
  for (std::size_t k = 0; k < r.s.size(); ++k) {
    acc += r.s[k];
    if (acc >= target) return k + 1;
  }
  return r.s.size();
}

double spectral_norm(const Tensor& a) {
  require_matrix(a, "spectral_norm");
  SvdResult r = svd(a);
  return r.s.size() ? r.s[0] : 0.0;
}

std::size_t exact_rank(const Tensor& a, double tol) {
  require_matrix(a, "exact_rank");
  SvdResult r = svd(a);
  const double smax = r.s.size() ? r.s[0] : 0.0;
  if (smax == 0.0) return 0;
  std::size_t rk = 0;
  for (std::size_t i = 0; i < r.s.size(); ++i)
    if (r.s[i] > tol * smax) ++rk;
  return rk;
}

Tensor pinv_apply(const Tensor& a, const Tensor& b, double rcond) {
  require_matrix(a, "pinv_apply");
  const std::size_t m = a.rows(), n = a.cols();
  if (b.size() != m) throw std::invalid_argument("pinv_apply: rhs length must match rows");
  const Tensor bcol = b.reshaped({m, 1});
  // Small problems: direct pseudo-inverse. Very rectangular ones: go through
  // the Gram matrix of the smaller side (pinv(A'A)A' == pinv(A) exactly).
  if (std::max(m, n) <= 256 || m == n) {
    return matmul(pinv(a, rcond), bcol).reshaped({n});
  }
  if (m > n) {
    const Tensor at = transpose2d(a);
    const Tensor gram = matmul(at, a);  // [n,n]
    return matmul(pinv(gram, rcond), matmul(at, bcol)).reshaped({n});
  }
  const Tensor at = transpose2d(a);
  const Tensor gram = matmul(a, at);  // [m,m]
  return matmul(at, matmul(pinv(gram, rcond), bcol)).reshaped({n});
}

}  // namespace fpb
