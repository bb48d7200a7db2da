#pragma once

#include "fpb/tensor.hpp"

namespace fpb {

// Thin SVD A = U * diag(s) * Vt with singular values sorted descending.
// U is [m,r], Vt is [r,n] with r = min(m,n); s is non-negative. Columns of U
// corresponding to zero singular values are zero vectors.
struct SvdResult {
  Tensor u;
  Tensor s;   // [r]
  Tensor vt;  // [r,n]
};

// One-sided Jacobi SVD. Column pairs are rotated until every off-diagonal
// inner product is below 1e-12 relative to the column norms (or the sweep
// limit is reached, which for well-conditioned desk-scale inputs it is not).
SvdResult svd(const Tensor& a);

// Moore-Penrose pseudo-inverse via SVD. Singular values at or below
// rcond * s_max are treated as zero.
Tensor pinv(const Tensor& a, double rcond = 1e-12);

// Smallest k such that the top-k singular values hold at least `mass_frac`
// of the total singular mass. Zero matrix -> 0.
std::size_t effective_rank(const Tensor& a, double mass_frac = 0.99);

// Largest singular value.
double spectral_norm(const Tensor& a);

// Number of singular values above tol * s_max (exact rank up to round-off).
std::size_t exact_rank(const Tensor& a, double tol = 1e-10);

// Least-squares application x = pinv(a) * b for a [m,n] matrix and a length-m
// vector, without forming pinv(a) when a is very rectangular: the Gram matrix
// of the smaller side is pseudo-inverted instead.
Tensor pinv_apply(const Tensor& a, const Tensor& b, double rcond = 1e-12);

}  // namespace fpb
