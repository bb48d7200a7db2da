#include "fpb/theory.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "fpb/linalg.hpp"

namespace fpb::theory {

namespace {

constexpr double kSlack = 1e-9;

double leaky(double z, double alpha) { return z >= 0.0 ? z : alpha * z; }
double leaky_inv(double o, double alpha) {
  if (o >= 0.0) return o;
  if (alpha <= 0.0) throw std::invalid_argument("activation not invertible at negative output");
  return o / alpha;
}

Tensor unit(const Tensor& v) {
  const double n = norm2(v);
  if (n == 0.0) throw std::invalid_argument("cannot normalize a zero vector");
  return scale(v, 1.0 / n);
}

Tensor col_vec(const Tensor& v) { return v.reshaped({v.size(), 1}); }

std::string shape_note(const Tensor& w) {
  std::ostringstream os;
  os << "w " << shape_str(w.shape());
  return os.str();
}

// Random rotation via Gram-Schmidt on a Gaussian matrix.
Tensor random_rotation(std::size_t n, Rng rng) {
  Tensor q = rng.normal_tensor({n, n}, 1.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t prev = 0; prev < j; ++prev) {
      double d = 0.0;
      for (std::size_t i = 0; i < n; ++i) d += q.at(i, j) * q.at(i, prev);
      for (std::size_t i = 0; i < n; ++i) q.at(i, j) -= d * q.at(i, prev);
    }
    double nrm = 0.0;
    for (std::size_t i = 0; i < n; ++i) nrm += q.at(i, j) * q.at(i, j);
    nrm = std::sqrt(nrm);
    if (nrm < 1e-12) throw std::runtime_error("degenerate draw while building a rotation");
    for (std::size_t i = 0; i < n; ++i) q.at(i, j) /= nrm;
  }
  return q;
}

}  // namespace

BoundCheck check_wedin(const Tensor& w, const Tensor& w_tilde) {
  if (!shape_eq(w.shape(), w_tilde.shape())) {
    throw std::invalid_argument("check_wedin: shapes must match");
  }
  if (exact_rank(w) != exact_rank(w_tilde)) {
    throw std::invalid_argument(
        "check_wedin: lemma precondition violated (ranks differ between w and w~)");
  }
  const Tensor pw = pinv(w);
  const Tensor pwt = pinv(w_tilde);
  BoundCheck c;
  c.name = "pinv_perturbation";
  c.direction = "lhs<=C*rhs";
  c.lhs = spectral_norm(sub(pwt, pw));
  c.rhs = spectral_norm(pw) * spectral_norm(pwt) * spectral_norm(sub(w_tilde, w));
  c.constant_estimate = c.rhs > 0.0 ? c.lhs / c.rhs : 0.0;
  c.satisfied = c.lhs <= c.constant_estimate * c.rhs * (1.0 + kSlack) + kSlack;
  c.note = shape_note(w);
  return c;
}

BoundCheck check_case1(const Tensor& w, const Tensor& w_tilde, const Tensor& o,
                       double leaky_alpha) {
  if (!shape_eq(w.shape(), w_tilde.shape())) {
    throw std::invalid_argument("check_case1: shapes must match");
  }
  if (exact_rank(w) != exact_rank(w_tilde)) {
    throw std::invalid_argument(
        "check_case1: precondition violated (ranks differ between w and w~)");
  }
  if (o.size() != w.rows()) {
    throw std::invalid_argument("check_case1: output length must match rows");
  }
  const Tensor ou = unit(o);
  Tensor z({ou.size()});
  for (std::size_t i = 0; i < ou.size(); ++i) z[i] = leaky_inv(ou[i], leaky_alpha);
  const Tensor pw = pinv(w);
  const Tensor pwt = pinv(w_tilde);
  const Tensor x = matmul(pw, col_vec(z));
  const Tensor xt = matmul(pwt, col_vec(z));
  BoundCheck c;
  c.name = "equal_rank_restoration";
  c.direction = "lhs<=C*rhs";
  c.lhs = norm2(sub(x, xt));
  c.rhs = spectral_norm(pwt) * spectral_norm(pw) * spectral_norm(sub(w, w_tilde));
  c.constant_estimate = c.rhs > 0.0 ? c.lhs / c.rhs : 0.0;
  c.satisfied = c.lhs <= c.constant_estimate * c.rhs * (1.0 + kSlack) + kSlack;
  c.note = shape_note(w);
  return c;
}

Case2Instance make_case2_instance(std::size_t n, Rng rng) {
  if (n < 2) throw std::invalid_argument("make_case2_instance: need n >= 2");
  const Tensor rot = random_rotation(n, rng.child("rotation"));
  Case2Instance inst;
  inst.d_gamma = Tensor({n});
  inst.d_gamma_tilde = Tensor({n});
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double d = rng.uniform(0.5, 2.0);
    inst.d_gamma[i] = d;
    inst.d_gamma_tilde[i] = d;
  }
  inst.d_gamma[n - 1] = 1.0;       // the direction the surrogate loses
  inst.d_gamma_tilde[n - 1] = 0.0;

  inst.w = rot;
  inst.w_tilde = rot;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      inst.w.at(i, j) *= inst.d_gamma[i];
      inst.w_tilde.at(i, j) *= inst.d_gamma_tilde[i];
    }
  }

  // Leaked output: activation of the unit vector that spans the lost
  // direction. Its preimage is e_n, which is orthogonal to range(w_tilde).
  inst.o = Tensor({n});
  inst.o[n - 1] = leaky(1.0, 0.2);  // == 1 for any slope

  // Self-validation of the advertised preconditions.
  if (exact_rank(inst.w) != n || exact_rank(inst.w_tilde) != n - 1) {
    throw std::logic_error("make_case2_instance: rank pattern failed");
  }
  for (std::size_t j = 0; j < n; ++j) {
    // <e_n, w_tilde e_j> is just row n-1 of w_tilde.
    if (std::fabs(inst.w_tilde.at(n - 1, j)) > 1e-10) {
      throw std::logic_error("make_case2_instance: orthogonality to range(w~) failed");
    }
  }
  return inst;
}

Case2Check check_case2(const Case2Instance& inst) {
  const Tensor o_col = col_vec(inst.o);
  const Tensor x = matmul(pinv(inst.w), o_col);
  const Tensor xt = matmul(pinv(inst.w_tilde), o_col);
  const double lhs = norm2(sub(x, xt));
  const double dist = spectral_norm(sub(inst.w, inst.w_tilde));
  if (dist == 0.0) throw std::invalid_argument("check_case2: w and w~ coincide");

  Case2Check out;
  out.lower_bound.name = "rank_drop_lower_bound";
  out.lower_bound.direction = "lhs>=rhs";
  out.lower_bound.lhs = lhs;
  out.lower_bound.rhs = 1.0 / dist;
  out.lower_bound.constant_estimate = 1.0;
  out.lower_bound.satisfied = lhs >= out.lower_bound.rhs * (1.0 - kSlack) - kSlack;
  out.lower_bound.note = shape_note(inst.w);

  // Modulated form: the weight magnitudes are absorbed into the constant,
  // C2 = 1 / max(||w||, ||w~||), leaving the scale factors in the denominator.
  const double c2 =
      1.0 / std::max(spectral_norm(inst.w), spectral_norm(inst.w_tilde));
  out.modulated.name = "rank_drop_modulated";
  out.modulated.direction = "lhs>=rhs";
  out.modulated.lhs = lhs;
  out.modulated.rhs = c2 / (max_abs(inst.d_gamma) + max_abs(inst.d_gamma_tilde));
  out.modulated.constant_estimate = c2;
  out.modulated.satisfied = lhs >= out.modulated.rhs * (1.0 - kSlack) - kSlack;
  out.modulated.note = shape_note(inst.w);
  return out;
}

BoundCheck check_triangle(const Tensor& w, const Tensor& w_tilde, const Tensor& o,
                          const Tensor& o_tilde) {
  if (o.size() != w.rows() || o_tilde.size() != w_tilde.rows()) {
    throw std::invalid_argument("check_triangle: output lengths must match rows");
  }
  const Tensor pw = pinv(w);
  const Tensor pwt = pinv(w_tilde);
  const Tensor a = matmul(pw, col_vec(o));
  const Tensor b = matmul(pwt, col_vec(o));
  const Tensor c = matmul(pwt, col_vec(o_tilde));
  BoundCheck chk;
  chk.name = "restoration_triangle";
  chk.direction = "lhs<=C*rhs";
  chk.lhs = norm2(sub(a, c));
  chk.rhs = norm2(sub(a, b)) + norm2(sub(b, c));
  chk.constant_estimate = 1.0;
  chk.satisfied = chk.lhs <= chk.rhs + 1e-10;
  chk.note = shape_note(w);
  return chk;
}

TheorySuiteResult run_theory_suite(const TheorySuiteConfig& cfg) {
  if (cfg.trials == 0) throw std::invalid_argument("run_theory_suite: trials must be >= 1");
  if (cfg.max_dim < 2) throw std::invalid_argument("run_theory_suite: max_dim must be >= 2");
  Rng root(cfg.seed);
  TheorySuiteResult res;

  // Pseudo-inverse perturbation constant over random equal-rank pairs.
  {
    Rng r = root.child("wedin");
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      Rng tr = r.child(t);
      const std::size_t m = 2 + tr.index(cfg.max_dim - 1);
      const std::size_t n = 2 + tr.index(cfg.max_dim - 1);
      Tensor w = tr.normal_tensor({m, n}, 1.0);
      Tensor wt = w;
      const Tensor pert = tr.normal_tensor({m, n}, 0.1);
      for (std::size_t i = 0; i < wt.size(); ++i) wt[i] += pert[i];
      if (exact_rank(w) != exact_rank(wt)) continue;  // measure-zero; skip the draw
      BoundCheck c = check_wedin(w, wt);
      c.note += ", trial " + std::to_string(t);
      res.wedin_constant = std::max(res.wedin_constant, c.constant_estimate);
      res.checks.push_back(std::move(c));
    }
  }

  // Equal-rank restoration: constant over random trials plus the scaling
  // exponent on the diagonal family.
  {
    Rng r = root.child("case1");
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      Rng tr = r.child(t);
      const std::size_t n = 2 + tr.index(cfg.max_dim - 1);
      Tensor w({n, n});
      for (std::size_t i = 0; i < n; ++i) w.at(i, i) = tr.uniform(0.5, 2.0);
      Tensor wt = w;
      for (std::size_t i = 0; i < n; ++i) wt.at(i, i) += 0.05 * tr.uniform(-1.0, 1.0);
      const Tensor x0 = tr.normal_tensor({n, 1}, 1.0);
      Tensor o({n});
      {
        const Tensor z = matmul(w, x0);
        for (std::size_t i = 0; i < n; ++i) o[i] = leaky(z[i], 0.2);
      }
      BoundCheck c = check_case1(w, wt, o, 0.2);
      c.note += ", trial " + std::to_string(t);
      res.case1_constant = std::max(res.case1_constant, c.constant_estimate);
      res.checks.push_back(std::move(c));
    }

    // Log-log slope of restoration error against perturbation size.
    Rng sr = root.child("case1_slope");
    const std::size_t n = 8;
    Tensor w({n, n});
    for (std::size_t i = 0; i < n; ++i) w.at(i, i) = sr.uniform(0.5, 2.0);
    Tensor dir({n});
    for (std::size_t i = 0; i < n; ++i) dir[i] = sr.uniform(-1.0, 1.0);
    const Tensor x0 = sr.normal_tensor({n, 1}, 1.0);
    Tensor o({n});
    {
      const Tensor z = matmul(w, x0);
      for (std::size_t i = 0; i < n; ++i) o[i] = leaky(z[i], 0.2);
    }
    std::vector<double> lx, ly;
    for (double delta : {1e-1, 1e-2, 1e-3, 1e-4}) {
      Tensor wt = w;
      for (std::size_t i = 0; i < n; ++i) wt.at(i, i) += delta * dir[i];
      BoundCheck c = check_case1(w, wt, o, 0.2);
      lx.push_back(std::log(spectral_norm(sub(w, wt))));
      ly.push_back(std::log(c.lhs));
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
      sx += lx[i];
      sy += ly[i];
      sxx += lx[i] * lx[i];
      sxy += lx[i] * ly[i];
    }
    const double k = static_cast<double>(lx.size());
    res.case1_slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  }

  // Rank-drop lower bounds: constant-free, gate the suite.
  {
    Rng r = root.child("case2");
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      Rng tr = r.child(t);
      const std::size_t n = 2 + tr.index(cfg.max_dim - 1);
      const Case2Instance inst = make_case2_instance(n, tr.child("instance"));
      Case2Check cc = check_case2(inst);
      cc.lower_bound.note += ", trial " + std::to_string(t);
      cc.modulated.note += ", trial " + std::to_string(t);
      if (!cc.lower_bound.satisfied) ++res.violations;
      if (!cc.modulated.satisfied) ++res.violations;
      res.checks.push_back(std::move(cc.lower_bound));
      res.checks.push_back(std::move(cc.modulated));
    }
  }

  // Triangle chain: constant-free, gates the suite.
  {
    Rng r = root.child("triangle");
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      Rng tr = r.child(t);
      const std::size_t m = 2 + tr.index(cfg.max_dim - 1);
      const std::size_t n = 2 + tr.index(cfg.max_dim - 1);
      const Tensor w = tr.normal_tensor({m, n}, 1.0);
      Tensor wt = w;
      const Tensor pert = tr.normal_tensor({m, n}, 0.2);
      for (std::size_t i = 0; i < wt.size(); ++i) wt[i] += pert[i];
      const Tensor o = unit(tr.normal_tensor({m}, 1.0));
      const Tensor ot = unit(tr.normal_tensor({m}, 1.0));
      BoundCheck c = check_triangle(w, wt, o, ot);
      c.note += ", trial " + std::to_string(t);
      if (!c.satisfied) ++res.violations;
      res.checks.push_back(std::move(c));
    }
  }

  res.pass = res.violations == 0;
  return res;
}

}  // namespace fpb::theory
