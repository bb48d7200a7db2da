#include "fpb/lbfgs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>

namespace fpb {

namespace {
bool finite(double v) { return std::isfinite(v); }
}  // namespace

LbfgsResult lbfgs_minimize(const Objective& f, Tensor x0, const LbfgsConfig& cfg) {
  if (cfg.memory <= 0) throw std::invalid_argument("lbfgs: memory must be positive");
  if (cfg.max_iters < 0) throw std::invalid_argument("lbfgs: max_iters must be non-negative");

  LbfgsResult res;
  Tensor x = std::move(x0);
  Tensor g(x.shape());
  double fx = f(x, &g);
  res.trace.push_back(fx);
  res.accepted.push_back(true);
  res.x = x;
  res.fx = fx;
  if (!finite(fx)) {
    res.aborted_nonfinite = true;
    return res;
  }

  struct Pair {
    Tensor s, y;
    double rho;
  };
  std::deque<Pair> mem;
  int total_escapes = 0;
  // Escape steps anneal: early ones explore at the line-search scale, later
  // ones only nudge the iterate off a kink.
  constexpr double kEscapeCooling = 0.9;
  // How far past the Armijo window the plain-decrease rescue keeps shrinking.
  constexpr int kRescueExtra = 12;
  // A rescue step must improve the objective by a meaningful relative margin;
  // accepting float-noise decreases would crawl in place at a kink forever
  // instead of escalating to an escape step.
  constexpr double kRescueRelDecrease = 1e-9;
  // Warm-started first trial steps per direction family, capped at the
  // configured initial step. An immediately accepted warm trial expands
  // geometrically back toward the cap, so small steps never ratchet.
  double warm_qn = cfg.init_step;
  double warm_sd = cfg.init_step;

  // Every monotone accept must beat this margin. Without it, a trial step
  // small enough that the Armijo threshold rounds to fx itself lets
  // float-identical values "pass", and the search crawls in place at a kink
  // instead of escalating to an escape step.
  const auto meaningful = [kRescueRelDecrease](double ft, double fbase) {
    return ft < fbase - kRescueRelDecrease * std::fabs(fbase);
  };

  // Grows an Armijo-accepted step toward the cap while the test keeps
  // passing, so warm-started small steps never ratchet down permanently.
  const auto expand = [&](const Tensor& base, double fbase, const Tensor& d, double dg,
                          double step, Tensor& x_out, double& f_out) {
    while (step < cfg.init_step) {
      const double wide = std::min(cfg.init_step, 2.0 * step);
      Tensor xw = base;
      axpy(wide, d, xw);
      const double fw = f(xw, nullptr);
      if (!(finite(fw) && fw <= fbase + cfg.armijo_c1 * wide * dg && meaningful(fw, fbase))) break;
      x_out = std::move(xw);
      f_out = fw;
      step = wide;
    }
    return step;
  };

  // Backtracking Armijo scan along `d` from `first_step`, probing values
  // only. Returns the accepted (possibly expanded) step or 0.
  const auto armijo_scan = [&](const Tensor& base, double fbase, const Tensor& d, double dg,
                               double first_step, Tensor& x_out, double& f_out) {
    double step = first_step;
    for (int bt = 0; bt <= cfg.max_backtracks; ++bt) {
      Tensor xt = base;
      axpy(step, d, xt);
      const double ft = f(xt, nullptr);
      if (finite(ft) && ft <= fbase + cfg.armijo_c1 * step * dg && meaningful(ft, fbase)) {
        x_out = std::move(xt);
        f_out = ft;
        return expand(base, fbase, d, dg, step, x_out, f_out);
      }
      step *= cfg.contraction;
    }
    return 0.0;
  };

  for (int it = 0; it < cfg.max_iters; ++it) {
    if (max_abs(g) <= cfg.tolerance) {
      res.converged = true;
      break;
    }

    double f_new = 0;
    Tensor x_new;
    bool armijo_ok = false;
    bool used_fallback = false;

    // With curvature memory the quasi-Newton direction gets the first scan;
    // with empty memory it would equal steepest descent, which the combined
    // scan below already covers.
    if (!mem.empty()) {
      // Two-loop recursion for d = -H*g.
      Tensor q = g;
      std::vector<double> alpha(mem.size());
      for (std::size_t i = mem.size(); i-- > 0;) {
        alpha[i] = mem[i].rho * dot(mem[i].s, q);
        axpy(-alpha[i], mem[i].y, q);
      }
      {
        const Pair& last = mem.back();
        const double yy = dot(last.y, last.y);
        if (yy > 0) {
          const double gamma = dot(last.s, last.y) / yy;
          for (std::size_t i = 0; i < q.size(); ++i) q[i] *= gamma;
        }
      }
      for (std::size_t i = 0; i < mem.size(); ++i) {
        const double beta = mem[i].rho * dot(mem[i].y, q);
        axpy(alpha[i] - beta, mem[i].s, q);
      }
      Tensor d = scale(q, -1.0);

      const double dg = dot(d, g);
      if (dg < 0 && d.all_finite()) {
        const double got = armijo_scan(x, fx, d, dg, warm_qn, x_new, f_new);
        if (got > 0) {
          armijo_ok = true;
          warm_qn = std::min(cfg.init_step, 2.0 * got);
        }
      }
      if (!armijo_ok) used_fallback = true;
    }

    // Steepest-descent scan: Armijo within the backtrack window, and past it a
    // plain-decrease rescue. Non-smooth objectives (leaky-relu networks, the
    // total-variation prior) produce points where sufficient decrease is
    // unsatisfiable even though the objective still drops.
    bool rescue_ok = false;
    if (!armijo_ok) {
      Tensor d = scale(g, -1.0);
      const double dg = -dot(g, g);
      if (dg < 0) {
        double step = warm_sd;
        Tensor x_rescue;
        double f_rescue = 0;
        for (int bt = 0; bt <= cfg.max_backtracks + kRescueExtra; ++bt) {
          Tensor xt = x;
          axpy(step, d, xt);
          const double ft = f(xt, nullptr);
          if (finite(ft) && bt <= cfg.max_backtracks &&
              ft <= fx + cfg.armijo_c1 * step * dg && meaningful(ft, fx)) {
            armijo_ok = true;
            x_new = std::move(xt);
            f_new = ft;
            warm_sd = std::min(cfg.init_step, 2.0 * expand(x, fx, d, dg, step, x_new, f_new));
            break;
          }
          if (finite(ft) && meaningful(ft, fx) && !rescue_ok) {
            rescue_ok = true;
            x_rescue = std::move(xt);
            f_rescue = ft;
            if (bt > cfg.max_backtracks) break;  // Armijo window closed; rescue is decided
          }
          step *= cfg.contraction;
        }
        if (!armijo_ok && rescue_ok) {
          x_new = std::move(x_rescue);
          f_new = f_rescue;
          warm_sd = cfg.init_step;  // kinky region: next scan gets the full range
        }
      }
      used_fallback = used_fallback || rescue_ok;
    }

    if (armijo_ok || rescue_ok) {
      Tensor g_new(x.shape());
      f(x_new, &g_new);  // gradient at the accepted point
      if (used_fallback) res.fallback_steps.push_back(it);
      Tensor s = sub(x_new, x);
      Tensor y = sub(g_new, g);
      const double sy = dot(s, y);
      if (finite(sy) && sy > 1e-10 * norm2(s) * norm2(y) && y.all_finite()) {
        mem.push_back({std::move(s), std::move(y), 1.0 / sy});
        if (static_cast<int>(mem.size()) > cfg.memory) mem.pop_front();
      }
      x = std::move(x_new);
      fx = f_new;
      g = std::move(g_new);
      res.trace.push_back(fx);
      res.accepted.push_back(true);
      res.iterations = it + 1;
      if (fx < res.fx) {
        res.fx = fx;
        res.x = x;
      }
      continue;
    }

    // Even plain decrease along the gradient failed: the iterate sits on a
    // non-smooth kink whose one-sided gradient is not a descent direction.
    // Take an unconditional normalized steepest-descent step (flagged as not
    // accepted), drop the now-meaningless curvature memory, and keep going.
    // The best iterate seen so far is preserved in the result.
    const double gnorm = norm2(g);
    if (!(gnorm > 0)) {
      res.converged = true;  // exactly stationary
      break;
    }
    double esc = cfg.init_step;
    for (int k = 0; k < total_escapes; ++k) esc *= kEscapeCooling;
    bool moved = false;
    for (int bt = 0; bt <= cfg.max_backtracks; ++bt) {
      x_new = x;
      axpy(-esc / gnorm, g, x_new);
      f_new = f(x_new, nullptr);
      if (finite(f_new)) {
        moved = true;
        break;
      }
      esc *= cfg.contraction;
    }
    if (!moved) break;  // every probe point is non-finite; stop at the last good iterate
    Tensor g_new(x.shape());
    f(x_new, &g_new);
    mem.clear();
    warm_qn = cfg.init_step;
    warm_sd = cfg.init_step;
    ++total_escapes;
    res.fallback_steps.push_back(it);
    x = std::move(x_new);
    fx = f_new;
    g = std::move(g_new);
    res.trace.push_back(fx);
    res.accepted.push_back(false);
    res.iterations = it + 1;
    if (fx < res.fx) {
      res.fx = fx;
      res.x = x;
    }
  }
  return res;
}

LbfgsResult gd_minimize(const Objective& f, Tensor x0, const GdConfig& cfg) {
  LbfgsResult res;
  Tensor x = std::move(x0);
  Tensor g(x.shape());
  double fx = f(x, &g);
  res.trace.push_back(fx);
  res.accepted.push_back(true);
  res.x = x;
  res.fx = fx;
  if (!finite(fx)) {
    res.aborted_nonfinite = true;
    return res;
  }
  for (int it = 0; it < cfg.max_iters; ++it) {
    if (max_abs(g) <= cfg.tolerance) {
      res.converged = true;
      break;
    }
    const double f_prev = fx;
    axpy(-cfg.step, g, x);
    fx = f(x, &g);
    res.trace.push_back(fx);
    res.accepted.push_back(finite(fx) && fx <= f_prev);
    res.iterations = it + 1;
    if (!finite(fx)) {
      res.aborted_nonfinite = true;
      break;
    }
    if (fx < res.fx) {
      res.fx = fx;
      res.x = x;
    }
  }
  return res;
}

}  // namespace fpb
