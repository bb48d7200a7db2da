#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpb/rng.hpp"
#include "fpb/tensor.hpp"

namespace fpb::theory {

// One evaluated inequality. `constant_estimate` is the smallest C making the
// directed comparison hold (ratio of the two sides); `satisfied` evaluates
// the inequality at that constant with 1e-9 relative slack.
struct BoundCheck {
  std::string name;
  std::string direction;  // "lhs<=C*rhs" or "lhs>=rhs"
  double lhs = 0.0;
  double rhs = 0.0;
  double constant_estimate = 0.0;
  bool satisfied = false;
  std::string note;  // shapes / seed / trial metadata
};

// Pseudo-inverse perturbation bound ||pinv(W~) - pinv(W)||2 <=
// C ||pinv(W)||2 ||pinv(W~)||2 ||W~ - W||2. Requires equal exact rank
// (throws std::invalid_argument naming the precondition otherwise).
BoundCheck check_wedin(const Tensor& w, const Tensor& w_tilde);

// Equal-rank restoration bound: x = pinv(W) a_inv(O), x~ through the
// surrogate; lhs = ||x - x~||2, rhs = ||pinv(W~)||2 ||pinv(W)||2 ||W - W~||2.
// O is normalized to unit length first.
BoundCheck check_case1(const Tensor& w, const Tensor& w_tilde, const Tensor& o,
                       double leaky_alpha);

// Rank-drop instance: w = D * rotation with the last diagonal entry 1,
// w_tilde = same with that entry zeroed, o = activation of the basis vector
// annihilated by w_tilde. Self-validates rank(w) > rank(w_tilde) and the
// orthogonality of a_inv(o) to the range of w_tilde.
struct Case2Instance {
  Tensor w;
  Tensor w_tilde;
  Tensor o;
  Tensor d_gamma;        // diagonal of the scale factor of w
  Tensor d_gamma_tilde;  // diagonal for w_tilde
};
Case2Instance make_case2_instance(std::size_t n, Rng rng);

// Constant-free rank-drop lower bound ||pinv(W)O - pinv(W~)O||2 >=
// 1/||W - W~||2, plus the modulated form lhs >= C2/(||Dg||2 + ||Dg~||2)
// with C2 = 1/max(||rot||2, ||rot~||2).
struct Case2Check {
  BoundCheck lower_bound;  // constant-free form
  BoundCheck modulated;    // scale-factor form
};
Case2Check check_case2(const Case2Instance& inst);

// Triangle chain ||pW O - pW~ O~|| <= ||pW O - pW~ O|| + ||pW~ O - pW~ O~||
// (pX = pinv(X)), checked within 1e-10 absolute slack.
BoundCheck check_triangle(const Tensor& w, const Tensor& w_tilde, const Tensor& o,
                          const Tensor& o_tilde);

struct TheorySuiteConfig {
  std::size_t trials = 100;
  std::uint64_t seed = 424242;
  std::size_t max_dim = 16;
};

struct TheorySuiteResult {
  std::vector<BoundCheck> checks;
  double wedin_constant = 0.0;  // max lhs/rhs over trials
  double case1_constant = 0.0;
  double case1_slope = 0.0;  // log-log slope of lhs vs ||W-W~|| on the diagonal family
  std::size_t violations = 0;  // failed constant-free checks (gate the exit status)
  bool pass = false;
};

TheorySuiteResult run_theory_suite(const TheorySuiteConfig& cfg);

}  // namespace fpb::theory
