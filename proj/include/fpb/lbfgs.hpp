#pragma once

#include <functional>
#include <vector>

#include "fpb/tensor.hpp"

namespace fpb {

// Objective callback: returns f(x) and, when `grad_out` is non-null, fills it
// with the same-shape gradient. Line searches probe with a null `grad_out`,
// which lets implementations skip the gradient work for trial points.
using Objective = std::function<double(const Tensor& x, Tensor* grad_out)>;

struct LbfgsConfig {
  int max_iters = 100;
  int memory = 10;          // stored curvature pairs
  double tolerance = 1e-10; // stop when ||grad||_inf <= tolerance
  double init_step = 1.0;   // first trial step scale per line search
  double contraction = 0.5; // backtracking shrink factor
  double armijo_c1 = 1e-4;  // sufficient-decrease constant
  int max_backtracks = 20;
};

struct LbfgsResult {
  Tensor x;                     // best iterate seen (lowest objective)
  double fx = 0.0;              // objective at x
  std::vector<double> trace;    // objective at x0 and after every step taken
  std::vector<bool> accepted;   // per trace entry: passed a monotone acceptance test
  bool aborted_nonfinite = false;      // objective went NaN/Inf at the start
  bool converged = false;              // gradient tolerance reached
  int iterations = 0;                  // steps taken (accepted or flagged)
  std::vector<int> fallback_steps;     // iterations that left the quasi-Newton path
};

// Limited-memory BFGS with two-loop recursion and Armijo backtracking.
// When the quasi-Newton direction exhausts its backtracks the search retries
// along the raw gradient, first with the Armijo test and then with a plain
// objective decrease (both count as accepted, monotone steps and are recorded
// in fallback_steps). If not even plain decrease exists — the iterate sits on
// a kink of a non-smooth objective — a normalized steepest-descent step is
// taken unconditionally, flagged as not accepted in the trace, and the
// curvature memory is cleared. Non-finite trial points are treated as failed
// backtracks. The returned x / fx are the best iterate ever visited, so the
// flagged escape steps can only help, never hurt, the final answer.
LbfgsResult lbfgs_minimize(const Objective& f, Tensor x0, const LbfgsConfig& cfg);

struct GdConfig {
  int max_iters = 100;
  double step = 0.01;
  double tolerance = 0.0;
};

// Plain fixed-step gradient descent (used by attacks configured without the
// quasi-Newton path). Every step is taken unconditionally; a step is marked
// accepted in the trace when it did not increase the objective. x / fx report
// the best iterate visited.
LbfgsResult gd_minimize(const Objective& f, Tensor x0, const GdConfig& cfg);

}  // namespace fpb
