#pragma once

#include <vector>

#include "fpb/tensor.hpp"

namespace fpb::metrics {

// Per-image affine min-max rescale to [0,1]. A constant image maps to all
// 0.5 and sets *was_constant (when provided).
Tensor rescale01(const Tensor& x, bool* was_constant = nullptr);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population std, matching the reported "±" figures
};

// Mean-squared pixel error per restart after rescaling both sides, together
// with the ensemble mean and population std over restarts.
struct MseReport {
  MeanStd summary;
  std::vector<double> per_restart;
};
MseReport bp_mse(const Tensor& original, const std::vector<Tensor>& restored);

// Histogram of pixel values over k equal intervals of [0,1] (last interval
// closed), additively smoothed by `smoothing` per bin, normalized to sum 1.
Tensor pixel_histogram(const Tensor& x, std::size_t k, double smoothing);

// KL(p || q) = sum p_i ln(p_i/q_i) in nats, with 0 ln 0 := 0. Both inputs
// must be probability vectors of equal length; q must be strictly positive
// wherever p is.
double kl_divergence(const Tensor& p, const Tensor& q);

// Knowledge increment per restart: KL(histogram of the rescaled restoration
// || uniform). Higher = the restoration's pixel distribution is farther from
// the no-prior uniform = more knowledge gained by the adversary.
struct KiReport {
  MeanStd summary;
  std::vector<double> per_restart;
};
KiReport bp_ki(const std::vector<Tensor>& restored, std::size_t k, double smoothing);

struct PrivacyReport {
  MseReport mse;
  KiReport ki;
  std::size_t bins = 0;
  double smoothing = 0.0;
  std::size_t restarts = 0;
};
PrivacyReport score_attack(const Tensor& original, const std::vector<Tensor>& restored,
                           std::size_t bins = 100, double smoothing = 1e-6);

}  // namespace fpb::metrics
