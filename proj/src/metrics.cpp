#include "fpb/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fpb::metrics {

namespace {

MeanStd summarize(const std::vector<double>& xs) {
  MeanStd s;
  if (xs.empty()) return s;
  double sum = 0.0;
  for (double v : xs) sum += v;
  s.mean = sum / static_cast<double>(xs.size());
  double var = 0.0;
  for (double v : xs) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(xs.size()));
  return s;
}

}  // namespace

Tensor rescale01(const Tensor& x, bool* was_constant) {
  if (x.size() == 0) throw std::invalid_argument("rescale01: empty tensor");
  double lo = x[0], hi = x[0];
  for (std::size_t i = 1; i < x.size(); ++i) {
    lo = std::min(lo, x[i]);
    hi = std::max(hi, x[i]);
  }
  Tensor out(x.shape());
  if (hi == lo) {
    if (was_constant) *was_constant = true;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5;
    return out;
  }
  if (was_constant) *was_constant = false;
  const double span = hi - lo;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x[i] - lo) / span;
  return out;
}

MseReport bp_mse(const Tensor& original, const std::vector<Tensor>& restored) {
  if (restored.empty()) throw std::invalid_argument("bp_mse: no restorations");
  const Tensor ref = rescale01(original);
  MseReport rep;
  rep.per_restart.reserve(restored.size());
  for (const Tensor& r : restored) {
    if (r.size() != ref.size()) {
      throw std::invalid_argument("bp_mse: restoration size differs from original");
    }
    const Tensor rs = rescale01(r);
    double acc = 0.0;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      const double d = rs[i] - ref[i];
      acc += d * d;
    }
    rep.per_restart.push_back(acc / static_cast<double>(rs.size()));
  }
  rep.summary = summarize(rep.per_restart);
  return rep;
}

Tensor pixel_histogram(const Tensor& x, std::size_t k, double smoothing) {
  if (k < 2) throw std::invalid_argument("pixel_histogram: need at least 2 bins");
  if (smoothing < 0) throw std::invalid_argument("pixel_histogram: smoothing must be >= 0");
  if (x.size() == 0) throw std::invalid_argument("pixel_histogram: empty tensor");
  Tensor h({k});
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (v < 0.0 || v > 1.0) {
      throw std::invalid_argument("pixel_histogram: values must lie in [0,1]; rescale first");
    }
    std::size_t bin = static_cast<std::size_t>(v * static_cast<double>(k));
    if (bin >= k) bin = k - 1;  // v == 1.0 falls into the closed last interval
    h[bin] += 1.0;
  }
  double total = 0.0;
  for (std::size_t b = 0; b < k; ++b) {
    h[b] += smoothing;
    total += h[b];
  }
  for (std::size_t b = 0; b < k; ++b) h[b] /= total;
  return h;
}

double kl_divergence(const Tensor& p, const Tensor& q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  double psum = 0.0, qsum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || q[i] < 0) throw std::invalid_argument("kl_divergence: negative entry");
    psum += p[i];
    qsum += q[i];
  }
  if (std::fabs(psum - 1.0) > 1e-9 || std::fabs(qsum - 1.0) > 1e-9) {
    throw std::invalid_argument("kl_divergence: inputs must sum to 1");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;  // 0 ln 0 := 0
    if (q[i] == 0.0) {
      throw std::invalid_argument("kl_divergence: q is zero where p is positive");
    }
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

KiReport bp_ki(const std::vector<Tensor>& restored, std::size_t k, double smoothing) {
  if (restored.empty()) throw std::invalid_argument("bp_ki: no restorations");
  Tensor uniform({k});
  for (std::size_t b = 0; b < k; ++b) uniform[b] = 1.0 / static_cast<double>(k);
  KiReport rep;
  rep.per_restart.reserve(restored.size());
  for (const Tensor& r : restored) {
    const Tensor rs = rescale01(r);
    const Tensor h = pixel_histogram(rs, k, smoothing);
    rep.per_restart.push_back(kl_divergence(h, uniform));
  }
  rep.summary = summarize(rep.per_restart);
  return rep;
}

PrivacyReport score_attack(const Tensor& original, const std::vector<Tensor>& restored,
                           std::size_t bins, double smoothing) {
  PrivacyReport rep;
  rep.mse = bp_mse(original, restored);
  rep.ki = bp_ki(restored, bins, smoothing);
  rep.bins = bins;
  rep.smoothing = smoothing;
  rep.restarts = restored.size();
  return rep;
}

}  // namespace fpb::metrics
