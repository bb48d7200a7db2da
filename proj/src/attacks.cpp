#include "fpb/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "fpb/autodiff.hpp"
#include "fpb/lbfgs.hpp"
#include "fpb/linalg.hpp"

namespace fpb::attacks {

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "dlg") return AttackKind::Dlg;
  if (s == "mia") return AttackKind::Mia;
  if (s == "pinv_surrogate" || s == "pinv") return AttackKind::PinvSurrogate;
  throw std::invalid_argument("attacks: unknown attack kind '" + s + "'");
}

std::string attack_kind_to_string(AttackKind k) {
  switch (k) {
    case AttackKind::Dlg: return "dlg";
    case AttackKind::Mia: return "mia";
    case AttackKind::PinvSurrogate: return "pinv_surrogate";
  }
  return "?";
}

void validate(const AttackConfig& cfg) {
  if (cfg.restarts < 1) throw std::invalid_argument("attacks: restarts must be >= 1");
  if (cfg.lambda_tv < 0) throw std::invalid_argument("attacks: lambda_tv must be >= 0");
  if (cfg.optimizer == AttackOptimizer::Gd && !(cfg.lr > 0)) {
    throw std::invalid_argument("attacks: gd optimizer needs a positive lr");
  }
  if (cfg.gradient_path == GradientPath::FiniteDiff && !(cfg.fd_step > 0)) {
    throw std::invalid_argument("attacks: finite-difference step must be positive");
  }
}

SurrogateModel surrogate_from_observation(const protect::Observation& obs, Rng rng,
                                          double passport_init_scale) {
  SurrogateModel s;
  nn::Model fresh = nn::init_model(obs.spec, rng.child("surrogate_params"));
  s.model.spec = obs.spec;
  s.model.params = std::move(fresh.params);
  for (const auto& [k, v] : obs.params) {
    auto it = s.model.params.find(k);
    if (it == s.model.params.end()) {
      throw std::invalid_argument("surrogate_from_observation: unknown exposed key '" + k + "'");
    }
    if (!shape_eq(it->second.shape(), v.shape())) {
      throw std::invalid_argument("surrogate_from_observation: shape mismatch for '" + k + "'");
    }
    it->second = v;
  }
  bool has_passport_layer = false;
  for (const auto& l : obs.spec.layers) {
    if (l.kind == nn::LayerKind::Passport) has_passport_layer = true;
  }
  if (has_passport_layer) {
    s.passports =
        nn::init_passports(obs.spec, rng.child("surrogate_passports"), passport_init_scale);
  }
  return s;
}

nn::Model prefix_model(const nn::Model& full, std::size_t layers) {
  if (layers == 0 || layers > full.spec.layers.size()) {
    throw std::invalid_argument("prefix_model: layer count out of range");
  }
  nn::Model out;
  out.spec = full.spec;
  out.spec.name = full.spec.name + "_prefix";
  out.spec.classes = 0;  // headless segment: no logits contract
  out.spec.layers.assign(full.spec.layers.begin(),
                         full.spec.layers.begin() + static_cast<std::ptrdiff_t>(layers));
  for (const auto& [k, v] : full.params) {
    if (!k.empty() && k[0] == 'L' && protect::key_is_private(k, layers)) out.params.emplace(k, v);
  }
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Restart driver shared by both iterative attacks: draws an init, runs the
// configured optimizer, retries on a non-finite abort (counted), and records
// the restored input, trace and final objective.
void run_restarts(const AttackConfig& cfg, const Shape& input_shape, std::size_t extra_dims,
                  const Objective& objective, Rng rng, AttackOutcome& out) {
  const std::size_t nx = shape_numel(input_shape);
  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    for (std::size_t attempt = 0;; ++attempt) {
      Rng rr = rng.child("restart").child(r).child(attempt);
      Tensor theta0 = rr.normal_tensor({nx + extra_dims}, 1.0);

      LbfgsResult result;
      if (cfg.optimizer == AttackOptimizer::Lbfgs) {
        LbfgsConfig lc;
        lc.max_iters = static_cast<int>(cfg.iterations);
        result = lbfgs_minimize(objective, theta0, lc);
      } else {
        GdConfig gc;
        gc.max_iters = static_cast<int>(cfg.iterations);
        gc.step = cfg.lr;
        result = gd_minimize(objective, theta0, gc);
      }

      const bool bad = result.aborted_nonfinite || !std::isfinite(result.fx);
      if (bad && attempt < 4) {
        ++out.nan_restarts;
        continue;  // fresh init, same restart slot
      }
      Tensor x(input_shape);
      for (std::size_t i = 0; i < nx; ++i) x[i] = result.x[i];
      out.restored.push_back(std::move(x));
      out.traces.push_back(std::move(result.trace));
      out.trace_accepted.push_back(std::move(result.accepted));
      out.final_objective.push_back(result.fx);
      break;
    }
  }
}

// Wraps a value-only objective with central finite differences; the
// difference loop only runs when the caller wants a gradient.
Objective finite_diff_wrap(const std::function<double(const Tensor&)>& value_fn, double h) {
  return [value_fn, h](const Tensor& x, Tensor* grad_out) {
    if (!grad_out) return value_fn(x);
    *grad_out = Tensor::zeros(x.shape());
    Tensor& grad = *grad_out;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double xi = x[i];
      probe[i] = xi + h;
      const double fp = value_fn(probe);
      probe[i] = xi - h;
      const double fm = value_fn(probe);
      probe[i] = xi;
      grad[i] = (fp - fm) / (2.0 * h);
    }
    return value_fn(x);
  };
}

struct DlgProblem {
  nn::Model model;            // exposed params + attacker's surrogate fill
  nn::PassportMap passports;  // attacker's own (empty if spec has none)
  std::vector<std::string> match_keys;
  const protect::Observation* obs = nullptr;
  Shape input_shape;  // [1, ...sample]
  std::size_t classes = 0;
  double lambda_tv = 0.0;
  bool constrain_labels = true;
};

// Objective over theta = [dummy input | dummy label logits]. The dummy
// gradient is produced by differentiating the training loss inside the
// graph, so the matching loss stays differentiable w.r.t. the dummies.
double dlg_value_grad(const DlgProblem& p, const Tensor& theta, Tensor* grad_out) {
  if (!theta.all_finite()) {
    if (grad_out) *grad_out = Tensor::zeros(theta.shape());
    return kInf;
  }
  const std::size_t nx = shape_numel(p.input_shape);
  Tensor x(p.input_shape);
  for (std::size_t i = 0; i < nx; ++i) x[i] = theta[i];
  Tensor ylog({1, p.classes});
  for (std::size_t i = 0; i < p.classes; ++i) ylog[i] = theta[nx + i];

  const nn::PassportMap* pp = p.passports.empty() ? nullptr : &p.passports;
  ad::Graph g;
  nn::ParamNodes pn = nn::make_param_nodes(g, p.model, pp);
  const ad::NodeId xn = g.leaf(x, true, "dummy_x");
  const ad::NodeId yn = g.leaf(ylog, true, "dummy_y");
  nn::ForwardNodes fwd = nn::forward_graph(g, p.model, xn, pn, pp);
  const ad::NodeId target = p.constrain_labels ? nn::softmax(g, yn) : yn;
  const ad::NodeId train_loss = nn::cross_entropy(g, fwd.output, target);

  std::vector<ad::NodeId> wrt;
  wrt.reserve(p.match_keys.size());
  for (const std::string& k : p.match_keys) wrt.push_back(pn.nodes.at(k));
  const std::vector<ad::NodeId> dummy_grads = g.backward(train_loss, wrt);

  ad::NodeId obj = -1;
  for (std::size_t i = 0; i < p.match_keys.size(); ++i) {
    const Tensor& observed = p.obs->gradient.at(p.match_keys[i]);
    const ad::NodeId flat = g.reshape(dummy_grads[i], {observed.size()});
    const ad::NodeId diff = g.sub(flat, g.constant(observed.reshaped({observed.size()})));
    const ad::NodeId sq = g.sum_all(g.mul(diff, diff));
    obj = (obj < 0) ? sq : g.add(obj, sq);
  }
  if (p.lambda_tv > 0.0) {
    obj = g.add(obj, g.scale(nn::total_variation(g, xn), p.lambda_tv));
  }
  const double value = g.value(obj)[0];
  if (grad_out) {
    std::vector<Tensor> gs = g.grad(obj, {xn, yn});
    Tensor packed({theta.size()});
    for (std::size_t i = 0; i < nx; ++i) packed[i] = gs[0][i];
    for (std::size_t i = 0; i < p.classes; ++i) packed[nx + i] = gs[1][i];
    *grad_out = std::move(packed);
  }
  return value;
}

struct MiaProblem {
  const nn::Model* segment = nullptr;
  const nn::PassportMap* passports = nullptr;
  const Tensor* leaked = nullptr;
  Shape input_shape;
  std::size_t out_layer = 0;  // boundary index of the segment's last layer
  double lambda_tv = 0.0;
};

double mia_value_grad(const MiaProblem& p, const Tensor& theta, Tensor* grad_out) {
  if (!theta.all_finite()) {
    if (grad_out) *grad_out = Tensor::zeros(theta.shape());
    return kInf;
  }
  Tensor x(p.input_shape);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = theta[i];

  ad::Graph g;
  nn::ParamNodes pn = nn::make_param_nodes(g, *p.segment, p.passports);
  const ad::NodeId xn = g.leaf(x, true, "probe_x");
  nn::ForwardNodes fwd = nn::forward_graph(g, *p.segment, xn, pn, p.passports);
  const ad::NodeId outn = fwd.boundary.at(p.out_layer);
  const std::size_t n = p.leaked->size();
  const ad::NodeId diff =
      g.sub(g.reshape(outn, {n}), g.constant(p.leaked->reshaped({n})));
  ad::NodeId obj = g.sum_all(g.mul(diff, diff));
  if (p.lambda_tv > 0.0) {
    obj = g.add(obj, g.scale(nn::total_variation(g, xn), p.lambda_tv));
  }
  const double value = g.value(obj)[0];
  if (grad_out) {
    std::vector<Tensor> gs = g.grad(obj, {xn});
    *grad_out = gs[0].reshaped(theta.shape());
  }
  return value;
}

Shape sample_shape(const nn::ModelSpec& spec) {
  Shape s{1};
  s.insert(s.end(), spec.input_shape.begin(), spec.input_shape.end());
  return s;
}

}  // namespace

AttackOutcome dlg_attack(const protect::Observation& obs, const AttackConfig& cfg, Rng rng) {
  validate(cfg);
  if (obs.gradient.empty()) {
    throw std::invalid_argument("dlg_attack: observation carries no gradient record");
  }

  DlgProblem p;
  SurrogateModel s = surrogate_from_observation(obs, rng.child("surrogate"));
  p.model = std::move(s.model);
  p.passports = std::move(s.passports);
  for (const auto& [k, v] : obs.gradient) p.match_keys.push_back(k);
  p.obs = &obs;
  p.input_shape = sample_shape(obs.spec);
  p.classes = obs.spec.classes;
  p.lambda_tv = cfg.lambda_tv;
  p.constrain_labels = cfg.constrain_labels;

  Objective objective;
  if (cfg.gradient_path == GradientPath::Graph) {
    objective = [&p](const Tensor& theta, Tensor* grad) {
      return dlg_value_grad(p, theta, grad);
    };
  } else {
    objective = finite_diff_wrap(
        [&p](const Tensor& theta) { return dlg_value_grad(p, theta, nullptr); }, cfg.fd_step);
  }

  AttackOutcome out;
  out.target_ref = obs.target_ref;
  run_restarts(cfg, p.input_shape, p.classes, objective, rng, out);
  return out;
}

AttackOutcome mia_attack(const nn::Model& segment, const nn::PassportMap* passports,
                         const Tensor& leaked_activation, const AttackConfig& cfg, Rng rng) {
  validate(cfg);
  if (segment.spec.layers.empty()) {
    throw std::invalid_argument("mia_attack: segment model has no layers");
  }

  MiaProblem p;
  p.segment = &segment;
  p.passports = (passports && !passports->empty()) ? passports : nullptr;
  p.leaked = &leaked_activation;
  p.input_shape = sample_shape(segment.spec);
  p.out_layer = segment.spec.layers.size() - 1;
  p.lambda_tv = cfg.lambda_tv;

  {  // Probe with zeros to validate the leaked-activation shape up front.
    const nn::ForwardResult probe =
        nn::forward(segment, Tensor::zeros(p.input_shape), p.passports);
    const Tensor& bout = probe.boundary.at(p.out_layer);
    if (bout.size() != leaked_activation.size()) {
      throw std::invalid_argument("mia_attack: leaked activation has " +
                                  std::to_string(leaked_activation.size()) +
                                  " values, segment emits " + std::to_string(bout.size()));
    }
  }

  Objective objective;
  if (cfg.gradient_path == GradientPath::Graph) {
    objective = [&p](const Tensor& theta, Tensor* grad) {
      return mia_value_grad(p, theta, grad);
    };
  } else {
    objective = finite_diff_wrap(
        [&p](const Tensor& theta) { return mia_value_grad(p, theta, nullptr); }, cfg.fd_step);
  }

  AttackOutcome out;
  run_restarts(cfg, p.input_shape, 0, objective, rng, out);
  return out;
}

LayerInputReconstruction reconstruct_layer_input(const Tensor& grad_w, const Tensor& grad_b,
                                                 double tolerance) {
  if (grad_w.ndim() != 2) throw std::invalid_argument("reconstruct_layer_input: grad_w must be 2-D");
  const std::size_t m = grad_w.rows(), n = grad_w.cols();
  if (grad_b.size() != m) {
    throw std::invalid_argument("reconstruct_layer_input: grad_b length must match grad_w rows");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < m; ++i) {
    if (std::fabs(grad_b[i]) > std::fabs(grad_b[best])) best = i;
  }
  if (!(std::fabs(grad_b[best]) > tolerance)) {
    throw std::invalid_argument("reconstruct_layer_input: non-singular condition violated "
                                "(all bias gradients below tolerance)");
  }

  LayerInputReconstruction rec;
  rec.row = best;
  rec.input = Tensor({n});
  for (std::size_t j = 0; j < n; ++j) rec.input[j] = grad_w.at(best, j) / grad_b[best];
  for (std::size_t i = 0; i < m; ++i) {
    if (i == best || !(std::fabs(grad_b[i]) > tolerance)) continue;
    for (std::size_t j = 0; j < n; ++j) {
      const double alt = grad_w.at(i, j) / grad_b[i];
      rec.max_disagreement = std::max(rec.max_disagreement, std::fabs(alt - rec.input[j]));
    }
  }
  return rec;
}

Tensor pinv_surrogate_restore(const Tensor& w, const Tensor& shift, const Tensor& d_gamma,
                              const Tensor& o_leaked, double leaky_alpha) {
  if (w.ndim() != 2) throw std::invalid_argument("pinv_surrogate_restore: w must be 2-D");
  const std::size_t m = w.rows();
  if (o_leaked.size() != m) {
    throw std::invalid_argument("pinv_surrogate_restore: leaked output length must match rows");
  }
  if (shift.size() != 0 && shift.size() != m) {
    throw std::invalid_argument("pinv_surrogate_restore: shift length must match rows");
  }
  if (d_gamma.size() != 0 && d_gamma.size() != m) {
    throw std::invalid_argument("pinv_surrogate_restore: scale length must match rows");
  }

  Tensor rhs({m});
  for (std::size_t i = 0; i < m; ++i) {
    const double o = o_leaked[i];
    double pre;
    if (o >= 0.0) {
      pre = o;
    } else if (leaky_alpha > 0.0) {
      pre = o / leaky_alpha;
    } else {
      throw std::invalid_argument(
          "pinv_surrogate_restore: activation not invertible at a negative output");
    }
    rhs[i] = pre - (shift.size() ? shift[i] : 0.0);
  }

  Tensor a = w;
  if (d_gamma.size()) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < a.cols(); ++j) a.at(i, j) *= d_gamma[i];
    }
  }
  return pinv_apply(a, rhs);
}

}  // namespace fpb::attacks
