#include "fpb/nn.hpp"

#include <cmath>
#include <functional>
#include <mutex>
#include <sstream>
#include <stdexcept>

namespace fpb::nn {

namespace {

// ---- shape walking ----------------------------------------------------------

struct SampleShape {
  bool image = false;
  std::size_t d = 0;           // flat width when !image
  std::size_t c = 0, h = 0, w = 0;
  std::size_t numel() const { return image ? c * h * w : d; }
};

SampleShape from_input_shape(const Shape& s) {
  SampleShape ss;
  if (s.size() == 1) {
    ss.d = s[0];
  } else if (s.size() == 3) {
    ss.image = true;
    ss.c = s[0];
    ss.h = s[1];
    ss.w = s[2];
  } else {
    throw std::invalid_argument("model: input shape must be [d] or [c,h,w], got " +
                                shape_str(s));
  }
  return ss;
}

std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t pad) {
  const std::size_t padded = in + 2 * pad;
  if (padded < k) throw std::invalid_argument("conv: kernel larger than padded input");
  return padded - k + 1;
}

// Input sample shape of each layer plus the final output shape at the end.
std::vector<SampleShape> walk_shapes(const ModelSpec& spec) {
  std::vector<SampleShape> shapes;
  SampleShape cur = from_input_shape(spec.input_shape);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    shapes.push_back(cur);
    const LayerSpec& l = spec.layers[i];
    std::ostringstream who;
    who << "layer L" << i;
    switch (l.kind) {
      case LayerKind::Linear: {
        if (cur.numel() != l.in) {
          throw std::invalid_argument(who.str() + ": linear expects " + std::to_string(l.in) +
                                      " inputs, previous layer provides " +
                                      std::to_string(cur.numel()));
        }
        cur = SampleShape{};
        cur.d = l.out;
        break;
      }
      case LayerKind::Conv: {
        if (!cur.image || cur.c != l.in_ch) {
          throw std::invalid_argument(who.str() + ": conv expects image input with " +
                                      std::to_string(l.in_ch) + " channels");
        }
        SampleShape next;
        next.image = true;
        next.c = l.out_ch;
        next.h = conv_out_dim(cur.h, l.kh, l.pad);
        next.w = conv_out_dim(cur.w, l.kw, l.pad);
        cur = next;
        break;
      }
      case LayerKind::Activation:
        break;
      case LayerKind::AvgPool: {
        if (!cur.image) throw std::invalid_argument(who.str() + ": pool expects image input");
        if (l.pool == 0 || cur.h % l.pool || cur.w % l.pool) {
          throw std::invalid_argument(who.str() + ": pool window must divide spatial dims");
        }
        cur.h /= l.pool;
        cur.w /= l.pool;
        break;
      }
      case LayerKind::ScaleBias:
      case LayerKind::Passport: {
        const std::size_t ch = cur.image ? cur.c : cur.d;
        if (l.channels != ch) {
          throw std::invalid_argument(who.str() + ": channel count " +
                                      std::to_string(l.channels) + " does not match input " +
                                      std::to_string(ch));
        }
        if (i == 0 || (spec.layers[i - 1].kind != LayerKind::Conv &&
                       spec.layers[i - 1].kind != LayerKind::Linear)) {
          throw std::invalid_argument(who.str() +
                                      ": modulation layer must directly follow conv or linear");
        }
        break;
      }
    }
  }
  shapes.push_back(cur);
  return shapes;
}

std::string pkey(std::size_t i, const char* field) {
  return "L" + std::to_string(i) + "." + field;
}

// ---- cached index tables ----------------------------------------------------

std::map<std::string, ad::IndexTable>& table_cache() {
  static std::map<std::string, ad::IndexTable> cache;
  return cache;
}
std::mutex& table_mutex() {
  static std::mutex m;
  return m;
}

ad::IndexTable cached(const std::string& key, const std::function<std::vector<std::int64_t>()>& make) {
  std::lock_guard<std::mutex> lock(table_mutex());
  auto& cache = table_cache();
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto table = std::make_shared<const std::vector<std::int64_t>>(make());
  cache.emplace(key, table);
  return table;
}

}  // namespace

std::size_t autoencoder_hidden(std::size_t channels) {
  return std::max<std::size_t>(channels / 4, 4);
}

ConvPlan conv_plan(const LayerSpec& l, std::size_t b, std::size_t h, std::size_t w) {
  ConvPlan plan;
  const std::size_t oh = conv_out_dim(h, l.kh, l.pad);
  const std::size_t ow = conv_out_dim(w, l.kw, l.pad);
  const std::size_t K = l.in_ch * l.kh * l.kw;
  plan.oh = oh;
  plan.ow = ow;
  plan.k = K;

  std::ostringstream key;
  key << "im2col:c" << l.in_ch << ":k" << l.kh << "x" << l.kw << ":p" << l.pad << ":b" << b
      << ":h" << h << ":w" << w;
  plan.cols = cached(key.str(), [&] {
    std::vector<std::int64_t> t(b * oh * ow * K);
    std::size_t pos = 0;
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox)
          for (std::size_t ci = 0; ci < l.in_ch; ++ci)
            for (std::size_t ky = 0; ky < l.kh; ++ky)
              for (std::size_t kx = 0; kx < l.kw; ++kx) {
                const std::int64_t y = static_cast<std::int64_t>(oy + ky) -
                                       static_cast<std::int64_t>(l.pad);
                const std::int64_t x = static_cast<std::int64_t>(ox + kx) -
                                       static_cast<std::int64_t>(l.pad);
                t[pos++] = (y >= 0 && y < static_cast<std::int64_t>(h) && x >= 0 &&
                            x < static_cast<std::int64_t>(w))
                               ? static_cast<std::int64_t>(((bi * l.in_ch + ci) * h + y) * w + x)
                               : -1;
              }
    return t;
  });

  std::ostringstream key2;
  key2 << "cols2img:c" << l.out_ch << ":b" << b << ":h" << oh << ":w" << ow;
  const std::size_t out_ch = l.out_ch;
  plan.to_image = cached(key2.str(), [&] {
    std::vector<std::int64_t> t(b * out_ch * oh * ow);
    std::size_t pos = 0;
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t c = 0; c < out_ch; ++c)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox)
            t[pos++] = static_cast<std::int64_t>(((bi * oh + oy) * ow + ox) * out_ch + c);
    return t;
  });
  return plan;
}

ad::IndexTable pool_table(std::size_t b, std::size_t c, std::size_t h, std::size_t w,
                          std::size_t k) {
  std::ostringstream key;
  key << "pool:b" << b << ":c" << c << ":h" << h << ":w" << w << ":k" << k;
  return cached(key.str(), [&] {
    const std::size_t oh = h / k, ow = w / k;
    std::vector<std::int64_t> t(b * c * oh * ow * k * k);
    std::size_t pos = 0;
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox)
            for (std::size_t dy = 0; dy < k; ++dy)
              for (std::size_t dx = 0; dx < k; ++dx)
                t[pos++] = static_cast<std::int64_t>(
                    ((bi * c + ci) * h + oy * k + dy) * w + ox * k + dx);
    return t;
  });
}

// ---- spec construction ------------------------------------------------------

ModelSpec make_model_spec(const std::string& name, const ModelOptions& opt) {
  if (opt.classes < 2) throw std::invalid_argument("model: need at least two classes");
  ModelSpec spec;
  spec.name = name;
  spec.classes = opt.classes;
  auto scale_slot = [&](std::size_t channels) {
    LayerSpec l;
    l.kind = opt.passport_mode ? LayerKind::Passport : LayerKind::ScaleBias;
    l.channels = channels;
    spec.layers.push_back(l);
  };
  auto act = [&] {
    LayerSpec l;
    l.kind = LayerKind::Activation;
    l.alpha = 0.2;
    spec.layers.push_back(l);
  };
  auto pool = [&] {
    LayerSpec l;
    l.kind = LayerKind::AvgPool;
    l.pool = 2;
    spec.layers.push_back(l);
  };
  auto linear = [&](std::size_t in, std::size_t out) {
    LayerSpec l;
    l.kind = LayerKind::Linear;
    l.in = in;
    l.out = out;
    spec.layers.push_back(l);
  };
  auto conv = [&](std::size_t ic, std::size_t oc, std::size_t k, std::size_t pad) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.in_ch = ic;
    l.out_ch = oc;
    l.kh = k;
    l.kw = k;
    l.pad = pad;
    spec.layers.push_back(l);
  };

  if (name == "linear") {
    spec.input_shape = {opt.input_dim};
    linear(opt.input_dim, opt.classes);
  } else if (name == "mlp") {
    spec.input_shape = {opt.input_dim};
    linear(opt.input_dim, opt.hidden);
    if (opt.with_scale_layer || opt.passport_mode) scale_slot(opt.hidden);
    act();
    linear(opt.hidden, opt.classes);
  } else if (name == "lenet") {
    spec.input_shape = {1, 28, 28};
    conv(1, 6, 5, 2);
    if (opt.with_scale_layer || opt.passport_mode) scale_slot(6);
    act();
    pool();
    conv(6, 16, 5, 0);
    act();
    pool();
    conv(16, 120, 5, 0);
    act();
    linear(120, 84);
    act();
    linear(84, opt.classes);
  } else if (name == "alexnet") {
    spec.input_shape = {3, 32, 32};
    conv(3, 64, 5, 2);
    if (opt.with_scale_layer || opt.passport_mode) scale_slot(64);
    act();
    pool();
    conv(64, 192, 5, 2);
    act();
    pool();
    conv(192, 384, 3, 1);
    act();
    conv(384, 256, 3, 1);
    act();
    conv(256, 256, 3, 1);
    act();
    pool();
    linear(256 * 4 * 4, opt.classes);
  } else {
    throw std::invalid_argument("model: unknown architecture '" + name + "'");
  }

  if (opt.private_prefix >= spec.layers.size()) {
    throw std::invalid_argument("model: private prefix must leave at least one public layer");
  }
  for (std::size_t i = 0; i < opt.private_prefix; ++i)
    spec.layers[i].visibility = Visibility::Private;
  validate_spec(spec);
  return spec;
}

void validate_spec(const ModelSpec& spec) {
  if (spec.layers.empty()) throw std::invalid_argument("model: no layers");
  auto shapes = walk_shapes(spec);
  // classes == 0 marks a headless segment (a network prefix handled as a
  // standalone map): no logits contract, and it may be entirely private.
  const bool headless = spec.classes == 0;
  const SampleShape& out = shapes.back();
  if (!headless && (out.image || out.d != spec.classes)) {
    throw std::invalid_argument("model: final layer must emit [classes] logits");
  }
  bool seen_public = false;
  std::size_t n_private = 0;
  for (const LayerSpec& l : spec.layers) {
    if (l.visibility == Visibility::Private) {
      if (seen_public) {
        throw std::invalid_argument("model: private layers must form a contiguous prefix");
      }
      ++n_private;
    } else {
      seen_public = true;
    }
  }
  if (!headless && n_private == spec.layers.size()) {
    throw std::invalid_argument("model: at least one layer must be public");
  }
}

std::size_t private_prefix_count(const ModelSpec& spec) {
  std::size_t n = 0;
  while (n < spec.layers.size() && spec.layers[n].visibility == Visibility::Private) ++n;
  return n;
}

Model init_model(const ModelSpec& spec, Rng rng) {
  validate_spec(spec);
  Model m;
  m.spec = spec;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    Rng lr = rng.child(i);
    switch (l.kind) {
      case LayerKind::Linear: {
        const double std = std::sqrt(2.0 / static_cast<double>(l.in));
        m.params[pkey(i, "w")] = lr.normal_tensor({l.out, l.in}, std);
        m.params[pkey(i, "b")] = Tensor({l.out});
        break;
      }
      case LayerKind::Conv: {
        const std::size_t fan_in = l.in_ch * l.kh * l.kw;
        const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
        m.params[pkey(i, "w")] = lr.normal_tensor({l.out_ch, fan_in}, std);
        m.params[pkey(i, "b")] = Tensor({l.out_ch});
        break;
      }
      case LayerKind::ScaleBias:
        m.params[pkey(i, "gamma")] = Tensor::full({l.channels}, 1.0);
        m.params[pkey(i, "beta")] = Tensor({l.channels});
        break;
      case LayerKind::Activation:
      case LayerKind::AvgPool:
      case LayerKind::Passport:
        break;  // no owned parameters
    }
  }
  return m;
}

PassportMap init_passports(const ModelSpec& spec, Rng rng, double init_scale) {
  validate_spec(spec);
  auto shapes = walk_shapes(spec);
  PassportMap out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind != LayerKind::Passport) continue;
    const SampleShape& in = shapes[i - 1];  // input of the modulated layer
    Shape pshape = in.image ? Shape{in.c, in.h, in.w} : Shape{in.d};
    const std::size_t ch = spec.layers[i].channels;
    const std::size_t hid = autoencoder_hidden(ch);
    Rng pr = rng.child(i);
    Passport pp;
    pp.p_gamma = pr.child("p_gamma").normal_tensor(pshape);
    pp.p_beta = pr.child("p_beta").normal_tensor(pshape);
    pp.enc_w = pr.child("enc_w").normal_tensor({hid, ch},
                                               init_scale / std::sqrt(static_cast<double>(ch)));
    pp.enc_b = Tensor({hid});
    pp.dec_w = pr.child("dec_w").normal_tensor({ch, hid},
                                               init_scale / std::sqrt(static_cast<double>(hid)));
    pp.dec_b = Tensor({ch});
    out.emplace(i, std::move(pp));
  }
  return out;
}

// ---- forward ----------------------------------------------------------------

ParamNodes make_param_nodes(ad::Graph& g, const Model& model, const PassportMap* passports) {
  ParamNodes pn;
  for (const auto& [k, v] : model.params) pn.nodes[k] = g.leaf(v, true, k);
  if (passports) {
    for (const auto& [i, pp] : *passports) {
      const std::string p = "P" + std::to_string(i) + ".";
      pn.nodes[p + "enc_w"] = g.leaf(pp.enc_w, true, p + "enc_w");
      pn.nodes[p + "enc_b"] = g.leaf(pp.enc_b, true, p + "enc_b");
      pn.nodes[p + "dec_w"] = g.leaf(pp.dec_w, true, p + "dec_w");
      pn.nodes[p + "dec_b"] = g.leaf(pp.dec_b, true, p + "dec_b");
    }
  }
  return pn;
}

namespace {

struct Cursor {
  ad::NodeId node = -1;
  enum Layout { Flat, Image, Cols } layout = Flat;
  std::size_t b = 0, c = 0, h = 0, w = 0, d = 0;
};

// [B*h*w, C] matmul layout -> [B,C,h,w].
ad::NodeId cols_to_image(ad::Graph& g, const Cursor& cur) {
  std::ostringstream key;
  key << "cols2img:c" << cur.c << ":b" << cur.b << ":h" << cur.h << ":w" << cur.w;
  auto table = cached(key.str(), [&] {
    std::vector<std::int64_t> t(cur.b * cur.c * cur.h * cur.w);
    std::size_t pos = 0;
    for (std::size_t bi = 0; bi < cur.b; ++bi)
      for (std::size_t c = 0; c < cur.c; ++c)
        for (std::size_t y = 0; y < cur.h; ++y)
          for (std::size_t x = 0; x < cur.w; ++x)
            t[pos++] = static_cast<std::int64_t>(((bi * cur.h + y) * cur.w + x) * cur.c + c);
    return t;
  });
  return g.gather(cur.node, table, {cur.b, cur.c, cur.h, cur.w});
}

// [B,C,h,w] -> [B*h*w, C].
ad::NodeId image_to_cols(ad::Graph& g, const Cursor& cur) {
  std::ostringstream key;
  key << "img2cols:c" << cur.c << ":b" << cur.b << ":h" << cur.h << ":w" << cur.w;
  auto table = cached(key.str(), [&] {
    std::vector<std::int64_t> t(cur.b * cur.c * cur.h * cur.w);
    std::size_t pos = 0;
    for (std::size_t bi = 0; bi < cur.b; ++bi)
      for (std::size_t y = 0; y < cur.h; ++y)
        for (std::size_t x = 0; x < cur.w; ++x)
          for (std::size_t c = 0; c < cur.c; ++c)
            t[pos++] = static_cast<std::int64_t>(((bi * cur.c + c) * cur.h + y) * cur.w + x);
    return t;
  });
  return g.gather(cur.node, table, {cur.b * cur.h * cur.w, cur.c});
}

Cursor canonical(ad::Graph& g, Cursor cur) {
  if (cur.layout == Cursor::Cols) {
    cur.node = cols_to_image(g, cur);
    cur.layout = Cursor::Image;
  }
  return cur;
}

ad::NodeId row_of(ad::Graph& g, ad::NodeId vec, std::size_t n) {
  return g.reshape(vec, {1, n});
}

// Per-channel modulation values derived from a passport tensor: the passport
// is pushed through the preceding layer's weights, an autoencoder, and a
// per-channel average.
ad::NodeId derived_modulation(ad::Graph& g, const LayerSpec& prev, const SampleShape& prev_in,
                              ad::NodeId w_node, const Tensor& passport, ad::NodeId enc_w,
                              ad::NodeId enc_b, ad::NodeId dec_w, ad::NodeId dec_b) {
  ad::NodeId cols;
  std::size_t s_rows;
  if (prev.kind == LayerKind::Linear) {
    ad::NodeId p = g.constant(passport.reshaped({1, prev.in}));
    cols = g.matmul(p, g.transpose(w_node));
    s_rows = 1;
  } else {
    ConvPlan plan = conv_plan(prev, 1, prev_in.h, prev_in.w);
    ad::NodeId p = g.constant(passport.reshaped({1, prev.in_ch, prev_in.h, prev_in.w}));
    ad::NodeId pc = g.gather(p, plan.cols, {plan.oh * plan.ow, plan.k});
    cols = g.matmul(pc, g.transpose(w_node));
    s_rows = plan.oh * plan.ow;
  }
  const std::size_t ch = g.value(cols).cols();
  const std::size_t hid = g.value(enc_w).rows();
  ad::NodeId e = g.add(g.matmul(cols, g.transpose(enc_w)),
                       g.broadcast_row(row_of(g, enc_b, hid), s_rows));
  ad::NodeId d = g.add(g.matmul(e, g.transpose(dec_w)),
                       g.broadcast_row(row_of(g, dec_b, ch), s_rows));
  return g.scale(g.col_sum(d), 1.0 / static_cast<double>(s_rows));  // [1, ch]
}

}  // namespace

ForwardNodes forward_graph(ad::Graph& g, const Model& model, ad::NodeId x,
                           const ParamNodes& params, const PassportMap* passports) {
  validate_spec(model.spec);
  auto shapes = walk_shapes(model.spec);
  const Tensor& xv = g.value(x);
  if (xv.ndim() < 2) throw std::invalid_argument("forward: input must have a batch dimension");
  const std::size_t B = xv.shape()[0];
  {
    Shape per_sample(xv.shape().begin() + 1, xv.shape().end());
    if (shape_numel(per_sample) != shape_numel(model.spec.input_shape)) {
      throw std::invalid_argument("forward: input sample shape " + shape_str(per_sample) +
                                  " does not match model input " +
                                  shape_str(model.spec.input_shape));
    }
  }

  auto node_of = [&](const std::string& key) {
    auto it = params.nodes.find(key);
    if (it == params.nodes.end())
      throw std::invalid_argument("forward: missing parameter node '" + key + "'");
    return it->second;
  };

  Cursor cur;
  cur.node = x;
  cur.b = B;
  {
    SampleShape in = from_input_shape(model.spec.input_shape);
    if (in.image) {
      cur.layout = Cursor::Image;
      cur.c = in.c;
      cur.h = in.h;
      cur.w = in.w;
      if (xv.ndim() == 2) cur.node = g.reshape(x, {B, in.c, in.h, in.w});
    } else {
      cur.layout = Cursor::Flat;
      cur.d = in.d;
      if (xv.ndim() != 2) cur.node = g.reshape(x, {B, in.d});
    }
  }

  ForwardNodes out;
  for (std::size_t i = 0; i < model.spec.layers.size(); ++i) {
    const LayerSpec& l = model.spec.layers[i];
    switch (l.kind) {
      case LayerKind::Linear: {
        cur = canonical(g, cur);
        if (cur.layout == Cursor::Image) {
          cur.node = g.reshape(cur.node, {cur.b, cur.c * cur.h * cur.w});
          cur.layout = Cursor::Flat;
          cur.d = cur.c * cur.h * cur.w;
        }
        ad::NodeId z = g.matmul(cur.node, g.transpose(node_of(pkey(i, "w"))));
        z = g.add(z, g.broadcast_row(row_of(g, node_of(pkey(i, "b")), l.out), cur.b));
        cur.node = z;
        cur.d = l.out;
        break;
      }
      case LayerKind::Conv: {
        cur = canonical(g, cur);
        if (cur.layout != Cursor::Image)
          throw std::invalid_argument("forward: conv layer expects image input");
        ConvPlan plan = conv_plan(l, cur.b, cur.h, cur.w);
        ad::NodeId cols =
            g.gather(cur.node, plan.cols, {cur.b * plan.oh * plan.ow, plan.k});
        ad::NodeId z = g.matmul(cols, g.transpose(node_of(pkey(i, "w"))));
        z = g.add(z, g.broadcast_row(row_of(g, node_of(pkey(i, "b")), l.out_ch),
                                     cur.b * plan.oh * plan.ow));
        cur.node = z;
        cur.layout = Cursor::Cols;
        cur.c = l.out_ch;
        cur.h = plan.oh;
        cur.w = plan.ow;
        break;
      }
      case LayerKind::Activation: {
        cur.node = g.leaky_relu(cur.node, l.alpha);
        break;
      }
      case LayerKind::AvgPool: {
        cur = canonical(g, cur);
        auto table = pool_table(cur.b, cur.c, cur.h, cur.w, l.pool);
        const std::size_t oh = cur.h / l.pool, ow = cur.w / l.pool;
        ad::NodeId win = g.gather(cur.node, table, {cur.b * cur.c * oh * ow, l.pool * l.pool});
        ad::NodeId avg = g.scale(g.row_sum(win), 1.0 / static_cast<double>(l.pool * l.pool));
        cur.node = g.reshape(avg, {cur.b, cur.c, oh, ow});
        cur.h = oh;
        cur.w = ow;
        cur.layout = Cursor::Image;
        break;
      }
      case LayerKind::ScaleBias:
      case LayerKind::Passport: {
        if (cur.layout == Cursor::Image) {
          cur.node = image_to_cols(g, cur);
          cur.layout = Cursor::Cols;
        }
        const std::size_t rows = cur.layout == Cursor::Cols ? cur.b * cur.h * cur.w : cur.b;
        ad::NodeId gamma, beta;
        if (l.kind == LayerKind::ScaleBias) {
          gamma = row_of(g, node_of(pkey(i, "gamma")), l.channels);
          beta = row_of(g, node_of(pkey(i, "beta")), l.channels);
        } else {
          if (!passports || !passports->count(i)) {
            throw std::invalid_argument("forward: passport layer L" + std::to_string(i) +
                                        " requires a passport bundle");
          }
          const Passport& pp = passports->at(i);
          const std::string p = "P" + std::to_string(i) + ".";
          const LayerSpec& prev = model.spec.layers[i - 1];
          gamma = derived_modulation(g, prev, shapes[i - 1], node_of(pkey(i - 1, "w")),
                                     pp.p_gamma, node_of(p + "enc_w"), node_of(p + "enc_b"),
                                     node_of(p + "dec_w"), node_of(p + "dec_b"));
          beta = derived_modulation(g, prev, shapes[i - 1], node_of(pkey(i - 1, "w")),
                                    pp.p_beta, node_of(p + "enc_w"), node_of(p + "enc_b"),
                                    node_of(p + "dec_w"), node_of(p + "dec_b"));
        }
        out.derived[pkey(i, "gamma")] = gamma;
        out.derived[pkey(i, "beta")] = beta;
        cur.node = g.add(g.mul(cur.node, g.broadcast_row(gamma, rows)),
                         g.broadcast_row(beta, rows));
        break;
      }
    }
    Cursor canon = canonical(g, cur);
    cur = canon;
    out.boundary[i] = canon.node;
  }
  out.output = cur.node;
  return out;
}

ForwardResult forward(const Model& model, const Tensor& x, const PassportMap* passports) {
  ad::Graph g;
  ParamNodes pn = make_param_nodes(g, model, passports);
  ad::NodeId xin = g.constant(x);
  ForwardNodes fn = forward_graph(g, model, xin, pn, passports);
  ForwardResult r;
  r.output = g.value(fn.output);
  for (const auto& [i, nid] : fn.boundary) r.boundary[i] = g.value(nid);
  return r;
}

DerivedScaleShift passport_layer_params(const Model& model, std::size_t layer_index,
                                        const Passport& pp) {
  const ModelSpec& spec = model.spec;
  if (layer_index >= spec.layers.size() ||
      spec.layers[layer_index].kind != LayerKind::Passport) {
    throw std::invalid_argument("passport_layer_params: layer is not a passport layer");
  }
  auto shapes = walk_shapes(spec);
  const LayerSpec& prev = spec.layers[layer_index - 1];
  ad::Graph g;
  ad::NodeId w = g.constant(model.params.at(pkey(layer_index - 1, "w")));
  ad::NodeId ew = g.constant(pp.enc_w), eb = g.constant(pp.enc_b);
  ad::NodeId dw = g.constant(pp.dec_w), db = g.constant(pp.dec_b);
  ad::NodeId gamma =
      derived_modulation(g, prev, shapes[layer_index - 1], w, pp.p_gamma, ew, eb, dw, db);
  ad::NodeId beta =
      derived_modulation(g, prev, shapes[layer_index - 1], w, pp.p_beta, ew, eb, dw, db);
  const std::size_t ch = spec.layers[layer_index].channels;
  return {g.value(gamma).reshaped({ch}), g.value(beta).reshaped({ch})};
}

// ---- losses -----------------------------------------------------------------

ad::NodeId cross_entropy(ad::Graph& g, ad::NodeId logits, ad::NodeId target) {
  const Tensor& z = g.value(logits);
  const Tensor& y = g.value(target);
  if (z.ndim() != 2 || !z.same_shape(y)) {
    throw std::invalid_argument("cross_entropy: logits and target must both be [B,classes]");
  }
  const std::size_t B = z.rows(), C = z.cols();
  ad::NodeId m = g.row_max(logits);
  ad::NodeId zs = g.sub(logits, g.broadcast_col(m, C));
  ad::NodeId lse = g.log(g.row_sum(g.exp(zs)));
  ad::NodeId logp = g.sub(zs, g.broadcast_col(lse, C));
  return g.scale(g.sum_all(g.mul(target, logp)), -1.0 / static_cast<double>(B));
}

Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
  Tensor y({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw std::invalid_argument("one_hot: label index " + std::to_string(labels[i]) +
                                  " out of range for " + std::to_string(classes) + " classes");
    }
    y.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return y;
}

ad::NodeId softmax(ad::Graph& g, ad::NodeId logits) {
  const Tensor& z = g.value(logits);
  if (z.ndim() != 2) throw std::invalid_argument("softmax: expects [B,classes] logits");
  ad::NodeId m = g.row_max(logits);
  ad::NodeId e = g.exp(g.sub(logits, g.broadcast_col(m, z.cols())));
  return g.div(e, g.broadcast_col(g.row_sum(e), z.cols()));
}

ad::NodeId total_variation(ad::Graph& g, ad::NodeId x) {
  Tensor v = g.value(x);
  ad::NodeId img = x;
  if (v.ndim() == 2) {
    img = g.reshape(x, {v.rows(), 1, 1, v.cols()});
    v = g.value(img);
  }
  if (v.ndim() != 4) {
    throw std::invalid_argument("total_variation: expects [B,C,H,W] or [B,D] input");
  }
  const std::size_t B = v.shape()[0], C = v.shape()[1], H = v.shape()[2], W = v.shape()[3];

  auto shifted_pair = [&](bool horizontal) {
    const std::size_t oh = horizontal ? H : H - 1;
    const std::size_t ow = horizontal ? W - 1 : W;
    std::ostringstream k1, k2;
    k1 << "tvA:" << horizontal << ":" << B << "," << C << "," << H << "," << W;
    k2 << "tvB:" << horizontal << ":" << B << "," << C << "," << H << "," << W;
    auto build = [&](std::size_t dy, std::size_t dx) {
      return [=] {
        std::vector<std::int64_t> t(B * C * oh * ow);
        std::size_t pos = 0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < oh; ++y)
              for (std::size_t x = 0; x < ow; ++x)
                t[pos++] = static_cast<std::int64_t>(((b * C + c) * H + y + dy) * W + x + dx);
        return t;
      };
    };
    auto ta = cached(k1.str(), build(0, 0));
    auto tb = cached(k2.str(), build(horizontal ? 0 : 1, horizontal ? 1 : 0));
    ad::NodeId a = g.gather(img, ta, {B * C * oh, ow});
    ad::NodeId b = g.gather(img, tb, {B * C * oh, ow});
    return g.sum_all(g.abs(g.sub(b, a)));
  };

  ad::NodeId total = g.constant(Tensor::scalar(0.0));
  if (W >= 2) total = g.add(total, shifted_pair(true));
  if (H >= 2) total = g.add(total, shifted_pair(false));
  return g.scale(total, 1.0 / static_cast<double>(B));
}

ad::NodeId passport_constraint(ad::Graph& g, ad::NodeId free_gamma, ad::NodeId free_beta,
                               ad::NodeId derived_gamma, ad::NodeId derived_beta) {
  ad::NodeId dg = g.sub(free_gamma, derived_gamma);
  ad::NodeId db = g.sub(free_beta, derived_beta);
  return g.add(g.sum_all(g.mul(dg, dg)), g.sum_all(g.mul(db, db)));
}

// ---- structure --------------------------------------------------------------

SplitParams split_params(const Model& model) {
  validate_spec(model.spec);
  SplitParams sp;
  for (std::size_t i = 0; i < model.spec.layers.size(); ++i) {
    const bool priv = model.spec.layers[i].visibility == Visibility::Private;
    for (const char* field : {"w", "b", "gamma", "beta"}) {
      auto it = model.params.find(pkey(i, field));
      if (it == model.params.end()) continue;
      (priv ? sp.private_params : sp.public_params)[it->first] = it->second;
    }
  }
  return sp;
}

Tensor conv_weight_2d(const Tensor& w, const LayerSpec& layer) {
  if (layer.kind != LayerKind::Conv) {
    throw std::invalid_argument("conv_weight_2d: layer is not a conv layer");
  }
  const std::size_t K = layer.in_ch * layer.kh * layer.kw;
  if (w.size() != layer.out_ch * K) {
    throw std::invalid_argument("conv_weight_2d: weight size mismatch");
  }
  return w.reshaped({layer.out_ch, K});
}

Tensor conv_unrolled_matrix(const Model& model, std::size_t layer_index) {
  const ModelSpec& spec = model.spec;
  if (layer_index >= spec.layers.size() || spec.layers[layer_index].kind != LayerKind::Conv) {
    throw std::invalid_argument("conv_unrolled_matrix: layer is not a conv layer");
  }
  auto shapes = walk_shapes(spec);
  const SampleShape& in = shapes[layer_index];
  const LayerSpec& l = spec.layers[layer_index];
  const std::size_t oh = conv_out_dim(in.h, l.kh, l.pad);
  const std::size_t ow = conv_out_dim(in.w, l.kw, l.pad);
  const Tensor w = conv_weight_2d(model.params.at(pkey(layer_index, "w")), l);
  Tensor m({l.out_ch * oh * ow, in.c * in.h * in.w});
  for (std::size_t c = 0; c < l.out_ch; ++c)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t row = (c * oh + oy) * ow + ox;
        for (std::size_t ci = 0; ci < l.in_ch; ++ci)
          for (std::size_t ky = 0; ky < l.kh; ++ky)
            for (std::size_t kx = 0; kx < l.kw; ++kx) {
              const std::int64_t y = static_cast<std::int64_t>(oy + ky) -
                                     static_cast<std::int64_t>(l.pad);
              const std::int64_t x = static_cast<std::int64_t>(ox + kx) -
                                     static_cast<std::int64_t>(l.pad);
              if (y < 0 || y >= static_cast<std::int64_t>(in.h) || x < 0 ||
                  x >= static_cast<std::int64_t>(in.w))
                continue;
              m.at(row, (ci * in.h + static_cast<std::size_t>(y)) * in.w +
                            static_cast<std::size_t>(x)) =
                  w.at(c, (ci * l.kh + ky) * l.kw + kx);
            }
      }
  return m;
}

}  // namespace fpb::nn
