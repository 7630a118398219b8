#include "gaitq/models.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace gaitq {

using nlohmann::json;

namespace {

constexpr double kRangeMomentum = 0.1;

std::string blk(std::size_t i) { return "block" + std::to_string(i); }

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

/// Fixed sinusoidal encoding [n x d].
Tensor positional_encoding(std::size_t n, std::size_t d) {
  Tensor pe({n, d});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      pe.at(t, i) = i % 2 == 0 ? std::sin(static_cast<double>(t) * freq)
                               : std::cos(static_cast<double>(t) * freq);
    }
  return pe;
}

json tensor_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.values()}}; }

Tensor tensor_from(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

json qp_json(const QuantParams& qp) { return {{"bits", qp.bits}, {"scale", qp.scale}}; }

QuantParams qp_from(const json& j) { return QuantParams(j.at("bits").get<int>(), j.at("scale").get<double>()); }

void check_version(const json& j, int want, const std::string& what) {
  require(j.contains("version"), ErrorKind::Io, what + ": missing version field");
  require(j.at("version").get<int>() == want, ErrorKind::Io,
          what + ": unsupported version " + j.at("version").dump());
}

}  // namespace

std::string arch_name(Arch a) {
  switch (a) {
    case Arch::Cnn1d: return "cnn";
    case Arch::SepCnn1d: return "sepcnn";
    case Arch::Lstm: return "lstm";
    case Arch::Transformer: return "transformer";
  }
  return "?";
}

Arch parse_arch(const std::string& s) {
  const std::string l = lower(s);
  if (l == "cnn" || l == "cnn1d" || l == "1d-cnn") return Arch::Cnn1d;
  if (l == "sepcnn" || l == "sepcnn1d" || l == "1d-sepcnn") return Arch::SepCnn1d;
  if (l == "lstm") return Arch::Lstm;
  if (l == "transformer") return Arch::Transformer;
  fail(ErrorKind::Validation, "unknown architecture '" + s + "'");
}

void ModelConfig::validate() const {
  require(is_supported_bitwidth(bits), ErrorKind::Validation,
          "unsupported bitwidth " + std::to_string(bits) + " (expected 4, 6 or 8)");
  require(n >= 1 && c_in >= 1 && classes >= 2, ErrorKind::Validation, "n, c_in and classes must be positive");
  switch (arch) {
    case Arch::Cnn1d:
    case Arch::SepCnn1d:
      require(num_blocks >= 1 && num_blocks <= 6, ErrorKind::Validation, "num_blocks must be in 1..6");
      require(n >= (std::size_t{1} << (num_blocks - 1)), ErrorKind::Validation,
              "n=" + std::to_string(n) + " is too short for " + std::to_string(num_blocks) +
                  " blocks (pooling would empty the sequence)");
      break;
    case Arch::Lstm:
      require(h_size >= 8 && h_size <= 64 && h_size % 8 == 0, ErrorKind::Validation,
              "h_size must be one of 8, 16, ..., 64");
      break;
    case Arch::Transformer:
      require(d_model >= 8 && d_model <= 32 && d_model % 8 == 0, ErrorKind::Validation,
              "d_model must be one of 8, 16, 24, 32");
      break;
  }
}

int ModelConfig::variable() const {
  switch (arch) {
    case Arch::Lstm: return h_size;
    case Arch::Transformer: return d_model;
    default: return num_blocks;
  }
}

void ModelConfig::set_variable(int v) {
  switch (arch) {
    case Arch::Lstm: h_size = v; break;
    case Arch::Transformer: d_model = v; break;
    default: num_blocks = v; break;
  }
}

json ModelConfig::to_json() const {
  json j = {{"arch", arch_name(arch)}, {"n", n}, {"c_in", c_in}, {"classes", classes}, {"bits", bits}};
  switch (arch) {
    case Arch::Lstm: j["h_size"] = h_size; break;
    case Arch::Transformer: j["d_model"] = d_model; break;
    default: j["num_blocks"] = num_blocks; break;
  }
  return j;
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.arch = parse_arch(j.at("arch").get<std::string>());
    c.n = j.value("n", c.n);
    c.c_in = j.value("c_in", c.c_in);
    c.classes = j.value("classes", c.classes);
    c.bits = j.value("bits", c.bits);
    c.num_blocks = j.value("num_blocks", c.num_blocks);
    c.h_size = j.value("h_size", c.h_size);
    c.d_model = j.value("d_model", c.d_model);
  } catch (const json::exception& e) {
    fail(ErrorKind::Validation, std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::size_t> channel_schedule(int num_blocks) {
  require(num_blocks >= 1 && num_blocks <= 6, ErrorKind::Validation, "num_blocks must be in 1..6");
  std::vector<std::size_t> ch;
  for (int i = 0; i < num_blocks; ++i) ch.push_back(std::size_t{3} << (i / 2));
  return ch;
}

std::size_t dense_hidden_width(std::size_t final_channels) { return std::max<std::size_t>(2, final_channels / 2); }

std::vector<LayerInfo> describe(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<LayerInfo> out;
  const std::size_t n = cfg.n, k = cfg.classes;
  auto add = [&](std::string name, std::string kind, Shape in, Shape o, std::size_t p, std::size_t m) {
    out.push_back({std::move(name), std::move(kind), std::move(in), std::move(o), p, m});
  };
  switch (cfg.arch) {
    case Arch::Cnn1d:
    case Arch::SepCnn1d: {
      const auto sched = channel_schedule(cfg.num_blocks);
      std::size_t cin = cfg.c_in, len = n;
      for (std::size_t i = 0; i < sched.size(); ++i) {
        const std::size_t c = sched[i];
        if (cfg.arch == Arch::Cnn1d) {
          add(blk(i) + ".conv", "conv1d k3", {cin, len}, {c, len}, c * cin * 3 + c, c * cin * 3 * len);
        } else {
          add(blk(i) + ".dw", "depthwise k3", {cin, len}, {cin, len}, cin * 3 + cin, cin * 3 * len);
          add(blk(i) + ".pw", "pointwise", {cin, len}, {c, len}, c * cin + c, c * cin * len);
        }
        add(blk(i) + ".bn", "batchnorm (folded)", {c, len}, {c, len}, 2 * c, 0);
        add(blk(i) + ".relu", "relu", {c, len}, {c, len}, 0, 0);
        if (i + 1 < sched.size()) {
          add(blk(i) + ".pool", "maxpool k2", {c, len}, {c, len / 2}, 0, 0);
          len /= 2;
        }
        cin = c;
      }
      const std::size_t h = dense_hidden_width(cin);
      add("gap", "global avg pool", {cin, len}, {cin}, 0, 0);
      add("fc1", "dense+relu", {cin}, {h}, cin * h + h, cin * h);
      add("fc2", "dense", {h}, {k}, h * k + k, h * k);
      break;
    }
    case Arch::Lstm: {
      const std::size_t h = static_cast<std::size_t>(cfg.h_size), i = cfg.c_in;
      add("lstm", "lstm", {i, n}, {h}, 4 * h * (i + h + 1), n * (4 * h * (i + h) + 3 * h));
      add("fc", "dense", {h}, {k}, h * k + k, h * k);
      break;
    }
    case Arch::Transformer: {
      const std::size_t d = static_cast<std::size_t>(cfg.d_model), i = cfg.c_in;
      add("embed", "dense", {n, i}, {n, d}, i * d + d, n * i * d);
      add("pe", "positional encoding", {n, d}, {n, d}, 0, 0);
      add("attn", "one-head attention", {n, d}, {n, d}, 4 * (d * d + d), 4 * n * d * d + 2 * n * n * d);
      add("res1", "residual", {n, d}, {n, d}, 0, 0);
      add("norm1", "batchnorm", {d, n}, {d, n}, 2 * d, n * d);
      add("ffn1", "dense+relu", {n, d}, {n, 4 * d}, d * 4 * d + 4 * d, n * d * 4 * d);
      add("ffn2", "dense", {n, 4 * d}, {n, d}, 4 * d * d + d, n * 4 * d * d);
      add("res2", "residual", {n, d}, {n, d}, 0, 0);
      add("norm2", "batchnorm", {d, n}, {d, n}, 2 * d, n * d);
      add("gap", "global avg pool", {d, n}, {d}, 0, 0);
      add("fc", "dense", {d}, {k}, d * k + k, d * k);
      break;
    }
  }
  return out;
}

std::string describe_text(const ModelConfig& cfg) {
  std::ostringstream os;
  os << arch_name(cfg.arch) << " (b=" << cfg.bits << ", n=" << cfg.n << ")\n";
  std::size_t p = 0, m = 0;
  for (const auto& l : describe(cfg)) {
    os << "  " << l.name;
    for (std::size_t i = l.name.size(); i < 14; ++i) os << ' ';
    os << l.kind;
    for (std::size_t i = l.kind.size(); i < 22; ++i) os << ' ';
    os << shape_str(l.in) << " -> " << shape_str(l.out) << "  params=" << l.params << "  macs=" << l.macs << "\n";
    p += l.params;
    m += l.macs;
  }
  os << "  total params=" << p << "  macs=" << m << "\n";
  return os.str();
}

std::size_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t k = cfg.classes;
  switch (cfg.arch) {
    case Arch::Cnn1d:
    case Arch::SepCnn1d: {
      std::size_t total = 0, cin = cfg.c_in;
      for (std::size_t c : channel_schedule(cfg.num_blocks)) {
        total += cfg.arch == Arch::Cnn1d ? c * cin * 3 + c : (cin * 3 + cin) + (c * cin + c);
        total += 2 * c;
        cin = c;
      }
      const std::size_t h = dense_hidden_width(cin);
      return total + cin * h + h + h * k + k;
    }
    case Arch::Lstm: {
      const std::size_t h = static_cast<std::size_t>(cfg.h_size);
      return 4 * h * (cfg.c_in + h + 1) + h * k + k;
    }
    case Arch::Transformer: {
      const std::size_t d = static_cast<std::size_t>(cfg.d_model);
      return (cfg.c_in + 1) * d + 4 * (d * d + d) + 4 * d + (4 * d * d + 4 * d) + (4 * d * d + d) + d * k + k;
    }
  }
  return 0;
}

std::size_t mac_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t k = cfg.classes, n = cfg.n;
  switch (cfg.arch) {
    case Arch::Cnn1d:
    case Arch::SepCnn1d: {
      const auto sched = channel_schedule(cfg.num_blocks);
      std::size_t total = 0, cin = cfg.c_in, len = n;
      for (std::size_t i = 0; i < sched.size(); ++i) {
        const std::size_t c = sched[i];
        total += cfg.arch == Arch::Cnn1d ? c * cin * 3 * len : cin * 3 * len + c * cin * len;
        if (i + 1 < sched.size()) len /= 2;
        cin = c;
      }
      const std::size_t h = dense_hidden_width(cin);
      return total + cin * h + h * k;
    }
    case Arch::Lstm: {
      const std::size_t h = static_cast<std::size_t>(cfg.h_size);
      return n * (4 * h * (cfg.c_in + h) + 3 * h) + h * k;
    }
    case Arch::Transformer: {
      const std::size_t d = static_cast<std::size_t>(cfg.d_model);
      return n * cfg.c_in * d + 4 * n * d * d + 2 * n * n * d + 2 * n * d + 8 * n * d * d + d * k;
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Construction

Model Model::build(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  std::mt19937_64 rng(seed);
  auto uniform = [&](Shape shape, double bound) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : t.data()) v = u(rng);
    return t;
  };
  auto weight = [&](const std::string& name, Shape shape, std::size_t fan_in) {
    m.params_[name] = uniform(std::move(shape), std::sqrt(6.0 / static_cast<double>(fan_in)));
  };
  auto bias = [&](const std::string& name, std::size_t len, std::size_t fan_in) {
    m.params_[name] = uniform({len}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  };
  auto bn = [&](const std::string& name, std::size_t ch) {
    m.params_[name + ".gamma"] = Tensor({ch}, 1.0);
    m.params_[name + ".beta"] = Tensor({ch}, 0.0);
    m.bn_[name] = ops::BatchNormState::identity(ch);
  };
  auto dense = [&](const std::string& name, std::size_t in, std::size_t out) {
    weight(name + ".w", {out, in}, in);
    bias(name + ".b", out, in);
  };

  const std::size_t k = cfg.classes;
  switch (cfg.arch) {
    case Arch::Cnn1d:
    case Arch::SepCnn1d: {
      std::size_t cin = cfg.c_in;
      const auto sched = channel_schedule(cfg.num_blocks);
      for (std::size_t i = 0; i < sched.size(); ++i) {
        const std::size_t c = sched[i];
        if (cfg.arch == Arch::Cnn1d) {
          weight(blk(i) + ".conv.w", {c, cin, 3}, cin * 3);
          bias(blk(i) + ".conv.b", c, cin * 3);
        } else {
          weight(blk(i) + ".dw.w", {cin, 3}, 3);
          bias(blk(i) + ".dw.b", cin, 3);
          weight(blk(i) + ".pw.w", {c, cin, 1}, cin);
          bias(blk(i) + ".pw.b", c, cin);
        }
        bn(blk(i) + ".bn", c);
        cin = c;
      }
      const std::size_t h = dense_hidden_width(cin);
      dense("fc1", cin, h);
      dense("fc2", h, k);
      break;
    }
    case Arch::Lstm: {
      const std::size_t h = static_cast<std::size_t>(cfg.h_size);
      const double bound = 1.0 / std::sqrt(static_cast<double>(h));
      m.params_["lstm.w_ih"] = uniform({4 * h, cfg.c_in}, bound);
      m.params_["lstm.w_hh"] = uniform({4 * h, h}, bound);
      m.params_["lstm.b"] = uniform({4 * h}, bound);
      dense("fc", h, k);
      break;
    }
    case Arch::Transformer: {
      const std::size_t d = static_cast<std::size_t>(cfg.d_model);
      dense("embed", cfg.c_in, d);
      for (const char* p : {"q", "k", "v", "o"}) {
        weight(std::string("attn.w") + p, {d, d}, d);
        bias(std::string("attn.b") + p, d, d);
      }
      bn("norm1", d);
      dense("ffn1", d, 4 * d);
      dense("ffn2", 4 * d, d);
      bn("norm2", d);
      dense("fc", d, k);
      break;
    }
  }
  return m;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : params_) total += t.size();
  return total;
}

void Model::set_bits(int bits) {
  require(is_supported_bitwidth(bits), ErrorKind::Validation,
          "unsupported bitwidth " + std::to_string(bits) + " (expected 4, 6 or 8)");
  cfg_.bits = bits;
  acts_.clear();
  int_.reset();
}

void Model::reset_ranges() {
  ranges_.clear();
  acts_.clear();
  int_.reset();
}

const QuantParams& Model::act_params(const std::string& name) const {
  auto it = acts_.find(name);
  require(it != acts_.end(), ErrorKind::Validation, "no frozen quantization parameters for '" + name + "'");
  return it->second;
}

void Model::freeze() {
  require(!ranges_.empty(), ErrorKind::Validation, "freeze needs calibrated activation ranges");
  acts_.clear();
  for (const auto& [name, tr] : ranges_) acts_[name] = QuantParams(cfg_.bits, snap_pow2(tr.params(cfg_.bits).scale));
  int_ = export_int();
}

// ---------------------------------------------------------------------------
// Batched graph for float, calibration and fake-quant passes

class GraphBuilder {
 public:
  GraphBuilder(ad::Tape& t, const Model& m, Model* mut, Pass pass)
      : t_(t), m_(m), mut_(mut), pass_(pass), bits_(m.cfg_.bits) {
    const bool mutating = pass == Pass::FloatTrain || pass == Pass::Calibrate || pass == Pass::QatTrain;
    require(!mutating || mut != nullptr, ErrorKind::Validation, "training passes need a mutable model");
    require(pass != Pass::QuantEval || m.frozen(), ErrorKind::Validation,
            "fake-quant evaluation needs frozen quantization parameters");
  }

  GraphOut run(const Tensor& x) {
    expect_rank(x, 3, "model input batch");
    expect_dim(x.dim(1), m_.cfg_.c_in, "model input channels");
    expect_dim(x.dim(2), m_.cfg_.n, "model input length");
    switch (m_.cfg_.arch) {
      case Arch::Cnn1d:
      case Arch::SepCnn1d: out_.logits = cnn(x).v; break;
      case Arch::Lstm: out_.logits = lstm(x).v; break;
      case Arch::Transformer: out_.logits = transformer(x).v; break;
    }
    return std::move(out_);
  }

 private:
  // A value together with the grid it lives on (0 when unquantized).
  struct Q {
    ad::Var v;
    double scale = 0.0;
  };

  bool quant() const { return pass_ == Pass::QatTrain || pass_ == Pass::QuantEval; }
  bool observes() const { return pass_ == Pass::Calibrate || pass_ == Pass::QatTrain; }

  ad::Var p(const std::string& name) {
    auto it = out_.params.find(name);
    if (it != out_.params.end()) return it->second;
    const ad::Var v = t_.variable(m_.params_.at(name));
    out_.params.emplace(name, v);
    return v;
  }

  Q act(const std::string& name, ad::Var v) {
    if (observes()) {
      const auto vals = t_.value(v).data();
      const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
      mut_->ranges_.try_emplace(name, kRangeMomentum).first->second.observe(*lo, *hi);
    }
    if (!quant()) return {v};
    const QuantParams qp = pass_ == Pass::QatTrain
                               ? QuantParams(bits_, snap_pow2(mut_->ranges_.at(name).params(bits_).scale))
                               : m_.act_params(name);
    return {ad::fake_quant(t_, v, qp), qp.scale};
  }

  Q weight(ad::Var w) {
    if (!quant()) return {w};
    const QuantParams qp = weight_params(t_.value(w), bits_);
    return {ad::fake_quant(t_, w, qp), qp.scale};
  }

  ad::Var bias(ad::Var b, double grid) {
    if (!quant()) return b;
    return ad::fake_quant(t_, b, grid, kAccMin, kAccMax);
  }

  Q dense(const std::string& wname, const std::string& bname, const Q& x) {
    const Q w = weight(p(wname));
    return {ad::linear(t_, x.v, w.v, bias(p(bname), w.scale * x.scale))};
  }
  Q dense(const std::string& prefix, const Q& x) { return dense(prefix + ".w", prefix + ".b", x); }

  /// Convolution, optionally followed by batch norm (folded outside FloatTrain).
  Q conv(const std::string& prefix, const std::string& bn, const Q& x, bool depthwise) {
    ad::Var w = p(prefix + ".w"), b = p(prefix + ".b");
    auto apply = [&](ad::Var ww, ad::Var bb) {
      return depthwise ? ad::depthwise_conv1d(t_, x.v, ww, bb) : ad::conv1d(t_, x.v, ww, bb);
    };
    if (!bn.empty()) {
      const ad::Var gamma = p(bn + ".gamma"), beta = p(bn + ".beta");
      if (pass_ == Pass::FloatTrain) return {ad::batchnorm_train(t_, apply(w, b), gamma, beta, mut_->bn_.at(bn))};
      const auto& st = m_.bn_.at(bn);
      w = ad::bn_fold_weight(t_, w, gamma, st.running_var, st.eps);
      b = ad::bn_fold_bias(t_, b, gamma, beta, st.running_mean, st.running_var, st.eps);
    }
    const Q wq = weight(w);
    return {apply(wq.v, bias(b, wq.scale * x.scale))};
  }

  /// Batch norm over [B x C x L] expressed as a per-channel affine map.
  Q norm(const std::string& name, const Q& x) {
    const ad::Var gamma = p(name + ".gamma"), beta = p(name + ".beta");
    if (pass_ == Pass::FloatTrain) return {ad::batchnorm_train(t_, x.v, gamma, beta, mut_->bn_.at(name))};
    const auto& st = m_.bn_.at(name);
    const std::size_t ch = st.running_mean.size();
    const ad::Var a = ad::bn_fold_weight(t_, t_.constant(Tensor({ch}, 1.0)), gamma, st.running_var, st.eps);
    const ad::Var c = ad::bn_fold_bias(t_, t_.constant(Tensor({ch}, 0.0)), gamma, beta, st.running_mean,
                                       st.running_var, st.eps);
    const Q aq = weight(a);
    return {ad::channel_affine(t_, x.v, aq.v, bias(c, aq.scale * x.scale))};
  }

  Q cnn(const Tensor& x) {
    const bool sep = m_.cfg_.arch == Arch::SepCnn1d;
    const auto sched = channel_schedule(m_.cfg_.num_blocks);
    Q h = act("input", t_.constant(x));
    for (std::size_t i = 0; i < sched.size(); ++i) {
      if (sep) {
        h = act(blk(i) + ".dw", conv(blk(i) + ".dw", "", h, true).v);
        h = act(blk(i) + ".out", conv(blk(i) + ".pw", blk(i) + ".bn", h, false).v);
      } else {
        h = act(blk(i) + ".out", conv(blk(i) + ".conv", blk(i) + ".bn", h, false).v);
      }
      h.v = ad::relu(t_, h.v);
      if (i + 1 < sched.size()) h.v = ad::maxpool1d(t_, h.v);
    }
    const Q g = act("gap", ad::mean_last(t_, h.v));
    Q f = act("fc1.out", dense("fc1", g).v);
    f.v = ad::relu(t_, f.v);
    return act("logits", dense("fc2", f).v);
  }

  Q lstm(const Tensor& x) {
    const std::size_t batch = x.dim(0), hs = static_cast<std::size_t>(m_.cfg_.h_size);
    const Q in = act("input", t_.constant(x));
    const Q wih = weight(p("lstm.w_ih"));
    const Q whh = weight(p("lstm.w_hh"));
    const ad::Var b = bias(p("lstm.b"), wih.scale * in.scale);
    Q h{t_.constant(Tensor({batch, hs}, 0.0))};
    Q c{t_.constant(Tensor({batch, hs}, 0.0))};
    for (std::size_t step = 0; step < m_.cfg_.n; ++step) {
      const ad::Var xt = ad::time_step(t_, in.v, step);
      const ad::Var pre = ad::add(t_, ad::linear(t_, xt, wih.v, b), ad::linear_nobias(t_, h.v, whh.v));
      const Q g = act("lstm.gates", pre);
      const Q ig = act("lstm.sig", ad::hardsigmoid(t_, ad::slice_cols(t_, g.v, 0, hs)));
      const Q fg = act("lstm.sig", ad::hardsigmoid(t_, ad::slice_cols(t_, g.v, hs, hs)));
      const Q gg = act("lstm.tanh", ad::hardtanh(t_, ad::slice_cols(t_, g.v, 2 * hs, hs)));
      const Q og = act("lstm.sig", ad::hardsigmoid(t_, ad::slice_cols(t_, g.v, 3 * hs, hs)));
      c = act("lstm.c", ad::add(t_, ad::mul(t_, fg.v, c.v), ad::mul(t_, ig.v, gg.v)));
      const Q tc = act("lstm.tc", ad::hardtanh(t_, c.v));
      h = act("lstm.h", ad::mul(t_, og.v, tc.v));
    }
    return act("logits", dense("fc", h).v);
  }

  Q transformer(const Tensor& x) {
    const std::size_t batch = x.dim(0), n = m_.cfg_.n, d = static_cast<std::size_t>(m_.cfg_.d_model);
    const Q in = act("input", t_.constant(x));
    Q e = act("embed.lin", dense("embed", Q{ad::transpose12(t_, in.v), in.scale}).v);

    Tensor pe = positional_encoding(n, d);
    if (quant()) pe = fake_quantize(pe, weight_params(pe, bits_));
    Tensor peb({batch, n, d});
    for (std::size_t b = 0; b < batch; ++b)
      std::copy(pe.data().begin(), pe.data().end(), peb.data().begin() + static_cast<std::ptrdiff_t>(b * n * d));
    e = act("embed", ad::add(t_, e.v, t_.constant(std::move(peb))));

    const Q q = act("attn.q", dense("attn.wq", "attn.bq", e).v);
    const Q k = act("attn.k", dense("attn.wk", "attn.bk", e).v);
    const Q v = act("attn.v", dense("attn.wv", "attn.bv", e).v);
    const ad::Var raw = ad::bmm(t_, q.v, ad::transpose12(t_, k.v));
    const Q s = act("attn.scores", ad::scale(t_, raw, 1.0 / std::sqrt(static_cast<double>(d))));
    const Q a = act("attn.probs", ad::softmax_last(t_, s.v));
    const Q ctx = act("attn.ctx", ad::bmm(t_, a.v, v.v));
    const Q ao = act("attn.out", dense("attn.wo", "attn.bo", ctx).v);
    const Q r1 = act("res1", ad::add(t_, e.v, ao.v));

    const Q n1c = act("norm1", norm("norm1", Q{ad::transpose12(t_, r1.v), r1.scale}).v);
    const Q n1{ad::transpose12(t_, n1c.v), n1c.scale};
    Q f1 = act("ffn1.out", dense("ffn1", n1).v);
    f1.v = ad::relu(t_, f1.v);
    const Q f2 = act("ffn2.out", dense("ffn2", f1).v);
    const Q r2 = act("res2", ad::add(t_, n1.v, f2.v));
    const Q n2 = act("norm2", norm("norm2", Q{ad::transpose12(t_, r2.v), r2.scale}).v);
    const Q g = act("gap", ad::mean_last(t_, n2.v));
    return act("logits", dense("fc", g).v);
  }

  ad::Tape& t_;
  const Model& m_;
  Model* mut_;
  Pass pass_;
  int bits_;
  GraphOut out_;
};

GraphOut build_graph(ad::Tape& tape, Model& m, const Tensor& x, Pass pass) {
  return GraphBuilder(tape, m, &m, pass).run(x);
}

void observe_ranges(Model& m, const Tensor& batch) {
  ad::Tape tape(false);
  build_graph(tape, m, batch, Pass::Calibrate);
}

Tensor Model::forward_batch(const Tensor& x, Mode mode) const {
  if (mode == Mode::Int) {
    require(int_.has_value(), ErrorKind::Validation, "integer inference needs a quantized model");
    expect_rank(x, 3, "model input batch");
    const std::size_t per = x.dim(1) * x.dim(2);
    Tensor out({x.dim(0), cfg_.classes});
    for (std::size_t b = 0; b < x.dim(0); ++b) {
      Tensor xb({x.dim(1), x.dim(2)});
      std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(b * per), per, xb.data().begin());
      const Tensor l = int_->forward(xb).dequantize();
      std::copy(l.data().begin(), l.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * cfg_.classes));
    }
    return out;
  }
  ad::Tape tape(false);
  const Pass pass = mode == Mode::Float ? Pass::FloatEval : Pass::QuantEval;
  const GraphOut g = GraphBuilder(tape, *this, nullptr, pass).run(x);
  return tape.value(g.logits);
}

Tensor Model::forward(const Tensor& x, Mode mode) const {
  expect_rank(x, 2, "model input");
  if (mode == Mode::Int) {
    require(int_.has_value(), ErrorKind::Validation, "integer inference needs a quantized model");
    return int_->forward(x).dequantize();
  }
  const Tensor y = forward_batch(x.reshaped({1, x.dim(0), x.dim(1)}), mode);
  return y.reshaped({cfg_.classes});
}

std::vector<int> Model::predict(const std::vector<Tensor>& xs, Mode mode) const {
  if (xs.empty()) return {};
  if (mode == Mode::Int) {
    require(int_.has_value(), ErrorKind::Validation, "integer inference needs a quantized model");
    std::vector<int> out;
    out.reserve(xs.size());
    for (const Tensor& x : xs) out.push_back(int_->predict(x));
    return out;
  }
  return argmax_rows(forward_batch(stack_batch(xs), mode));
}

// ---------------------------------------------------------------------------
// Integer export and inference

IntModel Model::export_int() const {
  require(frozen(), ErrorKind::Validation, "integer export needs frozen quantization parameters");
  IntModel im;
  im.config = cfg_;
  im.acts = acts_;
  const int bits = cfg_.bits;
  auto A = [&](const std::string& name) { return act_params(name).scale; };

  auto put = [&](const std::string& name, const Tensor& w, const Tensor& b, double in_scale) {
    const QuantParams qp = weight_params(w, bits);
    im.weights[name] = QTensor::quantize(w, qp);
    im.biases[name] = QBias::quantize(b, qp.scale * in_scale);
  };
  auto bn_of = [&](const std::string& name) {
    const auto& st = bn_.at(name);
    return BatchNormParams{params_.at(name + ".gamma"), params_.at(name + ".beta"), st.running_mean,
                           st.running_var, st.eps};
  };
  auto folded = [&](const std::string& name, const std::string& bn, double in_scale) {
    const auto [wf, bf] = fold_batchnorm(params_.at(name + ".w"), params_.at(name + ".b"), bn_of(bn));
    put(name, wf, bf, in_scale);
  };
  auto dense = [&](const std::string& name, double in_scale) {
    put(name, params_.at(name + ".w"), params_.at(name + ".b"), in_scale);
  };
  auto norm = [&](const std::string& name, double in_scale) {
    const std::size_t ch = bn_.at(name).running_mean.size();
    const auto [a, c] = fold_batchnorm(Tensor({ch}, 1.0), Tensor({ch}, 0.0), bn_of(name));
    put(name, a, c, in_scale);
  };

  switch (cfg_.arch) {
    case Arch::Cnn1d:
    case Arch::SepCnn1d: {
      std::string prev = "input";
      for (int i = 0; i < cfg_.num_blocks; ++i) {
        const std::string b = blk(static_cast<std::size_t>(i));
        if (cfg_.arch == Arch::Cnn1d) {
          folded(b + ".conv", b + ".bn", A(prev));
        } else {
          dense(b + ".dw", A(prev));
          folded(b + ".pw", b + ".bn", A(b + ".dw"));
        }
        prev = b + ".out";
      }
      dense("fc1", A("gap"));
      dense("fc2", A("fc1.out"));
      break;
    }
    case Arch::Lstm: {
      const Tensor& wih = params_.at("lstm.w_ih");
      const QuantParams qi = weight_params(wih, bits);
      im.weights["lstm.w_ih"] = QTensor::quantize(wih, qi);
      im.weights["lstm.w_hh"] = QTensor::quantize(params_.at("lstm.w_hh"), weight_params(params_.at("lstm.w_hh"), bits));
      im.biases["lstm.b"] = QBias::quantize(params_.at("lstm.b"), qi.scale * A("input"));
      dense("fc", A("lstm.h"));
      break;
    }
    case Arch::Transformer: {
      dense("embed", A("input"));
      const Tensor pe = positional_encoding(cfg_.n, static_cast<std::size_t>(cfg_.d_model));
      im.weights["pe"] = QTensor::quantize(pe, weight_params(pe, bits));
      for (const char* p : {"q", "k", "v"})
        put(std::string("attn.") + p, params_.at(std::string("attn.w") + p), params_.at(std::string("attn.b") + p),
            A("embed"));
      put("attn.o", params_.at("attn.wo"), params_.at("attn.bo"), A("attn.ctx"));
      norm("norm1", A("res1"));
      dense("ffn1", A("norm1"));
      dense("ffn2", A("ffn1.out"));
      norm("norm2", A("res2"));
      dense("fc", A("gap"));
      break;
    }
  }
  return im;
}

QTensor IntModel::forward(const Tensor& x, MacCounter* mc) const {
  expect_rank(x, 2, "model input");
  expect_dim(x.dim(0), config.c_in, "model input channels");
  expect_dim(x.dim(1), config.n, "model input length");
  auto A = [&](const std::string& name) -> const QuantParams& {
    auto it = acts.find(name);
    require(it != acts.end(), ErrorKind::Validation, "integer model lacks quantization parameters for '" + name + "'");
    return it->second;
  };
  auto W = [&](const std::string& name) -> const QTensor& {
    auto it = weights.find(name);
    require(it != weights.end(), ErrorKind::Validation, "integer model lacks weights '" + name + "'");
    return it->second;
  };
  auto B = [&](const std::string& name) -> const QBias& {
    auto it = biases.find(name);
    require(it != biases.end(), ErrorKind::Validation, "integer model lacks bias '" + name + "'");
    return it->second;
  };

  const QTensor in = QTensor::quantize(x, A("input"));
  switch (config.arch) {
    case Arch::Cnn1d:
    case Arch::SepCnn1d: {
      QTensor h = in;
      for (int i = 0; i < config.num_blocks; ++i) {
        const std::string b = blk(static_cast<std::size_t>(i));
        if (config.arch == Arch::Cnn1d) {
          h = iops::conv1d(h, W(b + ".conv"), B(b + ".conv"), A(b + ".out"), mc);
        } else {
          h = iops::depthwise_conv1d(h, W(b + ".dw"), B(b + ".dw"), A(b + ".dw"), mc);
          h = iops::conv1d(h, W(b + ".pw"), B(b + ".pw"), A(b + ".out"), mc);
        }
        h = iops::relu(h);
        if (i + 1 < config.num_blocks) h = iops::maxpool1d(h);
      }
      const QTensor g = iops::global_avg_pool(h, A("gap"));
      const QTensor f = iops::relu(iops::dense(g, W("fc1"), B("fc1"), A("fc1.out"), mc));
      return iops::dense(f, W("fc2"), B("fc2"), A("logits"), mc);
    }
    case Arch::Lstm: {
      const std::size_t hs = static_cast<std::size_t>(config.h_size);
      const iops::LstmQuant lq{W("lstm.w_ih"), W("lstm.w_hh"), B("lstm.b"), A("lstm.gates"), A("lstm.sig"),
                               A("lstm.tanh"), A("lstm.c"), A("lstm.tc"), A("lstm.h")};
      QTensor h({hs}, A("lstm.h")), c({hs}, A("lstm.c"));
      for (std::size_t t = 0; t < config.n; ++t) {
        QTensor xt({config.c_in}, in.qp);
        for (std::size_t ch = 0; ch < config.c_in; ++ch) xt.q[ch] = in.at(ch, t);
        auto [hn, cn] = iops::lstm_cell(xt, h, c, lq, mc);
        h = std::move(hn);
        c = std::move(cn);
      }
      return iops::dense(h, W("fc"), B("fc"), A("logits"), mc);
    }
    case Arch::Transformer: {
      QTensor e = iops::dense_rows(iops::transpose(in), W("embed"), B("embed"), A("embed.lin"), mc);
      e = iops::add(e, W("pe"), A("embed"));
      const iops::AttentionQuant aq{W("attn.q"), W("attn.k"), W("attn.v"), W("attn.o"),
                                    B("attn.q"), B("attn.k"), B("attn.v"), B("attn.o"),
                                    A("attn.q"), A("attn.k"), A("attn.v"), A("attn.scores"),
                                    A("attn.probs"), A("attn.ctx"), A("attn.out")};
      const QTensor r1 = iops::add(e, iops::attention(e, aq, mc), A("res1"));
      const QTensor n1c = iops::channel_affine(iops::transpose(r1), W("norm1"), B("norm1"), A("norm1"), mc);
      const QTensor n1 = iops::transpose(n1c);
      const QTensor f1 = iops::relu(iops::dense_rows(n1, W("ffn1"), B("ffn1"), A("ffn1.out"), mc));
      const QTensor f2 = iops::dense_rows(f1, W("ffn2"), B("ffn2"), A("ffn2.out"), mc);
      const QTensor r2 = iops::add(n1, f2, A("res2"));
      const QTensor n2 = iops::channel_affine(iops::transpose(r2), W("norm2"), B("norm2"), A("norm2"), mc);
      const QTensor g = iops::global_avg_pool(n2, A("gap"));
      return iops::dense(g, W("fc"), B("fc"), A("logits"), mc);
    }
  }
  fail(ErrorKind::Validation, "unknown architecture");
}

int IntModel::predict(const Tensor& x) const {
  const QTensor l = forward(x);
  return static_cast<int>(std::max_element(l.q.begin(), l.q.end()) - l.q.begin());
}

// ---------------------------------------------------------------------------
// Serialization

json IntModel::to_json() const {
  json w = json::object(), b = json::object(), a = json::object();
  for (const auto& [name, t] : weights)
    w[name] = {{"shape", t.shape}, {"bits", t.qp.bits}, {"scale", t.qp.scale}, {"q", t.q}};
  for (const auto& [name, t] : biases) b[name] = {{"scale", t.scale}, {"q", t.q}};
  for (const auto& [name, qp] : acts) a[name] = qp_json(qp);
  return {{"format", "gaitq-int"}, {"version", kVersion}, {"config", config.to_json()},
          {"acts", a}, {"weights", w}, {"biases", b}};
}

IntModel IntModel::from_json(const json& j) {
  check_version(j, kVersion, "integer model");
  IntModel m;
  try {
    m.config = ModelConfig::from_json(j.at("config"));
    for (const auto& [name, v] : j.at("acts").items()) m.acts[name] = qp_from(v);
    for (const auto& [name, v] : j.at("weights").items()) {
      QTensor t(v.at("shape").get<Shape>(), QuantParams(v.at("bits").get<int>(), v.at("scale").get<double>()));
      t.q = v.at("q").get<std::vector<std::int32_t>>();
      require(t.q.size() == QTensor(t.shape, t.qp).size(), ErrorKind::Io, "weight '" + name + "' size mismatch");
      for (auto q : t.q)
        require(q >= t.qp.qmin() && q <= t.qp.qmax(), ErrorKind::Io, "weight '" + name + "' outside its range");
      m.weights[name] = std::move(t);
    }
    for (const auto& [name, v] : j.at("biases").items()) {
      QBias b;
      b.scale = v.at("scale").get<double>();
      b.q = v.at("q").get<std::vector<std::int32_t>>();
      m.biases[name] = std::move(b);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, std::string("malformed integer model: ") + e.what());
  }
  return m;
}

json Model::to_json() const {
  json p = json::object(), bn = json::object(), r = json::object(), a = json::object();
  for (const auto& [name, t] : params_) p[name] = tensor_json(t);
  for (const auto& [name, st] : bn_)
    bn[name] = {{"mean", st.running_mean.values()}, {"var", st.running_var.values()},
                {"momentum", st.momentum}, {"eps", st.eps}};
  for (const auto& [name, tr] : ranges_) r[name] = {{"lo", tr.lo()}, {"hi", tr.hi()}, {"momentum", tr.momentum()}};
  for (const auto& [name, qp] : acts_) a[name] = qp_json(qp);
  json j = {{"format", "gaitq-model"}, {"version", kVersion}, {"config", cfg_.to_json()},
            {"params", p}, {"bn", bn}, {"ranges", r}, {"acts", a}};
  j["int"] = int_ ? int_->to_json() : json(nullptr);
  return j;
}

Model Model::from_json(const json& j) {
  check_version(j, kVersion, "model checkpoint");
  Model m;
  try {
    m.cfg_ = ModelConfig::from_json(j.at("config"));
    for (const auto& [name, v] : j.at("params").items()) m.params_[name] = tensor_from(v);
    for (const auto& [name, v] : j.at("bn").items()) {
      ops::BatchNormState st;
      const auto mean = v.at("mean").get<std::vector<double>>();
      st.running_mean = Tensor({mean.size()}, mean);
      const auto var = v.at("var").get<std::vector<double>>();
      st.running_var = Tensor({var.size()}, var);
      st.momentum = v.at("momentum").get<double>();
      st.eps = v.at("eps").get<double>();
      m.bn_[name] = std::move(st);
    }
    for (const auto& [name, v] : j.at("ranges").items()) {
      RangeTracker tr(v.at("momentum").get<double>());
      tr.restore(v.at("lo").get<double>(), v.at("hi").get<double>());
      m.ranges_.emplace(name, tr);
    }
    for (const auto& [name, v] : j.at("acts").items()) m.acts_[name] = qp_from(v);
    if (j.contains("int") && !j.at("int").is_null()) m.int_ = IntModel::from_json(j.at("int"));
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, std::string("malformed model checkpoint: ") + e.what());
  }
  const Model ref = build(m.cfg_, 0);
  for (const auto& [name, t] : ref.params_) {
    auto it = m.params_.find(name);
    require(it != m.params_.end(), ErrorKind::Io, "checkpoint lacks parameter '" + name + "'");
    require(it->second.shape() == t.shape(), ErrorKind::Io, "checkpoint parameter '" + name + "' has wrong shape");
  }
  require(m.params_.size() == ref.params_.size(), ErrorKind::Io, "checkpoint has unexpected parameters");
  return m;
}

Tensor stack_batch(const std::vector<Tensor>& xs) {
  require(!xs.empty(), ErrorKind::Validation, "cannot stack an empty batch");
  expect_rank(xs[0], 2, "batch sample");
  const std::size_t c = xs[0].dim(0), l = xs[0].dim(1);
  Tensor out({xs.size(), c, l});
  for (std::size_t b = 0; b < xs.size(); ++b) {
    require(xs[b].shape() == xs[0].shape(), ErrorKind::Shape, "batch samples differ in shape");
    std::copy(xs[b].data().begin(), xs[b].data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * c * l));
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  expect_rank(logits, 2, "logits");
  std::vector<int> out(logits.dim(0));
  for (std::size_t r = 0; r < logits.dim(0); ++r) {
    int best = 0;
    for (std::size_t c = 1; c < logits.dim(1); ++c)
      if (logits.at(r, c) > logits.at(r, static_cast<std::size_t>(best))) best = static_cast<int>(c);
    out[r] = best;
  }
  return out;
}

}  // namespace gaitq
