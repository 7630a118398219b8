#include "gaitq/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace gaitq {

using nlohmann::json;

std::vector<Window> windows_from_segments(const std::vector<LabeledSegment>& segs, const StreamConfig& cfg) {
  cfg.validate();
  std::vector<Window> out;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    for (auto& sw : make_windows(segs[i].samples, cfg))
      out.push_back({std::move(sw.x), segs[i].label, segs[i].participant, i, sw.start, sw.end});
  }
  return out;
}

Split split_participant(std::span<const Window> windows, double train_ratio, double val_ratio) {
  require(windows.size() >= 10, ErrorKind::Validation,
          "a participant needs at least 10 windows to split (got " + std::to_string(windows.size()) + ")");
  require(train_ratio > 0 && val_ratio >= 0 && train_ratio + val_ratio <= 1, ErrorKind::Validation,
          "split ratios must be non-negative and sum to at most 1");
  // Segments in order of first appearance; windows of a segment by start time.
  std::vector<std::size_t> seg_order;
  std::map<std::size_t, std::vector<std::size_t>> by_seg;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    auto [it, fresh] = by_seg.try_emplace(windows[i].segment);
    if (fresh) seg_order.push_back(windows[i].segment);
    it->second.push_back(i);
  }
  Split sp;
  for (std::size_t seg : seg_order) {
    auto& idx = by_seg[seg];
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return windows[a].start < windows[b].start; });
    const double n = static_cast<double>(idx.size());
    const auto n_train = std::min(idx.size(), static_cast<std::size_t>(std::floor(train_ratio * n + 0.5)));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::floor(val_ratio * n + 0.5)));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto& dst = k < n_train ? sp.train : k < n_train + n_val ? sp.val : sp.test;
      dst.push_back(idx[k]);
    }
  }
  return sp;
}

bool is_allowed_batch_size(int bs) { return bs >= 16 && bs <= 48 && bs % 8 == 0; }

void TrainConfig::validate() const {
  require(is_allowed_batch_size(bs), ErrorKind::Validation,
          "batch size " + std::to_string(bs) + " not in {16, 24, 32, 40, 48}");
  require(lr >= 1e-5 && lr <= 1e-3, ErrorKind::Validation, "learning rate must be in [1e-5, 1e-3]");
  require(epochs >= 0 && patience >= 1, ErrorKind::Validation, "epochs must be >= 0 and patience >= 1");
}

json TrainConfig::to_json() const {
  return {{"bs", bs}, {"lr", lr}, {"epochs", epochs}, {"patience", patience}, {"seed", seed}};
}

json EpochLog::to_json() const {
  return {{"phase", phase}, {"epoch", epoch}, {"train_loss", train_loss}, {"val_f1", val_f1}, {"wall_s", wall_s}};
}

Samples gather(std::span<const Window> windows, std::span<const std::size_t> idx) {
  Samples s;
  s.x.reserve(idx.size());
  s.y.reserve(idx.size());
  for (std::size_t i : idx) {
    s.x.push_back(windows[i].x);
    s.y.push_back(windows[i].label);
  }
  return s;
}

double f1_score(std::span<const int> pred, std::span<const int> labels, int positive) {
  require(!pred.empty(), ErrorKind::Validation, "f1_score needs at least one prediction");
  require(pred.size() == labels.size(), ErrorKind::Shape, "predictions and labels differ in length");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == positive, l = labels[i] == positive;
    tp += p && l;
    fp += p && !l;
    fn += !p && l;
  }
  if (tp == 0) return 0.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

namespace {

class Adam {
 public:
  explicit Adam(double lr) : lr_(lr) {}

  void step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, t_), c2 = 1.0 - std::pow(kBeta2, t_);
    for (const auto& [name, g] : grads) {
      Tensor& p = params.at(name);
      auto& m = m_.try_emplace(name, Tensor(p.shape(), 0.0)).first->second;
      auto& v = v_.try_emplace(name, Tensor(p.shape(), 0.0)).first->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1 - kBeta1) * g[i];
        v[i] = kBeta2 * v[i] + (1 - kBeta2) * g[i] * g[i];
        p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  double lr_;
  int t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

std::vector<std::vector<std::size_t>> batches(std::size_t n, int bs, std::mt19937_64* rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (rng) std::shuffle(order.begin(), order.end(), *rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(bs))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(bs))));
  return out;
}

Tensor batch_of(const Samples& s, const std::vector<std::size_t>& idx, std::vector<int>& labels) {
  std::vector<Tensor> xs;
  labels.clear();
  for (std::size_t i : idx) {
    xs.push_back(s.x[i]);
    labels.push_back(s.y[i]);
  }
  return stack_batch(xs);
}

double eval_f1(const Model& m, const Samples& s, Pass pass) {
  if (pass == Pass::FloatTrain) return f1_score(m.predict(s.x, Mode::Float), s.y);
  Model snap = m;
  snap.freeze();
  return f1_score(snap.predict(s.x, Mode::FakeQuant), s.y);
}

TrainResult fit(Model model, const Samples& train, const Samples& val, const TrainConfig& cfg, Pass pass,
                const std::string& phase, const EpochSink& sink) {
  cfg.validate();
  require(train.size() > 0 && val.size() > 0, ErrorKind::Validation, "training and validation sets must be non-empty");
  std::mt19937_64 rng(cfg.seed);
  Adam opt(cfg.lr);
  TrainResult best{model, {}, -1.0, 0};
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::vector<int> labels;
    for (const auto& idx : batches(train.size(), cfg.bs, &rng)) {
      const Tensor x = batch_of(train, idx, labels);
      ad::Tape tape(true);
      const GraphOut g = build_graph(tape, model, x, pass);
      const ad::Var loss = ad::cross_entropy(tape, g.logits, labels);
      const double lv = tape.value(loss)[0];
      require(std::isfinite(lv), ErrorKind::Numeric, phase + ": training diverged (non-finite loss)");
      tape.backward(loss);
      std::map<std::string, Tensor> grads;
      for (const auto& [name, v] : g.params) grads.emplace(name, tape.grad(v));
      opt.step(model.params(), grads);
      loss_sum += lv * static_cast<double>(idx.size());
    }
    EpochLog log{phase, epoch, loss_sum / static_cast<double>(train.size()), eval_f1(model, val, pass),
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    best.log.push_back(log);
    if (sink) sink(log);
    if (log.val_f1 > best.best_val_f1) {
      best.model = model;
      best.best_val_f1 = log.val_f1;
      best.best_epoch = epoch;
    } else if (epoch - best.best_epoch >= cfg.patience) {
      break;
    }
  }
  if (best.best_val_f1 < 0) best.best_val_f1 = eval_f1(model, val, pass);
  return best;
}

}  // namespace

TrainResult train_float(Model model, const Samples& train, const Samples& val, const TrainConfig& cfg,
                        const EpochSink& sink) {
  return fit(std::move(model), train, val, cfg, Pass::FloatTrain, "float", sink);
}

TrainResult finetune_qat(Model model, int bits, const Samples& train, const Samples& val, const TrainConfig& cfg,
                         const EpochSink& sink) {
  cfg.validate();
  model.set_bits(bits);
  model.reset_ranges();
  require(train.size() > 0, ErrorKind::Validation, "QAT needs training samples");
  std::vector<int> labels;
  for (const auto& idx : batches(train.size(), cfg.bs, nullptr)) observe_ranges(model, batch_of(train, idx, labels));
  TrainResult r = fit(std::move(model), train, val, cfg, Pass::QatTrain, "qat", sink);
  r.model.freeze();
  return r;
}

namespace {

std::map<std::string, Split> splits_by_participant(std::span<const Window> windows) {
  std::map<std::string, std::vector<std::size_t>> idx;
  for (std::size_t i = 0; i < windows.size(); ++i) idx[windows[i].participant].push_back(i);
  std::map<std::string, Split> out;
  for (const auto& [pid, ids] : idx) {
    std::vector<Window> sub;
    for (std::size_t i : ids) sub.push_back(windows[i]);
    const Split local = split_participant(sub);
    Split global;
    for (std::size_t i : local.train) global.train.push_back(ids[i]);
    for (std::size_t i : local.val) global.val.push_back(ids[i]);
    for (std::size_t i : local.test) global.test.push_back(ids[i]);
    out.emplace(pid, std::move(global));
  }
  return out;
}

}  // namespace

TrainResult train_generalized(const ModelConfig& mcfg, std::span<const Window> windows, const std::string& held_out,
                              const TrainConfig& cfg, const EpochSink& sink) {
  const auto splits = splits_by_participant(windows);
  require(splits.size() >= 2, ErrorKind::Validation, "generalized training needs at least two participants");
  require(splits.count(held_out) == 1, ErrorKind::Validation, "unknown held-out participant '" + held_out + "'");
  std::vector<std::size_t> tr, va;
  for (const auto& [pid, sp] : splits) {
    if (pid == held_out) continue;
    tr.insert(tr.end(), sp.train.begin(), sp.train.end());
    va.insert(va.end(), sp.val.begin(), sp.val.end());
  }
  return train_float(Model::build(mcfg, cfg.seed), gather(windows, tr), gather(windows, va), cfg, sink);
}

StudyResult two_step(const ModelConfig& mcfg, std::span<const Window> windows, const std::string& subject,
                     const TrainConfig& pretrain, const TrainConfig& finetune, const EpochSink& sink) {
  const auto splits = splits_by_participant(windows);
  require(splits.count(subject) == 1, ErrorKind::Validation, "unknown subject '" + subject + "'");
  const Split& sp = splits.at(subject);
  const Samples tr = gather(windows, sp.train), va = gather(windows, sp.val), te = gather(windows, sp.test);
  require(te.size() > 0, ErrorKind::Validation, "subject has no test windows");

  TrainResult gen = train_generalized(mcfg, windows, subject, pretrain, sink);
  StudyResult r;
  r.generalized_test_f1 = f1_score(gen.model.predict(te.x, Mode::Float), te.y);
  TrainResult ft = finetune_qat(std::move(gen.model), mcfg.bits, tr, va, finetune, sink);
  r.log = std::move(gen.log);
  r.log.insert(r.log.end(), ft.log.begin(), ft.log.end());
  r.val_f1 = ft.best_val_f1;
  r.test_f1_fakequant = f1_score(ft.model.predict(te.x, Mode::FakeQuant), te.y);
  r.test_f1_int = f1_score(ft.model.predict(te.x, Mode::Int), te.y);
  r.test_windows = te.size();
  r.model = std::move(ft.model);
  return r;
}

}  // namespace gaitq
