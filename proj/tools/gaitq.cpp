// gaitq command-line interface.
//
// Exit codes: 0 success, 2 usage/validation/IO error, 3 runtime or numeric failure.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "gaitq/dataio.hpp"
#include "gaitq/error.hpp"
#include "gaitq/hwcost.hpp"
#include "gaitq/models.hpp"
#include "gaitq/search.hpp"
#include "gaitq/stream.hpp"
#include "gaitq/train.hpp"
#include "gaitq/version.hpp"

namespace {

using namespace gaitq;
using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

using Clock = std::chrono::steady_clock;

/// One per command, written next to its outputs.
class Manifest {
 public:
  explicit Manifest(std::string command) : command_(std::move(command)), start_(Clock::now()) {}

  json config = json::object();
  std::uint64_t seed = 0;

  void artifact(const fs::path& p) { artifacts_.push_back(p.string()); }

  void write(const fs::path& dir) const {
    const json j = {{"command", command_},
                    {"config", config},
                    {"seed", seed},
                    {"artifacts", artifacts_},
                    {"version", kToolVersion},
                    {"wall_s", std::chrono::duration<double>(Clock::now() - start_).count()}};
    write_text(dir / "manifest.json", j.dump(2) + "\n");
  }

  static void write_text(const fs::path& file, const std::string& text) {
    std::ofstream out(file, std::ios::binary);
    require(out.good(), ErrorKind::Io, "cannot write " + file.string());
    out << text;
    require(out.good(), ErrorKind::Io, "write failed for " + file.string());
  }

 private:
  std::string command_;
  Clock::time_point start_;
  std::vector<std::string> artifacts_;
};

fs::path make_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorKind::Io, "cannot create output directory " + dir);
  // Probe writability up front so failures surface before any work is done.
  const fs::path probe = fs::path(dir) / ".gaitq-write-test";
  {
    std::ofstream out(probe);
    require(out.good(), ErrorKind::Io, "output directory is not writable: " + dir);
  }
  fs::remove(probe, ec);
  return dir;
}

json read_json_file(const fs::path& file) {
  std::ifstream in(file);
  require(in.good(), ErrorKind::Io, "cannot open " + file.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Io, file.string() + ": malformed JSON (" + e.what() + ")");
  }
}

/// A JSON file path or an inline JSON object.
json json_arg(const std::string& s) {
  if (s.empty()) return json::object();
  if (fs::is_regular_file(s)) return read_json_file(s);
  try {
    return json::parse(s);
  } catch (const json::parse_error&) {
    fail(ErrorKind::Validation, "--config is neither a file nor valid JSON: " + s);
  }
}

void write_json(Manifest& m, const fs::path& file, const json& j, int indent = 2) {
  Manifest::write_text(file, j.dump(indent) + "\n");
  m.artifact(file);
}

// ---------------------------------------------------------------------------
// Model selection shared by several commands.

struct ModelFlags {
  std::string arch;
  int variable = 0;
  int bits = 8;
  std::size_t n = 25;
  CLI::Option* bits_opt = nullptr;
  CLI::Option* n_opt = nullptr;

  void add(CLI::App* app, bool with_bits = true) {
    app->add_option("--arch", arch, "cnn, sepcnn, lstm or transformer");
    app->add_option("--variable", variable, "num_blocks, h_size or d_model (default: the architecture's default)");
    if (with_bits) bits_opt = app->add_option("--bitwidth,--bits", bits, "quantization bitwidth (4, 6 or 8)")->capture_default_str();
    n_opt = app->add_option("--n", n, "model input length")->capture_default_str();
  }

  /// Fields from a JSON object, overridden by explicitly given flags.
  ModelConfig resolve(const json& base = json::object()) const {
    ModelConfig c;
    std::string a = arch.empty() ? base.value("arch", std::string{}) : arch;
    require(!a.empty(), ErrorKind::Validation, "--arch is required");
    c.arch = parse_arch(a);
    c.n = base.value("n", c.n);
    c.bits = base.value("bits", c.bits);
    for (const char* key : {"variable", "num_blocks", "h_size", "d_model"})
      if (base.contains(key)) c.set_variable(base.at(key).get<int>());
    if (variable) c.set_variable(variable);
    if (bits_opt && bits_opt->count()) c.bits = bits;
    if (n_opt && n_opt->count()) c.n = n;
    c.validate();
    return c;
  }
};

/// Config of a checkpoint, integer model or bare model-config JSON.
ModelConfig config_of(const json& j) {
  const std::string fmt = j.value("format", std::string{});
  if (fmt == "gaitq-model" || fmt == "gaitq-int") return ModelConfig::from_json(j.at("config"));
  return ModelConfig::from_json(j);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  SynthOptions opt;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  Manifest m("synth");
  const fs::path dir = make_out_dir(a.out);
  const auto segs = synth_dataset(a.opt);
  for (const auto& s : segs) {
    const fs::path file = dir / (s.participant + "_" + label_name(s.label) + ".json");
    write_session(file, s);
    m.artifact(file);
  }
  m.config = {{"participants", a.opt.participants},
              {"seconds_per_class", a.opt.seconds_per_class},
              {"freq_hz", a.opt.freq_hz},
              {"noise_sigma", a.opt.noise_sigma}};
  m.seed = a.opt.seed;
  m.write(dir);
  std::cout << "wrote " << segs.size() << " session files to " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct StreamFlags {
  StreamConfig cfg;

  void add(CLI::App* app, bool trigger) {
    app->add_option("--w", cfg.w, "window size in samples")->capture_default_str();
    app->add_option("--s", cfg.s, "stride ratio")->capture_default_str();
    app->add_option("--d", cfg.d, "downsampling factor")->capture_default_str();
    if (trigger) {
      app->add_option("--f", cfg.f, "sampling frequency, Hz")->capture_default_str();
      app->add_option("--n-consec", cfg.n_consec, "consecutive positives before feedback")->capture_default_str();
      app->add_option("--cooldown", cfg.cooldown, "minimum seconds between feedback events")->capture_default_str();
    }
  }

  json to_json() const {
    return {{"w", cfg.w}, {"f", cfg.f}, {"s", cfg.s}, {"d", cfg.d}, {"n_consec", cfg.n_consec},
            {"cooldown", cfg.cooldown}, {"target", label_name(cfg.target)}};
  }
};

struct DataFlags {
  std::string data;
  std::size_t cap = 0;
  bool equalize = false;

  void add(CLI::App* app, bool required) {
    auto* o = app->add_option("--data", data, "session file or directory");
    if (required) o->required();
    app->add_option("--cap", cap, "per-participant, per-class sample cap (0: none)")->capture_default_str();
    app->add_flag("--equalize", equalize, "cap both classes to the smaller count");
  }

  std::vector<LabeledSegment> load() const {
    auto segs = data.empty() ? synth_dataset(SynthOptions{}) : load_sessions(data);
    require(!segs.empty(), ErrorKind::Validation, "no sessions found in " + data);
    if (cap > 0) segs = cap_balance(segs, cap, equalize);
    return segs;
  }

  json to_json() const {
    return {{"data", data.empty() ? json("synthetic-default") : json(data)}, {"cap", cap}, {"equalize", equalize}};
  }
};

/// Windows at the data's sampling rate.
std::vector<Window> windows_for(const std::vector<LabeledSegment>& segs, StreamConfig cfg) {
  cfg.f = segs.front().freq_hz;
  for (const auto& s : segs)
    require(std::abs(s.freq_hz - cfg.f) <= 0.01 * cfg.f, ErrorKind::Validation,
            "sessions disagree on sampling frequency");
  return windows_from_segments(segs, cfg);
}

std::string default_subject(const std::vector<Window>& windows) {
  std::set<std::string> ids;
  for (const auto& w : windows) ids.insert(w.participant);
  require(!ids.empty(), ErrorKind::Validation, "data yields no windows");
  return *ids.begin();
}

struct TrainFlags {
  TrainConfig pre, ft;
  CLI::Option *bs = nullptr, *lr = nullptr, *epochs = nullptr, *ft_epochs = nullptr, *patience = nullptr,
              *seed = nullptr;

  void add(CLI::App* app) {
    bs = app->add_option("--bs", pre.bs, "batch size (16 to 48, step 8)")->capture_default_str();
    lr = app->add_option("--lr", pre.lr, "learning rate")->capture_default_str();
    epochs = app->add_option("--epochs", pre.epochs, "epoch cap for generalized pre-training")->capture_default_str();
    ft_epochs = app->add_option("--finetune-epochs", ft.epochs, "epoch cap for QAT fine-tuning")->capture_default_str();
    patience = app->add_option("--patience", pre.patience, "early-stopping patience")->capture_default_str();
    seed = app->add_option("--seed", pre.seed, "random seed")->capture_default_str();
  }

  void resolve(const json& base) {
    if (!bs->count()) pre.bs = base.value("bs", pre.bs);
    if (!lr->count()) pre.lr = base.value("lr", pre.lr);
    if (!epochs->count()) pre.epochs = base.value("epochs", pre.epochs);
    if (!ft_epochs->count()) ft.epochs = base.value("finetune_epochs", ft.epochs);
    if (!patience->count()) pre.patience = base.value("patience", pre.patience);
    if (!seed->count()) pre.seed = base.value("seed", pre.seed);
    const int ft_epochs_v = ft.epochs;
    ft = pre;
    ft.epochs = ft_epochs_v;
    pre.validate();
    ft.validate();
  }
};

struct TrainArgs {
  ModelFlags model;
  DataFlags data;
  StreamFlags stream;
  TrainFlags train;
  std::string config, hold_out, out;
};

int cmd_train(TrainArgs& a) {
  Manifest m("train");
  const json base = json_arg(a.config);
  a.train.resolve(base);
  ModelConfig mcfg = a.model.resolve(base);
  a.stream.cfg.validate();
  require(mcfg.n == a.stream.cfg.n(), ErrorKind::Validation,
          "model input length " + std::to_string(mcfg.n) + " does not match w/d = " +
              std::to_string(a.stream.cfg.n()));
  const fs::path dir = make_out_dir(a.out);

  const auto windows = windows_for(a.data.load(), a.stream.cfg);
  const std::string subject = a.hold_out.empty() ? default_subject(windows) : a.hold_out;

  std::ofstream log(dir / "train_log.jsonl", std::ios::binary);
  require(log.good(), ErrorKind::Io, "cannot write training log");
  const StudyResult r = two_step(mcfg, windows, subject, a.train.pre, a.train.ft, [&](const EpochLog& e) {
    log << e.to_json().dump() << '\n';
    log.flush();
  });
  m.artifact(dir / "train_log.jsonl");

  write_json(m, dir / "model.json", r.model.to_json(), -1);
  require(r.model.int_model().has_value(), ErrorKind::Numeric, "fine-tuned model has no integer export");
  write_json(m, dir / "model.int.json", r.model.int_model()->to_json(), -1);
  const json result = {{"subject", subject},
                       {"generalized_test_f1", r.generalized_test_f1},
                       {"val_f1", r.val_f1},
                       {"test_f1_fakequant", r.test_f1_fakequant},
                       {"test_f1_int", r.test_f1_int},
                       {"test_windows", r.test_windows},
                       {"epochs", r.log.size()}};
  write_json(m, dir / "result.json", result);

  m.config = {{"model", mcfg.to_json()},
              {"pretrain", a.train.pre.to_json()},
              {"finetune", a.train.ft.to_json()},
              {"stream", a.stream.to_json()},
              {"data", a.data.to_json()},
              {"hold_out", subject}};
  m.seed = a.train.pre.seed;
  m.write(dir);

  std::printf("subject %s: generalized float test F1 %.4f\n", subject.c_str(), r.generalized_test_f1);
  std::printf("fine-tuned b=%d: val F1 %.4f, test F1 fake-quant %.4f, integer %.4f (%zu windows)\n", mcfg.bits,
              r.val_f1, r.test_f1_fakequant, r.test_f1_int, r.test_windows);
  return 0;
}

// ---------------------------------------------------------------------------

struct SearchArgs {
  std::string arch, platform = "xc7s15", hold_out, out;
  DataFlags data;
  StreamFlags stream;
  SearchOptions opt;
  int epochs = 200, patience = 10;
  std::vector<double> lr_grid;
};

int cmd_search(SearchArgs& a) {
  Manifest m("search");
  a.stream.cfg.validate();
  SearchSpace space = SearchSpace::for_arch(parse_arch(a.arch), a.stream.cfg.n());
  space.lr_grid = a.lr_grid;
  space.validate();
  const Platform platform = Platform::load(a.platform);
  const fs::path dir = make_out_dir(a.out);

  const auto windows = windows_for(a.data.load(), a.stream.cfg);
  const std::string subject = a.hold_out.empty() ? default_subject(windows) : a.hold_out;

  const Evaluator eval = [&](const TrialConfig& c, std::uint64_t seed) {
    const CostReport cost = platform.cost(c.model);
    if (!cost.deployable) return Evaluation{0.0, cost.energy_uj, false};
    TrainConfig tc;
    tc.bs = c.bs;
    tc.lr = c.lr;
    tc.epochs = a.epochs;
    tc.patience = a.patience;
    tc.seed = seed;
    const StudyResult r = two_step(c.model, windows, subject, tc, tc);
    return Evaluation{r.val_f1, cost.energy_uj, true};
  };
  const SearchResult r = run_search(space, a.opt, eval, [](const Trial& t) {
    std::printf("trial %3zu  %-40s f1 %.4f  energy %9.3f uJ  %s%s\n", t.index, t.config.key().c_str(), t.f1,
                t.energy_uj, t.deployable ? "deployable" : "not deployable",
                t.error.empty() ? "" : ("  error: " + t.error).c_str());
    std::fflush(stdout);
  });

  write_archive(dir / "archive.jsonl", r.archive);
  m.artifact(dir / "archive.jsonl");
  write_front(dir / "front.json", r.archive, r.front);
  m.artifact(dir / "front.json");
  write_scatter_csv(dir / "scatter.csv", r.archive, r.front);
  m.artifact(dir / "scatter.csv");

  m.config = {{"space", space.to_json()},
              {"budget", a.opt.budget},
              {"population", a.opt.population},
              {"mutation", a.opt.mutation},
              {"repeats", a.opt.repeats},
              {"epochs", a.epochs},
              {"patience", a.patience},
              {"platform", platform.name()},
              {"stream", a.stream.to_json()},
              {"data", a.data.to_json()},
              {"hold_out", subject}};
  m.seed = a.opt.seed;
  m.write(dir);
  std::printf("%zu trials, %zu on the Pareto front\n", r.archive.size(), r.front.size());
  return 0;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string model, data, mode = "int", platform = "xc7s15", target = "heel", out;
  StreamFlags stream;
};

int cmd_simulate(SimulateArgs& a) {
  Manifest m("simulate");
  a.stream.cfg.target = parse_label(a.target);
  a.stream.cfg.validate();
  const json mj = read_json_file(a.model);
  const ModelConfig mcfg = config_of(mj);
  require(mcfg.n == a.stream.cfg.n(), ErrorKind::Validation,
          "model input length " + std::to_string(mcfg.n) + " does not match w/d = " +
              std::to_string(a.stream.cfg.n()));

  Classifier classify;
  std::optional<Model> model;
  std::optional<IntModel> int_model;
  if (mj.value("format", std::string{}) == "gaitq-int") {
    require(a.mode == "int", ErrorKind::Validation, "an integer model file only supports --mode int");
    int_model = IntModel::from_json(mj);
    classify = [&](const Tensor& x) { return int_model->predict(x); };
  } else {
    model = Model::from_json(mj);
    Mode mode = a.mode == "int" ? Mode::Int : a.mode == "fakequant" ? Mode::FakeQuant : Mode::Float;
    require(a.mode == "int" || a.mode == "fakequant" || a.mode == "float", ErrorKind::Validation,
            "--mode must be int, fakequant or float");
    require(mode == Mode::Float || model->frozen(), ErrorKind::Validation, "quantized modes need a fine-tuned model");
    classify = [&, mode](const Tensor& x) { return model->predict({x}, mode).front(); };
  }

  const auto segs = load_sessions(a.data);
  require(!segs.empty(), ErrorKind::Validation, "no sessions in " + a.data);
  const CostReport cost = Platform::load(a.platform).cost(mcfg);
  const fs::path dir = make_out_dir(a.out);

  std::ofstream events(dir / "events.jsonl", std::ios::binary);
  require(events.good(), ErrorKind::Io, "cannot write event log");
  std::size_t n_windows = 0, n_events = 0;
  double counter_sum = 0;
  json per_segment = json::array();
  std::optional<double> first_event;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    require(std::abs(segs[i].freq_hz - a.stream.cfg.f) <= 0.01 * a.stream.cfg.f, ErrorKind::Validation,
            "session sampled at " + std::to_string(segs[i].freq_hz) + " Hz but --f is " +
                std::to_string(a.stream.cfg.f));
    const SimResult r = simulate(segs[i].samples, classify, a.stream.cfg);
    for (const auto& e : r.events)
      events << json{{"segment", i}, {"participant", segs[i].participant}, {"label", label_name(segs[i].label)},
                     {"t", e.t}, {"class", label_name(e.cls)}}
                    .dump()
             << '\n';
    std::size_t positives = 0;
    for (const auto& s : r.steps) {
      counter_sum += s.counter;
      positives += s.predicted == a.stream.cfg.target;
    }
    n_windows += r.steps.size();
    n_events += r.events.size();
    if (!r.events.empty() && (!first_event || r.events.front().t < *first_event)) first_event = r.events.front().t;
    per_segment.push_back({{"segment", i},
                           {"participant", segs[i].participant},
                           {"label", label_name(segs[i].label)},
                           {"windows", r.steps.size()},
                           {"target_predictions", positives},
                           {"events", r.events.size()},
                           {"first_event_t", r.events.empty() ? json(nullptr) : json(r.events.front().t)}});
  }
  events.close();
  m.artifact(dir / "events.jsonl");

  const double t_infer_s = cost.latency_ms / 1000.0;
  const json summary = {{"segments", segs.size()},
                        {"windows", n_windows},
                        {"events", n_events},
                        {"first_event_t", first_event ? json(*first_event) : json(nullptr)},
                        {"mean_counter", n_windows ? counter_sum / static_cast<double>(n_windows) : 0.0},
                        {"feedback_latency_s", feedback_latency(a.stream.cfg)},
                        {"realtime_bound_s", realtime_bound(a.stream.cfg)},
                        {"latency_ms", cost.latency_ms},
                        {"realtime_ok", realtime_ok(a.stream.cfg, t_infer_s)},
                        {"worst_case_compute_mw", worst_case_energy_rate(a.stream.cfg, cost.energy_uj) * 1e3},
                        {"cost", cost.to_json()},
                        {"per_segment", per_segment}};
  write_json(m, dir / "summary.json", summary);

  m.config = {{"model", a.model}, {"data", a.data}, {"mode", a.mode}, {"platform", cost.platform},
              {"stream", a.stream.to_json()}};
  m.write(dir);
  std::printf("%zu windows, %zu feedback events", n_windows, n_events);
  if (first_event) std::printf(", first at %.3f s", *first_event);
  std::printf("\nlatency %.4f ms vs real-time bound %.1f ms: %s\n", cost.latency_ms,
              realtime_bound(a.stream.cfg) * 1e3, realtime_ok(a.stream.cfg, t_infer_s) ? "ok" : "too slow");
  return 0;
}

// ---------------------------------------------------------------------------

struct CostArgs {
  ModelFlags model;
  std::string file, platform = "xc7s15", out;
  bool estimate = false;
};

int cmd_cost(CostArgs& a) {
  Manifest m("cost");
  const ModelConfig cfg = a.file.empty() ? a.model.resolve() : config_of(read_json_file(a.file));
  const Platform p = Platform::load(a.platform);
  const CostReport r = a.estimate ? p.estimate(cfg) : p.cost(cfg);
  std::cout << r.to_json().dump(2) << "\n";
  if (!a.out.empty()) {
    const fs::path dir = make_out_dir(a.out);
    write_json(m, dir / "cost.json", r.to_json());
    m.config = {{"model", cfg.to_json()}, {"platform", p.name()}, {"estimate_only", a.estimate}};
    m.write(dir);
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  std::string run;
  bool as_json = false;
};

int cmd_report(const ReportArgs& a) {
  const fs::path dir(a.run);
  const auto archive = read_archive(dir / "archive.jsonl");
  const auto front = pareto_front(archive);
  std::size_t deployable = 0, failed = 0;
  for (const auto& t : archive) {
    deployable += t.deployable;
    failed += !t.error.empty();
  }
  json j = {{"trials", archive.size()}, {"deployable", deployable}, {"failed", failed}, {"front", json::array()}};
  for (std::size_t i : front) j["front"].push_back(archive[i].to_json());
  if (a.as_json) {
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  std::printf("%zu trials, %zu deployable, %zu failed\n\nPareto front (by energy):\n", archive.size(), deployable,
              failed);
  std::printf("%6s  %-12s %4s %3s %3s %10s %7s %10s\n", "trial", "arch", "var", "b", "bs", "lr", "F1", "E (uJ)");
  for (const auto& t : j["front"]) {
    const auto& c = t["config"];
    std::printf("%6zu  %-12s %4d %3d %3d %10.3e %7.4f %10.3f\n", t["index"].get<std::size_t>(),
                c["arch"].get<std::string>().c_str(), c["variable"].get<int>(), c["bits"].get<int>(),
                c["bs"].get<int>(), c["lr"].get<double>(), t["f1"].get<double>(), t["energy_uj"].get<double>());
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct DescribeArgs {
  ModelFlags model;
  std::string file;
  bool as_json = false;
};

int cmd_describe(DescribeArgs& a) {
  const ModelConfig cfg = a.file.empty() ? a.model.resolve() : config_of(read_json_file(a.file));
  if (!a.as_json) {
    std::cout << describe_text(cfg);
    return 0;
  }
  json layers = json::array();
  for (const auto& l : describe(cfg))
    layers.push_back({{"name", l.name}, {"kind", l.kind}, {"in", l.in}, {"out", l.out}, {"params", l.params},
                      {"macs", l.macs}});
  std::cout << json{{"config", cfg.to_json()}, {"params", param_count(cfg)}, {"macs", mac_count(cfg)},
                    {"layers", layers}}
                   .dump(2)
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gaitq: quantized footstrike classifiers for small FPGAs"};
  app.set_version_flag("--version", gaitq::kToolVersion);
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "write a synthetic gait dataset");
  c_synth->add_option("--seed", synth.opt.seed, "generator seed")->capture_default_str();
  c_synth->add_option("--participants", synth.opt.participants, "number of participants")->capture_default_str();
  c_synth->add_option("--seconds", synth.opt.seconds_per_class, "seconds per class")->capture_default_str();
  c_synth->add_option("--freq", synth.opt.freq_hz, "sampling frequency, Hz")->capture_default_str();
  c_synth->add_option("--noise", synth.opt.noise_sigma, "white noise sigma, g")->capture_default_str();
  c_synth->add_option("--out", synth.out, "output directory")->required();

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "generalized pre-training, QAT fine-tuning and integer export");
  train.model.add(c_train);
  train.data.add(c_train, true);
  train.stream.add(c_train, false);
  train.train.add(c_train);
  c_train->add_option("--config", train.config, "JSON file or inline object with model and training fields");
  c_train->add_option("--hold-out", train.hold_out, "subject for fine-tuning (default: first participant)");
  c_train->add_option("--out", train.out, "output directory")->required();

  SearchArgs search;
  auto* c_search = app.add_subcommand("search", "NSGA-II search over F1 and energy");
  c_search->add_option("--arch", search.arch, "cnn, sepcnn, lstm or transformer")->required();
  c_search->add_option("--budget", search.opt.budget, "number of trials")->capture_default_str();
  c_search->add_option("--platform", search.platform, "platform profile name or path")->capture_default_str();
  c_search->add_option("--population", search.opt.population, "NSGA-II population size")->capture_default_str();
  c_search->add_option("--mutation", search.opt.mutation, "per-gene mutation probability")->capture_default_str();
  c_search->add_option("--repeats", search.opt.repeats, "trainings averaged per trial")->capture_default_str();
  c_search->add_option("--seed", search.opt.seed, "master seed")->capture_default_str();
  c_search->add_option("--epochs", search.epochs, "epoch cap per training phase")->capture_default_str();
  c_search->add_option("--patience", search.patience, "early-stopping patience")->capture_default_str();
  c_search->add_option("--lr-grid", search.lr_grid, "discrete learning rates instead of log-uniform sampling")->delimiter(',');
  c_search->add_option("--hold-out", search.hold_out, "subject for fine-tuning (default: first participant)");
  c_search->add_option("--out", search.out, "output directory")->required();
  search.data.add(c_search, false);
  search.stream.add(c_search, false);

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "stream a session through a model and the feedback trigger");
  c_sim->add_option("--model", sim.model, "checkpoint or integer model JSON")->required();
  c_sim->add_option("--data", sim.data, "session file or directory")->required();
  c_sim->add_option("--mode", sim.mode, "int, fakequant or float")->capture_default_str();
  c_sim->add_option("--target", sim.target, "class that triggers feedback")->capture_default_str();
  c_sim->add_option("--platform", sim.platform, "profile for the latency check")->capture_default_str();
  c_sim->add_option("--out", sim.out, "output directory")->required();
  sim.stream.add(c_sim, true);

  CostArgs cost;
  auto* c_cost = app.add_subcommand("cost", "latency, energy and resource report for one configuration");
  cost.model.add(c_cost);
  c_cost->add_option("--model", cost.file, "checkpoint, integer model or model-config JSON");
  c_cost->add_option("--platform", cost.platform, "platform profile name or path")->capture_default_str();
  c_cost->add_flag("--estimate", cost.estimate, "ignore the measured table");
  c_cost->add_option("--out", cost.out, "also write cost.json and a manifest here");

  ReportArgs report;
  auto* c_report = app.add_subcommand("report", "summarize a search run");
  c_report->add_option("--run", report.run, "search output directory")->required();
  c_report->add_flag("--json", report.as_json, "print JSON instead of a table");

  DescribeArgs desc;
  auto* c_desc = app.add_subcommand("describe", "layer shapes, parameters and MACs");
  desc.model.add(c_desc);
  c_desc->add_option("--model", desc.file, "checkpoint, integer model or model-config JSON");
  c_desc->add_flag("--json", desc.as_json, "print JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (c_synth->parsed()) return cmd_synth(synth);
    if (c_train->parsed()) return cmd_train(train);
    if (c_search->parsed()) return cmd_search(search);
    if (c_sim->parsed()) return cmd_simulate(sim);
    if (c_cost->parsed()) return cmd_cost(cost);
    if (c_report->parsed()) return cmd_report(report);
    if (c_desc->parsed()) return cmd_describe(desc);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Numeric ? kExitRuntime : kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
