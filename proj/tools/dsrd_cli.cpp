// dsrd: synth | train | eval | bench | export-decays | gradcheck
// Exit codes: 0 ok, 1 runtime failure, 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "dsrd/dsrd.hpp"
#include "dsrd/manifest.hpp"

namespace fs = std::filesystem;
using namespace dsrd;
using Real = float;  // training and evaluation precision

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --data accepts a directory holding events.csv [+ node_features.csv] or an events file.
struct DataPaths {
  std::string events;
  std::optional<std::string> features;
  std::vector<std::string> all() const {
    std::vector<std::string> v{events};
    if (features) v.push_back(*features);
    return v;
  }
};

DataPaths resolve_data(const std::string& data) {
  DataPaths p;
  if (fs::is_directory(data)) {
    p.events = (fs::path(data) / "events.csv").string();
    const auto nf = fs::path(data) / "node_features.csv";
    if (fs::exists(nf)) p.features = nf.string();
  } else {
    p.events = data;
    const auto nf = fs::path(data).parent_path() / "node_features.csv";
    if (fs::exists(nf)) p.features = nf.string();
  }
  if (!fs::exists(p.events)) throw Error("no events file at " + p.events);
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

SplitPlan make_plan(const EventStream& s, const TrainConfig& c, Setting setting) {
  if (setting == Setting::Inductive) return inductive_split(s, c.train_frac, c.val_frac, c.new_node_frac, c.seed);
  return chronological_split(s, c.train_frac, c.val_frac);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string pattern = "periodic";
  std::size_t nodes = 200;
  std::size_t events = 5000;
  std::size_t pairs = 0;
  std::uint64_t seed = 0;
  std::size_t node_feat_dim = 16;
  std::size_t edge_feat_dim = 0;
  bool bipartite = false;
  bool labels = false;
  std::string out;
};

int cmd_synth(const SynthArgs& a, const CLI::App& sub) {
  SynthSpec s;
  s.pattern = parse_pattern(a.pattern);
  s.num_nodes = a.nodes;
  if (s.pattern == Pattern::Chain && sub.count("--nodes") == 0) s.num_nodes = 3;
  s.num_events = a.events;
  s.pairs = a.pairs;
  s.seed = a.seed;
  s.node_feat_dim = a.node_feat_dim;
  s.edge_feat_dim = a.edge_feat_dim;
  s.bipartite = a.bipartite;
  s.labels = a.labels;
  const EventStream stream = generate(s);
  fs::create_directories(a.out);
  const auto events = fs::path(a.out) / "events.csv";
  write_csv(stream, events.string());
  RunManifest m;
  m.command = "synth";
  m.seed = a.seed;
  m.output_dir = a.out;
  m.data_paths.push_back(events.string());
  if (stream.node_feat_dim() > 0) {
    const auto nf = fs::path(a.out) / "node_features.csv";
    std::ofstream f(nf, std::ios::binary);
    write_node_features_csv(stream.node_feat(), f);
    m.data_paths.push_back(nf.string());
  }
  m.extra = {{"pattern", a.pattern}, {"nodes", s.num_nodes}, {"events", stream.size()}};
  m.hash_inputs();
  m.write((fs::path(a.out) / "manifest.json").string());
  std::cout << stream.size() << " events, " << stream.num_nodes() << " nodes -> " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data, config, out;
  std::optional<std::size_t> max_epochs;
  std::optional<std::uint64_t> seed;
  std::string setting;
  bool no_decay = false, no_diffusion = false, no_state = false, no_block = false;
};

nlohmann::json plan_meta(const TrainConfig& c) {
  return {{"train_frac", c.train_frac},
          {"val_frac", c.val_frac},
          {"new_node_frac", c.new_node_frac},
          {"seed", c.seed},
          {"batch_size", c.batch_size},
          {"task", c.task == Task::LinkPrediction ? "link_prediction" : "node_classification"},
          {"setting", to_string(c.setting)}};
}

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config.empty()) cfg = load_train_config(a.config);
  if (a.max_epochs) cfg.max_epochs = *a.max_epochs;
  if (a.seed) cfg.seed = *a.seed;
  if (!a.setting.empty()) cfg.setting = a.setting == "ind" ? Setting::Inductive : Setting::Transductive;
  // independent flags: all of them apply
  cfg.ablation.no_decay |= a.no_decay;
  cfg.ablation.no_diffusion |= a.no_diffusion;
  cfg.ablation.no_state |= a.no_state;
  cfg.ablation.no_block |= a.no_block;
  cfg.validate();

  const DataPaths dp = resolve_data(a.data);
  const EventStream stream = ingest_csv(dp.events, dp.features);
  const SplitPlan plan = make_plan(stream, cfg, cfg.setting);
  const Model<Real> init(cfg.model_config(stream));

  fs::create_directories(a.out);
  RunManifest m;
  m.command = "train";
  m.config_path = a.config;
  m.data_paths = dp.all();
  m.seed = cfg.seed;
  m.output_dir = a.out;
  m.extra = {{"config_hash", config_hash(init.config(), cfg)}, {"ablation", init.config().ablation.any()}};
  m.hash_inputs();
  m.write((fs::path(a.out) / "manifest.json").string());

  std::ofstream hist(fs::path(a.out) / "history.jsonl", std::ios::binary);
  if (!hist) throw Error("cannot write history");
  auto res = fit(stream, plan, init, cfg, [&](const EpochStats& s) {
    hist << to_json(s).dump() << '\n';
    hist.flush();
    std::cerr << "epoch " << s.epoch << " loss " << s.train_loss << " val_ap " << s.val_ap << " val_auc "
              << s.val_auc << '\n';
  });
  nlohmann::json meta = {{"manifest", m.hash()},
                         {"plan", plan_meta(cfg)},
                         {"best_epoch", res.best_epoch},
                         {"best_val", res.best_metric}};
  save_checkpoint((fs::path(a.out) / "model.ckpt").string(), res.best, meta);
  std::cout << "best epoch " << res.best_epoch << " val " << res.best_metric << " -> " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, setting = "trans", nss = "rnd", split = "test", out;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  nlohmann::json meta;
  std::ifstream ck(a.checkpoint, std::ios::binary);
  if (!ck) throw Error("cannot open " + a.checkpoint);
  const Model<Real> model = read_checkpoint<Real>(ck, &meta);
  TrainConfig cfg;
  if (meta.contains("plan")) {
    const auto& p = meta["plan"];
    cfg.train_frac = p.value("train_frac", cfg.train_frac);
    cfg.val_frac = p.value("val_frac", cfg.val_frac);
    cfg.new_node_frac = p.value("new_node_frac", cfg.new_node_frac);
    cfg.seed = p.value("seed", cfg.seed);
    cfg.batch_size = p.value("batch_size", cfg.batch_size);
    if (p.value("task", std::string("link_prediction")) == "node_classification") cfg.task = Task::NodeClassification;
  }
  const Setting setting = a.setting == "ind" ? Setting::Inductive : Setting::Transductive;
  const DataPaths dp = resolve_data(a.data);
  const EventStream stream = ingest_csv(dp.events, dp.features);
  const SplitPlan plan = make_plan(stream, cfg, setting);
  const std::size_t begin = a.split == "val" ? plan.train_end : plan.val_end;
  const std::size_t end = a.split == "val" ? plan.val_end : stream.size();

  MetricReport r;
  if (cfg.task == Task::NodeClassification) {
    r = evaluate_node(model, stream, begin, end, cfg.batch_size);
    r.setting = setting;
  } else {
    LinkEvalOptions o;
    o.setting = setting;
    o.strategy = a.nss == "hist" ? NegativeStrategy::Historical
                 : a.nss == "ind" ? NegativeStrategy::Inductive
                                  : NegativeStrategy::Random;
    o.seed = a.seed;
    o.batch_size = cfg.batch_size;
    r = evaluate_link(model, stream, plan, begin, end, o);
  }
  const std::string text = to_json(r, a.seed, config_hash(model.config(), cfg)).dump(2) + "\n";
  if (!a.out.empty()) write_text(a.out, text);
  std::cout << text;
  return 0;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string sizes = "1e4,3e4";
  std::size_t repeats = 3;
  std::size_t nodes = 1000;
  int dim = 32, neighbors = 10, layers = 2, heads = 2;
  std::uint64_t seed = 0;
  std::string out;
};

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto v = detail::parse_real(detail::trim(tok));
    if (!v || *v < 1 || *v != std::floor(*v)) throw UsageError("bad --sizes entry: " + tok);
    out.push_back(static_cast<std::size_t>(*v));
  }
  if (out.empty()) throw UsageError("--sizes is empty");
  return out;
}

int cmd_bench(const BenchArgs& a) {
  const auto sizes = parse_sizes(a.sizes);
  ModelConfig mc;
  mc.dim = a.dim;
  mc.neighbors = a.neighbors;
  mc.layers = a.layers;
  mc.heads = a.heads;
  mc.seed = a.seed;
  ScalingOptions o;
  o.nodes = a.nodes;
  o.repeats = a.repeats;
  o.seed = a.seed;
  const auto rows = scaling_suite<Real>(sizes, mc, o);
  std::ostringstream s;
  write_scaling_csv(s, rows);
  if (!a.out.empty()) write_text(a.out, s.str());
  std::cout << s.str();
  return 0;
}

// ---------------------------------------------------------------------------

struct DecayArgs {
  std::string checkpoint, out;
  int layers = 2, heads = 2;
  std::size_t steps = 50;
  double max_dt = 100.0;
  std::size_t grid = 50;
};

int cmd_export_decays(const DecayArgs& a) {
  DecayParams<double> dp;
  if (!a.checkpoint.empty()) {
    std::ifstream ck(a.checkpoint, std::ios::binary);
    if (!ck) throw Error("cannot open " + a.checkpoint);
    const auto model = read_checkpoint<double>(ck);
    dp = model.decay_params();
  } else {
    dp = DecayParams<double>(a.layers, a.heads);
  }
  std::ostringstream s;
  s << "layer,head,gamma,lambda,alpha,delta,curve,hop,x,value\n";
  auto row = [&](int l, int h, const char* curve, int hop, double x, double v) {
    s << l << ',' << h << ',' << detail::format_real(dp.gamma(l, h)) << ',' << detail::format_real(dp.lambda(l, h))
      << ',' << detail::format_real(dp.alpha(l, h)) << ',' << detail::format_real(dp.delta(l, h)) << ',' << curve
      << ',' << hop << ',' << detail::format_real(x) << ',' << detail::format_real(v) << '\n';
  };
  for (int l = 0; l < dp.layers; ++l)
    for (int h = 0; h < dp.heads; ++h) {
      const double g = dp.gamma(l, h);
      for (std::size_t m = 0; m <= a.steps; ++m) row(l, h, "retention", 0, double(m), std::pow(g, double(m)));
      for (std::size_t i = 0; i <= a.grid; ++i) {
        const double dt = a.max_dt * double(i) / double(a.grid);
        row(l, h, "temporal", 0, dt, kern::temporal_factor(dp.lambda(l, h), dp.alpha(l, h), dt));
      }
      for (int hop = 1; hop <= dp.layers; ++hop)
        for (std::size_t i = 0; i <= a.grid; ++i) {
          const double dt = a.max_dt * double(i) / double(a.grid);
          row(l, h, "attenuation", hop, dt, kern::attenuation(hop, dp.delta(l, h), dt));
        }
    }
  if (!a.out.empty()) write_text(a.out, s.str());
  else std::cout << s.str();
  return 0;
}

// ---------------------------------------------------------------------------

struct GradArgs {
  std::uint64_t seed = 0;
  std::size_t events = 30;
  std::size_t nodes = 8;
  double eps = 1e-5;
  double tol = 1e-4;
  std::size_t per_param = 4;
};

int cmd_gradcheck(const GradArgs& a) {
  SynthSpec s;
  s.pattern = Pattern::Uniform;
  s.num_nodes = a.nodes;
  s.num_events = a.events;
  s.seed = a.seed;
  s.node_feat_dim = 4;
  s.edge_feat_dim = 2;
  s.labels = true;
  const EventStream stream = generate(s);
  ModelConfig mc;
  mc.dim = 8;
  mc.time_dim = 4;
  mc.neighbors = 5;
  mc.num_nodes = stream.num_nodes();
  mc.node_feat_dim = stream.node_feat_dim();
  mc.edge_feat_dim = stream.edge_feat_dim();
  mc.seed = a.seed;
  const Model<double> model(mc);
  GradCheckOptions o;
  o.seed = a.seed;
  o.eps = a.eps;
  o.per_param = a.per_param;
  const auto r = gradient_check(model, stream, o);
  nlohmann::ordered_json j;
  j["seed"] = a.seed;
  j["checked"] = r.checked;
  j["max_rel_error"] = r.report.max_rel_error;
  j["groups"] = r.group_max;
  std::cout << j.dump(2) << '\n';
  return r.report.max_rel_error <= a.tol ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dsrd: temporal graph retention models"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic event stream");
  synth->add_option("--pattern", sa.pattern)->check(CLI::IsMember({"periodic", "bursty", "chain", "uniform"}));
  synth->add_option("--nodes", sa.nodes)->check(CLI::PositiveNumber);
  synth->add_option("--events", sa.events)->check(CLI::PositiveNumber);
  synth->add_option("--pairs", sa.pairs);
  synth->add_option("--seed", sa.seed);
  synth->add_option("--node-feat-dim", sa.node_feat_dim);
  synth->add_option("--edge-feat-dim", sa.edge_feat_dim);
  synth->add_flag("--bipartite", sa.bipartite);
  synth->add_flag("--labels", sa.labels, "label every event with its source class");
  synth->add_option("--out", sa.out, "output directory")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "fit a model with early stopping");
  train->add_option("--data", ta.data)->required();
  train->add_option("--config", ta.config)->check(CLI::ExistingFile);
  train->add_option("--out", ta.out)->required();
  train->add_option("--max-epochs", ta.max_epochs);
  train->add_option("--seed", ta.seed);
  train->add_option("--setting", ta.setting)->check(CLI::IsMember({"trans", "ind"}));
  train->add_flag("--no-decay", ta.no_decay);
  train->add_flag("--no-diffusion", ta.no_diffusion);
  train->add_flag("--no-state", ta.no_state);
  train->add_flag("--no-block", ta.no_block);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "score a checkpoint on the held-out slice");
  eval->add_option("--checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", ea.data)->required();
  eval->add_option("--setting", ea.setting)->check(CLI::IsMember({"trans", "ind"}));
  eval->add_option("--nss", ea.nss)->check(CLI::IsMember({"rnd", "hist", "ind"}));
  eval->add_option("--split", ea.split)->check(CLI::IsMember({"val", "test"}));
  eval->add_option("--seed", ea.seed);
  eval->add_option("--out", ea.out, "also write the report here");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "forward/backward timing over stream sizes");
  bench->add_option("--sizes", ba.sizes, "comma-separated event counts, e.g. 1e4,1e5");
  bench->add_option("--repeats", ba.repeats)->check(CLI::PositiveNumber);
  bench->add_option("--nodes", ba.nodes)->check(CLI::Range(2, 1 << 30));
  bench->add_option("--dim", ba.dim);
  bench->add_option("--neighbors", ba.neighbors);
  bench->add_option("--seed", ba.seed);
  bench->add_option("--out", ba.out);

  DecayArgs da;
  auto* decays = app.add_subcommand("export-decays", "CSV of gate, temporal and hop decay curves");
  decays->add_option("--checkpoint", da.checkpoint)->check(CLI::ExistingFile);
  decays->add_option("--layers", da.layers)->check(CLI::PositiveNumber);
  decays->add_option("--heads", da.heads)->check(CLI::PositiveNumber);
  decays->add_option("--steps", da.steps);
  decays->add_option("--max-dt", da.max_dt)->check(CLI::PositiveNumber);
  decays->add_option("--grid", da.grid)->check(CLI::PositiveNumber);
  decays->add_option("--out", da.out);

  GradArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "reverse mode vs central differences");
  grad->add_option("--seed", ga.seed);
  grad->add_option("--events", ga.events)->check(CLI::Range(4, 1000));
  grad->add_option("--nodes", ga.nodes)->check(CLI::Range(2, 1000));
  grad->add_option("--eps", ga.eps)->check(CLI::Range(1e-6, 1e-3));
  grad->add_option("--tol", ga.tol);
  grad->add_option("--per-param", ga.per_param);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*synth) return cmd_synth(sa, *synth);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*bench) return cmd_bench(ba);
    if (*decays) return cmd_export_decays(da);
    if (*grad) return cmd_gradcheck(ga);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
