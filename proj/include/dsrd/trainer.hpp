#pragma once

// Adam, BCE, epoch loop with random negatives, early stopping, config files
// and JSONL history.

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>
#include <fstream>
#include <istream>
#include <map>
#include <optional>

#include "json.hpp"

#include "dsrd/evaluation.hpp"
#include "dsrd/network.hpp"

namespace dsrd {

enum class Task { LinkPrediction, NodeClassification };

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 200;
  std::size_t patience = 10;
  std::size_t max_epochs = 50;
  std::uint64_t seed = 0;
  double dropout = 0.1;
  Task task = Task::LinkPrediction;
  Ablation ablation;
  // model shape
  int layers = 2;
  int heads = 2;
  int dim = 64;
  int neighbors = 20;
  int time_dim = 16;
  // data protocol
  double train_frac = 0.70;
  double val_frac = 0.15;
  double new_node_frac = 0.10;
  Setting setting = Setting::Transductive;
  double time_budget_s = 0.0;  // 0: unlimited

  void validate() const {
    if (!(lr > 0.0)) throw Error("config: lr must be > 0");
    if (batch_size < 1) throw Error("config: batch_size must be >= 1");
    if (patience < 1) throw Error("config: patience must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("config: dropout must lie in [0, 1)");
  }

  ModelConfig model_config(const EventStream& s) const {
    ModelConfig m;
    m.layers = layers;
    m.heads = heads;
    m.dim = dim;
    m.neighbors = neighbors;
    m.time_dim = time_dim;
    m.dropout = dropout;
    m.num_nodes = s.num_nodes();
    m.node_feat_dim = s.node_feat_dim();
    m.edge_feat_dim = s.edge_feat_dim();
    m.seed = seed;
    m.ablation = ablation;
    return m;
  }
};

/// Line-based `key = value`; `#` starts a comment.
inline TrainConfig parse_train_config(std::istream& in, TrainConfig c = {}, const std::string& source = "<config>") {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    const auto view = detail::trim(line);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos) throw ParseError(source, lineno, "expected key = value");
    const std::string k(detail::trim(view.substr(0, eq)));
    const std::string v(detail::trim(view.substr(eq + 1)));
    auto num = [&]() {
      const auto d = detail::parse_real(v);
      if (!d) throw ParseError(source, lineno, "bad number for " + k);
      return *d;
    };
    auto count = [&]() {
      const auto d = detail::parse_uint(v);
      if (!d) throw ParseError(source, lineno, "bad count for " + k);
      return *d;
    };
    auto flag = [&]() {
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      throw ParseError(source, lineno, "bad boolean for " + k);
    };
    if (k == "lr") c.lr = num();
    else if (k == "batch_size") c.batch_size = count();
    else if (k == "patience") c.patience = count();
    else if (k == "max_epochs") c.max_epochs = count();
    else if (k == "seed") c.seed = count();
    else if (k == "dropout") c.dropout = num();
    else if (k == "layers") c.layers = static_cast<int>(count());
    else if (k == "heads") c.heads = static_cast<int>(count());
    else if (k == "dim") c.dim = static_cast<int>(count());
    else if (k == "neighbors") c.neighbors = static_cast<int>(count());
    else if (k == "time_dim") c.time_dim = static_cast<int>(count());
    else if (k == "train_frac") c.train_frac = num();
    else if (k == "val_frac") c.val_frac = num();
    else if (k == "new_node_frac") c.new_node_frac = num();
    else if (k == "time_budget_s") c.time_budget_s = num();
    else if (k == "setting") {
      if (v == "trans" || v == "transductive") c.setting = Setting::Transductive;
      else if (v == "ind" || v == "inductive") c.setting = Setting::Inductive;
      else throw ParseError(source, lineno, "unknown setting " + v);
    } else if (k == "task") {
      if (v == "link_prediction") c.task = Task::LinkPrediction;
      else if (v == "node_classification") c.task = Task::NodeClassification;
      else throw ParseError(source, lineno, "unknown task " + v);
    } else if (k == "ablation.no_decay") c.ablation.no_decay = flag();
    else if (k == "ablation.no_diffusion") c.ablation.no_diffusion = flag();
    else if (k == "ablation.no_state") c.ablation.no_state = flag();
    else if (k == "ablation.no_block") c.ablation.no_block = flag();
    else throw ParseError(source, lineno, "unknown key " + k);
  }
  c.validate();
  return c;
}

inline TrainConfig load_train_config(const std::string& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return parse_train_config(in, base, path);
}

/// Canonical text of a config; its FNV-1a hash tags reports.
inline std::string config_hash(const ModelConfig& m, const TrainConfig& t) {
  std::ostringstream s;
  s << to_json(m).dump() << "|lr=" << t.lr << "|bs=" << t.batch_size << "|pat=" << t.patience
    << "|ep=" << t.max_epochs << "|task=" << int(t.task) << "|tf=" << t.train_frac << "|vf=" << t.val_frac
    << "|nf=" << t.new_node_frac << "|set=" << int(t.setting);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(s.str())));
  return buf;
}

// ---------------------------------------------------------------------------

inline double bce_loss(double p, int y) {
  p = std::clamp(p, ad::kProbClamp, 1.0 - ad::kProbClamp);
  return -(y * std::log(p) + (1 - y) * std::log(1.0 - p));
}

template <class T>
struct OptimizerState {
  std::vector<RowMatrix<T>> m, v;
  std::uint64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  OptimizerState() = default;
  explicit OptimizerState(const ParamSet<T>& p) {
    for (const auto& x : p.values) {
      m.push_back(RowMatrix<T>::Zero(x.rows(), x.cols()));
      v.push_back(RowMatrix<T>::Zero(x.rows(), x.cols()));
    }
  }
};

/// Bias-corrected Adam.
template <class T>
void adam_step(ParamSet<T>& params, const GradientSet<T>& grads, OptimizerState<T>& opt, double lr) {
  if (grads.grads.size() != params.size() || opt.m.size() != params.size()) throw Error("adam: shape mismatch");
  if (!grads.all_finite()) throw Error("adam: non-finite gradient");
  ++opt.step;
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T c1 = T(1) - static_cast<T>(std::pow(opt.beta1, static_cast<double>(opt.step)));
  const T c2 = T(1) - static_cast<T>(std::pow(opt.beta2, static_cast<double>(opt.step)));
  const T a = static_cast<T>(lr), e = static_cast<T>(opt.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& g = grads.grads[i];
    opt.m[i] = b1 * opt.m[i] + (T(1) - b1) * g;
    opt.v[i] = b2 * opt.v[i] + (T(1) - b2) * g.cwiseProduct(g);
    params.values[i].array() -= a * (opt.m[i].array() / c1) / ((opt.v[i].array() / c2).sqrt() + e);
  }
}

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_ap = 0.0;
  double val_auc = 0.0;
  double wall_ms = 0.0;
  std::size_t batches = 0;
};

inline nlohmann::ordered_json to_json(const EpochStats& s) {
  nlohmann::ordered_json j;
  j["epoch"] = s.epoch;
  j["train_loss"] = s.train_loss;
  j["val_ap"] = s.val_ap;
  j["val_auc"] = s.val_auc;
  j["wall_ms"] = s.wall_ms;
  return j;
}

/// Everything the training loop needs about the data split.
struct TrainData {
  const EventStream* stream = nullptr;
  SplitPlan plan;
  std::vector<Event> train_events;  // chronological; filtered in the inductive setting
  NeighborIndex train_index;        // built from train_events only
};

inline TrainData make_train_data(const EventStream& stream, const SplitPlan& plan) {
  TrainData d;
  d.stream = &stream;
  d.plan = plan;
  const auto keep = train_indices(stream, plan);
  for (EventIdx i : keep) d.train_events.push_back(stream[i]);
  if (d.train_events.empty()) throw Error("empty training slice");
  d.train_index = NeighborIndex(stream, keep);
  return d;
}

/// One pass over the training events. Returns the mean batch loss.
template <class T>
EpochStats train_epoch(Model<T>& model, const TrainData& data, const TrainConfig& cfg, OptimizerState<T>& opt,
                       std::size_t epoch) {
  if (data.train_events.empty()) throw Error("empty training slice");
  const EventStream& stream = *data.stream;
  const NegativeSampler sampler(stream, NegativeStrategy::Random, mix_seed(cfg.seed, 0x747261696eULL, epoch));
  StateStore<T> store = model.make_store();
  GradientSet<T> grads(model.params());
  EpochStats st;
  st.epoch = epoch;
  double loss_sum = 0.0;
  std::size_t batch_no = 0;
  const std::span<const Event> seq(data.train_events);
  sweep(model, store, stream, data.train_index, seq, cfg.batch_size, true,
        [&](std::size_t a, std::size_t b, BatchSpec& spec) {
          spec.training = true;
          spec.dropout_seed = mix_seed(cfg.seed, epoch, batch_no);
          for (std::size_t p = a; p < b; ++p) {
            const Event& e = seq[p];
            if (cfg.task == Task::LinkPrediction) {
              const NodeId neg = sampler.sample(e, e.idx);
              const std::size_t q0 = spec.queries.size();
              spec.queries.push_back({e.src, e.time, e.idx});
              spec.queries.push_back({e.dst, e.time, e.idx});
              spec.queries.push_back({neg, e.time, e.idx});
              spec.links.push_back({q0, q0 + 1, 1.0});
              spec.links.push_back({q0, q0 + 2, 0.0});
            } else if (e.has_label()) {
              spec.nodes.push_back({spec.queries.size(), static_cast<double>(e.label)});
              spec.queries.push_back({e.src, e.time, e.idx});
            }
          }
        },
        [&](Tape<T>& tape, const BatchSpec& spec, std::size_t, std::size_t) {
          grads.zero();
          BatchResult<T> r = model.forward(tape, &grads, store, spec);
          if (r.has_loss) {
            loss_sum += static_cast<double>(tape.scalar(r.loss));
            ++st.batches;
            tape.backward(r.loss);
            adam_step(model.params(), grads, opt, cfg.lr);
          }
          ++batch_no;
          return r;
        });
  st.train_loss = st.batches ? loss_sum / static_cast<double>(st.batches) : 0.0;
  return st;
}

/// Patience counter over a maximized metric.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  /// True when `metric` is a new best.
  bool improved(double metric) {
    if (metric > best_) {
      best_ = metric;
      bad_ = 0;
      return true;
    }
    ++bad_;
    return false;
  }
  bool should_stop() const noexcept { return bad_ >= patience_; }
  double best() const noexcept { return best_; }

 private:
  std::size_t patience_;
  std::size_t bad_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
};

template <class T>
struct FitResult {
  Model<T> best;
  std::size_t best_epoch = 0;  // 0: initial model
  double best_metric = -1.0;
  std::vector<EpochStats> history;
  bool stopped_early = false;
};

/// Validation metric used for model selection: AP (link) or AUC (node).
template <class T>
std::pair<double, double> validation_metrics(const Model<T>& model, const TrainData& data, const TrainConfig& cfg) {
  const EventStream& s = *data.stream;
  if (cfg.task == Task::LinkPrediction) {
    LinkEvalOptions o;
    o.setting = cfg.setting;
    o.strategy = NegativeStrategy::Random;
    o.seed = mix_seed(cfg.seed, 0x76616cULL);
    o.batch_size = cfg.batch_size;
    const auto r = evaluate_link(model, s, data.plan, data.plan.train_end, data.plan.val_end, o);
    return {r.ap, r.roc_auc};
  }
  const auto r = evaluate_node(model, s, data.plan.train_end, data.plan.val_end, cfg.batch_size);
  return {r.ap, r.roc_auc};
}

/// Early-stopped training; returns the best-validation model.
template <class T>
FitResult<T> fit(const EventStream& stream, const SplitPlan& plan, Model<T> model, const TrainConfig& cfg,
                 const std::function<void(const EpochStats&)>& on_epoch = {}) {
  cfg.validate();
  const TrainData data = make_train_data(stream, plan);
  FitResult<T> res{model, 0, -1.0, {}, false};
  OptimizerState<T> opt(model.params());
  EarlyStopping stopper(cfg.patience);
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochStats st = train_epoch(model, data, cfg, opt, epoch);
    const auto [ap, auc] = validation_metrics(model, data, cfg);
    st.val_ap = ap;
    st.val_auc = auc;
    st.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.history.push_back(st);
    if (on_epoch) on_epoch(st);
    const double metric = cfg.task == Task::LinkPrediction ? ap : auc;
    if (stopper.improved(metric)) {
      res.best_metric = metric;
      res.best_epoch = epoch;
      res.best = model;
    } else if (stopper.should_stop()) {
      res.stopped_early = true;
      break;
    }
    // stop before an epoch that would overrun the budget
    if (cfg.time_budget_s > 0.0) {
      const double used = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (used + st.wall_ms / 1000.0 > cfg.time_budget_s) break;
    }
  }
  return res;
}

}  // namespace dsrd
