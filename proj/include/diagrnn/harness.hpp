#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "diagrnn/dataset.hpp"
#include "diagrnn/errors.hpp"
#include "diagrnn/model.hpp"
#include "diagrnn/optimizers.hpp"
#include "diagrnn/rng.hpp"
#include "diagrnn/textio.hpp"

namespace diagrnn {

// "300 iterations" can be read as epochs or single mini-batch updates; both
// are supported, epoch being the default reading.
enum class IterationUnit { Epoch, Update };

inline const char* iteration_unit_name(IterationUnit u) {
  return u == IterationUnit::Epoch ? "epoch" : "update";
}

inline IterationUnit parse_iteration_unit(const std::string& s) {
  if (s == "epoch") return IterationUnit::Epoch;
  if (s == "update") return IterationUnit::Update;
  throw ConfigError("unknown iteration unit '" + s + "' (expected epoch|update)");
}

struct SearchSpec {
  std::vector<CellKind> kinds = all_cell_kinds();
  OptimizerKind optimizer = OptimizerKind::Adam;
  int samples = 60;      // configurations per kind
  int iterations = 300;  // training iterations per configuration
  int top_k = 6;
  int batch_size = 32;
  double keep_prob = 0.9;
  LossMode loss_mode = LossMode::FullBernoulli;
  IterationUnit unit = IterationUnit::Epoch;
  std::uint64_t master_seed = 0;

  // Sampling ranges; defaults follow the experimental protocol.
  int layers_lo = 2, layers_hi = 3;
  int hidden_lo_vrnn = 50, hidden_hi_vrnn = 400;
  int hidden_lo_gru = 50, hidden_hi_gru = 350;
  int hidden_lo_lstm = 50, hidden_hi_lstm = 300;
  double lr_lo = 1e-4, lr_hi = 1e-2;

  std::pair<int, int> hidden_range(Arch a) const {
    switch (a) {
      case Arch::VRNN: return {hidden_lo_vrnn, hidden_hi_vrnn};
      case Arch::GRU: return {hidden_lo_gru, hidden_hi_gru};
      case Arch::LSTM: return {hidden_lo_lstm, hidden_hi_lstm};
    }
    return {0, 0};
  }

  void validate() const {
    if (kinds.empty()) throw ConfigError("search: no cell kinds selected");
    if (samples < 1) throw ConfigError("search: samples must be >= 1");
    if (iterations < 0) throw ConfigError("search: iterations must be >= 0");
    if (top_k < 1) throw ConfigError("search: top_k must be >= 1");
    if (batch_size < 1) throw ConfigError("search: batch_size must be >= 1");
    if (layers_lo > layers_hi || layers_lo < 1) throw ConfigError("search: bad layer range");
    if (!(lr_lo > 0.0 && lr_lo <= lr_hi)) throw ConfigError("search: bad learning-rate range");
    for (CellKind k : kinds) {
      const auto [lo, hi] = hidden_range(k.arch);
      if (lo < 1 || lo > hi) throw ConfigError("search: bad hidden range for " + kind_name(k));
    }
  }
};

// One sampled hyperparameter configuration, self-contained enough to replay.
struct TrialConfig {
  int config_id = 0;
  CellKind kind;
  OptimizerKind optimizer = OptimizerKind::Adam;
  int layers = 2;
  int hidden = 100;
  double lr = 1e-3;
  double momentum = 0.0;
  std::uint64_t seed = 0;
  int iterations = 300;
  int batch_size = 32;
  double keep_prob = 0.9;
  LossMode loss_mode = LossMode::FullBernoulli;
  IterationUnit unit = IterationUnit::Epoch;
};

// Per-iteration NLL trajectories; index 0 is the pre-training evaluation.
// Trajectories are truncated when a trial diverges, never dropped.
struct TrialRecord {
  TrialConfig config;
  long param_count = 0;
  std::vector<double> train_nll;
  std::vector<double> valid_nll;
  std::vector<double> test_nll;
  std::vector<double> seconds;  // wall clock per iteration; log only, never in CSVs
  bool diverged = false;
  int rank = -1;

  int iterations_recorded() const { return static_cast<int>(train_nll.size()); }
  double final_valid() const {
    return valid_nll.empty() ? std::numeric_limits<double>::infinity() : valid_nll.back();
  }
};

// Deterministic in the master seed: draws happen kind-major in the order
// layers, hidden, lr, momentum (RMSprop only), then the trial's own seed.
inline std::vector<TrialConfig> sample_configs(const SearchSpec& spec) {
  spec.validate();
  Rng rng(spec.master_seed);
  std::vector<TrialConfig> out;
  int id = 0;
  for (CellKind kind : spec.kinds) {
    const auto [h_lo, h_hi] = spec.hidden_range(kind.arch);
    for (int s = 0; s < spec.samples; ++s) {
      TrialConfig c;
      c.config_id = id++;
      c.kind = kind;
      c.optimizer = spec.optimizer;
      c.layers = static_cast<int>(rng.uniform_int(spec.layers_lo, spec.layers_hi));
      c.hidden = static_cast<int>(rng.uniform_int(h_lo, h_hi));
      c.lr = rng.log_uniform(spec.lr_lo, spec.lr_hi);
      c.momentum = spec.optimizer == OptimizerKind::RmsProp ? rng.uniform(0.0, 1.0) : 0.0;
      c.seed = rng.u64();
      c.iterations = spec.iterations;
      c.batch_size = spec.batch_size;
      c.keep_prob = spec.keep_prob;
      c.loss_mode = spec.loss_mode;
      c.unit = spec.unit;
      out.push_back(c);
    }
  }
  return out;
}

namespace detail {

// One optimizer update on one batch; returns the training-mode loss.
inline double train_update(Model& model, const Batch& batch, Optimizer& opt, std::uint64_t tape_seed) {
  Tape tape(tape_seed);
  ModelGraph graph;
  const NodeId l = loss(model, batch, /*training=*/true, tape, &graph);
  tape.backward(l);
  const auto params = model.parameters();
  std::vector<const Tensor*> grads;
  grads.reserve(graph.params.size());
  for (NodeId id : graph.params) grads.push_back(&tape.adjoint(id));
  opt.step(params, grads);
  return tape.value(l).at(0, 0);
}

}  // namespace detail

// Trains an already-built model under a trial configuration, recording the
// eval-mode NLL of all three splits before training and after every
// iteration. A NaN/non-finite loss (or a numeric domain failure anywhere in
// an update) marks the trial diverged: its trajectory is truncated at the
// last completed iteration and kept.
inline TrialRecord train_model(Model& model, const TrialConfig& config, const Dataset& data,
                               std::uint64_t train_seed) {
  for (Split s : kSplits)
    if (data.split(s).empty())
      throw UsageError(std::string("train: dataset split '") + split_name(s) + "' is empty");

  TrialRecord rec;
  rec.config = config;
  rec.param_count = model.parameter_count();

  Rng rng(train_seed);
  Optimizer opt(OptimizerConfig{config.optimizer, config.lr, config.momentum});

  auto eval_all = [&]() {
    const double tr = evaluate(model, data.split(Split::Train), config.batch_size);
    const double va = evaluate(model, data.split(Split::Valid), config.batch_size);
    const double te = evaluate(model, data.split(Split::Test), config.batch_size);
    if (!std::isfinite(tr) || !std::isfinite(va) || !std::isfinite(te))
      throw DomainError("train: non-finite evaluation");
    rec.train_nll.push_back(tr);
    rec.valid_nll.push_back(va);
    rec.test_nll.push_back(te);
  };

  std::deque<Batch> pending;  // for IterationUnit::Update
  try {
    eval_all();
    for (int it = 1; it <= config.iterations; ++it) {
      const auto started = std::chrono::steady_clock::now();
      if (config.unit == IterationUnit::Epoch) {
        const auto batches = make_batches(data.split(Split::Train), data.pitch_count,
                                          config.batch_size, rng.u64(), /*shuffle=*/true);
        for (const Batch& b : batches) {
          if (b.valid_sequences() == 0) continue;
          const double l = detail::train_update(model, b, opt, rng.u64());
          if (!std::isfinite(l)) throw DomainError("train: non-finite training loss");
        }
      } else {
        if (pending.empty()) {
          for (auto& b : make_batches(data.split(Split::Train), data.pitch_count, config.batch_size,
                                      rng.u64(), /*shuffle=*/true))
            if (b.valid_sequences() > 0) pending.push_back(std::move(b));
        }
        const double l = detail::train_update(model, pending.front(), opt, rng.u64());
        pending.pop_front();
        if (!std::isfinite(l)) throw DomainError("train: non-finite training loss");
      }
      eval_all();
      rec.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
    }
  } catch (const DomainError&) {
    rec.diverged = true;
    // keep the trajectories aligned at one value per completed iteration
    const std::size_t done = std::min({rec.train_nll.size(), rec.valid_nll.size(), rec.test_nll.size()});
    rec.train_nll.resize(done);
    rec.valid_nll.resize(done);
    rec.test_nll.resize(done);
  }
  return rec;
}

// Builds the model for one sampled configuration and trains it. Everything
// is derived from config.seed, so trials replay exactly regardless of
// scheduling.
inline TrialRecord run_trial(const TrialConfig& config, const Dataset& data,
                             const std::string& checkpoint_path = "") {
  Rng trial_rng(config.seed);
  ModelConfig mc;
  mc.kind = config.kind;
  mc.num_layers = config.layers;
  mc.hidden = config.hidden;
  mc.input_size = data.pitch_count;
  mc.keep_prob = config.keep_prob;
  mc.loss_mode = config.loss_mode;
  Model model = Model::init(mc, trial_rng.u64());
  TrialRecord rec = train_model(model, config, data, trial_rng.u64());
  if (!checkpoint_path.empty()) write_checkpoint(model, checkpoint_path);
  return rec;
}

// Top-k summary for one (dataset, optimizer, model) group.
struct KindReport {
  CellKind kind;
  OptimizerKind optimizer = OptimizerKind::Adam;
  int top_k = 0;
  std::vector<int> top_ids;              // config ids, best validation first
  std::vector<double> mean_test_curve;   // per iteration, averaged over top-k
  std::vector<double> final_test;        // the k final test NLLs (violin data)
  double min_test_nll = 0.0;             // minimum over the top-k trajectories
  double mean_param_count = 0.0;
};

// Ranks by final-iteration validation NLL (diverged trials last) and
// summarizes the top k. Test values never influence the selection.
inline KindReport rank_and_report(std::vector<TrialRecord*> records, int k) {
  if (k < 1) throw ConfigError("rank_and_report: k must be >= 1");
  int completed = 0;
  for (const TrialRecord* r : records) completed += r->diverged ? 0 : 1;
  if (completed < k)
    throw UsageError("rank_and_report: need at least " + std::to_string(k) + " completed trials, have " +
                     std::to_string(completed));
  std::stable_sort(records.begin(), records.end(), [](const TrialRecord* a, const TrialRecord* b) {
    const double va = a->diverged ? std::numeric_limits<double>::infinity() : a->final_valid();
    const double vb = b->diverged ? std::numeric_limits<double>::infinity() : b->final_valid();
    if (va != vb) return va < vb;
    return a->config.config_id < b->config.config_id;
  });
  for (std::size_t i = 0; i < records.size(); ++i) records[i]->rank = static_cast<int>(i);

  KindReport rep;
  rep.kind = records.front()->config.kind;
  rep.optimizer = records.front()->config.optimizer;
  rep.top_k = k;
  rep.min_test_nll = std::numeric_limits<double>::infinity();
  double params_sum = 0.0;
  const std::size_t curve_len = records.front()->test_nll.size();
  rep.mean_test_curve.assign(curve_len, 0.0);
  for (int i = 0; i < k; ++i) {
    const TrialRecord& r = *records[static_cast<std::size_t>(i)];
    rep.top_ids.push_back(r.config.config_id);
    rep.final_test.push_back(r.test_nll.back());
    params_sum += static_cast<double>(r.param_count);
    if (r.test_nll.size() != curve_len)
      throw UsageError("rank_and_report: trajectory length mismatch in top-k");
    for (std::size_t t = 0; t < curve_len; ++t) {
      rep.mean_test_curve[t] += r.test_nll[t] / k;
      rep.min_test_nll = std::min(rep.min_test_nll, r.test_nll[t]);
    }
  }
  rep.mean_param_count = params_sum / k;
  return rep;
}

struct SearchResult {
  std::vector<TrialRecord> records;
  std::vector<KindReport> reports;
};

// Runs every sampled configuration, optionally across a worker pool. Trials
// are independent and self-seeded, so results are byte-identical for any
// worker count. `checkpoint_dir` (if non-empty) receives <config_id>.bin
// files; `log` (if given) receives progress lines and may contain
// timestamps -- nothing else does.
inline SearchResult run_search(const SearchSpec& spec, const Dataset& data, int workers = 1,
                               const std::string& checkpoint_dir = "", std::ostream* log = nullptr) {
  const auto configs = sample_configs(spec);
  SearchResult result;
  result.records.resize(configs.size());

  std::mutex log_mutex;
  auto log_line = [&](const std::string& s) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    (*log) << s << "\n";
  };

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= configs.size()) break;
      const TrialConfig& c = configs[i];
      const std::string ckpt =
          checkpoint_dir.empty() ? "" : checkpoint_dir + "/" + std::to_string(c.config_id) + ".bin";
      const auto started = std::chrono::steady_clock::now();
      result.records[i] = run_trial(c, data, ckpt);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      log_line("trial " + std::to_string(c.config_id) + " " + kind_name(c.kind) +
               " layers=" + std::to_string(c.layers) + " hidden=" + std::to_string(c.hidden) +
               " lr=" + fmt_double(c.lr) + (result.records[i].diverged ? " DIVERGED" : "") +
               " final_valid=" + fmt_double(result.records[i].final_valid()) + " (" + fmt_double(secs) + "s)");
    }
  };

  const int n_workers = std::max(1, std::min<int>(workers, static_cast<int>(configs.size())));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  // Group records by kind in spec order and summarize each group.
  for (CellKind kind : spec.kinds) {
    std::vector<TrialRecord*> group;
    int completed = 0;
    for (auto& r : result.records)
      if (r.config.kind == kind) {
        group.push_back(&r);
        completed += r.diverged ? 0 : 1;
      }
    if (group.empty()) continue;
    const int k = std::min(spec.top_k, completed);
    if (k < spec.top_k)
      log_line("warning: " + kind_name(kind) + " has only " + std::to_string(completed) +
               " completed trials; top-k clamped to " + std::to_string(k));
    if (k == 0) continue;
    result.reports.push_back(rank_and_report(group, k));
  }
  return result;
}

// ---------------------------------------------------------------------------
// CSV serialization. All numbers use shortest-round-trip formatting so the
// files are byte-stable across replays.

inline const char* kResultsHeader =
    "config_id,arch,recurrence,optimizer,layers,hidden,lr,momentum,seed,param_count,iteration,split,nll";

inline void write_results_csv(std::ostream& out, const std::vector<TrialRecord>& records) {
  out << kResultsHeader << "\n";
  for (const TrialRecord& r : records) {
    const std::string prefix = std::to_string(r.config.config_id) + "," + arch_name(r.config.kind.arch) +
                               "," + recurrence_name(r.config.kind.recurrence) + "," +
                               optimizer_name(r.config.optimizer) + "," + std::to_string(r.config.layers) +
                               "," + std::to_string(r.config.hidden) + "," + fmt_double(r.config.lr) + "," +
                               fmt_double(r.config.momentum) + "," + std::to_string(r.config.seed) + "," +
                               std::to_string(r.param_count) + ",";
    for (int it = 0; it < r.iterations_recorded(); ++it) {
      out << prefix << it << ",train," << fmt_double(r.train_nll[static_cast<std::size_t>(it)]) << "\n";
      out << prefix << it << ",valid," << fmt_double(r.valid_nll[static_cast<std::size_t>(it)]) << "\n";
      out << prefix << it << ",test," << fmt_double(r.test_nll[static_cast<std::size_t>(it)]) << "\n";
    }
  }
}

inline void write_summary_csv(std::ostream& out, const std::string& dataset_name,
                              const std::vector<KindReport>& reports) {
  out << "dataset,optimizer,arch,recurrence,top_k,min_test_nll,mean_param_count_top_k\n";
  for (const KindReport& r : reports) {
    out << dataset_name << "," << optimizer_name(r.optimizer) << "," << arch_name(r.kind.arch) << ","
        << recurrence_name(r.kind.recurrence) << "," << r.top_k << "," << fmt_double(r.min_test_nll) << ","
        << fmt_double(r.mean_param_count) << "\n";
  }
}

inline void write_curves_csv(std::ostream& out, const std::vector<KindReport>& reports) {
  out << "arch,recurrence,optimizer,iteration,mean_test_nll\n";
  for (const KindReport& r : reports)
    for (std::size_t t = 0; t < r.mean_test_curve.size(); ++t)
      out << arch_name(r.kind.arch) << "," << recurrence_name(r.kind.recurrence) << ","
          << optimizer_name(r.optimizer) << "," << t << "," << fmt_double(r.mean_test_curve[t]) << "\n";
}

inline void write_topk_finals_csv(std::ostream& out, const std::vector<KindReport>& reports,
                                  const std::vector<TrialRecord>& records) {
  out << "arch,recurrence,optimizer,rank,config_id,final_valid_nll,final_test_nll,param_count\n";
  for (const KindReport& r : reports) {
    for (std::size_t i = 0; i < r.top_ids.size(); ++i) {
      const int id = r.top_ids[i];
      const TrialRecord* rec = nullptr;
      for (const auto& cand : records)
        if (cand.config.config_id == id) rec = &cand;
      if (!rec) throw UsageError("topk_finals: config id " + std::to_string(id) + " missing");
      out << arch_name(r.kind.arch) << "," << recurrence_name(r.kind.recurrence) << ","
          << optimizer_name(r.optimizer) << "," << i << "," << id << "," << fmt_double(rec->final_valid())
          << "," << fmt_double(r.final_test[i]) << "," << rec->param_count << "\n";
    }
  }
}

// Rebuilds trial records from a results CSV (the `report` path). Timing and
// checkpoints are not recoverable, which is fine for re-ranking.
inline std::vector<TrialRecord> read_results_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path + ": cannot open");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty file");
  if (line != kResultsHeader) throw ParseError(path + ": unexpected header '" + line + "'");
  std::vector<TrialRecord> records;
  std::vector<int> index;  // config_id -> position in records (or -1)
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string ctx = path + ":" + std::to_string(lineno);
    const auto f = split_on(line, ',');
    if (f.size() != 13) throw ParseError(ctx + ": expected 13 fields, got " + std::to_string(f.size()));
    const int id = static_cast<int>(parse_long(f[0], ctx));
    if (id < 0) throw ParseError(ctx + ": negative config_id");
    if (static_cast<std::size_t>(id) >= index.size()) index.resize(static_cast<std::size_t>(id) + 1, -1);
    if (index[static_cast<std::size_t>(id)] < 0) {
      TrialRecord r;
      r.config.config_id = id;
      r.config.kind = CellKind{parse_arch(f[1]), parse_recurrence(f[2])};
      r.config.optimizer = parse_optimizer(f[3]);
      r.config.layers = static_cast<int>(parse_long(f[4], ctx));
      r.config.hidden = static_cast<int>(parse_long(f[5], ctx));
      r.config.lr = parse_double(f[6], ctx);
      r.config.momentum = parse_double(f[7], ctx);
      r.config.seed = parse_u64(f[8], ctx);
      r.param_count = parse_long(f[9], ctx);
      index[static_cast<std::size_t>(id)] = static_cast<int>(records.size());
      records.push_back(std::move(r));
    }
    TrialRecord& r = records[static_cast<std::size_t>(index[static_cast<std::size_t>(id)])];
    const long iteration = parse_long(f[10], ctx);
    const double nll = parse_double(f[12], ctx);
    auto append = [&](std::vector<double>& traj) {
      if (iteration != static_cast<long>(traj.size()))
        throw ParseError(ctx + ": iteration " + std::to_string(iteration) + " out of order");
      traj.push_back(nll);
    };
    if (f[11] == "train") append(r.train_nll);
    else if (f[11] == "valid") append(r.valid_nll);
    else if (f[11] == "test") append(r.test_nll);
    else throw ParseError(ctx + ": unknown split '" + f[11] + "'");
  }
  return records;
}

// The results CSV has no explicit diverged flag; a diverged trial is simply
// one whose trajectory stopped early. Recover the flag by comparing against
// the longest trajectory of its (kind, optimizer) group.
inline void infer_divergence(std::vector<TrialRecord>& records) {
  for (auto& r : records) {
    int longest = 0;
    for (const auto& other : records)
      if (other.config.kind == r.config.kind && other.config.optimizer == r.config.optimizer)
        longest = std::max(longest, other.iterations_recorded());
    r.diverged = r.iterations_recorded() < longest;
  }
}

}  // namespace diagrnn
