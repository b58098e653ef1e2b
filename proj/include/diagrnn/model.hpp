#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "diagrnn/cells.hpp"
#include "diagrnn/dataset.hpp"
#include "diagrnn/errors.hpp"
#include "diagrnn/tape.hpp"
#include "diagrnn/tensor.hpp"
#include "diagrnn/textio.hpp"

namespace diagrnn {

struct ModelConfig {
  CellKind kind;
  int num_layers = 2;
  int hidden = 100;    // K, same for every layer
  int input_size = 0;  // P, the pitch count
  double keep_prob = 0.9;
  LossMode loss_mode = LossMode::FullBernoulli;

  void validate() const {
    if (num_layers < 1) throw ConfigError("model: num_layers must be >= 1");
    if (hidden < 1) throw ConfigError("model: hidden units must be >= 1");
    if (input_size < 1) throw ConfigError("model: input size must be >= 1");
    if (!(keep_prob > 0.0 && keep_prob <= 1.0))
      throw ConfigError("model: keep_prob must be in (0,1], got " + fmt_double(keep_prob));
  }
};

// A stack of identical cells with a sigmoid output head y = sigmoid(h V + b).
// Layer 1 reads the P-dimensional input frames; deeper layers read the K
// hidden units below them.
class Model {
 public:
  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m(cfg);
    Rng rng(seed);
    for (int i = 0; i < cfg.num_layers; ++i) {
      const int input = i == 0 ? cfg.input_size : cfg.hidden;
      m.layers_.push_back(init_params(cfg.kind, cfg.hidden, input, rng.u64()));
    }
    detail::xavier_fill(m.v_out_, cfg.hidden, cfg.input_size, rng);
    return m;
  }

  // All-zero parameters; predicts 0.5 for every pitch.
  static Model zeros(const ModelConfig& cfg) {
    cfg.validate();
    Model m(cfg);
    for (int i = 0; i < cfg.num_layers; ++i) {
      const int input = i == 0 ? cfg.input_size : cfg.hidden;
      auto p = init_params(cfg.kind, cfg.hidden, input, 0);
      for (Tensor* t : p.tensors()) t->fill(0.0);
      m.layers_.push_back(std::move(p));
    }
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<CellParams>& layers() { return layers_; }
  const std::vector<CellParams>& layers() const { return layers_; }
  Tensor& output_weight() { return v_out_; }
  const Tensor& output_weight() const { return v_out_; }
  Tensor& output_bias() { return b_out_; }
  const Tensor& output_bias() const { return b_out_; }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& layer : layers_)
      for (Tensor* t : layer.tensors()) out.push_back(t);
    out.push_back(&v_out_);
    out.push_back(&b_out_);
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    auto mut = const_cast<Model*>(this)->parameters();
    return std::vector<const Tensor*>(mut.begin(), mut.end());
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (const auto& n : layers_[i].tensor_names()) out.push_back("layer" + std::to_string(i) + "." + n);
    out.push_back("output.V");
    out.push_back("output.b");
    return out;
  }

  long parameter_count() const {
    long n = 0;
    for (const Tensor* t : parameters()) n += t->size();
    return n;
  }

 private:
  explicit Model(const ModelConfig& cfg)
      : cfg_(cfg), v_out_(cfg.hidden, cfg.input_size), b_out_(1, cfg.input_size) {}

  ModelConfig cfg_;
  std::vector<CellParams> layers_;
  Tensor v_out_;
  Tensor b_out_;
};

// One forward build of the model on a tape.
struct ModelGraph {
  std::vector<NodeId> params;        // leaf ids, same order as Model::parameters()
  std::vector<NodeId> step_outputs;  // per-step (B x P) prediction nodes
  NodeId loss = kNoNode;
  int batch = 0;
  int time_steps = 0;
  int valid_sequences = 0;
};

namespace detail {

// Per-row loss weights: mask / (T_valid(sequence) * #sequences-with-targets),
// so each sequence is normalized per frame first and sequences are then
// averaged. Sequences without any target frame get weight zero.
inline Tensor loss_row_weights(const Batch& batch, int* valid_out) {
  std::vector<double> t_valid(static_cast<std::size_t>(batch.batch), 0.0);
  for (int t = 0; t < batch.time_steps; ++t)
    for (int b = 0; b < batch.batch; ++b) t_valid[static_cast<std::size_t>(b)] += batch.mask.at(t * batch.batch + b, 0);
  int valid = 0;
  for (double v : t_valid)
    if (v > 0.0) ++valid;
  if (valid_out) *valid_out = valid;
  Tensor w(batch.batch * batch.time_steps, 1);
  if (valid == 0) return w;
  for (int t = 0; t < batch.time_steps; ++t) {
    for (int b = 0; b < batch.batch; ++b) {
      const int row = t * batch.batch + b;
      if (batch.mask.at(row, 0) != 0.0)
        w.at(row, 0) = 1.0 / (t_valid[static_cast<std::size_t>(b)] * valid);
    }
  }
  return w;
}

}  // namespace detail

// Builds the unrolled network for one batch. Teacher forcing: the frame at
// step t is input and the frame at t+1 is the target. Dropout is applied
// once per layer boundary (input of the first layer, between adjacent
// layers, and on the top state before the output head); the state carried
// across time steps is never dropped.
inline ModelGraph build_graph(const Model& model, const Batch& batch, bool training, Tape& tape,
                              bool with_loss = true) {
  const ModelConfig& cfg = model.config();
  if (batch.inputs.cols() != cfg.input_size)
    throw DimensionError("forward: batch has " + std::to_string(batch.inputs.cols()) +
                         " pitches, model expects " + std::to_string(cfg.input_size));
  ModelGraph g;
  g.batch = batch.batch;
  g.time_steps = batch.time_steps;

  std::vector<BoundCell> cells;
  for (const auto& layer : model.layers()) {
    cells.push_back(bind(layer, tape));
    for (NodeId id : cells.back().all) g.params.push_back(id);
  }
  const NodeId v_out = tape.leaf(model.output_weight());
  const NodeId b_out = tape.leaf(model.output_bias());
  g.params.push_back(v_out);
  g.params.push_back(b_out);

  std::vector<CellState> states;
  for (const auto& cell : cells) {
    (void)cell;
    states.push_back(initial_state(cfg.kind, batch.batch, cfg.hidden, tape));
  }

  Tensor weights;
  if (with_loss) {
    weights = detail::loss_row_weights(batch, &g.valid_sequences);
    if (g.valid_sequences == 0) throw UsageError("loss: batch has no target frames");
  }

  for (int t = 0; t < batch.time_steps; ++t) {
    const int r0 = t * batch.batch;
    const int r1 = r0 + batch.batch;
    NodeId feed = tape.dropout(tape.leaf(slice_rows(batch.inputs, r0, r1)), cfg.keep_prob, training);
    for (std::size_t l = 0; l < cells.size(); ++l) {
      states[l] = step(cells[l], states[l], feed, tape);
      feed = tape.dropout(states[l].h, cfg.keep_prob, training);
    }
    const NodeId yhat = tape.sigmoid(tape.add(tape.matmul(feed, v_out), b_out));
    g.step_outputs.push_back(yhat);

    if (!with_loss) continue;
    const Tensor w_t = slice_rows(weights, r0, r1);
    bool any = false;
    for (int i = 0; i < w_t.rows(); ++i) any = any || w_t.at(i, 0) != 0.0;
    if (!any) continue;
    const NodeId nll =
        tape.weighted_bernoulli_nll(slice_rows(batch.targets, r0, r1), yhat, w_t, cfg.loss_mode);
    g.loss = g.loss == kNoNode ? nll : tape.add(g.loss, nll);
  }
  return g;
}

// Predictions for every step, assembled time-major into (B*T) x P.
inline Tensor forward(const Model& model, const Batch& batch, bool training, Tape& tape) {
  const ModelGraph g = build_graph(model, batch, training, tape, /*with_loss=*/false);
  Tensor out(batch.batch * batch.time_steps, model.config().input_size);
  for (int t = 0; t < batch.time_steps; ++t) {
    const Tensor& y = tape.value(g.step_outputs[static_cast<std::size_t>(t)]);
    for (int b = 0; b < batch.batch; ++b)
      for (int p = 0; p < y.cols(); ++p) out.at(t * batch.batch + b, p) = y.at(b, p);
  }
  return out;
}

// Scalar training loss: per-frame NLL averaged within each sequence, then
// across the sequences of the batch.
inline NodeId loss(const Model& model, const Batch& batch, bool training, Tape& tape,
                   ModelGraph* graph_out = nullptr) {
  ModelGraph g = build_graph(model, batch, training, tape, /*with_loss=*/true);
  const NodeId id = g.loss;
  if (graph_out) *graph_out = std::move(g);
  return id;
}

// Mean per-frame NLL over a split, dropout off. Deterministic: no rng is
// consumed, and the result is independent of batch size up to float
// reassociation.
inline double evaluate(const Model& model, const std::vector<PianoRollSequence>& split,
                       int batch_size = 32) {
  if (split.empty()) throw UsageError("evaluate: empty split");
  const auto batches = make_batches(split, model.config().input_size, batch_size, 0, /*shuffle=*/false);
  double total = 0.0;
  long sequences = 0;
  for (const Batch& b : batches) {
    const int valid = b.valid_sequences();
    if (valid == 0) continue;
    Tape tape;
    const NodeId l = loss(model, b, /*training=*/false, tape);
    total += tape.value(l).at(0, 0) * valid;
    sequences += valid;
  }
  if (sequences == 0) throw UsageError("evaluate: split has no target frames");
  return total / static_cast<double>(sequences);
}

// ---------------------------------------------------------------------------
// Checkpoint format (see docs/checkpoint_format.md): a text header followed
// by named tensor records whose payload is raw little-endian float64.

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

inline const char* loss_mode_name(LossMode m) {
  return m == LossMode::FullBernoulli ? "bernoulli" : "positive-only";
}

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "bernoulli") return LossMode::FullBernoulli;
  if (s == "positive-only") return LossMode::PositiveOnly;
  throw ConfigError("unknown loss mode '" + s + "' (expected bernoulli|positive-only)");
}

inline void write_checkpoint(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot write");
  const ModelConfig& cfg = model.config();
  out << "diagrnn-checkpoint v1\n";
  out << "cell " << arch_name(cfg.kind.arch) << "\n";
  out << "recurrence " << recurrence_name(cfg.kind.recurrence) << "\n";
  out << "layers " << cfg.num_layers << "\n";
  out << "hidden " << cfg.hidden << "\n";
  out << "input_size " << cfg.input_size << "\n";
  out << "keep_prob " << fmt_double(cfg.keep_prob) << "\n";
  out << "loss " << loss_mode_name(cfg.loss_mode) << "\n";
  const auto params = model.parameters();
  const auto names = model.parameter_names();
  out << "tensors " << params.size() << "\n";
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = *params[i];
    out << "tensor " << names[i] << " " << t.rows() << " " << t.cols() << "\n";
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size()) * 8);
  }
  if (!out) throw ParseError(path + ": write failed");
}

inline Model read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open");
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(in, line)) throw ParseError(path + ": truncated checkpoint (expected " + what + ")");
    return line;
  };
  if (next_line("magic") != "diagrnn-checkpoint v1")
    throw ParseError(path + ": not a diagrnn checkpoint");
  ModelConfig cfg;
  long tensor_count = -1;
  auto field = [&](const char* key) {
    next_line(key);
    const std::string prefix = std::string(key) + " ";
    if (line.rfind(prefix, 0) != 0) throw ParseError(path + ": expected '" + key + "', got '" + line + "'");
    return line.substr(prefix.size());
  };
  cfg.kind.arch = parse_arch(field("cell"));
  cfg.kind.recurrence = parse_recurrence(field("recurrence"));
  cfg.num_layers = static_cast<int>(parse_long(field("layers"), path));
  cfg.hidden = static_cast<int>(parse_long(field("hidden"), path));
  cfg.input_size = static_cast<int>(parse_long(field("input_size"), path));
  cfg.keep_prob = parse_double(field("keep_prob"), path);
  cfg.loss_mode = parse_loss_mode(field("loss"));
  tensor_count = parse_long(field("tensors"), path);

  Model model = Model::zeros(cfg);
  const auto params = model.parameters();
  const auto names = model.parameter_names();
  if (tensor_count != static_cast<long>(params.size()))
    throw ParseError(path + ": expected " + std::to_string(params.size()) + " tensors, header says " +
                     std::to_string(tensor_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    next_line("tensor record");
    std::istringstream hdr(line);
    std::string tag, name;
    int rows = 0, cols = 0;
    if (!(hdr >> tag >> name >> rows >> cols) || tag != "tensor")
      throw ParseError(path + ": bad tensor record '" + line + "'");
    if (name != names[i])
      throw ParseError(path + ": tensor '" + name + "' out of order (expected '" + names[i] + "')");
    Tensor& t = *params[i];
    if (rows != t.rows() || cols != t.cols())
      throw ParseError(path + ": tensor '" + name + "' has shape " + shape_str(rows, cols) + ", expected " +
                       t.shape());
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size()) * 8);
    if (!in) throw ParseError(path + ": truncated tensor payload for '" + name + "'");
  }
  return model;
}

}  // namespace diagrnn
