#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "diagrnn/errors.hpp"
#include "diagrnn/rng.hpp"
#include "diagrnn/tape.hpp"
#include "diagrnn/tensor.hpp"

namespace diagrnn {

enum class Arch { VRNN, GRU, LSTM };
enum class Recurrence { Full, Diagonal };

struct CellKind {
  Arch arch = Arch::VRNN;
  Recurrence recurrence = Recurrence::Full;

  bool operator==(const CellKind&) const = default;
};

inline const char* arch_name(Arch a) {
  switch (a) {
    case Arch::VRNN: return "vrnn";
    case Arch::GRU: return "gru";
    case Arch::LSTM: return "lstm";
  }
  return "?";
}

inline const char* recurrence_name(Recurrence r) {
  return r == Recurrence::Full ? "full" : "diag";
}

inline std::string kind_name(CellKind k) {
  return std::string(arch_name(k.arch)) + "-" + recurrence_name(k.recurrence);
}

inline Arch parse_arch(const std::string& s) {
  if (s == "vrnn") return Arch::VRNN;
  if (s == "gru") return Arch::GRU;
  if (s == "lstm") return Arch::LSTM;
  throw ConfigError("unknown cell architecture '" + s + "' (expected vrnn|gru|lstm)");
}

inline Recurrence parse_recurrence(const std::string& s) {
  if (s == "full") return Recurrence::Full;
  if (s == "diag") return Recurrence::Diagonal;
  throw ConfigError("unknown recurrence '" + s + "' (expected full|diag)");
}

// Canonical sweep order.
inline std::vector<CellKind> all_cell_kinds() {
  return {{Arch::VRNN, Recurrence::Full},  {Arch::VRNN, Recurrence::Diagonal},
          {Arch::GRU, Recurrence::Full},   {Arch::GRU, Recurrence::Diagonal},
          {Arch::LSTM, Recurrence::Full},  {Arch::LSTM, Recurrence::Diagonal}};
}

// One W/U/b family. With a row-vector state convention the shapes are
//   w_rec: KxK (full) or 1xK (diagonal), u_in: LxK, bias: 1xK.
struct GateParams {
  Tensor w_rec;
  Tensor u_in;
  Tensor bias;
};

// Weight set for one recurrent layer. `gates` holds the sigmoid gate
// families in order (GRU: forget, write; LSTM: forget, write, output) and
// `cand` the tanh candidate family, which is the only family a VRNN has.
struct CellParams {
  CellKind kind;
  int hidden = 0;
  int input = 0;
  std::vector<GateParams> gates;
  GateParams cand;

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (auto& g : gates) {
      out.push_back(&g.w_rec);
      out.push_back(&g.u_in);
      out.push_back(&g.bias);
    }
    out.push_back(&cand.w_rec);
    out.push_back(&cand.u_in);
    out.push_back(&cand.bias);
    return out;
  }

  std::vector<const Tensor*> tensors() const {
    auto mut = const_cast<CellParams*>(this)->tensors();
    return std::vector<const Tensor*>(mut.begin(), mut.end());
  }

  std::vector<std::string> tensor_names() const {
    static const char* gate_suffix[] = {"_f", "_w", "_o"};
    std::vector<std::string> out;
    for (std::size_t i = 0; i < gates.size(); ++i) {
      const std::string s = gate_suffix[i];
      out.push_back("W" + s);
      out.push_back("U" + s);
      out.push_back("b" + s);
    }
    out.push_back("W");
    out.push_back("U");
    out.push_back("b");
    return out;
  }
};

inline int gate_family_count(Arch a) {
  switch (a) {
    case Arch::VRNN: return 0;
    case Arch::GRU: return 2;
    case Arch::LSTM: return 3;
  }
  return 0;
}

// Exact trainable-parameter count, biases included. Diagonal recurrences
// store K values per recurrent factor instead of K*K, so these counts grow
// linearly in K.
inline long param_count(CellKind kind, int hidden, int input) {
  const long k = hidden;
  const long l = input;
  const long families = gate_family_count(kind.arch) + 1;
  const long rec = kind.recurrence == Recurrence::Full ? k * k : k;
  return families * (rec + k * l + k);
}

namespace detail {

inline void xavier_fill(Tensor& t, int fan_in, int fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (long i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
}

inline GateParams init_family(CellKind kind, int k, int l, Rng& rng) {
  GateParams g;
  if (kind.recurrence == Recurrence::Full) {
    g.w_rec = Tensor(k, k);
  } else {
    // A diagonal vector is still a K->K map, so Xavier with fan_in=fan_out=K.
    g.w_rec = Tensor(1, k);
  }
  xavier_fill(g.w_rec, k, k, rng);
  g.u_in = Tensor(l, k);
  xavier_fill(g.u_in, l, k, rng);
  g.bias = Tensor(1, k);
  return g;
}

}  // namespace detail

// Xavier-initialized weights, zero biases. Deterministic in the seed: the
// families are drawn in declared order (gates then candidate, W before U),
// entries row-major.
inline CellParams init_params(CellKind kind, int hidden, int input, std::uint64_t seed) {
  if (hidden < 1 || input < 1)
    throw ConfigError("init_params: hidden and input sizes must be >= 1 (got K=" + std::to_string(hidden) +
                      ", L=" + std::to_string(input) + ")");
  Rng rng(seed);
  CellParams p;
  p.kind = kind;
  p.hidden = hidden;
  p.input = input;
  for (int i = 0; i < gate_family_count(kind.arch); ++i)
    p.gates.push_back(detail::init_family(kind, hidden, input, rng));
  p.cand = detail::init_family(kind, hidden, input, rng);
  return p;
}

struct BoundGate {
  NodeId w_rec = kNoNode;
  NodeId u_in = kNoNode;
  NodeId bias = kNoNode;
};

// A cell's parameters registered as leaves on a tape. `all` lists the leaf
// ids in the same order as CellParams::tensors(), for gradient collection.
struct BoundCell {
  CellKind kind;
  std::vector<BoundGate> gates;
  BoundGate cand;
  std::vector<NodeId> all;
};

inline BoundCell bind(const CellParams& p, Tape& tape) {
  BoundCell b;
  b.kind = p.kind;
  auto bind_family = [&](const GateParams& g) {
    BoundGate bg;
    bg.w_rec = tape.leaf(g.w_rec);
    bg.u_in = tape.leaf(g.u_in);
    bg.bias = tape.leaf(g.bias);
    b.all.push_back(bg.w_rec);
    b.all.push_back(bg.u_in);
    b.all.push_back(bg.bias);
    return bg;
  };
  for (const auto& g : p.gates) b.gates.push_back(bind_family(g));
  b.cand = bind_family(p.cand);
  return b;
}

// h is rows x K where rows is the batch size (1 for a single sequence);
// h_prime is the LSTM pre-output cell vector and unused otherwise.
struct CellState {
  NodeId h = kNoNode;
  NodeId h_prime = kNoNode;
};

inline CellState initial_state(CellKind kind, int rows, int hidden, Tape& tape) {
  CellState s;
  s.h = tape.leaf(Tensor::zeros(rows, hidden));
  if (kind.arch == Arch::LSTM) s.h_prime = tape.leaf(Tensor::zeros(rows, hidden));
  return s;
}

// Gate node ids of one step, for range/invariant tests.
struct StepTrace {
  NodeId forget = kNoNode;
  NodeId write = kNoNode;
  NodeId output = kNoNode;
  NodeId candidate = kNoNode;
};

// Test hooks. Production code never sets any of these: the overrides bypass
// a gate's sigmoid with a fixed tensor, and identity_activation removes the
// VRNN nonlinearity (used by the linear-unrolling oracle).
struct StepHooks {
  const Tensor* forget = nullptr;
  const Tensor* write = nullptr;
  const Tensor* output = nullptr;
  bool identity_activation = false;
  StepTrace* trace = nullptr;
};

namespace detail {

inline NodeId recur_term(const BoundGate& g, NodeId h, Tape& tape, Recurrence rec) {
  return rec == Recurrence::Full ? tape.matmul(h, g.w_rec) : tape.hadamard(h, g.w_rec);
}

inline NodeId family_preact(const BoundGate& g, NodeId h, NodeId x, Tape& tape, Recurrence rec) {
  return tape.add(tape.add(recur_term(g, h, tape, rec), tape.matmul(x, g.u_in)), g.bias);
}

inline NodeId gate_value(const BoundGate& g, NodeId h, NodeId x, Tape& tape, Recurrence rec,
                         const Tensor* override_value) {
  if (override_value) return tape.leaf(*override_value);
  return tape.sigmoid(family_preact(g, h, x, tape, rec));
}

}  // namespace detail

// One recurrence step. Full kinds multiply the previous state by a KxK
// matrix; diagonal kinds scale it elementwise by a length-K vector.
inline CellState step(const BoundCell& cell, const CellState& state, NodeId x, Tape& tape,
                      const StepHooks* hooks = nullptr) {
  const Recurrence rec = cell.kind.recurrence;
  CellState next;
  switch (cell.kind.arch) {
    case Arch::VRNN: {
      const NodeId pre = detail::family_preact(cell.cand, state.h, x, tape, rec);
      next.h = (hooks && hooks->identity_activation) ? pre : tape.tanh(pre);
      if (hooks && hooks->trace) hooks->trace->candidate = next.h;
      return next;
    }
    case Arch::GRU: {
      const NodeId f = detail::gate_value(cell.gates[0], state.h, x, tape, rec,
                                          hooks ? hooks->forget : nullptr);
      const NodeId w = detail::gate_value(cell.gates[1], state.h, x, tape, rec,
                                          hooks ? hooks->write : nullptr);
      // Candidate: tanh(W (.) (h (.) w) + U x + b); the write gate scales h
      // before the recurrent factor is applied.
      const NodeId hw = tape.hadamard(state.h, w);
      const NodeId c = tape.tanh(tape.add(
          tape.add(detail::recur_term(cell.cand, hw, tape, rec), tape.matmul(x, cell.cand.u_in)),
          cell.cand.bias));
      const NodeId keep = tape.hadamard(state.h, f);
      const NodeId blend = tape.hadamard(c, tape.affine(f, -1.0, 1.0));
      next.h = tape.add(keep, blend);
      if (hooks && hooks->trace) {
        hooks->trace->forget = f;
        hooks->trace->write = w;
        hooks->trace->candidate = c;
      }
      return next;
    }
    case Arch::LSTM: {
      const NodeId f = detail::gate_value(cell.gates[0], state.h, x, tape, rec,
                                          hooks ? hooks->forget : nullptr);
      const NodeId w = detail::gate_value(cell.gates[1], state.h, x, tape, rec,
                                          hooks ? hooks->write : nullptr);
      const NodeId o = detail::gate_value(cell.gates[2], state.h, x, tape, rec,
                                          hooks ? hooks->output : nullptr);
      const NodeId c = tape.tanh(detail::family_preact(cell.cand, state.h, x, tape, rec));
      next.h_prime = tape.add(tape.hadamard(state.h_prime, f), tape.hadamard(c, w));
      next.h = tape.hadamard(tape.tanh(next.h_prime), o);
      if (hooks && hooks->trace) {
        hooks->trace->forget = f;
        hooks->trace->write = w;
        hooks->trace->output = o;
        hooks->trace->candidate = c;
      }
      return next;
    }
  }
  throw UsageError("step: bad cell kind");
}

}  // namespace diagrnn
