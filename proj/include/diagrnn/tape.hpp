#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <vector>

#include "diagrnn/errors.hpp"
#include "diagrnn/rng.hpp"
#include "diagrnn/tensor.hpp"

namespace diagrnn {

using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

enum class LossMode { FullBernoulli, PositiveOnly };

// Predicted probabilities are clamped into [kProbFloor, 1-kProbFloor] before
// the log so sigmoid saturation cannot produce -inf.
inline constexpr double kProbFloor = 1e-12;

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Hadamard,
  Add,
  Affine,
  Sigmoid,
  Tanh,
  Sum,
  BernoulliNll,
};

struct NllPayload {
  Tensor targets;      // binary, same shape as the prediction
  Tensor row_weights;  // one weight per row, already normalized
  LossMode mode = LossMode::FullBernoulli;
};

struct Node {
  Tensor value;
  Tensor adjoint;  // same shape as value, zero until backward()
  Op op = Op::Leaf;
  NodeId lhs = kNoNode;
  NodeId rhs = kNoNode;
  double alpha = 0.0;               // Affine: out = alpha*x + beta
  double beta = 0.0;
  bool rhs_row_broadcast = false;   // Hadamard/Add with a vector rhs
  std::unique_ptr<NllPayload> nll;  // BernoulliNll only
};

// Append-only record of one forward computation. Node ids index into the
// tape and parents always precede children, so backward() is a single
// reverse sweep. One tape per training step; dropout masks are drawn from
// the tape's own rng, so a seed replays the step exactly.
class Tape {
 public:
  explicit Tape(std::uint64_t seed = 0) : rng_(seed) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  NodeId leaf(Tensor value) {
    Node n;
    n.adjoint = Tensor::zeros(value.rows(), value.cols());
    n.value = std::move(value);
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.cols() != bv.rows())
      throw DimensionError("matmul: inner dimensions disagree (" + av.shape() + " vs " + bv.shape() + ")");
    Tensor out(av.rows(), bv.cols());
    for (int i = 0; i < av.rows(); ++i) {
      for (int l = 0; l < av.cols(); ++l) {
        const double x = av.at(i, l);
        for (int j = 0; j < bv.cols(); ++j) out.at(i, j) += x * bv.at(l, j);
      }
    }
    return push_binary(Op::MatMul, std::move(out), a, b);
  }

  // Elementwise product. rhs may also be a length-cols vector (1xN or Nx1)
  // which is broadcast across the rows of lhs; this carries both the
  // diagonal recurrence W (.) h and anything gate-shaped.
  NodeId hadamard(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.same_shape(bv)) {
      Tensor out(av.rows(), av.cols());
      for (long i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
      return push_binary(Op::Hadamard, std::move(out), a, b);
    }
    if (is_row_broadcastable(av, bv)) {
      Tensor out(av.rows(), av.cols());
      for (int r = 0; r < av.rows(); ++r)
        for (int c = 0; c < av.cols(); ++c) out.at(r, c) = av.at(r, c) * bv[c];
      NodeId id = push_binary(Op::Hadamard, std::move(out), a, b);
      nodes_[id].rhs_row_broadcast = true;
      return id;
    }
    throw DimensionError("hadamard: incompatible shapes (" + av.shape() + " vs " + bv.shape() + ")");
  }

  // Elementwise sum; rhs may be a 1xN bias broadcast across rows.
  NodeId add(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.same_shape(bv)) {
      Tensor out(av.rows(), av.cols());
      for (long i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
      return push_binary(Op::Add, std::move(out), a, b);
    }
    if (bv.rows() == 1 && bv.cols() == av.cols()) {
      Tensor out(av.rows(), av.cols());
      for (int r = 0; r < av.rows(); ++r)
        for (int c = 0; c < av.cols(); ++c) out.at(r, c) = av.at(r, c) + bv.at(0, c);
      NodeId id = push_binary(Op::Add, std::move(out), a, b);
      nodes_[id].rhs_row_broadcast = true;
      return id;
    }
    throw DimensionError("add: incompatible shapes (" + av.shape() + " vs " + bv.shape() + ")");
  }

  // out = alpha*x + beta, elementwise.
  NodeId affine(NodeId a, double alpha, double beta) {
    const Tensor& av = value(a);
    Tensor out(av.rows(), av.cols());
    for (long i = 0; i < av.size(); ++i) out[i] = alpha * av[i] + beta;
    NodeId id = push_binary(Op::Affine, std::move(out), a, kNoNode);
    nodes_[id].alpha = alpha;
    nodes_[id].beta = beta;
    return id;
  }

  NodeId sigmoid(NodeId a) {
    const Tensor& av = value(a);
    Tensor out(av.rows(), av.cols());
    for (long i = 0; i < av.size(); ++i) out[i] = stable_sigmoid(av[i]);
    return push_binary(Op::Sigmoid, std::move(out), a, kNoNode);
  }

  NodeId tanh(NodeId a) {
    const Tensor& av = value(a);
    Tensor out(av.rows(), av.cols());
    for (long i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
    return push_binary(Op::Tanh, std::move(out), a, kNoNode);
  }

  NodeId sum(NodeId a) {
    Tensor out(1, 1);
    out.at(0, 0) = value(a).sum();
    return push_binary(Op::Sum, std::move(out), a, kNoNode);
  }

  // Inverted dropout: keep with probability keep_prob and scale kept entries
  // by 1/keep_prob, so evaluation is an identity. Masks come from the tape
  // rng in row-major order.
  NodeId dropout(NodeId a, double keep_prob, bool training) {
    if (!(keep_prob > 0.0 && keep_prob <= 1.0))
      throw ConfigError("dropout: keep_prob must be in (0,1], got " + std::to_string(keep_prob));
    if (!training || keep_prob == 1.0) return a;
    const Tensor& av = value(a);
    Tensor mask(av.rows(), av.cols());
    const double scale = 1.0 / keep_prob;
    for (long i = 0; i < mask.size(); ++i) mask[i] = rng_.bernoulli(keep_prob) ? scale : 0.0;
    return hadamard(a, leaf(std::move(mask)));
  }

  // Masked per-frame Bernoulli negative log-likelihood:
  //   -(1/T_valid) sum_t mask_t sum_p [ y log yc + (1-y) log(1-yc) ]
  // (the positive-only mode drops the (1-y) term). yhat rows with mask 0 are
  // ignored entirely.
  NodeId bernoulli_nll(const Tensor& targets, NodeId yhat, const Tensor& mask,
                       LossMode mode = LossMode::FullBernoulli) {
    const Tensor& yv = value(yhat);
    if (mask.rows() != yv.rows() || mask.cols() != 1)
      throw DimensionError("bernoulli_nll: mask must be " + shape_str(yv.rows(), 1) + ", got " + mask.shape());
    double valid = 0.0;
    for (int r = 0; r < mask.rows(); ++r) {
      const double m = mask.at(r, 0);
      if (m != 0.0 && m != 1.0) throw DomainError("bernoulli_nll: mask entries must be 0 or 1");
      valid += m;
    }
    if (valid == 0.0) throw DomainError("bernoulli_nll: mask selects no frames");
    Tensor weights(mask.rows(), 1);
    for (int r = 0; r < mask.rows(); ++r) weights.at(r, 0) = mask.at(r, 0) / valid;
    return weighted_bernoulli_nll(targets, yhat, weights, mode);
  }

  // General form: each row of yhat contributes with its own weight. The
  // batched model loss uses this with weights mask/(T_valid(seq) * B).
  NodeId weighted_bernoulli_nll(const Tensor& targets, NodeId yhat, const Tensor& row_weights,
                                LossMode mode) {
    const Tensor& yv = value(yhat);
    if (!targets.same_shape(yv))
      throw DimensionError("bernoulli_nll: target shape " + targets.shape() + " vs prediction " + yv.shape());
    if (row_weights.rows() != yv.rows() || row_weights.cols() != 1)
      throw DimensionError("bernoulli_nll: weights must be " + shape_str(yv.rows(), 1) + ", got " + row_weights.shape());
    for (long i = 0; i < targets.size(); ++i)
      if (targets[i] != 0.0 && targets[i] != 1.0)
        throw DomainError("bernoulli_nll: targets must be binary");

    double loss = 0.0;
    for (int r = 0; r < yv.rows(); ++r) {
      const double w = row_weights.at(r, 0);
      if (w == 0.0) continue;
      for (int c = 0; c < yv.cols(); ++c) {
        const double p = yv.at(r, c);
        if (!(p >= 0.0 && p <= 1.0))
          throw DomainError("bernoulli_nll: prediction outside [0,1] at (" + std::to_string(r) + "," +
                            std::to_string(c) + ")");
        const double pc = clamp_prob(p);
        const double y = targets.at(r, c);
        double term = y * std::log(pc);
        if (mode == LossMode::FullBernoulli) term += (1.0 - y) * std::log(1.0 - pc);
        loss -= w * term;
      }
    }
    Tensor out(1, 1);
    out.at(0, 0) = loss;
    NodeId id = push_binary(Op::BernoulliNll, std::move(out), yhat, kNoNode);
    auto payload = std::make_unique<NllPayload>();
    payload->targets = targets;
    payload->row_weights = row_weights;
    payload->mode = mode;
    nodes_[id].nll = std::move(payload);
    return id;
  }

  // Reverse sweep from a scalar loss; fills every reachable node's adjoint.
  // Leaf adjoints are then exact gradients of the loss.
  void backward(NodeId loss) {
    const Tensor& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1)
      throw UsageError("backward: loss must be 1x1, got " + lv.shape());
    std::vector<char> live(static_cast<std::size_t>(loss) + 1, 0);
    nodes_[loss].adjoint.at(0, 0) += 1.0;
    live[loss] = 1;
    for (NodeId i = loss; i >= 0; --i) {
      if (!live[i]) continue;
      Node& n = nodes_[i];
      switch (n.op) {
        case Op::Leaf:
          break;
        case Op::MatMul:
          backward_matmul(n);
          mark(live, n.lhs);
          mark(live, n.rhs);
          break;
        case Op::Hadamard:
          backward_hadamard(n);
          mark(live, n.lhs);
          mark(live, n.rhs);
          break;
        case Op::Add:
          backward_add(n);
          mark(live, n.lhs);
          mark(live, n.rhs);
          break;
        case Op::Affine: {
          Tensor& da = nodes_[n.lhs].adjoint;
          for (long k = 0; k < da.size(); ++k) da[k] += n.alpha * n.adjoint[k];
          mark(live, n.lhs);
          break;
        }
        case Op::Sigmoid: {
          Tensor& da = nodes_[n.lhs].adjoint;
          for (long k = 0; k < da.size(); ++k) {
            const double y = n.value[k];
            da[k] += n.adjoint[k] * y * (1.0 - y);
          }
          mark(live, n.lhs);
          break;
        }
        case Op::Tanh: {
          Tensor& da = nodes_[n.lhs].adjoint;
          for (long k = 0; k < da.size(); ++k) {
            const double y = n.value[k];
            da[k] += n.adjoint[k] * (1.0 - y * y);
          }
          mark(live, n.lhs);
          break;
        }
        case Op::Sum: {
          Tensor& da = nodes_[n.lhs].adjoint;
          const double g = n.adjoint.at(0, 0);
          for (long k = 0; k < da.size(); ++k) da[k] += g;
          mark(live, n.lhs);
          break;
        }
        case Op::BernoulliNll:
          backward_nll(n);
          mark(live, n.lhs);
          break;
      }
    }
  }

  const Tensor& value(NodeId id) const { return nodes_[check(id)].value; }
  const Tensor& adjoint(NodeId id) const { return nodes_[check(id)].adjoint; }
  std::size_t node_count() const { return nodes_.size(); }
  Rng& rng() { return rng_; }

 private:
  static double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  static double clamp_prob(double p) {
    if (p < kProbFloor) return kProbFloor;
    if (p > 1.0 - kProbFloor) return 1.0 - kProbFloor;
    return p;
  }

  static bool is_row_broadcastable(const Tensor& a, const Tensor& b) {
    return b.size() == a.cols() && (b.rows() == 1 || b.cols() == 1);
  }

  NodeId check(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw UsageError("tape: bad node id " + std::to_string(id));
    return id;
  }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId push_binary(Op op, Tensor out, NodeId lhs, NodeId rhs) {
    Node n;
    n.adjoint = Tensor::zeros(out.rows(), out.cols());
    n.value = std::move(out);
    n.op = op;
    n.lhs = lhs;
    n.rhs = rhs;
    return push(std::move(n));
  }

  static void mark(std::vector<char>& live, NodeId id) {
    if (id >= 0) live[id] = 1;
  }

  void backward_matmul(Node& n) {
    const Tensor& a = nodes_[n.lhs].value;
    const Tensor& b = nodes_[n.rhs].value;
    const Tensor& g = n.adjoint;
    Tensor& da = nodes_[n.lhs].adjoint;
    Tensor& db = nodes_[n.rhs].adjoint;
    // dA = G * B^T
    for (int i = 0; i < a.rows(); ++i) {
      for (int l = 0; l < a.cols(); ++l) {
        double s = 0.0;
        for (int j = 0; j < b.cols(); ++j) s += g.at(i, j) * b.at(l, j);
        da.at(i, l) += s;
      }
    }
    // dB = A^T * G
    for (int i = 0; i < a.rows(); ++i) {
      for (int l = 0; l < a.cols(); ++l) {
        const double x = a.at(i, l);
        for (int j = 0; j < b.cols(); ++j) db.at(l, j) += x * g.at(i, j);
      }
    }
  }

  void backward_hadamard(Node& n) {
    const Tensor& a = nodes_[n.lhs].value;
    const Tensor& b = nodes_[n.rhs].value;
    const Tensor& g = n.adjoint;
    Tensor& da = nodes_[n.lhs].adjoint;
    Tensor& db = nodes_[n.rhs].adjoint;
    if (!n.rhs_row_broadcast) {
      for (long k = 0; k < g.size(); ++k) {
        da[k] += g[k] * b[k];
        db[k] += g[k] * a[k];
      }
      return;
    }
    // b was broadcast across rows: db is the column-sum of G (.) a.
    for (int r = 0; r < a.rows(); ++r) {
      for (int c = 0; c < a.cols(); ++c) {
        da.at(r, c) += g.at(r, c) * b[c];
        db[c] += g.at(r, c) * a.at(r, c);
      }
    }
  }

  void backward_add(Node& n) {
    const Tensor& g = n.adjoint;
    Tensor& da = nodes_[n.lhs].adjoint;
    Tensor& db = nodes_[n.rhs].adjoint;
    for (long k = 0; k < g.size(); ++k) da[k] += g[k];
    if (!n.rhs_row_broadcast) {
      for (long k = 0; k < g.size(); ++k) db[k] += g[k];
    } else {
      const Tensor& a = nodes_[n.lhs].value;
      for (int r = 0; r < a.rows(); ++r)
        for (int c = 0; c < a.cols(); ++c) db[c] += g.at(r, c);
    }
  }

  void backward_nll(Node& n) {
    const NllPayload& p = *n.nll;
    const Tensor& yhat = nodes_[n.lhs].value;
    Tensor& da = nodes_[n.lhs].adjoint;
    const double g = n.adjoint.at(0, 0);
    for (int r = 0; r < yhat.rows(); ++r) {
      const double w = p.row_weights.at(r, 0);
      if (w == 0.0) continue;
      for (int c = 0; c < yhat.cols(); ++c) {
        const double raw = yhat.at(r, c);
        // The clamp is flat outside its range, so clamped entries get zero
        // gradient (this is what finite differences see too).
        if (raw < kProbFloor || raw > 1.0 - kProbFloor) continue;
        const double y = p.targets.at(r, c);
        double d = -y / raw;
        if (p.mode == LossMode::FullBernoulli) d += (1.0 - y) / (1.0 - raw);
        da.at(r, c) += g * w * d;
      }
    }
  }

  std::deque<Node> nodes_;
  Rng rng_;
};

}  // namespace diagrnn
