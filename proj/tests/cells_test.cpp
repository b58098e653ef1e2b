#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "diagrnn/cells.hpp"
#include "testutil.hpp"

using namespace diagrnn;
using testutil::fd_gradient;
using testutil::max_rel_err;
using testutil::Mat;
using testutil::nv_identity;
using testutil::nv_matmul;
using testutil::random_tensor;
using testutil::to_mat;

namespace {

// Unrolls one cell over a fixed input sequence and returns sum_t sum(h_t),
// a scalar probe for gradient checking.
double cell_probe_loss(const CellParams& p, const std::vector<Tensor>& xs) {
  Tape tape;
  const BoundCell bc = bind(p, tape);
  CellState st = initial_state(p.kind, xs[0].rows(), p.hidden, tape);
  NodeId acc = kNoNode;
  for (const Tensor& x : xs) {
    st = step(bc, st, tape.leaf(x), tape);
    const NodeId s = tape.sum(st.h);
    acc = acc == kNoNode ? s : tape.add(acc, s);
  }
  return tape.value(acc).at(0, 0);
}

// Analytic gradients of the same probe, ordered like CellParams::tensors().
std::vector<Tensor> cell_probe_grads(const CellParams& p, const std::vector<Tensor>& xs) {
  Tape tape;
  const BoundCell bc = bind(p, tape);
  CellState st = initial_state(p.kind, xs[0].rows(), p.hidden, tape);
  NodeId acc = kNoNode;
  for (const Tensor& x : xs) {
    st = step(bc, st, tape.leaf(x), tape);
    const NodeId s = tape.sum(st.h);
    acc = acc == kNoNode ? s : tape.add(acc, s);
  }
  tape.backward(acc);
  std::vector<Tensor> grads;
  for (NodeId id : bc.all) grads.push_back(tape.adjoint(id));
  return grads;
}

std::vector<Tensor> trajectory(const CellParams& p, const std::vector<Tensor>& xs) {
  Tape tape;
  const BoundCell bc = bind(p, tape);
  CellState st = initial_state(p.kind, xs[0].rows(), p.hidden, tape);
  std::vector<Tensor> out;
  for (const Tensor& x : xs) {
    st = step(bc, st, tape.leaf(x), tape);
    out.push_back(tape.value(st.h));
  }
  return out;
}

// Embeds a diagonal cell's recurrent vectors as diagonal matrices in an
// otherwise identical full cell.
CellParams embed_diag_as_full(const CellParams& diag) {
  CellParams full = diag;
  full.kind.recurrence = Recurrence::Full;
  auto embed = [](GateParams& g, int k) {
    Tensor w(k, k);
    for (int i = 0; i < k; ++i) w.at(i, i) = g.w_rec.at(0, i);
    g.w_rec = std::move(w);
  };
  for (auto& g : full.gates) embed(g, full.hidden);
  embed(full.cand, full.hidden);
  return full;
}

std::vector<Tensor> random_inputs(Rng& rng, int t_steps, int rows, int cols) {
  std::vector<Tensor> xs;
  for (int t = 0; t < t_steps; ++t) xs.push_back(random_tensor(rng, rows, cols));
  return xs;
}

}  // namespace

TEST_CASE("init_params: zero bias and Xavier bounds") {
  for (CellKind kind : all_cell_kinds()) {
    const auto p = init_params(kind, 100, 30, 7);
    for (const auto& g : p.gates) CHECK(g.bias.max_abs() == 0.0);
    CHECK(p.cand.bias.max_abs() == 0.0);
    // recurrent factor is a K->K map: bound sqrt(6/200) either way
    const double w_bound = std::sqrt(6.0 / 200.0);
    CHECK(p.cand.w_rec.max_abs() <= w_bound);
    CHECK(p.cand.w_rec.max_abs() > 0.0);
    CHECK(p.cand.u_in.max_abs() <= std::sqrt(6.0 / 130.0));
    if (kind.recurrence == Recurrence::Diagonal) {
      CHECK(p.cand.w_rec.rows() == 1);
      CHECK(p.cand.w_rec.cols() == 100);
    } else {
      CHECK(p.cand.w_rec.rows() == 100);
    }
  }
}

TEST_CASE("init_params: empirical variance of U matches 2/(K+L)") {
  const int k = 200, l = 100;
  double var_sum = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = init_params(CellKind{Arch::VRNN, Recurrence::Full}, k, l, seed);
    double mean = 0.0;
    for (long i = 0; i < p.cand.u_in.size(); ++i) mean += p.cand.u_in[i];
    mean /= static_cast<double>(p.cand.u_in.size());
    double var = 0.0;
    for (long i = 0; i < p.cand.u_in.size(); ++i) {
      const double d = p.cand.u_in[i] - mean;
      var += d * d;
    }
    var_sum += var / static_cast<double>(p.cand.u_in.size());
  }
  const double target = 2.0 / (k + l);
  CHECK(var_sum / 5.0 == Catch::Approx(target).epsilon(0.10));
}

TEST_CASE("init_params: rejects zero sizes, deterministic in the seed") {
  const CellKind kind{Arch::GRU, Recurrence::Diagonal};
  CHECK_THROWS_AS(init_params(kind, 0, 3, 1), ConfigError);
  CHECK_THROWS_AS(init_params(kind, 3, 0, 1), ConfigError);
  const auto a = init_params(kind, 5, 4, 99);
  const auto b = init_params(kind, 5, 4, 99);
  const auto c = init_params(kind, 5, 4, 100);
  CHECK(max_abs_diff(a.cand.u_in, b.cand.u_in) == 0.0);
  CHECK(max_abs_diff(a.gates[0].w_rec, b.gates[0].w_rec) == 0.0);
  CHECK(max_abs_diff(a.cand.u_in, c.cand.u_in) != 0.0);
}

TEST_CASE("param_count formulas and spot values") {
  CHECK(param_count(CellKind{Arch::VRNN, Recurrence::Full}, 4, 3) == 32);
  CHECK(param_count(CellKind{Arch::VRNN, Recurrence::Diagonal}, 4, 3) == 20);
  CHECK(param_count(CellKind{Arch::LSTM, Recurrence::Diagonal}, 2, 2) == 32);
}

TEST_CASE("param_count matches structural enumeration for every kind") {
  Rng rng(31);
  for (CellKind kind : all_cell_kinds()) {
    for (int trial = 0; trial < 6; ++trial) {
      const int k = static_cast<int>(rng.uniform_int(1, 9));
      const int l = static_cast<int>(rng.uniform_int(1, 9));
      const auto p = init_params(kind, k, l, rng.u64());
      long enumerated = 0;
      for (const Tensor* t : p.tensors()) enumerated += t->size();
      CHECK(enumerated == param_count(kind, k, l));
    }
  }
}

TEST_CASE("diagonal parameter counts scale linearly in K, full quadratically") {
  const int l = 13;
  for (CellKind kind : all_cell_kinds()) {
    const long c1 = param_count(kind, 16, l);
    const long c2 = param_count(kind, 32, l);
    const long c3 = param_count(kind, 48, l);
    const long second_difference = (c3 - c2) - (c2 - c1);
    if (kind.recurrence == Recurrence::Diagonal)
      CHECK(second_difference == 0);
    else
      CHECK(second_difference > 0);
  }
}

TEST_CASE("VRNN-Diag with severed recurrence is tanh of the input") {
  const int k = 4;
  CellParams p;
  p.kind = CellKind{Arch::VRNN, Recurrence::Diagonal};
  p.hidden = k;
  p.input = k;
  p.cand.w_rec = Tensor::zeros(1, k);
  p.cand.u_in = Tensor::identity(k);
  p.cand.bias = Tensor::zeros(1, k);

  Rng rng(32);
  const Tensor x = random_tensor(rng, 1, k, -2.0, 2.0);
  const auto h = trajectory(p, {x, x});
  for (int c = 0; c < k; ++c) {
    CHECK(h[0].at(0, c) == Catch::Approx(std::tanh(x.at(0, c))).margin(1e-15));
    CHECK(h[1].at(0, c) == Catch::Approx(std::tanh(x.at(0, c))).margin(1e-15));
  }
}

TEST_CASE("full cell with diag(w) equals the diagonal cell exactly") {
  Rng rng(33);
  const auto diag = init_params(CellKind{Arch::VRNN, Recurrence::Diagonal}, 5, 3, rng.u64());
  const auto full = embed_diag_as_full(diag);
  const auto xs = random_inputs(rng, 4, 1, 3);
  const auto hd = trajectory(diag, xs);
  const auto hf = trajectory(full, xs);
  for (std::size_t t = 0; t < xs.size(); ++t) CHECK(max_abs_diff(hd[t], hf[t]) < 1e-15);
}

TEST_CASE("diagonal/full consistency: outputs and gradients, all architectures") {
  Rng rng(34);
  for (CellKind kind : all_cell_kinds()) {
    if (kind.recurrence != Recurrence::Diagonal) continue;
    for (int trial = 0; trial < 20; ++trial) {
      const int k = static_cast<int>(rng.uniform_int(2, 6));
      const int l = static_cast<int>(rng.uniform_int(1, 4));
      const int t_steps = static_cast<int>(rng.uniform_int(1, 4));
      const auto diag = init_params(kind, k, l, rng.u64());
      const auto full = embed_diag_as_full(diag);
      const auto xs = random_inputs(rng, t_steps, 1, l);

      const auto hd = trajectory(diag, xs);
      const auto hf = trajectory(full, xs);
      for (std::size_t t = 0; t < xs.size(); ++t) REQUIRE(max_abs_diff(hd[t], hf[t]) < 1e-12);

      const auto gd = cell_probe_grads(diag, xs);
      const auto gf = cell_probe_grads(full, xs);
      REQUIRE(gd.size() == gf.size());
      for (std::size_t i = 0; i < gd.size(); ++i) {
        if (gd[i].same_shape(gf[i])) {
          REQUIRE(max_abs_diff(gd[i], gf[i]) < 1e-9);
        } else {
          // recurrent factor: the diagonal of the full gradient matches the
          // vector gradient entry for entry
          for (int j = 0; j < k; ++j)
            REQUIRE(std::abs(gd[i].at(0, j) - gf[i].at(j, j)) < 1e-9);
        }
      }
    }
  }
}

TEST_CASE("linear unrolled recursion: identity-activation VRNN matches the closed form") {
  Rng rng(35);
  const int k = 3, l = 2, t_max = 8;
  for (Recurrence rec : {Recurrence::Full, Recurrence::Diagonal}) {
    for (bool zero_h0 : {true, false}) {
      const auto p = init_params(CellKind{Arch::VRNN, rec}, k, l, rng.u64());
      const auto xs = random_inputs(rng, t_max, 1, l);
      const Tensor h0 = zero_h0 ? Tensor::zeros(1, k) : random_tensor(rng, 1, k);

      // run the cell with the activation removed
      Tape tape;
      const BoundCell bc = bind(p, tape);
      CellState st;
      st.h = tape.leaf(h0);
      StepHooks hooks;
      hooks.identity_activation = true;
      std::vector<Tensor> h_run;
      for (const Tensor& x : xs) {
        st = step(bc, st, tape.leaf(x), tape, &hooks);
        h_run.push_back(tape.value(st.h));
      }

      // closed form h_t = h0 W^t + sum_j x_j U W^(t-j); biases are zero
      REQUIRE(p.cand.bias.max_abs() == 0.0);
      const Mat u = to_mat(p.cand.u_in);
      Mat w_full;
      std::vector<double> w_diag(static_cast<std::size_t>(k));
      if (rec == Recurrence::Full) {
        w_full = to_mat(p.cand.w_rec);
      } else {
        for (int i = 0; i < k; ++i) w_diag[static_cast<std::size_t>(i)] = p.cand.w_rec.at(0, i);
      }
      auto w_power = [&](int e) {
        if (rec == Recurrence::Full) {
          Mat acc = nv_identity(static_cast<std::size_t>(k));
          for (int i = 0; i < e; ++i) acc = nv_matmul(acc, w_full);
          return acc;
        }
        Mat acc = testutil::nv_zeros(static_cast<std::size_t>(k), static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i)
          acc[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] =
              std::pow(w_diag[static_cast<std::size_t>(i)], e);
        return acc;
      };
      for (int t = 1; t <= t_max; ++t) {
        Mat expect = nv_matmul(to_mat(h0), w_power(t));
        for (int j = 1; j <= t; ++j) {
          const Mat term =
              nv_matmul(nv_matmul(to_mat(xs[static_cast<std::size_t>(j) - 1]), u), w_power(t - j));
          for (int c = 0; c < k; ++c)
            expect[0][static_cast<std::size_t>(c)] += term[0][static_cast<std::size_t>(c)];
        }
        for (int c = 0; c < k; ++c)
          REQUIRE(std::abs(h_run[static_cast<std::size_t>(t) - 1].at(0, c) -
                           expect[0][static_cast<std::size_t>(c)]) < 1e-10);
      }
    }
  }
}

TEST_CASE("gate-forced GRU reduces to the VRNN recursion") {
  Rng rng(36);
  for (Recurrence rec : {Recurrence::Full, Recurrence::Diagonal}) {
    for (int trial = 0; trial < 10; ++trial) {
      const int k = static_cast<int>(rng.uniform_int(2, 6));
      const int l = static_cast<int>(rng.uniform_int(1, 4));
      auto gru = init_params(CellKind{Arch::GRU, rec}, k, l, rng.u64());

      CellParams vrnn;
      vrnn.kind = CellKind{Arch::VRNN, rec};
      vrnn.hidden = k;
      vrnn.input = l;
      vrnn.cand = gru.cand;  // shared weights

      const auto xs = random_inputs(rng, 5, 1, l);
      const Tensor zeros_gate = Tensor::zeros(1, k);
      const Tensor ones_gate = Tensor::ones(1, k);

      Tape tape;
      const BoundCell bg = bind(gru, tape);
      const BoundCell bv = bind(vrnn, tape);
      CellState sg = initial_state(gru.kind, 1, k, tape);
      CellState sv = initial_state(vrnn.kind, 1, k, tape);
      StepHooks hooks;
      hooks.forget = &zeros_gate;
      hooks.write = &ones_gate;
      for (const Tensor& x : xs) {
        const NodeId xn = tape.leaf(x);
        sg = step(bg, sg, xn, tape, &hooks);
        sv = step(bv, sv, xn, tape);
        REQUIRE(max_abs_diff(tape.value(sg.h), tape.value(sv.h)) < 1e-12);
      }
    }
  }
}

TEST_CASE("gate ranges and the GRU convex-combination bound") {
  Rng rng(37);
  for (CellKind kind : all_cell_kinds()) {
    if (kind.arch == Arch::VRNN) continue;
    const int k = 6, l = 4;
    const auto p = init_params(kind, k, l, rng.u64());
    Tape tape;
    const BoundCell bc = bind(p, tape);
    CellState st = initial_state(kind, 2, k, tape);
    for (int t = 0; t < 6; ++t) {
      const Tensor h_prev = tape.value(st.h);
      StepTrace trace;
      StepHooks hooks;
      hooks.trace = &trace;
      st = step(bc, st, tape.leaf(random_tensor(rng, 2, l, -3.0, 3.0)), tape, &hooks);
      for (NodeId gate : {trace.forget, trace.write, trace.output}) {
        if (gate == kNoNode) continue;
        const Tensor& g = tape.value(gate);
        for (long i = 0; i < g.size(); ++i) {
          CHECK(g[i] > 0.0);
          CHECK(g[i] < 1.0);
        }
      }
      if (kind.arch == Arch::GRU) {
        const double bound = std::max(h_prev.max_abs(), tape.value(trace.candidate).max_abs());
        CHECK(tape.value(st.h).max_abs() <= bound + 1e-15);
      }
    }
  }
}

TEST_CASE("cell gradients match finite differences for every kind") {
  Rng rng(38);
  for (CellKind kind : all_cell_kinds()) {
    const int k = static_cast<int>(rng.uniform_int(2, 8));
    const int l = static_cast<int>(rng.uniform_int(1, 5));
    const int t_steps = static_cast<int>(rng.uniform_int(2, 6));
    auto p = init_params(kind, k, l, rng.u64());
    const auto xs = random_inputs(rng, t_steps, 2, l);

    const auto analytic = cell_probe_grads(p, xs);
    const auto tensors = p.tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const Tensor fd = fd_gradient(*tensors[i], [&]() { return cell_probe_loss(p, xs); });
      INFO(kind_name(kind) << " tensor " << p.tensor_names()[i]);
      REQUIRE(max_rel_err(analytic[i], fd) < 1e-6);
    }
  }
}
