#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ess/errors.hpp"
#include "ess/search_space.hpp"

namespace ess {

enum class Mode { vanilla, intra_only, inter_only, joint };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::vanilla: return "vanilla";
    case Mode::intra_only: return "intra_only";
    case Mode::inter_only: return "inter_only";
    case Mode::joint: return "joint";
  }
  throw ConfigError("unknown mode");
}

inline Mode mode_from_name(const std::string& s) {
  for (Mode m : {Mode::vanilla, Mode::intra_only, Mode::inter_only, Mode::joint})
    if (s == mode_name(m)) return m;
  throw ConfigError("unknown mode: " + s);
}

// Whether the composite cell carries searched inter-cell gate networks.
inline bool mode_has_gates(Mode m) { return m == Mode::joint || m == Mode::inter_only; }

// Dimensions of the composite recurrent unit. n_intra counts the intra DAG's
// real nodes (input plus computed; the averaged output is derived), m is the
// history window, n_inter the computed nodes of each gate DAG.
struct EssCellSpec {
  std::size_t d = 64;
  std::size_t n_intra = 4;
  std::size_t m = 2;
  std::size_t n_inter = 3;
  Mode mode = Mode::joint;

  void validate() const {
    if (n_intra < 2) throw ConfigError("n_intra must be >= 2");
    if (m < 1) throw ConfigError("m must be >= 1");
    if (mode_has_gates(mode) && n_inter < m)
      throw ConfigError("n_inter must be >= m (the first m gate nodes hold the input links)");
    if (d < 1) throw ConfigError("d must be >= 1");
  }
};

// Input layer of the intra DAG: tanh(h_hat * W_h + x_hat * W_x).
template <class Real>
Var intra_input(Tape<Real>& tape, Var h_hat, Var x_hat, Param<Real>& proj_h, Param<Real>& proj_x) {
  Var a = tape.matmul(h_hat, tape.leaf(proj_h));
  Var b = tape.matmul(x_hat, tape.leaf(proj_x));
  return tape.activation(ActKind::tanh, tape.add(a, b));
}

// Gate that modulates the previous hidden state with a network over the
// last m inputs. Works for both the relaxed and the derived gate DAG.
template <class Real, class Dag>
Var f_prime(Tape<Real>& tape, const Dag& gate, Var h_prev, std::span<const Var> x_window) {
  if (x_window.size() != gate.num_inputs())
    throw ContractError("f_prime window of " + std::to_string(x_window.size()) + " entries, gate expects " +
                        std::to_string(gate.num_inputs()));
  GatedPair<Real, Dag> pair{nullptr, &gate};
  std::array<Var, 1> alpha{h_prev};
  return gated_output(tape, pair, alpha, x_window);
}

// Mirror of f_prime: modulates the current input with a network over the
// last m hidden states.
template <class Real, class Dag>
Var g_prime(Tape<Real>& tape, const Dag& gate, Var x_t, std::span<const Var> h_window) {
  if (h_window.size() != gate.num_inputs())
    throw ContractError("g_prime window of " + std::to_string(h_window.size()) + " entries, gate expects " +
                        std::to_string(gate.num_inputs()));
  GatedPair<Real, Dag> pair{nullptr, &gate};
  std::array<Var, 1> alpha{x_t};
  return gated_output(tape, pair, alpha, h_window);
}

// Per-window history: newest-first vectors of the last m hidden states and
// inputs as live tape nodes. Positions before sequence start are zeros.
struct HistoryVars {
  std::vector<Var> h;  // h[0] = h_{t-1}, h[m-1] = h_{t-m}
  std::vector<Var> x;  // x[0] = x_{t-1}

  void advance(Var h_t, Var x_t) {
    h.insert(h.begin(), h_t);
    h.pop_back();
    x.insert(x.begin(), x_t);
    x.pop_back();
  }
};

// Forces both gates to behave as the constant-one marker (the vanilla
// connection pattern), leaving the rest of the cell untouched.
enum class GatePin { none, ones };

// The composite recurrent unit: intra DAG plus optional inter-cell gates.
// Works with any DAG type exposing forward/collect/num_inputs (relaxed
// MixedDag during search, FixedDag after derivation).
template <class Real, class Dag>
struct BasicCell {
  EssCellSpec spec;
  Dag intra;
  std::optional<Dag> gate_f, gate_g;
  Param<Real> proj_h, proj_x;

  BasicCell(EssCellSpec s, Dag intra_dag, std::optional<Dag> f, std::optional<Dag> g, Rng& rng)
      : spec(s), intra(std::move(intra_dag)), gate_f(std::move(f)), gate_g(std::move(g)),
        proj_h("cell.proj_h", Tensor<Real>::fan_in_uniform({s.d, s.d}, s.d, rng)),
        proj_x("cell.proj_x", Tensor<Real>::fan_in_uniform({s.d, s.d}, s.d, rng)) {}

  bool gated() const { return gate_f.has_value(); }

  // One recurrence step. History advances by one position.
  Var step(Tape<Real>& tape, HistoryVars& hist, Var x_t, GatePin pin = GatePin::none) const {
    Var h_prev = hist.h[0];
    Var h_hat = h_prev;
    Var x_hat = x_t;
    if (gated() && pin == GatePin::none) {
      h_hat = f_prime(tape, *gate_f, h_prev, window_span(hist.x));
      x_hat = g_prime(tape, *gate_g, x_t, window_span(hist.h));
    }
    Var e1 = intra_input(tape, h_hat, x_hat, const_cast<Param<Real>&>(proj_h),
                         const_cast<Param<Real>&>(proj_x));
    std::array<Var, 1> in{e1};
    Var h_t = intra.forward(tape, in);
    hist.advance(h_t, x_t);
    return h_t;
  }

  void collect(std::vector<Param<Real>*>& w_intra, std::vector<Param<Real>*>& w_inter,
               std::vector<Param<Real>*>& model) {
    intra.collect(w_intra, model);
    if (gate_f) gate_f->collect(w_inter, model);
    if (gate_g) gate_g->collect(w_inter, model);
    model.push_back(&proj_h);
    model.push_back(&proj_x);
  }

 private:
  std::span<const Var> window_span(const std::vector<Var>& v) const {
    return {v.data(), spec.m};
  }
};

template <class Real>
BasicCell<Real, MixedDag<Real>> make_relaxed_cell(const EssCellSpec& spec, Rng& rng) {
  spec.validate();
  MixedDag<Real> intra = MixedDag<Real>::intra(spec.n_intra, spec.d, rng);
  std::optional<MixedDag<Real>> f, g;
  if (mode_has_gates(spec.mode)) {
    f = MixedDag<Real>::inter_gate(spec.m, spec.n_inter, spec.d, rng, "gate_f");
    g = MixedDag<Real>::inter_gate(spec.m, spec.n_inter, spec.d, rng, "gate_g");
  }
  return BasicCell<Real, MixedDag<Real>>(spec, std::move(intra), std::move(f), std::move(g), rng);
}

// Detached inter-window state: raw value buffers carried across truncated
// BPTT windows. Re-entering a window as constants severs the gradient path.
template <class Real>
struct Carried {
  std::vector<Tensor<Real>> h_hist;  // newest first, size m
  std::vector<Tensor<Real>> x_hist;

  static Carried zeros(std::size_t batch, std::size_t d, std::size_t m) {
    Carried c;
    c.h_hist.assign(m, Tensor<Real>({batch, d}));
    c.x_hist.assign(m, Tensor<Real>({batch, d}));
    return c;
  }

  std::size_t batch() const { return h_hist[0].dim(0); }
};

// A batch-major token window: inputs[t * batch + b] is the input token of
// stream b at offset t, targets the next token.
struct WindowBatch {
  std::size_t steps = 0;
  std::size_t batch = 0;
  std::span<const std::int32_t> inputs;
  std::span<const std::int32_t> targets;
};

// Recurrent language model: token embedding, composite cell, and a linear
// output layer. The output projection starts at zero so an untrained model
// predicts the uniform distribution.
template <class Real, class Dag>
struct RnnLm {
  std::size_t vocab;
  BasicCell<Real, Dag> cell;
  Param<Real> embed;
  Param<Real> out_proj;

  RnnLm(std::size_t vocab_size, BasicCell<Real, Dag> c, Rng& rng)
      : vocab(vocab_size), cell(std::move(c)),
        embed("embed", Tensor<Real>::fan_in_uniform({vocab_size, cell.spec.d}, cell.spec.d, rng)),
        out_proj("out_proj", Tensor<Real>::zeros({cell.spec.d, vocab_size})) {}

  Carried<Real> initial_state(std::size_t batch) const {
    return Carried<Real>::zeros(batch, cell.spec.d, cell.spec.m);
  }

  // Builds one window on the tape and returns the mean per-token loss.
  // `carried` is updated in place with detached end-of-window values.
  Var window_loss(Tape<Real>& tape, Carried<Real>& carried, const WindowBatch& w,
                  GatePin pin = GatePin::none) const {
    if (w.steps < 1) throw ContractError("window must contain at least one step");
    HistoryVars hist;
    for (const auto& t : carried.h_hist) hist.h.push_back(tape.constant(t));
    for (const auto& t : carried.x_hist) hist.x.push_back(tape.constant(t));
    Var table = tape.leaf(const_cast<Param<Real>&>(embed));
    Var out_w = tape.leaf(const_cast<Param<Real>&>(out_proj));
    std::vector<Var> losses;
    losses.reserve(w.steps);
    for (std::size_t t = 0; t < w.steps; ++t) {
      Var x_t = tape.embedding(table, w.inputs.subspan(t * w.batch, w.batch));
      Var h_t = cell.step(tape, hist, x_t, pin);
      Var logits = tape.matmul(h_t, out_w);
      losses.push_back(tape.cross_entropy(logits, w.targets.subspan(t * w.batch, w.batch)));
    }
    Var loss = tape.scale_const(tape.add_n(losses), Real(1) / static_cast<Real>(w.steps));
    for (std::size_t i = 0; i < carried.h_hist.size(); ++i) {
      carried.h_hist[i] = tape.value(hist.h[i]);
      carried.x_hist[i] = tape.value(hist.x[i]);
    }
    return loss;
  }

  void collect(std::vector<Param<Real>*>& w_intra, std::vector<Param<Real>*>& w_inter,
               std::vector<Param<Real>*>& model) {
    cell.collect(w_intra, w_inter, model);
    model.push_back(&embed);
    model.push_back(&out_proj);
  }

  std::size_t param_count() {
    std::vector<Param<Real>*> a, b, c;
    collect(a, b, c);
    std::size_t n = 0;
    for (auto* p : a) n += p->value.numel();
    for (auto* p : b) n += p->value.numel();
    for (auto* p : c) n += p->value.numel();
    return n;
  }
};

template <class Real>
using RelaxedLm = RnnLm<Real, MixedDag<Real>>;

template <class Real>
RelaxedLm<Real> make_relaxed_lm(const EssCellSpec& spec, std::size_t vocab, std::uint64_t seed) {
  Rng rng = named_stream(seed, "init");
  auto cell = make_relaxed_cell<Real>(spec, rng);
  return RelaxedLm<Real>(vocab, std::move(cell), rng);
}

// Result of evaluating a token stream without parameter updates.
template <class Real>
struct UnrollResult {
  double mean_loss = 0;
  std::size_t tokens = 0;
  Tensor<Real> last_hidden;
};

// Processes a single token stream in truncated windows of bptt_len. Hidden
// state and history rings carry across windows; gradients do not (each
// window runs on a fresh tape seeded from detached values).
template <class Real, class Dag>
UnrollResult<Real> unroll(const RnnLm<Real, Dag>& model, std::span<const std::int32_t> inputs,
                          std::span<const std::int32_t> targets, std::size_t bptt_len) {
  if (bptt_len < 1) throw ConfigError("bptt_len must be >= 1");
  if (inputs.empty() || inputs.size() != targets.size())
    throw ContractError("unroll needs equal-length nonempty input/target streams");
  Carried<Real> carried = model.initial_state(1);
  Tape<Real> tape;
  double total = 0;
  double comp = 0;  // Neumaier compensation
  std::size_t done = 0;
  Tensor<Real> last_h;
  while (done < inputs.size()) {
    const std::size_t steps = std::min(bptt_len, inputs.size() - done);
    tape.clear();
    WindowBatch w{steps, 1, inputs.subspan(done, steps), targets.subspan(done, steps)};
    Var loss = model.window_loss(tape, carried, w);
    const double piece = static_cast<double>(tape.scalar_value(loss)) * static_cast<double>(steps);
    const double t = total + piece;
    comp += std::abs(total) >= std::abs(piece) ? (total - t) + piece : (piece - t) + total;
    total = t;
    last_h = carried.h_hist[0];
    done += steps;
  }
  return {(total + comp) / static_cast<double>(inputs.size()), inputs.size(), std::move(last_h)};
}

}  // namespace ess
