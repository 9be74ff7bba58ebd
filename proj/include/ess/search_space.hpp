#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ess/errors.hpp"
#include "ess/rng.hpp"
#include "ess/tape.hpp"

namespace ess {

// The candidate operation set is the activation set.
using CandidateOp = ActKind;

// Averaged output of a DAG's computed nodes (the fixed last node).
template <class Real>
Var last_node(Tape<Real>& tape, std::span<const Var> states) {
  if (states.empty()) throw ConfigError("last_node needs at least one preceding state");
  Var sum = tape.add_n(states);
  return tape.scale_const(sum, Real(1) / static_cast<Real>(states.size()));
}

// Relaxed search DAG. Node numbering is global: ids [0, num_inputs) are input
// nodes, ids [num_inputs, num_inputs + num_steps) are computed nodes. Each
// computed node carries softmax-mixed candidate ops on every allowed incoming
// edge; each predecessor node j owns one linear map applied before the ops.
// The DAG output averages all computed nodes.
template <class Real>
class MixedDag {
 public:
  struct Edge {
    int src;                   // global id of the predecessor
    Param<Real> logits;        // 5 op weights; softmax of these is the mix
  };

  struct NodeIn {
    std::vector<Edge> edges;   // ordered by ascending src
  };

  // Intra-cell space: one input node, `node_count - 1` computed nodes, every
  // earlier node an allowed predecessor.
  static MixedDag intra(std::size_t node_count, std::size_t width, Rng& rng,
                        const std::string& name = "intra") {
    if (node_count < 2) throw ConfigError("intra dag needs node_count >= 2");
    MixedDag dag(1, node_count - 1, width, name);
    for (std::size_t t = 0; t < dag.num_steps_; ++t) {
      const int gi = static_cast<int>(1 + t);
      for (int j = 0; j < gi; ++j) dag.add_edge(t, j);
    }
    dag.init_projections(rng);
    return dag;
  }

  // Inter-cell gate space: `window` input nodes. Computed node i (1-based)
  // for i <= window is pruned to receive only its dedicated input; later
  // nodes may receive any earlier computed node.
  static MixedDag inter_gate(std::size_t window, std::size_t node_count, std::size_t width,
                             Rng& rng, const std::string& name) {
    if (window < 1) throw ConfigError("inter gate needs window >= 1");
    if (node_count < window)
      throw ConfigError("inter gate needs node_count >= window (" + std::to_string(node_count) +
                        " < " + std::to_string(window) + ")");
    MixedDag dag(window, node_count, width, name);
    for (std::size_t t = 0; t < dag.num_steps_; ++t) {
      if (t < window) {
        dag.add_edge(t, static_cast<int>(t));  // dedicated input link
      } else {
        for (std::size_t j = 0; j < t; ++j)
          dag.add_edge(t, static_cast<int>(window + j));
      }
    }
    dag.init_projections(rng);
    return dag;
  }

  std::size_t width() const { return width_; }
  std::size_t num_inputs() const { return num_inputs_; }
  std::size_t num_steps() const { return num_steps_; }
  std::size_t total_nodes() const { return num_inputs_ + num_steps_; }
  const std::string& name() const { return name_; }

  const NodeIn& incoming(std::size_t step) const { return nodes_[step]; }

  // True when computed node `step` is pinned to a dedicated input.
  bool is_pruned_step(std::size_t step) const {
    return nodes_[step].edges.size() == 1 && nodes_[step].edges[0].src < static_cast<int>(num_inputs_);
  }

  Param<Real>& edge_logits(std::size_t step, int src) {
    for (auto& e : nodes_[step].edges)
      if (e.src == src) return e.logits;
    throw ContractError("no edge from node " + std::to_string(src) + " into step " + std::to_string(step));
  }

  Param<Real>& projection(int src) {
    if (proj_index_[src] < 0) throw ContractError("node " + std::to_string(src) + " has no projection");
    return proj_[proj_index_[src]];
  }

  const Param<Real>& projection(int src) const {
    return const_cast<MixedDag*>(this)->projection(src);
  }

  // State of computed node `step` given the states of all earlier global
  // nodes: sum over incoming edges and candidate ops of
  // softmax(w)_k * op_k(state_src * W_src).
  Var node_state(Tape<Real>& tape, std::size_t step, std::span<const Var> states) const {
    const std::size_t need = global_id(step);
    if (states.size() < need)
      throw DimensionError("node_state for step " + std::to_string(step) + " needs " +
                           std::to_string(need) + " predecessor states, got " +
                           std::to_string(states.size()));
    std::vector<Var> terms;
    terms.reserve(nodes_[step].edges.size() * kNumCandidateOps);
    for (const Edge& e : nodes_[step].edges) {
      Var theta = tape.softmax(tape.leaf(const_cast<Param<Real>&>(e.logits)));
      Var z = tape.matmul(states[e.src], tape.leaf(const_cast<Param<Real>&>(projection(e.src))));
      for (int k = 0; k < kNumCandidateOps; ++k) {
        Var ok = tape.activation(static_cast<ActKind>(k), z);
        terms.push_back(tape.scale_entry(theta, static_cast<std::size_t>(k), ok));
      }
    }
    return tape.add_n(terms);
  }

  // Full relaxed evaluation: computed node states followed by the averaged
  // output node. op_k(state_j * W_j) depends only on (j, k), so those
  // subtrees are built once and shared across every consumer node; the
  // numeric result is identical to chaining node_state().
  Var forward(Tape<Real>& tape, std::span<const Var> inputs) const {
    if (inputs.size() != num_inputs_)
      throw DimensionError("dag " + name_ + " expects " + std::to_string(num_inputs_) +
                           " inputs, got " + std::to_string(inputs.size()));
    std::vector<Var> states(inputs.begin(), inputs.end());
    states.reserve(total_nodes());
    std::vector<std::array<Var, kNumCandidateOps>> acts(total_nodes());
    std::vector<Var> terms;
    for (std::size_t t = 0; t < num_steps_; ++t) {
      terms.clear();
      for (const Edge& e : nodes_[t].edges) {
        auto& a = acts[e.src];
        if (!a[0].valid()) {
          Var z = tape.matmul(states[e.src], tape.leaf(const_cast<Param<Real>&>(projection(e.src))));
          for (int k = 0; k < kNumCandidateOps; ++k) a[k] = tape.activation(static_cast<ActKind>(k), z);
        }
        Var theta = tape.softmax(tape.leaf(const_cast<Param<Real>&>(e.logits)));
        for (int k = 0; k < kNumCandidateOps; ++k)
          terms.push_back(tape.scale_entry(theta, static_cast<std::size_t>(k), a[k]));
      }
      states.push_back(tape.add_n(terms));
    }
    return last_node(tape, std::span<const Var>(states).subspan(num_inputs_));
  }

  void collect(std::vector<Param<Real>*>& arch_weights, std::vector<Param<Real>*>& model_weights) {
    for (auto& node : nodes_)
      for (auto& e : node.edges) arch_weights.push_back(&e.logits);
    for (auto& p : proj_) model_weights.push_back(&p);
  }

  int global_id(std::size_t step) const { return static_cast<int>(num_inputs_ + step); }

 private:
  MixedDag(std::size_t inputs, std::size_t steps, std::size_t width, std::string name)
      : num_inputs_(inputs), num_steps_(steps), width_(width), name_(std::move(name)),
        nodes_(steps), proj_index_(inputs + steps, -1) {}

  void add_edge(std::size_t step, int src) {
    Edge e;
    e.src = src;
    e.logits = Param<Real>(name_ + ".w[" + std::to_string(num_inputs_ + step) + "," +
                               std::to_string(src) + "]",
                           Tensor<Real>::zeros({static_cast<std::size_t>(kNumCandidateOps)}));
    nodes_[step].edges.push_back(std::move(e));
  }

  void init_projections(Rng& rng) {
    // One linear map per node that feeds anything, created in ascending node
    // order so initialization draws are reproducible.
    std::vector<bool> used(total_nodes(), false);
    for (const auto& node : nodes_)
      for (const auto& e : node.edges) used[e.src] = true;
    for (std::size_t j = 0; j < used.size(); ++j) {
      if (!used[j]) continue;
      proj_index_[j] = static_cast<int>(proj_.size());
      proj_.emplace_back(name_ + ".proj[" + std::to_string(j) + "]",
                         Tensor<Real>::fan_in_uniform({width_, width_}, width_, rng));
    }
  }

  std::size_t num_inputs_, num_steps_, width_;
  std::string name_;
  std::vector<NodeIn> nodes_;
  std::vector<Param<Real>> proj_;
  std::vector<int> proj_index_;
};

// Resets every edge-weight vector to zero, making each op mix uniform (0.2).
template <class Real>
void uniform_init(MixedDag<Real>& dag) {
  std::vector<Param<Real>*> arch, model;
  dag.collect(arch, model);
  for (auto* p : arch) p->value.fill(Real(0));
}

// Two-group gated formulation: the output is the Hadamard product of the two
// sides' DAG outputs. A null alpha means the single alpha input passes
// through unchanged; a null beta is the constant-one marker, which makes the
// result exactly the alpha side (no multiplication inserted).
template <class Real, class Dag = MixedDag<Real>>
struct GatedPair {
  const Dag* alpha = nullptr;
  const Dag* beta = nullptr;
};

template <class Real, class Dag>
Var gated_output(Tape<Real>& tape, const GatedPair<Real, Dag>& pair, std::span<const Var> alpha_inputs,
                 std::span<const Var> beta_inputs) {
  Var a;
  if (pair.alpha) {
    a = pair.alpha->forward(tape, alpha_inputs);
  } else {
    if (alpha_inputs.size() != 1)
      throw ContractError("passthrough alpha side takes exactly one input");
    a = alpha_inputs[0];
  }
  if (!pair.beta) return a;
  Var b = pair.beta->forward(tape, beta_inputs);
  return tape.mul(a, b);
}

}  // namespace ess
