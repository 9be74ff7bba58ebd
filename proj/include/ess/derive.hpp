#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ess/corpus.hpp"
#include "ess/search.hpp"

namespace ess {

// One discrete decision: the chosen predecessor (global node id) and the
// chosen non-drop operation for a computed node.
struct ArchChoice {
  int pred = 0;
  ActKind op = ActKind::identity;

  bool operator==(const ArchChoice&) const = default;
};

struct Provenance {
  std::string corpus;
  std::uint64_t seed = 0;
  std::string config_digest;

  bool operator==(const Provenance&) const = default;
};

// A discretized architecture: per-node choices for the intra DAG and, when
// the model was searched with gates, for both inter-cell gate DAGs.
struct DerivedArch {
  EssCellSpec spec;
  std::vector<ArchChoice> intra;
  std::vector<ArchChoice> inter_f, inter_g;
  Provenance provenance;
  std::vector<std::string> warnings;

  bool operator==(const DerivedArch& o) const {
    return spec.d == o.spec.d && spec.n_intra == o.spec.n_intra && spec.m == o.spec.m &&
           spec.n_inter == o.spec.n_inter && spec.mode == o.spec.mode && intra == o.intra &&
           inter_f == o.inter_f && inter_g == o.inter_g && provenance == o.provenance;
  }

  void validate() const {
    spec.validate();
    if (intra.size() != spec.n_intra - 1)
      throw ContractError("arch intra section has " + std::to_string(intra.size()) + " nodes, spec needs " +
                          std::to_string(spec.n_intra - 1));
    check_section(intra, 1, "intra");
    if (inter_f.size() != inter_g.size())
      throw ContractError("inter gate sections differ in size");
    if (!inter_f.empty()) {
      if (inter_f.size() != spec.n_inter)
        throw ContractError("arch inter sections have " + std::to_string(inter_f.size()) +
                            " nodes, spec needs " + std::to_string(spec.n_inter));
      check_gate(inter_f, "inter_f");
      check_gate(inter_g, "inter_g");
    }
  }

 private:
  static void check_choice(const ArchChoice& c, int node_id, const char* where) {
    if (c.op == ActKind::drop)
      throw ContractError(std::string(where) + " node " + std::to_string(node_id) + " uses drop");
    if (c.pred < 0 || c.pred >= node_id)
      throw ContractError(std::string(where) + " node " + std::to_string(node_id) +
                          " has invalid predecessor " + std::to_string(c.pred));
  }

  void check_section(const std::vector<ArchChoice>& sec, int num_inputs, const char* where) const {
    for (std::size_t i = 0; i < sec.size(); ++i)
      check_choice(sec[i], num_inputs + static_cast<int>(i), where);
  }

  void check_gate(const std::vector<ArchChoice>& sec, const char* where) const {
    const int m = static_cast<int>(spec.m);
    for (std::size_t i = 0; i < sec.size(); ++i) {
      check_choice(sec[i], m + static_cast<int>(i), where);
      if (static_cast<int>(i) < m && sec[i].pred != static_cast<int>(i))
        throw ContractError(std::string(where) + " node s" + std::to_string(i + 1) +
                            " must keep its fixed input link");
      if (static_cast<int>(i) >= m && sec[i].pred < m)
        throw ContractError(std::string(where) + " free node s" + std::to_string(i + 1) +
                            " may not link an input directly");
    }
  }
};

// Number of discrete architectures a relaxed DAG encodes when every computed
// node picks one predecessor and one of the four non-drop ops.
template <class Real>
unsigned long long count_candidates(const MixedDag<Real>& dag) {
  unsigned long long n = 1;
  for (std::size_t t = 0; t < dag.num_steps(); ++t)
    n *= 4ULL * static_cast<unsigned long long>(dag.incoming(t).edges.size());
  return n;
}

// Materializes every discrete candidate of a small DAG in tie-break order:
// node-major, predecessors ascending, ops in (identity, sigmoid, tanh, relu)
// order. Element 0 is therefore the all-ties choice.
template <class Real>
std::vector<std::vector<ArchChoice>> enumerate_candidates(const MixedDag<Real>& dag) {
  std::vector<std::vector<ArchChoice>> out{{}};
  for (std::size_t t = 0; t < dag.num_steps(); ++t) {
    std::vector<std::vector<ArchChoice>> next;
    next.reserve(out.size() * dag.incoming(t).edges.size() * 4);
    for (const auto& prefix : out)
      for (const auto& e : dag.incoming(t).edges)
        for (int k = 1; k < kNumCandidateOps; ++k) {
          auto c = prefix;
          c.push_back({e.src, static_cast<ActKind>(k)});
          next.push_back(std::move(c));
        }
    out = std::move(next);
  }
  return out;
}

// Argmax discretization of one DAG: per node, the (predecessor, op) pair with
// the largest mixing weight, drop excluded. Ties resolve to the smallest
// predecessor, then the op order. If drop dominates every incoming edge of a
// node, the best non-drop pair is kept and a warning recorded.
template <class Real>
std::vector<ArchChoice> derive_dag(const MixedDag<Real>& dag, std::vector<std::string>& warnings) {
  std::vector<ArchChoice> out;
  out.reserve(dag.num_steps());
  for (std::size_t t = 0; t < dag.num_steps(); ++t) {
    ArchChoice best;
    double best_theta = -1;
    bool drop_everywhere = true;
    for (const auto& e : dag.incoming(t).edges) {
      const auto theta = softmax_values<Real>(e.logits.value.values());
      for (int k = 1; k < kNumCandidateOps; ++k) {
        if (static_cast<double>(theta[k]) > best_theta) {
          best_theta = static_cast<double>(theta[k]);
          best = {e.src, static_cast<ActKind>(k)};
        }
        if (static_cast<double>(theta[k]) >= static_cast<double>(theta[0])) drop_everywhere = false;
      }
    }
    if (drop_everywhere)
      warnings.push_back(dag.name() + " node " + std::to_string(dag.global_id(t)) +
                         ": drop dominates every incoming edge; keeping best non-drop pair");
    out.push_back(best);
  }
  return out;
}

// Discretizes a searched model.
template <class Real>
DerivedArch derive(const RelaxedLm<Real>& model, Provenance prov = {}) {
  DerivedArch arch;
  arch.spec = model.cell.spec;
  arch.provenance = std::move(prov);
  arch.intra = derive_dag(model.cell.intra, arch.warnings);
  if (model.cell.gate_f) {
    arch.inter_f = derive_dag(*model.cell.gate_f, arch.warnings);
    arch.inter_g = derive_dag(*model.cell.gate_g, arch.warnings);
  }
  arch.validate();
  return arch;
}

// A discrete DAG realizing a derived section: each computed node applies its
// chosen op to the projected state of its chosen predecessor; the output
// averages all computed nodes.
template <class Real>
class FixedDag {
 public:
  FixedDag(std::string name, std::size_t num_inputs, std::size_t width,
           std::vector<ArchChoice> choices, Rng& rng)
      : name_(std::move(name)), num_inputs_(num_inputs), width_(width), choices_(std::move(choices)),
        proj_index_(num_inputs_ + choices_.size(), -1) {
    std::set<int> used;
    for (const auto& c : choices_) used.insert(c.pred);
    for (int j : used) {
      proj_index_[j] = static_cast<int>(proj_.size());
      proj_.emplace_back(name_ + ".proj[" + std::to_string(j) + "]",
                         Tensor<Real>::fan_in_uniform({width_, width_}, width_, rng));
    }
  }

  std::size_t num_inputs() const { return num_inputs_; }
  std::size_t num_steps() const { return choices_.size(); }
  std::size_t width() const { return width_; }
  const std::vector<ArchChoice>& choices() const { return choices_; }

  Param<Real>& projection(int src) {
    if (proj_index_[src] < 0) throw ContractError("node " + std::to_string(src) + " has no projection");
    return proj_[proj_index_[src]];
  }

  Var forward(Tape<Real>& tape, std::span<const Var> inputs) const {
    if (inputs.size() != num_inputs_)
      throw DimensionError("dag " + name_ + " expects " + std::to_string(num_inputs_) +
                           " inputs, got " + std::to_string(inputs.size()));
    std::vector<Var> states(inputs.begin(), inputs.end());
    for (const auto& c : choices_) {
      Var z = tape.matmul(states[c.pred],
                          tape.leaf(const_cast<FixedDag*>(this)->projection(c.pred)));
      states.push_back(tape.activation(c.op, z));
    }
    return last_node(tape, std::span<const Var>(states).subspan(num_inputs_));
  }

  void collect(std::vector<Param<Real>*>&, std::vector<Param<Real>*>& model_weights) {
    for (auto& p : proj_) model_weights.push_back(&p);
  }

 private:
  std::string name_;
  std::size_t num_inputs_, width_;
  std::vector<ArchChoice> choices_;
  std::vector<Param<Real>> proj_;
  std::vector<int> proj_index_;
};

template <class Real>
using FixedLm = RnnLm<Real, FixedDag<Real>>;

// Builds the discrete model a derived architecture describes, with fresh
// parameters drawn from the seed's init stream.
template <class Real>
FixedLm<Real> make_fixed_lm(const DerivedArch& arch, std::size_t vocab, std::uint64_t seed) {
  arch.validate();
  Rng rng = named_stream(seed, "init");
  FixedDag<Real> intra("intra", 1, arch.spec.d, arch.intra, rng);
  std::optional<FixedDag<Real>> f, g;
  if (!arch.inter_f.empty()) {
    f.emplace("gate_f", arch.spec.m, arch.spec.d, arch.inter_f, rng);
    g.emplace("gate_g", arch.spec.m, arch.spec.d, arch.inter_g, rng);
  }
  BasicCell<Real, FixedDag<Real>> cell(arch.spec, std::move(intra), std::move(f), std::move(g), rng);
  return FixedLm<Real>(vocab, std::move(cell), rng);
}

// ---- arch file (versioned JSON) ----

inline constexpr int kArchFileVersion = 1;

namespace detail {

inline nlohmann::json choices_to_json(const std::vector<ArchChoice>& sec, int num_inputs) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < sec.size(); ++i)
    arr.push_back({{"node", num_inputs + static_cast<int>(i)},
                   {"pred", sec[i].pred},
                   {"op", act_name(sec[i].op)}});
  return arr;
}

inline const nlohmann::json& need(const nlohmann::json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError("arch file: missing field " + where + "." + key);
  return *it;
}

inline std::vector<ArchChoice> choices_from_json(const nlohmann::json& arr, int num_inputs,
                                                 const std::string& where) {
  if (!arr.is_array()) throw ParseError("arch file: " + where + " must be an array");
  std::vector<ArchChoice> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string at = where + "[" + std::to_string(i) + "]";
    const auto& e = arr[i];
    if (!e.is_object()) throw ParseError("arch file: " + at + " must be an object");
    const auto& pred = need(e, "pred", at);
    const auto& op = need(e, "op", at);
    if (!pred.is_number_integer()) throw ParseError("arch file: " + at + ".pred must be an integer");
    if (!op.is_string()) throw ParseError("arch file: " + at + ".op must be a string");
    ArchChoice c;
    c.pred = pred.get<int>();
    const std::string ops = op.get<std::string>();
    try {
      c.op = act_from_name(ops);
    } catch (const ConfigError&) {
      throw ParseError("arch file: unknown op \"" + ops + "\" at " + at + ".op");
    }
    if (c.op == ActKind::drop) throw ParseError("arch file: drop is not a valid derived op at " + at + ".op");
    if (e.contains("node") && e["node"].get<int>() != num_inputs + static_cast<int>(i))
      throw ParseError("arch file: node id mismatch at " + at + ".node");
    out.push_back(c);
  }
  return out;
}

inline nlohmann::json spec_to_json(const EssCellSpec& s) {
  return {{"d", s.d}, {"n_intra", s.n_intra}, {"m", s.m}, {"n_inter", s.n_inter},
          {"mode", mode_name(s.mode)}};
}

inline EssCellSpec spec_from_json(const nlohmann::json& j, const std::string& where) {
  EssCellSpec s;
  s.d = need(j, "d", where).get<std::size_t>();
  s.n_intra = need(j, "n_intra", where).get<std::size_t>();
  s.m = need(j, "m", where).get<std::size_t>();
  s.n_inter = need(j, "n_inter", where).get<std::size_t>();
  try {
    s.mode = mode_from_name(need(j, "mode", where).get<std::string>());
  } catch (const ConfigError& e) {
    throw ParseError(std::string("arch file: ") + e.what() + " at " + where + ".mode");
  }
  return s;
}

}  // namespace detail

inline nlohmann::json arch_to_json(const DerivedArch& arch) {
  nlohmann::json j;
  j["version"] = kArchFileVersion;
  j["spec"] = detail::spec_to_json(arch.spec);
  j["intra"] = detail::choices_to_json(arch.intra, 1);
  j["inter_f"] = detail::choices_to_json(arch.inter_f, static_cast<int>(arch.spec.m));
  j["inter_g"] = detail::choices_to_json(arch.inter_g, static_cast<int>(arch.spec.m));
  j["provenance"] = {{"corpus", arch.provenance.corpus},
                     {"seed", arch.provenance.seed},
                     {"config_digest", arch.provenance.config_digest}};
  if (!arch.warnings.empty()) j["warnings"] = arch.warnings;
  return j;
}

inline DerivedArch arch_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("arch file: top level must be an object");
  const auto& ver = detail::need(j, "version", "$");
  if (!ver.is_number_integer() || ver.get<int>() != kArchFileVersion)
    throw ParseError("arch file: unsupported version " + ver.dump());
  DerivedArch arch;
  arch.spec = detail::spec_from_json(detail::need(j, "spec", "$"), "spec");
  arch.intra = detail::choices_from_json(detail::need(j, "intra", "$"), 1, "intra");
  arch.inter_f =
      detail::choices_from_json(detail::need(j, "inter_f", "$"), static_cast<int>(arch.spec.m), "inter_f");
  arch.inter_g =
      detail::choices_from_json(detail::need(j, "inter_g", "$"), static_cast<int>(arch.spec.m), "inter_g");
  if (j.contains("provenance")) {
    const auto& p = j["provenance"];
    arch.provenance.corpus = p.value("corpus", std::string());
    arch.provenance.seed = p.value("seed", std::uint64_t(0));
    arch.provenance.config_digest = p.value("config_digest", std::string());
  } else {
    arch.warnings.push_back("provenance missing; loaded with empty provenance");
  }
  if (j.contains("warnings"))
    for (const auto& w : j["warnings"]) arch.warnings.push_back(w.get<std::string>());
  arch.validate();
  return arch;
}

inline std::string arch_to_text(const DerivedArch& arch) { return arch_to_json(arch).dump(2) + "\n"; }

inline DerivedArch arch_from_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("arch file: ") + e.what());
  }
  return arch_from_json(j);
}

inline void save_arch(const DerivedArch& arch, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write arch file: " + path);
  out << arch_to_text(arch);
}

inline DerivedArch load_arch(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read arch file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return arch_from_text(ss.str());
}

// ---- DOT export ----

namespace detail {

inline void dot_section(std::ostream& out, const std::string& tag, const std::string& label,
                        const std::vector<ArchChoice>& sec, int num_inputs) {
  out << "  subgraph cluster_" << tag << " {\n";
  out << "    label=\"" << label << "\";\n";
  for (int i = 0; i < num_inputs; ++i)
    out << "    " << tag << "_e" << (i + 1) << " [label=\"e" << (i + 1) << "\" shape=box];\n";
  for (std::size_t i = 0; i < sec.size(); ++i)
    out << "    " << tag << "_s" << (i + 1) << " [label=\"s" << (i + 1) << "\"];\n";
  out << "    " << tag << "_out [label=\"avg\" shape=doublecircle];\n";
  auto node_ref = [&](int global) {
    if (global < num_inputs) return tag + "_e" + std::to_string(global + 1);
    return tag + "_s" + std::to_string(global - num_inputs + 1);
  };
  for (std::size_t i = 0; i < sec.size(); ++i)
    out << "    " << node_ref(sec[i].pred) << " -> " << tag << "_s" << (i + 1) << " [label=\""
        << act_name(sec[i].op) << "\"];\n";
  for (std::size_t i = 0; i < sec.size(); ++i)
    out << "    " << tag << "_s" << (i + 1) << " -> " << tag << "_out [label=\"avg\"];\n";
  out << "  }\n";
}

}  // namespace detail

// Renders the derived cell as a DOT digraph: one cluster per component,
// op-labeled edges, and the averaging output node. Output is deterministic.
inline std::string export_dot(const DerivedArch& arch) {
  std::ostringstream out;
  out << "digraph cell {\n  rankdir=LR;\n";
  detail::dot_section(out, "intra", "intra cell", arch.intra, 1);
  if (!arch.inter_f.empty()) {
    detail::dot_section(out, "f", "hidden gate f", arch.inter_f, static_cast<int>(arch.spec.m));
    detail::dot_section(out, "g", "input gate g", arch.inter_g, static_cast<int>(arch.spec.m));
  }
  out << "}\n";
  return out.str();
}

// ---- retraining ----

struct TrainConfig {
  std::size_t steps = 600;
  double lr = 1.0;
  std::size_t batch = 16;
  std::size_t bptt = 32;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
};

// Retraining diverged; the loss curve so far rides along.
struct RetrainDivergence : NumericError {
  std::vector<double> train_losses;
  RetrainDivergence(const std::string& msg, std::vector<double> losses)
      : NumericError(msg), train_losses(std::move(losses)) {}
};

template <class Real>
struct RetrainResult {
  FixedLm<Real> model;
  EvalReport valid, test;
  std::vector<double> train_losses;
};

// Builds the discrete model for `arch`, trains its weights from scratch on
// the corpus train split, and reports validation/test perplexity.
template <class Real>
RetrainResult<Real> retrain(const DerivedArch& arch, const Corpus& corpus, const TrainConfig& cfg) {
  if (cfg.steps < 1 || cfg.bptt < 1 || cfg.batch < 1) throw ConfigError("train config values must be positive");
  FixedLm<Real> model = make_fixed_lm<Real>(arch, corpus.vocab_size(), cfg.seed);
  ParamPartition<Real> part = make_partition(model);
  Sgd<Real> sgd(cfg.lr);
  BatchStream train(corpus.split(Split::train), cfg.batch);
  Carried<Real> state = model.initial_state(cfg.batch);
  Tape<Real> tape;
  std::vector<double> losses;
  losses.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    WindowBatch w;
    if (train.next_window(cfg.bptt, w)) state = model.initial_state(cfg.batch);
    tape.clear();
    Var loss = model.window_loss(tape, state, w);
    const double lv = tape.scalar_value(loss);
    if (!std::isfinite(lv))
      throw RetrainDivergence("retraining diverged at step " + std::to_string(step), std::move(losses));
    losses.push_back(lv);
    zero_grads<Real>(part.model);
    tape.backward(loss);
    clip_global_norm<Real>(part.model, cfg.clip_norm);
    sgd.step(part.model);
  }
  RetrainResult<Real> result{std::move(model), {}, {}, std::move(losses)};
  result.valid.split = "valid";
  result.test.split = "test";
  if (corpus.split(Split::valid).size() >= 2)
    result.valid = perplexity(result.model, corpus, Split::valid, cfg.bptt);
  if (corpus.split(Split::test).size() >= 2)
    result.test = perplexity(result.model, corpus, Split::test, cfg.bptt);
  return result;
}

}  // namespace ess
