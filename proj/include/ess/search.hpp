#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ess/corpus.hpp"
#include "ess/optim.hpp"

namespace ess {

// The three disjoint trainable groups: intra-cell edge weights, inter-cell
// edge weights (both gates), and everything else.
template <class Real>
struct ParamPartition {
  std::vector<Param<Real>*> w_intra;
  std::vector<Param<Real>*> w_inter;
  std::vector<Param<Real>*> model;
};

template <class Real, class Dag>
ParamPartition<Real> make_partition(RnnLm<Real, Dag>& model) {
  ParamPartition<Real> p;
  model.collect(p.w_intra, p.w_inter, p.model);
  return p;
}

struct SearchConfig {
  std::size_t rounds = 2;
  double lr_model = 1.0;
  double lr_intra = 3e-3;
  double lr_inter = 1e-3;
  std::size_t batch = 16;
  std::size_t bptt_len = 32;
  std::size_t inner_patience = 3;
  std::uint64_t seed = 1;
  std::size_t step_cap = 250;     // hard per-phase bound
  std::size_t eval_every = 10;    // convergence evaluations
  std::size_t eval_tokens = 2048; // validation slice for the monitor
  double clip_norm = 1.0;
  double rel_tol = 1e-3;

  void validate() const {
    if (rounds < 1 || batch < 1 || bptt_len < 1 || inner_patience < 1 || step_cap < 1 ||
        eval_every < 1 || lr_model <= 0 || lr_intra <= 0 || lr_inter <= 0)
      throw ConfigError("search config values must be positive");
  }
};

struct TraceRecord {
  std::size_t step;
  std::string phase;
  double train_loss;
  double valid_ppl;
  double mad_intra;
  double mad_inter;
  double seconds;
};

struct SearchTrace {
  std::vector<TraceRecord> records;

  void to_csv(std::ostream& out) const {
    out << "step,phase,train_loss,valid_ppl,mad_intra,mad_inter,seconds\n";
    char buf[256];
    for (const auto& r : records) {
      std::snprintf(buf, sizeof(buf), "%zu,%s,%.10g,%.10g,%.10g,%.10g,%.6g\n", r.step,
                    r.phase.c_str(), r.train_loss, r.valid_ppl, r.mad_intra, r.mad_inter, r.seconds);
      out << buf;
    }
  }
};

// Search diverged; the trace up to the failing step rides along.
struct SearchDivergence : NumericError {
  SearchTrace trace;
  SearchDivergence(const std::string& msg, SearchTrace t) : NumericError(msg), trace(std::move(t)) {}
};

// Mean absolute deviation of the op mixes of one weight group from uniform.
template <class Real>
double mad(std::span<Param<Real>* const> group) {
  if (group.empty()) throw ContractError("mad of an empty weight group");
  double sum = 0;
  std::size_t n = 0;
  for (auto* p : group) {
    const auto theta = softmax_values<Real>(p->value.values());
    const double u = 1.0 / static_cast<double>(theta.size());
    for (Real v : theta) sum += std::abs(static_cast<double>(v) - u);
    n += theta.size();
  }
  return sum / static_cast<double>(n);
}

// Convergence predicate over a window of evaluation losses: true once the
// loss has failed to improve by more than rel_tol (relative) for `patience`
// consecutive evaluations, or the step cap was hit.
inline bool converged(std::span<const double> evals, std::size_t patience, double rel_tol = 1e-3,
                      bool cap_reached = false) {
  if (cap_reached) return true;
  if (evals.empty()) return false;
  double best = evals[0];
  std::size_t stall = 0;
  for (std::size_t i = 1; i < evals.size(); ++i) {
    if (evals[i] < best * (1.0 - rel_tol)) {
      best = evals[i];
      stall = 0;
    } else {
      ++stall;
    }
  }
  return stall >= patience;
}

enum class Group { none, intra, inter };

inline const char* group_name(Group g) {
  switch (g) {
    case Group::none: return "model";
    case Group::intra: return "intra";
    case Group::inter: return "inter";
  }
  throw ConfigError("unknown group");
}

// Alternating two-group search. Each phase repeatedly updates the model
// weights on the train split and one edge-weight group on the validation
// split while the other group is frozen, until the phase converges.
template <class Real>
class JointSearch {
 public:
  JointSearch(RelaxedLm<Real>& model, const Corpus& corpus, SearchConfig cfg)
      : model_(model), cfg_(cfg),
        train_(corpus.split(Split::train), cfg.batch),
        valid_(checked_valid(corpus, cfg), cfg.batch),
        sgd_(cfg.lr_model),
        part_(make_partition(model)) {
    cfg_.validate();
    if (!part_.w_intra.empty()) adam_intra_.emplace(part_.w_intra, cfg.lr_intra);
    if (!part_.w_inter.empty()) adam_inter_.emplace(part_.w_inter, cfg.lr_inter);
    train_state_ = model_.initial_state(cfg.batch);
    valid_state_ = model_.initial_state(cfg.batch);
    const auto& v = corpus.split(Split::valid);
    const std::size_t n = std::min<std::size_t>(v.size(), cfg.eval_tokens);
    monitor_.emplace(std::span<const std::int32_t>(v.data(), n), std::min(cfg.batch, n / 2));
    start_ = Clock::now();
  }

  const ParamPartition<Real>& partition() const { return part_; }
  const SearchTrace& trace() const { return trace_; }

  // The full alternating schedule for the model's mode.
  SearchTrace joint_learn() {
    std::vector<Group> phases;
    switch (model_.cell.spec.mode) {
      case Mode::joint: phases = {Group::intra, Group::inter}; break;
      case Mode::intra_only: phases = {Group::intra}; break;
      case Mode::inter_only: phases = {Group::inter}; break;
      case Mode::vanilla: phases = {Group::none}; break;
    }
    for (std::size_t r = 0; r < cfg_.rounds; ++r)
      for (Group g : phases) run_phase(g);
    return trace_;
  }

  // One inner convergence loop over a single group (also the standalone
  // single-group search). Any numeric failure surfaces as a divergence
  // carrying the trace so far.
  void run_phase(Group group) {
    std::vector<double> evals;
    std::size_t phase_steps = 0;
    try {
      while (!converged(evals, cfg_.inner_patience, cfg_.rel_tol, phase_steps >= cfg_.step_cap)) {
        const double train_loss = model_step();
        const double valid_loss = arch_step(group);
        record(group, train_loss, valid_loss);
        ++phase_steps;
        if (phase_steps % cfg_.eval_every == 0) evals.push_back(monitor_eval());
      }
    } catch (const SearchDivergence&) {
      throw;
    } catch (const NumericError& e) {
      throw SearchDivergence(e.what(), trace_);
    }
  }

  // One descent step on the model weights using the next train window.
  double model_step() {
    WindowBatch w;
    if (train_.next_window(cfg_.bptt_len, w)) train_state_ = model_.initial_state(cfg_.batch);
    tape_.clear();
    Var loss = model_.window_loss(tape_, train_state_, w);
    const double lv = check_loss(tape_.scalar_value(loss), "train");
    zero_all();
    tape_.backward(loss);
    clip_global_norm<Real>(part_.model, cfg_.clip_norm);
    sgd_.step(part_.model);
    return lv;
  }

  // One first-order step on the chosen edge-weight group using the next
  // validation window. The other group receives no update.
  double arch_step(Group group) {
    WindowBatch w;
    if (valid_.next_window(cfg_.bptt_len, w)) valid_state_ = model_.initial_state(cfg_.batch);
    tape_.clear();
    Var loss = model_.window_loss(tape_, valid_state_, w);
    const double lv = check_loss(tape_.scalar_value(loss), "validation");
    if (group == Group::none) return lv;
    zero_all();
    tape_.backward(loss);
    if (group == Group::intra && adam_intra_) adam_intra_->step();
    if (group == Group::inter && adam_inter_) adam_inter_->step();
    return lv;
  }

  // Deterministic loss over the fixed validation slice.
  double monitor_eval() {
    monitor_->reset();
    Carried<Real> state = model_.initial_state(monitor_->batch());
    StableSum sum;
    std::size_t tokens = 0;
    WindowBatch w;
    while (tokens < monitor_->tokens_per_pass()) {
      monitor_->next_window(cfg_.bptt_len, w);
      tape_.clear();
      Var loss = model_.window_loss(tape_, state, w);
      sum.add(static_cast<double>(tape_.scalar_value(loss)) * static_cast<double>(w.steps * w.batch));
      tokens += w.steps * w.batch;
    }
    return sum.value() / static_cast<double>(tokens);
  }

 private:
  using Clock = std::chrono::steady_clock;

  static std::span<const std::int32_t> checked_valid(const Corpus& corpus, const SearchConfig& cfg) {
    const auto& v = corpus.split(Split::valid);
    if (v.size() < cfg.batch * 2)
      throw ConfigError("validation split of " + std::to_string(v.size()) +
                        " tokens is too small for search with batch " + std::to_string(cfg.batch));
    return v;
  }

  double check_loss(double v, const char* what) {
    if (!std::isfinite(v))
      throw SearchDivergence(std::string("non-finite ") + what + " loss at step " +
                                 std::to_string(trace_.records.size()),
                             trace_);
    return v;
  }

  void zero_all() {
    zero_grads<Real>(part_.w_intra);
    zero_grads<Real>(part_.w_inter);
    zero_grads<Real>(part_.model);
  }

  void record(Group g, double train_loss, double valid_loss) {
    TraceRecord r;
    r.step = trace_.records.size();
    r.phase = group_name(g);
    r.train_loss = train_loss;
    r.valid_ppl = std::exp(valid_loss);
    r.mad_intra = part_.w_intra.empty() ? 0.0 : mad<Real>(part_.w_intra);
    r.mad_inter = part_.w_inter.empty() ? 0.0 : mad<Real>(part_.w_inter);
    r.seconds = std::chrono::duration<double>(Clock::now() - start_).count();
    trace_.records.push_back(std::move(r));
  }

  RelaxedLm<Real>& model_;
  SearchConfig cfg_;
  BatchStream train_, valid_;
  std::optional<BatchStream> monitor_;
  Sgd<Real> sgd_;
  ParamPartition<Real> part_;
  std::optional<Adam<Real>> adam_intra_, adam_inter_;
  Carried<Real> train_state_, valid_state_;
  Tape<Real> tape_;
  SearchTrace trace_;
  Clock::time_point start_;
};

// Runs the alternating search on a fully assembled relaxed model.
template <class Real>
SearchTrace joint_learn(RelaxedLm<Real>& model, const Corpus& corpus, const SearchConfig& cfg) {
  JointSearch<Real> search(model, corpus, cfg);
  return search.joint_learn();
}

}  // namespace ess
