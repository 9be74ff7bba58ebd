#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "ess/derive.hpp"

namespace ess {

// Per-word mean loss difference between two models (B minus A; negative means
// B improved on that word). `count` is the number of scored occurrences of
// the word as a prediction target on the analysis split.
struct WordLossDelta {
  std::string word;
  long count = 0;
  double delta = 0;
};

struct DeltaReport {
  std::string split;
  std::vector<WordLossDelta> rows;           // all scored words, by ascending delta
  std::vector<WordLossDelta> most_improved;  // k best improvements
  std::vector<WordLossDelta> most_frequent;  // k most frequent words
  double total_a = 0, total_b = 0;           // summed losses (nats)
  std::size_t tokens = 0;
};

// Loss decomposition over words: for every scored target position the loss
// difference accrues to the target word. Losses are in nats; the split's
// hidden state is carried in evaluation order for both models.
template <class Real, class DagA, class DagB>
DeltaReport word_loss_delta(const RnnLm<Real, DagA>& model_a, const RnnLm<Real, DagB>& model_b,
                            const Corpus& corpus, Split split, std::size_t k = 8) {
  if (model_a.vocab != corpus.vocab_size() || model_b.vocab != corpus.vocab_size())
    throw ContractError("word_loss_delta models must share the corpus vocabulary");
  const auto la = stream_token_losses(model_a, corpus, split);
  const auto lb = stream_token_losses(model_b, corpus, split);
  const auto& ids = corpus.split(split);

  std::vector<double> diff_sum(corpus.vocab_size(), 0.0);
  std::vector<long> count(corpus.vocab_size(), 0);
  StableSum total_a, total_b;
  for (std::size_t i = 0; i < la.size(); ++i) {
    const auto target = static_cast<std::size_t>(ids[i + 1]);
    diff_sum[target] += lb[i] - la[i];
    ++count[target];
    total_a.add(la[i]);
    total_b.add(lb[i]);
  }

  DeltaReport rep;
  rep.split = split_name(split);
  rep.total_a = total_a.value();
  rep.total_b = total_b.value();
  rep.tokens = la.size();
  for (std::size_t w = 0; w < corpus.vocab_size(); ++w)
    if (count[w] > 0)
      rep.rows.push_back({corpus.vocab[w], count[w], diff_sum[w] / static_cast<double>(count[w])});
  std::sort(rep.rows.begin(), rep.rows.end(), [](const auto& a, const auto& b) {
    if (a.delta != b.delta) return a.delta < b.delta;
    return a.word < b.word;
  });
  for (std::size_t i = 0; i < rep.rows.size() && i < k; ++i) rep.most_improved.push_back(rep.rows[i]);
  auto by_count = rep.rows;
  std::sort(by_count.begin(), by_count.end(), [](const auto& a, const auto& b) {
    if (a.count != b.count) return a.count > b.count;
    return a.word < b.word;
  });
  for (std::size_t i = 0; i < by_count.size() && i < k; ++i) rep.most_frequent.push_back(by_count[i]);
  return rep;
}

// ---- node-count sensitivity sweep ----

struct SweepPoint {
  std::size_t n_intra = 4;
  std::size_t n_inter = 3;
};

struct SweepRow {
  SweepPoint point;
  std::size_t d = 0;
  std::size_t params = 0;
  double valid_ppl = 0;
};

// Trainable-parameter count of the relaxed model for a candidate spec.
template <class Real>
std::size_t relaxed_param_count(EssCellSpec spec, std::size_t vocab) {
  auto model = make_relaxed_lm<Real>(spec, vocab, 0);
  return model.param_count();
}

// Picks the hidden width whose parameter count comes closest to the budget.
template <class Real>
std::size_t matched_width(EssCellSpec spec, std::size_t vocab, std::size_t budget) {
  std::size_t lo = 1, hi = 1;
  auto count = [&](std::size_t d) {
    spec.d = d;
    return relaxed_param_count<Real>(spec, vocab);
  };
  while (count(hi) < budget && hi < (1u << 14)) hi *= 2;
  while (lo + 1 < hi) {
    const std::size_t mid = (lo + hi) / 2;
    if (count(mid) < budget) lo = mid;
    else hi = mid;
  }
  const std::size_t d = (budget - count(lo) <= count(hi) - budget) ? lo : hi;
  if (d < 4)
    throw ConfigError("parameter budget " + std::to_string(budget) + " is infeasible (width " +
                      std::to_string(d) + " < 4)");
  return d;
}

// Work-stealing index loop shared by the sweep; non-template so the lambda
// handed to std::thread is a plain std::function.
inline void parallel_indices(std::size_t count, std::size_t threads,
                             const std::function<void(std::size_t)>& fn) {
  std::atomic<std::size_t> cursor{0};
  std::function<void()> drain = [&]() {
    for (;;) {
      const std::size_t i = cursor.fetch_add(1);
      if (i >= count) return;
      fn(i);
    }
  };
  const std::size_t n = std::min(threads > 0 ? threads : 1, count);
  if (n <= 1) {
    drain();
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(n);
  for (std::size_t t = 0; t < n; ++t) pool.emplace_back(drain);
  for (auto& t : pool) t.join();
}

// One search + retrain per (n_intra, n_inter) configuration under a shared
// parameter budget, width-adjusted. Rows come back in input order; `threads`
// sweeps points concurrently with fully isolated state.
template <class Real>
std::vector<SweepRow> sweep_nodes(const Corpus& corpus, const EssCellSpec& base,
                                  const SearchConfig& search_cfg, const TrainConfig& train_cfg,
                                  const std::vector<SweepPoint>& points, std::size_t budget,
                                  std::size_t threads = 1) {
  if (points.empty()) throw ConfigError("sweep needs at least one configuration");
  std::vector<SweepRow> rows(points.size());
  parallel_indices(points.size(), threads, [&](std::size_t i) {
    EssCellSpec spec = base;
    spec.n_intra = points[i].n_intra;
    spec.n_inter = points[i].n_inter;
    spec.d = matched_width<Real>(spec, corpus.vocab_size(), budget);
    auto model = make_relaxed_lm<Real>(spec, corpus.vocab_size(), search_cfg.seed);
    joint_learn(model, corpus, search_cfg);
    DerivedArch arch = derive(model, Provenance{corpus.source, search_cfg.seed, ""});
    auto result = retrain<Real>(arch, corpus, train_cfg);
    rows[i] = SweepRow{points[i], spec.d, model.param_count(), result.valid.perplexity};
  });
  return rows;
}

// ---- report writers ----

inline void write_eval_csv(std::ostream& out, const std::vector<EvalReport>& reports,
                           const std::string& digest) {
  if (!digest.empty()) out << "# config_digest=" << digest << "\n";
  out << "split,loss,perplexity,tokens\n";
  char buf[160];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof(buf), "%s,%.10g,%.10g,%zu\n", r.split.c_str(), r.loss, r.perplexity,
                  r.tokens);
    out << buf;
  }
}

inline void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows,
                            const std::string& digest) {
  if (!digest.empty()) out << "# config_digest=" << digest << "\n";
  out << "n_intra,n_inter,d,params,valid_ppl\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%zu,%zu,%.10g\n", r.point.n_intra, r.point.n_inter, r.d,
                  r.params, r.valid_ppl);
    out << buf;
  }
}

inline void write_delta_tsv(std::ostream& out, const DeltaReport& rep, const std::string& digest) {
  out << "# split=" << rep.split << " units=nats (delta = model_b loss - model_a loss per occurrence)\n";
  if (!digest.empty()) out << "# config_digest=" << digest << "\n";
  out << "word\tcount\tdelta\n";
  char buf[256];
  for (const auto& r : rep.rows) {
    std::snprintf(buf, sizeof(buf), "%s\t%ld\t%.10g\n", r.word.c_str(), r.count, r.delta);
    out << buf;
  }
}

}  // namespace ess
