// Minimal end-to-end walkthrough: search a small relaxed model on the
// bundled corpus for a handful of steps, derive the discrete cell, and print
// it as DOT. Run from the repository root:
//
//   ./build/demos/tiny_search_demo data/tiny

#include <cstdio>

#include "ess/derive.hpp"
#include "ess/lmtask.hpp"
#include "ess/search.hpp"

int main(int argc, char** argv) {
  const std::string corpus_path = argc > 1 ? argv[1] : "data/tiny";
  ess::Corpus corpus = ess::load_corpus(corpus_path);
  std::printf("corpus: %zu train tokens, vocab %zu\n", corpus.split(ess::Split::train).size(),
              corpus.vocab_size());

  ess::EssCellSpec spec;
  spec.d = 32;
  spec.n_intra = 4;
  spec.m = 2;
  spec.n_inter = 3;
  spec.mode = ess::Mode::joint;

  ess::SearchConfig cfg;
  cfg.rounds = 1;
  cfg.step_cap = 40;
  cfg.batch = 8;
  cfg.bptt_len = 16;

  auto model = ess::make_relaxed_lm<double>(spec, corpus.vocab_size(), cfg.seed);
  ess::SearchTrace trace = ess::joint_learn(model, corpus, cfg);
  std::printf("search: %zu steps, final train loss %.4f\n", trace.records.size(),
              trace.records.back().train_loss);

  ess::DerivedArch arch = ess::derive(model, {corpus.source, cfg.seed, ""});
  std::printf("%s", ess::export_dot(arch).c_str());
  return 0;
}
