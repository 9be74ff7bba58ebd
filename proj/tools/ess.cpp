#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ess/checkpoint.hpp"
#include "ess/config.hpp"
#include "ess/corpus.hpp"
#include "ess/derive.hpp"
#include "ess/lmtask.hpp"
#include "ess/search.hpp"

namespace fs = std::filesystem;

namespace {

struct CliArgs {
  std::string arch_path;
  std::string ckpt_path;
  std::string ckpt_a, ckpt_b;
  std::string split = "valid";
};

fs::path ensure_out_dir(const ess::RunConfig& rc) {
  fs::path p(rc.get("out"));
  fs::create_directories(p);
  return p;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ess::DataError("cannot write " + path.string());
  out << text;
  if (!out) throw ess::DataError("failed writing " + path.string());
}

ess::Corpus load_configured_corpus(const ess::RunConfig& rc) {
  return ess::load_corpus(rc.get("corpus"), rc.get_u64("vocab_limit"));
}

ess::Split split_from_name(const std::string& s) {
  for (ess::Split sp : {ess::Split::train, ess::Split::valid, ess::Split::test})
    if (s == ess::split_name(sp)) return sp;
  throw ess::ConfigError("unknown split: " + s);
}

std::size_t env_threads() {
  const char* v = std::getenv("ESS_THREADS");
  if (!v || !*v) return 1;
  const long n = std::strtol(v, nullptr, 10);
  return n > 0 ? static_cast<std::size_t>(n) : 1;
}

template <class Real>
ess::CheckpointMeta base_meta(const ess::RunConfig& rc, const char* kind, std::size_t vocab) {
  ess::CheckpointMeta meta;
  meta.kind = kind;
  meta.precision = rc.get("precision");
  meta.spec = rc.cell_spec();
  meta.vocab = vocab;
  meta.corpus = rc.get("corpus");
  meta.seed = rc.get_u64("seed");
  meta.config_digest = rc.digest();
  return meta;
}

template <class Real>
int cmd_search(const ess::RunConfig& rc) {
  const fs::path out = ensure_out_dir(rc);
  const ess::Corpus corpus = load_configured_corpus(rc);
  const ess::EssCellSpec spec = rc.cell_spec();
  const ess::SearchConfig cfg = rc.search_config();
  auto model = ess::make_relaxed_lm<Real>(spec, corpus.vocab_size(), cfg.seed);

  ess::SearchTrace trace;
  try {
    trace = ess::joint_learn(model, corpus, cfg);
  } catch (const ess::SearchDivergence& e) {
    std::ostringstream ss;
    ss << "# config_digest=" << rc.digest() << "\n";
    e.trace.to_csv(ss);
    write_text_file(out / "trace.csv", ss.str());
    throw;
  }

  std::ostringstream ss;
  ss << "# config_digest=" << rc.digest() << "\n";
  trace.to_csv(ss);
  write_text_file(out / "trace.csv", ss.str());

  ess::CheckpointMeta meta = base_meta<Real>(rc, "relaxed", corpus.vocab_size());
  ess::save_checkpoint(( out / "search.ckpt").string(), meta, model);

  ess::DerivedArch arch =
      ess::derive(model, ess::Provenance{rc.get("corpus"), rc.get_u64("seed"), rc.digest()});
  ess::save_arch(arch, (out / "arch.json").string());

  std::printf("search: %zu steps, wrote %s, %s, %s\n", trace.records.size(),
              (out / "trace.csv").c_str(), (out / "search.ckpt").c_str(), (out / "arch.json").c_str());
  return 0;
}

template <class Real>
int cmd_retrain(const ess::RunConfig& rc, const CliArgs& args) {
  const fs::path out = ensure_out_dir(rc);
  const std::string arch_path = args.arch_path.empty() ? (out / "arch.json").string() : args.arch_path;
  if (!fs::exists(arch_path)) throw ess::DataError("missing arch file: " + arch_path);
  const ess::DerivedArch arch = ess::load_arch(arch_path);
  const ess::Corpus corpus = load_configured_corpus(rc);
  const ess::TrainConfig cfg = rc.train_config();

  auto result = ess::retrain<Real>(arch, corpus, cfg);

  ess::CheckpointMeta meta = base_meta<Real>(rc, "fixed", corpus.vocab_size());
  meta.spec = arch.spec;
  meta.arch = arch;
  ess::save_checkpoint((out / "model.ckpt").string(), meta, result.model);

  std::ostringstream ss;
  ess::write_eval_csv(ss, {result.valid, result.test}, rc.digest());
  write_text_file(out / "report.csv", ss.str());

  std::printf("retrain: %zu steps, valid_ppl=%.6g, test_ppl=%.6g\n", result.train_losses.size(),
              result.valid.perplexity, result.test.perplexity);
  return 0;
}

template <class Real>
int cmd_eval(const ess::RunConfig& rc, const CliArgs& args) {
  const fs::path out = ensure_out_dir(rc);
  const ess::Corpus corpus = load_configured_corpus(rc);
  const ess::Split split = split_from_name(args.split);
  const std::size_t bptt = rc.get_u64("bptt");

  std::optional<ess::DerivedArch> arch;
  if (!args.arch_path.empty()) {
    if (!fs::exists(args.arch_path)) throw ess::DataError("missing arch file: " + args.arch_path);
    arch = ess::load_arch(args.arch_path);
  }

  ess::EvalReport rep;
  if (!args.ckpt_path.empty()) {
    if (!fs::exists(args.ckpt_path)) throw ess::DataError("missing checkpoint: " + args.ckpt_path);
    const ess::CheckpointMeta meta = ess::peek_checkpoint(args.ckpt_path);
    if (arch && meta.config_digest != arch->provenance.config_digest)
      throw ess::ParseError("config digest mismatch: checkpoint " + args.ckpt_path + " has " +
                            meta.config_digest + ", arch file has " + arch->provenance.config_digest);
    if (meta.kind == "relaxed") {
      auto model = ess::load_relaxed_checkpoint<Real>(args.ckpt_path);
      rep = ess::perplexity(model, corpus, split, bptt);
    } else {
      auto model = ess::load_fixed_checkpoint<Real>(args.ckpt_path);
      rep = ess::perplexity(model, corpus, split, bptt);
    }
  } else {
    auto model = ess::make_relaxed_lm<Real>(rc.cell_spec(), corpus.vocab_size(), rc.get_u64("seed"));
    rep = ess::perplexity(model, corpus, split, bptt);
  }

  std::ostringstream ss;
  ess::write_eval_csv(ss, {rep}, rc.digest());
  write_text_file(out / "report.csv", ss.str());

  std::printf("ppl=%.10g\n", rep.perplexity);
  return 0;
}

template <class Real>
int cmd_analyze(const ess::RunConfig& rc, const CliArgs& args) {
  const fs::path out = ensure_out_dir(rc);
  const ess::Corpus corpus = load_configured_corpus(rc);
  const ess::Split split = split_from_name(args.split);
  const std::size_t k = rc.get_u64("delta_k");
  for (const std::string& p : {args.ckpt_a, args.ckpt_b})
    if (!fs::exists(p)) throw ess::DataError("missing checkpoint: " + p);

  // Either checkpoint may be relaxed or fixed; dispatch over the four combos.
  auto with_model = [&](const std::string& path, auto&& fn) {
    const ess::CheckpointMeta meta = ess::peek_checkpoint(path);
    if (meta.kind == "relaxed") fn(ess::load_relaxed_checkpoint<Real>(path));
    else fn(ess::load_fixed_checkpoint<Real>(path));
  };
  ess::DeltaReport rep;
  with_model(args.ckpt_a, [&](const auto& a) {
    with_model(args.ckpt_b, [&](const auto& b) {
      rep = ess::word_loss_delta(a, b, corpus, split, k);
    });
  });

  std::ostringstream ss;
  ess::write_delta_tsv(ss, rep, rc.digest());
  write_text_file(out / "delta.tsv", ss.str());

  std::printf("most improved (delta, count, word):\n");
  for (const auto& r : rep.most_improved) std::printf("  %.6g\t%ld\t%s\n", r.delta, r.count, r.word.c_str());
  std::printf("most frequent (delta, count, word):\n");
  for (const auto& r : rep.most_frequent) std::printf("  %.6g\t%ld\t%s\n", r.delta, r.count, r.word.c_str());
  return 0;
}

template <class Real>
int cmd_sweep(const ess::RunConfig& rc) {
  const fs::path out = ensure_out_dir(rc);
  const ess::Corpus corpus = load_configured_corpus(rc);
  const auto points = rc.sweep_points();
  if (points.empty()) throw ess::ConfigError("sweep needs a non-empty sweep= config entry");
  const std::size_t budget = rc.get_u64("budget");
  if (budget == 0) throw ess::ConfigError("sweep needs a positive budget= config entry");
  auto rows = ess::sweep_nodes<Real>(corpus, rc.cell_spec(), rc.search_config(), rc.train_config(),
                                     points, budget, env_threads());
  std::ostringstream ss;
  ess::write_sweep_csv(ss, rows, rc.digest());
  write_text_file(out / "report.csv", ss.str());
  for (const auto& r : rows)
    std::printf("sweep %zu:%zu d=%zu params=%zu valid_ppl=%.6g\n", r.point.n_intra, r.point.n_inter,
                r.d, r.params, r.valid_ppl);
  return 0;
}

int cmd_export_dot(const ess::RunConfig& rc, const CliArgs& args) {
  const fs::path out = ensure_out_dir(rc);
  const std::string arch_path = args.arch_path.empty() ? (out / "arch.json").string() : args.arch_path;
  if (!fs::exists(arch_path)) throw ess::DataError("missing arch file: " + arch_path);
  const ess::DerivedArch arch = ess::load_arch(arch_path);
  write_text_file(out / "cell.dot", ess::export_dot(arch));
  std::printf("export-dot: wrote %s\n", (out / "cell.dot").c_str());
  return 0;
}

template <class Real>
int run_command(const std::string& cmd, const ess::RunConfig& rc, const CliArgs& args) {
  if (cmd == "search") return cmd_search<Real>(rc);
  if (cmd == "retrain") return cmd_retrain<Real>(rc, args);
  if (cmd == "eval") return cmd_eval<Real>(rc, args);
  if (cmd == "analyze") return cmd_analyze<Real>(rc, args);
  if (cmd == "sweep") return cmd_sweep<Real>(rc);
  if (cmd == "export-dot") return cmd_export_dot(rc, args);
  throw ess::ConfigError("unknown command: " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ess - joint intra/inter-cell architecture search for recurrent language models"};
  app.require_subcommand(1);
  app.fallthrough(true);

  std::string config_path;
  app.add_option("--config", config_path, "key = value config file");
  // Flags that shadow config keys; flags win over the file.
  const std::vector<std::pair<std::string, std::string>> flag_keys = {
      {"--seed", "seed"},       {"--mode", "mode"},         {"--rounds", "rounds"},
      {"--out", "out"},         {"--precision", "precision"}, {"--corpus", "corpus"},
      {"--budget", "budget"},   {"--sweep", "sweep"},       {"--batch", "batch"},
      {"--bptt", "bptt"},       {"--step-cap", "step_cap"}, {"--retrain-steps", "retrain_steps"},
  };
  std::vector<std::string> flag_values(flag_keys.size());
  std::vector<CLI::Option*> flag_opts;
  for (std::size_t i = 0; i < flag_keys.size(); ++i)
    flag_opts.push_back(app.add_option(flag_keys[i].first, flag_values[i]));

  CliArgs args;
  auto* search = app.add_subcommand("search", "search architectures and derive the result");
  auto* retrain = app.add_subcommand("retrain", "train a derived architecture from scratch");
  retrain->add_option("--arch", args.arch_path, "arch file (default <out>/arch.json)");
  auto* eval = app.add_subcommand("eval", "report perplexity of a model on a split");
  eval->add_option("--ckpt", args.ckpt_path, "checkpoint to evaluate (fresh model if omitted)");
  eval->add_option("--arch", args.arch_path, "arch file to cross-check against the checkpoint");
  eval->add_option("--split", args.split, "train|valid|test (default valid)");
  auto* analyze = app.add_subcommand("analyze", "per-word loss difference between two checkpoints");
  analyze->add_option("--ckpt-a", args.ckpt_a)->required();
  analyze->add_option("--ckpt-b", args.ckpt_b)->required();
  analyze->add_option("--split", args.split, "train|valid|test (default valid)");
  auto* sweep = app.add_subcommand("sweep", "node-count sweep under a parameter budget");
  auto* export_dot = app.add_subcommand("export-dot", "render a derived cell as DOT");
  export_dot->add_option("--arch", args.arch_path, "arch file (default <out>/arch.json)");
  (void)search;
  (void)sweep;

  CLI11_PARSE(app, argc, argv);

  try {
    ess::RunConfig rc;
    if (!config_path.empty()) rc.load_file(config_path);
    for (std::size_t i = 0; i < flag_keys.size(); ++i)
      if (flag_opts[i]->count() > 0) rc.set(flag_keys[i].second, flag_values[i]);

    const std::string cmd = app.get_subcommands().front()->get_name();
    const std::string precision = rc.get("precision");
    if (precision == "f64") return run_command<double>(cmd, rc, args);
    if (precision == "f32") return run_command<float>(cmd, rc, args);
    throw ess::ConfigError("precision must be f32 or f64, got " + precision);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ess: %s\n", e.what());
    return 1;
  }
}
