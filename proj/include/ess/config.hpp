#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ess/cell.hpp"
#include "ess/derive.hpp"
#include "ess/errors.hpp"
#include "ess/lmtask.hpp"
#include "ess/rng.hpp"
#include "ess/search.hpp"

namespace ess {

// Fully resolved run configuration: defaults, then config-file entries, then
// command-line overrides (flags win). The digest hashes every resolved value
// that affects computation (everything except the output directory) and is
// stamped into all artifacts.
class RunConfig {
 public:
  RunConfig() : kv_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        {"corpus", "data/tiny"}, {"out", "out"},        {"seed", "1"},
        {"mode", "joint"},       {"precision", "f64"},  {"d", "64"},
        {"n_intra", "4"},        {"m", "2"},            {"n_inter", "3"},
        {"vocab_limit", "0"},    {"rounds", "2"},       {"lr_model", "1.0"},
        {"lr_intra", "3e-3"},    {"lr_inter", "1e-3"},  {"batch", "16"},
        {"bptt", "32"},          {"inner_patience", "3"}, {"step_cap", "250"},
        {"eval_every", "10"},    {"eval_tokens", "2048"}, {"clip_norm", "1.0"},
        {"rel_tol", "1e-3"},     {"retrain_steps", "600"}, {"retrain_lr", "1.0"},
        {"delta_k", "8"},        {"sweep", ""},         {"budget", "0"},
    };
    return d;
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
      set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
  }

  void set(const std::string& key, const std::string& value) {
    if (!defaults().count(key)) throw ConfigError("unknown config key: " + key);
    kv_[key] = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
  }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string& v = get(key);
    char* end = nullptr;
    const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0')
      throw ConfigError("config key " + key + " needs an integer, got \"" + v + "\"");
    return static_cast<std::uint64_t>(x);
  }

  double get_double(const std::string& key) const {
    const std::string& v = get(key);
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0')
      throw ConfigError("config key " + key + " needs a number, got \"" + v + "\"");
    return x;
  }

  // Stable hash of the resolved configuration; `out` is excluded because it
  // only routes artifacts.
  std::string digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [k, v] : kv_) {
      if (k == "out") continue;
      h = fnv1a64(k + "=" + v + "\n", h);
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  EssCellSpec cell_spec() const {
    EssCellSpec s;
    s.d = get_u64("d");
    s.n_intra = get_u64("n_intra");
    s.m = get_u64("m");
    s.n_inter = get_u64("n_inter");
    s.mode = mode_from_name(get("mode"));
    s.validate();
    return s;
  }

  SearchConfig search_config() const {
    SearchConfig c;
    c.rounds = get_u64("rounds");
    c.lr_model = get_double("lr_model");
    c.lr_intra = get_double("lr_intra");
    c.lr_inter = get_double("lr_inter");
    c.batch = get_u64("batch");
    c.bptt_len = get_u64("bptt");
    c.inner_patience = get_u64("inner_patience");
    c.seed = get_u64("seed");
    c.step_cap = get_u64("step_cap");
    c.eval_every = get_u64("eval_every");
    c.eval_tokens = get_u64("eval_tokens");
    c.clip_norm = get_double("clip_norm");
    c.rel_tol = get_double("rel_tol");
    c.validate();
    return c;
  }

  TrainConfig train_config() const {
    TrainConfig c;
    c.steps = get_u64("retrain_steps");
    c.lr = get_double("retrain_lr");
    c.batch = get_u64("batch");
    c.bptt = get_u64("bptt");
    c.clip_norm = get_double("clip_norm");
    c.seed = get_u64("seed");
    return c;
  }

  // Sweep points parsed from "n_intra:n_inter,n_intra:n_inter,...".
  std::vector<SweepPoint> sweep_points() const {
    const std::string& v = get("sweep");
    std::vector<SweepPoint> points;
    std::size_t i = 0;
    while (i < v.size()) {
      std::size_t j = v.find(',', i);
      if (j == std::string::npos) j = v.size();
      const std::string item = trim(v.substr(i, j - i));
      if (!item.empty()) {
        const auto colon = item.find(':');
        if (colon == std::string::npos)
          throw ConfigError("sweep entry \"" + item + "\" must be n_intra:n_inter");
        SweepPoint p;
        p.n_intra = std::strtoull(item.substr(0, colon).c_str(), nullptr, 10);
        p.n_inter = std::strtoull(item.substr(colon + 1).c_str(), nullptr, 10);
        if (p.n_intra < 2) throw ConfigError("sweep entry \"" + item + "\": n_intra must be >= 2");
        points.push_back(p);
      }
      i = j + 1;
    }
    return points;
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  std::map<std::string, std::string> kv_;
};

}  // namespace ess
