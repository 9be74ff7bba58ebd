#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ess/derive.hpp"

namespace ess {

// Identity block written into every checkpoint. `kind` is "relaxed" for a
// search-stage model (edge logits included) or "fixed" for a retrained
// derived model (its architecture is embedded).
struct CheckpointMeta {
  std::string kind;
  std::string precision;  // "f32" or "f64" (values are stored as f64 either way)
  EssCellSpec spec;
  std::size_t vocab = 0;
  std::string corpus;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::optional<DerivedArch> arch;
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'E', 'S', 'S', 'C', 'K', 'P', 'T', '1'};

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ParseError("checkpoint truncated: " + path);
  return v;
}

inline void write_str(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& in, const std::string& path) {
  const auto n = read_pod<std::uint32_t>(in, path);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw ParseError("checkpoint truncated: " + path);
  return s;
}

inline nlohmann::json meta_to_json(const CheckpointMeta& m) {
  nlohmann::json j;
  j["kind"] = m.kind;
  j["precision"] = m.precision;
  j["spec"] = spec_to_json(m.spec);
  j["vocab"] = m.vocab;
  j["corpus"] = m.corpus;
  j["seed"] = m.seed;
  j["config_digest"] = m.config_digest;
  if (m.arch) j["arch"] = arch_to_json(*m.arch);
  return j;
}

inline CheckpointMeta meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  m.kind = need(j, "kind", "meta").get<std::string>();
  m.precision = need(j, "precision", "meta").get<std::string>();
  m.spec = spec_from_json(need(j, "spec", "meta"), "meta.spec");
  m.vocab = need(j, "vocab", "meta").get<std::size_t>();
  m.corpus = need(j, "corpus", "meta").get<std::string>();
  m.seed = need(j, "seed", "meta").get<std::uint64_t>();
  m.config_digest = need(j, "config_digest", "meta").get<std::string>();
  if (j.contains("arch")) m.arch = arch_from_json(j["arch"]);
  return m;
}

}  // namespace detail

// Serializes a model's parameters (in collection order) with its meta block.
template <class Real, class Dag>
void save_checkpoint(const std::string& path, const CheckpointMeta& meta, RnnLm<Real, Dag>& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::write_str(out, detail::meta_to_json(meta).dump());
  ParamPartition<Real> part = make_partition(model);
  std::vector<Param<Real>*> all;
  for (auto* p : part.w_intra) all.push_back(p);
  for (auto* p : part.w_inter) all.push_back(p);
  for (auto* p : part.model) all.push_back(p);
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(all.size()));
  for (auto* p : all) {
    detail::write_str(out, p->name);
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.rank()));
    for (std::size_t i = 0; i < p->value.rank(); ++i)
      detail::write_pod<std::uint64_t>(out, p->value.dim(i));
    for (Real v : p->value.values()) detail::write_pod<double>(out, static_cast<double>(v));
  }
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

namespace detail {

struct RawCheckpoint {
  CheckpointMeta meta;
  std::map<std::string, Tensor<double>> tensors;
};

inline RawCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw ParseError("not a checkpoint file: " + path);
  RawCheckpoint raw;
  try {
    raw.meta = meta_from_json(nlohmann::json::parse(read_str(in, path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("checkpoint meta: " + std::string(e.what()));
  }
  const auto count = read_pod<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = read_str(in, path);
    const auto rank = read_pod<std::uint32_t>(in, path);
    std::vector<std::size_t> shape;
    for (std::uint32_t r = 0; r < rank; ++r)
      shape.push_back(static_cast<std::size_t>(read_pod<std::uint64_t>(in, path)));
    Tensor<double> t(shape);
    for (std::size_t k = 0; k < t.numel(); ++k) t[k] = read_pod<double>(in, path);
    raw.tensors.emplace(name, std::move(t));
  }
  return raw;
}

template <class Real, class Dag>
void assign_params(RnnLm<Real, Dag>& model, const RawCheckpoint& raw, const std::string& path) {
  ParamPartition<Real> part = make_partition(model);
  std::vector<Param<Real>*> all;
  for (auto* p : part.w_intra) all.push_back(p);
  for (auto* p : part.w_inter) all.push_back(p);
  for (auto* p : part.model) all.push_back(p);
  if (all.size() != raw.tensors.size())
    throw ParseError("checkpoint " + path + " holds " + std::to_string(raw.tensors.size()) +
                     " tensors, model needs " + std::to_string(all.size()));
  for (auto* p : all) {
    auto it = raw.tensors.find(p->name);
    if (it == raw.tensors.end()) throw ParseError("checkpoint " + path + " missing tensor " + p->name);
    if (it->second.shape() != p->value.shape())
      throw ParseError("checkpoint tensor " + p->name + " has shape " + it->second.shape_str() +
                       ", model needs " + p->value.shape_str());
    for (std::size_t k = 0; k < p->value.numel(); ++k)
      p->value[k] = static_cast<Real>(it->second[k]);
  }
}

}  // namespace detail

inline CheckpointMeta peek_checkpoint(const std::string& path) {
  return detail::read_checkpoint(path).meta;
}

template <class Real>
RelaxedLm<Real> load_relaxed_checkpoint(const std::string& path, CheckpointMeta* meta_out = nullptr) {
  auto raw = detail::read_checkpoint(path);
  if (raw.meta.kind != "relaxed")
    throw ParseError("checkpoint " + path + " is of kind \"" + raw.meta.kind + "\", expected relaxed");
  RelaxedLm<Real> model = make_relaxed_lm<Real>(raw.meta.spec, raw.meta.vocab, raw.meta.seed);
  detail::assign_params(model, raw, path);
  if (meta_out) *meta_out = raw.meta;
  return model;
}

template <class Real>
FixedLm<Real> load_fixed_checkpoint(const std::string& path, CheckpointMeta* meta_out = nullptr) {
  auto raw = detail::read_checkpoint(path);
  if (raw.meta.kind != "fixed")
    throw ParseError("checkpoint " + path + " is of kind \"" + raw.meta.kind + "\", expected fixed");
  if (!raw.meta.arch) throw ParseError("fixed checkpoint " + path + " lacks an embedded architecture");
  FixedLm<Real> model = make_fixed_lm<Real>(*raw.meta.arch, raw.meta.vocab, raw.meta.seed);
  detail::assign_params(model, raw, path);
  if (meta_out) *meta_out = raw.meta;
  return model;
}

}  // namespace ess
