#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ess/cell.hpp"
#include "ess/errors.hpp"

namespace ess {

enum class Split { train, valid, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  throw ConfigError("unknown split");
}

// Tokenized corpus with a frequency-ordered vocabulary. Ids 0 and 1 are the
// reserved unk and eos tokens; the literal strings "<unk>" and "<eos>" in
// input files map onto them.
struct Corpus {
  static constexpr std::int32_t unk_id = 0;
  static constexpr std::int32_t eos_id = 1;

  std::vector<std::string> vocab;                      // id -> token
  std::unordered_map<std::string, std::int32_t> ids;   // token -> id
  std::array<std::vector<std::int32_t>, 3> streams;    // per split
  std::array<std::vector<long>, 3> counts;             // per split, per id
  std::string source;                                  // provenance id

  std::size_t vocab_size() const { return vocab.size(); }

  const std::vector<std::int32_t>& split(Split s) const {
    return streams[static_cast<std::size_t>(s)];
  }

  const std::vector<long>& split_counts(Split s) const {
    return counts[static_cast<std::size_t>(s)];
  }

  std::int32_t id_of(const std::string& tok) const {
    auto it = ids.find(tok);
    return it == ids.end() ? unk_id : it->second;
  }
};

namespace detail {

inline bool valid_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t extra;
    if (c < 0x80) extra = 0;
    else if ((c >> 5) == 0x6) extra = 1;
    else if ((c >> 4) == 0xe) extra = 2;
    else if ((c >> 3) == 0x1e) extra = 3;
    else return false;
    if (extra > 0 && i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k)
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
    i += extra + 1;
  }
  return true;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus file: " + path);
  std::vector<std::string> lines;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!valid_utf8(line))
      throw EncodingError("invalid UTF-8 in " + path + " at line " + std::to_string(lineno));
    lines.push_back(line);
  }
  return lines;
}

inline std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> toks;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) toks.push_back(line.substr(i, j - i));
    i = j;
  }
  return toks;
}

}  // namespace detail

// Loads a corpus. `path` may be a directory holding train/valid/test files
// ({train,valid,test}.txt or ptb.{train,valid,test}.txt) or a single file,
// which becomes the train split. The vocabulary is built from the train
// split, ordered by descending frequency then token; `vocab_limit` caps the
// total vocabulary size including the two reserved ids (0 = unlimited).
inline Corpus load_corpus(const std::string& path, std::size_t vocab_limit = 0) {
  namespace fs = std::filesystem;
  std::array<std::vector<std::string>, 3> lines;
  if (fs::is_directory(path)) {
    const std::array<const char*, 3> plain{"train.txt", "valid.txt", "test.txt"};
    const std::array<const char*, 3> ptb{"ptb.train.txt", "ptb.valid.txt", "ptb.test.txt"};
    for (int s = 0; s < 3; ++s) {
      const fs::path a = fs::path(path) / plain[s];
      const fs::path b = fs::path(path) / ptb[s];
      if (fs::exists(a)) lines[s] = detail::read_lines(a.string());
      else if (fs::exists(b)) lines[s] = detail::read_lines(b.string());
      else if (s == 0)
        throw DataError("no train split found under " + path + " (expected train.txt or ptb.train.txt)");
    }
  } else {
    lines[0] = detail::read_lines(path);
  }

  std::unordered_map<std::string, long> freq;
  long train_tokens = 0;
  for (const auto& line : lines[0])
    for (auto& tok : detail::tokenize(line)) {
      ++train_tokens;
      if (tok == "<unk>" || tok == "<eos>") continue;  // reserved
      ++freq[tok];
    }
  if (train_tokens == 0 && lines[0].empty())
    throw DataError("empty corpus file: " + path);

  Corpus c;
  c.source = path;
  c.vocab = {"<unk>", "<eos>"};
  std::vector<std::pair<std::string, long>> order(freq.begin(), freq.end());
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  const std::size_t capacity =
      vocab_limit == 0 ? order.size() : (vocab_limit > 2 ? vocab_limit - 2 : 0);
  for (std::size_t i = 0; i < order.size() && i < capacity; ++i) c.vocab.push_back(order[i].first);
  for (std::size_t i = 0; i < c.vocab.size(); ++i) c.ids[c.vocab[i]] = static_cast<std::int32_t>(i);

  for (int s = 0; s < 3; ++s) {
    auto& stream = c.streams[s];
    for (const auto& line : lines[s]) {
      for (auto& tok : detail::tokenize(line)) stream.push_back(c.id_of(tok));
      stream.push_back(Corpus::eos_id);
    }
    auto& count = c.counts[s];
    count.assign(c.vocab.size(), 0);
    for (auto id : stream) ++count[static_cast<std::size_t>(id)];
  }
  return c;
}

// Reshapes a token stream into `batch` parallel segments and serves
// consecutive BPTT windows from them. next_window returns true when the
// stream wrapped around, signalling that carried state should be reset.
class BatchStream {
 public:
  BatchStream(std::span<const std::int32_t> ids, std::size_t batch) : batch_(batch) {
    if (batch < 1) throw ConfigError("batch must be >= 1");
    seg_ = ids.size() / batch;
    if (seg_ < 2)
      throw DataError("split of " + std::to_string(ids.size()) + " tokens is too small for batch " +
                      std::to_string(batch));
    data_.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(seg_ * batch));
  }

  std::size_t batch() const { return batch_; }
  std::size_t tokens_per_pass() const { return (seg_ - 1) * batch_; }

  void reset() { cursor_ = 0; }

  bool next_window(std::size_t bptt, WindowBatch& out) {
    bool wrapped = false;
    if (cursor_ + 1 >= seg_) {
      cursor_ = 0;
      wrapped = true;
    }
    const std::size_t steps = std::min(bptt, seg_ - 1 - cursor_);
    in_buf_.resize(steps * batch_);
    tgt_buf_.resize(steps * batch_);
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t b = 0; b < batch_; ++b) {
        in_buf_[t * batch_ + b] = data_[b * seg_ + cursor_ + t];
        tgt_buf_[t * batch_ + b] = data_[b * seg_ + cursor_ + t + 1];
      }
    out = WindowBatch{steps, batch_, in_buf_, tgt_buf_};
    cursor_ += steps;
    return wrapped;
  }

 private:
  std::size_t batch_, seg_ = 0, cursor_ = 0;
  std::vector<std::int32_t> data_, in_buf_, tgt_buf_;
};

// Compensated (Neumaier) accumulator for long loss sums.
struct StableSum {
  double total = 0, comp = 0;

  void add(double v) {
    const double t = total + v;
    comp += std::abs(total) >= std::abs(v) ? (total - t) + v : (v - t) + total;
    total = t;
  }

  double value() const { return total + comp; }
};

// Evaluation summary over one split.
struct EvalReport {
  std::string split;
  double loss = 0;        // nats per token
  double perplexity = 1;  // exp(loss)
  std::size_t tokens = 0;
};

// Mean per-token loss of a model over a whole split, hidden state carried in
// evaluation order. batch > 1 trades exactness at the segment seams for
// speed; batch == 1 scores every prediction in the split.
template <class Real, class Dag>
EvalReport perplexity(const RnnLm<Real, Dag>& model, const Corpus& corpus, Split split,
                      std::size_t bptt, std::size_t batch = 1) {
  if (model.vocab != corpus.vocab_size())
    throw ContractError("model vocabulary " + std::to_string(model.vocab) + " does not match corpus " +
                        std::to_string(corpus.vocab_size()));
  const auto& ids = corpus.split(split);
  if (ids.size() < 2) throw DataError(std::string("empty ") + split_name(split) + " split");
  EvalReport rep;
  rep.split = split_name(split);
  if (batch <= 1) {
    std::span<const std::int32_t> s(ids);
    auto r = unroll(model, s.first(ids.size() - 1), s.subspan(1), bptt);
    rep.loss = r.mean_loss;
    rep.tokens = r.tokens;
  } else {
    BatchStream stream(ids, batch);
    Carried<Real> carried = model.initial_state(batch);
    Tape<Real> tape;
    StableSum sum;
    std::size_t tokens = 0;
    WindowBatch w;
    while (tokens < stream.tokens_per_pass()) {
      stream.next_window(bptt, w);
      tape.clear();
      Var loss = model.window_loss(tape, carried, w);
      sum.add(static_cast<double>(tape.scalar_value(loss)) * static_cast<double>(w.steps * w.batch));
      tokens += w.steps * w.batch;
    }
    rep.loss = sum.value() / static_cast<double>(tokens);
    rep.tokens = tokens;
  }
  rep.perplexity = std::exp(rep.loss);
  return rep;
}

// Loss of every next-token prediction in a split, in stream order.
template <class Real, class Dag>
std::vector<double> stream_token_losses(const RnnLm<Real, Dag>& model, const Corpus& corpus,
                                        Split split) {
  const auto& ids = corpus.split(split);
  if (ids.size() < 2) throw DataError(std::string("empty ") + split_name(split) + " split");
  Carried<Real> carried = model.initial_state(1);
  Tape<Real> tape;
  std::vector<double> losses;
  losses.reserve(ids.size() - 1);
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    tape.clear();
    WindowBatch w{1, 1, std::span<const std::int32_t>(&ids[i], 1),
                  std::span<const std::int32_t>(&ids[i + 1], 1)};
    Var loss = model.window_loss(tape, carried, w);
    losses.push_back(static_cast<double>(tape.scalar_value(loss)));
  }
  return losses;
}

}  // namespace ess
