#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ess/errors.hpp"
#include "ess/tensor.hpp"

namespace ess {

// The five candidate activation ops of the search space. `drop` emits a zero
// tensor and propagates zero gradient, unlinking the two nodes it sits between.
// Enum order is load-bearing: derivation tie-breaks resolve toward the lowest
// non-drop index (identity, then sigmoid, tanh, relu).
enum class ActKind : int { drop = 0, identity = 1, sigmoid = 2, tanh = 3, relu = 4 };

inline constexpr int kNumCandidateOps = 5;

inline const char* act_name(ActKind k) {
  switch (k) {
    case ActKind::drop: return "drop";
    case ActKind::identity: return "identity";
    case ActKind::sigmoid: return "sigmoid";
    case ActKind::tanh: return "tanh";
    case ActKind::relu: return "relu";
  }
  throw ConfigError("unknown activation kind");
}

inline ActKind act_from_name(const std::string& s) {
  for (int k = 0; k < kNumCandidateOps; ++k)
    if (s == act_name(static_cast<ActKind>(k))) return static_cast<ActKind>(k);
  throw ConfigError("unknown activation kind: " + s);
}

// A trainable tensor living outside any tape. Gradients accumulate here when
// a tape the parameter participated in runs backward().
template <class Real>
struct Param {
  std::string name;
  Tensor<Real> value;
  Tensor<Real> grad;

  Param() = default;
  Param(std::string n, Tensor<Real> v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<Real>::zeros(value.shape())) {}

  void zero_grad() { grad.fill(Real(0)); }
};

// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode differentiation tape. Nodes are appended in execution order,
// which is a topological order by construction; backward() walks it in
// reverse. One tape per training window; parameters persist outside and are
// bound in via leaf().
template <class Real>
class Tape {
  enum class Op {
    leaf,           // constant or bound parameter
    matmul,         // in0 * in1
    add,            // in0 + in1
    add_n,          // sum of many same-shape inputs
    mul,            // in0 ⊙ in1
    scale_entry,    // in0[k] * in1  (scalar picked from a rank-1 vector)
    scale_const,    // c * in0
    activation,     // act(in0)
    softmax,        // stable softmax of a rank-1 vector
    cross_entropy,  // mean NLL of rank-2 logits against integer targets
    embedding,      // row gather from in0 by integer ids
    sum_all,        // scalar sum of all entries
  };

  struct Node {
    Op op;
    int in0 = -1, in1 = -1;
    std::vector<int> many;          // add_n inputs
    Tensor<Real> value;
    Param<Real>* param = nullptr;   // leaf binding (null for constants)
    ActKind act = ActKind::identity;
    std::size_t entry = 0;          // scale_entry index
    Real c = Real(1);               // scale_const factor
    std::vector<std::int32_t> ids;  // embedding ids / cross-entropy targets
    Tensor<Real> saved;             // cross-entropy per-row probabilities
  };

 public:
  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    grads_.clear();
    bound_.clear();
  }

  // Binds a parameter as a leaf. Repeated calls within one tape return the
  // same node so gradients accumulate in a single slot.
  Var leaf(Param<Real>& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return {it->second};
    Node n;
    n.op = Op::leaf;
    n.value = p.value;
    n.param = &p;
    Var v = push(std::move(n));
    bound_.emplace(&p, v.id);
    return v;
  }

  Var constant(Tensor<Real> t) {
    Node n;
    n.op = Op::leaf;
    n.value = std::move(t);
    return push(std::move(n));
  }

  const Tensor<Real>& value(Var v) const { return nodes_[v.id].value; }

  Real scalar_value(Var v) const {
    const auto& t = nodes_[v.id].value;
    if (t.numel() != 1) throw ContractError("scalar_value on tensor of shape " + t.shape_str());
    return t[0];
  }

  // Gradient of the last backward() pass w.r.t. node v (zeros if unreached).
  Tensor<Real> grad(Var v) const {
    if (static_cast<std::size_t>(v.id) < grads_.size() && !grads_[v.id].empty())
      return grads_[v.id];
    return Tensor<Real>::zeros(nodes_[v.id].value.shape());
  }

  Var matmul(Var a, Var b) {
    Node n;
    n.op = Op::matmul;
    n.in0 = a.id;
    n.in1 = b.id;
    n.value = matmul_values(value(a), value(b));
    return push(std::move(n));
  }

  Var add(Var a, Var b) {
    require_same_shape(value(a), value(b), "add");
    Node n;
    n.op = Op::add;
    n.in0 = a.id;
    n.in1 = b.id;
    n.value = value(a);
    for (std::size_t i = 0; i < n.value.numel(); ++i) n.value[i] += value(b)[i];
    return push(std::move(n));
  }

  Var add_n(std::span<const Var> xs) {
    if (xs.empty()) throw DimensionError("add_n of zero tensors");
    Node n;
    n.op = Op::add_n;
    n.value = value(xs[0]);
    n.many.push_back(xs[0].id);
    for (std::size_t t = 1; t < xs.size(); ++t) {
      require_same_shape(n.value, value(xs[t]), "add_n");
      for (std::size_t i = 0; i < n.value.numel(); ++i) n.value[i] += value(xs[t])[i];
      n.many.push_back(xs[t].id);
    }
    return push(std::move(n));
  }

  Var mul(Var a, Var b) {
    require_same_shape(value(a), value(b), "mul");
    Node n;
    n.op = Op::mul;
    n.in0 = a.id;
    n.in1 = b.id;
    n.value = value(a);
    for (std::size_t i = 0; i < n.value.numel(); ++i) n.value[i] *= value(b)[i];
    return push(std::move(n));
  }

  // out = vec[k] * x. Differentiable in both the picked entry and x.
  Var scale_entry(Var vec, std::size_t k, Var x) {
    const auto& v = value(vec);
    if (v.rank() != 1 || k >= v.numel())
      throw DimensionError("scale_entry index " + std::to_string(k) + " into " + v.shape_str());
    Node n;
    n.op = Op::scale_entry;
    n.in0 = vec.id;
    n.in1 = x.id;
    n.entry = k;
    const Real s = v[k];
    n.value = value(x);
    for (std::size_t i = 0; i < n.value.numel(); ++i) n.value[i] *= s;
    return push(std::move(n));
  }

  Var scale_const(Var x, Real c) {
    Node n;
    n.op = Op::scale_const;
    n.in0 = x.id;
    n.c = c;
    n.value = value(x);
    for (std::size_t i = 0; i < n.value.numel(); ++i) n.value[i] *= c;
    return push(std::move(n));
  }

  Var activation(ActKind k, Var x) {
    Node n;
    n.op = Op::activation;
    n.in0 = x.id;
    n.act = k;
    n.value = value(x);
    for (std::size_t i = 0; i < n.value.numel(); ++i) n.value[i] = act_forward(k, n.value[i]);
    return push(std::move(n));
  }

  Var softmax(Var x) {
    const auto& v = value(x);
    if (v.rank() != 1 || v.numel() == 0)
      throw DimensionError("softmax requires a nonempty rank-1 tensor, got " + v.shape_str());
    Node n;
    n.op = Op::softmax;
    n.in0 = x.id;
    n.value = v;
    softmax_inplace<Real>(n.value.values());
    return push(std::move(n));
  }

  // Mean negative log-likelihood (nats) of rank-2 logits [batch x V] against
  // one target id per row.
  Var cross_entropy(Var logits, std::span<const std::int32_t> targets) {
    const auto& l = value(logits);
    if (l.rank() != 2) throw DimensionError("cross_entropy expects rank-2 logits, got " + l.shape_str());
    if (targets.size() != l.rows())
      throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                           std::to_string(l.rows()) + " rows");
    const std::size_t vocab = l.cols();
    Node n;
    n.op = Op::cross_entropy;
    n.in0 = logits.id;
    n.ids.assign(targets.begin(), targets.end());
    n.saved = Tensor<Real>({l.rows(), vocab});
    double total = 0;
    for (std::size_t r = 0; r < l.rows(); ++r) {
      const std::int32_t t = n.ids[r];
      if (t < 0 || static_cast<std::size_t>(t) >= vocab)
        throw IndexError("cross_entropy target " + std::to_string(t) + " out of range for vocab " +
                         std::to_string(vocab));
      Real mx = l(r, 0);
      for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, l(r, j));
      double sum = 0;
      for (std::size_t j = 0; j < vocab; ++j) {
        const Real e = std::exp(l(r, j) - mx);
        n.saved(r, j) = e;
        sum += static_cast<double>(e);
      }
      const double lse = static_cast<double>(mx) + std::log(sum);
      for (std::size_t j = 0; j < vocab; ++j) n.saved(r, j) = static_cast<Real>(n.saved(r, j) / sum);
      total += lse - static_cast<double>(l(r, t));
    }
    n.value = Tensor<Real>::scalar(static_cast<Real>(total / static_cast<double>(l.rows())));
    if (!n.value.all_finite()) throw NumericError("cross_entropy produced a non-finite loss");
    return push(std::move(n));
  }

  // Gathers rows of a [V x d] table; gradient scatter-adds back into rows.
  Var embedding(Var table, std::span<const std::int32_t> row_ids) {
    const auto& t = value(table);
    if (t.rank() != 2) throw DimensionError("embedding table must be rank-2, got " + t.shape_str());
    Node n;
    n.op = Op::embedding;
    n.in0 = table.id;
    n.ids.assign(row_ids.begin(), row_ids.end());
    n.value = Tensor<Real>({row_ids.size(), t.cols()});
    for (std::size_t r = 0; r < n.ids.size(); ++r) {
      const std::int32_t id = n.ids[r];
      if (id < 0 || static_cast<std::size_t>(id) >= t.rows())
        throw IndexError("embedding id " + std::to_string(id) + " out of range for table " + t.shape_str());
      for (std::size_t j = 0; j < t.cols(); ++j) n.value(r, j) = t(id, j);
    }
    return push(std::move(n));
  }

  Var sum_all(Var x) {
    Node n;
    n.op = Op::sum_all;
    n.in0 = x.id;
    double s = 0;
    for (Real v : value(x).values()) s += static_cast<double>(v);
    n.value = Tensor<Real>::scalar(static_cast<Real>(s));
    return push(std::move(n));
  }

  // Reverse sweep from a scalar loss. Every reachable node receives a
  // gradient; gradients of bound parameters accumulate into Param::grad.
  void backward(Var loss) {
    const auto& lv = value(loss);
    if (lv.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + lv.shape_str());
    grads_.assign(nodes_.size(), Tensor<Real>());
    slot(loss.id) = Tensor<Real>::scalar(Real(1));
    for (int i = loss.id; i >= 0; --i) {
      if (grads_[i].empty()) continue;
      const Node& n = nodes_[i];
      const Tensor<Real>& g = grads_[i];
      switch (n.op) {
        case Op::leaf:
          break;
        case Op::matmul:
          add_matmul_nt(slot_like(n.in0), g, nodes_[n.in1].value);
          add_matmul_tn(slot_like(n.in1), nodes_[n.in0].value, g);
          break;
        case Op::add: {
          accumulate(n.in0, g);
          accumulate(n.in1, g);
          break;
        }
        case Op::add_n:
          for (int src : n.many) accumulate(src, g);
          break;
        case Op::mul: {
          auto& ga = slot_like(n.in0);
          auto& gb = slot_like(n.in1);
          const auto& a = nodes_[n.in0].value;
          const auto& b = nodes_[n.in1].value;
          for (std::size_t j = 0; j < g.numel(); ++j) {
            ga[j] += g[j] * b[j];
            gb[j] += g[j] * a[j];
          }
          break;
        }
        case Op::scale_entry: {
          const Real s = nodes_[n.in0].value[n.entry];
          const auto& x = nodes_[n.in1].value;
          auto& gv = slot_like(n.in0);
          auto& gx = slot_like(n.in1);
          double ds = 0;
          for (std::size_t j = 0; j < g.numel(); ++j) {
            ds += static_cast<double>(g[j]) * static_cast<double>(x[j]);
            gx[j] += s * g[j];
          }
          gv[n.entry] += static_cast<Real>(ds);
          break;
        }
        case Op::scale_const: {
          auto& gx = slot_like(n.in0);
          for (std::size_t j = 0; j < g.numel(); ++j) gx[j] += n.c * g[j];
          break;
        }
        case Op::activation:
          backprop_activation(n, g);
          break;
        case Op::softmax: {
          // dx = y ⊙ (g - <y, g>)
          const auto& y = n.value;
          double dot = 0;
          for (std::size_t j = 0; j < y.numel(); ++j)
            dot += static_cast<double>(y[j]) * static_cast<double>(g[j]);
          auto& gx = slot_like(n.in0);
          for (std::size_t j = 0; j < y.numel(); ++j)
            gx[j] += y[j] * (g[j] - static_cast<Real>(dot));
          break;
        }
        case Op::cross_entropy: {
          const Real scale = g[0] / static_cast<Real>(n.saved.rows());
          auto& gx = slot_like(n.in0);
          for (std::size_t r = 0; r < n.saved.rows(); ++r) {
            for (std::size_t j = 0; j < n.saved.cols(); ++j) gx(r, j) += scale * n.saved(r, j);
            gx(r, static_cast<std::size_t>(n.ids[r])) -= scale;
          }
          break;
        }
        case Op::embedding: {
          auto& gt = slot_like(n.in0);
          for (std::size_t r = 0; r < n.ids.size(); ++r)
            for (std::size_t j = 0; j < gt.cols(); ++j)
              gt(static_cast<std::size_t>(n.ids[r]), j) += g(r, j);
          break;
        }
        case Op::sum_all: {
          auto& gx = slot_like(n.in0);
          for (std::size_t j = 0; j < gx.numel(); ++j) gx[j] += g[0];
          break;
        }
      }
    }
    for (const Node& n : nodes_)
      if (n.param) {
        // Leafs are deduplicated, so this runs once per bound parameter.
        const int id = static_cast<int>(&n - nodes_.data());
        if (!grads_[id].empty())
          for (std::size_t j = 0; j < n.param->grad.numel(); ++j) n.param->grad[j] += grads_[id][j];
      }
  }

  bool all_values_finite() const {
    for (const Node& n : nodes_)
      if (!n.value.all_finite()) return false;
    return true;
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  static void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* what) {
    if (!a.same_shape(b))
      throw DimensionError(std::string(what) + " shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
  }

  static Real act_forward(ActKind k, Real x) {
    switch (k) {
      case ActKind::drop: return Real(0);
      case ActKind::identity: return x;
      case ActKind::sigmoid: {
        if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
        const Real e = std::exp(x);
        return e / (Real(1) + e);
      }
      case ActKind::tanh: return std::tanh(x);
      case ActKind::relu: return x > Real(0) ? x : Real(0);
    }
    throw ConfigError("unknown activation kind");
  }

  void backprop_activation(const Node& n, const Tensor<Real>& g) {
    if (n.act == ActKind::drop) return;  // exactly zero contribution
    auto& gx = slot_like(n.in0);
    const auto& x = nodes_[n.in0].value;
    const auto& y = n.value;
    switch (n.act) {
      case ActKind::identity:
        for (std::size_t j = 0; j < g.numel(); ++j) gx[j] += g[j];
        break;
      case ActKind::sigmoid:
        for (std::size_t j = 0; j < g.numel(); ++j) gx[j] += g[j] * y[j] * (Real(1) - y[j]);
        break;
      case ActKind::tanh:
        for (std::size_t j = 0; j < g.numel(); ++j) gx[j] += g[j] * (Real(1) - y[j] * y[j]);
        break;
      case ActKind::relu:
        for (std::size_t j = 0; j < g.numel(); ++j)
          if (x[j] > Real(0)) gx[j] += g[j];
        break;
      case ActKind::drop:
        break;
    }
  }

  Tensor<Real>& slot(int id) {
    if (grads_[id].empty()) grads_[id] = Tensor<Real>::zeros(nodes_[id].value.shape());
    return grads_[id];
  }

  void accumulate(int id, const Tensor<Real>& g) {
    auto& s = slot(id);
    for (std::size_t j = 0; j < g.numel(); ++j) s[j] += g[j];
  }

  Tensor<Real>& slot_like(int id) { return slot(id); }

  std::vector<Node> nodes_;
  std::vector<Tensor<Real>> grads_;
  std::unordered_map<Param<Real>*, int> bound_;
};

}  // namespace ess
