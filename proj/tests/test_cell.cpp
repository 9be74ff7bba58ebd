#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "ess/cell.hpp"
#include "ess/corpus.hpp"
#include "ess/optim.hpp"
#include "ess/search.hpp"
#include "oracle_helpers.hpp"

using namespace ess;

namespace {

Tensor<double> row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>::of({1, n}, std::move(v));
}

void set_identity(Param<double>& p) {
  p.value.fill(0.0);
  for (std::size_t i = 0; i < p.value.rows(); ++i) p.value(i, i) = 1.0;
}

void pin_op(Param<double>& logits, ActKind op) {
  logits.value.fill(0.0);
  logits.value[static_cast<std::size_t>(op)] = 40.0;
}

oracle::Mat mat_of(const Param<double>& p) {
  oracle::Mat m(p.value.rows(), oracle::Vec(p.value.cols()));
  for (std::size_t i = 0; i < p.value.rows(); ++i)
    for (std::size_t j = 0; j < p.value.cols(); ++j) m[i][j] = p.value(i, j);
  return m;
}

oracle::Vec vec_of(const Param<double>& p) {
  return oracle::Vec(p.value.values().begin(), p.value.values().end());
}

oracle::Vec hadamard(const oracle::Vec& a, const oracle::Vec& b) {
  oracle::Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

oracle::Vec vadd(const oracle::Vec& a, const oracle::Vec& b) {
  oracle::Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

oracle::Vec vtanh(oracle::Vec v) {
  for (auto& x : v) x = std::tanh(x);
  return v;
}

}  // namespace

TEST_CASE("intra_input") {
  Rng rng(2);
  Param<double> wh("wh", Tensor<double>::fan_in_uniform({2, 2}, 2, rng));
  Param<double> wx("wx", Tensor<double>::fan_in_uniform({2, 2}, 2, rng));
  Tape<double> tape;
  SECTION("zero inputs give zero") {
    Var e1 = intra_input(tape, tape.constant(Tensor<double>::zeros({1, 2})),
                         tape.constant(Tensor<double>::zeros({1, 2})), wh, wx);
    CHECK(tape.value(e1)[0] == 0.0);
    CHECK(tape.value(e1)[1] == 0.0);
  }
  SECTION("identity maps cancel opposite inputs") {
    set_identity(wh);
    set_identity(wx);
    Var e1 = intra_input(tape, tape.constant(row({0.7, -0.3})), tape.constant(row({-0.7, 0.3})), wh, wx);
    CHECK(tape.value(e1)[0] == 0.0);
    CHECK(tape.value(e1)[1] == 0.0);
  }
  SECTION("random case matches the formula") {
    const oracle::Vec h{0.4, -0.8}, x{-0.2, 0.5};
    Var e1 = intra_input(tape, tape.constant(row({h[0], h[1]})), tape.constant(row({x[0], x[1]})), wh, wx);
    const auto expect = vtanh(vadd(oracle::matvec(h, mat_of(wh)), oracle::matvec(x, mat_of(wx))));
    CHECK_THAT(tape.value(e1)[0], Catch::Matchers::WithinAbs(expect[0], 1e-14));
    CHECK_THAT(tape.value(e1)[1], Catch::Matchers::WithinAbs(expect[1], 1e-14));
  }
}

TEST_CASE("f_prime") {
  Rng rng(4);
  SECTION("identity gate fed ones passes h through") {
    auto gate = MixedDag<double>::inter_gate(1, 1, 2, rng, "gate_f");
    pin_op(gate.edge_logits(0, 0), ActKind::identity);
    set_identity(gate.projection(0));
    Tape<double> tape;
    Var h = tape.constant(row({0.8, -0.6}));
    std::vector<Var> window{tape.constant(row({1.0, 1.0}))};
    Var out = f_prime(tape, gate, h, window);
    CHECK_THAT(tape.value(out)[0], Catch::Matchers::WithinAbs(0.8, 1e-12));
    CHECK_THAT(tape.value(out)[1], Catch::Matchers::WithinAbs(-0.6, 1e-12));
  }
  SECTION("drop-everything gate zeroes h") {
    auto gate = MixedDag<double>::inter_gate(1, 1, 2, rng, "gate_f");
    pin_op(gate.edge_logits(0, 0), ActKind::drop);
    Tape<double> tape;
    Var h = tape.constant(row({0.8, -0.6}));
    std::vector<Var> window{tape.constant(row({0.3, 0.9}))};
    Var out = f_prime(tape, gate, h, window);
    CHECK_THAT(tape.value(out)[0], Catch::Matchers::WithinAbs(0.0, 1e-12));
    CHECK_THAT(tape.value(out)[1], Catch::Matchers::WithinAbs(0.0, 1e-12));
  }
  SECTION("m=1 sigmoid gate matches the straight-line evaluation") {
    auto gate = MixedDag<double>::inter_gate(1, 1, 2, rng, "gate_f");
    pin_op(gate.edge_logits(0, 0), ActKind::sigmoid);
    set_identity(gate.projection(0));
    Tape<double> tape;
    const oracle::Vec h{0.5, -1.1}, x{0.4, -0.7};
    std::vector<Var> window{tape.constant(row({x[0], x[1]}))};
    Var out = f_prime(tape, gate, tape.constant(row({h[0], h[1]})), window);
    for (std::size_t i = 0; i < 2; ++i)
      CHECK_THAT(tape.value(out)[i],
                 Catch::Matchers::WithinAbs(h[i] * oracle::sigmoid(x[i]), 1e-12));
  }
  SECTION("wrong window length is a contract error") {
    auto gate = MixedDag<double>::inter_gate(2, 2, 2, rng, "gate_f");
    Tape<double> tape;
    Var h = tape.constant(row({1, 2}));
    std::vector<Var> window{tape.constant(row({1, 2}))};  // gate wants 2 entries
    CHECK_THROWS_AS(f_prime(tape, gate, h, window), ContractError);
  }
}

TEST_CASE("g_prime") {
  Rng rng(6);
  SECTION("all-ones gate passes x through") {
    auto gate = MixedDag<double>::inter_gate(1, 1, 2, rng, "gate_g");
    pin_op(gate.edge_logits(0, 0), ActKind::identity);
    set_identity(gate.projection(0));
    Tape<double> tape;
    Var x = tape.constant(row({-0.2, 0.9}));
    std::vector<Var> window{tape.constant(row({1.0, 1.0}))};
    Var out = g_prime(tape, gate, x, window);
    CHECK_THAT(tape.value(out)[0], Catch::Matchers::WithinAbs(-0.2, 1e-12));
    CHECK_THAT(tape.value(out)[1], Catch::Matchers::WithinAbs(0.9, 1e-12));
  }
  SECTION("zero gate zeroes x") {
    auto gate = MixedDag<double>::inter_gate(1, 1, 2, rng, "gate_g");
    pin_op(gate.edge_logits(0, 0), ActKind::drop);
    Tape<double> tape;
    Var x = tape.constant(row({-0.2, 0.9}));
    std::vector<Var> window{tape.constant(row({0.5, 0.1}))};
    Var out = g_prime(tape, gate, x, window);
    CHECK_THAT(tape.value(out)[0], Catch::Matchers::WithinAbs(0.0, 1e-12));
    CHECK_THAT(tape.value(out)[1], Catch::Matchers::WithinAbs(0.0, 1e-12));
  }
  SECTION("m=2 random case matches the straight-line oracle") {
    auto gate = MixedDag<double>::inter_gate(2, 2, 2, rng, "gate_g");
    Rng scramble(77);
    std::vector<Param<double>*> arch, model;
    gate.collect(arch, model);
    for (auto* p : arch)
      for (auto& v : p->value.values()) v = scramble.uniform(-1, 1);
    Tape<double> tape;
    const oracle::Vec x{0.3, -0.5}, h1{0.2, 0.8}, h2{-0.6, 0.1};
    std::vector<Var> window{tape.constant(row({h1[0], h1[1]})), tape.constant(row({h2[0], h2[1]}))};
    Var out = g_prime(tape, gate, tape.constant(row({x[0], x[1]})), window);

    // Straight-line: pruned nodes s1<-e1, s2<-e2, output = mean(s1, s2).
    const oracle::Vec s1 = oracle::mixed_node_state(
        {h1}, {0}, {vec_of(gate.edge_logits(0, 0))}, {mat_of(gate.projection(0))});
    const oracle::Vec s2 = oracle::mixed_node_state(
        {h1, h2}, {1}, {vec_of(gate.edge_logits(1, 1))},
        {mat_of(gate.projection(0)), mat_of(gate.projection(1))});
    const auto expect = hadamard(x, oracle::mean_of({s1, s2}));
    for (std::size_t i = 0; i < 2; ++i)
      CHECK_THAT(tape.value(out)[i], Catch::Matchers::WithinAbs(expect[i], 1e-12));
  }
}

TEST_CASE("pruned-link invariant") {
  Rng rng(8);
  for (std::size_t m = 1; m <= 3; ++m) {
    for (std::size_t n = m; n <= m + 2; ++n) {
      auto gate = MixedDag<double>::inter_gate(m, n, 2, rng, "gate");
      for (std::size_t i = 0; i < m; ++i) {
        REQUIRE(gate.incoming(i).edges.size() == 1);
        CHECK(gate.incoming(i).edges[0].src == static_cast<int>(i));
        CHECK(gate.is_pruned_step(i));
      }
      for (std::size_t i = m; i < n; ++i) {
        CHECK_FALSE(gate.is_pruned_step(i));
        for (const auto& e : gate.incoming(i).edges) CHECK(e.src >= static_cast<int>(m));
      }
    }
  }
  CHECK_THROWS_AS(MixedDag<double>::inter_gate(3, 2, 2, rng, "bad"), ConfigError);
}

TEST_CASE("cell_step") {
  EssCellSpec spec;
  spec.d = 2;
  spec.n_intra = 2;
  spec.m = 1;
  spec.n_inter = 1;
  spec.mode = Mode::joint;

  SECTION("joint mode with pinned gates equals vanilla mode bit-for-bit") {
    Rng jr(11);
    auto joint = make_relaxed_cell<double>(spec, jr);
    EssCellSpec vspec = spec;
    vspec.mode = Mode::vanilla;
    Rng vr(12);
    auto vanilla = make_relaxed_cell<double>(vspec, vr);
    // Align the shared weights; gate weights have no counterpart.
    {
      std::vector<Param<double>*> ja, jb, jc, va, vb, vc;
      joint.collect(ja, jb, jc);
      vanilla.collect(va, vb, vc);
      std::map<std::string, Param<double>*> by_name;
      for (auto* p : va) by_name[p->name] = p;
      for (auto* p : vc) by_name[p->name] = p;
      for (auto* p : ja)
        if (by_name.count(p->name)) by_name[p->name]->value = p->value;
      for (auto* p : jc)
        if (by_name.count(p->name)) by_name[p->name]->value = p->value;
    }
    Rng data(13);
    Tape<double> t1, t2;
    HistoryVars h1, h2;
    h1.h.push_back(t1.constant(Tensor<double>::zeros({1, 2})));
    h1.x.push_back(t1.constant(Tensor<double>::zeros({1, 2})));
    h2.h.push_back(t2.constant(Tensor<double>::zeros({1, 2})));
    h2.x.push_back(t2.constant(Tensor<double>::zeros({1, 2})));
    for (int step = 0; step < 4; ++step) {
      auto x = row({data.uniform(-1, 1), data.uniform(-1, 1)});
      Var o1 = joint.step(t1, h1, t1.constant(x), GatePin::ones);
      Var o2 = vanilla.step(t2, h2, t2.constant(x));
      CHECK(t1.value(o1)[0] == t2.value(o2)[0]);
      CHECK(t1.value(o1)[1] == t2.value(o2)[1]);
    }
  }

  SECTION("first step from zero history is finite") {
    Rng rng(21);
    auto cell = make_relaxed_cell<double>(spec, rng);
    Tape<double> tape;
    HistoryVars hist;
    hist.h.push_back(tape.constant(Tensor<double>::zeros({1, 2})));
    hist.x.push_back(tape.constant(Tensor<double>::zeros({1, 2})));
    Var h1 = cell.step(tape, hist, tape.constant(row({0.4, -0.2})));
    CHECK(tape.value(h1).all_finite());
    tape.backward(tape.sum_all(h1));
    CHECK(tape.all_values_finite());
  }

  SECTION("two steps match a hand-unrolled straight-line oracle") {
    Rng rng(31);
    auto cell = make_relaxed_cell<double>(spec, rng);
    Rng scr(55);
    {
      std::vector<Param<double>*> arch, model;
      cell.collect(arch, arch, model);
      for (auto* p : arch)
        for (auto& v : p->value.values()) v = scr.uniform(-1, 1);
    }
    const oracle::Vec x1{0.6, -0.3}, x2{-0.4, 0.8}, zero{0.0, 0.0};

    Tape<double> tape;
    HistoryVars hist;
    hist.h.push_back(tape.constant(Tensor<double>::zeros({1, 2})));
    hist.x.push_back(tape.constant(Tensor<double>::zeros({1, 2})));
    Var h1v = cell.step(tape, hist, tape.constant(row({x1[0], x1[1]})));
    Var h2v = cell.step(tape, hist, tape.constant(row({x2[0], x2[1]})));

    const auto wf_logits = vec_of(cell.gate_f->edge_logits(0, 0));
    const auto wf_proj = mat_of(cell.gate_f->projection(0));
    const auto wg_logits = vec_of(cell.gate_g->edge_logits(0, 0));
    const auto wg_proj = mat_of(cell.gate_g->projection(0));
    const auto intra_logits = vec_of(cell.intra.edge_logits(0, 0));
    const auto intra_proj = mat_of(cell.intra.projection(0));
    const auto wh = mat_of(cell.proj_h);
    const auto wx = mat_of(cell.proj_x);

    auto gate = [](const oracle::Vec& in, const oracle::Vec& logits, const oracle::Mat& proj) {
      return oracle::mixed_node_state({in}, {0}, {logits}, {proj});
    };
    auto one_step = [&](const oracle::Vec& h_prev, const oracle::Vec& x_prev,
                        const oracle::Vec& x_t) {
      const auto h_hat = hadamard(h_prev, gate(x_prev, wf_logits, wf_proj));
      const auto x_hat = hadamard(x_t, gate(h_prev, wg_logits, wg_proj));
      const auto e1 = vtanh(vadd(oracle::matvec(h_hat, wh), oracle::matvec(x_hat, wx)));
      return oracle::mixed_node_state({e1}, {0}, {intra_logits}, {intra_proj});
    };
    const auto h1 = one_step(zero, zero, x1);
    const auto h2 = one_step(h1, x1, x2);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK_THAT(tape.value(h1v)[i], Catch::Matchers::WithinAbs(h1[i], 1e-12));
      CHECK_THAT(tape.value(h2v)[i], Catch::Matchers::WithinAbs(h2[i], 1e-12));
    }
  }
}

TEST_CASE("unroll") {
  EssCellSpec spec;
  spec.d = 3;
  spec.n_intra = 3;
  spec.m = 2;
  spec.n_inter = 3;
  spec.mode = Mode::joint;

  SECTION("T=1 equals a single windowed step") {
    auto model = make_relaxed_lm<double>(spec, 5, 7);
    const std::vector<std::int32_t> in{2}, tg{4};
    auto r = unroll(model, in, tg, 8);
    Tape<double> tape;
    auto carried = model.initial_state(1);
    WindowBatch w{1, 1, in, tg};
    Var loss = model.window_loss(tape, carried, w);
    CHECK(r.mean_loss == tape.scalar_value(loss));
    CHECK(r.tokens == 1);
  }

  SECTION("bptt below 1 is a configuration error") {
    auto model = make_relaxed_lm<double>(spec, 5, 7);
    const std::vector<std::int32_t> in{1, 2}, tg{2, 3};
    CHECK_THROWS_AS(unroll(model, in, tg, 0), ConfigError);
  }

  SECTION("training on a constant token decreases the loss monotonically") {
    auto model = make_relaxed_lm<double>(spec, 4, 9);
    auto part = make_partition(model);
    Sgd<double> sgd(0.5);
    std::vector<std::int32_t> stream(9, 2);
    WindowBatch w{8, 1, std::span<const std::int32_t>(stream.data(), 8),
                  std::span<const std::int32_t>(stream.data() + 1, 8)};
    Tape<double> tape;
    double prev = 1e300;
    for (int step = 0; step < 50; ++step) {
      tape.clear();
      auto carried = model.initial_state(1);
      Var loss = model.window_loss(tape, carried, w);
      const double lv = tape.scalar_value(loss);
      CHECK(lv <= prev + 1e-12);
      prev = lv;
      zero_grads<double>(part.w_intra);
      zero_grads<double>(part.w_inter);
      zero_grads<double>(part.model);
      tape.backward(loss);
      sgd.step(part.model);
    }
    CHECK(prev < std::log(4.0));
  }

  SECTION("gradients through a 3-step unroll match finite differences") {
    EssCellSpec small = spec;
    small.d = 2;
    auto model = make_relaxed_lm<double>(small, 4, 17);
    const std::vector<std::int32_t> in{1, 3, 0}, tg{3, 0, 2};
    std::vector<Param<double>*> params;
    {
      auto part = make_partition(model);
      for (auto* p : part.w_intra) params.push_back(p);
      for (auto* p : part.w_inter) params.push_back(p);
      for (auto* p : part.model) params.push_back(p);
    }
    auto forward = [&]() {
      Tape<double> tape;
      auto carried = model.initial_state(1);
      WindowBatch w{3, 1, in, tg};
      return tape.scalar_value(model.window_loss(tape, carried, w));
    };
    auto backward = [&]() {
      Tape<double> tape;
      auto carried = model.initial_state(1);
      WindowBatch w{3, 1, in, tg};
      tape.backward(model.window_loss(tape, carried, w));
    };
    auto res = oracle::check_gradients(params, forward, backward);
    INFO(res.checked << " partials");
    CHECK(res.max_rel_err < 1e-4);
  }

  SECTION("window boundaries detach gradients") {
    auto model = make_relaxed_lm<double>(spec, 6, 23);
    auto part = make_partition(model);
    std::vector<Param<double>*> params;
    for (auto* p : part.w_intra) params.push_back(p);
    for (auto* p : part.w_inter) params.push_back(p);
    for (auto* p : part.model) params.push_back(p);

    const std::vector<std::int32_t> a_in{1, 2, 3}, a_tg{2, 3, 4};
    const std::vector<std::int32_t> b_in{4, 5, 0}, b_tg{5, 0, 1};

    // Window B after window A; gradients come from B's loss only.
    auto carried = model.initial_state(1);
    {
      Tape<double> tape;
      WindowBatch wa{3, 1, a_in, a_tg};
      model.window_loss(tape, carried, wa);
    }
    auto carried_replay = carried;  // same detached values
    for (auto* p : params) p->zero_grad();
    {
      Tape<double> tape;
      WindowBatch wb{3, 1, b_in, b_tg};
      tape.backward(model.window_loss(tape, carried, wb));
    }
    std::vector<Tensor<double>> g1;
    for (auto* p : params) g1.push_back(p->grad);

    // Isolated replay of window B from the carried values alone.
    for (auto* p : params) p->zero_grad();
    {
      Tape<double> tape;
      WindowBatch wb{3, 1, b_in, b_tg};
      tape.backward(model.window_loss(tape, carried_replay, wb));
    }
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t k = 0; k < g1[i].numel(); ++k) CHECK(params[i]->grad[k] == g1[i][k]);
  }
}
