#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "smoe/routing.hpp"

using namespace smoe;

namespace {

RealMatrix random_matrix(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  RealMatrix m(r, c);
  for (double& v : m.data) v = rng.uniform(lo, hi);
  return m;
}

// Make gate `gate` of an SMoE block produce fixed logits for every token:
// zero the LayerNorm gain so x' collapses to the bias vector b = e_1, and
// write the desired logit into column 1 of each gate weight row.
void force_gate_logits(ParameterStore& store, const SmoeBlockParams& bp, int gate,
                       const std::vector<double>& logits) {
  RealMatrix& gain = store.at(bp.ln_gain[gate - 1]).value;
  RealMatrix& bias = store.at(bp.ln_bias[gate - 1]).value;
  gain.fill(0.0);
  bias.fill(0.0);
  bias.at(0, 0) = 1.0;
  RealMatrix& w = store.at(bp.gate_w[gate - 1]).value;
  REQUIRE(static_cast<int>(logits.size()) == w.rows);
  w.fill(0.0);
  for (int e = 0; e < w.rows; ++e) w.at(e, 0) = logits[e];
}

}  // namespace

TEST_CASE("select_topk orders by probability with low-index tie break") {
  {
    const double p[] = {0.2, 0.5, 0.3};
    const std::vector<int> top = select_topk(p, 3, 2);
    CHECK(top == std::vector<int>{1, 2});
  }
  {
    const double p[] = {0.25, 0.25, 0.25, 0.25};
    CHECK(select_topk(p, 4, 2) == std::vector<int>{0, 1});
  }
  {
    const double p[] = {0.1, 0.2, 0.7};
    CHECK(select_topk(p, 3, 1) == std::vector<int>{2});
  }
}

TEST_CASE("capacity quota is ceil(2T/E)") {
  CHECK(capacity_quota(8, 16) == 1);
  CHECK(capacity_quota(16, 16) == 2);
  CHECK(capacity_quota(3, 4) == 2);
  CHECK(capacity_quota(1, 8) == 1);
}

TEST_CASE("apply_capacity drops overflow on a collapsed gate") {
  // 8 tokens all pick expert 3 first; quota 1 leaves 7 first-choice drops
  std::vector<RouteDecision> ds(8);
  for (auto& d : ds) d.choices.push_back({3, 0.9, false});
  apply_capacity(ds, 16);
  int drops = 0;
  for (const auto& d : ds) drops += d.choices[0].dropped;
  CHECK(drops == 7);
  CHECK(ds[0].choices[0].dropped == false);  // ascending token order fills first
}

TEST_CASE("apply_capacity matches an independent counting simulation") {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const int T = 1024, E = 16;
    std::vector<RouteDecision> ds(T);
    for (auto& d : ds) {
      const int first = rng.uniform_int(1, E);
      int second = rng.uniform_int(1, E - 1);
      if (second >= first) ++second;
      d.choices.push_back({first, 0.6, false});
      d.choices.push_back({second, 0.3, false});
    }
    std::vector<RouteDecision> expect = ds;
    apply_capacity(ds, E);

    // independent simulation: first-choice pass then second-choice pass,
    // ascending token order, shared quota counter
    const int quota = (2 * T + E - 1) / E;
    std::vector<int> load(E + 1, 0);
    for (int rank = 0; rank < 2; ++rank) {
      for (auto& d : expect) {
        RouteChoice& ch = d.choices[rank];
        if (load[ch.expert_id] < quota) {
          ++load[ch.expert_id];
        } else {
          ch.dropped = true;
        }
      }
    }
    for (int r = 0; r < T; ++r)
      for (int c = 0; c < 2; ++c) CHECK(ds[r].choices[c].dropped == expect[r].choices[c].dropped);
  }
}

TEST_CASE("single-stratum block routes every token exactly once") {
  Rng rng(42);
  ParameterStore store;
  SmoeBlockParams bp = SmoeBlockParams::create(store, "blk", parse_layout("8"), 8, 16, 2, rng);
  Tape t;
  RoutingOptions opt;
  opt.collect_traces = true;
  BlockOutput out = run_smoe_block(t, store, bp, t.leaf(random_matrix(12, 8, rng)), opt);
  for (const TokenRoute& tr : out.tokens) {
    CHECK(tr.hops == 1);
    CHECK(tr.trace.size() == 1);
    CHECK(tr.expert_evals <= 2);
  }
}

TEST_CASE("tokens whose top choices sit in a later stratum exit in one hop") {
  Rng rng(43);
  ParameterStore store;
  SmoeBlockParams bp = SmoeBlockParams::create(store, "blk", parse_layout("2-2"), 8, 16, 2, rng);
  force_gate_logits(store, bp, 1, {0.0, 0.0, 10.0, 9.0});  // experts 3 and 4: stratum 2
  Tape t;
  RoutingOptions opt;
  opt.collect_traces = true;
  BlockOutput out = run_smoe_block(t, store, bp, t.leaf(random_matrix(6, 8, rng)), opt);
  for (const TokenRoute& tr : out.tokens) {
    CHECK(tr.hops == 1);
    CHECK(tr.trace[0].second.target_stratum == 2);
    CHECK(tr.trace[0].second.choices[0].expert_id == 3);
    CHECK(tr.trace[0].second.choices[1].expert_id == 4);
  }
}

TEST_CASE("two-hop route matches a straight-line recomputation") {
  Rng rng(44);
  const int d = 6, dff = 10;
  ParameterStore store;
  SmoeBlockParams bp = SmoeBlockParams::create(store, "blk", parse_layout("4-4"), d, dff, 2, rng);
  // gate 1 ranks expert 2 (stratum 1) first and expert 6 (stratum 2) second
  force_gate_logits(store, bp, 1, {0.0, 5.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0});
  // gate 2 sees experts 5..8; rank expert 7 then expert 5
  force_gate_logits(store, bp, 2, {1.0, 0.0, 3.0, 0.0});

  RealMatrix x = random_matrix(1, d, rng);
  Tape t;
  RoutingOptions opt;
  opt.collect_traces = true;
  BlockOutput out = run_smoe_block(t, store, bp, t.leaf(x), opt);
  REQUIRE(out.tokens[0].hops == 2);
  REQUIRE(out.tokens[0].expert_evals == 4);
  CHECK(out.tokens[0].trace[0].first == 1);
  CHECK(out.tokens[0].trace[1].first == 2);
  CHECK(out.tokens[0].trace[0].second.target_stratum == 1);
  CHECK(out.tokens[0].trace[1].second.target_stratum == 2);

  // manual recomputation of both hops
  auto ln = [&](const RealMatrix& in, const std::string& gname, const std::string& bname) {
    const RealMatrix& gain = store.at(gname).value;
    const RealMatrix& bias = store.at(bname).value;
    RealMatrix o(1, d);
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < d; ++j) mean += in.at(0, j);
    mean /= d;
    for (int j = 0; j < d; ++j) var += (in.at(0, j) - mean) * (in.at(0, j) - mean);
    var /= d;
    const double is = 1.0 / std::sqrt(var + 1e-5);
    for (int j = 0; j < d; ++j)
      o.at(0, j) = gain.at(0, j) * (in.at(0, j) - mean) * is + bias.at(0, j);
    return o;
  };
  auto ffn = [&](const RealMatrix& in, int expert_id) {
    const RealMatrix& w1 = store.at(bp.experts[expert_id - 1].w1_name).value;
    const RealMatrix& w2 = store.at(bp.experts[expert_id - 1].w2_name).value;
    RealMatrix hidden = matmul_nt(in, w2);
    for (double& v : hidden.data) v = v > 0.0 ? v : 0.0;
    return matmul_nt(hidden, w1);
  };
  auto gate_probs = [&](const RealMatrix& xn, int gate) {
    RealMatrix logits = matmul_nt(xn, store.at(bp.gate_w[gate - 1]).value);
    double mx = logits.at(0, 0);
    for (double v : logits.data) mx = std::max(mx, v);
    double s = 0.0;
    for (double& v : logits.data) {
      v = std::exp(v - mx);
      s += v;
    }
    for (double& v : logits.data) v /= s;
    return logits;
  };

  RealMatrix cur = x;
  // hop 1: gate 1, combine experts 2 and 6 with raw softmax weights
  RealMatrix xn = ln(cur, bp.ln_gain[0], bp.ln_bias[0]);
  RealMatrix p1 = gate_probs(xn, 1);
  RealMatrix y1(1, d);
  add_acc(y1, ffn(xn, 2), p1.at(0, 1));
  add_acc(y1, ffn(xn, 6), p1.at(0, 5));
  add_acc(y1, cur);
  cur = y1;
  // hop 2: gate 2 over experts 5..8, combine experts 7 and 5
  RealMatrix xn2 = ln(cur, bp.ln_gain[1], bp.ln_bias[1]);
  RealMatrix p2 = gate_probs(xn2, 2);
  RealMatrix y2(1, d);
  add_acc(y2, ffn(xn2, 7), p2.at(0, 2));
  add_acc(y2, ffn(xn2, 5), p2.at(0, 0));
  add_acc(y2, cur);

  const RealMatrix& got = t.value(out.output);
  for (int j = 0; j < d; ++j) CHECK(got.at(0, j) == doctest::Approx(y2.at(0, j)).epsilon(1e-10));

  // combine weights in the trace are the raw softmax entries, not renormalized
  const RouteDecision& d1 = out.tokens[0].trace[0].second;
  CHECK(d1.choices[0].weight == doctest::Approx(p1.at(0, 1)).epsilon(1e-12));
  CHECK(d1.choices[1].weight == doctest::Approx(p1.at(0, 5)).epsilon(1e-12));
  CHECK(d1.choices[0].weight + d1.choices[1].weight < 1.0);
}

TEST_CASE("fully dropped tokens pass through unchanged") {
  Rng rng(45);
  ParameterStore store;
  SmoeBlockParams bp = SmoeBlockParams::create(store, "blk", parse_layout("8"), 8, 16, 2, rng);
  // 16 identical tokens all pick the same two experts; quota ceil(32/8)=4
  RealMatrix x(16, 8);
  RealMatrix row = random_matrix(1, 8, rng);
  for (int r = 0; r < 16; ++r)
    std::copy(row.data.begin(), row.data.end(), x.row(r));
  Tape t;
  RoutingOptions opt;
  opt.collect_traces = true;
  BlockOutput out = run_smoe_block(t, store, bp, t.leaf(x), opt);
  int fully_dropped = 0;
  for (int r = 0; r < 16; ++r) {
    const RouteDecision& d = out.tokens[r].trace[0].second;
    bool all_dropped = true;
    for (const RouteChoice& ch : d.choices) all_dropped = all_dropped && ch.dropped;
    if (all_dropped) {
      ++fully_dropped;
      CHECK(out.tokens[r].expert_evals == 0);
      for (int j = 0; j < 8; ++j)
        CHECK(t.value(out.output).at(r, j) == x.at(r, j));  // pure residual
    }
  }
  // tokens 0..3 claim both experts' quota-4 slots, leaving 12 fully dropped
  CHECK(fully_dropped == 12);
}

TEST_CASE("randomized property suite: monotone strata, bounded hops, capacity") {
  Rng rng(46);
  int trials = 0;
  while (trials < 1000) {
    StratumLayout layout;
    const int L = rng.uniform_int(1, 4);
    for (int i = 0; i < L; ++i) layout.sizes.push_back(rng.uniform_int(1, 4));
    const int d = 8;
    ParameterStore store;
    Rng init(rng.next_u64());
    SmoeBlockParams bp = SmoeBlockParams::create(store, "blk", layout, d, 12, 2, init);
    const int T = rng.uniform_int(1, 12);
    Tape t;
    RoutingOptions opt;
    opt.collect_traces = true;
    BlockOutput out = run_smoe_block(t, store, bp, t.leaf(random_matrix(T, d, init, -2.0, 2.0)), opt);
    CHECK(t.value(out.output).all_finite());

    // per-gate tallies recomputed from traces
    std::vector<int> gate_tokens(L + 1, 0);
    std::vector<std::vector<int>> gate_load(L + 1, std::vector<int>(layout.total() + 1, 0));
    for (const TokenRoute& tr : out.tokens) {
      CHECK(tr.hops >= 1);
      CHECK(tr.hops <= L);
      CHECK(static_cast<int>(tr.trace.size()) == tr.hops);
      CHECK(tr.expert_evals <= 2 * tr.hops);
      int prev_stratum = 0;
      int prev_gate = 0;
      int evals = 0;
      for (const auto& [gate, d] : tr.trace) {
        CHECK(gate > prev_gate);                  // forward-only progression
        CHECK(gate == prev_stratum + 1);          // continues after the target stratum
        CHECK(d.target_stratum >= gate);          // never routed backwards
        prev_stratum = d.target_stratum;
        prev_gate = gate;
        ++gate_tokens[gate];
        for (const RouteChoice& ch : d.choices) {
          CHECK(layout.stratum_of(ch.expert_id) >= gate);  // visibility
          CHECK(ch.weight > 0.0);
          CHECK(ch.weight <= 1.0);  // exactly 1 when the gate sees a single expert
          if (!ch.dropped) {
            ++gate_load[gate][ch.expert_id];
            ++evals;
          }
        }
      }
      CHECK(prev_stratum == L);  // every token exits from the final stratum
      CHECK(evals == tr.expert_evals);
    }
    for (int g = 1; g <= L; ++g) {
      if (gate_tokens[g] == 0) continue;
      const int quota = capacity_quota(gate_tokens[g], layout.visible_count(g));
      for (int e = 1; e <= layout.total(); ++e) CHECK(gate_load[g][e] <= quota);
      CHECK(out.gate_stats[g - 1].tokens == gate_tokens[g]);
    }
    ++trials;
  }
}

TEST_CASE("L=1 smoe block without LayerNorm and residual equals the vanilla block") {
  Rng rng(47);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 8, dff = 12, E = 6, T = 9;
    ParameterStore s1, s2;
    Rng init1(1000 + trial), init2(1000 + trial);
    SmoeBlockParams sp = SmoeBlockParams::create(s1, "blk", parse_layout("6"), d, dff, 2, init1);
    MoeBlockParams vp = MoeBlockParams::create(s2, "blk", E, d, dff, 2, init2);
    // align parameters: same gate weights and expert weights
    s2.at(vp.gate_w).value = s1.at(sp.gate_w[0]).value;
    for (int e = 0; e < E; ++e) {
      s2.at(vp.experts[e].w1_name).value = s1.at(sp.experts[e].w1_name).value;
      s2.at(vp.experts[e].w2_name).value = s1.at(sp.experts[e].w2_name).value;
    }
    RealMatrix x = random_matrix(T, d, init1, -2.0, 2.0);
    RoutingOptions opt;
    opt.use_layer_norm = false;
    opt.use_residual = false;
    Tape t1, t2;
    BlockOutput o1 = run_smoe_block(t1, s1, sp, t1.leaf(x), opt);
    BlockOutput o2 = run_vanilla_block(t2, s2, vp, t2.leaf(x));
    const RealMatrix& a = t1.value(o1.output);
    const RealMatrix& b = t2.value(o2.output);
    for (std::size_t i = 0; i < a.data.size(); ++i)
      CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(1e-10));
    for (int r = 0; r < T; ++r) CHECK(o1.tokens[r].expert_evals == o2.tokens[r].expert_evals);
  }
}

TEST_CASE("switch gating evaluates at most one expert per token") {
  Rng rng(48);
  ParameterStore store;
  MoeBlockParams bp = MoeBlockParams::create(store, "blk", 8, 8, 12, 1, rng);
  Tape t;
  BlockOutput out = run_vanilla_block(t, store, bp, t.leaf(random_matrix(20, 8, rng)));
  for (const TokenRoute& tr : out.tokens) {
    CHECK(tr.hops == 1);
    CHECK(tr.expert_evals <= 1);
  }
}

TEST_CASE("vanilla gate collapse is visible in first-choice fractions") {
  Rng rng(49);
  ParameterStore store;
  MoeBlockParams bp = MoeBlockParams::create(store, "blk", 4, 8, 12, 2, rng);
  RealMatrix& w = store.at(bp.gate_w).value;
  w.fill(0.0);
  for (int j = 0; j < 8; ++j) w.at(0, j) = 5.0;  // expert 1 dominates
  RealMatrix x = random_matrix(10, 8, rng, 0.5, 1.5);  // positive inputs
  Tape t;
  BlockOutput out = run_vanilla_block(t, store, bp, t.leaf(x));
  CHECK(out.gate_stats[0].first_choice_fraction[0] == 1.0);
}

TEST_CASE("stacked block runs m gate rounds for every token") {
  Rng rng(50);
  ParameterStore store;
  StackedBlockParams bp = StackedBlockParams::create(store, "blk", 8, 2, 8, 12, 2, rng);
  Tape t;
  RoutingOptions opt;
  opt.collect_traces = true;
  BlockOutput out = run_stacked_block(t, store, bp, t.leaf(random_matrix(10, 8, rng)), opt);
  CHECK(out.gate_stats.size() == 2);
  for (const TokenRoute& tr : out.tokens) {
    CHECK(tr.hops == 2);
    CHECK(tr.trace.size() == 2);
    // sub-layer expert id ranges are disjoint
    for (const RouteChoice& ch : tr.trace[0].second.choices) CHECK(ch.expert_id <= 4);
    for (const RouteChoice& ch : tr.trace[1].second.choices) CHECK(ch.expert_id >= 5);
  }
  CHECK_THROWS_AS(StackedBlockParams::create(store, "bad", 8, 3, 8, 12, 2, rng),
                  std::invalid_argument);
}

TEST_CASE("forced-uniform routing is deterministic given the stream seed") {
  Rng rng(51);
  ParameterStore store;
  SmoeBlockParams bp = SmoeBlockParams::create(store, "blk", parse_layout("4-4"), 8, 12, 2, rng);
  RealMatrix x = random_matrix(30, 8, rng);
  auto run = [&]() {
    Rng route(99, "route");
    Tape t;
    RoutingOptions opt;
    opt.forced_uniform = true;
    opt.route_rng = &route;
    opt.collect_traces = true;
    BlockOutput out = run_smoe_block(t, store, bp, t.leaf(x), opt);
    std::vector<int> sig;
    for (const TokenRoute& tr : out.tokens) {
      sig.push_back(tr.hops);
      sig.push_back(tr.expert_evals);
      for (const auto& [g, d] : tr.trace)
        for (const RouteChoice& ch : d.choices) sig.push_back(ch.expert_id * (ch.dropped ? -1 : 1));
    }
    return sig;
  };
  CHECK(run() == run());
  {
    Tape t;
    RoutingOptions opt;
    opt.forced_uniform = true;  // no rng supplied
    CHECK_THROWS_AS(run_smoe_block(t, store, bp, t.leaf(x), opt), std::invalid_argument);
  }
}
