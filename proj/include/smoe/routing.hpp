#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "smoe/experts.hpp"
#include "smoe/tape.hpp"

namespace smoe {

struct RouteChoice {
  int expert_id = 0;     // 1-based global expert id
  double weight = 0.0;   // raw gate softmax entry, not renormalized
  bool dropped = false;  // capacity overflow
};

// One gate round's outcome for one token.
struct RouteDecision {
  std::vector<RouteChoice> choices;  // descending by weight, ties by lower expert id
  int target_stratum = 0;            // stratum of highest-scoring surviving expert,
                                     // or of the pre-filter top-1 if all dropped
};

struct TokenRoute {
  int hops = 0;          // gate rounds experienced
  int expert_evals = 0;  // non-dropped FFN applications
  std::vector<std::pair<int, RouteDecision>> trace;  // (gate index, decision)
};

// Inputs to the load-balancing loss for one gate round. mean_probs is the
// differentiable p vector; first-choice fractions f are plain counts.
struct GateRoundStats {
  std::string origin;  // label of the owning block, set by the caller
  int gate_index = 0;
  int visible_experts = 0;  // E_i
  int tokens = 0;           // T_i
  std::vector<double> first_choice_fraction;  // f, indexed by visible position
  Var mean_probs;                             // 1 x E_i, invalid when tokens == 0
};

struct BlockOutput {
  Var output;
  std::vector<GateRoundStats> gate_stats;
  std::vector<TokenRoute> tokens;
  std::vector<int> expert_load;   // surviving assignments, index expert_id (1-based)
  std::vector<int> expert_drops;  // capacity drops, index expert_id
};

struct RoutingOptions {
  bool use_layer_norm = true;  // block-internal pre-gate LayerNorm
  bool use_residual = true;    // block-internal residual per hop
  bool forced_uniform = false; // replace gate logits by seeded uniform noise
  Rng* route_rng = nullptr;    // required when forced_uniform
  bool collect_traces = false;
};

// Top-k column indices of one probability row, descending by probability with
// ties broken by the lower index.
inline std::vector<int> select_topk(const double* probs, int n, int k) {
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return probs[a] > probs[b]; });
  order.resize(std::min(k, n));
  return order;
}

inline int capacity_quota(int tokens, int experts) {
  return (2 * tokens + experts - 1) / experts;  // ceil(2 T / E)
}

// Flag assignments beyond each expert's quota as dropped. Tokens are assumed
// ordered by ascending token_ref; first choices fill slots before second
// choices within the round.
inline void apply_capacity(std::vector<RouteDecision>& decisions, int visible_experts) {
  const int tokens = static_cast<int>(decisions.size());
  if (tokens == 0) return;
  const int quota = capacity_quota(tokens, visible_experts);
  std::vector<int> load;  // by expert id, grown on demand
  auto count = [&](int expert_id) -> int& {
    if (expert_id >= static_cast<int>(load.size())) load.resize(expert_id + 1, 0);
    return load[expert_id];
  };
  std::size_t max_rank = 0;
  for (const auto& d : decisions) max_rank = std::max(max_rank, d.choices.size());
  for (std::size_t rank = 0; rank < max_rank; ++rank) {
    for (auto& d : decisions) {
      if (rank >= d.choices.size()) continue;
      int& c = count(d.choices[rank].expert_id);
      if (c < quota) {
        ++c;
      } else {
        d.choices[rank].dropped = true;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Stratified MoE block
// ---------------------------------------------------------------------------

struct SmoeBlockParams {
  StratumLayout layout;
  int d_model = 0;
  int d_ff = 0;
  int k = 2;
  std::string prefix;
  std::vector<ExpertParams> experts;    // index expert_id - 1
  std::vector<std::string> gate_w;      // per gate, E_i x d_model
  std::vector<std::string> ln_gain;     // per gate
  std::vector<std::string> ln_bias;

  static SmoeBlockParams create(ParameterStore& store, const std::string& prefix,
                                const StratumLayout& layout, int d_model, int d_ff, int k,
                                Rng& rng) {
    SmoeBlockParams p;
    p.layout = layout;
    p.d_model = d_model;
    p.d_ff = d_ff;
    p.k = k;
    p.prefix = prefix;
    for (int e = 1; e <= layout.total(); ++e)
      p.experts.push_back(ExpertParams::create(store, prefix, e, d_model, d_ff, rng));
    for (int i = 1; i <= layout.strata(); ++i) {
      const std::string g = prefix + ".gate" + std::to_string(i);
      p.gate_w.push_back(g + ".w");
      p.ln_gain.push_back(g + ".ln.gain");
      p.ln_bias.push_back(g + ".ln.bias");
      store.create(p.gate_w.back(), xavier_uniform(layout.visible_count(i), d_model, rng));
      store.create(p.ln_gain.back(), RealMatrix(1, d_model, 1.0));
      store.create(p.ln_bias.back(), RealMatrix(1, d_model, 0.0));
    }
    return p;
  }
};

namespace detail {

inline RealMatrix uniform_logits(int rows, int cols, Rng& rng) {
  RealMatrix m(rows, cols);
  for (double& v : m.data) v = rng.uniform();
  return m;
}

}  // namespace detail

// Multi-hop stratified routing: per gate round, LayerNorm -> gate softmax over
// visible experts -> top-k -> capacity filter -> weighted expert combine ->
// residual; tokens advance to the gate after their target stratum until they
// exit the final stratum.
inline BlockOutput run_smoe_block(Tape& t, ParameterStore& store, const SmoeBlockParams& bp,
                                  Var x, const RoutingOptions& opt = {}) {
  const StratumLayout& layout = bp.layout;
  const int L = layout.strata();
  const int n_tokens = t.value(x).rows;
  require(t.value(x).cols == bp.d_model, "run_smoe_block: input width");
  require(opt.forced_uniform == false || opt.route_rng != nullptr,
          "run_smoe_block: forced_uniform needs a route rng");

  BlockOutput out;
  out.tokens.resize(n_tokens);
  out.expert_load.assign(layout.total() + 1, 0);
  out.expert_drops.assign(layout.total() + 1, 0);

  std::vector<std::vector<int>> waiting(L + 2);
  waiting[1].resize(n_tokens);
  for (int i = 0; i < n_tokens; ++i) waiting[1][i] = i;

  Var cur = x;
  for (int gate = 1; gate <= L; ++gate) {
    std::vector<int>& rows = waiting[gate];
    std::sort(rows.begin(), rows.end());  // ascending token_ref
    const int ti = static_cast<int>(rows.size());
    const int ei = layout.visible_count(gate);
    const int first_id = layout.stratum_begin(gate);
    GateRoundStats stats;
    stats.gate_index = gate;
    stats.visible_experts = ei;
    stats.tokens = ti;
    if (ti == 0) {
      out.gate_stats.push_back(std::move(stats));
      continue;
    }

    Var xi = t.gather_rows(cur, rows);
    Var xnorm = xi;
    if (opt.use_layer_norm) {
      xnorm = t.layer_norm(xi, t.param(store, bp.ln_gain[gate - 1]),
                           t.param(store, bp.ln_bias[gate - 1]));
    }
    Var logits;
    if (opt.forced_uniform) {
      logits = t.leaf(detail::uniform_logits(ti, ei, *opt.route_rng));
    } else {
      logits = t.matmul_nt(xnorm, t.param(store, bp.gate_w[gate - 1]));
    }
    Var probs = t.softmax_rows(logits);
    const RealMatrix& pv = t.value(probs);

    // discrete routing on values
    std::vector<RouteDecision> decisions(ti);
    std::vector<double> first_counts(ei, 0.0);
    const int k = std::min(bp.k, ei);
    for (int r = 0; r < ti; ++r) {
      const std::vector<int> top = select_topk(pv.row(r), ei, k);
      for (int c : top)
        decisions[r].choices.push_back({first_id + c, pv.at(r, c), false});
      first_counts[top[0]] += 1.0;
    }
    apply_capacity(decisions, ei);

    stats.first_choice_fraction.resize(ei);
    for (int c = 0; c < ei; ++c) stats.first_choice_fraction[c] = first_counts[c] / ti;
    stats.mean_probs = t.col_mean(probs);
    out.gate_stats.push_back(stats);

    // expert combine over surviving assignments
    Var acc = t.zeros(ti, bp.d_model);
    for (int c = 0; c < ei; ++c) {
      const int expert_id = first_id + c;
      std::vector<int> local_rows;
      std::vector<std::pair<int, int>> weight_pos;
      for (int r = 0; r < ti; ++r) {
        for (const RouteChoice& ch : decisions[r].choices) {
          if (ch.expert_id == expert_id && !ch.dropped) {
            local_rows.push_back(r);
            weight_pos.emplace_back(r, c);
          }
        }
      }
      if (local_rows.empty()) continue;
      Var xe = t.gather_rows(xnorm, local_rows);
      Var ye = ffn_forward(t, store, bp.experts[expert_id - 1], xe);
      Var w = t.gather_elems(probs, std::move(weight_pos));
      acc = t.add(acc, t.scatter_rows_add(t.scale_rows(ye, w), std::move(local_rows), ti));
    }
    Var updated = opt.use_residual ? t.add(acc, xi) : acc;
    cur = t.set_rows(cur, updated, rows);

    // route bookkeeping
    for (int r = 0; r < ti; ++r) {
      RouteDecision& d = decisions[r];
      int best_surviving = 0;
      int surviving = 0;
      for (const RouteChoice& ch : d.choices) {
        if (ch.dropped) {
          out.expert_drops[ch.expert_id] += 1;
        } else {
          ++surviving;
          out.expert_load[ch.expert_id] += 1;
          if (best_surviving == 0) best_surviving = ch.expert_id;
        }
      }
      const int anchor = best_surviving ? best_surviving : d.choices[0].expert_id;
      d.target_stratum = layout.stratum_of(anchor);
      const int token = rows[r];
      TokenRoute& route = out.tokens[token];
      route.hops += 1;
      route.expert_evals += surviving;
      if (opt.collect_traces) route.trace.emplace_back(gate, d);
      if (d.target_stratum < L) waiting[d.target_stratum + 1].push_back(token);
    }
    rows.clear();
  }

  out.output = cur;
  return out;
}

// ---------------------------------------------------------------------------
// Vanilla top-k MoE block (k=2 vanilla, k=1 Switch)
// ---------------------------------------------------------------------------

struct MoeBlockParams {
  int n_experts = 0;
  int d_model = 0;
  int d_ff = 0;
  int k = 2;
  std::string prefix;
  std::string gate_w;  // E x d_model
  std::vector<ExpertParams> experts;
  int first_expert_id = 1;  // offset used by stacked sub-layers

  static MoeBlockParams create(ParameterStore& store, const std::string& prefix, int n_experts,
                               int d_model, int d_ff, int k, Rng& rng, int first_expert_id = 1) {
    MoeBlockParams p;
    p.n_experts = n_experts;
    p.d_model = d_model;
    p.d_ff = d_ff;
    p.k = k;
    p.prefix = prefix;
    p.first_expert_id = first_expert_id;
    p.gate_w = prefix + ".gate.w";
    store.create(p.gate_w, xavier_uniform(n_experts, d_model, rng));
    for (int e = 0; e < n_experts; ++e)
      p.experts.push_back(
          ExpertParams::create(store, prefix, first_expert_id + e, d_model, d_ff, rng));
    return p;
  }
};

// Single gate over all experts on the raw input; no block-internal LayerNorm
// or residual (the surrounding transformer layer supplies its own).
inline BlockOutput run_vanilla_block(Tape& t, ParameterStore& store, const MoeBlockParams& bp,
                                     Var x, const RoutingOptions& opt = {}) {
  require(bp.k >= 1 && bp.k <= bp.n_experts, "run_vanilla_block: bad k");
  const int ti = t.value(x).rows;
  const int ei = bp.n_experts;
  const int last_id = bp.first_expert_id + ei - 1;

  BlockOutput out;
  out.tokens.resize(ti);
  out.expert_load.assign(last_id + 1, 0);
  out.expert_drops.assign(last_id + 1, 0);

  GateRoundStats stats;
  stats.gate_index = 1;
  stats.visible_experts = ei;
  stats.tokens = ti;
  if (ti == 0) {
    out.output = x;
    out.gate_stats.push_back(std::move(stats));
    return out;
  }

  Var logits;
  if (opt.forced_uniform) {
    require(opt.route_rng != nullptr, "run_vanilla_block: forced_uniform needs a route rng");
    logits = t.leaf(detail::uniform_logits(ti, ei, *opt.route_rng));
  } else {
    logits = t.matmul_nt(x, t.param(store, bp.gate_w));
  }
  Var probs = t.softmax_rows(logits);
  const RealMatrix& pv = t.value(probs);

  std::vector<RouteDecision> decisions(ti);
  std::vector<double> first_counts(ei, 0.0);
  const int k = std::min(bp.k, ei);
  for (int r = 0; r < ti; ++r) {
    const std::vector<int> top = select_topk(pv.row(r), ei, k);
    for (int c : top)
      decisions[r].choices.push_back({bp.first_expert_id + c, pv.at(r, c), false});
    first_counts[top[0]] += 1.0;
  }
  apply_capacity(decisions, ei);

  stats.first_choice_fraction.resize(ei);
  for (int c = 0; c < ei; ++c) stats.first_choice_fraction[c] = first_counts[c] / ti;
  stats.mean_probs = t.col_mean(probs);
  out.gate_stats.push_back(stats);

  Var acc = t.zeros(ti, bp.d_model);
  for (int c = 0; c < ei; ++c) {
    const int expert_id = bp.first_expert_id + c;
    std::vector<int> local_rows;
    std::vector<std::pair<int, int>> weight_pos;
    for (int r = 0; r < ti; ++r) {
      for (const RouteChoice& ch : decisions[r].choices) {
        if (ch.expert_id == expert_id && !ch.dropped) {
          local_rows.push_back(r);
          weight_pos.emplace_back(r, c);
        }
      }
    }
    if (local_rows.empty()) continue;
    Var xe = t.gather_rows(x, local_rows);
    Var ye = ffn_forward(t, store, bp.experts[c], xe);
    Var w = t.gather_elems(probs, std::move(weight_pos));
    acc = t.add(acc, t.scatter_rows_add(t.scale_rows(ye, w), std::move(local_rows), ti));
  }
  out.output = acc;

  for (int r = 0; r < ti; ++r) {
    RouteDecision& d = decisions[r];
    int surviving = 0;
    for (const RouteChoice& ch : d.choices) {
      if (ch.dropped) {
        out.expert_drops[ch.expert_id] += 1;
      } else {
        ++surviving;
        out.expert_load[ch.expert_id] += 1;
      }
    }
    d.target_stratum = 1;
    out.tokens[r].hops = 1;
    out.tokens[r].expert_evals = surviving;
    if (opt.collect_traces) out.tokens[r].trace.emplace_back(1, d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Naive stacked MoE baseline
// ---------------------------------------------------------------------------

struct StackedBlockParams {
  int n_experts = 0;
  int sublayers = 0;
  std::vector<MoeBlockParams> layers;

  static StackedBlockParams create(ParameterStore& store, const std::string& prefix,
                                   int n_experts, int sublayers, int d_model, int d_ff, int k,
                                   Rng& rng) {
    require(sublayers >= 1 && n_experts % sublayers == 0,
            "stacked block: experts must divide evenly across sub-layers");
    StackedBlockParams p;
    p.n_experts = n_experts;
    p.sublayers = sublayers;
    const int per = n_experts / sublayers;
    for (int m = 0; m < sublayers; ++m) {
      p.layers.push_back(MoeBlockParams::create(store, prefix + ".sub" + std::to_string(m + 1),
                                                per, d_model, d_ff, k, rng, m * per + 1));
    }
    return p;
  }
};

// Vanilla MoE layers applied in sequence, without inter-layer LayerNorm or
// residual.
inline BlockOutput run_stacked_block(Tape& t, ParameterStore& store,
                                     const StackedBlockParams& bp, Var x,
                                     const RoutingOptions& opt = {}) {
  const int ti = t.value(x).rows;
  BlockOutput out;
  out.tokens.resize(ti);
  out.expert_load.assign(bp.n_experts + 1, 0);
  out.expert_drops.assign(bp.n_experts + 1, 0);
  Var cur = x;
  for (int m = 0; m < bp.sublayers; ++m) {
    BlockOutput sub = run_vanilla_block(t, store, bp.layers[m], cur, opt);
    cur = sub.output;
    sub.gate_stats[0].gate_index = m + 1;
    out.gate_stats.push_back(std::move(sub.gate_stats[0]));
    for (int r = 0; r < ti; ++r) {
      out.tokens[r].hops += sub.tokens[r].hops;
      out.tokens[r].expert_evals += sub.tokens[r].expert_evals;
      for (auto& entry : sub.tokens[r].trace) {
        entry.first = m + 1;
        out.tokens[r].trace.push_back(std::move(entry));
      }
    }
    for (std::size_t e = 0; e < sub.expert_load.size(); ++e) {
      out.expert_load[e] += sub.expert_load[e];
      out.expert_drops[e] += sub.expert_drops[e];
    }
  }
  out.output = cur;
  return out;
}

}  // namespace smoe
