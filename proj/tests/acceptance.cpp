// Acceptance gate: one PASS/FAIL line per criterion, exit status = number of
// failed criteria. Each criterion is self-contained and prints a short
// explanation on failure.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <vector>

#include "smoe/flops.hpp"
#include "smoe/trainer.hpp"

using namespace smoe;

namespace {

struct Criterion {
  bool ok = true;
  std::ostringstream why;

  void check(bool cond, const std::string& msg) {
    if (!cond) {
      if (!ok) why << "; ";
      ok = false;
      why << msg;
    }
  }
};

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

// Brute-force expected hops by enumerating every strictly increasing stratum
// path with its probability under uniform routing.
double enumerate_hops(const StratumLayout& layout) {
  const int L = layout.strata();
  double total = 0.0;
  std::function<void(int, double, int)> walk = [&](int gate, double prob, int hops) {
    const double ei = layout.visible_count(gate);
    for (int j = gate; j <= L; ++j) {
      const double p = layout.sizes[j - 1] / ei;
      if (j == L) {
        total += prob * p * (hops + 1);
      } else {
        walk(j + 1, prob * p, hops + 1);
      }
    }
  };
  walk(1, 1.0, 0);
  return total;
}

std::vector<StratumLayout> all_layouts(int experts, int max_parts) {
  std::vector<StratumLayout> out;
  std::vector<int> cur;
  std::function<void(int)> rec = [&](int left) {
    if (left == 0) {
      out.push_back(StratumLayout{cur});
      return;
    }
    if (static_cast<int>(cur.size()) == max_parts) return;
    for (int s = 1; s <= left; ++s) {
      cur.push_back(s);
      rec(left - s);
      cur.pop_back();
    }
  };
  rec(experts);
  return out;
}

ModelConfig toy_model_config(const Dataset& ds, double alpha, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.set_variant("2-2");
  cfg.alpha = alpha;
  cfg.seed = seed;
  if (cfg.vocab_size < ds.vocab.size()) cfg.vocab_size = ds.vocab.size();
  return cfg;
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

Criterion criterion_flops() {
  Criterion c;
  const std::pair<const char*, const char*> rows[] = {
      {"base", "vanilla"}, {"base", "switch"}, {"base", "4-4"},   {"base", "2-2-2-2"},
      {"base", "stacked2"}, {"big", "vanilla"}, {"big", "switch"}, {"big", "4-12"},
      {"big", "12-4"},      {"big", "8-8"},     {"big", "4-4-8"},  {"big", "8-4-4"},
      {"big", "4-4-4-4"},
  };
  for (const auto& [arch, variant] : rows) {
    const double got = flops_per_token(variant, arch_preset(arch));
    const auto ref = reference_flops_m(arch, variant);
    if (!ref) {
      c.check(false, std::string(arch) + "/" + variant + ": no reference value");
      continue;
    }
    const double dev = std::abs(got / (*ref * 1e6) - 1.0);
    c.check(dev < 0.01, std::string(arch) + "/" + variant + " deviates " +
                            std::to_string(100 * dev) + "%");
  }
  c.check(flops_per_token("dense", arch_base()) == 167e6, "base dense not echoed exactly");
  c.check(flops_per_token("dense", arch_big()) == 506e6, "big dense not echoed exactly");
  return c;
}

Criterion criterion_expected_hops() {
  Criterion c;
  const std::vector<StratumLayout> layouts = all_layouts(16, 4);
  c.check(layouts.size() == 576, "layout enumeration incomplete");
  double worst = 0.0;
  for (const StratumLayout& l : layouts)
    worst = std::max(worst, std::abs(expected_hops(l) - enumerate_hops(l)));
  c.check(worst < 1e-12, "recurrence vs enumeration diff " + std::to_string(worst));

  // Monte-Carlo forced-uniform routing, 10k tokens per layout
  for (const char* spec : {"8-8", "4-4-4-4"}) {
    const StratumLayout layout = parse_layout(spec);
    Rng init(2001);
    ParameterStore store;
    SmoeBlockParams bp = SmoeBlockParams::create(store, "blk", layout, 8, 8, 2, init);
    const int T = 10000;
    RealMatrix x(T, 8);
    for (double& v : x.data) v = init.uniform(-1.0, 1.0);
    Rng route(2001, "route");
    RoutingOptions opt;
    opt.forced_uniform = true;
    opt.route_rng = &route;
    Tape t;
    BlockOutput out = run_smoe_block(t, store, bp, t.leaf(x), opt);
    double mean = 0.0;
    for (const TokenRoute& tr : out.tokens) mean += tr.hops;
    mean /= T;
    double var = 0.0;
    for (const TokenRoute& tr : out.tokens) var += (tr.hops - mean) * (tr.hops - mean);
    const double se = std::sqrt(var / (T - 1.0) / T);
    const double h1 = expected_hops(layout);
    c.check(std::abs(mean - h1) <= 3.0 * se,
            std::string(spec) + ": mc mean " + std::to_string(mean) + " vs " +
                std::to_string(h1) + " (3se=" + std::to_string(3 * se) + ")");
  }
  return c;
}

Criterion criterion_balance() {
  Criterion c;
  Tape t;
  // uniform -> exactly 1
  for (int E : {2, 4, 8, 16}) {
    GateRoundStats s;
    s.gate_index = 1;
    s.visible_experts = E;
    s.tokens = 100;
    s.first_choice_fraction.assign(E, 1.0 / E);
    s.mean_probs = t.leaf(RealMatrix(1, E, 1.0 / E));
    const double v = t.value(gate_balance_loss(t, s)).at(0, 0);
    c.check(std::abs(v - 1.0) < 1e-12, "uniform E=" + std::to_string(E) + " gave " +
                                           std::to_string(v));
  }
  // collapse -> E
  {
    const int E = 8;
    GateRoundStats s;
    s.gate_index = 1;
    s.visible_experts = E;
    s.tokens = 100;
    s.first_choice_fraction.assign(E, 0.0);
    s.first_choice_fraction[0] = 1.0;
    RealMatrix p(1, E, 1e-9);
    p.at(0, 0) = 1.0 - 7e-9;
    s.mean_probs = t.leaf(p);
    const double v = t.value(gate_balance_loss(t, s)).at(0, 0);
    c.check(std::abs(v - E) < 1e-6, "collapse gave " + std::to_string(v));
  }

  // finite-difference check of d(task + alpha*aux)/d(theta) on a small model,
  // random gate and expert parameters
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.d_ff = 8;
  cfg.n_heads = 2;
  cfg.vocab_size = 12;
  cfg.set_variant("2-2");
  cfg.seed = 7;
  Model model(cfg);
  std::vector<Example> batch;
  batch.push_back({0, 1, {2, 3, 4}, {5, 6}});
  batch.push_back({1, 0, {7, 8}, {9, 10, 11}});
  auto eval = [&]() {
    Tape tt;
    return tt.value(model.forward(tt, batch).total_loss).at(0, 0);
  };
  model.store().zero_grad();
  {
    Tape tt;
    tt.backward(model.forward(tt, batch).total_loss);
  }
  Rng pick(2002);
  const double eps = 1e-5;
  int checked = 0;
  for (auto& [name, p] : model.store().params()) {
    if (name.find(".gate") == std::string::npos && name.find(".expert") == std::string::npos)
      continue;
    for (int probe = 0; probe < 2; ++probe) {
      const std::size_t i = static_cast<std::size_t>(
          pick.uniform_int(0, static_cast<int>(p.value.data.size()) - 1));
      const double saved = p.value.data[i];
      p.value.data[i] = saved + eps;
      const double up = eval();
      p.value.data[i] = saved - eps;
      const double down = eval();
      p.value.data[i] = saved;
      const double fd = (up - down) / (2 * eps);
      const double got = p.grad.data[i];
      const double scale = std::max({std::abs(fd), std::abs(got), 1e-6});
      c.check(std::abs(fd - got) / scale < 1e-3,
              name + "[" + std::to_string(i) + "]: fd " + std::to_string(fd) + " vs grad " +
                  std::to_string(got));
      ++checked;
    }
  }
  c.check(checked >= 20, "too few gate/expert parameters probed");
  return c;
}

Criterion criterion_routing_invariants() {
  Criterion c;
  Rng rng(2003);
  const int d = 8;
  int trials = 0;
  for (; trials < 1000 && c.ok; ++trials) {
    StratumLayout layout;
    const int L = rng.uniform_int(1, 4);
    for (int i = 0; i < L; ++i) layout.sizes.push_back(rng.uniform_int(1, 4));
    const int T = rng.uniform_int(1, 12);
    ParameterStore store;
    SmoeBlockParams bp = SmoeBlockParams::create(store, "blk", layout, d, d, 2, rng);
    RealMatrix x(T, d);
    for (double& v : x.data) v = rng.uniform(-2.0, 2.0);
    Tape t;
    RoutingOptions opt;
    opt.collect_traces = true;
    BlockOutput out = run_smoe_block(t, store, bp, t.leaf(x), opt);

    // per-gate recount of surviving assignments vs the quota
    std::vector<std::map<int, int>> gate_load(L + 1);
    std::vector<int> gate_tokens(L + 1, 0);
    for (int r = 0; r < T; ++r) {
      const TokenRoute& tr = out.tokens[r];
      c.check(tr.hops >= 1 && tr.hops <= L, "hops out of range");
      int prev_gate = 0;
      for (const auto& [gate, dec] : tr.trace) {
        c.check(gate > prev_gate, "gate sequence not increasing");
        c.check(dec.target_stratum >= gate, "token moved backwards");
        prev_gate = gate;
        ++gate_tokens[gate];
        double wsum = 0.0;
        for (const RouteChoice& ch : dec.choices) {
          c.check(layout.stratum_of(ch.expert_id) >= gate, "expert not visible from gate");
          c.check(ch.weight >= 0.0 && ch.weight <= 1.0, "weight outside [0,1]");
          wsum += ch.weight;
          if (!ch.dropped) ++gate_load[gate][ch.expert_id];
        }
        c.check(wsum <= 1.0 + 1e-12, "combine weights exceed softmax mass");
      }
    }
    for (int g = 1; g <= L; ++g) {
      if (gate_tokens[g] == 0) continue;
      const int quota = capacity_quota(gate_tokens[g], layout.visible_count(g));
      for (const auto& [expert, load] : gate_load[g])
        c.check(load <= quota, "capacity quota exceeded");
    }
  }
  c.check(trials >= 1000, "only " + std::to_string(trials) + " trials ran");

  // residual pass-through on full drop: 16 identical tokens, one stratum of 8
  {
    Rng r2(2004);
    ParameterStore store;
    SmoeBlockParams bp = SmoeBlockParams::create(store, "blk", parse_layout("8"), d, d, 2, r2);
    RealMatrix x(16, d);
    for (int col = 0; col < d; ++col) {
      const double v = r2.uniform(-1.0, 1.0);
      for (int row = 0; row < 16; ++row) x.at(row, col) = v;
    }
    Tape t;
    BlockOutput out = run_smoe_block(t, store, bp, t.leaf(x));
    const RealMatrix& y = t.value(out.output);
    int fully_dropped = 0;
    for (int row = 0; row < 16; ++row) {
      if (out.tokens[row].expert_evals > 0) continue;
      ++fully_dropped;
      for (int col = 0; col < d; ++col)
        c.check(y.at(row, col) == x.at(row, col), "dropped token not passed through bit-exactly");
    }
    c.check(fully_dropped > 0, "capacity scenario produced no fully dropped token");
  }

  // single-stratum block with LN and residual disabled reproduces vanilla top-2
  Rng r3(2005);
  for (int trial = 0; trial < 50; ++trial) {
    const int E = r3.uniform_int(2, 6);
    const int T = r3.uniform_int(1, 10);
    ParameterStore store;
    SmoeBlockParams sp = SmoeBlockParams::create(store, "s", parse_layout(std::to_string(E)), d,
                                                 d, 2, r3);
    MoeBlockParams vp = MoeBlockParams::create(store, "v", E, d, d, 2, r3);
    store.at(vp.gate_w).value = store.at(sp.gate_w[0]).value;
    for (int e = 0; e < E; ++e) {
      store.at(vp.experts[e].w1_name).value = store.at(sp.experts[e].w1_name).value;
      store.at(vp.experts[e].w2_name).value = store.at(sp.experts[e].w2_name).value;
    }
    RealMatrix x(T, d);
    for (double& v : x.data) v = r3.uniform(-2.0, 2.0);
    Tape t;
    RoutingOptions opt;
    opt.use_layer_norm = false;
    opt.use_residual = false;
    const RealMatrix& ys = t.value(run_smoe_block(t, store, sp, t.leaf(x), opt).output);
    const RealMatrix& yv = t.value(run_vanilla_block(t, store, vp, t.leaf(x)).output);
    for (std::size_t i = 0; i < ys.data.size(); ++i)
      c.check(std::abs(ys.data[i] - yv.data[i]) < 1e-10, "L=1 block differs from vanilla top-2");
  }
  return c;
}

struct TrainingArtifacts {
  Dataset data;
  Model model;
};

Criterion criterion_training(TrainingArtifacts*& artifacts) {
  Criterion c;
  SyntheticTaskConfig task;  // 4 languages, 12 directions
  task.seed = 11;
  Dataset ds = gen_synthetic_task(task);

  // (c) fixed-seed runs are bit-identical (checked over a 100-step prefix)
  {
    RunConfig short_cfg;
    short_cfg.model = toy_model_config(ds, 0.01, 42);
    short_cfg.peak_lr = 5e-3;
    short_cfg.steps = 100;
    std::vector<TrainMetrics> first, second;
    for (auto* sink : {&first, &second}) {
      Model m(short_cfg.model);
      train_loop(m, ds.train, short_cfg, [&](const TrainMetrics& tm) { sink->push_back(tm); });
    }
    for (std::size_t i = 0; i < first.size(); ++i) {
      c.check(first[i].task_loss == second[i].task_loss &&
                  first[i].aux_loss == second[i].aux_loss &&
                  first[i].grad_norm == second[i].grad_norm,
              "fixed-seed metrics differ at step " + std::to_string(i + 1));
      if (!c.ok) break;
    }
  }

  // (a) + (b): full run with alpha=0.01
  RunConfig cfg;
  cfg.model = toy_model_config(ds, 0.01, 42);
  cfg.peak_lr = 5e-3;
  auto model = std::make_unique<Model>(cfg.model);
  train_loop(*model, ds.train, cfg);
  EvalResult ev = evaluate(*model, ds.dev);
  c.check(ev.token_accuracy >= 0.99,
          "dev accuracy " + std::to_string(ev.token_accuracy) + " < 0.99");

  for (const GateLoadSummary& g : measure_gate_load(*model, ds.dev)) {
    const double limit = 2.0 / g.visible_experts;
    c.check(g.max_first_choice_fraction <= limit,
            g.origin + " gate " + std::to_string(g.gate_index) + ": max f " +
                std::to_string(g.max_first_choice_fraction) + " > " + std::to_string(limit));
  }

  // (b) control: without the balance loss at least one gate collapses
  {
    RunConfig ctrl = cfg;
    ctrl.model.alpha = 0.0;
    ctrl.steps = 800;
    Model control(ctrl.model);
    train_loop(control, ds.train, ctrl);
    bool collapsed = false;
    for (const GateLoadSummary& g : measure_gate_load(control, ds.dev))
      if (g.max_first_choice_fraction > 2.0 / g.visible_experts) collapsed = true;
    c.check(collapsed, "alpha=0 control stayed within 2/E on every gate");
  }

  artifacts = new TrainingArtifacts{std::move(ds), std::move(*model)};
  return c;
}

Criterion criterion_rc_pipeline(TrainingArtifacts* artifacts) {
  Criterion c;
  if (!artifacts) {
    c.check(false, "no trained model available (criterion 5 crashed)");
    return c;
  }
  Model& model = artifacts->model;
  const Dataset& ds = artifacts->data;
  const int L = parse_layout(model.config().layout).strata();

  namespace fs = std::filesystem;
  const fs::path out = fs::temp_directory_path() / "smoe_acceptance_rc";
  fs::create_directories(out);
  const std::vector<RcRecord> records = collect_rc_records(model, ds.dev, "dev");
  c.check(!records.empty(), "trained sweep produced no rc records");

  const std::vector<DirectionRc> by_dir = rc_by_direction(records);
  const std::vector<BlockRcRow> by_block = rc_by_block(records);
  const std::vector<TokenRcRow> by_token =
      rc_by_token_frequency(records, token_frequencies(ds.train, ds.vocab));
  write_rc_by_direction(out / "rc_by_direction.csv", by_dir);
  write_rc_by_block(out / "rc_by_block.csv", by_block);
  write_rc_tokens(out / "rc_tokens.csv", by_token);
  for (const char* f : {"rc_by_direction.csv", "rc_by_block.csv", "rc_tokens.csv"})
    c.check(fs::exists(out / f), std::string(f) + " missing");
  for (const DirectionRc& r : by_dir)
    c.check(r.mean_hops >= 1.0 && r.mean_hops <= L, "direction mean hops outside [1, L]");
  for (const BlockRcRow& r : by_block)
    c.check(r.mean_hops >= 1.0 && r.mean_hops <= L, "block mean hops outside [1, L]");
  for (const TokenRcRow& r : by_token)
    c.check(r.mean_hops >= 1.0 && r.mean_hops <= L, "token mean hops outside [1, L]");

  // forced-uniform sweep: means reproduce the analytical expectation
  Rng route(2006, "route");
  ForwardOptions opt;
  opt.forced_uniform = true;
  opt.route_rng = &route;
  std::vector<RcRecord> uniform = collect_rc_records(model, ds.dev, "dev", 16, opt);
  std::vector<RcRecord> more = collect_rc_records(model, ds.dev, "dev", 16, opt);
  uniform.insert(uniform.end(), more.begin(), more.end());
  c.check(uniform.size() >= 10000,
          "only " + std::to_string(uniform.size()) + " forced-uniform records");
  const double h1 = expected_hops(parse_layout(model.config().layout));
  for (const BlockRcRow& r : rc_by_block(uniform))
    c.check(std::abs(r.mean_hops - h1) <= 0.1,
            "block " + std::string(1, r.side) + std::to_string(r.block_layer) +
                " forced-uniform mean " + std::to_string(r.mean_hops) + " vs " +
                std::to_string(h1));
  for (const DirectionRc& r : rc_by_direction(uniform))
    c.check(std::abs(r.mean_hops - h1) <= 0.1,
            "direction forced-uniform mean " + std::to_string(r.mean_hops) + " vs " +
                std::to_string(h1));
  return c;
}

void report(int index, const char* title, const Criterion& c, int& failures) {
  if (c.ok) {
    std::printf("criterion %d: PASS — %s\n", index, title);
  } else {
    std::printf("criterion %d: FAIL — %s: %s\n", index, title, c.why.str().c_str());
    ++failures;
  }
  std::fflush(stdout);
}

}  // namespace

int main() {
  int failures = 0;
  report(1, "analytical FLOPs/token reproduces the reference table within 1%",
         criterion_flops(), failures);
  report(2, "expected-hops oracle matches enumeration and Monte-Carlo routing",
         criterion_expected_hops(), failures);
  report(3, "balance-loss closed forms and end-to-end gradients",
         criterion_balance(), failures);
  report(4, "routing invariants over randomized trials",
         criterion_routing_invariants(), failures);
  TrainingArtifacts* artifacts = nullptr;
  report(5, "training reaches 99% dev accuracy, stays balanced, and is deterministic",
         criterion_training(artifacts), failures);
  report(6, "requested-capacity reports generate and match the uniform expectation",
         criterion_rc_pipeline(artifacts), failures);
  delete artifacts;
  return failures;
}
