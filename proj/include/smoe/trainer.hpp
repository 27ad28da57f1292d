#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "smoe/analysis.hpp"
#include "smoe/config.hpp"
#include "smoe/model.hpp"

namespace smoe {

// Seed-deterministic batch construction: shuffle the pool each epoch and pack
// examples until the source+target token budget is reached.
class BatchStream {
 public:
  BatchStream(const std::vector<Example>& pool, int batch_tokens, std::uint64_t seed)
      : pool_(&pool), batch_tokens_(batch_tokens), rng_(seed, "batching") {
    require(!pool.empty(), "BatchStream: empty example pool");
    order_.resize(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) order_[i] = static_cast<int>(i);
    rng_.shuffle(order_);
  }

  std::vector<Example> next() {
    std::vector<Example> batch;
    int tokens = 0;
    while (true) {
      const Example& ex = (*pool_)[order_[pos_]];
      const int cost = static_cast<int>(ex.src.size() + ex.tgt.size());
      if (!batch.empty() && tokens + cost > batch_tokens_) break;
      batch.push_back(ex);
      tokens += cost;
      if (++pos_ == order_.size()) {
        pos_ = 0;
        rng_.shuffle(order_);
      }
    }
    return batch;
  }

 private:
  const std::vector<Example>* pool_;
  int batch_tokens_;
  Rng rng_;
  std::vector<int> order_;
  std::size_t pos_ = 0;
};

using StepCallback = std::function<void(const TrainMetrics&)>;

// Run the training schedule from the model's current step up to cfg.steps.
inline void train_loop(Model& model, const std::vector<Example>& train_set,
                       const RunConfig& cfg, const StepCallback& on_step = nullptr) {
  BatchStream stream(train_set, cfg.batch_tokens, cfg.model.seed);
  // replay batch draws consumed by earlier steps when resuming
  for (long s = 0; s < model.store().step(); ++s) stream.next();
  while (model.store().step() < cfg.steps) {
    const long step = model.store().step() + 1;
    const double lr = inverse_sqrt_lr(step, cfg.warmup, cfg.peak_lr);
    const TrainMetrics m = model.train_step(stream.next(), lr);
    if (on_step) on_step(m);
  }
}

struct EvalResult {
  double token_accuracy = 0.0;
  long correct = 0;
  long total = 0;
  // (src_lang, tgt_lang) -> (correct, total)
  std::map<std::pair<int, int>, std::pair<long, long>> per_direction;
};

// Greedy-decode accuracy: reference positions (target tokens plus EOS, with
// EOS scored as "decoder stopped here") matched against the hypothesis.
inline EvalResult evaluate(Model& model, const std::vector<Example>& examples,
                           const ForwardOptions& opt = {}) {
  EvalResult res;
  for (const Example& ex : examples) {
    const std::vector<int> hyp =
        model.greedy_decode(ex.src, static_cast<int>(ex.tgt.size()) + 4, opt);
    long correct = 0;
    for (std::size_t i = 0; i < ex.tgt.size(); ++i)
      if (i < hyp.size() && hyp[i] == ex.tgt[i]) ++correct;
    if (hyp.size() == ex.tgt.size()) ++correct;  // stopped at the right position
    const long total = static_cast<long>(ex.tgt.size()) + 1;
    res.correct += correct;
    res.total += total;
    auto& dir = res.per_direction[{ex.src_lang, ex.tgt_lang}];
    dir.first += correct;
    dir.second += total;
  }
  res.token_accuracy = static_cast<double>(res.correct) / static_cast<double>(res.total);
  return res;
}

// Teacher-forced sweep collecting one RC record per routed token per block.
inline std::vector<RcRecord> collect_rc_records(Model& model,
                                                const std::vector<Example>& examples,
                                                const std::string& split, int batch_examples = 16,
                                                const ForwardOptions& base_opt = {}) {
  std::vector<RcRecord> records;
  for (std::size_t start = 0; start < examples.size(); start += batch_examples) {
    const std::size_t end = std::min(examples.size(), start + batch_examples);
    const std::vector<Example> batch(examples.begin() + start, examples.begin() + end);
    Tape t;
    ForwardOptions opt = base_opt;
    opt.collect_traces = true;
    ForwardResult res = model.forward(t, batch, opt);
    for (const BlockRc& rc : res.rc) {
      for (std::size_t r = 0; r < rc.tokens.size(); ++r) {
        const Example& ex = batch[rc.example_index[r]];
        RcRecord rec;
        rec.split = split;
        rec.src_lang = ex.src_lang;
        rec.tgt_lang = ex.tgt_lang;
        rec.side = rc.side;
        rec.block_layer = rc.block_layer;
        rec.token_id = rc.token_ids[r];
        rec.hops = rc.tokens[r].hops;
        rec.expert_evals = rc.tokens[r].expert_evals;
        records.push_back(std::move(rec));
      }
    }
  }
  return records;
}

struct GateLoadSummary {
  std::string origin;
  int gate_index = 0;
  int visible_experts = 0;
  long tokens = 0;
  double max_first_choice_fraction = 0.0;  // from counts pooled over the sweep
};

// Pool first-choice counts over a dataset sweep and report the per-gate
// maximum fraction; the collapse diagnostic.
inline std::vector<GateLoadSummary> measure_gate_load(Model& model,
                                                      const std::vector<Example>& examples,
                                                      int batch_examples = 16) {
  struct Acc {
    int visible = 0;
    long tokens = 0;
    std::vector<double> counts;
  };
  std::map<std::pair<std::string, int>, Acc> acc;
  for (std::size_t start = 0; start < examples.size(); start += batch_examples) {
    const std::size_t end = std::min(examples.size(), start + batch_examples);
    const std::vector<Example> batch(examples.begin() + start, examples.begin() + end);
    Tape t;
    ForwardResult res = model.forward(t, batch);
    for (const GateRoundStats& s : res.gate_stats) {
      Acc& a = acc[{s.origin, s.gate_index}];
      a.visible = s.visible_experts;
      if (a.counts.empty()) a.counts.assign(s.visible_experts, 0.0);
      for (int e = 0; e < s.visible_experts; ++e)
        a.counts[e] += s.first_choice_fraction[e] * s.tokens;
      a.tokens += s.tokens;
    }
  }
  std::vector<GateLoadSummary> out;
  for (const auto& [key, a] : acc) {
    GateLoadSummary g;
    g.origin = key.first;
    g.gate_index = key.second;
    g.visible_experts = a.visible;
    g.tokens = a.tokens;
    for (double c : a.counts)
      g.max_first_choice_fraction = std::max(g.max_first_choice_fraction, c / a.tokens);
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace smoe
