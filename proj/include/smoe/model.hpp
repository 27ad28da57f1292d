#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "smoe/balance.hpp"
#include "smoe/data.hpp"
#include "smoe/routing.hpp"

namespace smoe {

enum class MoeVariant { Dense, VanillaTop2, SwitchTop1, Stacked, Smoe };

struct ModelConfig {
  int d_model = 64;
  int d_ff = 128;
  int n_heads = 4;
  int enc_layers = 2;
  int dec_layers = 2;
  int vocab_size = 64;
  int max_seq_len = 64;
  MoeVariant variant = MoeVariant::Smoe;
  std::string layout = "2-2";  // smoe stratum sizes
  int n_experts = 8;           // vanilla / switch / stacked
  int stacked_m = 2;
  int k = 2;
  double alpha = 0.01;
  std::uint64_t seed = 1;

  std::string variant_string() const {
    switch (variant) {
      case MoeVariant::Dense: return "dense";
      case MoeVariant::VanillaTop2: return "vanilla";
      case MoeVariant::SwitchTop1: return "switch";
      case MoeVariant::Stacked: return "stacked" + std::to_string(stacked_m);
      case MoeVariant::Smoe: return layout;
    }
    return "?";
  }

  // "dense" | "vanilla" | "switch" | "stackedM" | stratum layout like "2-2"
  void set_variant(const std::string& spec) {
    if (spec == "dense") {
      variant = MoeVariant::Dense;
    } else if (spec == "vanilla") {
      variant = MoeVariant::VanillaTop2;
      k = 2;
    } else if (spec == "switch") {
      variant = MoeVariant::SwitchTop1;
      k = 1;
    } else if (spec.starts_with("stacked")) {
      variant = MoeVariant::Stacked;
      stacked_m = std::stoi(spec.substr(7));
      require(stacked_m >= 1, "bad stacked sub-layer count");
      k = 2;
    } else {
      variant = MoeVariant::Smoe;
      layout = parse_layout(spec).to_string();
      n_experts = parse_layout(spec).total();
      k = 2;
    }
  }
};

struct ForwardOptions {
  bool collect_traces = false;
  bool forced_uniform = false;
  Rng* route_rng = nullptr;
};

// RC bookkeeping for one MoE block evaluation: one entry per routed token row.
struct BlockRc {
  char side = 'e';  // 'e' encoder, 'd' decoder
  int block_layer = 0;
  std::vector<TokenRoute> tokens;
  std::vector<int> token_ids;
  std::vector<int> example_index;
};

struct ForwardResult {
  Var logits;     // (total target rows) x vocab
  Var task_loss;  // scalar
  Var aux_loss;   // scalar, zero for dense
  Var total_loss;
  std::vector<int> targets;
  std::vector<GateRoundStats> gate_stats;  // all gates of all MoE blocks
  std::vector<BlockRc> rc;
};

struct TrainMetrics {
  long step = 0;
  double lr = 0.0;
  double task_loss = 0.0;
  double aux_loss = 0.0;
  double grad_norm = 0.0;
  double max_f = 0.0;  // largest first-choice fraction over all gates
};

namespace detail {

inline RealMatrix sinusoidal_positions(int max_len, int d_model) {
  RealMatrix pe(max_len, d_model);
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < d_model / 2; ++i) {
      const double angle = pos / std::pow(10000.0, (2.0 * i) / d_model);
      pe.at(pos, 2 * i) = std::sin(angle);
      pe.at(pos, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

}  // namespace detail

// Toy pre-LayerNorm encoder-decoder transformer with every other FFN layer
// (2nd, 4th, ...) replaced by an MoE block in both encoder and decoder.
// Embeddings are shared between source, target, and the output projection.
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    require(cfg_.d_model % cfg_.n_heads == 0, "d_model must divide by n_heads");
    require(cfg_.d_model % 2 == 0, "d_model must be even");
    if (cfg_.variant == MoeVariant::Smoe) cfg_.n_experts = parse_layout(cfg_.layout).total();
    Rng rng(cfg_.seed, "init");
    store_.create("embed", xavier_uniform(cfg_.vocab_size, cfg_.d_model, rng));
    pos_ = detail::sinusoidal_positions(cfg_.max_seq_len, cfg_.d_model);
    for (int l = 1; l <= cfg_.enc_layers; ++l) build_layer("enc.l" + std::to_string(l), l, false, rng);
    for (int l = 1; l <= cfg_.dec_layers; ++l) build_layer("dec.l" + std::to_string(l), l, true, rng);
    create_ln("enc.ln_f");
    create_ln("dec.ln_f");
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  long param_count() const { return store_.total_values(); }

  static bool is_moe_layer(int layer_index) { return layer_index % 2 == 0; }

  int n_moe_blocks() const {
    if (cfg_.variant == MoeVariant::Dense) return 0;
    int n = 0;
    for (int l = 1; l <= cfg_.enc_layers; ++l) n += is_moe_layer(l);
    for (int l = 1; l <= cfg_.dec_layers; ++l) n += is_moe_layer(l);
    return n;
  }

  int gates_per_block() const {
    switch (cfg_.variant) {
      case MoeVariant::Smoe: return parse_layout(cfg_.layout).strata();
      case MoeVariant::Stacked: return cfg_.stacked_m;
      case MoeVariant::Dense: return 0;
      default: return 1;
    }
  }

  ForwardResult forward(Tape& t, const std::vector<Example>& batch,
                        const ForwardOptions& opt = {}) {
    require(!batch.empty(), "forward: empty batch");
    for (const Example& ex : batch) require(!ex.tgt.empty(), "forward: empty target sequence");
    aux_blocks_.clear();
    ForwardResult res;

    // ---- encoder ----
    std::vector<int> src_ids;
    std::vector<std::pair<int, int>> src_ranges;  // (offset, length) per example
    std::vector<int> src_example;
    for (std::size_t e = 0; e < batch.size(); ++e) {
      src_ranges.emplace_back(static_cast<int>(src_ids.size()),
                              static_cast<int>(batch[e].src.size()));
      for (int id : batch[e].src) {
        check_token(id, batch[e].src.size());
        src_ids.push_back(id);
        src_example.push_back(static_cast<int>(e));
      }
    }
    Var x = embed(t, src_ids, src_ranges);
    for (int l = 1; l <= cfg_.enc_layers; ++l) {
      const std::string p = "enc.l" + std::to_string(l);
      Var attn_in = layer_norm(t, x, p + ".ln1");
      x = t.add(x, attention(t, attn_in, attn_in, src_ranges, src_ranges, p + ".attn", false));
      x = ffn_sublayer(t, x, p, l, 'e', src_ids, src_example, opt, res);
    }
    Var memory = layer_norm(t, x, "enc.ln_f");

    // ---- decoder ----
    std::vector<int> dec_ids;
    std::vector<std::pair<int, int>> dec_ranges;
    std::vector<int> dec_example;
    res.targets.clear();
    for (std::size_t e = 0; e < batch.size(); ++e) {
      dec_ranges.emplace_back(static_cast<int>(dec_ids.size()),
                              static_cast<int>(batch[e].tgt.size()) + 1);
      dec_ids.push_back(VocabSpec::bos);
      dec_example.push_back(static_cast<int>(e));
      for (int id : batch[e].tgt) {
        check_token(id, batch[e].tgt.size() + 1);
        dec_ids.push_back(id);
        dec_example.push_back(static_cast<int>(e));
        res.targets.push_back(id);
      }
      res.targets.push_back(VocabSpec::eos);
    }
    Var y = embed(t, dec_ids, dec_ranges);
    for (int l = 1; l <= cfg_.dec_layers; ++l) {
      const std::string p = "dec.l" + std::to_string(l);
      Var self_in = layer_norm(t, y, p + ".ln_self");
      y = t.add(y, attention(t, self_in, self_in, dec_ranges, dec_ranges, p + ".self", true));
      Var cross_in = layer_norm(t, y, p + ".ln_cross");
      y = t.add(y, attention(t, cross_in, memory, dec_ranges, src_ranges, p + ".cross", false));
      y = ffn_sublayer(t, y, p, l, 'd', dec_ids, dec_example, opt, res);
    }
    y = layer_norm(t, y, "dec.ln_f");
    res.logits = t.matmul_nt(y, t.param(store_, "embed"));

    res.task_loss = t.cross_entropy(res.logits, res.targets);
    if (aux_blocks_.empty()) {
      res.aux_loss = t.zeros(1, 1);
    } else {
      res.aux_loss = model_aux_loss(t, aux_blocks_);
    }
    aux_blocks_.clear();
    res.total_loss = t.add(res.task_loss, res.aux_loss);
    return res;
  }

  TrainMetrics train_step(const std::vector<Example>& batch, double lr,
                          const ForwardOptions& opt = {}) {
    Tape t;
    ForwardResult res = forward(t, batch, opt);
    TrainMetrics m;
    m.task_loss = t.value(res.task_loss).at(0, 0);
    m.aux_loss = t.value(res.aux_loss).at(0, 0);
    if (!std::isfinite(m.task_loss) || !std::isfinite(m.aux_loss)) {
      throw std::runtime_error("train_step: non-finite loss at step " +
                               std::to_string(store_.step() + 1) + " (task=" +
                               std::to_string(m.task_loss) + ", aux=" +
                               std::to_string(m.aux_loss) + ")");
    }
    for (const GateRoundStats& s : res.gate_stats)
      for (double f : s.first_choice_fraction) m.max_f = std::max(m.max_f, f);
    store_.zero_grad();
    t.backward(res.total_loss);
    m.grad_norm = store_.grad_norm();
    store_.adam_step(lr);
    m.step = store_.step();
    m.lr = lr;
    return m;
  }

  // Argmax decoding until EOS or max_len output tokens.
  std::vector<int> greedy_decode(const std::vector<int>& src, int max_len,
                                 const ForwardOptions& opt = {}) {
    std::vector<int> out;
    for (int step = 0; step < max_len; ++step) {
      Tape t;
      Example ex;
      ex.src = src;
      ex.tgt = out;
      ex.tgt.push_back(VocabSpec::eos);  // placeholder; only the logits matter
      ForwardResult res = forward(t, {ex}, opt);
      const RealMatrix& logits = t.value(res.logits);
      const int last = static_cast<int>(out.size());  // row predicting the next token
      int best = 0;
      for (int j = 1; j < logits.cols; ++j)
        if (logits.at(last, j) > logits.at(last, best)) best = j;
      if (best == VocabSpec::eos) break;
      out.push_back(best);
    }
    return out;
  }

 private:
  void check_token(int id, std::size_t seq_len) const {
    require(id >= 0 && id < cfg_.vocab_size, "token id out of vocabulary");
    require(static_cast<int>(seq_len) <= cfg_.max_seq_len, "sequence exceeds max_seq_len");
  }

  void create_ln(const std::string& prefix) {
    store_.create(prefix + ".gain", RealMatrix(1, cfg_.d_model, 1.0));
    store_.create(prefix + ".bias", RealMatrix(1, cfg_.d_model, 0.0));
  }

  void create_attention(const std::string& prefix, Rng& rng) {
    for (const char* w : {".wq", ".wk", ".wv", ".wo"})
      store_.create(prefix + w, xavier_uniform(cfg_.d_model, cfg_.d_model, rng));
  }

  void build_layer(const std::string& prefix, int layer_index, bool decoder, Rng& rng) {
    if (decoder) {
      create_ln(prefix + ".ln_self");
      create_attention(prefix + ".self", rng);
      create_ln(prefix + ".ln_cross");
      create_attention(prefix + ".cross", rng);
    } else {
      create_ln(prefix + ".ln1");
      create_attention(prefix + ".attn", rng);
    }
    const bool moe = is_moe_layer(layer_index) && cfg_.variant != MoeVariant::Dense;
    if (!moe) {
      create_ln(prefix + ".ln2");
      store_.create(prefix + ".ffn.w1", xavier_uniform(cfg_.d_model, cfg_.d_ff, rng));
      store_.create(prefix + ".ffn.w2", xavier_uniform(cfg_.d_ff, cfg_.d_model, rng));
      return;
    }
    const std::string mp = prefix + ".moe";
    switch (cfg_.variant) {
      case MoeVariant::Smoe:
        smoe_blocks_[mp] = SmoeBlockParams::create(store_, mp, parse_layout(cfg_.layout),
                                                   cfg_.d_model, cfg_.d_ff, cfg_.k, rng);
        break;
      case MoeVariant::VanillaTop2:
      case MoeVariant::SwitchTop1:
        create_ln(prefix + ".ln2");
        moe_blocks_[mp] = MoeBlockParams::create(store_, mp, cfg_.n_experts, cfg_.d_model,
                                                 cfg_.d_ff, cfg_.k, rng);
        break;
      case MoeVariant::Stacked:
        create_ln(prefix + ".ln2");
        stacked_blocks_[mp] = StackedBlockParams::create(store_, mp, cfg_.n_experts,
                                                         cfg_.stacked_m, cfg_.d_model,
                                                         cfg_.d_ff, cfg_.k, rng);
        break;
      case MoeVariant::Dense:
        break;
    }
  }

  Var layer_norm(Tape& t, Var x, const std::string& prefix) {
    return t.layer_norm(x, t.param(store_, prefix + ".gain"), t.param(store_, prefix + ".bias"));
  }

  Var embed(Tape& t, const std::vector<int>& ids,
            const std::vector<std::pair<int, int>>& ranges) {
    Var x = t.scale(t.gather_rows(t.param(store_, "embed"), ids), std::sqrt(cfg_.d_model));
    RealMatrix pe(static_cast<int>(ids.size()), cfg_.d_model);
    for (const auto& [off, len] : ranges)
      for (int p = 0; p < len; ++p)
        std::copy(pos_.row(p), pos_.row(p) + cfg_.d_model, pe.row(off + p));
    return t.add_const(x, pe);
  }

  Var attention(Tape& t, Var q_in, Var kv_in, const std::vector<std::pair<int, int>>& q_ranges,
                const std::vector<std::pair<int, int>>& kv_ranges, const std::string& prefix,
                bool causal) {
    const int dh = cfg_.d_model / cfg_.n_heads;
    Var q = t.matmul_nt(q_in, t.param(store_, prefix + ".wq"));
    Var k = t.matmul_nt(kv_in, t.param(store_, prefix + ".wk"));
    Var v = t.matmul_nt(kv_in, t.param(store_, prefix + ".wv"));
    std::vector<Var> per_seq;
    for (std::size_t s = 0; s < q_ranges.size(); ++s) {
      const auto [qo, ql] = q_ranges[s];
      const auto [ko, kl] = kv_ranges[s];
      std::vector<Var> heads;
      for (int h = 0; h < cfg_.n_heads; ++h) {
        Var qh = t.slice_cols(t.slice_rows(q, qo, ql), h * dh, dh);
        Var kh = t.slice_cols(t.slice_rows(k, ko, kl), h * dh, dh);
        Var vh = t.slice_cols(t.slice_rows(v, ko, kl), h * dh, dh);
        Var scores = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        if (causal) scores = t.add_const(scores, causal_mask(ql));
        heads.push_back(t.matmul(t.softmax_rows(scores), vh));
      }
      per_seq.push_back(t.concat_cols(heads));
    }
    return t.matmul_nt(t.concat_rows(per_seq), t.param(store_, prefix + ".wo"));
  }

  const RealMatrix& causal_mask(int len) {
    auto& m = causal_masks_[len];
    if (m.rows != len) {
      m = RealMatrix(len, len);
      for (int i = 0; i < len; ++i)
        for (int j = i + 1; j < len; ++j) m.at(i, j) = -1e9;
    }
    return m;
  }

  Var ffn_sublayer(Tape& t, Var x, const std::string& prefix, int layer_index, char side,
                   const std::vector<int>& token_ids, const std::vector<int>& example_index,
                   const ForwardOptions& opt, ForwardResult& res) {
    const bool moe = is_moe_layer(layer_index) && cfg_.variant != MoeVariant::Dense;
    if (!moe) {
      Var h = layer_norm(t, x, prefix + ".ln2");
      Var w1 = t.param(store_, prefix + ".ffn.w1");
      Var w2 = t.param(store_, prefix + ".ffn.w2");
      return t.add(x, ffn_forward(t, h, w1, w2));
    }
    RoutingOptions ropt;
    ropt.collect_traces = opt.collect_traces;
    ropt.forced_uniform = opt.forced_uniform;
    ropt.route_rng = opt.route_rng;
    const std::string mp = prefix + ".moe";
    BlockOutput block;
    Var out;
    if (cfg_.variant == MoeVariant::Smoe) {
      block = run_smoe_block(t, store_, smoe_blocks_.at(mp), x, ropt);
      out = block.output;  // internal LayerNorm and residual chain
    } else {
      Var h = layer_norm(t, x, prefix + ".ln2");
      if (cfg_.variant == MoeVariant::Stacked) {
        block = run_stacked_block(t, store_, stacked_blocks_.at(mp), h, ropt);
      } else {
        block = run_vanilla_block(t, store_, moe_blocks_.at(mp), h, ropt);
      }
      out = t.add(x, block.output);
    }
    if (!opt.forced_uniform)
      aux_blocks_.push_back(block_aux_loss_from_stats(t, block, gates_per_block(), cfg_.alpha));
    for (GateRoundStats& s : block.gate_stats) {
      if (s.tokens > 0) {
        s.origin = mp;
        res.gate_stats.push_back(s);
      }
    }
    if (opt.collect_traces || opt.forced_uniform) {
      BlockRc rc;
      rc.side = side;
      rc.block_layer = layer_index;
      rc.tokens = std::move(block.tokens);
      rc.token_ids = token_ids;
      rc.example_index = example_index;
      res.rc.push_back(std::move(rc));
    }
    return out;
  }

  ModelConfig cfg_;
  ParameterStore store_;
  RealMatrix pos_;
  std::map<std::string, SmoeBlockParams> smoe_blocks_;
  std::map<std::string, MoeBlockParams> moe_blocks_;
  std::map<std::string, StackedBlockParams> stacked_blocks_;
  std::map<int, RealMatrix> causal_masks_;
  std::vector<Var> aux_blocks_;
};

}  // namespace smoe
