#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "smoe/tape.hpp"

namespace smoe {

// Partition of E experts into L ordered strata. Expert ids are 1-based and
// assigned contiguously stratum by stratum, so the experts visible to gate i
// (all experts in strata i..L) form a suffix range of ids.
struct StratumLayout {
  std::vector<int> sizes;  // s_1..s_L

  int strata() const { return static_cast<int>(sizes.size()); }
  int total() const { return std::accumulate(sizes.begin(), sizes.end(), 0); }

  // first expert id of stratum i (1-based)
  int stratum_begin(int i) const {
    require(i >= 1 && i <= strata(), "stratum index out of range");
    int id = 1;
    for (int j = 0; j < i - 1; ++j) id += sizes[j];
    return id;
  }

  int stratum_of(int expert_id) const {
    require(expert_id >= 1 && expert_id <= total(), "expert id out of range");
    int acc = 0;
    for (int i = 0; i < strata(); ++i) {
      acc += sizes[i];
      if (expert_id <= acc) return i + 1;
    }
    return strata();
  }

  // E_i: number of experts visible to gate i
  int visible_count(int i) const { return total() - stratum_begin(i) + 1; }

  // ordered expert ids visible to gate i (stratum i and all subsequent strata)
  std::vector<int> visible(int i) const {
    const int first = stratum_begin(i);
    std::vector<int> ids(total() - first + 1);
    std::iota(ids.begin(), ids.end(), first);
    return ids;
  }

  std::string to_string() const {
    std::string s;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (i) s += '-';
      s += std::to_string(sizes[i]);
    }
    return s;
  }
};

// Parse config strings like "4-12" or "2-2-2-2" into a layout.
inline StratumLayout parse_layout(const std::string& config) {
  StratumLayout layout;
  std::size_t pos = 0;
  while (pos <= config.size()) {
    std::size_t dash = config.find('-', pos);
    if (dash == std::string::npos) dash = config.size();
    const std::string seg = config.substr(pos, dash - pos);
    require(!seg.empty(), "layout: empty segment in \"" + config + "\"");
    for (char c : seg)
      require(c >= '0' && c <= '9', "layout: non-integer segment \"" + seg + "\"");
    const int n = std::stoi(seg);
    require(n >= 1, "layout: stratum size must be positive, got \"" + seg + "\"");
    layout.sizes.push_back(n);
    pos = dash + 1;
    if (dash == config.size()) break;
  }
  require(!layout.sizes.empty(), "layout: empty config string");
  return layout;
}

// One expert FFN. Following the weight layout FFN(x) = W1 * ReLU(W2 * x):
// W2 is d_ff x d_model (applied first), W1 is d_model x d_ff (applied second).
struct ExpertParams {
  int expert_id = 0;
  std::string w1_name;
  std::string w2_name;

  static ExpertParams create(ParameterStore& store, const std::string& prefix, int expert_id,
                             int d_model, int d_ff, Rng& rng) {
    ExpertParams e;
    e.expert_id = expert_id;
    e.w1_name = prefix + ".expert" + std::to_string(expert_id) + ".w1";
    e.w2_name = prefix + ".expert" + std::to_string(expert_id) + ".w2";
    store.create(e.w1_name, xavier_uniform(d_model, d_ff, rng));
    store.create(e.w2_name, xavier_uniform(d_ff, d_model, rng));
    return e;
  }
};

// Batched expert application: one input token per row of x.
inline Var ffn_forward(Tape& t, ParameterStore& store, const ExpertParams& e, Var x) {
  Var w1 = t.param(store, e.w1_name);
  Var w2 = t.param(store, e.w2_name);
  return t.matmul_nt(t.relu(t.matmul_nt(x, w2)), w1);
}

// Dense FFN with explicit weight vars (shared by the backbone transformer).
inline Var ffn_forward(Tape& t, Var x, Var w1, Var w2) {
  return t.matmul_nt(t.relu(t.matmul_nt(x, w2)), w1);
}

}  // namespace smoe
