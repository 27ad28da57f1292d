#pragma once

#include <optional>
#include <string>
#include <vector>

#include "smoe/experts.hpp"
#include "smoe/routing.hpp"

namespace smoe {

// Expected number of gate rounds per token under uniform routing: a token at
// gate i lands in stratum j with probability s_j / E_i and continues at gate
// j+1 until it exits the final stratum.
inline double expected_hops(const StratumLayout& layout) {
  const int L = layout.strata();
  std::vector<double> h(L + 1, 0.0);
  h[L] = 1.0;
  for (int i = L - 1; i >= 1; --i) {
    const double ei = layout.visible_count(i);
    double acc = 1.0;
    for (int j = i; j <= L - 1; ++j) acc += (layout.sizes[j - 1] / ei) * h[j + 1];
    h[i] = acc;
  }
  return h[1];
}

struct ArchPreset {
  std::string name;
  int d_model = 0;
  int d_ff = 0;
  int n_moe_blocks = 6;           // every other FFN layer of a 6+6 transformer
  double dense_flops_per_token = 0.0;
};

inline ArchPreset arch_base() { return {"base", 512, 2048, 6, 167e6}; }
inline ArchPreset arch_big() { return {"big", 1024, 4096, 6, 506e6}; }

inline ArchPreset arch_preset(const std::string& name) {
  if (name == "base") return arch_base();
  if (name == "big") return arch_big();
  throw std::invalid_argument("unknown arch preset: " + name);
}

// Forward FLOPs of one expert FFN pass: two d_model x d_ff matmuls at 2
// FLOPs per multiply-accumulate.
inline double ffn_flops(const ArchPreset& arch) {
  return 4.0 * arch.d_model * arch.d_ff;
}

// Variant spec strings: "dense", "vanilla", "switch", "stackedM", or a
// stratum layout like "4-12".
enum class FlopsVariantKind { Dense, Vanilla, Switch, Stacked, Smoe };

struct FlopsVariant {
  FlopsVariantKind kind;
  StratumLayout layout;  // smoe only
  int stacked_m = 0;     // stacked only
  std::string spec;
};

inline FlopsVariant parse_flops_variant(const std::string& spec) {
  FlopsVariant v;
  v.spec = spec;
  if (spec == "dense") {
    v.kind = FlopsVariantKind::Dense;
  } else if (spec == "vanilla") {
    v.kind = FlopsVariantKind::Vanilla;
  } else if (spec == "switch") {
    v.kind = FlopsVariantKind::Switch;
  } else if (spec.starts_with("stacked")) {
    v.kind = FlopsVariantKind::Stacked;
    const std::string m = spec.substr(7);
    require(!m.empty(), "flops variant: stacked needs a sub-layer count");
    v.stacked_m = std::stoi(m);
    require(v.stacked_m >= 1, "flops variant: bad sub-layer count");
  } else {
    v.kind = FlopsVariantKind::Smoe;
    v.layout = parse_layout(spec);
  }
  return v;
}

// Dense baseline plus the expected extra FFN passes beyond the one already
// counted in the dense cost: (k * h - 1) per MoE block, with h = 1 for the
// single-gate baselines.
inline double flops_per_token(const FlopsVariant& v, const ArchPreset& arch) {
  const double dense = arch.dense_flops_per_token;
  const double per_ffn = ffn_flops(arch);
  switch (v.kind) {
    case FlopsVariantKind::Dense:
      return dense;
    case FlopsVariantKind::Switch:  // top-1 replaces the FFN pass one for one
      return dense;
    case FlopsVariantKind::Vanilla:  // top-2: one extra pass per block
      return dense + arch.n_moe_blocks * per_ffn;
    case FlopsVariantKind::Stacked:
      return dense + arch.n_moe_blocks * (2.0 * v.stacked_m - 1.0) * per_ffn;
    case FlopsVariantKind::Smoe:
      return dense + arch.n_moe_blocks * (2.0 * expected_hops(v.layout) - 1.0) * per_ffn;
  }
  throw std::invalid_argument("unknown flops variant");
}

inline double flops_per_token(const std::string& spec, const ArchPreset& arch) {
  return flops_per_token(parse_flops_variant(spec), arch);
}

// Reference FLOPs/token values reported for each configuration, in millions.
inline std::optional<double> reference_flops_m(const std::string& arch,
                                               const std::string& variant) {
  struct Row {
    const char* arch;
    const char* variant;
    double flops_m;
  };
  static const Row rows[] = {
      {"base", "dense", 167},    {"base", "vanilla", 192},  {"base", "switch", 167},
      {"base", "4-4", 217},      {"base", "2-2-2-2", 247},  {"base", "stacked2", 242},
      {"base", "stacked4", 327}, {"big", "dense", 506},     {"big", "vanilla", 606},
      {"big", "switch", 506},    {"big", "4-12", 656},      {"big", "12-4", 757},
      {"big", "8-8", 707},       {"big", "4-4-8", 724},     {"big", "8-4-4", 805},
      {"big", "4-4-4-4", 825},
  };
  for (const Row& r : rows)
    if (arch == r.arch && variant == r.variant) return r.flops_m;
  return std::nullopt;
}

// Empirical mean of non-dropped FFN evaluations per token, the runtime
// cross-check of the analytical oracle.
inline double measured_ffn_passes(const std::vector<TokenRoute>& tokens) {
  require(!tokens.empty(), "measured_ffn_passes: no tokens");
  double s = 0.0;
  for (const TokenRoute& tr : tokens) s += tr.expert_evals;
  return s / static_cast<double>(tokens.size());
}

}  // namespace smoe
