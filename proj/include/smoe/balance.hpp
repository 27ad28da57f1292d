#pragma once

#include <vector>

#include "smoe/routing.hpp"
#include "smoe/tape.hpp"

namespace smoe {

// Per-gate load-balancing loss L_i = E_i * sum_e f_e * p_e. The first-choice
// fractions f are constants; the gradient flows through the mean routing
// probabilities p.
inline Var gate_balance_loss(Tape& t, const GateRoundStats& stats) {
  require(stats.tokens >= 1, "gate_balance_loss: empty gate round");
  RealMatrix w(1, stats.visible_experts);
  for (int e = 0; e < stats.visible_experts; ++e)
    w.at(0, e) = stats.visible_experts * stats.first_choice_fraction[e];
  return t.weighted_sum(stats.mean_probs, std::move(w));
}

// Block-level auxiliary loss: alpha * (1/L) * sum_i L_i. Gates that received
// no tokens contribute 0 to the sum but leave the divisor L unchanged.
inline Var block_aux_loss(Tape& t, const std::vector<Var>& gate_losses, int n_gates,
                          double alpha) {
  require(n_gates >= 1, "block_aux_loss: need at least one gate");
  Var total = t.zeros(1, 1);
  for (Var g : gate_losses) total = t.add(total, g);
  return t.scale(total, alpha / n_gates);
}

// Mean over SMoE blocks; the value added to the task loss.
inline Var model_aux_loss(Tape& t, const std::vector<Var>& block_losses) {
  require(!block_losses.empty(), "model_aux_loss: need at least one block");
  Var total = t.zeros(1, 1);
  for (Var b : block_losses) total = t.add(total, b);
  return t.scale(total, 1.0 / static_cast<double>(block_losses.size()));
}

// Convenience: balance loss for every non-empty gate round of a block.
inline Var block_aux_loss_from_stats(Tape& t, const BlockOutput& block, int n_gates,
                                     double alpha) {
  std::vector<Var> per_gate;
  for (const GateRoundStats& s : block.gate_stats)
    if (s.tokens >= 1) per_gate.push_back(gate_balance_loss(t, s));
  return block_aux_loss(t, per_gate, n_gates, alpha);
}

}  // namespace smoe
