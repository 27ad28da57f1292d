#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "smoe/matrix.hpp"
#include "smoe/optim.hpp"

namespace smoe {

// Handle into a Tape.
struct Var {
  int id = -1;
};

// Reverse-mode differentiation tape. Rebuilt per forward pass; each op records
// a closure that propagates the adjoint of its output to its inputs. backward()
// recomputes tape gradients from scratch and accumulates parameter gradients
// into the bound ParameterStore, so repeated calls add up.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(RealMatrix v) { return push(std::move(v), nullptr); }

  Var zeros(int rows, int cols) { return leaf(RealMatrix(rows, cols)); }

  Var param(ParameterStore& store, const std::string& name) {
    Param& p = store.at(name);
    Var v = push(p.value, nullptr);
    bindings_.emplace_back(v.id, &p);
    return v;
  }

  const RealMatrix& value(Var v) const { return node(v).value; }
  const RealMatrix& grad(Var v) const { return node(v).grad; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // ---- elementwise / affine ----

  Var add(Var a, Var b) {
    const RealMatrix &av = value(a), &bv = value(b);
    require(av.same_shape(bv), "add: shape " + shape_str(av) + " vs " + shape_str(bv));
    RealMatrix out = av;
    add_acc(out, bv);
    return push(std::move(out), [this, a, b](const RealMatrix& g) {
      add_acc(node(a).grad, g);
      add_acc(node(b).grad, g);
    });
  }

  // a (n x c) + row (1 x c) broadcast over rows
  Var add_broadcast_row(Var a, Var row) {
    const RealMatrix &av = value(a), &rv = value(row);
    require(rv.rows == 1 && rv.cols == av.cols, "add_broadcast_row: row shape");
    RealMatrix out = av;
    for (int i = 0; i < out.rows; ++i)
      for (int j = 0; j < out.cols; ++j) out.at(i, j) += rv.at(0, j);
    return push(std::move(out), [this, a, row](const RealMatrix& g) {
      add_acc(node(a).grad, g);
      RealMatrix& rg = node(row).grad;
      for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j) rg.at(0, j) += g.at(i, j);
    });
  }

  Var scale(Var a, double c) {
    RealMatrix out = value(a);
    for (double& v : out.data) v *= c;
    return push(std::move(out), [this, a, c](const RealMatrix& g) {
      add_acc(node(a).grad, g, c);
    });
  }

  Var add_const(Var a, const RealMatrix& c) {
    const RealMatrix& av = value(a);
    require(av.same_shape(c), "add_const: shape");
    RealMatrix out = av;
    add_acc(out, c);
    return push(std::move(out), [this, a](const RealMatrix& g) { add_acc(node(a).grad, g); });
  }

  Var relu(Var a) {
    RealMatrix out = value(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;  // subgradient at 0 is 0
    return push(std::move(out), [this, a](const RealMatrix& g) {
      const RealMatrix& av = node(a).value;
      RealMatrix& ag = node(a).grad;
      for (std::size_t i = 0; i < g.data.size(); ++i)
        if (av.data[i] > 0.0) ag.data[i] += g.data[i];
    });
  }

  // ---- matrix products ----

  Var matmul(Var a, Var b) {
    RealMatrix out = smoe::matmul(value(a), value(b));
    return push(std::move(out), [this, a, b](const RealMatrix& g) {
      matmul_nt_acc(node(a).grad, g, node(b).value);   // dA = g * B^T
      matmul_tn_acc(node(b).grad, node(a).value, g);   // dB = A^T * g
    });
  }

  // a * b^T; b stored as (out_dim x in_dim), the layout used for weights
  Var matmul_nt(Var a, Var b) {
    RealMatrix out = smoe::matmul_nt(value(a), value(b));
    return push(std::move(out), [this, a, b](const RealMatrix& g) {
      matmul_acc(node(a).grad, g, node(b).value);      // dA = g * B
      matmul_tn_acc(node(b).grad, g, node(a).value);   // dB = g^T * A
    });
  }

  // ---- normalization / probabilities ----

  Var softmax_rows(Var a) {
    RealMatrix out = value(a);
    for (int i = 0; i < out.rows; ++i) {
      double* r = out.row(i);
      double mx = r[0];
      for (int j = 1; j < out.cols; ++j) mx = std::max(mx, r[j]);
      double s = 0.0;
      for (int j = 0; j < out.cols; ++j) {
        r[j] = std::exp(r[j] - mx);
        s += r[j];
      }
      for (int j = 0; j < out.cols; ++j) r[j] /= s;
    }
    Var self = push(std::move(out), nullptr);
    node(self).back = [this, a, self](const RealMatrix& g) {
      const RealMatrix& p = node(self).value;
      RealMatrix& ag = node(a).grad;
      for (int i = 0; i < p.rows; ++i) {
        const double* pr = p.row(i);
        const double* gr = g.row(i);
        double dot = 0.0;
        for (int j = 0; j < p.cols; ++j) dot += gr[j] * pr[j];
        double* ar = ag.row(i);
        for (int j = 0; j < p.cols; ++j) ar[j] += pr[j] * (gr[j] - dot);
      }
    };
    return self;
  }

  // Per-row standardization with population variance, then affine gain/bias.
  Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5) {
    const RealMatrix& av = value(a);
    const RealMatrix& gv = value(gain);
    const RealMatrix& bv = value(bias);
    require(gv.rows == 1 && gv.cols == av.cols, "layer_norm: gain shape");
    require(bv.rows == 1 && bv.cols == av.cols, "layer_norm: bias shape");
    const int n = av.cols;
    auto xhat = std::make_shared<RealMatrix>(av.rows, n);
    auto inv_std = std::make_shared<std::vector<double>>(av.rows);
    RealMatrix out(av.rows, n);
    for (int i = 0; i < av.rows; ++i) {
      const double* r = av.row(i);
      double mean = 0.0;
      for (int j = 0; j < n; ++j) mean += r[j];
      mean /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) var += (r[j] - mean) * (r[j] - mean);
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[i] = is;
      for (int j = 0; j < n; ++j) {
        const double xh = (r[j] - mean) * is;
        xhat->at(i, j) = xh;
        out.at(i, j) = gv.at(0, j) * xh + bv.at(0, j);
      }
    }
    return push(std::move(out), [this, a, gain, bias, xhat, inv_std, n](const RealMatrix& g) {
      const RealMatrix& gv = node(gain).value;
      RealMatrix& ag = node(a).grad;
      RealMatrix& gg = node(gain).grad;
      RealMatrix& bg = node(bias).grad;
      for (int i = 0; i < g.rows; ++i) {
        const double* gr = g.row(i);
        const double* xh = xhat->row(i);
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int j = 0; j < n; ++j) {
          const double dxh = gr[j] * gv.at(0, j);
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * xh[j];
          gg.at(0, j) += gr[j] * xh[j];
          bg.at(0, j) += gr[j];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        const double is = (*inv_std)[i];
        double* ar = ag.row(i);
        for (int j = 0; j < n; ++j) {
          const double dxh = gr[j] * gv.at(0, j);
          ar[j] += (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat) * is;
        }
      }
    });
  }

  // Mean negative log-softmax probability of targets over non-ignored rows.
  Var cross_entropy(Var logits, const std::vector<int>& targets, int ignore_index = -1) {
    const RealMatrix& lv = value(logits);
    require(static_cast<int>(targets.size()) == lv.rows, "cross_entropy: one target per row");
    auto probs = std::make_shared<RealMatrix>(lv.rows, lv.cols);
    int n_valid = 0;
    double loss = 0.0;
    for (int i = 0; i < lv.rows; ++i) {
      const double* r = lv.row(i);
      double mx = r[0];
      for (int j = 1; j < lv.cols; ++j) mx = std::max(mx, r[j]);
      double s = 0.0;
      for (int j = 0; j < lv.cols; ++j) {
        const double e = std::exp(r[j] - mx);
        probs->at(i, j) = e;
        s += e;
      }
      for (int j = 0; j < lv.cols; ++j) probs->at(i, j) /= s;
      if (targets[i] == ignore_index) continue;
      require(targets[i] >= 0 && targets[i] < lv.cols, "cross_entropy: target out of range");
      loss -= std::log(probs->at(i, targets[i]));
      ++n_valid;
    }
    require(n_valid > 0, "cross_entropy: all positions ignored");
    loss /= n_valid;
    RealMatrix out(1, 1);
    out.at(0, 0) = loss;
    auto tgts = std::make_shared<std::vector<int>>(targets);
    return push(std::move(out),
                [this, logits, probs, tgts, ignore_index, n_valid](const RealMatrix& g) {
                  const double go = g.at(0, 0) / n_valid;
                  RealMatrix& lg = node(logits).grad;
                  for (int i = 0; i < lg.rows; ++i) {
                    if ((*tgts)[i] == ignore_index) continue;
                    double* lr = lg.row(i);
                    const double* pr = probs->row(i);
                    for (int j = 0; j < lg.cols; ++j) lr[j] += go * pr[j];
                    lr[(*tgts)[i]] -= go;
                  }
                });
  }

  // ---- reductions ----

  Var sum(Var a) {
    double s = 0.0;
    for (double v : value(a).data) s += v;
    RealMatrix out(1, 1);
    out.at(0, 0) = s;
    return push(std::move(out), [this, a](const RealMatrix& g) {
      const double go = g.at(0, 0);
      for (double& v : node(a).grad.data) v += go;
    });
  }

  Var col_mean(Var a) {
    const RealMatrix& av = value(a);
    require(av.rows >= 1, "col_mean: empty input");
    RealMatrix out(1, av.cols);
    for (int i = 0; i < av.rows; ++i)
      for (int j = 0; j < av.cols; ++j) out.at(0, j) += av.at(i, j);
    for (int j = 0; j < av.cols; ++j) out.at(0, j) /= av.rows;
    return push(std::move(out), [this, a](const RealMatrix& g) {
      RealMatrix& ag = node(a).grad;
      for (int i = 0; i < ag.rows; ++i)
        for (int j = 0; j < ag.cols; ++j) ag.at(i, j) += g.at(0, j) / ag.rows;
    });
  }

  // sum(a .* w) with constant weights w
  Var weighted_sum(Var a, RealMatrix w) {
    const RealMatrix& av = value(a);
    require(av.same_shape(w), "weighted_sum: shape");
    double s = 0.0;
    for (std::size_t i = 0; i < av.data.size(); ++i) s += av.data[i] * w.data[i];
    RealMatrix out(1, 1);
    out.at(0, 0) = s;
    auto ws = std::make_shared<RealMatrix>(std::move(w));
    return push(std::move(out), [this, a, ws](const RealMatrix& g) {
      const double go = g.at(0, 0);
      RealMatrix& ag = node(a).grad;
      for (std::size_t i = 0; i < ag.data.size(); ++i) ag.data[i] += go * ws->data[i];
    });
  }

  // ---- row / column shuffling ----

  Var gather_rows(Var a, std::vector<int> idx) {
    const RealMatrix& av = value(a);
    RealMatrix out(static_cast<int>(idx.size()), av.cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      require(idx[r] >= 0 && idx[r] < av.rows, "gather_rows: index out of range");
      std::copy(av.row(idx[r]), av.row(idx[r]) + av.cols, out.row(static_cast<int>(r)));
    }
    auto ix = std::make_shared<std::vector<int>>(std::move(idx));
    return push(std::move(out), [this, a, ix](const RealMatrix& g) {
      RealMatrix& ag = node(a).grad;
      for (std::size_t r = 0; r < ix->size(); ++r) {
        double* dst = ag.row((*ix)[r]);
        const double* src = g.row(static_cast<int>(r));
        for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
      }
    });
  }

  Var slice_rows(Var a, int r0, int n) {
    const RealMatrix& av = value(a);
    require(r0 >= 0 && r0 + n <= av.rows, "slice_rows: range");
    RealMatrix out(n, av.cols);
    std::copy(av.row(r0), av.row(r0) + static_cast<std::size_t>(n) * av.cols, out.data.begin());
    return push(std::move(out), [this, a, r0](const RealMatrix& g) {
      RealMatrix& ag = node(a).grad;
      for (int r = 0; r < g.rows; ++r) {
        double* dst = ag.row(r0 + r);
        const double* src = g.row(r);
        for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
      }
    });
  }

  Var slice_cols(Var a, int c0, int n) {
    const RealMatrix& av = value(a);
    require(c0 >= 0 && c0 + n <= av.cols, "slice_cols: range");
    RealMatrix out(av.rows, n);
    for (int r = 0; r < av.rows; ++r)
      std::copy(av.row(r) + c0, av.row(r) + c0 + n, out.row(r));
    return push(std::move(out), [this, a, c0](const RealMatrix& g) {
      RealMatrix& ag = node(a).grad;
      for (int r = 0; r < g.rows; ++r) {
        double* dst = ag.row(r) + c0;
        const double* src = g.row(r);
        for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
      }
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_rows: empty");
    int rows = 0;
    const int cols = value(parts[0]).cols;
    for (Var p : parts) {
      require(value(p).cols == cols, "concat_rows: column mismatch");
      rows += value(p).rows;
    }
    RealMatrix out(rows, cols);
    int r = 0;
    for (Var p : parts) {
      const RealMatrix& pv = value(p);
      std::copy(pv.data.begin(), pv.data.end(), out.row(r));
      r += pv.rows;
    }
    auto ps = std::make_shared<std::vector<Var>>(parts);
    return push(std::move(out), [this, ps](const RealMatrix& g) {
      int r = 0;
      for (Var p : *ps) {
        RealMatrix& pg = node(p).grad;
        for (int i = 0; i < pg.rows; ++i) {
          const double* src = g.row(r + i);
          double* dst = pg.row(i);
          for (int j = 0; j < pg.cols; ++j) dst[j] += src[j];
        }
        r += pg.rows;
      }
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: empty");
    const int rows = value(parts[0]).rows;
    int cols = 0;
    for (Var p : parts) {
      require(value(p).rows == rows, "concat_cols: row mismatch");
      cols += value(p).cols;
    }
    RealMatrix out(rows, cols);
    int c = 0;
    for (Var p : parts) {
      const RealMatrix& pv = value(p);
      for (int r = 0; r < rows; ++r)
        std::copy(pv.row(r), pv.row(r) + pv.cols, out.row(r) + c);
      c += pv.cols;
    }
    auto ps = std::make_shared<std::vector<Var>>(parts);
    return push(std::move(out), [this, ps](const RealMatrix& g) {
      int c = 0;
      for (Var p : *ps) {
        RealMatrix& pg = node(p).grad;
        for (int r = 0; r < pg.rows; ++r) {
          const double* src = g.row(r) + c;
          double* dst = pg.row(r);
          for (int j = 0; j < pg.cols; ++j) dst[j] += src[j];
        }
        c += pg.cols;
      }
    });
  }

  // Copy of base with rows[r] written at idx[r]. Indices must be distinct.
  Var set_rows(Var base, Var rows, std::vector<int> idx) {
    const RealMatrix& bv = value(base);
    const RealMatrix& rv = value(rows);
    require(rv.cols == bv.cols, "set_rows: column mismatch");
    require(static_cast<int>(idx.size()) == rv.rows, "set_rows: one index per row");
    RealMatrix out = bv;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      require(idx[r] >= 0 && idx[r] < bv.rows, "set_rows: index out of range");
      std::copy(rv.row(static_cast<int>(r)), rv.row(static_cast<int>(r)) + rv.cols,
                out.row(idx[r]));
    }
    auto ix = std::make_shared<std::vector<int>>(std::move(idx));
    return push(std::move(out), [this, base, rows, ix](const RealMatrix& g) {
      RealMatrix& bg = node(base).grad;
      RealMatrix& rg = node(rows).grad;
      std::vector<char> replaced(g.rows, 0);
      for (int i : *ix) replaced[i] = 1;
      for (int r = 0; r < g.rows; ++r) {
        if (replaced[r]) continue;
        double* dst = bg.row(r);
        const double* src = g.row(r);
        for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
      }
      for (std::size_t r = 0; r < ix->size(); ++r) {
        double* dst = rg.row(static_cast<int>(r));
        const double* src = g.row((*ix)[r]);
        for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
      }
    });
  }

  // Zero matrix of total_rows with a's rows added at idx (indices may repeat).
  Var scatter_rows_add(Var a, std::vector<int> idx, int total_rows) {
    const RealMatrix& av = value(a);
    require(static_cast<int>(idx.size()) == av.rows, "scatter_rows_add: one index per row");
    RealMatrix out(total_rows, av.cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      require(idx[r] >= 0 && idx[r] < total_rows, "scatter_rows_add: index out of range");
      double* dst = out.row(idx[r]);
      const double* src = av.row(static_cast<int>(r));
      for (int j = 0; j < av.cols; ++j) dst[j] += src[j];
    }
    auto ix = std::make_shared<std::vector<int>>(std::move(idx));
    return push(std::move(out), [this, a, ix](const RealMatrix& g) {
      RealMatrix& ag = node(a).grad;
      for (std::size_t r = 0; r < ix->size(); ++r) {
        double* dst = ag.row(static_cast<int>(r));
        const double* src = g.row((*ix)[r]);
        for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
      }
    });
  }

  // Pick individual entries (r, c) into an n x 1 column.
  Var gather_elems(Var a, std::vector<std::pair<int, int>> pos) {
    const RealMatrix& av = value(a);
    RealMatrix out(static_cast<int>(pos.size()), 1);
    for (std::size_t i = 0; i < pos.size(); ++i) {
      require(pos[i].first >= 0 && pos[i].first < av.rows && pos[i].second >= 0 &&
                  pos[i].second < av.cols,
              "gather_elems: index out of range");
      out.at(static_cast<int>(i), 0) = av.at(pos[i].first, pos[i].second);
    }
    auto ps = std::make_shared<std::vector<std::pair<int, int>>>(std::move(pos));
    return push(std::move(out), [this, a, ps](const RealMatrix& g) {
      RealMatrix& ag = node(a).grad;
      for (std::size_t i = 0; i < ps->size(); ++i)
        ag.at((*ps)[i].first, (*ps)[i].second) += g.at(static_cast<int>(i), 0);
    });
  }

  // Row r of a scaled by w(r, 0).
  Var scale_rows(Var a, Var w) {
    const RealMatrix& av = value(a);
    const RealMatrix& wv = value(w);
    require(wv.cols == 1 && wv.rows == av.rows, "scale_rows: weight shape");
    RealMatrix out = av;
    for (int r = 0; r < out.rows; ++r) {
      const double c = wv.at(r, 0);
      double* row = out.row(r);
      for (int j = 0; j < out.cols; ++j) row[j] *= c;
    }
    return push(std::move(out), [this, a, w](const RealMatrix& g) {
      const RealMatrix& av = node(a).value;
      const RealMatrix& wv = node(w).value;
      RealMatrix& ag = node(a).grad;
      RealMatrix& wg = node(w).grad;
      for (int r = 0; r < g.rows; ++r) {
        const double c = wv.at(r, 0);
        const double* gr = g.row(r);
        const double* ar = av.row(r);
        double* agr = ag.row(r);
        double dot = 0.0;
        for (int j = 0; j < g.cols; ++j) {
          agr[j] += c * gr[j];
          dot += gr[j] * ar[j];
        }
        wg.at(r, 0) += dot;
      }
    });
  }

  // ---- reverse sweep ----

  void backward(Var output) {
    require(output.id >= 0 && output.id < size(), "backward: output not on tape");
    Node& out = node(output);
    require(out.value.rows == 1 && out.value.cols == 1, "backward: output must be scalar");
    for (Node& n : nodes_) n.grad.fill(0.0);
    out.grad.at(0, 0) = 1.0;
    for (int i = output.id; i >= 0; --i) {
      if (nodes_[i].back) nodes_[i].back(nodes_[i].grad);
    }
    for (auto& [id, p] : bindings_) {
      add_acc(p->grad, nodes_[id].grad);
    }
  }

 private:
  struct Node {
    RealMatrix value;
    RealMatrix grad;
    std::function<void(const RealMatrix&)> back;
  };

  Node& node(Var v) { return nodes_[v.id]; }
  const Node& node(Var v) const { return nodes_[v.id]; }

  Var push(RealMatrix v, std::function<void(const RealMatrix&)> back) {
    Node n;
    n.grad = RealMatrix(v.rows, v.cols);
    n.value = std::move(v);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<int, Param*>> bindings_;
};

}  // namespace smoe
