#pragma once

#include <Eigen/Core>

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ug/rng.hpp"
#include "ug/tensor.hpp"

namespace ug {

template <typename Real>
class TapeT;

// Lightweight handle to a node on a tape.
template <typename Real>
struct VarT {
  TapeT<Real>* tape = nullptr;
  int id = -1;
};

// Batch-norm running statistics. Not trainable: exempt from clipping and
// untouched by backward.
template <typename Real>
struct BnStatsT {
  TensorT<Real> mean, var;
  BnStatsT() = default;
  explicit BnStatsT(int k) : mean({k}), var(TensorT<Real>::full({k}, Real(1))) {}
};

// Running LSTM state carried across BPTT windows ([batch x hidden] each).
template <typename Real>
struct LstmCarryT {
  TensorT<Real> h, c;
  bool empty() const { return h.numel() == 0; }
};

// Reverse-mode tape over a fixed op set: the dozen-odd layer-level
// operations the architecture needs, each with a hand-written backward.
// Nodes are recorded in creation order, which is a valid topological
// order, so backward() is a single reverse sweep. One tape per training
// step; parameters receive accumulated gradients when the sweep finishes.
template <typename Real>
class TapeT {
 public:
  using Var = VarT<Real>;
  using Tensor = TensorT<Real>;
  using Parameter = ParameterT<Real>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // When set, every op output and every propagated gradient is checked for
  // NaN/Inf. On by default: non-finite values are an error state.
  bool check_finite = true;

  const Tensor& value(Var v) const { return node(v).value; }
  const Tensor& grad(Var v) const { return node(v).grad; }
  size_t size() const { return nodes_.size(); }

  Var constant(Tensor t) { return push(std::move(t), nullptr); }

  Var leaf(Parameter& p) { return push(p.value, &p); }

  // Leaf that reads a parameter's current value but never writes its grad.
  // Used when one side of the adversarial pair must stay frozen.
  Var frozen(const Parameter& p) { return push(p.value, nullptr); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    require_same_shape(a, b, "add");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] += vb.data[i];
    Var r = push(std::move(out), nullptr);
    record(r, [this, a, b, r] {
      const Tensor& g = grad(r);
      axpy(grad_rw(a), g, Real(1));
      axpy(grad_rw(b), g, Real(1));
    });
    return r;
  }

  Var sub(Var a, Var b) {
    require_same_shape(a, b, "sub");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] -= vb.data[i];
    Var r = push(std::move(out), nullptr);
    record(r, [this, a, b, r] {
      const Tensor& g = grad(r);
      axpy(grad_rw(a), g, Real(1));
      axpy(grad_rw(b), g, Real(-1));
    });
    return r;
  }

  Var mul(Var a, Var b) {
    require_same_shape(a, b, "mul");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] *= vb.data[i];
    Var r = push(std::move(out), nullptr);
    record(r, [this, a, b, r] {
      const Tensor& g = grad(r);
      Tensor& ga = grad_rw(a);
      Tensor& gb = grad_rw(b);
      const Tensor& va = value(a);
      const Tensor& vb2 = value(b);
      for (size_t i = 0; i < g.numel(); ++i) {
        ga.data[i] += g.data[i] * vb2.data[i];
        gb.data[i] += g.data[i] * va.data[i];
      }
    });
    return r;
  }

  Var scale(Var a, Real c) {
    Tensor out = value(a);
    for (auto& x : out.data) x *= c;
    Var r = push(std::move(out), nullptr);
    record(r, [this, a, r, c] { axpy(grad_rw(a), grad(r), c); });
    return r;
  }

  Var sigmoid(Var a) {
    Tensor out = value(a);
    for (auto& x : out.data) x = Real(1) / (Real(1) + std::exp(-x));
    Var r = push(std::move(out), nullptr);
    record(r, [this, a, r] {
      const Tensor& g = grad(r);
      const Tensor& y = value(r);
      Tensor& ga = grad_rw(a);
      for (size_t i = 0; i < g.numel(); ++i)
        ga.data[i] += g.data[i] * y.data[i] * (Real(1) - y.data[i]);
    });
    return r;
  }

  Var tanh(Var a) {
    Tensor out = value(a);
    for (auto& x : out.data) x = std::tanh(x);
    Var r = push(std::move(out), nullptr);
    record(r, [this, a, r] {
      const Tensor& g = grad(r);
      const Tensor& y = value(r);
      Tensor& ga = grad_rw(a);
      for (size_t i = 0; i < g.numel(); ++i)
        ga.data[i] += g.data[i] * (Real(1) - y.data[i] * y.data[i]);
    });
    return r;
  }

  // ---- linear algebra ----

  // [n x k] * [k x m]. Leading dims of `a` are preserved in the result.
  Var matmul(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.cols() != vb.rows()) throw NumericsError("matmul: inner extents differ");
    std::vector<int> oshape = va.shape;
    oshape.back() = vb.cols();
    Tensor out(oshape);
    mat(out).noalias() = cmat(va) * cmat(vb);
    Var r = push(std::move(out), nullptr);
    record(r, [this, a, b, r] {
      const Tensor& g = grad(r);
      mat(grad_rw(a)).noalias() += cmat(g) * cmat(value(b)).transpose();
      mat(grad_rw(b)).noalias() += cmat(value(a)).transpose() * cmat(g);
    });
    return r;
  }

  // [n x k] * [m x k]^T. This is the tied-projection path: logits come from
  // the same storage as the embedding table.
  Var matmul_nt(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.cols() != vb.cols()) throw NumericsError("matmul_nt: inner extents differ");
    std::vector<int> oshape = va.shape;
    oshape.back() = vb.rows();
    Tensor out(oshape);
    mat(out).noalias() = cmat(va) * cmat(vb).transpose();
    Var r = push(std::move(out), nullptr);
    record(r, [this, a, b, r] {
      const Tensor& g = grad(r);
      mat(grad_rw(a)).noalias() += cmat(g) * cmat(value(b));
      mat(grad_rw(b)).noalias() += cmat(g).transpose() * cmat(value(a));
    });
    return r;
  }

  // Broadcast-add a length-k vector to every row of [n x k].
  Var add_rowvec(Var m, Var v) {
    const Tensor& vm = value(m);
    const Tensor& vv = value(v);
    if (static_cast<size_t>(vm.cols()) != vv.numel())
      throw NumericsError("add_rowvec: vector length != column count");
    Tensor out = vm;
    const int n = out.rows(), k = out.cols();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) out.data[static_cast<size_t>(i) * k + j] += vv.data[j];
    Var r = push(std::move(out), nullptr);
    record(r, [this, m, v, r] {
      const Tensor& g = grad(r);
      axpy(grad_rw(m), g, Real(1));
      Tensor& gv = grad_rw(v);
      const int n2 = g.rows(), k2 = g.cols();
      for (int i = 0; i < n2; ++i)
        for (int j = 0; j < k2; ++j) gv.data[j] += g.data[static_cast<size_t>(i) * k2 + j];
    });
    return r;
  }

  Var concat_cols(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.rows() != vb.rows()) throw NumericsError("concat_cols: row counts differ");
    const int n = va.rows(), ca = va.cols(), cb = vb.cols();
    std::vector<int> oshape = va.shape;
    oshape.back() = ca + cb;
    Tensor out(oshape);
    for (int i = 0; i < n; ++i) {
      Real* dst = out.data.data() + static_cast<size_t>(i) * (ca + cb);
      const Real* pa = va.data.data() + static_cast<size_t>(i) * ca;
      const Real* pb = vb.data.data() + static_cast<size_t>(i) * cb;
      std::copy(pa, pa + ca, dst);
      std::copy(pb, pb + cb, dst + ca);
    }
    Var r = push(std::move(out), nullptr);
    record(r, [this, a, b, r, n, ca, cb] {
      const Tensor& g = grad(r);
      Tensor& ga = grad_rw(a);
      Tensor& gb = grad_rw(b);
      for (int i = 0; i < n; ++i) {
        const Real* src = g.data.data() + static_cast<size_t>(i) * (ca + cb);
        Real* pa = ga.data.data() + static_cast<size_t>(i) * ca;
        Real* pb = gb.data.data() + static_cast<size_t>(i) * cb;
        for (int j = 0; j < ca; ++j) pa[j] += src[j];
        for (int j = 0; j < cb; ++j) pb[j] += src[ca + j];
      }
    });
    return r;
  }

  Var slice_rows(Var x, int r0, int r1) {
    const Tensor& vx = value(x);
    const int n = vx.rows(), k = vx.cols();
    if (r0 < 0 || r1 > n || r0 >= r1) throw NumericsError("slice_rows: bad range");
    Tensor out({r1 - r0, k});
    std::copy(vx.data.begin() + static_cast<size_t>(r0) * k,
              vx.data.begin() + static_cast<size_t>(r1) * k, out.data.begin());
    Var r = push(std::move(out), nullptr);
    record(r, [this, x, r, r0, k] {
      const Tensor& g = grad(r);
      Tensor& gx = grad_rw(x);
      Real* dst = gx.data.data() + static_cast<size_t>(r0) * k;
      for (size_t i = 0; i < g.numel(); ++i) dst[i] += g.data[i];
    });
    return r;
  }

  Var stack_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw NumericsError("stack_rows: empty");
    const int k = value(parts[0]).cols();
    int total = 0;
    for (const Var p : parts) {
      if (value(p).cols() != k) throw NumericsError("stack_rows: column counts differ");
      total += value(p).rows();
    }
    Tensor out({total, k});
    size_t off = 0;
    for (const Var p : parts) {
      const Tensor& vp = value(p);
      std::copy(vp.data.begin(), vp.data.end(), out.data.begin() + off);
      off += vp.numel();
    }
    Var r = push(std::move(out), nullptr);
    std::vector<Var> ps = parts;
    record(r, [this, ps, r] {
      const Tensor& g = grad(r);
      size_t off2 = 0;
      for (const Var p : ps) {
        Tensor& gp = grad_rw(p);
        for (size_t i = 0; i < gp.numel(); ++i) gp.data[i] += g.data[off2 + i];
        off2 += gp.numel();
      }
    });
    return r;
  }

  Var mean_rows(Var x) {
    const Tensor& vx = value(x);
    const int n = vx.rows(), k = vx.cols();
    if (n == 0) throw NumericsError("mean_rows: empty input");
    Tensor out({1, k});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) out.data[j] += vx.data[static_cast<size_t>(i) * k + j];
    for (auto& v : out.data) v /= Real(n);
    Var r = push(std::move(out), nullptr);
    record(r, [this, x, r, n, k] {
      const Tensor& g = grad(r);
      Tensor& gx = grad_rw(x);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j)
          gx.data[static_cast<size_t>(i) * k + j] += g.data[j] / Real(n);
    });
    return r;
  }

  // Scalar dot product with a fixed coefficient tensor. Accumulates in
  // double so the reduction does not dominate single-precision error.
  Var weighted_sum(Var x, Tensor coeffs) {
    const Tensor& vx = value(x);
    if (!vx.same_shape(coeffs)) throw NumericsError("weighted_sum: shape mismatch");
    double acc = 0;
    for (size_t i = 0; i < vx.numel(); ++i)
      acc += static_cast<double>(vx.data[i]) * static_cast<double>(coeffs.data[i]);
    Var r = push(Tensor::scalar(static_cast<Real>(acc)), nullptr);
    auto cs = std::make_shared<Tensor>(std::move(coeffs));
    record(r, [this, x, r, cs] {
      const Real g = grad(r).data[0];
      Tensor& gx = grad_rw(x);
      for (size_t i = 0; i < gx.numel(); ++i) gx.data[i] += g * cs->data[i];
    });
    return r;
  }

  Var mean_all(Var x) {
    const Tensor& vx = value(x);
    const size_t n = vx.numel();
    if (n == 0) throw NumericsError("mean_all: empty input");
    double acc = 0;
    for (const Real v : vx.data) acc += static_cast<double>(v);
    Var r = push(Tensor::scalar(static_cast<Real>(acc / static_cast<double>(n))), nullptr);
    record(r, [this, x, r, n] {
      const Real g = grad(r).data[0] / Real(n);
      Tensor& gx = grad_rw(x);
      for (auto& v : gx.data) v += g;
    });
    return r;
  }

  // ---- embedding lookup ----

  // Gather rows of `table` [V x d] by id; out is [ids.rows, ids.cols, d].
  // Backward scatter-adds, so absent rows keep an exactly-zero gradient.
  Var rows_lookup(Var table, const IdMatrix& ids) {
    const Tensor& tv = value(table);
    const int vsize = tv.rows(), d = tv.cols();
    Tensor out({ids.rows, ids.cols, d});
    for (size_t i = 0; i < ids.numel(); ++i) {
      const int32_t id = ids.v[i];
      if (id < 0 || id >= vsize) throw NumericsError("rows_lookup: id out of range");
      std::copy(tv.data.begin() + static_cast<size_t>(id) * d,
                tv.data.begin() + static_cast<size_t>(id) * d + d,
                out.data.begin() + i * d);
    }
    Var r = push(std::move(out), nullptr);
    auto ids_copy = std::make_shared<IdMatrix>(ids);
    record(r, [this, table, r, ids_copy, d] {
      const Tensor& g = grad(r);
      Tensor& gt = grad_rw(table);
      for (size_t i = 0; i < ids_copy->numel(); ++i) {
        Real* dst = gt.data.data() + static_cast<size_t>(ids_copy->v[i]) * d;
        const Real* src = g.data.data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
    return r;
  }

  // ---- recurrent cell over a window ----

  // LSTM over x [T x b x in] with weights w_ih [in x 4h], w_hh [h x 4h],
  // bias [4h]; gate order i,f,g,o. `carry_in` provides h0/c0 and is treated
  // as a constant: state is detached at window boundaries. Final states are
  // written to `carry_out` when given.
  Var lstm_seq(Var x, Var w_ih, Var w_hh, Var bias,
               const LstmCarryT<Real>* carry_in = nullptr,
               LstmCarryT<Real>* carry_out = nullptr) {
    const Tensor& vx = value(x);
    if (vx.shape.size() != 3) throw NumericsError("lstm_seq: input must be [T x b x in]");
    const int T = vx.shape[0], b = vx.shape[1], in = vx.shape[2];
    const Tensor& wih = value(w_ih);
    const Tensor& whh = value(w_hh);
    const int h = whh.rows();
    if (wih.rows() != in || wih.cols() != 4 * h || whh.cols() != 4 * h ||
        static_cast<int>(value(bias).numel()) != 4 * h)
      throw NumericsError("lstm_seq: weight shapes inconsistent");

    auto saved = std::make_shared<LstmSaved>();
    saved->T = T;
    saved->b = b;
    saved->in = in;
    saved->h = h;
    saved->gates = Tensor({T * b, 4 * h});
    saved->cells = Tensor({T * b, h});
    saved->tanh_c = Tensor({T * b, h});
    saved->h0 = (carry_in && !carry_in->empty()) ? carry_in->h : Tensor({b, h});
    saved->c0 = (carry_in && !carry_in->empty()) ? carry_in->c : Tensor({b, h});

    Tensor out({T, b, h});

    // Input projection for all timesteps in one GEMM.
    mat(saved->gates).noalias() = cmat(vx, T * b, in) * cmat(wih);

    const Real* bias_p = value(bias).data.data();
    for (int t = 0; t < T; ++t) {
      auto G = block(saved->gates, t * b, b);
      if (t == 0) {
        G.noalias() += cmat(saved->h0, b, h) * cmat(whh);
      } else {
        Eigen::Map<const EMat> hprev(out.data.data() + (static_cast<size_t>(t) - 1) * b * h, b, h);
        G.noalias() += hprev * cmat(whh);
      }
      const Real* cprev_base =
          t == 0 ? saved->c0.data.data()
                 : saved->cells.data.data() + (static_cast<size_t>(t) - 1) * b * h;
      Real* gp = saved->gates.data.data() + static_cast<size_t>(t) * b * 4 * h;
      Real* cp = saved->cells.data.data() + static_cast<size_t>(t) * b * h;
      Real* tp = saved->tanh_c.data.data() + static_cast<size_t>(t) * b * h;
      Real* op = out.data.data() + static_cast<size_t>(t) * b * h;
      for (int r = 0; r < b; ++r) {
        Real* g = gp + static_cast<size_t>(r) * 4 * h;
        const Real* cpr = cprev_base + static_cast<size_t>(r) * h;
        Real* c = cp + static_cast<size_t>(r) * h;
        Real* tc = tp + static_cast<size_t>(r) * h;
        Real* o = op + static_cast<size_t>(r) * h;
        for (int j = 0; j < h; ++j) {
          const Real gi = sigm(g[j] + bias_p[j]);
          const Real gf = sigm(g[h + j] + bias_p[h + j]);
          const Real gg = std::tanh(g[2 * h + j] + bias_p[2 * h + j]);
          const Real go = sigm(g[3 * h + j] + bias_p[3 * h + j]);
          g[j] = gi;
          g[h + j] = gf;
          g[2 * h + j] = gg;
          g[3 * h + j] = go;
          c[j] = gf * cpr[j] + gi * gg;
          tc[j] = std::tanh(c[j]);
          o[j] = go * tc[j];
        }
      }
    }

    Var r = push(std::move(out), nullptr);
    record(r, [this, x, w_ih, w_hh, bias, r, saved] { lstm_backward(x, w_ih, w_hh, bias, r, saved); });

    if (carry_out) {
      const Tensor& ov = value(r);
      carry_out->h = Tensor({b, h});
      carry_out->c = Tensor({b, h});
      std::copy(ov.data.end() - static_cast<size_t>(b) * h, ov.data.end(),
                carry_out->h.data.begin());
      std::copy(saved->cells.data.end() - static_cast<size_t>(b) * h, saved->cells.data.end(),
                carry_out->c.data.begin());
    }
    return r;
  }

  // ---- attention pooling ----

  // Linear sequence attention over states [T x b x d] with vector a [d]:
  // scores s_t = a . state_t, weights = softmax over valid timesteps,
  // output [b x d] = sum_t w_t * state_t. `lengths` restricts pooling to
  // each sequence's first len timesteps (empty = all valid).
  Var attention_pool(Var states, Var attn, const std::vector<int>& lengths = {}) {
    const Tensor& vs = value(states);
    if (vs.shape.size() != 3) throw NumericsError("attention_pool: states must be [T x b x d]");
    const int T = vs.shape[0], b = vs.shape[1], d = vs.shape[2];
    if (T < 1) throw NumericsError("attention_pool: needs at least one timestep");
    const Tensor& va = value(attn);
    if (static_cast<int>(va.numel()) != d) throw NumericsError("attention_pool: vector size != d");
    if (!lengths.empty() && static_cast<int>(lengths.size()) != b)
      throw NumericsError("attention_pool: lengths size != batch");

    auto saved = std::make_shared<AttnSaved>();
    saved->T = T;
    saved->b = b;
    saved->d = d;
    saved->weights = Tensor({b, T});
    saved->lengths.assign(b, T);
    if (!lengths.empty())
      for (int j = 0; j < b; ++j) {
        if (lengths[j] < 1 || lengths[j] > T) throw NumericsError("attention_pool: bad length");
        saved->lengths[j] = lengths[j];
      }

    Tensor out({b, d});
    for (int j = 0; j < b; ++j) {
      const int len = saved->lengths[j];
      Real maxs = -std::numeric_limits<Real>::infinity();
      std::vector<Real> s(len);
      for (int t = 0; t < len; ++t) {
        const Real* st = vs.data.data() + (static_cast<size_t>(t) * b + j) * d;
        Real acc = 0;
        for (int k = 0; k < d; ++k) acc += st[k] * va.data[k];
        s[t] = acc;
        maxs = std::max(maxs, acc);
      }
      Real z = 0;
      for (int t = 0; t < len; ++t) {
        s[t] = std::exp(s[t] - maxs);
        z += s[t];
      }
      Real* w = saved->weights.data.data() + static_cast<size_t>(j) * T;
      Real* o = out.data.data() + static_cast<size_t>(j) * d;
      for (int t = 0; t < len; ++t) {
        w[t] = s[t] / z;
        const Real* st = vs.data.data() + (static_cast<size_t>(t) * b + j) * d;
        for (int k = 0; k < d; ++k) o[k] += w[t] * st[k];
      }
    }

    Var r = push(std::move(out), nullptr);
    record(r, [this, states, attn, r, saved] {
      const Tensor& g = grad(r);
      const Tensor& vs2 = value(states);
      const Tensor& va2 = value(attn);
      Tensor& gs = grad_rw(states);
      Tensor& ga = grad_rw(attn);
      const int T2 = saved->T, b2 = saved->b, d2 = saved->d;
      for (int j = 0; j < b2; ++j) {
        const int len = saved->lengths[j];
        const Real* w = saved->weights.data.data() + static_cast<size_t>(j) * T2;
        const Real* go = g.data.data() + static_cast<size_t>(j) * d2;
        // dw_t = go . state_t ; ds via softmax jacobian ; then into states/attn
        std::vector<Real> dw(len);
        Real wdw = 0;
        for (int t = 0; t < len; ++t) {
          const Real* st = vs2.data.data() + (static_cast<size_t>(t) * b2 + j) * d2;
          Real acc = 0;
          for (int k = 0; k < d2; ++k) acc += go[k] * st[k];
          dw[t] = acc;
          wdw += w[t] * acc;
        }
        for (int t = 0; t < len; ++t) {
          const Real ds = w[t] * (dw[t] - wdw);
          const Real* st = vs2.data.data() + (static_cast<size_t>(t) * b2 + j) * d2;
          Real* gst = gs.data.data() + (static_cast<size_t>(t) * b2 + j) * d2;
          for (int k = 0; k < d2; ++k) {
            gst[k] += w[t] * go[k] + ds * va2.data[k];
            ga.data[k] += ds * st[k];
          }
        }
      }
    });
    return r;
  }

  // ---- batch normalization ----

  // Per-feature batch norm over [n x k]. Train mode uses biased batch
  // variance with epsilon 1e-5 and, when `stats` is given, updates running
  // statistics with momentum 0.9. Eval mode normalizes by the running
  // statistics. Train mode requires n >= 2.
  Var batch_norm(Var x, Var gamma, Var beta, BnStatsT<Real>* stats, bool train) {
    const Tensor& vx = value(x);
    const int n = vx.rows(), k = vx.cols();
    if (static_cast<int>(value(gamma).numel()) != k || static_cast<int>(value(beta).numel()) != k)
      throw NumericsError("batch_norm: gamma/beta size != feature count");
    if (train && n < 2) throw NumericsError("batch_norm: train mode needs n >= 2");
    if (!train && !stats) throw NumericsError("batch_norm: eval mode needs running stats");
    constexpr Real kEps = Real(1e-5);

    auto saved = std::make_shared<BnSaved>();
    saved->train = train;
    saved->xhat = Tensor({n, k});
    saved->inv_std = Tensor({k});

    Tensor mean({k}), var({k});
    if (train) {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) mean.data[j] += vx.data[static_cast<size_t>(i) * k + j];
      for (auto& m : mean.data) m /= Real(n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
          const Real dlt = vx.data[static_cast<size_t>(i) * k + j] - mean.data[j];
          var.data[j] += dlt * dlt;
        }
      for (auto& v : var.data) v /= Real(n);
      if (stats) {
        for (int j = 0; j < k; ++j) {
          stats->mean.data[j] = Real(0.9) * stats->mean.data[j] + Real(0.1) * mean.data[j];
          stats->var.data[j] = Real(0.9) * stats->var.data[j] + Real(0.1) * var.data[j];
        }
      }
    } else {
      mean = stats->mean;
      var = stats->var;
    }

    for (int j = 0; j < k; ++j) saved->inv_std.data[j] = Real(1) / std::sqrt(var.data[j] + kEps);

    Tensor out({n, k});
    const Tensor& vg = value(gamma);
    const Tensor& vb = value(beta);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        const size_t idx = static_cast<size_t>(i) * k + j;
        const Real xh = (vx.data[idx] - mean.data[j]) * saved->inv_std.data[j];
        saved->xhat.data[idx] = xh;
        out.data[idx] = vg.data[j] * xh + vb.data[j];
      }

    Var r = push(std::move(out), nullptr);
    record(r, [this, x, gamma, beta, r, saved, n, k] {
      const Tensor& g = grad(r);
      const Tensor& vg2 = value(gamma);
      Tensor& gx = grad_rw(x);
      Tensor& gg = grad_rw(gamma);
      Tensor& gb = grad_rw(beta);
      for (int j = 0; j < k; ++j) {
        Real dg = 0, db = 0;
        for (int i = 0; i < n; ++i) {
          const size_t idx = static_cast<size_t>(i) * k + j;
          dg += g.data[idx] * saved->xhat.data[idx];
          db += g.data[idx];
        }
        gg.data[j] += dg;
        gb.data[j] += db;
        if (saved->train) {
          // dx = (inv_std/n) * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
          const Real sum_dxhat = db * vg2.data[j];
          const Real sum_dxhat_xhat = dg * vg2.data[j];
          for (int i = 0; i < n; ++i) {
            const size_t idx = static_cast<size_t>(i) * k + j;
            const Real dxhat = g.data[idx] * vg2.data[j];
            gx.data[idx] += saved->inv_std.data[j] / Real(n) *
                            (Real(n) * dxhat - sum_dxhat - saved->xhat.data[idx] * sum_dxhat_xhat);
          }
        } else {
          for (int i = 0; i < n; ++i) {
            const size_t idx = static_cast<size_t>(i) * k + j;
            gx.data[idx] += g.data[idx] * vg2.data[j] * saved->inv_std.data[j];
          }
        }
      }
    });
    return r;
  }

  // ---- dropout ----

  // Inverted dropout: zero with probability `rate`, scale survivors by
  // 1/(1-rate). The locked variant draws one [b x d] mask per sequence and
  // reuses it across all T timesteps (input must be [T x b x d]).
  Var dropout(Var x, Real rate, RngState& rng, bool locked = false) {
    if (rate < Real(0) || rate >= Real(1)) throw NumericsError("dropout: rate must be in [0,1)");
    const Tensor& vx = value(x);
    if (rate == Real(0)) {
      Tensor out = vx;
      Var r = push(std::move(out), nullptr);
      record(r, [this, x, r] { axpy(grad_rw(x), grad(r), Real(1)); });
      return r;
    }
    const Real keep = Real(1) - rate;
    const Real inv = Real(1) / keep;
    auto mask = std::make_shared<std::vector<Real>>();
    Tensor out = vx;
    if (locked) {
      if (vx.shape.size() != 3) throw NumericsError("dropout: locked variant needs [T x b x d]");
      const int T = vx.shape[0], b = vx.shape[1], d = vx.shape[2];
      mask->resize(static_cast<size_t>(b) * d);
      for (auto& m : *mask) m = rng.bernoulli(keep) ? inv : Real(0);
      for (int t = 0; t < T; ++t)
        for (size_t i = 0; i < mask->size(); ++i)
          out.data[static_cast<size_t>(t) * b * d + i] *= (*mask)[i];
    } else {
      mask->resize(vx.numel());
      for (auto& m : *mask) m = rng.bernoulli(keep) ? inv : Real(0);
      for (size_t i = 0; i < out.numel(); ++i) out.data[i] *= (*mask)[i];
    }
    Var r = push(std::move(out), nullptr);
    const bool is_locked = locked;
    record(r, [this, x, r, mask, is_locked] {
      const Tensor& g = grad(r);
      Tensor& gx = grad_rw(x);
      if (is_locked) {
        const size_t md = mask->size();
        for (size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i] * (*mask)[i % md];
      } else {
        for (size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i] * (*mask)[i];
      }
    });
    return r;
  }

  // ---- softmax cross entropy ----

  // Mean negative log-likelihood over rows with nonzero weight:
  // sum_i w_i * (logsumexp(l_i) - l_i[t_i]) / sum_i w_i. Rows with w=0 are
  // skipped entirely (their target id is not read).
  Var softmax_xent(Var logits, const std::vector<int32_t>& targets,
                   const std::vector<Real>& weights) {
    const Tensor& vl = value(logits);
    const int n = vl.rows(), V = vl.cols();
    if (static_cast<int>(targets.size()) != n || static_cast<int>(weights.size()) != n)
      throw NumericsError("softmax_xent: targets/weights size != row count");

    auto saved = std::make_shared<XentSaved>();
    saved->probs = Tensor({n, V});
    saved->targets = targets;
    saved->weights = weights;

    double total = 0, wsum = 0;
    for (int i = 0; i < n; ++i) {
      const Real w = weights[i];
      const Real* l = vl.data.data() + static_cast<size_t>(i) * V;
      Real* p = saved->probs.data.data() + static_cast<size_t>(i) * V;
      if (w == Real(0)) continue;
      const int32_t t = targets[i];
      if (t < 0 || t >= V) throw NumericsError("softmax_xent: target id out of range");
      Real mx = l[0];
      for (int j = 1; j < V; ++j) mx = std::max(mx, l[j]);
      double z = 0;
      for (int j = 0; j < V; ++j) {
        p[j] = std::exp(l[j] - mx);
        z += static_cast<double>(p[j]);
      }
      for (int j = 0; j < V; ++j) p[j] = static_cast<Real>(p[j] / z);
      total += static_cast<double>(w) * (std::log(z) + static_cast<double>(mx) - static_cast<double>(l[t]));
      wsum += static_cast<double>(w);
    }
    if (wsum == 0) throw NumericsError("softmax_xent: no rows with positive weight");
    saved->wsum = static_cast<Real>(wsum);

    Var r = push(Tensor::scalar(static_cast<Real>(total / wsum)), nullptr);
    record(r, [this, logits, r, saved, n, V] {
      const Real g = grad(r).data[0];
      Tensor& gl = grad_rw(logits);
      for (int i = 0; i < n; ++i) {
        const Real w = saved->weights[i];
        if (w == Real(0)) continue;
        const Real c = g * w / saved->wsum;
        const Real* p = saved->probs.data.data() + static_cast<size_t>(i) * V;
        Real* gr = gl.data.data() + static_cast<size_t>(i) * V;
        for (int j = 0; j < V; ++j) gr[j] += c * p[j];
        gr[saved->targets[i]] -= c;
      }
    });
    return r;
  }

  // ---- backward ----

  // Reverse sweep from `loss` (must be scalar). Gradients accumulate into
  // every reachable Parameter; call zero_grads between steps to reset.
  void backward(Var loss) {
    if (loss.tape != this) throw NumericsError("backward: var from another tape");
    if (value(loss).numel() != 1) throw NumericsError("backward: loss must be a scalar");
    if (swept_) throw NumericsError("backward: tape already swept");
    swept_ = true;
    nodes_[loss.id].grad.data[0] = Real(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& nd = nodes_[i];
      if (check_finite && !nd.grad.all_finite())
        throw NumericsError("backward: non-finite gradient encountered");
      if (nd.backfn) nd.backfn();
    }
    for (auto& nd : nodes_) {
      if (!nd.bound) continue;
      if (check_finite && !nd.grad.all_finite())
        throw NumericsError("backward: non-finite parameter gradient");
      for (size_t i = 0; i < nd.grad.numel(); ++i) nd.bound->grad.data[i] += nd.grad.data[i];
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void()> backfn;
    Parameter* bound = nullptr;
  };

  struct LstmSaved {
    int T = 0, b = 0, in = 0, h = 0;
    Tensor gates;   // post-activation i,f,g,o  [T*b x 4h]
    Tensor cells;   // c_t                      [T*b x h]
    Tensor tanh_c;  // tanh(c_t)                [T*b x h]
    Tensor h0, c0;  // detached initial state   [b x h]
  };

  struct AttnSaved {
    int T = 0, b = 0, d = 0;
    Tensor weights;  // [b x T], zero beyond each length
    std::vector<int> lengths;
  };

  struct BnSaved {
    bool train = true;
    Tensor xhat;
    Tensor inv_std;
  };

  struct XentSaved {
    Tensor probs;
    std::vector<int32_t> targets;
    std::vector<Real> weights;
    Real wsum = 0;
  };

  using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  static Eigen::Map<EMat> mat(Tensor& t) { return {t.data.data(), t.rows(), t.cols()}; }
  static Eigen::Map<const EMat> cmat(const Tensor& t) {
    return {t.data.data(), t.rows(), t.cols()};
  }
  static Eigen::Map<const EMat> cmat(const Tensor& t, int r, int c) {
    return {t.data.data(), r, c};
  }
  static Eigen::Map<EMat> block(Tensor& t, int row0, int nrows) {
    return {t.data.data() + static_cast<size_t>(row0) * t.cols(), nrows, t.cols()};
  }

  static Real sigm(Real v) { return Real(1) / (Real(1) + std::exp(-v)); }

  void require_same_shape(Var a, Var b, const char* op) const {
    if (!value(a).same_shape(value(b)))
      throw NumericsError(std::string(op) + ": shape mismatch");
  }

  static void axpy(Tensor& dst, const Tensor& src, Real a) {
    for (size_t i = 0; i < dst.numel(); ++i) dst.data[i] += a * src.data[i];
  }

  Node& node(Var v) { return nodes_[v.id]; }
  const Node& node(Var v) const { return nodes_[v.id]; }
  Tensor& grad_rw(Var v) { return nodes_[v.id].grad; }

  Var push(Tensor value, Parameter* bound) {
    if (check_finite && !value.all_finite())
      throw NumericsError("tape: op produced non-finite values");
    Node nd;
    nd.grad = Tensor(value.shape);
    nd.value = std::move(value);
    nd.bound = bound;
    nodes_.push_back(std::move(nd));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  void record(Var v, std::function<void()> fn) { nodes_[v.id].backfn = std::move(fn); }

  void lstm_backward(Var x, Var w_ih, Var w_hh, Var bias, Var out,
                     const std::shared_ptr<LstmSaved>& s) {
    const int T = s->T, b = s->b, in = s->in, h = s->h;
    const Tensor& g_out = grad(out);
    const Tensor& v_out = value(out);
    const Tensor& whh = value(w_hh);
    const Tensor& wih = value(w_ih);

    Tensor dG({T * b, 4 * h});
    Tensor dh_carry({b, h}), dc_carry({b, h});

    for (int t = T - 1; t >= 0; --t) {
      const size_t goff = static_cast<size_t>(t) * b * 4 * h;
      const size_t soff = static_cast<size_t>(t) * b * h;
      for (int r = 0; r < b; ++r) {
        const Real* gate = s->gates.data.data() + goff + static_cast<size_t>(r) * 4 * h;
        const Real* tc = s->tanh_c.data.data() + soff + static_cast<size_t>(r) * h;
        const Real* cprev = t == 0 ? s->c0.data.data() + static_cast<size_t>(r) * h
                                   : s->cells.data.data() + soff - static_cast<size_t>(b) * h +
                                         static_cast<size_t>(r) * h;
        const Real* go = g_out.data.data() + soff + static_cast<size_t>(r) * h;
        Real* dhc = dh_carry.data.data() + static_cast<size_t>(r) * h;
        Real* dcc = dc_carry.data.data() + static_cast<size_t>(r) * h;
        Real* dg = dG.data.data() + goff + static_cast<size_t>(r) * 4 * h;
        for (int j = 0; j < h; ++j) {
          const Real gi = gate[j], gf = gate[h + j], gg = gate[2 * h + j], goo = gate[3 * h + j];
          const Real dh = go[j] + dhc[j];
          const Real dc = dcc[j] + dh * goo * (Real(1) - tc[j] * tc[j]);
          const Real do_ = dh * tc[j];
          dg[j] = dc * gg * gi * (Real(1) - gi);
          dg[h + j] = dc * cprev[j] * gf * (Real(1) - gf);
          dg[2 * h + j] = dc * gi * (Real(1) - gg * gg);
          dg[3 * h + j] = do_ * goo * (Real(1) - goo);
          dcc[j] = dc * gf;
          dhc[j] = Real(0);  // rebuilt from dG_t below
        }
      }
      // dh_{t-1} = dG_t * Whh^T ; dWhh += h_{t-1}^T * dG_t
      auto dGt = block(dG, t * b, b);
      mat(dh_carry).noalias() = dGt * cmat(whh).transpose();
      Tensor& gwhh = grad_rw(w_hh);
      if (t == 0) {
        mat(gwhh).noalias() += cmat(s->h0, b, h).transpose() * dGt;
      } else {
        Eigen::Map<const EMat> hprev(v_out.data.data() + (static_cast<size_t>(t) - 1) * b * h, b, h);
        mat(gwhh).noalias() += hprev.transpose() * dGt;
      }
    }

    // Input projection and bias grads over all timesteps at once.
    Tensor& gwih = grad_rw(w_ih);
    mat(gwih).noalias() += cmat(value(x), T * b, in).transpose() * cmat(dG);
    Tensor& gx = grad_rw(x);
    Eigen::Map<EMat> gxm(gx.data.data(), T * b, in);
    gxm.noalias() += cmat(dG) * cmat(wih).transpose();
    Tensor& gb = grad_rw(bias);
    for (int r = 0; r < T * b; ++r) {
      const Real* row = dG.data.data() + static_cast<size_t>(r) * 4 * h;
      for (int j = 0; j < 4 * h; ++j) gb.data[j] += row[j];
    }
  }

  std::deque<Node> nodes_;
  bool swept_ = false;
};

using Tape = TapeT<float>;
using Var = VarT<float>;
using BnStats = BnStatsT<float>;
using LstmCarry = LstmCarryT<float>;

}  // namespace ug
