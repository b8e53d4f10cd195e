#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "jvpm/rng.hpp"
#include "jvpm/tensor.hpp"

namespace jvpm {

// Named parameter registry. Registration order is the construction order and
// is what checkpointing and the optimizer iterate over, so it is stable for a
// given config.
class ParamStore {
 public:
  Tensor param(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng,
               double stddev = 0.02) {
    Tensor t(rows, cols, true);
    if (stddev > 0.0) {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    }
    params_.emplace_back(name, t);
    return t;
  }

  Tensor param_const(const std::string& name, std::size_t rows, std::size_t cols,
                     double fill) {
    Tensor t(rows, cols, true);
    std::fill(t.data().begin(), t.data().end(), fill);
    params_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }

  Tensor find(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw std::invalid_argument("ParamStore: no parameter named " + name);
  }

  void zero_grads() {
    for (auto& [n, t] : params_) t.zero_grad();
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  // Filtered view by name prefix.
  std::vector<std::pair<std::string, Tensor>> with_prefix(const std::string& p) const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& kv : params_)
      if (kv.first.rfind(p, 0) == 0) out.push_back(kv);
    return out;
  }

  // Marks every parameter as a plain value (frozen teacher).
  void freeze() {
    for (auto& [n, t] : params_) {
      t.ptr()->requires_grad = false;
      t.ptr()->g.clear();
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
};

struct Linear {
  Tensor W;  // [in x out]
  Tensor b;  // [1 x out]

  static Linear make(ParamStore& ps, const std::string& prefix, std::size_t in,
                     std::size_t out, Rng& rng, double stddev = 0.02) {
    Linear l;
    l.W = ps.param(prefix + ".W", in, out, rng, stddev);
    l.b = ps.param(prefix + ".b", 1, out, rng, 0.0);
    return l;
  }

  Tensor operator()(Tape& tape, const Tensor& x) const {
    return add_rowvec(tape, matmul(tape, x, W), b);
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm make(ParamStore& ps, const std::string& prefix, std::size_t dim) {
    LayerNorm ln;
    ln.gain = ps.param_const(prefix + ".gain", 1, dim, 1.0);
    ln.bias = ps.param_const(prefix + ".bias", 1, dim, 0.0);
    return ln;
  }

  Tensor operator()(Tape& tape, const Tensor& x) const {
    return layer_norm_rows(tape, x, gain, bias);
  }
};

// Scaled dot-product multi-head attention over row-token matrices.
// Queries come from q_in, keys/values from kv_in (q_in == kv_in for self-attn).
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  std::size_t heads = 1;
  std::size_t dim = 0;

  static MultiHeadAttention make(ParamStore& ps, const std::string& prefix,
                                 std::size_t dim, std::size_t heads, Rng& rng) {
    if (dim % heads != 0) {
      throw std::invalid_argument("attention: dim " + std::to_string(dim) +
                                  " not divisible by heads " + std::to_string(heads));
    }
    MultiHeadAttention a;
    a.heads = heads;
    a.dim = dim;
    a.wq = Linear::make(ps, prefix + ".wq", dim, dim, rng);
    a.wk = Linear::make(ps, prefix + ".wk", dim, dim, rng);
    a.wv = Linear::make(ps, prefix + ".wv", dim, dim, rng);
    a.wo = Linear::make(ps, prefix + ".wo", dim, dim, rng);
    return a;
  }

  Tensor operator()(Tape& tape, const Tensor& q_in, const Tensor& kv_in) const {
    const std::size_t hd = dim / heads;
    Tensor q = wq(tape, q_in);
    Tensor k = wk(tape, kv_in);
    Tensor v = wv(tape, kv_in);
    Tensor merged;
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor qh = slice_cols(tape, q, h * hd, (h + 1) * hd);
      Tensor kh = slice_cols(tape, k, h * hd, (h + 1) * hd);
      Tensor vh = slice_cols(tape, v, h * hd, (h + 1) * hd);
      Tensor scores = scale(tape, matmul_nt(tape, qh, kh), 1.0 / std::sqrt((double)hd));
      Tensor attn = softmax_rows(tape, scores);
      Tensor oh = matmul(tape, attn, vh);
      merged = h == 0 ? oh : concat_cols(tape, merged, oh);
    }
    return wo(tape, merged);
  }
};

// Pre-LN transformer block, MLP ratio 4, GELU.
struct TransformerBlock {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Linear fc1, fc2;

  static TransformerBlock make(ParamStore& ps, const std::string& prefix, std::size_t dim,
                               std::size_t heads, Rng& rng) {
    TransformerBlock b;
    b.ln1 = LayerNorm::make(ps, prefix + ".ln1", dim);
    b.attn = MultiHeadAttention::make(ps, prefix + ".attn", dim, heads, rng);
    b.ln2 = LayerNorm::make(ps, prefix + ".ln2", dim);
    b.fc1 = Linear::make(ps, prefix + ".fc1", dim, dim * 4, rng);
    b.fc2 = Linear::make(ps, prefix + ".fc2", dim * 4, dim, rng);
    return b;
  }

  Tensor mlp(Tape& tape, const Tensor& x) const {
    return fc2(tape, gelu(tape, fc1(tape, ln2(tape, x))));
  }

  Tensor self_forward(Tape& tape, const Tensor& x) const {
    Tensor n = ln1(tape, x);
    Tensor h = add(tape, x, attn(tape, n, n));
    return add(tape, h, mlp(tape, h));
  }

  // Cross variant: queries normalized, context used as-is.
  Tensor cross_forward(Tape& tape, const Tensor& x, const Tensor& ctx) const {
    Tensor h = add(tape, x, attn(tape, ln1(tape, x), ctx));
    return add(tape, h, mlp(tape, h));
  }
};

// Adam with linear warm-up: lr = base * min(1, step/warmup).
class Adam {
 public:
  Adam(double base_lr, std::size_t warmup_steps)
      : base_lr_(base_lr), warmup_(warmup_steps) {}

  double lr_at(std::size_t step) const {
    if (warmup_ == 0) return base_lr_;
    double s = static_cast<double>(step) / static_cast<double>(warmup_);
    return base_lr_ * std::min(1.0, s);
  }

  // step is 1-based.
  void step(const std::vector<std::pair<std::string, Tensor>>& params, std::size_t step_no) {
    ++t_;
    double lr = lr_at(step_no);
    double bc1 = 1.0 - std::pow(beta1_, (double)t_);
    double bc2 = 1.0 - std::pow(beta2_, (double)t_);
    for (const auto& [name, p] : params) {
      if (!p.requires_grad()) continue;
      if (p.grad().size() != p.size()) {
        throw std::invalid_argument("Adam: parameter " + name + " has no gradient");
      }
      auto& st = state_[name];
      if (st.m.size() != p.size()) {
        st.m.assign(p.size(), 0.0);
        st.v.assign(p.size(), 0.0);
      }
      Tensor pt = p;
      for (std::size_t i = 0; i < pt.size(); ++i) {
        double g = pt.grad()[i];
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g;
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g * g;
        double mhat = st.m[i] / bc1;
        double vhat = st.v[i] / bc2;
        pt[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  struct Slot {
    std::vector<double> m, v;
  };
  std::map<std::string, Slot>& state() { return state_; }
  const std::map<std::string, Slot>& state() const { return state_; }
  std::size_t& t() { return t_; }
  std::size_t t() const { return t_; }
  double base_lr() const { return base_lr_; }
  void set_base_lr(double lr) { base_lr_ = lr; }

 private:
  double base_lr_;
  std::size_t warmup_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::size_t t_ = 0;
  std::map<std::string, Slot> state_;
};

// ---- gradient checking -----------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
  std::string worst_name;

  bool pass(double tol) const { return worst <= tol; }
};

// Compares reverse-mode gradients against central finite differences
// (loss(x+h) - loss(x-h)) / 2h for every element of every listed parameter.
// loss_fn must rebuild the graph on the supplied tape and be deterministic.
inline GradCheckReport grad_check(
    const std::vector<std::pair<std::string, Tensor>>& params,
    const std::function<Tensor(Tape&)>& loss_fn, double h = 1e-5) {
  for (const auto& [n, p] : params) {
    Tensor t = p;
    t.zero_grad();
  }
  Tape tape;
  Tensor loss = loss_fn(tape);
  tape.backward(loss);

  GradCheckReport report;
  for (const auto& [name, p] : params) {
    Tensor t = p;
    GradCheckEntry e;
    e.name = name;
    for (std::size_t i = 0; i < t.size(); ++i) {
      double saved = t[i];
      t[i] = saved + h;
      Tape tp;
      double lp = loss_fn(tp).value();
      t[i] = saved - h;
      Tape tm;
      double lm = loss_fn(tm).value();
      t[i] = saved;
      double numeric = (lp - lm) / (2.0 * h);
      double analytic = t.grad()[i];
      double denom = std::max(1e-6, std::fabs(numeric) + std::fabs(analytic));
      double rel = std::fabs(numeric - analytic) / denom;
      e.max_rel_err = std::max(e.max_rel_err, rel);
    }
    if (e.max_rel_err > report.worst) {
      report.worst = e.max_rel_err;
      report.worst_name = e.name;
    }
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace jvpm
