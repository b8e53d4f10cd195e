#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "jvpm/nn.hpp"
#include "jvpm/rng.hpp"
#include "jvpm/tensor.hpp"

namespace jvpm {

constexpr std::size_t kChunkLen = 16;   // action chunk size
constexpr std::size_t kActionDim = 3;   // dx, dy, grip

struct HeadConfig {
  std::size_t embed_dim = 32;        // token width of the conditioning matrix
  std::size_t chunk_len = kChunkLen;
  std::size_t action_dim = kActionDim;
  // flow head
  std::size_t tau_embed_dim = 16;
  std::size_t hidden = 64;
  double tau_alpha = 1.5;
  double tau_beta = 1.0;
  double tau_cap = 0.999;
  std::size_t flow_steps = 10;

  std::size_t chunk_size() const { return chunk_len * action_dim; }
};

// Common surface for both heads: a loss on (conditioning, target chunk) and a
// chunk prediction for inference. Both condition on mean-pooled tokens.
class ActionHead {
 public:
  virtual ~ActionHead() = default;
  virtual Tensor loss(Tape& tape, const Tensor& embedding, const Tensor& chunk,
                      Rng& rng) = 0;
  // chunk as [chunk_len x action_dim]
  virtual Tensor predict(const Tensor& embedding, Rng& rng) = 0;
  virtual ParamStore& params() = 0;
  virtual std::string kind() const = 0;
};

namespace detail {

inline void require_chunk(const HeadConfig& cfg, const Tensor& chunk) {
  if (chunk.rows() != cfg.chunk_len || chunk.cols() != cfg.action_dim) {
    throw std::invalid_argument("expected chunk [" + std::to_string(cfg.chunk_len) + "x" +
                                std::to_string(cfg.action_dim) + "], got " +
                                chunk.shape_str());
  }
}

}  // namespace detail

// Residual-MLP regression head: mean-pool, two residual blocks, linear map to
// the flat chunk, trained with MAE.
class OftHead : public ActionHead {
 public:
  OftHead(const HeadConfig& cfg, Rng& rng, const std::string& prefix = "head.oft")
      : cfg_(cfg) {
    const std::size_t d = cfg.embed_dim;
    const std::size_t h = cfg.hidden;
    res1_a_ = Linear::make(ps_, prefix + ".res1.fc1", d, h, rng);
    res1_b_ = Linear::make(ps_, prefix + ".res1.fc2", h, d, rng);
    res2_a_ = Linear::make(ps_, prefix + ".res2.fc1", d, h, rng);
    res2_b_ = Linear::make(ps_, prefix + ".res2.fc2", h, d, rng);
    // zero output init: the first prediction is the zero chunk, so the initial
    // loss is exactly the mean action magnitude
    out_ = Linear::make(ps_, prefix + ".out", d, cfg.chunk_size(), rng, 0.0);
  }

  Tensor forward(Tape& tape, const Tensor& embedding) const {
    Tensor h = mean_rows(tape, embedding);  // [1 x D]
    h = add(tape, h, res1_b_(tape, gelu(tape, res1_a_(tape, h))));
    h = add(tape, h, res2_b_(tape, gelu(tape, res2_a_(tape, h))));
    Tensor flat = out_(tape, h);  // [1 x k*ad]
    // reshape to [k x ad]: same buffer layout, rebuild as a view-copy
    Tensor chunk(cfg_.chunk_len, cfg_.action_dim, flat.requires_grad());
    std::copy(flat.data().begin(), flat.data().end(), chunk.data().begin());
    if (flat.requires_grad()) {
      auto fd = flat.ptr(), cd = chunk.ptr();
      tape.record([fd, cd] {
        for (std::size_t i = 0; i < cd->g.size(); ++i) fd->g[i] += cd->g[i];
      });
    }
    return chunk;
  }

  Tensor loss(Tape& tape, const Tensor& embedding, const Tensor& chunk, Rng&) override {
    detail::require_chunk(cfg_, chunk);
    return mae_loss(tape, forward(tape, embedding), chunk);
  }

  Tensor predict(const Tensor& embedding, Rng&) override {
    Tape scratch;
    return forward(scratch, embedding);
  }

  ParamStore& params() override { return ps_; }
  std::string kind() const override { return "oft"; }

 private:
  HeadConfig cfg_;
  ParamStore ps_;
  Linear res1_a_, res1_b_, res2_a_, res2_b_, out_;
};

// Sinusoidal embedding of the flow time tau, injective on sampler grids.
inline Tensor tau_embedding(double tau, std::size_t dim) {
  Tensor e(1, dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    double freq = std::pow(1000.0, (double)i / (double)half);
    e[2 * i] = std::sin(tau * freq);
    e[2 * i + 1] = std::cos(tau * freq);
  }
  return e;
}

struct FlowState {
  std::vector<double> x;        // true chunk, flattened
  std::vector<double> noise;    // epsilon
  double tau = 0.0;
  std::vector<double> interp;   // X^tau = tau X + (1 - tau) eps
  std::vector<double> target;   // u = eps - X
};

// X^tau and u built exactly per the linear interpolant.
inline FlowState make_flow_state(const std::vector<double>& x, const std::vector<double>& eps,
                                 double tau) {
  FlowState fs;
  fs.x = x;
  fs.noise = eps;
  fs.tau = tau;
  fs.interp.resize(x.size());
  fs.target.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    fs.interp[i] = tau * x[i] + (1.0 - tau) * eps[i];
    fs.target[i] = eps[i] - x[i];
  }
  return fs;
}

// Euler integration of dX/dtau = -field(X, tau) from tau = 0 to 1. The true
// path X(tau) = X_1 + (1 - tau)(eps - X_1) satisfies dX/dtau = X_1 - eps = -u,
// which fixes the sign.
using FlowField = std::function<std::vector<double>(const std::vector<double>&, double)>;

inline std::vector<double> euler_sample(const FlowField& field, std::vector<double> x,
                                        std::size_t steps) {
  steps = std::max<std::size_t>(1, steps);
  const double dt = 1.0 / (double)steps;
  for (std::size_t s = 0; s < steps; ++s) {
    double tau = (double)s * dt;
    std::vector<double> v = field(x, tau);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= dt * v[i];
  }
  return x;
}

// Conditional flow matching head: v_theta is an MLP over
// [flattened X^tau || tau embedding || mean-pooled conditioning], trained to
// regress u = eps - X; inference integrates dX/dtau = -v with Euler steps
// from tau = 0 (noise) to tau = 1.
class FlowHead : public ActionHead {
 public:
  FlowHead(const HeadConfig& cfg, Rng& rng, const std::string& prefix = "head.flow")
      : cfg_(cfg) {
    const std::size_t in = cfg.chunk_size() + cfg.tau_embed_dim + cfg.embed_dim;
    // wider init than the transformer default: the field regresses O(1) targets
    const double std = 0.1;
    fc1_ = Linear::make(ps_, prefix + ".fc1", in, cfg.hidden, rng, std);
    fc2_ = Linear::make(ps_, prefix + ".fc2", cfg.hidden, cfg.hidden, rng, std);
    fc3_ = Linear::make(ps_, prefix + ".fc3", cfg.hidden, cfg.hidden, rng, std);
    out_ = Linear::make(ps_, prefix + ".out", cfg.hidden, cfg.chunk_size(), rng, std);
  }

  double sample_tau(Rng& rng) const {
    return std::min(rng.beta(cfg_.tau_alpha, cfg_.tau_beta), cfg_.tau_cap);
  }

  // v_theta(X^tau, tau, M_f) -> [1 x k*ad]
  Tensor v_theta(Tape& tape, const Tensor& x_tau, double tau,
                 const Tensor& embedding) const {
    if (x_tau.rows() != 1 || x_tau.cols() != cfg_.chunk_size()) {
      throw std::invalid_argument("v_theta: expected 1x" +
                                  std::to_string(cfg_.chunk_size()) + " state, got " +
                                  x_tau.shape_str());
    }
    Tensor cond = mean_rows(tape, embedding);
    Tensor in = concat_cols(tape, concat_cols(tape, x_tau, tau_embedding(tau, cfg_.tau_embed_dim)),
                            cond);
    Tensor h = gelu(tape, fc1_(tape, in));
    h = gelu(tape, fc2_(tape, h));
    h = gelu(tape, fc3_(tape, h));
    return out_(tape, h);
  }

  // One flow-matching training term: sample eps ~ N(0, I) and tau, build the
  // interpolant, regress the constant target field.
  Tensor loss(Tape& tape, const Tensor& embedding, const Tensor& chunk, Rng& rng) override {
    detail::require_chunk(cfg_, chunk);
    std::vector<double> x(chunk.data());
    std::vector<double> eps(x.size());
    for (double& e : eps) e = rng.normal();
    FlowState fs = make_flow_state(x, eps, sample_tau(rng));
    return loss_at(tape, embedding, fs);
  }

  // Deterministic variant used by tests to pin tau/eps.
  Tensor loss_at(Tape& tape, const Tensor& embedding, const FlowState& fs) {
    Tensor x_tau(1, cfg_.chunk_size());
    std::copy(fs.interp.begin(), fs.interp.end(), x_tau.data().begin());
    Tensor target(1, cfg_.chunk_size());
    std::copy(fs.target.begin(), fs.target.end(), target.data().begin());
    return mse_loss(tape, v_theta(tape, x_tau, fs.tau, embedding), target);
  }

  // Euler sampler from Gaussian noise, cfg.flow_steps steps.
  Tensor predict(const Tensor& embedding, Rng& rng) override {
    const std::size_t n = cfg_.chunk_size();
    std::vector<double> x(n);
    for (double& v : x) v = rng.normal();
    FlowField field = [&](const std::vector<double>& state, double tau) {
      Tensor xt(1, n);
      std::copy(state.begin(), state.end(), xt.data().begin());
      Tape scratch;
      Tensor v = v_theta(scratch, xt, tau, embedding);
      return v.data();
    };
    x = euler_sample(field, x, cfg_.flow_steps);
    Tensor chunk(cfg_.chunk_len, cfg_.action_dim);
    std::copy(x.begin(), x.end(), chunk.data().begin());
    return chunk;
  }

  ParamStore& params() override { return ps_; }
  std::string kind() const override { return "flow"; }
  const HeadConfig& config() const { return cfg_; }

 private:
  HeadConfig cfg_;
  ParamStore ps_;
  Linear fc1_, fc2_, fc3_, out_;
};

inline std::unique_ptr<ActionHead> make_head(const std::string& kind, const HeadConfig& cfg,
                                             Rng& rng, const std::string& prefix = "head") {
  if (kind == "oft") return std::make_unique<OftHead>(cfg, rng, prefix + ".oft");
  if (kind == "flow") return std::make_unique<FlowHead>(cfg, rng, prefix + ".flow");
  throw std::invalid_argument("unknown head kind: " + kind + " (expected oft or flow)");
}

}  // namespace jvpm
