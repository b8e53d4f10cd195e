#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "jvpm/nn.hpp"
#include "jvpm/tensor.hpp"

namespace jvpm {

// Joint visuomotor gating network. Temporal tokens pass through a shared
// encoder, split contiguously into a visual and a motor stream, and the motor
// stream is refined by iterated self-attention plus sigmoid-gated
// cross-attention into the visual context:
//
//   S = SelfAttn(M_n)
//   C = CrossAttn(queries = S, keys/values = V_f)
//   M_{n+1} = sigmoid(r_n) * C + S
//
// The visual context additionally feeds a QueryPool + decoder that predicts
// the first-frame latent target.

enum class Variant {
  baseline_a,   // single-frame tokens, motor path only, action loss only
  motor_only_b, // all tokens to the motor stream, no split, no reconstruction
  decoupled_c,  // split + reconstruction, no cross-attention/gating
  full_d,       // complete model
};

inline Variant parse_variant(const std::string& s) {
  if (s == "baseline_a") return Variant::baseline_a;
  if (s == "motor_only_b") return Variant::motor_only_b;
  if (s == "decoupled_c") return Variant::decoupled_c;
  if (s == "full_d") return Variant::full_d;
  throw std::invalid_argument("unknown ablation variant: " + s);
}

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::baseline_a: return "baseline_a";
    case Variant::motor_only_b: return "motor_only_b";
    case Variant::decoupled_c: return "decoupled_c";
    case Variant::full_d: return "full_d";
  }
  return "?";
}

struct GateNetConfig {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t visual_layers = 3;
  std::size_t motor_self_layers = 1;
  std::size_t gate_iterations = 3;
  std::size_t n_tokens = 80;
  std::size_t n_visual = 40;  // motor stream gets the rest
  std::size_t pool_queries = 16;
  std::size_t decoder_layers = 3;
  Variant variant = Variant::full_d;
  bool recon_l2norm = false;  // plain ||.||_2 instead of the MSE reading

  bool has_split() const {
    return variant == Variant::decoupled_c || variant == Variant::full_d;
  }
  bool has_gating() const { return variant == Variant::full_d; }
  std::size_t n_motor() const { return has_split() ? n_tokens - n_visual : n_tokens; }
};

struct GateNetOutput {
  Tensor joint;          // M_f: [n_motor x D]
  Tensor visual_context; // V_f (invalid tensor when the variant has no split)
  Tensor recon;          // V_r (invalid tensor when reconstruction is off)
};

class GateNet {
 public:
  GateNet(const GateNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.has_split() && (cfg.n_visual == 0 || cfg.n_visual >= cfg.n_tokens)) {
      throw std::invalid_argument("invalid visual/motor split " +
                                  std::to_string(cfg.n_visual) + " of " +
                                  std::to_string(cfg.n_tokens));
    }
    pos_ = ps_.param("gatenet.pos", cfg.n_tokens, cfg.dim, rng);
    for (std::size_t i = 0; i < cfg.encoder_layers; ++i) {
      encoder_.push_back(TransformerBlock::make(
          ps_, "gatenet.encoder." + std::to_string(i), cfg.dim, cfg.heads, rng));
    }
    for (std::size_t it = 0; it < cfg.gate_iterations; ++it) {
      std::string p = "gatenet.motor." + std::to_string(it);
      for (std::size_t l = 0; l < cfg.motor_self_layers; ++l) {
        motor_self_.push_back(TransformerBlock::make(ps_, p + ".self." + std::to_string(l),
                                                     cfg.dim, cfg.heads, rng));
      }
    }
    if (cfg.has_split()) {
      for (std::size_t i = 0; i < cfg.visual_layers; ++i) {
        visual_.push_back(TransformerBlock::make(
            ps_, "gatenet.visual." + std::to_string(i), cfg.dim, cfg.heads, rng));
      }
      pool_queries_ =
          ps_.param("gatenet.pool.queries", cfg.pool_queries, cfg.dim, rng);
      for (std::size_t i = 0; i < cfg.decoder_layers; ++i) {
        decoder_.push_back(TransformerBlock::make(
            ps_, "gatenet.decoder." + std::to_string(i), cfg.dim, cfg.heads, rng));
      }
    }
    if (cfg.has_gating()) {
      for (std::size_t it = 0; it < cfg.gate_iterations; ++it) {
        std::string p = "gatenet.motor." + std::to_string(it);
        cross_ln_.push_back(LayerNorm::make(ps_, p + ".cross_ln", cfg.dim));
        cross_.push_back(MultiHeadAttention::make(ps_, p + ".cross", cfg.dim, cfg.heads, rng));
        // sigma(0) = 0.5: visual conditioning starts at half strength
        gates_.push_back(ps_.param_const(p + ".gate", 1, 1, 0.0));
      }
    }
  }

  const GateNetConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }
  const std::vector<Tensor>& gate_params() const { return gates_; }

  // use_gating lets a full model run the gate-free (variant c) path on the
  // same weights; defaults to the variant's own behavior.
  GateNetOutput forward(Tape& tape, const Tensor& tokens) const {
    return forward(tape, tokens, cfg_.has_gating());
  }

  GateNetOutput forward(Tape& tape, const Tensor& tokens, bool use_gating) const {
    if (tokens.rows() != cfg_.n_tokens || tokens.cols() != cfg_.dim) {
      throw std::invalid_argument("gatenet: expected " + std::to_string(cfg_.n_tokens) +
                                  "x" + std::to_string(cfg_.dim) + " tokens, got " +
                                  tokens.shape_str());
    }
    Tensor x = add(tape, tokens, pos_);
    for (const auto& block : encoder_) x = block.self_forward(tape, x);

    GateNetOutput out;
    Tensor motor;
    if (cfg_.has_split()) {
      Tensor visual = slice_rows(tape, x, 0, cfg_.n_visual);
      motor = slice_rows(tape, x, cfg_.n_visual, cfg_.n_tokens);
      out.visual_context = visual_stream(tape, visual);
    } else {
      motor = x;
    }

    for (std::size_t it = 0; it < cfg_.gate_iterations; ++it) {
      Tensor s = motor;
      for (std::size_t l = 0; l < cfg_.motor_self_layers; ++l) {
        s = motor_self_[it * cfg_.motor_self_layers + l].self_forward(tape, s);
      }
      if (use_gating && cfg_.has_gating()) {
        Tensor c = cross_[it](tape, cross_ln_[it](tape, s), out.visual_context);
        motor = add(tape, scale_by(tape, sigmoid(tape, gates_[it]), c), s);
      } else {
        motor = s;
      }
    }
    out.joint = motor;

    if (cfg_.has_split()) out.recon = reconstruct(tape, out.visual_context);
    return out;
  }

  Tensor visual_stream(Tape& tape, const Tensor& visual_tokens) const {
    if (visual_tokens.rows() == 0) {
      throw std::invalid_argument("visual stream is empty; reconstruction needs V_f");
    }
    Tensor v = visual_tokens;
    for (const auto& block : visual_) v = block.self_forward(tape, v);
    return v;
  }

  // QueryPool: learnable queries attend over V_f via a softmax; each pooled
  // token is a convex combination of visual tokens.
  Tensor query_pool(Tape& tape, const Tensor& visual_context) const {
    Tensor scores = scale(tape, matmul_nt(tape, pool_queries_, visual_context),
                          1.0 / std::sqrt((double)cfg_.dim));
    Tensor attn = softmax_rows(tape, scores);
    return matmul(tape, attn, visual_context);
  }

  Tensor reconstruct(Tape& tape, const Tensor& visual_context) const {
    Tensor pooled = query_pool(tape, visual_context);
    for (const auto& block : decoder_) pooled = block.self_forward(tape, pooled);
    return pooled;
  }

  Tensor recon_loss(Tape& tape, const Tensor& recon, const Tensor& target) const {
    if (recon.rows() != target.rows() || recon.cols() != target.cols()) {
      throw std::invalid_argument("recon_loss: shape mismatch " + recon.shape_str() +
                                  " vs " + target.shape_str());
    }
    if (cfg_.recon_l2norm) return l2_norm(tape, sub(tape, recon, target));
    return mse_loss(tape, recon, target);
  }

  void set_all_gates(double r) {
    for (Tensor& g : gates_) g[0] = r;
  }

 private:
  GateNetConfig cfg_;
  ParamStore ps_;
  Tensor pos_;
  std::vector<TransformerBlock> encoder_;
  std::vector<TransformerBlock> visual_;
  std::vector<TransformerBlock> motor_self_;
  std::vector<LayerNorm> cross_ln_;
  std::vector<MultiHeadAttention> cross_;
  std::vector<Tensor> gates_;
  Tensor pool_queries_;
  std::vector<TransformerBlock> decoder_;
};

}  // namespace jvpm
