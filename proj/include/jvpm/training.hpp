#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "jvpm/gatenet.hpp"
#include "jvpm/heads.hpp"
#include "jvpm/nn.hpp"
#include "jvpm/tokenizer.hpp"
#include "jvpm/world.hpp"

namespace jvpm {

// ---------------------------------------------------------------------------
// Schedules and traces

// Cosine decay of the alignment weight: beta(0) = beta0, beta(T) = 0.
inline double beta_schedule(double beta0, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return 0.0;
  double t = std::min((double)step, (double)total_steps);
  return beta0 * 0.5 * (1.0 + std::cos(M_PI * t / (double)total_steps));
}

struct TraceRow {
  std::size_t step = 0;
  double lr = 0.0;
  double beta = 0.0;
  double loss_total = 0.0;
  double loss_recon = 0.0;
  double loss_action = 0.0;
  double loss_align = 0.0;
};

inline const char* kTraceHeader = "step,lr,beta,loss_total,loss_recon,loss_action,loss_align";

inline void write_trace_csv(const std::vector<TraceRow>& rows, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write trace file: " + path);
  os << kTraceHeader << "\n";
  os.precision(17);
  for (const TraceRow& r : rows) {
    os << r.step << "," << r.lr << "," << r.beta << "," << r.loss_total << ","
       << r.loss_recon << "," << r.loss_action << "," << r.loss_align << "\n";
  }
}

// ---------------------------------------------------------------------------
// Training windows: clip frames [t, t+horizon) paired with actions [t, t+16).

// 1-based frame offsets inside one observation window. A full window reads
// every frame; a subsampled window uses the published selection table, which
// is defined on the 17-frame horizon.
inline std::vector<std::size_t> window_frame_offsets(std::size_t frames, std::size_t horizon) {
  if (frames == horizon) {
    if (!is_valid_frame_count(horizon)) {
      throw std::invalid_argument("window horizon " + std::to_string(horizon) +
                                  " violates the 4N+1 frame constraint");
    }
    std::vector<std::size_t> idx(horizon);
    for (std::size_t i = 0; i < horizon; ++i) idx[i] = i + 1;
    return idx;
  }
  return subsample_indices(frames, horizon);
}

struct WindowRef {
  std::size_t traj = 0;
  std::size_t t = 0;  // window start frame
};

class WindowDataset {
 public:
  WindowDataset(const std::vector<Trajectory>& trajectories, std::size_t horizon = 17)
      : trajs_(&trajectories), horizon_(horizon) {
    if (trajectories.empty()) throw std::invalid_argument("empty dataset");
    const std::size_t need = std::max(horizon, (std::size_t)17);
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
      const Trajectory& tr = trajectories[i];
      if (tr.frames.size() < need || tr.actions.size() + 1 != tr.frames.size()) {
        throw std::invalid_argument("trajectory " + std::to_string(i) + " has " +
                                    std::to_string(tr.frames.size()) +
                                    " frames; windows need at least " + std::to_string(need));
      }
      for (std::size_t t = 0;
           t + horizon <= tr.frames.size() && t + kChunkLen <= tr.actions.size(); ++t) {
        windows_.push_back({i, t});
      }
    }
    if (windows_.empty()) {
      throw std::invalid_argument("dataset yields no (clip, chunk) windows");
    }
  }

  std::size_t size() const { return windows_.size(); }
  std::size_t horizon() const { return horizon_; }
  const WindowRef& get(std::size_t i) const { return windows_.at(i); }
  WindowRef sample(Rng& rng) const { return windows_[rng.index(windows_.size())]; }

  const Trajectory& trajectory(const WindowRef& w) const { return (*trajs_)[w.traj]; }

  const Frame& current_frame(const WindowRef& w) const {
    return trajectory(w).frames[w.t];
  }

  std::uint32_t task_id(const WindowRef& w) const { return trajectory(w).task_id; }

  // Observation clip, subsampled to `frames` physical slots (1-based offsets).
  std::vector<Frame> clip(const WindowRef& w, std::size_t frames) const {
    const Trajectory& tr = trajectory(w);
    std::vector<Frame> out;
    for (std::size_t off : window_frame_offsets(frames, horizon_)) {
      out.push_back(tr.frames[w.t + off - 1]);
    }
    return out;
  }

  // Target chunk [16 x 3] of the actions spanning the window start.
  Tensor chunk(const WindowRef& w) const {
    const Trajectory& tr = trajectory(w);
    Tensor c(kChunkLen, kActionDim);
    for (std::size_t k = 0; k < kChunkLen; ++k) {
      const Action& a = tr.actions[w.t + k];
      c.at(k, 0) = a.dx;
      c.at(k, 1) = a.dy;
      c.at(k, 2) = a.grip;
    }
    return c;
  }

 private:
  const std::vector<Trajectory>* trajs_;
  std::size_t horizon_;
  std::vector<WindowRef> windows_;
};

// ---------------------------------------------------------------------------
// Checkpoint persistence ("JVCK"): config text, named tensor table, optimizer
// state, step counter, rng state, tokenizer seed. Writes are atomic.

struct Checkpoint {
  std::string config_text;
  std::vector<std::pair<std::string, Tensor>> tensors;  // deep copies
  std::map<std::string, Adam::Slot> opt_state;
  std::size_t opt_t = 0;
  std::uint64_t step = 0;
  std::string rng_state;
  std::uint64_t tokenizer_seed = 0;
};

namespace detail {

inline void ck_write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void ck_write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
inline void ck_write_str(std::ostream& os, const std::string& s) {
  ck_write_u64(os, s.size());
  os.write(s.data(), (std::streamsize)s.size());
}
inline void ck_write_f64s(std::ostream& os, const std::vector<double>& v) {
  ck_write_u64(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()), (std::streamsize)(v.size() * 8));
}

inline void ck_read(std::istream& is, void* dst, std::size_t n, const std::string& path) {
  if (!is.read(reinterpret_cast<char*>(dst), (std::streamsize)n)) {
    throw std::runtime_error("truncated checkpoint file: " + path);
  }
}
inline std::uint32_t ck_read_u32(std::istream& is, const std::string& path) {
  std::uint32_t v = 0;
  ck_read(is, &v, 4, path);
  return v;
}
inline std::uint64_t ck_read_u64(std::istream& is, const std::string& path) {
  std::uint64_t v = 0;
  ck_read(is, &v, 8, path);
  return v;
}
inline std::string ck_read_str(std::istream& is, const std::string& path) {
  std::uint64_t n = ck_read_u64(is, path);
  std::string s(n, '\0');
  ck_read(is, s.data(), n, path);
  return s;
}
inline std::vector<double> ck_read_f64s(std::istream& is, const std::string& path) {
  std::uint64_t n = ck_read_u64(is, path);
  std::vector<double> v(n);
  ck_read(is, v.data(), n * 8, path);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint file: " + tmp);
    os.write("JVCK", 4);
    detail::ck_write_u32(os, 1);
    detail::ck_write_str(os, ck.config_text);
    detail::ck_write_u32(os, (std::uint32_t)ck.tensors.size());
    for (const auto& [name, t] : ck.tensors) {
      detail::ck_write_str(os, name);
      detail::ck_write_u32(os, 2);  // rank
      detail::ck_write_u64(os, t.rows());
      detail::ck_write_u64(os, t.cols());
      os.write(reinterpret_cast<const char*>(t.data().data()),
               (std::streamsize)(t.size() * 8));
    }
    detail::ck_write_u32(os, (std::uint32_t)ck.opt_state.size());
    for (const auto& [name, slot] : ck.opt_state) {
      detail::ck_write_str(os, name);
      detail::ck_write_f64s(os, slot.m);
      detail::ck_write_f64s(os, slot.v);
    }
    detail::ck_write_u64(os, ck.opt_t);
    detail::ck_write_u64(os, ck.step);
    detail::ck_write_str(os, ck.rng_state);
    detail::ck_write_u64(os, ck.tokenizer_seed);
    if (!os) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint file: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "JVCK", 4) != 0) {
    throw std::runtime_error("bad magic in checkpoint file: " + path);
  }
  std::uint32_t version = detail::ck_read_u32(is, path);
  if (version != 1) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                             " in " + path);
  }
  Checkpoint ck;
  ck.config_text = detail::ck_read_str(is, path);
  std::uint32_t n_tensors = detail::ck_read_u32(is, path);
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = detail::ck_read_str(is, path);
    std::uint32_t rank = detail::ck_read_u32(is, path);
    if (rank != 2) {
      throw std::runtime_error("unsupported tensor rank " + std::to_string(rank) + " in " +
                               path);
    }
    std::uint64_t rows = detail::ck_read_u64(is, path);
    std::uint64_t cols = detail::ck_read_u64(is, path);
    Tensor t(rows, cols);
    detail::ck_read(is, t.data().data(), t.size() * 8, path);
    ck.tensors.emplace_back(name, t);
  }
  std::uint32_t n_slots = detail::ck_read_u32(is, path);
  for (std::uint32_t i = 0; i < n_slots; ++i) {
    std::string name = detail::ck_read_str(is, path);
    Adam::Slot slot;
    slot.m = detail::ck_read_f64s(is, path);
    slot.v = detail::ck_read_f64s(is, path);
    ck.opt_state[name] = slot;
  }
  ck.opt_t = detail::ck_read_u64(is, path);
  ck.step = detail::ck_read_u64(is, path);
  ck.rng_state = detail::ck_read_str(is, path);
  ck.tokenizer_seed = detail::ck_read_u64(is, path);
  return ck;
}

// FNV-1a over parameter names and raw value bytes, in registration order.
inline std::uint64_t param_hash(const ParamStore& ps) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : ps.params()) {
    mix(name.data(), name.size());
    mix(t.data().data(), t.size() * 8);
  }
  return h;
}

namespace detail {

inline std::vector<std::pair<std::string, Tensor>> snapshot_params(const ParamStore& ps) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : ps.params()) {
    Tensor copy(t.rows(), t.cols());
    std::copy(t.data().begin(), t.data().end(), copy.data().begin());
    out.emplace_back(name, copy);
  }
  return out;
}

inline void restore_params(ParamStore& ps, const Checkpoint& ck) {
  for (auto& [name, t] : ps.params()) {
    bool found = false;
    for (const auto& [cn, ct] : ck.tensors) {
      if (cn != name) continue;
      if (ct.rows() != t.rows() || ct.cols() != t.cols()) {
        throw std::runtime_error("checkpoint/config mismatch: " + name + " is " +
                                 ct.shape_str() + " in the checkpoint, " + t.shape_str() +
                                 " in the model");
      }
      Tensor dst = t;
      std::copy(ct.data().begin(), ct.data().end(), dst.data().begin());
      found = true;
      break;
    }
    if (!found) {
      throw std::runtime_error("checkpoint/config mismatch: missing tensor " + name);
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shared configuration for both stages.

struct TrainConfig {
  ClipSpec clip;            // clip.frames is derived from `frames` below
  GateNetConfig model;
  HeadConfig head;
  std::string head_kind = "oft";
  std::size_t frames = 17;   // observed frames per window (2, 5, 9, or 17)
  std::size_t horizon = 17;  // window span (9, 13, 17, or 21)
  std::size_t n_tasks = 4;
  std::size_t policy_layers = 2;
  std::size_t batch = 16;
  double lr = 2e-3;
  std::size_t warmup = 200;
  std::size_t steps = 2000;
  double lambda = 1.0;
  double beta0 = 1.0;
  bool init_head_from_teacher = false;
  std::uint64_t seed = 0;
};

// Derives the dependent fields: clip length from the frame selection, token
// counts and split from the clip, head conditioning width from the model.
inline TrainConfig finalize_config(TrainConfig cfg) {
  cfg.clip.frames = window_frame_offsets(cfg.frames, cfg.horizon).size();
  cfg.clip.dim = cfg.model.dim;
  validate_spec(cfg.clip);
  if (cfg.model.variant == Variant::baseline_a) {
    cfg.model.n_tokens = patches_per_frame(cfg.clip);  // current frame only
  } else {
    cfg.model.n_tokens = token_count(cfg.clip);
    // split_visual = 0 (or an infeasible carry-over) means the default even split
    if (cfg.model.n_visual == 0 || cfg.model.n_visual >= cfg.model.n_tokens) {
      cfg.model.n_visual = cfg.model.n_tokens / 2;
    }
  }
  cfg.model.pool_queries = patches_per_frame(cfg.clip);
  cfg.head.embed_dim = cfg.model.dim;
  return cfg;
}

// ---------------------------------------------------------------------------
// Stage 1: joint pretraining, L1 = lambda * L_I + L_A.

class Stage1Trainer {
 public:
  Stage1Trainer(const TrainConfig& raw_cfg, const std::vector<Trajectory>& data,
                std::string config_text = "")
      : cfg_(finalize_config(raw_cfg)),
        config_text_(std::move(config_text)),
        dataset_(data, cfg_.horizon),
        tokenizer_(cfg_.clip),
        init_rng_(cfg_.seed),
        net_(cfg_.model, init_rng_),
        head_(make_head(cfg_.head_kind, cfg_.head, init_rng_)),
        opt_(cfg_.lr, cfg_.warmup),
        train_rng_(cfg_.seed ^ 0x747261696eULL) {}

  const TrainConfig& config() const { return cfg_; }
  GateNet& net() { return net_; }
  ActionHead& head() { return *head_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  const WindowDataset& dataset() const { return dataset_; }
  std::size_t step_count() const { return step_; }

  Tensor encode_window(const WindowRef& w) const {
    if (cfg_.model.variant == Variant::baseline_a) {
      return tokenizer_.encode_first_frame(dataset_.current_frame(w));
    }
    return tokenizer_.encode_clip(dataset_.clip(w, cfg_.frames));
  }

  // One optimizer step over a sampled batch. Loss decomposes exactly as
  // total = lambda * recon + action.
  TraceRow step() {
    net_.params().zero_grads();
    head_->params().zero_grads();
    Tape tape;
    Tensor action_sum, recon_sum;
    for (std::size_t b = 0; b < cfg_.batch; ++b) {
      WindowRef w = dataset_.sample(train_rng_);
      Tensor tokens = encode_window(w);
      GateNetOutput out = net_.forward(tape, tokens);
      Tensor a = head_->loss(tape, out.joint, dataset_.chunk(w), train_rng_);
      action_sum = b == 0 ? a : add(tape, action_sum, a);
      if (cfg_.model.has_split()) {
        Tensor target = tokenizer_.encode_first_frame(dataset_.current_frame(w));
        Tensor r = net_.recon_loss(tape, out.recon, target);
        recon_sum = b == 0 ? r : add(tape, recon_sum, r);
      }
    }
    Tensor action = scale(tape, action_sum, 1.0 / (double)cfg_.batch);
    Tensor total;
    double recon_value = 0.0;
    if (recon_sum.valid()) {
      Tensor recon = scale(tape, recon_sum, 1.0 / (double)cfg_.batch);
      recon_value = recon.value();
      total = add(tape, scale(tape, recon, cfg_.lambda), action);
    } else {
      total = action;
    }
    tape.backward(total);
    ++step_;
    std::vector<std::pair<std::string, Tensor>> all = all_params();
    opt_.step(all, step_);

    TraceRow row;
    row.step = step_;
    row.lr = opt_.lr_at(step_);
    row.loss_total = total.value();
    row.loss_recon = recon_value;
    row.loss_action = action.value();
    return row;
  }

  std::vector<TraceRow> run(std::size_t steps = 0) {
    if (steps == 0) steps = cfg_.steps;
    std::vector<TraceRow> trace;
    trace.reserve(steps);
    for (std::size_t s = step_; s < steps; ++s) trace.push_back(step());
    return trace;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config_text = config_text_;
    ck.tensors = detail::snapshot_params(net_.params());
    for (auto& kv : detail::snapshot_params(head_->params())) ck.tensors.push_back(kv);
    ck.opt_state = opt_.state();
    ck.opt_t = opt_.t();
    ck.step = step_;
    ck.rng_state = train_rng_.serialize();
    ck.tokenizer_seed = cfg_.clip.seed;
    return ck;
  }

  void restore(const Checkpoint& ck) {
    detail::restore_params(net_.params(), ck);
    detail::restore_params(head_->params(), ck);
    opt_.state() = ck.opt_state;
    opt_.t() = ck.opt_t;
    step_ = ck.step;
    train_rng_.deserialize(ck.rng_state);
  }

  struct OfflineMetrics {
    double action_mae = 0.0;
    double recon_mse = 0.0;
    std::size_t windows = 0;
  };

  // Deterministic offline evaluation over evenly spaced windows.
  OfflineMetrics evaluate_offline(std::size_t max_windows, std::uint64_t seed) {
    OfflineMetrics m;
    Rng rng(seed);
    std::size_t n = std::min(max_windows, dataset_.size());
    std::size_t stride = std::max<std::size_t>(1, dataset_.size() / n);
    for (std::size_t i = 0; i < dataset_.size() && m.windows < n; i += stride) {
      const WindowRef& w = dataset_.get(i);
      Tensor tokens = encode_window(w);
      Tape tape;
      GateNetOutput out = net_.forward(tape, tokens);
      Tensor pred = head_->predict(out.joint, rng);
      Tensor target = dataset_.chunk(w);
      double mae = 0.0;
      for (std::size_t k = 0; k < pred.size(); ++k) mae += std::fabs(pred[k] - target[k]);
      m.action_mae += mae / (double)pred.size();
      if (cfg_.model.has_split()) {
        Tensor rt = tokenizer_.encode_first_frame(dataset_.current_frame(w));
        double mse = 0.0;
        for (std::size_t k = 0; k < out.recon.size(); ++k) {
          double d = out.recon[k] - rt[k];
          mse += d * d;
        }
        m.recon_mse += mse / (double)out.recon.size();
      }
      ++m.windows;
    }
    if (m.windows > 0) {
      m.action_mae /= (double)m.windows;
      m.recon_mse /= (double)m.windows;
    }
    return m;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> all_params() const {
    std::vector<std::pair<std::string, Tensor>> all = net_.params().params();
    for (const auto& kv : head_->params().params()) all.push_back(kv);
    return all;
  }

  TrainConfig cfg_;
  std::string config_text_;
  WindowDataset dataset_;
  Tokenizer tokenizer_;
  Rng init_rng_;
  GateNet net_;
  std::unique_ptr<ActionHead> head_;
  Adam opt_;
  Rng train_rng_;
  std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Stage 2: latent alignment against a frozen teacher.

// beta-weighted MSE alignment term. The teacher embedding must come from a
// frozen model; a gradient-carrying target is rejected.
inline Tensor alignment_loss(Tape& tape, const Tensor& m_f, const Tensor& f_a,
                             double beta) {
  if (m_f.requires_grad()) {
    throw std::invalid_argument("alignment_loss: teacher embedding must be frozen");
  }
  if (m_f.rows() != f_a.rows() || m_f.cols() != f_a.cols()) {
    throw std::invalid_argument("alignment_loss: shape mismatch " + m_f.shape_str() +
                                " vs " + f_a.shape_str());
  }
  return scale(tape, mse_loss(tape, f_a, m_f), beta);
}

// Policy stand-in: current-frame tokens plus a task-embedding token through a
// small transformer produce intermediate tokens F_r; a single-layer adapter
// with learnable queries cross-attends into F_r to produce F_a shaped like the
// teacher's joint embedding.
class Policy {
 public:
  Policy(const TrainConfig& raw_cfg, Rng& rng, const std::string& prefix = "policy")
      : cfg_(finalize_config(raw_cfg)), tokenizer_(cfg_.clip) {
    const std::size_t d = cfg_.model.dim;
    const std::size_t ppf = patches_per_frame(cfg_.clip);
    task_embed_ = ps_.param(prefix + ".task_embed", cfg_.n_tasks, d, rng);
    pos_ = ps_.param(prefix + ".pos", ppf + 1, d, rng);
    for (std::size_t i = 0; i < cfg_.policy_layers; ++i) {
      blocks_.push_back(TransformerBlock::make(ps_, prefix + ".block." + std::to_string(i),
                                               d, cfg_.model.heads, rng));
    }
    adapter_queries_ = ps_.param(prefix + ".adapter.queries", cfg_.model.n_motor(), d, rng);
    adapter_ = TransformerBlock::make(ps_, prefix + ".adapter.block", d, cfg_.model.heads, rng);
    head_ = make_head(cfg_.head_kind, cfg_.head, rng, prefix + ".head");
  }

  const TrainConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  ActionHead& head() const { return *head_; }

  // Trunk and head parameters together; the head keeps its own store.
  std::vector<std::pair<std::string, Tensor>> all_params() const {
    std::vector<std::pair<std::string, Tensor>> all = ps_.params();
    for (const auto& kv : head_->params().params()) all.push_back(kv);
    return all;
  }

  void zero_grads() {
    ps_.zero_grads();
    head_->params().zero_grads();
  }

  // F_r: [ppf+1 x D] from the current observation only.
  Tensor forward_repr(Tape& tape, const Frame& frame, std::uint32_t task_id) const {
    if (task_id >= cfg_.n_tasks) {
      throw std::invalid_argument("task id " + std::to_string(task_id) +
                                  " outside the embedding table of " +
                                  std::to_string(cfg_.n_tasks));
    }
    Tensor tokens = tokenizer_.encode_first_frame(frame);
    Tensor task = slice_rows(tape, task_embed_, task_id, task_id + 1);
    Tensor x = add(tape, concat_rows(tape, tokens, task), pos_);
    for (const auto& b : blocks_) x = b.self_forward(tape, x);
    return x;
  }

  // F_a: [n_motor x D], shaped exactly like the teacher's M_f.
  Tensor adapt(Tape& tape, const Tensor& f_r) const {
    return adapter_.cross_forward(tape, adapter_queries_, f_r);
  }

  Tensor forward(Tape& tape, const Frame& frame, std::uint32_t task_id) const {
    return adapt(tape, forward_repr(tape, frame, task_id));
  }

  Tensor predict_chunk(const Frame& frame, std::uint32_t task_id, Rng& rng) const {
    Tape scratch;
    Tensor f_a = forward(scratch, frame, task_id);
    return head_->predict(f_a, rng);
  }

  ChunkPolicy as_chunk_policy(std::uint64_t sample_seed) const {
    auto rng = std::make_shared<Rng>(sample_seed);
    return [this, rng](const Frame& frame, std::uint32_t task_id) {
      Tensor chunk = predict_chunk(frame, task_id % cfg_.n_tasks, *rng);
      std::vector<Action> actions(chunk.rows());
      for (std::size_t k = 0; k < actions.size(); ++k) {
        actions[k].dx = chunk.at(k, 0);
        actions[k].dy = chunk.at(k, 1);
        actions[k].grip = chunk.at(k, 2);
      }
      return actions;
    };
  }

 private:
  TrainConfig cfg_;
  Tokenizer tokenizer_;
  ParamStore ps_;
  Tensor task_embed_, pos_, adapter_queries_;
  std::vector<TransformerBlock> blocks_;
  TransformerBlock adapter_;
  std::unique_ptr<ActionHead> head_;
};

class Stage2Trainer {
 public:
  Stage2Trainer(const TrainConfig& raw_cfg, const std::vector<Trajectory>& data,
                const Checkpoint& pretrained, bool no_jvpm = false,
                std::string config_text = "")
      : cfg_(finalize_config(raw_cfg)),
        config_text_(std::move(config_text)),
        no_jvpm_(no_jvpm),
        dataset_(data, cfg_.horizon),
        teacher_rng_(cfg_.seed),
        teacher_(cfg_.model, teacher_rng_),
        teacher_tokenizer_(teacher_clip(cfg_, pretrained)),
        policy_rng_(cfg_.seed ^ 0x706f6c696379ULL),
        policy_(cfg_, policy_rng_),
        opt_(cfg_.lr, cfg_.warmup),
        train_rng_(cfg_.seed ^ 0x616c69676eULL) {
    detail::restore_params(teacher_.params(), pretrained);
    if (cfg_.init_head_from_teacher) copy_teacher_head(pretrained);
    teacher_.params().freeze();
    teacher_hash_ = param_hash(teacher_.params());
  }

  const TrainConfig& config() const { return cfg_; }
  Policy& policy() { return policy_; }
  const GateNet& teacher() const { return teacher_; }
  std::uint64_t teacher_hash() const { return param_hash(teacher_.params()); }
  std::uint64_t initial_teacher_hash() const { return teacher_hash_; }
  std::size_t teacher_calls() const { return teacher_calls_; }
  std::size_t step_count() const { return step_; }

  // Frozen teacher embedding of the future clip; carries no gradients.
  Tensor teacher_embedding(const WindowRef& w) {
    ++teacher_calls_;
    Tape scratch;
    Tensor tokens = teacher_tokenizer_.encode_clip(dataset_.clip(w, cfg_.frames));
    return teacher_.forward(scratch, tokens).joint;
  }

  TraceRow step() {
    policy_.zero_grads();
    const double beta = no_jvpm_ ? 0.0 : beta_schedule(cfg_.beta0, step_ + 1, cfg_.steps);
    Tape tape;
    Tensor action_sum, align_sum;
    for (std::size_t b = 0; b < cfg_.batch; ++b) {
      WindowRef w = dataset_.sample(train_rng_);
      Tensor f_a = policy_.forward(tape, dataset_.current_frame(w),
                                   dataset_.task_id(w) % cfg_.n_tasks);
      Tensor a = policy_.head().loss(tape, f_a, dataset_.chunk(w), train_rng_);
      action_sum = b == 0 ? a : add(tape, action_sum, a);
      if (!no_jvpm_) {
        Tensor m_f = teacher_embedding(w);
        Tensor al = alignment_loss(tape, m_f, f_a, beta);
        align_sum = b == 0 ? al : add(tape, align_sum, al);
      }
    }
    Tensor action = scale(tape, action_sum, 1.0 / (double)cfg_.batch);
    Tensor total = action;
    double align_value = 0.0;
    if (align_sum.valid()) {
      Tensor align = scale(tape, align_sum, 1.0 / (double)cfg_.batch);
      align_value = align.value();
      total = add(tape, align, action);
    }
    tape.backward(total);
    ++step_;
    std::vector<std::pair<std::string, Tensor>> all = policy_.all_params();
    opt_.step(all, step_);

    TraceRow row;
    row.step = step_;
    row.lr = opt_.lr_at(step_);
    row.beta = beta;
    row.loss_total = total.value();
    row.loss_action = action.value();
    row.loss_align = align_value;
    return row;
  }

  std::vector<TraceRow> run(std::size_t steps = 0) {
    if (steps == 0) steps = cfg_.steps;
    std::vector<TraceRow> trace;
    trace.reserve(steps);
    for (std::size_t s = step_; s < steps; ++s) trace.push_back(step());
    return trace;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config_text = config_text_;
    ck.tensors = detail::snapshot_params(policy_.params());
    for (auto& kv : detail::snapshot_params(policy_.head().params())) ck.tensors.push_back(kv);
    ck.opt_state = opt_.state();
    ck.opt_t = opt_.t();
    ck.step = step_;
    ck.rng_state = train_rng_.serialize();
    ck.tokenizer_seed = cfg_.clip.seed;
    return ck;
  }

  void restore(const Checkpoint& ck) {
    detail::restore_params(policy_.params(), ck);
    detail::restore_params(policy_.head().params(), ck);
    opt_.state() = ck.opt_state;
    opt_.t() = ck.opt_t;
    step_ = ck.step;
    train_rng_.deserialize(ck.rng_state);
  }

 private:
  static ClipSpec teacher_clip(const TrainConfig& cfg, const Checkpoint& pretrained) {
    ClipSpec spec = cfg.clip;
    spec.seed = pretrained.tokenizer_seed;
    return spec;
  }

  void copy_teacher_head(const Checkpoint& pretrained) {
    // teacher head tensors are stored as "head.*"; the policy head lives under
    // "policy.head.*" with matching suffixes
    for (auto& [name, t] : policy_.head().params().params()) {
      if (name.rfind("policy.head.", 0) != 0) continue;
      std::string teacher_name = name.substr(std::string("policy.").size());
      for (const auto& [cn, ct] : pretrained.tensors) {
        if (cn != teacher_name) continue;
        if (ct.rows() != t.rows() || ct.cols() != t.cols()) {
          throw std::runtime_error("checkpoint/config mismatch: " + teacher_name);
        }
        Tensor dst = t;
        std::copy(ct.data().begin(), ct.data().end(), dst.data().begin());
        break;
      }
    }
  }

  TrainConfig cfg_;
  std::string config_text_;
  bool no_jvpm_;
  WindowDataset dataset_;
  Rng teacher_rng_;
  GateNet teacher_;
  Tokenizer teacher_tokenizer_;
  Rng policy_rng_;
  Policy policy_;
  Adam opt_;
  Rng train_rng_;
  std::size_t step_ = 0;
  std::size_t teacher_calls_ = 0;
  std::uint64_t teacher_hash_ = 0;
};

// Rebuilds a trained policy from its checkpoint for evaluation.
inline std::unique_ptr<Policy> load_policy(const TrainConfig& raw_cfg, const Checkpoint& ck) {
  TrainConfig cfg = finalize_config(raw_cfg);
  cfg.clip.seed = ck.tokenizer_seed;
  Rng rng(cfg.seed ^ 0x706f6c696379ULL);
  auto policy = std::make_unique<Policy>(cfg, rng);
  detail::restore_params(policy->params(), ck);
  detail::restore_params(policy->head().params(), ck);
  return policy;
}

}  // namespace jvpm
