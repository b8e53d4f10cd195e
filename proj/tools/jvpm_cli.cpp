// jvpm: data generation, two-stage training, evaluation, embedding analysis,
// perturbation probes, and gradient checking from one binary.
//
// Exit codes: 0 success, 1 assertion/check failure, 2 usage/config error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "jvpm/config.hpp"
#include "jvpm/paac.hpp"
#include "jvpm/training.hpp"

namespace fs = std::filesystem;
using namespace jvpm;

namespace {

constexpr const char* kToolVersion = "1.0.0";

std::size_t thread_cap() {
  std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("JVPM_THREADS")) {
    char* end = nullptr;
    unsigned long v = std::strtoul(env, &end, 10);
    if (end && *end == '\0' && v >= 1) return std::min<std::size_t>(v, hw);
  }
  return hw;
}

Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
  Config cfg;
  if (!path.empty()) cfg.parse_file(path);
  for (const std::string& kv : overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    }
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
}

// Run directory: resolved config, checkpoint, trace CSV, metadata.
void write_manifest(const std::string& out_dir, const Config& cfg, std::uint64_t seed,
                    double wall_seconds, const std::string& extra = "") {
  std::ostringstream meta;
  meta << "tool_version = " << kToolVersion << "\n"
       << "seed = " << seed << "\n"
       << "wall_clock_seconds = " << wall_seconds << "\n"
       << "threads = " << thread_cap() << "\n"
       << extra;
  write_file(out_dir + "/config.txt", cfg.resolved_text());
  write_file(out_dir + "/metadata.txt", meta.str());
}

Config config_from_checkpoint(const Checkpoint& ck) {
  Config cfg;
  if (!ck.config_text.empty()) cfg.parse_text(ck.config_text);
  return cfg;
}

bool is_policy_checkpoint(const Checkpoint& ck) {
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("policy.", 0) == 0) return true;
  }
  return false;
}

int cmd_gen_data(const std::string& out, std::size_t trajectories, std::uint64_t seed) {
  generate_dataset(trajectories, seed, out);
  std::cout << "wrote " << trajectories << " trajectories to " << out << "\n";
  return 0;
}

int cmd_pretrain(const std::string& config_path, const std::vector<std::string>& overrides,
                 const std::string& data_dir, const std::string& out_dir) {
  Config cfg = load_config(config_path, overrides);
  TrainConfig tc = cfg.to_train_config();
  std::vector<Trajectory> data = load_dataset(data_dir);
  fs::create_directories(out_dir);

  auto start = std::chrono::steady_clock::now();
  Stage1Trainer trainer(tc, data, cfg.resolved_text());
  std::vector<TraceRow> trace = trainer.run();
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  write_trace_csv(trace, out_dir + "/trace.csv");
  save_checkpoint(trainer.checkpoint(), out_dir + "/checkpoint.bin");
  write_manifest(out_dir, cfg, tc.seed, wall);
  std::cout << "pretrain: " << trace.size() << " steps, final loss "
            << trace.back().loss_total << "\n";
  return 0;
}

int cmd_posttrain(const std::string& config_path, const std::vector<std::string>& overrides,
                  const std::string& pretrained_path, const std::string& data_dir,
                  const std::string& out_dir, bool no_jvpm) {
  Config cfg = load_config(config_path, overrides);
  TrainConfig tc = cfg.to_train_config();
  Checkpoint teacher_ck = load_checkpoint(pretrained_path);
  std::vector<Trajectory> data = load_dataset(data_dir);
  fs::create_directories(out_dir);

  auto start = std::chrono::steady_clock::now();
  Stage2Trainer trainer(tc, data, teacher_ck, no_jvpm, cfg.resolved_text());
  std::uint64_t hash_before = trainer.initial_teacher_hash();
  std::vector<TraceRow> trace = trainer.run();
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::uint64_t hash_after = trainer.teacher_hash();

  write_trace_csv(trace, out_dir + "/trace.csv");
  save_checkpoint(trainer.checkpoint(), out_dir + "/checkpoint.bin");
  std::ostringstream extra;
  extra << "teacher_hash_before = " << hash_before << "\n"
        << "teacher_hash_after = " << hash_after << "\n"
        << "no_jvpm = " << (no_jvpm ? 1 : 0) << "\n";
  write_manifest(out_dir, cfg, tc.seed, wall, extra.str());
  if (hash_before != hash_after) {
    std::cerr << "teacher parameters changed during post-training\n";
    return 1;
  }
  std::cout << "posttrain: " << trace.size() << " steps, final loss "
            << trace.back().loss_total << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             std::size_t closed_loop, std::uint64_t seed, std::size_t max_windows,
             const std::string& out_path, const std::string& embeddings_out,
             const std::string& actions_out) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Config cfg = config_from_checkpoint(ck);
  TrainConfig tc = cfg.to_train_config();
  std::ostringstream csv;
  csv.precision(17);
  csv << "metric,value\n";

  if (is_policy_checkpoint(ck)) {
    auto policy = load_policy(tc, ck);
    if (closed_loop > 0) {
      double sr = evaluate_closed_loop(policy->as_chunk_policy(seed ^ 0x73616d70ULL),
                                       closed_loop, seed);
      csv << "closed_loop_success," << sr << "\n";
      std::cout << "closed-loop success over " << closed_loop << " episodes: " << sr << "\n";
    }
    if (!data_dir.empty()) {
      std::vector<Trajectory> data = load_dataset(data_dir);
      WindowDataset ds(data, tc.horizon);
      Rng rng(seed);
      double mae = 0.0;
      std::size_t n = std::min(max_windows, ds.size());
      std::size_t stride = std::max<std::size_t>(1, ds.size() / n);
      std::size_t used = 0;
      for (std::size_t i = 0; i < ds.size() && used < n; i += stride, ++used) {
        const WindowRef& w = ds.get(i);
        Tensor pred = policy->predict_chunk(ds.current_frame(w),
                                            ds.task_id(w) % tc.n_tasks, rng);
        Tensor target = ds.chunk(w);
        double m = 0.0;
        for (std::size_t k = 0; k < pred.size(); ++k) m += std::fabs(pred[k] - target[k]);
        mae += m / (double)pred.size();
      }
      mae /= (double)used;
      csv << "action_mae," << mae << "\nwindows," << used << "\n";
      std::cout << "offline action MAE over " << used << " windows: " << mae << "\n";
    }
  } else {
    if (data_dir.empty()) {
      throw std::invalid_argument("stage-1 evaluation needs --data");
    }
    std::vector<Trajectory> data = load_dataset(data_dir);
    Stage1Trainer trainer(tc, data, ck.config_text);
    trainer.restore(ck);
    Stage1Trainer::OfflineMetrics m = trainer.evaluate_offline(max_windows, seed);
    csv << "action_mae," << m.action_mae << "\nrecon_mse," << m.recon_mse << "\nwindows,"
        << m.windows << "\n";
    std::cout << "offline action MAE " << m.action_mae << ", recon MSE " << m.recon_mse
              << " over " << m.windows << " windows\n";

    if (!embeddings_out.empty() || !actions_out.empty()) {
      const WindowDataset& ds = trainer.dataset();
      std::size_t n = std::min(max_windows, ds.size());
      std::size_t stride = std::max<std::size_t>(1, ds.size() / n);
      std::vector<std::string> ids;
      Tensor embeddings;
      std::ofstream actions;
      if (!actions_out.empty()) {
        actions.open(actions_out, std::ios::trunc);
        if (!actions) throw std::runtime_error("cannot write " + actions_out);
        actions.precision(17);
        actions << "id,t,a0,a1,a2\n";
      }
      std::size_t used = 0;
      for (std::size_t i = 0; i < ds.size() && used < n; i += stride, ++used) {
        const WindowRef& w = ds.get(i);
        std::string id = "w" + std::to_string(i);
        ids.push_back(id);
        Tape scratch;
        GateNetOutput out = trainer.net().forward(scratch, trainer.encode_window(w));
        Tape pool_tape;
        Tensor pooled = mean_rows(pool_tape, out.joint);
        if (!embeddings.valid()) embeddings = Tensor(n, pooled.cols());
        for (std::size_t k = 0; k < pooled.cols(); ++k) embeddings.at(used, k) = pooled[k];
        if (actions.is_open()) {
          Tensor chunk = ds.chunk(w);
          for (std::size_t t = 0; t < chunk.rows(); ++t) {
            actions << id << "," << t;
            for (std::size_t k = 0; k < chunk.cols(); ++k) actions << "," << chunk.at(t, k);
            actions << "\n";
          }
        }
      }
      if (!embeddings_out.empty()) {
        write_embeddings_csv(ids, embeddings, embeddings_out);
        std::cout << "wrote " << ids.size() << " embeddings to " << embeddings_out << "\n";
      }
    }
  }
  if (!out_path.empty()) write_file(out_path, csv.str());
  return 0;
}

int cmd_paac(const std::string& embeddings_path, const std::string& actions_path,
             std::size_t topk, const std::string& out_dir) {
  auto [emb_ids, embeddings] = read_embeddings_csv(embeddings_path);
  auto [act_ids, actions] = read_actions_csv(actions_path);
  if (emb_ids != act_ids) {
    throw std::invalid_argument("embedding ids and action ids do not match");
  }
  if (topk >= emb_ids.size()) {
    throw std::invalid_argument("--topk " + std::to_string(topk) +
                                " must be below the sample count " +
                                std::to_string(emb_ids.size()));
  }
  PaacSimilarity sim = paac_similarity(actions);
  if (sim.degenerate) {
    std::cerr << "warning: all action pairs coincide; bandwidth is degenerate and "
                 "similarity falls back to the zero-distance indicator\n";
  }
  PaacReport rep = neighbor_consistency(embeddings, sim.similarity, topk);

  fs::create_directories(out_dir);
  std::ofstream report(out_dir + "/report.csv", std::ios::trunc);
  if (!report) throw std::runtime_error("cannot write " + out_dir + "/report.csv");
  report.precision(17);
  report << "target,rank,neighbor,cosine,s_phys\n";
  for (std::size_t i = 0; i < emb_ids.size(); ++i) {
    for (std::size_t k = 0; k < topk; ++k) {
      std::size_t j = rep.neighbors[i][k];
      report << emb_ids[i] << "," << k << "," << emb_ids[j] << "," << rep.cosine.at(i, j)
             << "," << rep.scores[i * topk + k] << "\n";
    }
  }
  write_histogram_csv(rep, out_dir + "/histogram.csv");
  std::ostringstream summary;
  summary.precision(17);
  summary << "sigma = " << sim.sigma << "\nmean_consistency = " << rep.mean
          << "\ndegenerate = " << (sim.degenerate ? 1 : 0) << "\n";
  write_file(out_dir + "/summary.txt", summary.str());
  std::cout << "mean top-" << topk << " consistency: " << rep.mean << " (sigma " << sim.sigma
            << ")\n";
  return 0;
}

int cmd_perturb(const std::string& ckpt_path, const std::string& data_dir,
                const std::string& kind, double strength, std::uint64_t seed,
                std::size_t n_clips, const std::string& out_path) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  if (is_policy_checkpoint(ck)) {
    throw std::invalid_argument("perturb expects a stage-1 checkpoint");
  }
  Config cfg = config_from_checkpoint(ck);
  TrainConfig tc = cfg.to_train_config();
  std::vector<Trajectory> data = load_dataset(data_dir);
  Stage1Trainer trainer(tc, data, ck.config_text);
  trainer.restore(ck);
  trainer.net().params().freeze();

  const WindowDataset& ds = trainer.dataset();
  std::size_t n = std::min(n_clips, ds.size());
  std::size_t stride = std::max<std::size_t>(1, ds.size() / n);
  std::vector<ProbeClip> clips;
  for (std::size_t i = 0; i < ds.size() && clips.size() < n; i += stride) {
    const WindowRef& w = ds.get(i);
    ProbeClip pc;
    pc.frames = ds.clip(w, trainer.config().frames);
    pc.chunk = ds.chunk(w);
    clips.push_back(pc);
  }

  Perturbation pert{parse_perturbation_kind(kind), strength};
  std::vector<ProbeRow> rows = perturbation_probe(trainer.net(), trainer.tokenizer(),
                                                  trainer.head(), clips, pert, seed);
  if (!out_path.empty()) write_probe_csv(rows, out_path);
  std::vector<double> emb_mse, bias;
  for (const ProbeRow& r : rows) {
    emb_mse.push_back(r.embedding_mse);
    bias.push_back(r.action_bias);
  }
  std::cout << "perturb " << kind << " strength " << strength << ": median embedding MSE "
            << median_of(emb_mse) << ", median action bias " << median_of(bias) << " over "
            << rows.size() << " clips\n";
  return 0;
}

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
};

int cmd_gradcheck(std::uint64_t seed, double tol) {
  std::vector<GradCheckCase> cases;

  {
    GateNetConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.n_tokens = 10;
    cfg.n_visual = 5;
    cfg.pool_queries = 4;
    Rng rng(seed);
    GateNet net(cfg, rng);
    Tensor tokens(10, 8);
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = rng.normal();
    Tensor target(4, 8);
    for (std::size_t i = 0; i < target.size(); ++i) target[i] = rng.normal();
    auto loss_fn = [&](Tape& tape) {
      GateNetOutput out = net.forward(tape, tokens);
      return add(tape, net.recon_loss(tape, out.recon, target),
                 mean_all(tape, square(tape, out.joint)));
    };
    cases.push_back({"gatenet", grad_check(net.params().params(), loss_fn)});
  }

  {
    HeadConfig cfg;
    cfg.embed_dim = 8;
    Rng rng(seed + 1);
    OftHead head(cfg, rng);
    Tensor out_w = head.params().find("head.oft.out.W");
    for (std::size_t i = 0; i < out_w.size(); ++i) out_w[i] = rng.normal(0.0, 0.02);
    Tensor mf(6, 8);
    for (std::size_t i = 0; i < mf.size(); ++i) mf[i] = rng.normal();
    Tensor chunk(kChunkLen, kActionDim);
    for (std::size_t i = 0; i < chunk.size(); ++i) chunk[i] = rng.normal();
    auto loss_fn = [&](Tape& tape) {
      Rng r(0);
      return head.loss(tape, mf, chunk, r);
    };
    cases.push_back({"oft_head", grad_check(head.params().params(), loss_fn)});
  }

  {
    HeadConfig cfg;
    cfg.embed_dim = 8;
    cfg.hidden = 16;
    Rng rng(seed + 2);
    FlowHead head(cfg, rng);
    Tensor mf(6, 8);
    for (std::size_t i = 0; i < mf.size(); ++i) mf[i] = rng.normal();
    std::vector<double> x(cfg.chunk_size()), eps(cfg.chunk_size());
    for (auto& v : x) v = rng.normal(0.0, 0.05);
    for (auto& v : eps) v = rng.normal();
    FlowState fs = make_flow_state(x, eps, 0.3);
    auto loss_fn = [&](Tape& tape) { return head.loss_at(tape, mf, fs); };
    cases.push_back({"flow_head", grad_check(head.params().params(), loss_fn)});
  }

  {
    TrainConfig cfg;
    cfg.model.dim = 8;
    cfg.model.heads = 2;
    cfg.model.encoder_layers = 1;
    cfg.model.visual_layers = 1;
    cfg.model.decoder_layers = 1;
    cfg.model.gate_iterations = 1;
    cfg.policy_layers = 1;
    cfg.seed = seed + 3;
    Rng rng(seed + 3);
    Policy policy(cfg, rng);
    Rng wrng(seed + 4);
    Frame frame = render(random_initial_state(wrng));
    Tensor target(policy.config().model.n_motor(), 8);
    for (std::size_t i = 0; i < target.size(); ++i) target[i] = wrng.normal();
    auto loss_fn = [&](Tape& tape) {
      Tensor f_a = policy.forward(tape, frame, 0);
      return mse_loss(tape, f_a, target);
    };
    cases.push_back({"adapter", grad_check(policy.params().params(), loss_fn)});
  }

  bool ok = true;
  for (const GradCheckCase& c : cases) {
    bool pass = c.report.pass(tol);
    ok = ok && pass;
    std::cout << c.name << ": " << (pass ? "pass" : "FAIL") << " (worst "
              << c.report.worst << " at " << c.report.worst_name << ", "
              << c.report.entries.size() << " parameters, tol " << tol << ")\n";
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"joint visuomotor predictive modeling toolkit"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate expert trajectories");
  std::string gen_out;
  std::size_t gen_n = 0;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--trajectories", gen_n, "trajectory count")->required()
      ->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "base seed");

  auto* pre = app.add_subcommand("pretrain", "stage-1 joint pretraining");
  std::string pre_config, pre_data, pre_out;
  std::vector<std::string> pre_set;
  pre->add_option("--config", pre_config, "config file");
  pre->add_option("--set", pre_set, "inline key=value override");
  pre->add_option("--data", pre_data, "dataset directory")->required();
  pre->add_option("--out", pre_out, "run directory")->required();

  auto* post = app.add_subcommand("posttrain", "stage-2 latent alignment");
  std::string post_config, post_pre, post_data, post_out;
  std::vector<std::string> post_set;
  bool no_jvpm = false;
  post->add_option("--config", post_config, "config file");
  post->add_option("--set", post_set, "inline key=value override");
  post->add_option("--pretrained", post_pre, "stage-1 checkpoint")->required();
  post->add_option("--data", post_data, "dataset directory")->required();
  post->add_option("--out", post_out, "run directory")->required();
  post->add_flag("--no-jvpm", no_jvpm, "disable latent alignment (beta = 0)");

  auto* ev = app.add_subcommand("eval", "offline and closed-loop evaluation");
  std::string ev_ckpt, ev_data, ev_out, ev_emb, ev_act;
  std::size_t ev_closed = 0, ev_windows = 200;
  std::uint64_t ev_seed = 0;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
  ev->add_option("--data", ev_data, "dataset directory");
  ev->add_option("--closed-loop", ev_closed, "closed-loop episode count");
  ev->add_option("--seed", ev_seed, "evaluation seed");
  ev->add_option("--windows", ev_windows, "offline window cap");
  ev->add_option("--out", ev_out, "metrics CSV path");
  ev->add_option("--embeddings-out", ev_emb, "dump pooled embeddings CSV");
  ev->add_option("--actions-out", ev_act, "dump matching action chunks CSV");

  auto* pa = app.add_subcommand("paac", "action-consistency analysis");
  std::string pa_emb, pa_act, pa_out;
  std::size_t pa_topk = 3;
  pa->add_option("--embeddings", pa_emb, "embeddings CSV")->required();
  pa->add_option("--actions", pa_act, "actions CSV")->required();
  pa->add_option("--topk", pa_topk, "neighbors per target");
  pa->add_option("--out", pa_out, "report directory")->required();

  auto* pert = app.add_subcommand("perturb", "perturbation robustness probe");
  std::string pert_ckpt, pert_data, pert_kind = "gaussian_noise", pert_out;
  double pert_strength = 0.0;
  std::uint64_t pert_seed = 0;
  std::size_t pert_clips = 50;
  pert->add_option("--ckpt", pert_ckpt, "stage-1 checkpoint")->required();
  pert->add_option("--data", pert_data, "dataset directory")->required();
  pert->add_option("--kind", pert_kind, "gaussian_noise or brightness");
  pert->add_option("--strength", pert_strength, "noise stddev or brightness offset");
  pert->add_option("--seed", pert_seed, "perturbation seed");
  pert->add_option("--clips", pert_clips, "clip count");
  pert->add_option("--out", pert_out, "probe CSV path");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  std::uint64_t gc_seed = 12345;
  double gc_tol = 1e-4;
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_option("--tol", gc_tol, "relative tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_out, gen_n, gen_seed);
    if (pre->parsed()) return cmd_pretrain(pre_config, pre_set, pre_data, pre_out);
    if (post->parsed()) {
      return cmd_posttrain(post_config, post_set, post_pre, post_data, post_out, no_jvpm);
    }
    if (ev->parsed()) {
      return cmd_eval(ev_ckpt, ev_data, ev_closed, ev_seed, ev_windows, ev_out, ev_emb, ev_act);
    }
    if (pa->parsed()) return cmd_paac(pa_emb, pa_act, pa_topk, pa_out);
    if (pert->parsed()) {
      return cmd_perturb(pert_ckpt, pert_data, pert_kind, pert_strength, pert_seed,
                         pert_clips, pert_out);
    }
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_tol);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
