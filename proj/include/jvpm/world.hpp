#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "jvpm/rng.hpp"

namespace jvpm {

// Deterministic 2D pick-and-place world on the unit square. The agent moves by
// clamped deltas, grasps the object within grasp_radius, carries it while
// held, and succeeds when the object rests within success_radius of the goal.

constexpr double kGraspRadius = 0.06;
constexpr double kSuccessRadius = 0.05;
constexpr double kMaxDelta = 0.1;
constexpr int kFrameSize = 32;

struct Action {
  double dx = 0.0;
  double dy = 0.0;
  double grip = 0.0;  // thresholded at 0.5
};

struct WorldState {
  double agent_x = 0.5, agent_y = 0.5;
  int gripper = 0;  // 0 open, 1 closed
  double object_x = 0.5, object_y = 0.5;
  double goal_x = 0.5, goal_y = 0.5;
  bool held = false;
};

struct Frame {
  std::uint8_t pixels[kFrameSize * kFrameSize] = {};

  bool operator==(const Frame& o) const {
    return std::memcmp(pixels, o.pixels, sizeof(pixels)) == 0;
  }
};

inline double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

inline double dist(double ax, double ay, double bx, double by) {
  return std::hypot(ax - bx, ay - by);
}

inline WorldState step(const WorldState& s, const Action& a) {
  WorldState n = s;
  double dx = std::clamp(a.dx, -kMaxDelta, kMaxDelta);
  double dy = std::clamp(a.dy, -kMaxDelta, kMaxDelta);
  double nx = clamp01(s.agent_x + dx);
  double ny = clamp01(s.agent_y + dy);
  double moved_x = nx - s.agent_x;  // actual displacement after clamping
  double moved_y = ny - s.agent_y;
  n.agent_x = nx;
  n.agent_y = ny;
  if (s.held) {
    n.object_x = clamp01(s.object_x + moved_x);
    n.object_y = clamp01(s.object_y + moved_y);
  }
  bool close = a.grip >= 0.5;
  n.gripper = close ? 1 : 0;
  if (!close) {
    n.held = false;
  } else if (!n.held && dist(n.agent_x, n.agent_y, n.object_x, n.object_y) <= kGraspRadius) {
    n.held = true;
  }
  return n;
}

// Intensities: agent 255, object 160, goal 80; overlaps resolved by max. The
// agent square grows from 3x3 to 5x5 while the gripper is closed so actuator
// state is readable from pixels alone.
inline Frame render(const WorldState& s) {
  Frame f;
  auto stamp = [&](double x, double y, std::uint8_t value, int r) {
    int cx = (int)std::lround(x * (kFrameSize - 1));
    int cy = (int)std::lround(y * (kFrameSize - 1));
    for (int oy = -r; oy <= r; ++oy) {
      for (int ox = -r; ox <= r; ++ox) {
        int px = cx + ox, py = cy + oy;
        if (px < 0 || px >= kFrameSize || py < 0 || py >= kFrameSize) continue;
        std::uint8_t& p = f.pixels[py * kFrameSize + px];
        p = std::max(p, value);
      }
    }
  };
  stamp(s.goal_x, s.goal_y, 80, 1);
  stamp(s.object_x, s.object_y, 160, 1);
  stamp(s.agent_x, s.agent_y, 255, s.gripper ? 2 : 1);
  return f;
}

// Proportional controller, gain 0.5: approach, grasp, carry, release.
inline Action expert_policy(const WorldState& s) {
  constexpr double gain = 0.5;
  Action a;
  if (dist(s.object_x, s.object_y, s.goal_x, s.goal_y) <= kSuccessRadius && !s.held) {
    return a;  // solved, idle
  }
  if (!s.held) {
    a.dx = std::clamp(gain * (s.object_x - s.agent_x), -kMaxDelta, kMaxDelta);
    a.dy = std::clamp(gain * (s.object_y - s.agent_y), -kMaxDelta, kMaxDelta);
    a.grip =
        dist(s.agent_x, s.agent_y, s.object_x, s.object_y) <= kGraspRadius ? 1.0 : 0.0;
  } else {
    a.dx = std::clamp(gain * (s.goal_x - s.agent_x), -kMaxDelta, kMaxDelta);
    a.dy = std::clamp(gain * (s.goal_y - s.agent_y), -kMaxDelta, kMaxDelta);
    a.grip = dist(s.agent_x, s.agent_y, s.goal_x, s.goal_y) <= kSuccessRadius ? 0.0 : 1.0;
  }
  return a;
}

inline bool is_success(const WorldState& s) {
  return dist(s.object_x, s.object_y, s.goal_x, s.goal_y) <= kSuccessRadius;
}

// Random start with the object well away from the goal so a do-nothing policy
// never scores. Positions are random but the two task distances are fixed
// (agent 0.12 from the object, object 0.5 from the goal) so episode phase
// lengths are consistent across the task distribution.
constexpr double kStartApproach = 0.12;
constexpr double kStartCarry = 0.5;

inline WorldState random_initial_state(Rng& rng) {
  WorldState s;
  for (;;) {
    s.object_x = rng.uniform(0.1, 0.9);
    s.object_y = rng.uniform(0.1, 0.9);
    double ta = rng.uniform(0.0, 2.0 * M_PI);
    double tg = rng.uniform(0.0, 2.0 * M_PI);
    s.agent_x = s.object_x + kStartApproach * std::cos(ta);
    s.agent_y = s.object_y + kStartApproach * std::sin(ta);
    s.goal_x = s.object_x + kStartCarry * std::cos(tg);
    s.goal_y = s.object_y + kStartCarry * std::sin(tg);
    s.gripper = 0;
    s.held = false;
    auto in_bounds = [](double x, double y) {
      return x >= 0.1 && x <= 0.9 && y >= 0.1 && y <= 0.9;
    };
    if (in_bounds(s.agent_x, s.agent_y) && in_bounds(s.goal_x, s.goal_y)) return s;
  }
}

struct Trajectory {
  std::vector<Frame> frames;   // length T >= 33
  std::vector<Action> actions; // length T - 1
  std::uint32_t task_id = 0;
};

// Quantizes to f32 so the stored actions replay the f64 dynamics exactly.
inline Action quantize_action(const Action& a) {
  Action q;
  q.dx = (double)(float)a.dx;
  q.dy = (double)(float)a.dy;
  q.grip = (double)(float)a.grip;
  return q;
}

// One expert episode of fixed length; the expert idles once solved.
inline Trajectory expert_trajectory(Rng& rng, std::size_t total_steps = 40) {
  Trajectory traj;
  WorldState s = random_initial_state(rng);
  traj.frames.push_back(render(s));
  for (std::size_t t = 0; t < total_steps; ++t) {
    Action a = quantize_action(expert_policy(s));
    s = step(s, a);
    traj.actions.push_back(a);
    traj.frames.push_back(render(s));
  }
  return traj;
}

// ---- trajectory binary format ---------------------------------------------
// little-endian: "JVTR", version u32=1, T u32, H u32, W u32, action_dim u32=3,
// task_id u32, T*H*W u8 pixels, (T-1)*3 f32 actions.

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& path) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) {
    throw std::runtime_error("truncated trajectory file: " + path);
  }
  return v;
}

}  // namespace detail

inline void save_trajectory(const Trajectory& traj, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write trajectory file: " + path);
  os.write("JVTR", 4);
  detail::write_u32(os, 1);
  detail::write_u32(os, (std::uint32_t)traj.frames.size());
  detail::write_u32(os, kFrameSize);
  detail::write_u32(os, kFrameSize);
  detail::write_u32(os, 3);
  detail::write_u32(os, traj.task_id);
  for (const Frame& f : traj.frames) {
    os.write(reinterpret_cast<const char*>(f.pixels), sizeof(f.pixels));
  }
  for (const Action& a : traj.actions) {
    float v[3] = {(float)a.dx, (float)a.dy, (float)a.grip};
    os.write(reinterpret_cast<const char*>(v), sizeof(v));
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline Trajectory load_trajectory(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open trajectory file: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "JVTR", 4) != 0) {
    throw std::runtime_error("bad magic in trajectory file: " + path);
  }
  std::uint32_t version = detail::read_u32(is, path);
  if (version != 1) {
    throw std::runtime_error("unsupported trajectory version " + std::to_string(version) +
                             " in " + path);
  }
  std::uint32_t T = detail::read_u32(is, path);
  std::uint32_t H = detail::read_u32(is, path);
  std::uint32_t W = detail::read_u32(is, path);
  std::uint32_t action_dim = detail::read_u32(is, path);
  if (H != kFrameSize || W != kFrameSize || action_dim != 3) {
    throw std::runtime_error("unexpected frame geometry in " + path);
  }
  Trajectory traj;
  traj.task_id = detail::read_u32(is, path);
  traj.frames.resize(T);
  for (Frame& f : traj.frames) {
    if (!is.read(reinterpret_cast<char*>(f.pixels), sizeof(f.pixels))) {
      throw std::runtime_error("truncated trajectory file: " + path);
    }
  }
  traj.actions.resize(T > 0 ? T - 1 : 0);
  for (Action& a : traj.actions) {
    float v[3];
    if (!is.read(reinterpret_cast<char*>(v), sizeof(v))) {
      throw std::runtime_error("truncated trajectory file: " + path);
    }
    a.dx = v[0];
    a.dy = v[1];
    a.grip = v[2];
  }
  return traj;
}

// Writes traj_%06d.bin files plus manifest.txt; per-trajectory seeds are
// seed + index so generation order is irrelevant.
inline void generate_dataset(std::size_t n, std::uint64_t seed, const std::string& out_dir) {
  if (n < 1) throw std::invalid_argument("generate_dataset: need at least one trajectory");
  std::filesystem::create_directories(out_dir);
  std::ofstream manifest(out_dir + "/manifest.txt", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write manifest in " + out_dir);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(seed + i);
    Trajectory traj = expert_trajectory(rng);
    char name[32];
    std::snprintf(name, sizeof(name), "traj_%06zu.bin", i);
    save_trajectory(traj, out_dir + "/" + name);
    manifest << name << "\n";
  }
}

inline std::vector<Trajectory> load_dataset(const std::string& dir) {
  std::ifstream manifest(dir + "/manifest.txt");
  if (!manifest) throw std::runtime_error("missing manifest.txt in " + dir);
  std::vector<Trajectory> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    out.push_back(load_trajectory(dir + "/" + line));
  }
  return out;
}

// Policy interface for closed-loop evaluation: (frame, task_id) -> flat chunk
// of k actions [k x 3], executed c actions at a time before re-planning.
using ChunkPolicy = std::function<std::vector<Action>(const Frame&, std::uint32_t)>;

inline double evaluate_closed_loop(const ChunkPolicy& policy, std::size_t episodes,
                                   std::uint64_t seed, std::size_t execute_per_chunk = 8,
                                   std::size_t max_steps = 80) {
  std::size_t successes = 0;
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    Rng rng(seed + ep);
    WorldState s = random_initial_state(rng);
    std::size_t steps = 0;
    bool done = is_success(s);
    while (!done && steps < max_steps) {
      std::vector<Action> chunk = policy(render(s), 0);
      for (std::size_t i = 0; i < std::min(execute_per_chunk, chunk.size()); ++i) {
        s = step(s, chunk[i]);
        ++steps;
        if (is_success(s)) {
          done = true;
          break;
        }
        if (steps >= max_steps) break;
      }
      if (chunk.empty()) break;
    }
    if (done || is_success(s)) ++successes;
  }
  return (double)successes / (double)episodes;
}

}  // namespace jvpm
