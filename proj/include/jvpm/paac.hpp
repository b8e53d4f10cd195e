#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "jvpm/gatenet.hpp"
#include "jvpm/heads.hpp"
#include "jvpm/tensor.hpp"
#include "jvpm/tokenizer.hpp"
#include "jvpm/world.hpp"

namespace jvpm {

// ---------------------------------------------------------------------------
// Dynamic time warping over action sequences [T x d], squared Euclidean local
// cost, unconstrained monotonic paths.

struct DtwResult {
  double distance = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> path;  // 1-based index pairs
};

inline DtwResult dtw(const Tensor& a, const Tensor& b) {
  if (a.rows() == 0 || b.rows() == 0) {
    throw std::invalid_argument("dtw: empty action sequence");
  }
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("dtw: dimension mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
  auto cost = [&](std::size_t i, std::size_t j) {
    double c = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      double diff = a.at(i, k) - b.at(j, k);
      c += diff * diff;
    }
    return c;
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dp(n * m, inf);
  auto at = [&](std::size_t i, std::size_t j) -> double& { return dp[i * m + j]; };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double best;
      if (i == 0 && j == 0) {
        best = 0.0;
      } else {
        best = inf;
        if (i > 0 && j > 0) best = std::min(best, at(i - 1, j - 1));
        if (i > 0) best = std::min(best, at(i - 1, j));
        if (j > 0) best = std::min(best, at(i, j - 1));
      }
      at(i, j) = cost(i, j) + best;
    }
  }
  DtwResult r;
  r.distance = at(n - 1, m - 1);
  // backtrack; ties prefer diagonal, then vertical, then horizontal
  std::size_t i = n - 1, j = m - 1;
  r.path.emplace_back(i + 1, j + 1);
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i - 1, j - 1) <= at(i - 1, j) && at(i - 1, j - 1) <= at(i, j - 1)) {
      --i;
      --j;
    } else if (i > 0 && (j == 0 || at(i - 1, j) <= at(i, j - 1))) {
      --i;
    } else {
      --j;
    }
    r.path.emplace_back(i + 1, j + 1);
  }
  std::reverse(r.path.begin(), r.path.end());
  return r;
}

// ---------------------------------------------------------------------------
// Median-heuristic RBF similarity (Alg. 1).

inline double median_bandwidth(const Tensor& distances) {
  if (distances.rows() != distances.cols() || distances.rows() < 2) {
    throw std::invalid_argument("median_bandwidth: need a square matrix with N >= 2");
  }
  std::vector<double> roots;
  for (std::size_t i = 0; i < distances.rows(); ++i) {
    for (std::size_t j = 0; j < distances.cols(); ++j) {
      if (i != j) roots.push_back(std::sqrt(distances.at(i, j)));
    }
  }
  std::sort(roots.begin(), roots.end());
  const std::size_t n = roots.size();
  if (n % 2 == 1) return roots[n / 2];
  return 0.5 * (roots[n / 2 - 1] + roots[n / 2]);
}

inline Tensor rbf_similarity(const Tensor& distances, double sigma) {
  if (sigma <= 0.0) {
    throw std::invalid_argument("rbf_similarity: bandwidth must be positive, got " +
                                std::to_string(sigma));
  }
  Tensor s(distances.rows(), distances.cols());
  for (std::size_t i = 0; i < distances.rows(); ++i) {
    for (std::size_t j = 0; j < distances.cols(); ++j) {
      s.at(i, j) = i == j ? 1.0 : std::exp(-distances.at(i, j) / (2.0 * sigma * sigma));
    }
  }
  return s;
}

struct PaacSimilarity {
  Tensor distance;    // pairwise DTW distances
  double sigma = 0.0;
  Tensor similarity;  // S_phys in [0,1]^{N x N}
  bool degenerate = false;  // all pairs identical, kernel replaced by an indicator
};

// Pairwise DTW -> median bandwidth -> RBF kernel. When every pair coincides
// (sigma = 0) similarity degrades to the 0/1 indicator of zero distance.
inline PaacSimilarity paac_similarity(const std::vector<Tensor>& actions) {
  const std::size_t n = actions.size();
  if (n < 2) throw std::invalid_argument("paac_similarity: need at least two sequences");
  PaacSimilarity out;
  out.distance = Tensor(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double d = dtw(actions[i], actions[j]).distance;
      out.distance.at(i, j) = d;
      out.distance.at(j, i) = d;
    }
  }
  out.sigma = median_bandwidth(out.distance);
  if (out.sigma > 0.0) {
    out.similarity = rbf_similarity(out.distance, out.sigma);
  } else {
    out.degenerate = true;
    out.similarity = Tensor(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        out.similarity.at(i, j) = out.distance.at(i, j) == 0.0 ? 1.0 : 0.0;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Top-k neighbor consistency over embedding cosine similarity.

struct PaacReport {
  Tensor cosine;                            // embedding cosine similarities
  std::vector<std::vector<std::size_t>> neighbors;  // per target, k indices
  std::vector<double> scores;               // S_phys at every (target, neighbor)
  std::vector<double> bin_left, bin_right, density;
  double mean = 0.0;
};

inline Tensor cosine_similarity_matrix(const Tensor& embeddings) {
  const std::size_t n = embeddings.rows(), d = embeddings.cols();
  std::vector<double> norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += embeddings.at(i, k) * embeddings.at(i, k);
    norm[i] = std::sqrt(s);
  }
  Tensor c(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += embeddings.at(i, k) * embeddings.at(j, k);
      double denom = norm[i] * norm[j];
      c.at(i, j) = denom > 0.0 ? dot / denom : 0.0;
    }
  }
  return c;
}

inline PaacReport neighbor_consistency(const Tensor& embeddings, const Tensor& s_phys,
                                       std::size_t k = 3, std::size_t bins = 20) {
  const std::size_t n = embeddings.rows();
  if (k >= n) {
    throw std::invalid_argument("neighbor_consistency: k = " + std::to_string(k) +
                                " must be below the sample count " + std::to_string(n));
  }
  if (s_phys.rows() != n || s_phys.cols() != n) {
    throw std::invalid_argument("neighbor_consistency: similarity matrix " +
                                s_phys.shape_str() + " does not match " +
                                std::to_string(n) + " embeddings");
  }
  PaacReport rep;
  rep.cosine = cosine_similarity_matrix(embeddings);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) order.push_back(j);
    }
    // most similar first; ties broken by the lowest index
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return rep.cosine.at(i, a) > rep.cosine.at(i, b);
    });
    order.resize(k);
    for (std::size_t j : order) rep.scores.push_back(s_phys.at(i, j));
    rep.neighbors.push_back(std::move(order));
  }
  rep.bin_left.resize(bins);
  rep.bin_right.resize(bins);
  rep.density.assign(bins, 0.0);
  for (std::size_t b = 0; b < bins; ++b) {
    rep.bin_left[b] = (double)b / (double)bins;
    rep.bin_right[b] = (double)(b + 1) / (double)bins;
  }
  for (double s : rep.scores) {
    std::size_t b = std::min((std::size_t)(s * (double)bins), bins - 1);
    rep.density[b] += 1.0;
    rep.mean += s;
  }
  for (double& d : rep.density) d /= (double)rep.scores.size();
  rep.mean /= (double)rep.scores.size();
  return rep;
}

// ---------------------------------------------------------------------------
// Perturbation robustness of a frozen stage-1 model.

struct Perturbation {
  enum class Kind { gaussian_noise, brightness };
  Kind kind = Kind::gaussian_noise;
  double strength = 0.0;  // noise stddev or brightness offset, in pixel units
};

inline Perturbation::Kind parse_perturbation_kind(const std::string& s) {
  if (s == "gaussian_noise") return Perturbation::Kind::gaussian_noise;
  if (s == "brightness") return Perturbation::Kind::brightness;
  throw std::invalid_argument("unknown perturbation kind: " + s);
}

inline Frame perturb_frame(const Frame& f, const Perturbation& p, Rng& rng) {
  Frame out = f;
  if (p.strength == 0.0) return out;  // exact identity at zero strength
  for (std::size_t i = 0; i < kFrameSize * kFrameSize; ++i) {
    double delta = p.kind == Perturbation::Kind::gaussian_noise
                       ? rng.normal(0.0, p.strength)
                       : p.strength;
    double v = std::round((double)f.pixels[i] + delta);
    out.pixels[i] = (std::uint8_t)std::clamp(v, 0.0, 255.0);
  }
  return out;
}

inline std::vector<Frame> perturb_clip(const std::vector<Frame>& clip, const Perturbation& p,
                                       std::uint64_t seed) {
  std::vector<Frame> out;
  Rng rng(seed);
  for (const Frame& f : clip) out.push_back(perturb_frame(f, p, rng));
  return out;
}

struct ProbeRow {
  std::size_t clip = 0;
  double embedding_mse = 0.0;
  double action_mse_clean = 0.0;
  double action_mse_perturbed = 0.0;
  double action_bias = 0.0;  // mean |pred_perturbed - pred_clean|
};

struct ProbeClip {
  std::vector<Frame> frames;  // clip-spec length
  Tensor chunk;               // ground-truth actions [16 x 3]
};

// Per clip: embedding MSE between clean and perturbed M_f, head prediction MSE
// against ground truth on both inputs, and the clean-vs-perturbed action bias.
inline std::vector<ProbeRow> perturbation_probe(const GateNet& net, const Tokenizer& tokenizer,
                                                ActionHead& head,
                                                const std::vector<ProbeClip>& clips,
                                                const Perturbation& pert, std::uint64_t seed) {
  std::vector<ProbeRow> rows;
  for (std::size_t c = 0; c < clips.size(); ++c) {
    const ProbeClip& clip = clips[c];
    Tape scratch;
    Tensor clean_tokens = tokenizer.encode_clip(clip.frames);
    Tensor clean_mf = net.forward(scratch, clean_tokens).joint;
    std::vector<Frame> noisy = perturb_clip(clip.frames, pert, seed + c);
    Tensor noisy_mf = net.forward(scratch, tokenizer.encode_clip(noisy)).joint;

    ProbeRow row;
    row.clip = c;
    for (std::size_t i = 0; i < clean_mf.size(); ++i) {
      double d = clean_mf[i] - noisy_mf[i];
      row.embedding_mse += d * d;
    }
    row.embedding_mse /= (double)clean_mf.size();

    Rng clean_rng(seed ^ (0x61637400ULL + c));
    Rng noisy_rng(seed ^ (0x61637400ULL + c));  // same draws for a fair bias
    Tensor pred_clean = head.predict(clean_mf, clean_rng);
    Tensor pred_noisy = head.predict(noisy_mf, noisy_rng);
    for (std::size_t i = 0; i < pred_clean.size(); ++i) {
      double dc = pred_clean[i] - clip.chunk[i];
      double dn = pred_noisy[i] - clip.chunk[i];
      row.action_mse_clean += dc * dc;
      row.action_mse_perturbed += dn * dn;
      row.action_bias += std::fabs(pred_noisy[i] - pred_clean[i]);
    }
    row.action_mse_clean /= (double)pred_clean.size();
    row.action_mse_perturbed /= (double)pred_clean.size();
    row.action_bias /= (double)pred_clean.size();
    rows.push_back(row);
  }
  return rows;
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// CSV interfaces.

// Embeddings: header "id,e0,e1,...", one row per sample.
inline void write_embeddings_csv(const std::vector<std::string>& ids, const Tensor& embeddings,
                                 const std::string& path) {
  if (ids.size() != embeddings.rows()) {
    throw std::invalid_argument("embedding id count does not match row count");
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write embeddings file: " + path);
  os.precision(17);
  os << "id";
  for (std::size_t k = 0; k < embeddings.cols(); ++k) os << ",e" << k;
  os << "\n";
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    os << ids[i];
    for (std::size_t k = 0; k < embeddings.cols(); ++k) os << "," << embeddings.at(i, k);
    os << "\n";
  }
}

inline std::pair<std::vector<std::string>, Tensor> read_embeddings_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open embeddings file: " + path);
  std::string header;
  if (!std::getline(is, header) || header.rfind("id,e0", 0) != 0) {
    throw std::runtime_error("embeddings file " + path + " must start with an id,e0,... header");
  }
  std::vector<std::string> ids;
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    ids.push_back(cell);
    std::vector<double> row;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("embeddings file " + path + " has no samples");
  Tensor t(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != t.cols()) {
      throw std::runtime_error("ragged embeddings row in " + path);
    }
    for (std::size_t k = 0; k < t.cols(); ++k) t.at(i, k) = rows[i][k];
  }
  return {ids, t};
}

// Actions: "id,t,a0,a1,..." rows grouped by id in file order.
inline std::pair<std::vector<std::string>, std::vector<Tensor>> read_actions_csv(
    const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open actions file: " + path);
  std::string header;
  if (!std::getline(is, header) || header.rfind("id,t,a0", 0) != 0) {
    throw std::runtime_error("actions file " + path + " must start with an id,t,a0,... header");
  }
  std::vector<std::string> ids;
  std::vector<std::vector<std::vector<double>>> groups;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, t, cell;
    std::getline(ls, id, ',');
    std::getline(ls, t, ',');
    std::vector<double> a;
    while (std::getline(ls, cell, ',')) a.push_back(std::stod(cell));
    if (ids.empty() || ids.back() != id) {
      ids.push_back(id);
      groups.emplace_back();
    }
    groups.back().push_back(std::move(a));
  }
  if (ids.empty()) throw std::runtime_error("actions file " + path + " has no samples");
  std::vector<Tensor> out;
  for (const auto& g : groups) {
    Tensor t(g.size(), g[0].size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      for (std::size_t k = 0; k < t.cols(); ++k) t.at(i, k) = g[i][k];
    }
    out.push_back(t);
  }
  return {ids, out};
}

inline void write_histogram_csv(const PaacReport& rep, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write histogram file: " + path);
  os.precision(17);
  os << "bin_left,bin_right,density\n";
  for (std::size_t b = 0; b < rep.density.size(); ++b) {
    os << rep.bin_left[b] << "," << rep.bin_right[b] << "," << rep.density[b] << "\n";
  }
}

inline void write_probe_csv(const std::vector<ProbeRow>& rows, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write probe file: " + path);
  os.precision(17);
  os << "clip,embedding_mse,action_mse_clean,action_mse_perturbed,action_bias\n";
  for (const ProbeRow& r : rows) {
    os << r.clip << "," << r.embedding_mse << "," << r.action_mse_clean << ","
       << r.action_mse_perturbed << "," << r.action_bias << "\n";
  }
}

}  // namespace jvpm
