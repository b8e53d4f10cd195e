#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "jvpm/paac.hpp"

using namespace jvpm;

namespace {

Tensor seq(std::initializer_list<double> values) {
  Tensor t(values.size(), 1);
  std::size_t i = 0;
  for (double v : values) t[i++] = v;
  return t;
}

Tensor random_seq(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
  return t;
}

double local_cost(const Tensor& a, const Tensor& b, std::size_t i, std::size_t j) {
  double c = 0.0;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    double d = a.at(i, k) - b.at(j, k);
    c += d * d;
  }
  return c;
}

// Exhaustive minimum over every monotonic alignment path. Costs accumulate
// front-to-back along each path, the same association order the DP uses, so
// the comparison is exact at f64.
void enumerate_paths(const Tensor& a, const Tensor& b, std::size_t i, std::size_t j,
                     double acc, double& best) {
  acc += local_cost(a, b, i, j);
  bool li = i + 1 == a.rows(), lj = j + 1 == b.rows();
  if (li && lj) {
    best = std::min(best, acc);
    return;
  }
  if (!li && !lj) enumerate_paths(a, b, i + 1, j + 1, acc, best);
  if (!li) enumerate_paths(a, b, i + 1, j, acc, best);
  if (!lj) enumerate_paths(a, b, i, j + 1, acc, best);
}

double brute_force_dtw(const Tensor& a, const Tensor& b) {
  double best = std::numeric_limits<double>::infinity();
  enumerate_paths(a, b, 0, 0, 0.0, best);
  return best;
}

// Straight-line transcription of the similarity pipeline, kept independent of
// the library routines it cross-checks.
Tensor straight_line_pipeline(const std::vector<Tensor>& actions) {
  const std::size_t n = actions.size();
  Tensor dist(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const Tensor& A = actions[i];
      const Tensor& B = actions[j];
      std::vector<std::vector<double>> dp(A.rows(), std::vector<double>(B.rows()));
      for (std::size_t r = 0; r < A.rows(); ++r) {
        for (std::size_t c = 0; c < B.rows(); ++c) {
          double cost = local_cost(A, B, r, c);
          if (r == 0 && c == 0) {
            dp[r][c] = cost;
          } else {
            double best = std::numeric_limits<double>::infinity();
            if (r > 0) best = std::min(best, dp[r - 1][c]);
            if (c > 0) best = std::min(best, dp[r][c - 1]);
            if (r > 0 && c > 0) best = std::min(best, dp[r - 1][c - 1]);
            dp[r][c] = cost + best;
          }
        }
      }
      dist.at(i, j) = dp[A.rows() - 1][B.rows() - 1];
    }
  }
  std::vector<double> off;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) off.push_back(std::sqrt(dist.at(i, j)));
    }
  }
  std::sort(off.begin(), off.end());
  double sigma = off.size() % 2 == 1
                     ? off[off.size() / 2]
                     : 0.5 * (off[off.size() / 2 - 1] + off[off.size() / 2]);
  Tensor s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      s.at(i, j) = i == j ? 1.0 : std::exp(-dist.at(i, j) / (2.0 * sigma * sigma));
    }
  }
  return s;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("dtw worked examples") {
  CHECK(dtw(seq({0, 0, 1}), seq({0, 1, 1})).distance == 0.0);
  CHECK(dtw(seq({0}), seq({2})).distance == 4.0);
  Rng rng(1);
  Tensor a = random_seq(rng, 5, 2);
  CHECK(dtw(a, a).distance == 0.0);
  CHECK_THROWS_AS(dtw(a, Tensor(3, 3)), std::invalid_argument);
  CHECK_THROWS_AS(dtw(Tensor(0, 2), a), std::invalid_argument);
}

TEST_CASE("dtw path is valid and carries the reported distance") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a = random_seq(rng, 1 + rng.index(5), 1 + rng.index(2));
    Tensor b = random_seq(rng, 1 + rng.index(5), a.cols());
    DtwResult r = dtw(a, b);
    REQUIRE(r.path.front() == std::make_pair((std::size_t)1, (std::size_t)1));
    REQUIRE(r.path.back() == std::make_pair(a.rows(), b.rows()));
    double along = 0.0;
    for (std::size_t s = 0; s < r.path.size(); ++s) {
      auto [pi, pj] = r.path[s];
      along += local_cost(a, b, pi - 1, pj - 1);
      if (s > 0) {
        std::size_t di = pi - r.path[s - 1].first;
        std::size_t dj = pj - r.path[s - 1].second;
        REQUIRE(di <= 1);
        REQUIRE(dj <= 1);
        REQUIRE(di + dj >= 1);
      }
    }
    CHECK(along == Catch::Approx(r.distance).margin(1e-12));
  }
}

TEST_CASE("dtw equals brute-force path enumeration on 1000 seeded pairs") {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    std::size_t d = 1 + rng.index(2);
    Tensor a = random_seq(rng, 1 + rng.index(5), d);
    Tensor b = random_seq(rng, 1 + rng.index(5), d);
    double dp = dtw(a, b).distance;
    double brute = brute_force_dtw(a, b);
    REQUIRE(dp == brute);
    REQUIRE(dtw(b, a).distance == dp);  // symmetry
  }
}

TEST_CASE("duplicating a row costs nothing under warping") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_seq(rng, 2 + rng.index(4), 1 + rng.index(2));
    std::size_t dup = rng.index(a.rows());
    Tensor b(a.rows() + 1, a.cols());
    for (std::size_t i = 0, o = 0; i < a.rows(); ++i) {
      for (std::size_t k = 0; k < a.cols(); ++k) b.at(o, k) = a.at(i, k);
      ++o;
      if (i == dup) {
        for (std::size_t k = 0; k < a.cols(); ++k) b.at(o, k) = a.at(i, k);
        ++o;
      }
    }
    CHECK(dtw(a, b).distance == 0.0);
  }
}

TEST_CASE("median bandwidth definition and sort oracle") {
  Tensor d(3, 3);
  d.at(0, 1) = d.at(1, 0) = 1.0;
  d.at(0, 2) = d.at(2, 0) = 4.0;
  d.at(1, 2) = d.at(2, 1) = 9.0;
  CHECK(median_bandwidth(d) == 2.0);  // median of {1, 2, 3}

  Tensor two(2, 2);
  two.at(0, 1) = two.at(1, 0) = 6.25;
  CHECK(median_bandwidth(two) == 2.5);

  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t n = 2 + rng.index(6);
    Tensor m(n, n);
    std::vector<double> roots;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        double v = rng.uniform(0.0, 10.0);
        m.at(i, j) = v;
        roots.push_back(std::sqrt(v));
      }
    }
    std::sort(roots.begin(), roots.end());
    double oracle = roots.size() % 2 == 1
                        ? roots[roots.size() / 2]
                        : 0.5 * (roots[roots.size() / 2 - 1] + roots[roots.size() / 2]);
    REQUIRE(median_bandwidth(m) == oracle);
  }
  CHECK_THROWS_AS(median_bandwidth(Tensor(1, 1)), std::invalid_argument);
}

TEST_CASE("rbf kernel values") {
  Tensor d(2, 2);
  double sigma = 1.7;
  d.at(0, 1) = d.at(1, 0) = 2.0 * sigma * sigma;
  Tensor s = rbf_similarity(d, sigma);
  CHECK(s.at(0, 0) == 1.0);
  CHECK(s.at(1, 1) == 1.0);
  CHECK(std::fabs(s.at(0, 1) - std::exp(-1.0)) < 1e-12);

  // strictly decreasing in distance
  Tensor d2(2, 2);
  d2.at(0, 1) = d2.at(1, 0) = 5.0;
  CHECK(rbf_similarity(d2, sigma).at(0, 1) < s.at(0, 1) + 1.0);
  Tensor d3 = d2;
  CHECK(rbf_similarity(d3, 1.0).at(0, 1) < rbf_similarity(d3, 2.0).at(0, 1));

  CHECK_THROWS_AS(rbf_similarity(d, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(rbf_similarity(d, -1.0), std::invalid_argument);
}

TEST_CASE("composed pipeline matches the straight-line transcription exactly") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t n = 3 + rng.index(4);
    std::size_t d = 1 + rng.index(3);
    std::vector<Tensor> actions;
    for (std::size_t i = 0; i < n; ++i) actions.push_back(random_seq(rng, 2 + rng.index(4), d));
    PaacSimilarity got = paac_similarity(actions);
    Tensor want = straight_line_pipeline(actions);
    REQUIRE_FALSE(got.degenerate);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        REQUIRE(got.similarity.at(i, j) == want.at(i, j));
        CHECK(got.similarity.at(i, j) >= 0.0);
        CHECK(got.similarity.at(i, j) <= 1.0);
        CHECK(got.similarity.at(i, j) == got.similarity.at(j, i));
      }
    }
  }
}

TEST_CASE("identical sequences trigger the degenerate bandwidth branch") {
  Rng rng(13);
  Tensor a = random_seq(rng, 4, 2);
  std::vector<Tensor> actions = {a, a, a};
  PaacSimilarity s = paac_similarity(actions);
  CHECK(s.degenerate);
  CHECK(s.sigma == 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(s.similarity.at(i, j) == 1.0);
  }
}

TEST_CASE("neighbor consistency: degenerate ties pick the lowest indices") {
  Tensor emb(5, 3);
  for (std::size_t i = 0; i < emb.rows(); ++i) {
    emb.at(i, 0) = 1.0;  // identical embeddings -> all cosines tie at 1
  }
  Rng rng(15);
  Tensor s(5, 5);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = i; j < 5; ++j) {
      double v = i == j ? 1.0 : rng.uniform();
      s.at(i, j) = v;
      s.at(j, i) = v;
    }
  }
  PaacReport rep = neighbor_consistency(emb, s, 3);
  CHECK(rep.neighbors[0] == std::vector<std::size_t>{1, 2, 3});
  CHECK(rep.neighbors[2] == std::vector<std::size_t>{0, 1, 3});
  CHECK(rep.scores.size() == 15);
  double density_sum = 0.0;
  for (double d : rep.density) density_sum += d;
  CHECK(std::fabs(density_sum - 1.0) < 1e-9);
  CHECK_THROWS_AS(neighbor_consistency(emb, s, 5), std::invalid_argument);
  CHECK_THROWS_AS(neighbor_consistency(emb, Tensor(4, 4), 2), std::invalid_argument);
}

TEST_CASE("neighbor consistency recovers the top physical scores when orders agree") {
  // 1-d, length-1 action sequences: DTW distance is (x_i - x_j)^2. Embeddings
  // on the unit circle at angles proportional to x_i make the cosine ordering
  // match the action-distance ordering, so the k cosine neighbors carry each
  // row's k largest off-diagonal S_phys values.
  std::vector<double> xs = {0.0, 0.3, 0.9, 1.4, 2.1, 2.6};
  std::vector<Tensor> actions;
  Tensor emb(xs.size(), 2);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    actions.push_back(seq({xs[i]}));
    emb.at(i, 0) = std::cos(0.5 * xs[i]);
    emb.at(i, 1) = std::sin(0.5 * xs[i]);
  }
  PaacSimilarity sim = paac_similarity(actions);
  PaacReport rep = neighbor_consistency(emb, sim.similarity, 3);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::vector<double> row;
    for (std::size_t j = 0; j < xs.size(); ++j) {
      if (j != i) row.push_back(sim.similarity.at(i, j));
    }
    std::sort(row.rbegin(), row.rend());
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(rep.scores[i * 3 + k] == Catch::Approx(row[k]).margin(1e-15));
    }
  }
  CHECK(rep.mean > 0.0);
  CHECK(rep.mean <= 1.0);
}

TEST_CASE("zero-strength perturbation is the identity") {
  Rng rng(17);
  Frame f;
  for (auto& p : f.pixels) p = (std::uint8_t)rng.index(256);
  for (auto kind : {Perturbation::Kind::gaussian_noise, Perturbation::Kind::brightness}) {
    Perturbation pert{kind, 0.0};
    Rng prng(1);
    CHECK(perturb_frame(f, pert, prng) == f);
  }
}

TEST_CASE("perturbations clamp to pixel range and are seed-deterministic") {
  Frame bright;
  for (auto& p : bright.pixels) p = 250;
  Perturbation up{Perturbation::Kind::brightness, 20.0};
  Rng r1(0);
  Frame clipped = perturb_frame(bright, up, r1);
  for (auto p : clipped.pixels) CHECK(p == 255);

  Perturbation noise{Perturbation::Kind::gaussian_noise, 8.0};
  std::vector<Frame> clip = {bright, clipped};
  std::vector<Frame> a = perturb_clip(clip, noise, 42);
  std::vector<Frame> b = perturb_clip(clip, noise, 42);
  CHECK(a[0] == b[0]);
  CHECK(a[1] == b[1]);
  std::vector<Frame> c = perturb_clip(clip, noise, 43);
  CHECK_FALSE(a[0] == c[0]);

  CHECK_THROWS_AS(parse_perturbation_kind("blur"), std::invalid_argument);
  CHECK(parse_perturbation_kind("brightness") == Perturbation::Kind::brightness);
}

TEST_CASE("perturbation probe on a tiny frozen model") {
  ClipSpec spec;
  spec.frames = 5;
  spec.dim = 8;
  GateNetConfig mc;
  mc.dim = 8;
  mc.heads = 2;
  mc.encoder_layers = 1;
  mc.visual_layers = 1;
  mc.decoder_layers = 1;
  mc.gate_iterations = 1;
  mc.n_tokens = token_count(spec);  // 32
  mc.n_visual = 16;
  mc.pool_queries = 16;
  Rng rng(19);
  GateNet net(mc, rng);
  net.params().freeze();
  Tokenizer tok(spec);
  HeadConfig hc;
  hc.embed_dim = 8;
  OftHead head(hc, rng);

  std::vector<ProbeClip> clips;
  Rng wrng(21);
  for (int c = 0; c < 3; ++c) {
    ProbeClip pc;
    WorldState s = random_initial_state(wrng);
    for (int f = 0; f < 5; ++f) {
      pc.frames.push_back(render(s));
      s = step(s, quantize_action(expert_policy(s)));
    }
    pc.chunk = Tensor(kChunkLen, kActionDim);
    clips.push_back(pc);
  }

  Perturbation zero{Perturbation::Kind::gaussian_noise, 0.0};
  for (const ProbeRow& row : perturbation_probe(net, tok, head, clips, zero, 7)) {
    CHECK(row.embedding_mse == 0.0);
    CHECK(row.action_bias == 0.0);
    CHECK(row.action_mse_clean == row.action_mse_perturbed);
  }

  Perturbation noisy{Perturbation::Kind::gaussian_noise, 8.0};
  auto r1 = perturbation_probe(net, tok, head, clips, noisy, 7);
  auto r2 = perturbation_probe(net, tok, head, clips, noisy, 7);
  REQUIRE(r1.size() == 3);
  for (std::size_t i = 0; i < r1.size(); ++i) {
    CHECK(r1[i].embedding_mse == r2[i].embedding_mse);
    CHECK(r1[i].embedding_mse > 0.0);
    CHECK(r1[i].action_bias == r2[i].action_bias);
  }
}

TEST_CASE("median helper") {
  CHECK(median_of({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median_of({4.0, 1.0, 2.0, 3.0}) == 2.5);
  CHECK_THROWS_AS(median_of({}), std::invalid_argument);
}

TEST_CASE("embeddings CSV roundtrip") {
  Tensor emb(2, 3);
  for (std::size_t i = 0; i < emb.size(); ++i) emb[i] = 0.125 * (double)(i + 1);
  std::string path = temp_path("jvpm_emb.csv");
  write_embeddings_csv({"a", "b"}, emb, path);
  auto [ids, back] = read_embeddings_csv(path);
  std::filesystem::remove(path);
  CHECK(ids == std::vector<std::string>{"a", "b"});
  REQUIRE(back.rows() == 2);
  REQUIRE(back.cols() == 3);
  for (std::size_t i = 0; i < emb.size(); ++i) CHECK(back[i] == emb[i]);
  CHECK_THROWS_WITH(read_embeddings_csv(path), Catch::Matchers::ContainsSubstring("cannot open"));
}

TEST_CASE("actions CSV parsing groups rows by id") {
  std::string path = temp_path("jvpm_actions.csv");
  {
    std::ofstream os(path, std::ios::trunc);
    os << "id,t,a0,a1\n";
    os << "s0,0,0.1,0.2\n";
    os << "s0,1,0.3,0.4\n";
    os << "s1,0,1.0,2.0\n";
  }
  auto [ids, actions] = read_actions_csv(path);
  std::filesystem::remove(path);
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] == "s0");
  REQUIRE(actions[0].rows() == 2);
  CHECK(actions[0].at(1, 1) == 0.4);
  REQUIRE(actions[1].rows() == 1);
  CHECK(actions[1].at(0, 1) == 2.0);
}

TEST_CASE("histogram CSV densities") {
  Tensor emb(4, 2);
  Rng rng(23);
  for (std::size_t i = 0; i < emb.size(); ++i) emb[i] = rng.normal();
  std::vector<Tensor> actions;
  for (int i = 0; i < 4; ++i) actions.push_back(random_seq(rng, 3, 2));
  PaacReport rep = neighbor_consistency(emb, paac_similarity(actions).similarity, 2);
  std::string path = temp_path("jvpm_hist.csv");
  write_histogram_csv(rep, path);
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "bin_left,bin_right,density");
  double total = 0.0;
  std::string line;
  while (std::getline(is, line)) {
    auto last = line.rfind(',');
    total += std::stod(line.substr(last + 1));
  }
  is.close();
  std::filesystem::remove(path);
  CHECK(std::fabs(total - 1.0) < 1e-9);
}
