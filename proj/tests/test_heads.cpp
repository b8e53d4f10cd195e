#include <catch2/catch_amalgamated.hpp>

#include "jvpm/heads.hpp"

using namespace jvpm;

namespace {

Tensor random_embedding(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(n, d);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, 1.0);
  return t;
}

Tensor random_chunk(std::uint64_t seed, double scale = 0.05) {
  Rng rng(seed);
  Tensor t(kChunkLen, kActionDim);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

void zero_all(ParamStore& ps, const std::string& prefix) {
  for (auto& [name, p] : ps.params()) {
    if (name.rfind(prefix, 0) == 0) {
      Tensor t = p;
      std::fill(t.data().begin(), t.data().end(), 0.0);
    }
  }
}

}  // namespace

TEST_CASE("oft head produces a 16x3 chunk") {
  Rng rng(1);
  HeadConfig cfg;
  OftHead head(cfg, rng);
  Tensor mf = random_embedding(40, 32, 2);
  Tensor chunk = head.predict(mf, rng);
  CHECK(chunk.rows() == 16);
  CHECK(chunk.cols() == 3);
}

TEST_CASE("zero-initialized output layer regresses the zero chunk") {
  Rng rng(3);
  HeadConfig cfg;
  OftHead head(cfg, rng);
  zero_all(head.params(), "head.oft.out");
  Tensor chunk = head.predict(random_embedding(40, 32, 4), rng);
  for (std::size_t i = 0; i < chunk.size(); ++i) CHECK(chunk[i] == 0.0);
}

TEST_CASE("mae loss definition") {
  Rng rng(5);
  HeadConfig cfg;
  OftHead head(cfg, rng);
  Tensor mf = random_embedding(40, 32, 6);
  Tape tape;
  Tensor pred = head.forward(tape, mf);
  // target == prediction -> zero loss
  Tensor same(kChunkLen, kActionDim);
  std::copy(pred.data().begin(), pred.data().end(), same.data().begin());
  CHECK(head.loss(tape, mf, same, rng).value() == Catch::Approx(0.0).margin(1e-15));
  // uniform +0.5 residual
  Tensor shifted = same;
  Tensor off(kChunkLen, kActionDim);
  for (std::size_t i = 0; i < off.size(); ++i) off[i] = same[i] + 0.5;
  CHECK(head.loss(tape, mf, off, rng).value() == Catch::Approx(0.5));
  CHECK_THROWS_AS(head.loss(tape, mf, Tensor(4, 4), rng), std::invalid_argument);
}

TEST_CASE("oft head gradients match finite differences away from kinks") {
  Rng rng(7);
  HeadConfig cfg;
  cfg.embed_dim = 8;
  OftHead head(cfg, rng);
  Tensor mf = random_embedding(6, 8, 8);
  Tensor target = random_chunk(9, 1.0);  // large offsets keep residuals off zero
  auto loss_fn = [&](Tape& t) {
    Rng r(0);
    return head.loss(t, mf, target, r);
  };
  GradCheckReport report = grad_check(head.params().params(), loss_fn);
  CAPTURE(report.worst_name, report.worst);
  CHECK(report.pass(1e-4));
}

TEST_CASE("interpolant and target identities are exact") {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> x(48), eps(48);
    for (auto& v : x) v = rng.normal();
    for (auto& v : eps) v = rng.normal();
    double tau = rng.uniform();
    FlowState fs = make_flow_state(x, eps, tau);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(fs.interp[i] - (tau * x[i] + (1.0 - tau) * eps[i]) == 0.0);
      CHECK(fs.target[i] == eps[i] - x[i]);
    }
  }
}

TEST_CASE("interpolant endpoints") {
  std::vector<double> x = {1.0, -2.0, 0.5};
  std::vector<double> eps = {0.1, 0.2, -0.3};
  FlowState at_one = make_flow_state(x, eps, 1.0);
  CHECK(at_one.interp == x);
  FlowState at_zero = make_flow_state(x, eps, 0.0);
  CHECK(at_zero.interp == eps);
}

TEST_CASE("flow loss is the squared error against the target field") {
  Rng rng(13);
  HeadConfig cfg;
  FlowHead head(cfg, rng);
  Tensor mf = random_embedding(40, 32, 14);
  std::vector<double> x(48, 0.2), eps(48);
  Rng noise(15);
  for (auto& v : eps) v = noise.normal();
  FlowState fs = make_flow_state(x, eps, 0.4);

  Tape tape;
  Tensor xt(1, 48);
  std::copy(fs.interp.begin(), fs.interp.end(), xt.data().begin());
  Tensor v = head.v_theta(tape, xt, fs.tau, mf);
  double expected = 0.0;
  for (std::size_t i = 0; i < 48; ++i) {
    double d = v[i] - fs.target[i];
    expected += d * d;
  }
  expected /= 48.0;
  Tape t2;
  CHECK(head.loss_at(t2, mf, fs).value() == Catch::Approx(expected));
  // an oracle network that outputs exactly u would score zero
  FlowState self = make_flow_state(x, x, 0.4);  // eps == x -> u == 0
  zero_all(head.params(), "head.flow.out");
  Tape t3;
  CHECK(head.loss_at(t3, mf, self).value() == Catch::Approx(0.0).margin(1e-30));
}

TEST_CASE("tau sampler stays inside [0, cap]") {
  Rng rng(17);
  HeadConfig cfg;
  FlowHead head(cfg, rng);
  for (int i = 0; i < 5000; ++i) {
    double tau = head.sample_tau(rng);
    REQUIRE(tau >= 0.0);
    REQUIRE(tau <= 0.999);
  }
}

TEST_CASE("euler sampling under the analytic oracle field lands exactly") {
  Rng rng(19);
  std::vector<double> target(48);
  for (auto& v : target) v = rng.normal(0.0, 0.05);
  FlowField oracle = [&](const std::vector<double>& x, double tau) {
    std::vector<double> v(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) v[i] = (x[i] - target[i]) / (1.0 - tau);
    return v;
  };
  for (std::size_t steps : {1, 2, 3, 7, 10, 50}) {
    std::vector<double> eps(48);
    for (auto& v : eps) v = rng.normal();
    std::vector<double> landed = euler_sample(oracle, eps, steps);
    for (std::size_t i = 0; i < 48; ++i) {
      CAPTURE(steps, i);
      REQUIRE(std::fabs(landed[i] - target[i]) < 1e-9);
    }
  }
}

TEST_CASE("zero field returns the initial noise; sampling is seed-deterministic") {
  Rng rng(21);
  HeadConfig cfg;
  FlowHead head(cfg, rng);
  zero_all(head.params(), "head.flow");
  Tensor mf = random_embedding(40, 32, 22);

  Rng s1(77);
  Tensor out = head.predict(mf, s1);
  Rng s2(77);
  std::vector<double> expected_eps(48);
  for (auto& v : expected_eps) v = s2.normal();
  for (std::size_t i = 0; i < 48; ++i) CHECK(out[i] == expected_eps[i]);

  Rng s3(123), s4(123);
  Tensor a = head.predict(mf, s3);
  Tensor b = head.predict(mf, s4);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("tau embedding is injective on the sampler grid") {
  const std::size_t steps = 10;
  std::vector<Tensor> embeds;
  for (std::size_t s = 0; s < steps; ++s) {
    embeds.push_back(tau_embedding((double)s / steps, 16));
  }
  for (std::size_t i = 0; i < steps; ++i) {
    for (std::size_t j = i + 1; j < steps; ++j) {
      double diff = 0.0;
      for (std::size_t k = 0; k < 16; ++k) diff += std::fabs(embeds[i][k] - embeds[j][k]);
      REQUIRE(diff > 1e-6);
    }
  }
}

TEST_CASE("v_theta gradient check") {
  Rng rng(23);
  HeadConfig cfg;
  cfg.embed_dim = 8;
  cfg.hidden = 16;
  FlowHead head(cfg, rng);
  Tensor mf = random_embedding(6, 8, 24);
  Tensor chunk = random_chunk(25);
  std::vector<double> eps(48);
  Rng noise(26);
  for (auto& v : eps) v = noise.normal();
  FlowState fs = make_flow_state(chunk.data(), eps, 0.3);
  auto loss_fn = [&](Tape& t) { return head.loss_at(t, mf, fs); };
  GradCheckReport report = grad_check(head.params().params(), loss_fn);
  CAPTURE(report.worst_name, report.worst);
  CHECK(report.pass(1e-4));
}

TEST_CASE("flow training on one pair drives samples to the target") {
  Rng rng(27);
  HeadConfig cfg;
  cfg.hidden = 128;
  FlowHead head(cfg, rng);
  Tensor mf = random_embedding(40, 32, 28);
  Tensor chunk = random_chunk(29, 0.05);
  const std::size_t total_steps = 5000, batch = 64;
  const double base_lr = 8e-3;
  Adam opt(base_lr, 0);
  Rng train_rng(30);
  for (std::size_t step = 1; step <= total_steps; ++step) {
    head.params().zero_grads();
    Tape tape;
    Tensor loss;
    for (std::size_t b = 0; b < batch; ++b) {
      Tensor term = head.loss(tape, mf, chunk, train_rng);
      loss = b == 0 ? term : add(tape, loss, term);
    }
    loss = scale(tape, loss, 1.0 / (double)batch);
    tape.backward(loss);
    opt.set_base_lr(base_lr * 0.5 * (1.0 + std::cos(M_PI * (double)step / (double)total_steps)));
    opt.step(head.params().params(), step);
  }
  Rng sample_rng(31);
  Tensor out = head.predict(mf, sample_rng);
  double linf = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    linf = std::max(linf, std::fabs(out[i] - chunk[i]));
  }
  CHECK(linf < 0.05);
}

TEST_CASE("both heads share the ActionHead interface") {
  Rng rng(33);
  HeadConfig cfg;
  for (const std::string kind : {"oft", "flow"}) {
    auto head = make_head(kind, cfg, rng);
    CHECK(head->kind() == kind);
    Tensor mf = random_embedding(40, 32, 34);
    Tensor chunk = random_chunk(35);
    Tape tape;
    Rng r(0);
    CHECK(head->loss(tape, mf, chunk, r).value() >= 0.0);
    Tensor pred = head->predict(mf, r);
    CHECK(pred.rows() == 16);
    CHECK(pred.cols() == 3);
  }
  CHECK_THROWS_AS(make_head("diffusion", cfg, rng), std::invalid_argument);
}
