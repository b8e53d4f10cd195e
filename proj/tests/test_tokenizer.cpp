#include <catch2/catch_amalgamated.hpp>

#include "jvpm/tokenizer.hpp"

using namespace jvpm;

namespace {

std::vector<Frame> random_clip(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Frame> clip(n);
  for (Frame& f : clip) {
    for (auto& p : f.pixels) p = (std::uint8_t)rng.index(256);
  }
  return clip;
}

}  // namespace

TEST_CASE("subsample indices match the published selection table") {
  CHECK(subsample_indices(5) == std::vector<std::size_t>{1, 6, 10, 14, 17});
  CHECK(subsample_indices(2) == std::vector<std::size_t>{1, 1, 17, 17, 17});
  CHECK(subsample_indices(9) == std::vector<std::size_t>{1, 3, 5, 7, 9, 11, 13, 15, 17});
  std::vector<std::size_t> full = subsample_indices(17);
  REQUIRE(full.size() == 17);
  for (std::size_t i = 0; i < 17; ++i) CHECK(full[i] == i + 1);
  CHECK_THROWS_AS(subsample_indices(3), std::invalid_argument);
  CHECK_THROWS_AS(subsample_indices(13), std::invalid_argument);
}

TEST_CASE("frame counts outside 4N+1 are rejected") {
  for (std::size_t f : {0, 1, 2, 3, 4, 6, 8, 12, 16, 18, 25}) {
    ClipSpec spec;
    spec.frames = f;
    CAPTURE(f);
    CHECK_THROWS_WITH(validate_spec(spec),
                      Catch::Matchers::ContainsSubstring("4N+1"));
  }
  for (std::size_t f : {5, 9, 13, 17, 21}) {
    ClipSpec spec;
    spec.frames = f;
    CHECK_NOTHROW(validate_spec(spec));
  }
}

TEST_CASE("token count formula at desk defaults and full-scale dimensions") {
  ClipSpec desk;  // 17 frames, 32x32, patch 8
  CHECK(token_count(desk) == 80);
  CHECK(temporal_blocks(desk.frames) == 5);
  CHECK(patches_per_frame(desk) == 16);

  // 17 frames of two stacked 224x224 views, patch 16: 5 * 392 = 1960 tokens.
  ClipSpec full;
  full.frames = 17;
  full.height = 448;
  full.width = 224;
  full.patch = 16;
  full.dim = 48;
  CHECK(patches_per_frame(full) == 392);
  CHECK(token_count(full) == 1960);

  for (std::size_t f : {5, 9, 13, 17, 21}) {
    ClipSpec s;
    s.frames = f;
    CHECK(token_count(s) == ((f - 1) / 4 + 1) * 16);
  }
}

TEST_CASE("encode_clip shape and determinism") {
  ClipSpec spec;
  Tokenizer tok(spec);
  std::vector<Frame> clip = random_clip(17, 4);
  Tensor t1 = tok.encode_clip(clip);
  REQUIRE(t1.rows() == 80);
  REQUIRE(t1.cols() == 32);
  Tensor t2 = tok.encode_clip(clip);
  for (std::size_t i = 0; i < t1.size(); ++i) CHECK(t1[i] == t2[i]);

  Tokenizer tok_same(spec);
  Tensor t3 = tok_same.encode_clip(clip);
  for (std::size_t i = 0; i < t1.size(); ++i) CHECK(t1[i] == t3[i]);

  CHECK_THROWS_WITH(tok.encode_clip(random_clip(16, 4)),
                    Catch::Matchers::ContainsSubstring("4N+1"));
}

TEST_CASE("first-frame target: shape, zero input, block identity") {
  ClipSpec spec;
  Tokenizer tok(spec);

  Frame zero;
  Tensor zt = tok.encode_first_frame(zero);
  REQUIRE(zt.rows() == 16);
  REQUIRE(zt.cols() == 32);
  for (std::size_t i = 0; i < zt.size(); ++i) CHECK(zt[i] == 0.0);

  // Block 0 of the clip path holds exactly the first frame, so the first 16
  // tokens of encode_clip equal encode_first_frame.
  std::vector<Frame> clip = random_clip(17, 9);
  Tensor tokens = tok.encode_clip(clip);
  Tensor first = tok.encode_first_frame(clip[0]);
  for (std::size_t i = 0; i < first.size(); ++i) {
    CHECK(tokens[i] == Catch::Approx(first[i]).margin(1e-12));
  }
}

TEST_CASE("encoding is linear in pixel intensities") {
  ClipSpec spec;
  Tokenizer tok(spec);
  // Even pixel values so halving is exact in u8.
  std::vector<Frame> clip = random_clip(17, 21);
  for (Frame& f : clip) {
    for (auto& p : f.pixels) p = (p / 2) * 2;
  }
  std::vector<Frame> halved = clip;
  for (Frame& f : halved) {
    for (auto& p : f.pixels) p = p / 2;
  }
  Tensor full = tok.encode_clip(clip);
  Tensor half = tok.encode_clip(halved);
  for (std::size_t i = 0; i < full.size(); ++i) {
    CHECK(full[i] == Catch::Approx(2.0 * half[i]).margin(1e-12));
  }
}

TEST_CASE("projection is orthonormal and frozen") {
  ClipSpec spec;
  Tokenizer tok(spec);
  const Tensor& proj = tok.projection();
  CHECK_FALSE(proj.requires_grad());
  for (std::size_t c1 = 0; c1 < proj.cols(); ++c1) {
    for (std::size_t c2 = c1; c2 < proj.cols(); ++c2) {
      double dot = 0.0;
      for (std::size_t r = 0; r < proj.rows(); ++r) dot += proj.at(r, c1) * proj.at(r, c2);
      CHECK(dot == Catch::Approx(c1 == c2 ? 1.0 : 0.0).margin(1e-10));
    }
  }
}
