#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "jvpm/rng.hpp"
#include "jvpm/tensor.hpp"
#include "jvpm/world.hpp"

namespace jvpm {

// Frozen temporal patch tokenizer. A clip of F = 4N+1 frames is grouped into
// temporal blocks [1, 4, 4, ...], each block is averaged over its frames,
// split into PxP patches, and every patch is projected into D dims by a fixed
// seeded matrix with orthonormal columns. The projection is linear, has no
// bias, and never receives gradients. A fixed gain standardizes latents to
// roughly unit RMS for this world's sparse frames (raw projections of
// pixels/255 sit near 0.1 RMS, which starves downstream layers).

constexpr double kLatentGain = 8.0;

struct ClipSpec {
  std::size_t frames = 17;   // must be 4N+1 in {5, 9, 13, 17, 21}
  std::size_t height = kFrameSize;
  std::size_t width = kFrameSize;
  std::size_t patch = 8;
  std::size_t dim = 32;
  std::uint64_t seed = 0;
};

inline bool is_valid_frame_count(std::size_t f) {
  return f == 5 || f == 9 || f == 13 || f == 17 || f == 21;
}

inline std::size_t temporal_blocks(std::size_t frames) { return (frames - 1) / 4 + 1; }

inline std::size_t patches_per_frame(const ClipSpec& spec) {
  return (spec.height / spec.patch) * (spec.width / spec.patch);
}

inline std::size_t token_count(const ClipSpec& spec) {
  return temporal_blocks(spec.frames) * patches_per_frame(spec);
}

inline void validate_spec(const ClipSpec& spec) {
  if (!is_valid_frame_count(spec.frames)) {
    throw std::invalid_argument(
        "clip length " + std::to_string(spec.frames) +
        " violates the 4N+1 frame constraint (supported: 5, 9, 13, 17, 21)");
  }
  if (spec.height % spec.patch != 0 || spec.width % spec.patch != 0) {
    throw std::invalid_argument("frame " + std::to_string(spec.height) + "x" +
                                std::to_string(spec.width) + " not divisible by patch " +
                                std::to_string(spec.patch));
  }
}

// Frame index selection for subsampling a 17-frame horizon (1-based indices).
// The 2-frame setting is padded to five frames by repetition.
inline std::vector<std::size_t> subsample_indices(std::size_t frame_count,
                                                  std::size_t horizon = 17) {
  if (horizon != 17) {
    throw std::invalid_argument("subsampling defined for the 17-frame horizon only");
  }
  switch (frame_count) {
    case 2:
      return {1, 1, 17, 17, 17};
    case 5:
      return {1, 6, 10, 14, 17};
    case 9:
      return {1, 3, 5, 7, 9, 11, 13, 15, 17};
    case 17: {
      std::vector<std::size_t> idx(17);
      for (std::size_t i = 0; i < 17; ++i) idx[i] = i + 1;
      return idx;
    }
    default:
      throw std::invalid_argument("unsupported subsample frame count " +
                                  std::to_string(frame_count) +
                                  " (supported: 2, 5, 9, 17)");
  }
}

class Tokenizer {
 public:
  explicit Tokenizer(const ClipSpec& spec) : spec_(spec) {
    validate_spec(spec);
    build_projection();
  }

  const ClipSpec& spec() const { return spec_; }

  // TemporalTokens: [n_tokens x D], block-major then raster order.
  Tensor encode_clip(const std::vector<Frame>& frames) const {
    if (frames.size() != spec_.frames) {
      throw std::invalid_argument(
          "encode_clip: got " + std::to_string(frames.size()) + " frames, clip spec needs " +
          std::to_string(spec_.frames) + " (4N+1 constraint)");
    }
    const std::size_t blocks = temporal_blocks(spec_.frames);
    const std::size_t ppf = patches_per_frame(spec_);
    Tensor tokens(blocks * ppf, spec_.dim);
    std::vector<double> block_pixels(spec_.height * spec_.width);
    for (std::size_t b = 0; b < blocks; ++b) {
      std::size_t first = b == 0 ? 0 : 1 + (b - 1) * 4;
      std::size_t count = b == 0 ? 1 : 4;
      average_block(frames, first, count, block_pixels);
      project_block(block_pixels, tokens, b * ppf);
    }
    return tokens;
  }

  // LatentTarget: the single-frame path through the same frozen projection.
  Tensor encode_first_frame(const Frame& frame) const {
    const std::size_t ppf = patches_per_frame(spec_);
    Tensor target(ppf, spec_.dim);
    std::vector<double> pixels(spec_.height * spec_.width);
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      pixels[i] = frame.pixels[i] / 255.0;
    }
    project_block(pixels, target, 0);
    return target;
  }

  const Tensor& projection() const { return proj_; }

 private:
  void build_projection() {
    const std::size_t in = spec_.patch * spec_.patch;
    if (spec_.dim > in) {
      throw std::invalid_argument("token dim " + std::to_string(spec_.dim) +
                                  " exceeds patch size " + std::to_string(in));
    }
    Rng rng(spec_.seed ^ 0x746f6b656e697aULL);
    proj_ = Tensor(in, spec_.dim, false);
    for (std::size_t i = 0; i < proj_.size(); ++i) proj_[i] = rng.normal(0.0, 1.0);
    // Gram-Schmidt over columns: orthonormal frozen projection.
    for (std::size_t c = 0; c < spec_.dim; ++c) {
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0.0;
        for (std::size_t r = 0; r < in; ++r) dot += proj_.at(r, c) * proj_.at(r, p);
        for (std::size_t r = 0; r < in; ++r) proj_.at(r, c) -= dot * proj_.at(r, p);
      }
      double norm = 0.0;
      for (std::size_t r = 0; r < in; ++r) norm += proj_.at(r, c) * proj_.at(r, c);
      norm = std::sqrt(norm);
      for (std::size_t r = 0; r < in; ++r) proj_.at(r, c) /= norm;
    }
  }

  void average_block(const std::vector<Frame>& frames, std::size_t first,
                     std::size_t count, std::vector<double>& out) const {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t f = first; f < first + count; ++f) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += frames[f].pixels[i] / 255.0;
      }
    }
    for (double& v : out) v /= static_cast<double>(count);
  }

  void project_block(const std::vector<double>& pixels, Tensor& tokens,
                     std::size_t row_offset) const {
    const std::size_t P = spec_.patch;
    const std::size_t px = spec_.width / P;
    const std::size_t py = spec_.height / P;
    std::vector<double> patch(P * P);
    for (std::size_t gy = 0; gy < py; ++gy) {
      for (std::size_t gx = 0; gx < px; ++gx) {
        for (std::size_t y = 0; y < P; ++y) {
          for (std::size_t x = 0; x < P; ++x) {
            patch[y * P + x] = pixels[(gy * P + y) * spec_.width + gx * P + x];
          }
        }
        std::size_t row = row_offset + gy * px + gx;
        for (std::size_t d = 0; d < spec_.dim; ++d) {
          double acc = 0.0;
          for (std::size_t i = 0; i < patch.size(); ++i) acc += patch[i] * proj_.at(i, d);
          tokens.at(row, d) = kLatentGain * acc;
        }
      }
    }
  }

  ClipSpec spec_;
  Tensor proj_;  // [P*P x D], requires_grad always false
};

}  // namespace jvpm
