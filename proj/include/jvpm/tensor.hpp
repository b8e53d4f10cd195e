#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace jvpm {

// All tensors are dense row-major f64 matrices (scalars are 1x1, row vectors
// 1xn). Reverse-mode autodiff records backward closures on a Tape in forward
// order; the tape order is topological by construction.

struct TensorData {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;
  std::vector<double> g;  // allocated iff requires_grad
  bool requires_grad = false;
};

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, bool requires_grad = false)
      : d_(std::make_shared<TensorData>()) {
    d_->rows = rows;
    d_->cols = cols;
    d_->v.assign(rows * cols, 0.0);
    d_->requires_grad = requires_grad;
    if (requires_grad) d_->g.assign(rows * cols, 0.0);
  }

  static Tensor scalar(double x, bool requires_grad = false) {
    Tensor t(1, 1, requires_grad);
    t.d_->v[0] = x;
    return t;
  }

  bool valid() const { return d_ != nullptr; }
  std::size_t rows() const { return d_->rows; }
  std::size_t cols() const { return d_->cols; }
  std::size_t size() const { return d_->v.size(); }
  bool requires_grad() const { return d_->requires_grad; }

  double& at(std::size_t r, std::size_t c) { return d_->v[r * d_->cols + c]; }
  double at(std::size_t r, std::size_t c) const { return d_->v[r * d_->cols + c]; }
  double& operator[](std::size_t i) { return d_->v[i]; }
  double operator[](std::size_t i) const { return d_->v[i]; }
  double value() const { return d_->v[0]; }

  std::vector<double>& data() { return d_->v; }
  const std::vector<double>& data() const { return d_->v; }
  std::vector<double>& grad() { return d_->g; }
  const std::vector<double>& grad() const { return d_->g; }

  void zero_grad() {
    if (d_->requires_grad) d_->g.assign(d_->v.size(), 0.0);
  }

  EMap map() { return EMap(d_->v.data(), (Eigen::Index)d_->rows, (Eigen::Index)d_->cols); }
  ECMap cmap() const {
    return ECMap(d_->v.data(), (Eigen::Index)d_->rows, (Eigen::Index)d_->cols);
  }
  EMap gmap() { return EMap(d_->g.data(), (Eigen::Index)d_->rows, (Eigen::Index)d_->cols); }

  std::shared_ptr<TensorData> ptr() const { return d_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[" << d_->rows << "x" << d_->cols << "]";
    return os.str();
  }

 private:
  std::shared_ptr<TensorData> d_;
};

class Tape {
 public:
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

  std::size_t size() const { return ops_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Each record is
  // visited exactly once; the tape stays valid for repeated backward calls
  // but gradients accumulate, so callers zero grads between passes.
  void backward(Tensor loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got " + loss.shape_str());
    }
    if (!loss.requires_grad()) {
      throw std::invalid_argument("backward: loss does not require grad (no tape reachable)");
    }
    loss.grad()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void clear() { ops_.clear(); }

 private:
  std::vector<std::function<void()>> ops_;
};

namespace detail {

inline Tensor make_out(std::size_t r, std::size_t c, bool rg) { return Tensor(r, c, rg); }

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  }
}

}  // namespace detail

// ---- primitive ops ---------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  Tensor out(a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  out.map() = a.cmap() + b.cmap();
  if (out.requires_grad()) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tape.record([ad, bd, od] {
      for (std::size_t i = 0; i < od->g.size(); ++i) {
        if (ad->requires_grad) ad->g[i] += od->g[i];
        if (bd->requires_grad) bd->g[i] += od->g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  Tensor out(a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  out.map() = a.cmap() - b.cmap();
  if (out.requires_grad()) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tape.record([ad, bd, od] {
      for (std::size_t i = 0; i < od->g.size(); ++i) {
        if (ad->requires_grad) ad->g[i] += od->g[i];
        if (bd->requires_grad) bd->g[i] -= od->g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  Tensor out(a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  if (out.requires_grad()) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tape.record([ad, bd, od] {
      for (std::size_t i = 0; i < od->g.size(); ++i) {
        if (ad->requires_grad) ad->g[i] += od->g[i] * bd->v[i];
        if (bd->requires_grad) bd->g[i] += od->g[i] * ad->v[i];
      }
    });
  }
  return out;
}

// Bias broadcast over the leading axis: b is 1xn, added to every row of a.
inline Tensor add_rowvec(Tape& tape, const Tensor& a, const Tensor& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw std::invalid_argument("add_rowvec: expected 1x" + std::to_string(a.cols()) +
                                " bias, got " + b.shape_str() + " against " + a.shape_str());
  }
  Tensor out(a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  out.map() = a.cmap().rowwise() + b.cmap().row(0);
  if (out.requires_grad()) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tape.record([ad, bd, od] {
      const std::size_t n = od->cols;
      for (std::size_t r = 0; r < od->rows; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
          double g = od->g[r * n + c];
          if (ad->requires_grad) ad->g[r * n + c] += g;
          if (bd->requires_grad) bd->g[c] += g;
        }
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
  Tensor out(a.rows(), a.cols(), a.requires_grad());
  out.map() = a.cmap() * c;
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od, c] {
      for (std::size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i] * c;
    });
  }
  return out;
}

// Multiply every element of a by a scalar tensor s (1x1).
inline Tensor scale_by(Tape& tape, const Tensor& s, const Tensor& a) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw std::invalid_argument("scale_by: scalar expected, got " + s.shape_str());
  }
  Tensor out(a.rows(), a.cols(), a.requires_grad() || s.requires_grad());
  out.map() = a.cmap() * s.value();
  if (out.requires_grad()) {
    auto sd = s.ptr(), ad = a.ptr(), od = out.ptr();
    tape.record([sd, ad, od] {
      double sv = sd->v[0];
      double acc = 0.0;
      for (std::size_t i = 0; i < od->g.size(); ++i) {
        if (ad->requires_grad) ad->g[i] += od->g[i] * sv;
        acc += od->g[i] * ad->v[i];
      }
      if (sd->requires_grad) sd->g[0] += acc;
    });
  }
  return out;
}

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dims differ, " + a.shape_str() + " * " +
                                b.shape_str());
  }
  Tensor out(a.rows(), b.cols(), a.requires_grad() || b.requires_grad());
  out.map().noalias() = a.cmap() * b.cmap();
  if (out.requires_grad()) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tape.record([ad, bd, od] {
      ECMap og(od->g.data(), (Eigen::Index)od->rows, (Eigen::Index)od->cols);
      ECMap av(ad->v.data(), (Eigen::Index)ad->rows, (Eigen::Index)ad->cols);
      ECMap bv(bd->v.data(), (Eigen::Index)bd->rows, (Eigen::Index)bd->cols);
      if (ad->requires_grad) {
        EMap ag(ad->g.data(), (Eigen::Index)ad->rows, (Eigen::Index)ad->cols);
        ag.noalias() += og * bv.transpose();
      }
      if (bd->requires_grad) {
        EMap bg(bd->g.data(), (Eigen::Index)bd->rows, (Eigen::Index)bd->cols);
        bg.noalias() += av.transpose() * og;
      }
    });
  }
  return out;
}

// a * b^T without materializing the transpose.
inline Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: inner dims differ, " + a.shape_str() + " * " +
                                b.shape_str() + "^T");
  }
  Tensor out(a.rows(), b.rows(), a.requires_grad() || b.requires_grad());
  out.map().noalias() = a.cmap() * b.cmap().transpose();
  if (out.requires_grad()) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tape.record([ad, bd, od] {
      ECMap og(od->g.data(), (Eigen::Index)od->rows, (Eigen::Index)od->cols);
      ECMap av(ad->v.data(), (Eigen::Index)ad->rows, (Eigen::Index)ad->cols);
      ECMap bv(bd->v.data(), (Eigen::Index)bd->rows, (Eigen::Index)bd->cols);
      if (ad->requires_grad) {
        EMap ag(ad->g.data(), (Eigen::Index)ad->rows, (Eigen::Index)ad->cols);
        ag.noalias() += og * bv;
      }
      if (bd->requires_grad) {
        EMap bg(bd->g.data(), (Eigen::Index)bd->rows, (Eigen::Index)bd->cols);
        bg.noalias() += og.transpose() * av;
      }
    });
  }
  return out;
}

inline Tensor sigmoid(Tape& tape, const Tensor& a) {
  Tensor out(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a[i]));
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od] {
      for (std::size_t i = 0; i < od->g.size(); ++i) {
        double y = od->v[i];
        ad->g[i] += od->g[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& a) {
  Tensor out(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od] {
      for (std::size_t i = 0; i < od->g.size(); ++i) {
        if (ad->v[i] > 0.0) ad->g[i] += od->g[i];
      }
    });
  }
  return out;
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2)))
inline Tensor gelu(Tape& tape, const Tensor& a) {
  Tensor out(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = 0.5 * a[i] * (1.0 + std::erf(a[i] * M_SQRT1_2));
  }
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od] {
      const double inv_sqrt_2pi = 0.3989422804014327;
      for (std::size_t i = 0; i < od->g.size(); ++i) {
        double x = ad->v[i];
        double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
        double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        ad->g[i] += od->g[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

// Softmax over the last axis (per row), max-subtracted.
inline Tensor softmax_rows(Tape& tape, const Tensor& a) {
  Tensor out(a.rows(), a.cols(), a.requires_grad());
  const std::size_t n = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double mx = a.at(r, 0);
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, a.at(r, c));
    double sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      double e = std::exp(a.at(r, c) - mx);
      out.at(r, c) = e;
      sum += e;
    }
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) /= sum;
  }
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od] {
      const std::size_t n = od->cols;
      for (std::size_t r = 0; r < od->rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += od->v[r * n + c] * od->g[r * n + c];
        for (std::size_t c = 0; c < n; ++c) {
          ad->g[r * n + c] += od->v[r * n + c] * (od->g[r * n + c] - dot);
        }
      }
    });
  }
  return out;
}

constexpr double kLayerNormEps = 1e-5;

// Per-row layer normalization with learnable gain/bias (each 1xn).
inline Tensor layer_norm_rows(Tape& tape, const Tensor& a, const Tensor& gain,
                              const Tensor& bias) {
  if (gain.rows() != 1 || gain.cols() != a.cols() || bias.rows() != 1 ||
      bias.cols() != a.cols()) {
    throw std::invalid_argument("layer_norm_rows: gain/bias must be 1x" +
                                std::to_string(a.cols()) + ", got " + gain.shape_str() +
                                " and " + bias.shape_str());
  }
  const std::size_t n = a.cols();
  Tensor out(a.rows(), n,
             a.requires_grad() || gain.requires_grad() || bias.requires_grad());
  // xhat saved for the backward pass
  auto xhat = std::make_shared<std::vector<double>>(a.size());
  auto inv_std = std::make_shared<std::vector<double>>(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += a.at(r, c);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      double d = a.at(r, c) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      double xh = (a.at(r, c) - mean) * is;
      (*xhat)[r * n + c] = xh;
      out.at(r, c) = xh * gain[c] + bias[c];
    }
  }
  if (out.requires_grad()) {
    auto ad = a.ptr(), gd = gain.ptr(), bd = bias.ptr(), od = out.ptr();
    tape.record([ad, gd, bd, od, xhat, inv_std] {
      const std::size_t n = od->cols;
      for (std::size_t r = 0; r < od->rows; ++r) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          double dy = od->g[r * n + c] * gd->v[c];
          double xh = (*xhat)[r * n + c];
          sum_dy += dy;
          sum_dy_xhat += dy * xh;
          if (gd->requires_grad) gd->g[c] += od->g[r * n + c] * xh;
          if (bd->requires_grad) bd->g[c] += od->g[r * n + c];
        }
        if (ad->requires_grad) {
          double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t c = 0; c < n; ++c) {
            double dy = od->g[r * n + c] * gd->v[c];
            double xh = (*xhat)[r * n + c];
            ad->g[r * n + c] +=
                (*inv_std)[r] * (dy - inv_n * sum_dy - xh * inv_n * sum_dy_xhat);
          }
        }
      }
    });
  }
  return out;
}

inline Tensor sum_all(Tape& tape, const Tensor& a) {
  Tensor out(1, 1, a.requires_grad());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
  out[0] = s;
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od] {
      for (std::size_t i = 0; i < ad->g.size(); ++i) ad->g[i] += od->g[0];
    });
  }
  return out;
}

inline Tensor mean_all(Tape& tape, const Tensor& a) {
  Tensor out(1, 1, a.requires_grad());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
  out[0] = s / static_cast<double>(a.size());
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od] {
      double g = od->g[0] / static_cast<double>(ad->v.size());
      for (std::size_t i = 0; i < ad->g.size(); ++i) ad->g[i] += g;
    });
  }
  return out;
}

// Mean over rows: [m x n] -> [1 x n]
inline Tensor mean_rows(Tape& tape, const Tensor& a) {
  Tensor out(1, a.cols(), a.requires_grad());
  const std::size_t n = a.cols();
  const double inv_m = 1.0 / static_cast<double>(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out[c] += a.at(r, c);
  for (std::size_t c = 0; c < n; ++c) out[c] *= inv_m;
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od, inv_m] {
      const std::size_t n = od->cols;
      for (std::size_t r = 0; r < ad->rows; ++r)
        for (std::size_t c = 0; c < n; ++c) ad->g[r * n + c] += od->g[c] * inv_m;
    });
  }
  return out;
}

inline Tensor square(Tape& tape, const Tensor& a) {
  Tensor out(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * a[i];
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od] {
      for (std::size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i] * 2.0 * ad->v[i];
    });
  }
  return out;
}

// |x|, subgradient at 0 taken as 0.
inline Tensor abs_val(Tape& tape, const Tensor& a) {
  Tensor out(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::fabs(a[i]);
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od] {
      for (std::size_t i = 0; i < od->g.size(); ++i) {
        double s = ad->v[i] > 0.0 ? 1.0 : (ad->v[i] < 0.0 ? -1.0 : 0.0);
        ad->g[i] += od->g[i] * s;
      }
    });
  }
  return out;
}

inline Tensor concat_rows(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("concat_rows: column mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  Tensor out(a.rows() + b.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.size());
  if (out.requires_grad()) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tape.record([ad, bd, od] {
      std::size_t na = ad->v.size();
      if (ad->requires_grad)
        for (std::size_t i = 0; i < na; ++i) ad->g[i] += od->g[i];
      if (bd->requires_grad)
        for (std::size_t i = 0; i < bd->v.size(); ++i) bd->g[i] += od->g[na + i];
    });
  }
  return out;
}

inline Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("concat_cols: row mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  Tensor out(a.rows(), a.cols() + b.cols(), a.requires_grad() || b.requires_grad());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) out.at(r, c) = a.at(r, c);
    for (std::size_t c = 0; c < b.cols(); ++c) out.at(r, a.cols() + c) = b.at(r, c);
  }
  if (out.requires_grad()) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tape.record([ad, bd, od] {
      std::size_t ca = ad->cols, cb = bd->cols, n = od->cols;
      for (std::size_t r = 0; r < od->rows; ++r) {
        if (ad->requires_grad)
          for (std::size_t c = 0; c < ca; ++c) ad->g[r * ca + c] += od->g[r * n + c];
        if (bd->requires_grad)
          for (std::size_t c = 0; c < cb; ++c) bd->g[r * cb + c] += od->g[r * n + ca + c];
      }
    });
  }
  return out;
}

// Rows [r0, r1) of a.
inline Tensor slice_rows(Tape& tape, const Tensor& a, std::size_t r0, std::size_t r1) {
  if (r0 >= r1 || r1 > a.rows()) {
    throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ") out of " + a.shape_str());
  }
  Tensor out(r1 - r0, a.cols(), a.requires_grad());
  std::copy(a.data().begin() + r0 * a.cols(), a.data().begin() + r1 * a.cols(),
            out.data().begin());
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od, r0] {
      std::size_t base = r0 * ad->cols;
      for (std::size_t i = 0; i < od->g.size(); ++i) ad->g[base + i] += od->g[i];
    });
  }
  return out;
}

// Columns [c0, c1) of a.
inline Tensor slice_cols(Tape& tape, const Tensor& a, std::size_t c0, std::size_t c1) {
  if (c0 >= c1 || c1 > a.cols()) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") out of " + a.shape_str());
  }
  Tensor out(a.rows(), c1 - c0, a.requires_grad());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = c0; c < c1; ++c) out.at(r, c - c0) = a.at(r, c);
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od, c0] {
      std::size_t n = ad->cols, m = od->cols;
      for (std::size_t r = 0; r < od->rows; ++r)
        for (std::size_t c = 0; c < m; ++c) ad->g[r * n + c0 + c] += od->g[r * m + c];
    });
  }
  return out;
}

// ---- composite losses ------------------------------------------------------

inline Tensor mse_loss(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mse_loss", a, b);
  return mean_all(tape, square(tape, sub(tape, a, b)));
}

inline Tensor mae_loss(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mae_loss", a, b);
  return mean_all(tape, abs_val(tape, sub(tape, a, b)));
}

// Plain L2 norm sqrt(sum of squares); alternative reading of the recon loss.
inline Tensor l2_norm(Tape& tape, const Tensor& a) {
  Tensor out(1, 1, a.requires_grad());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * a[i];
  out[0] = std::sqrt(s);
  if (out.requires_grad()) {
    auto ad = a.ptr(), od = out.ptr();
    tape.record([ad, od] {
      double norm = od->v[0];
      if (norm <= 0.0) return;
      for (std::size_t i = 0; i < ad->g.size(); ++i)
        ad->g[i] += od->g[0] * ad->v[i] / norm;
    });
  }
  return out;
}

}  // namespace jvpm
