#pragma once

// KDE-VoxNet rating classifier: five [conv3d 3x3x3 -> batch norm -> relu ->
// maxpool 2] blocks, then a residual head whose two branches are summed
// before the softmax:
//
//   A: conv 3x3x3 -> relu -> (maxpool 2 while spatial size >= 2) ->
//      conv 1x1x1 to 3 channels -> global average pool
//   B: global average pool -> fc -> relu -> fc to 3
//
// Tensors are [N][C][D][H][W] with W fastest. Convolutions run as im2col +
// GEMM through Eigen. Everything is templated on the scalar so the same code
// runs in float for training and double for gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "treeseg/error.hpp"
#include "treeseg/ratings.hpp"

namespace treeseg {

struct RaterTopology {
  std::size_t resolution = 32;
  double extent = 20.0;  // m
  std::vector<std::size_t> channels{8, 16, 32, 64, 128};
  std::size_t head_channels = 16;
  std::size_t mlp_hidden = 64;

  std::size_t final_size() const { return resolution >> channels.size(); }

  void validate() const {
    if (channels.empty()) throw InvalidArgument("rater topology needs at least one block");
    if (resolution == 0 || (resolution % (std::size_t{1} << channels.size())) != 0)
      throw InvalidArgument("resolution " + std::to_string(resolution) + " is not divisible by 2^" +
                            std::to_string(channels.size()));
    if (!(extent > 0)) throw InvalidArgument("voxel extent must be positive");
    for (auto c : channels)
      if (c == 0) throw InvalidArgument("zero-width block");
    if (head_channels == 0 || mlp_hidden == 0) throw InvalidArgument("zero-width head");
  }

  nlohmann::json to_json() const {
    return {{"resolution", resolution}, {"extent", extent},          {"channels", channels},
            {"head_channels", head_channels}, {"mlp_hidden", mlp_hidden}};
  }

  static RaterTopology from_json(const nlohmann::json& j) {
    RaterTopology t;
    t.resolution = j.at("resolution").get<std::size_t>();
    t.extent = j.at("extent").get<double>();
    t.channels = j.at("channels").get<std::vector<std::size_t>>();
    t.head_channels = j.at("head_channels").get<std::size_t>();
    t.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
    t.validate();
    return t;
  }

  bool operator==(const RaterTopology&) const = default;
};

template <class T>
struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<T> data;
  bool trainable = true;
  bool decay = false;  // L2 weight decay applies (conv and fc weights)

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

enum class Mode { train, infer };

namespace nn {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct Span1 {
  long lo, hi;  // valid output range [lo, hi) for a shift d
};
inline Span1 shifted(long s, long d) { return {std::max(0L, -d), std::min(s, s - d)}; }

/// cols[(c * 27 + tap) * V + v] = in[c][v shifted by tap], zero outside.
template <class T>
void im2col3(const T* in, std::size_t channels, std::size_t size, T* cols) {
  const std::size_t V = size * size * size;
  const long s = static_cast<long>(size);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* x = in + c * V;
    for (int tap = 0; tap < 27; ++tap) {
      long dz = tap / 9 - 1, dy = (tap / 3) % 3 - 1, dx = tap % 3 - 1;
      T* row = cols + (c * 27 + static_cast<std::size_t>(tap)) * V;
      std::fill(row, row + V, T(0));
      auto zr = shifted(s, dz), yr = shifted(s, dy), xr = shifted(s, dx);
      for (long z = zr.lo; z < zr.hi; ++z)
        for (long y = yr.lo; y < yr.hi; ++y) {
          T* o = row + (z * s + y) * s;
          const T* src = x + ((z + dz) * s + (y + dy)) * s + dx;
          for (long i = xr.lo; i < xr.hi; ++i) o[i] = src[i];
        }
    }
  }
}

/// Adjoint of im2col3: scatters column gradients back onto the volume.
template <class T>
void col2im3(const T* cols, std::size_t channels, std::size_t size, T* din) {
  const std::size_t V = size * size * size;
  const long s = static_cast<long>(size);
  for (std::size_t c = 0; c < channels; ++c) {
    T* x = din + c * V;
    for (int tap = 0; tap < 27; ++tap) {
      long dz = tap / 9 - 1, dy = (tap / 3) % 3 - 1, dx = tap % 3 - 1;
      const T* row = cols + (c * 27 + static_cast<std::size_t>(tap)) * V;
      auto zr = shifted(s, dz), yr = shifted(s, dy), xr = shifted(s, dx);
      for (long z = zr.lo; z < zr.hi; ++z)
        for (long y = yr.lo; y < yr.hi; ++y) {
          const T* g = row + (z * s + y) * s;
          T* dst = x + ((z + dz) * s + (y + dy)) * s + dx;
          for (long i = xr.lo; i < xr.hi; ++i) dst[i] += g[i];
        }
    }
  }
}

/// 2x2x2 max pooling of one [C][S][S][S] volume; argmax holds input offsets.
/// Ties go to the first element in (z, y, x) order.
template <class T>
void maxpool2(const T* in, std::size_t channels, std::size_t size, T* out, std::uint32_t* argmax) {
  const std::size_t h = size / 2, V = size * size * size, Vh = h * h * h;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t z = 0; z < h; ++z)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < h; ++x) {
          std::size_t best = c * V + ((2 * z) * size + 2 * y) * size + 2 * x;
          for (std::size_t k = 1; k < 8; ++k) {
            std::size_t off = c * V + ((2 * z + (k >> 2)) * size + 2 * y + ((k >> 1) & 1)) * size + 2 * x + (k & 1);
            if (in[off] > in[best]) best = off;
          }
          std::size_t o = c * Vh + (z * h + y) * h + x;
          out[o] = in[best];
          argmax[o] = static_cast<std::uint32_t>(best);
        }
}

}  // namespace nn

template <class T>
class RaterNet {
public:
  static constexpr std::size_t kClasses = kNumClasses;
  T bn_eps = T(1e-5);
  T bn_momentum = T(0.1);

  explicit RaterNet(RaterTopology topo = {}, std::uint64_t seed = 1) : topo_(std::move(topo)) {
    topo_.validate();
    std::mt19937_64 rng(seed);
    std::size_t cin = 1;
    for (std::size_t b = 0; b < topo_.channels.size(); ++b) {
      std::size_t c = topo_.channels[b];
      std::string p = "block" + std::to_string(b);
      Block blk;
      blk.w = add(p + ".conv.weight", {u32(c), u32(cin), 3, 3, 3}, true, true);
      blk.gamma = add(p + ".bn.gamma", {u32(c)}, true, false);
      blk.beta = add(p + ".bn.beta", {u32(c)}, true, false);
      blk.mean = add(p + ".bn.running_mean", {u32(c)}, false, false);
      blk.var = add(p + ".bn.running_var", {u32(c)}, false, false);
      he_init(blk.w, cin * 27, rng);
      fill(blk.gamma, T(1));
      fill(blk.var, T(1));
      blocks_.push_back(blk);
      cin = c;
    }
    std::size_t c = cin, h = topo_.head_channels, m = topo_.mlp_hidden;
    a1w_ = add("head_a.conv1.weight", {u32(h), u32(c), 3, 3, 3}, true, true);
    a1b_ = add("head_a.conv1.bias", {u32(h)}, true, false);
    a2w_ = add("head_a.conv2.weight", {u32(kClasses), u32(h)}, true, true);
    a2b_ = add("head_a.conv2.bias", {u32(kClasses)}, true, false);
    b1w_ = add("head_b.fc1.weight", {u32(m), u32(c)}, true, true);
    b1b_ = add("head_b.fc1.bias", {u32(m)}, true, false);
    b2w_ = add("head_b.fc2.weight", {u32(kClasses), u32(m)}, true, true);
    b2b_ = add("head_b.fc2.bias", {u32(kClasses)}, true, false);
    he_init(a1w_, c * 27, rng);
    he_init(a2w_, h, rng, T(0.5));
    he_init(b1w_, c, rng);
    he_init(b2w_, m, rng, T(0.5));
    grads_.resize(tensors_.size());
    zero_grad();
  }

  const RaterTopology& topology() const { return topo_; }
  std::size_t input_size() const { return topo_.resolution * topo_.resolution * topo_.resolution; }

  std::vector<NamedTensor<T>>& tensors() { return tensors_; }
  const std::vector<NamedTensor<T>>& tensors() const { return tensors_; }
  std::vector<std::vector<T>>& grads() { return grads_; }
  const std::vector<std::vector<T>>& grads() const { return grads_; }

  NamedTensor<T>& tensor(const std::string& name) { return tensors_[index_of(name)]; }
  const NamedTensor<T>& tensor(const std::string& name) const { return tensors_[index_of(name)]; }
  std::size_t index_of(const std::string& name) const {
    for (std::size_t k = 0; k < tensors_.size(); ++k)
      if (tensors_[k].name == name) return k;
    throw InvalidArgument("no tensor named " + name);
  }

  void zero_grad() {
    for (std::size_t k = 0; k < tensors_.size(); ++k) grads_[k].assign(tensors_[k].data.size(), T(0));
  }

  /// Logits for n grids laid out back to back. In train mode batch norm uses
  /// batch statistics and updates its running averages; in infer mode it uses
  /// the running averages and nothing changes. Intermediate values are kept
  /// for a following backward().
  std::vector<T> forward(std::span<const T> input, std::size_t n, Mode mode) {
    if (n == 0) throw InvalidArgument("empty batch");
    if (input.size() != n * input_size())
      throw InvalidArgument("input holds " + std::to_string(input.size()) + " values, expected " +
                            std::to_string(n * input_size()));
    n_ = n;
    mode_ = mode;
    std::size_t cin = 1, s = topo_.resolution;
    cache_.resize(blocks_.size());
    const T* x = input.data();
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      auto& bc = cache_[b];
      std::size_t c = topo_.channels[b], V = s * s * s;
      bc.cin = cin;
      bc.size = s;
      bc.input.assign(x, x + n * cin * V);
      conv3(bc.input.data(), n, cin, s, tensors_[blocks_[b].w].data.data(), c, nullptr, bc.conv);
      batch_norm(b, n, c, V, mode);
      bc.pooled.resize(n * c * V / 8);
      bc.argmax.resize(n * c * V / 8);
      for (std::size_t i = 0; i < n; ++i)
        nn::maxpool2(bc.act.data() + i * c * V, c, s, bc.pooled.data() + i * c * V / 8,
                     bc.argmax.data() + i * c * V / 8);
      x = bc.pooled.data();
      cin = c;
      s /= 2;
    }
    return head_forward(x, n, cin, s);
  }

  static std::vector<T> softmax(std::span<const T> logits) {
    std::vector<T> p(logits.begin(), logits.end());
    for (std::size_t i = 0; i < p.size(); i += kClasses) {
      T mx = *std::max_element(p.begin() + static_cast<long>(i), p.begin() + static_cast<long>(i + kClasses));
      T sum = 0;
      for (std::size_t k = 0; k < kClasses; ++k) sum += p[i + k] = std::exp(p[i + k] - mx);
      for (std::size_t k = 0; k < kClasses; ++k) p[i + k] /= sum;
    }
    return p;
  }

  std::vector<T> predict(std::span<const T> input, std::size_t n) { return softmax(forward(input, n, Mode::infer)); }

  /// Accumulates parameter gradients for d(loss)/d(logits) of the last forward().
  void backward(std::span<const T> dlogits) {
    if (dlogits.size() != n_ * kClasses) throw InvalidArgument("gradient does not match last batch");
    std::size_t n = n_;
    std::vector<T> d = head_backward(dlogits);
    for (std::size_t b = blocks_.size(); b-- > 0;) {
      auto& bc = cache_[b];
      std::size_t c = topo_.channels[b], s = bc.size, V = s * s * s;
      std::vector<T> dact(n * c * V, T(0));
      for (std::size_t k = 0; k < d.size(); ++k) dact[(k / (c * V / 8)) * c * V + bc.argmax[k]] += d[k];
      for (std::size_t k = 0; k < dact.size(); ++k)
        if (!(bc.act[k] > 0)) dact[k] = 0;
      std::vector<T> dconv = batch_norm_backward(b, n, c, V, dact);
      d = conv3_backward(bc.input.data(), n, bc.cin, s, tensors_[blocks_[b].w].data.data(), c, dconv,
                         grads_[blocks_[b].w].data(), nullptr, b > 0);
    }
  }

private:
  struct Block {
    std::size_t w, gamma, beta, mean, var;
  };
  struct BlockCache {
    std::size_t cin = 0, size = 0;
    std::vector<T> input, conv, xhat, act, pooled;
    std::vector<T> mean, invstd;
    std::vector<std::uint32_t> argmax;
  };

  static std::uint32_t u32(std::size_t v) { return static_cast<std::uint32_t>(v); }

  std::size_t add(std::string name, std::vector<std::uint32_t> shape, bool trainable, bool decay) {
    NamedTensor<T> t;
    t.name = std::move(name);
    t.shape = std::move(shape);
    t.data.assign(t.numel(), T(0));
    t.trainable = trainable;
    t.decay = decay;
    tensors_.push_back(std::move(t));
    return tensors_.size() - 1;
  }
  void fill(std::size_t k, T v) { std::fill(tensors_[k].data.begin(), tensors_[k].data.end(), v); }
  void he_init(std::size_t k, std::size_t fan_in, std::mt19937_64& rng, T gain = T(1)) {
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : tensors_[k].data) v = gain * static_cast<T>(nd(rng));
  }

  // out[n][cout][V] = W * im2col(in[n]) (+ bias)
  void conv3(const T* in, std::size_t n, std::size_t cin, std::size_t s, const T* w, std::size_t cout, const T* bias,
             std::vector<T>& out) const {
    std::size_t V = s * s * s;
    out.resize(n * cout * V);
    std::vector<T> cols(cin * 27 * V);
    nn::ConstMatMap<T> W(w, static_cast<long>(cout), static_cast<long>(cin * 27));
    for (std::size_t i = 0; i < n; ++i) {
      nn::im2col3(in + i * cin * V, cin, s, cols.data());
      nn::ConstMatMap<T> C(cols.data(), static_cast<long>(cin * 27), static_cast<long>(V));
      nn::MatMap<T> O(out.data() + i * cout * V, static_cast<long>(cout), static_cast<long>(V));
      O.noalias() = W * C;
      if (bias)
        for (std::size_t o = 0; o < cout; ++o) O.row(static_cast<long>(o)).array() += bias[o];
    }
  }

  // Returns d(in) when want_input; accumulates dW (and db when given).
  std::vector<T> conv3_backward(const T* in, std::size_t n, std::size_t cin, std::size_t s, const T* w,
                                std::size_t cout, const std::vector<T>& dout, T* dw, T* db, bool want_input) const {
    std::size_t V = s * s * s;
    std::vector<T> cols(cin * 27 * V), dcols(want_input ? cin * 27 * V : 0);
    std::vector<T> din(want_input ? n * cin * V : 0, T(0));
    nn::ConstMatMap<T> W(w, static_cast<long>(cout), static_cast<long>(cin * 27));
    nn::MatMap<T> DW(dw, static_cast<long>(cout), static_cast<long>(cin * 27));
    for (std::size_t i = 0; i < n; ++i) {
      nn::ConstMatMap<T> G(dout.data() + i * cout * V, static_cast<long>(cout), static_cast<long>(V));
      nn::im2col3(in + i * cin * V, cin, s, cols.data());
      nn::ConstMatMap<T> C(cols.data(), static_cast<long>(cin * 27), static_cast<long>(V));
      DW.noalias() += G * C.transpose();
      if (db)
        for (std::size_t o = 0; o < cout; ++o) db[o] += G.row(static_cast<long>(o)).sum();
      if (want_input) {
        nn::MatMap<T> DC(dcols.data(), static_cast<long>(cin * 27), static_cast<long>(V));
        DC.noalias() = W.transpose() * G;
        nn::col2im3(dcols.data(), cin, s, din.data() + i * cin * V);
      }
    }
    return din;
  }

  void batch_norm(std::size_t b, std::size_t n, std::size_t c, std::size_t V, Mode mode) {
    auto& bc = cache_[b];
    const auto& gamma = tensors_[blocks_[b].gamma].data;
    const auto& beta = tensors_[blocks_[b].beta].data;
    auto& rmean = tensors_[blocks_[b].mean].data;
    auto& rvar = tensors_[blocks_[b].var].data;
    bc.xhat.resize(bc.conv.size());
    bc.act.resize(bc.conv.size());
    bc.mean.assign(c, T(0));
    bc.invstd.assign(c, T(0));
    const double m = static_cast<double>(n * V);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mean, var;
      if (mode == Mode::train) {
        double sum = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const T* y = bc.conv.data() + (i * c + ch) * V;
          for (std::size_t v = 0; v < V; ++v) sum += y[v];
        }
        mean = sum / m;
        double sq = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const T* y = bc.conv.data() + (i * c + ch) * V;
          for (std::size_t v = 0; v < V; ++v) sq += (y[v] - mean) * (y[v] - mean);
        }
        var = sq / m;
        double unbiased = m > 1 ? sq / (m - 1) : var;
        rmean[ch] = static_cast<T>((1 - bn_momentum) * rmean[ch] + bn_momentum * mean);
        rvar[ch] = static_cast<T>((1 - bn_momentum) * rvar[ch] + bn_momentum * unbiased);
      } else {
        mean = rmean[ch];
        var = rvar[ch];
      }
      T mu = static_cast<T>(mean), inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(bn_eps)));
      bc.mean[ch] = mu;
      bc.invstd[ch] = inv;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t off = (i * c + ch) * V;
        for (std::size_t v = 0; v < V; ++v) {
          T xh = (bc.conv[off + v] - mu) * inv;
          bc.xhat[off + v] = xh;
          bc.act[off + v] = std::max(T(0), gamma[ch] * xh + beta[ch]);
        }
      }
    }
  }

  std::vector<T> batch_norm_backward(std::size_t b, std::size_t n, std::size_t c, std::size_t V,
                                     const std::vector<T>& dz) {
    auto& bc = cache_[b];
    const auto& gamma = tensors_[blocks_[b].gamma].data;
    auto& dgamma = grads_[blocks_[b].gamma];
    auto& dbeta = grads_[blocks_[b].beta];
    std::vector<T> dy(dz.size());
    const double m = static_cast<double>(n * V);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_dz = 0, sum_dz_xh = 0;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t off = (i * c + ch) * V;
        for (std::size_t v = 0; v < V; ++v) {
          sum_dz += dz[off + v];
          sum_dz_xh += dz[off + v] * bc.xhat[off + v];
        }
      }
      dgamma[ch] += static_cast<T>(sum_dz_xh);
      dbeta[ch] += static_cast<T>(sum_dz);
      T scale = gamma[ch] * bc.invstd[ch];
      if (mode_ == Mode::train) {
        T mdz = static_cast<T>(sum_dz / m), mdzx = static_cast<T>(sum_dz_xh / m);
        for (std::size_t i = 0; i < n; ++i) {
          std::size_t off = (i * c + ch) * V;
          for (std::size_t v = 0; v < V; ++v) dy[off + v] = scale * (dz[off + v] - mdz - bc.xhat[off + v] * mdzx);
        }
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          std::size_t off = (i * c + ch) * V;
          for (std::size_t v = 0; v < V; ++v) dy[off + v] = scale * dz[off + v];
        }
      }
    }
    return dy;
  }

  // --- Head -----------------------------------------------------------------

  struct HeadCache {
    std::size_t c = 0, s = 0, sp = 0;  // channels and spatial size in, spatial size after pooling
    std::vector<T> x;                  // head input [n][c][s^3]
    std::vector<T> a1, a1p;            // conv1 + relu, then pooled
    std::vector<std::uint32_t> argmax;
    std::vector<T> g, h1;              // pooled features [n][c]; fc1 + relu [n][m]
  } head_;

  std::vector<T> head_forward(const T* x, std::size_t n, std::size_t c, std::size_t s) {
    auto& hc = head_;
    std::size_t V = s * s * s, h = topo_.head_channels, m = topo_.mlp_hidden;
    hc.c = c;
    hc.s = s;
    hc.x.assign(x, x + n * c * V);

    // Branch A.
    conv3(hc.x.data(), n, c, s, tensors_[a1w_].data.data(), h, tensors_[a1b_].data.data(), hc.a1);
    for (auto& v : hc.a1) v = std::max(T(0), v);
    std::size_t sp = s;
    if (s >= 2) {
      sp = s / 2;
      hc.a1p.resize(n * h * V / 8);
      hc.argmax.resize(n * h * V / 8);
      for (std::size_t i = 0; i < n; ++i)
        nn::maxpool2(hc.a1.data() + i * h * V, h, s, hc.a1p.data() + i * h * V / 8, hc.argmax.data() + i * h * V / 8);
    } else {
      hc.a1p = hc.a1;
    }
    hc.sp = sp;
    std::size_t Vp = sp * sp * sp;
    const auto& w2 = tensors_[a2w_].data;
    const auto& b2 = tensors_[a2b_].data;
    std::vector<T> logits(n * kClasses, T(0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < kClasses; ++k) {
        // mean over voxels of (W2 a + b2) = W2 mean(a) + b2
        T acc = 0;
        for (std::size_t j = 0; j < h; ++j) {
          const T* a = hc.a1p.data() + (i * h + j) * Vp;
          T mean = 0;
          for (std::size_t v = 0; v < Vp; ++v) mean += a[v];
          acc += w2[k * h + j] * (mean / static_cast<T>(Vp));
        }
        logits[i * kClasses + k] = acc + b2[k];
      }

    // Branch B.
    hc.g.assign(n * c, T(0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const T* a = hc.x.data() + (i * c + j) * V;
        T sum = 0;
        for (std::size_t v = 0; v < V; ++v) sum += a[v];
        hc.g[i * c + j] = sum / static_cast<T>(V);
      }
    const auto& w1 = tensors_[b1w_].data;
    const auto& bb1 = tensors_[b1b_].data;
    const auto& wb2 = tensors_[b2w_].data;
    const auto& bb2 = tensors_[b2b_].data;
    hc.h1.assign(n * m, T(0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t o = 0; o < m; ++o) {
        T acc = bb1[o];
        for (std::size_t j = 0; j < c; ++j) acc += w1[o * c + j] * hc.g[i * c + j];
        hc.h1[i * m + o] = std::max(T(0), acc);
      }
      for (std::size_t k = 0; k < kClasses; ++k) {
        T acc = bb2[k];
        for (std::size_t o = 0; o < m; ++o) acc += wb2[k * m + o] * hc.h1[i * m + o];
        logits[i * kClasses + k] += acc;
      }
    }
    return logits;
  }

  // Returns d(head input).
  std::vector<T> head_backward(std::span<const T> dl) {
    auto& hc = head_;
    std::size_t n = n_, c = hc.c, s = hc.s, V = s * s * s, sp = hc.sp, Vp = sp * sp * sp;
    std::size_t h = topo_.head_channels, m = topo_.mlp_hidden;
    std::vector<T> dx(n * c * V, T(0));

    // Branch B.
    const auto& w1 = tensors_[b1w_].data;
    const auto& wb2 = tensors_[b2w_].data;
    auto& gw1 = grads_[b1w_];
    auto& gb1 = grads_[b1b_];
    auto& gw2 = grads_[b2w_];
    auto& gb2 = grads_[b2b_];
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<T> dh(m, T(0));
      for (std::size_t k = 0; k < kClasses; ++k) {
        T g = dl[i * kClasses + k];
        gb2[k] += g;
        for (std::size_t o = 0; o < m; ++o) {
          gw2[k * m + o] += g * hc.h1[i * m + o];
          dh[o] += g * wb2[k * m + o];
        }
      }
      for (std::size_t o = 0; o < m; ++o) {
        if (!(hc.h1[i * m + o] > 0)) continue;
        gb1[o] += dh[o];
        for (std::size_t j = 0; j < c; ++j) {
          gw1[o * c + j] += dh[o] * hc.g[i * c + j];
          T dg = dh[o] * w1[o * c + j] / static_cast<T>(V);
          T* d = dx.data() + (i * c + j) * V;
          for (std::size_t v = 0; v < V; ++v) d[v] += dg;
        }
      }
    }

    // Branch A.
    const auto& w2 = tensors_[a2w_].data;
    auto& gw2a = grads_[a2w_];
    auto& gb2a = grads_[a2b_];
    std::vector<T> da1p(n * h * Vp, T(0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < kClasses; ++k) {
        T g = dl[i * kClasses + k];
        gb2a[k] += g;
        for (std::size_t j = 0; j < h; ++j) {
          const T* a = hc.a1p.data() + (i * h + j) * Vp;
          T mean = 0;
          for (std::size_t v = 0; v < Vp; ++v) mean += a[v];
          gw2a[k * h + j] += g * mean / static_cast<T>(Vp);
          T d = g * w2[k * h + j] / static_cast<T>(Vp);
          T* da = da1p.data() + (i * h + j) * Vp;
          for (std::size_t v = 0; v < Vp; ++v) da[v] += d;
        }
      }
    std::vector<T> da1(n * h * V, T(0));
    if (s >= 2) {
      for (std::size_t k = 0; k < da1p.size(); ++k) da1[(k / (h * Vp)) * h * V + hc.argmax[k]] += da1p[k];
    } else {
      da1 = da1p;
    }
    for (std::size_t k = 0; k < da1.size(); ++k)
      if (!(hc.a1[k] > 0)) da1[k] = 0;
    auto dxa = conv3_backward(hc.x.data(), n, c, s, tensors_[a1w_].data.data(), h, da1, grads_[a1w_].data(),
                              grads_[a1b_].data(), true);
    for (std::size_t k = 0; k < dx.size(); ++k) dx[k] += dxa[k];
    return dx;
  }

  RaterTopology topo_;
  std::vector<NamedTensor<T>> tensors_;
  std::vector<std::vector<T>> grads_;
  std::vector<Block> blocks_;
  std::size_t a1w_ = 0, a1b_ = 0, a2w_ = 0, a2b_ = 0, b1w_ = 0, b1b_ = 0, b2w_ = 0, b2b_ = 0;
  std::vector<BlockCache> cache_;
  std::size_t n_ = 0;
  Mode mode_ = Mode::infer;
};

/// Weighted cross-entropy, normalized by the summed weights of the batch:
/// L = sum_n w[y_n] * -log softmax(z_n)[y_n] / sum_n w[y_n]. Fills dlogits
/// when given.
template <class T>
T weighted_cross_entropy(std::span<const T> logits, std::span<const RatingClass> labels,
                         const std::array<double, kNumClasses>& weights, std::vector<T>* dlogits = nullptr) {
  const std::size_t K = kNumClasses, n = labels.size();
  if (logits.size() != n * K) throw InvalidArgument("logits do not match labels");
  auto p = RaterNet<T>::softmax(logits);
  double wsum = 0;
  for (auto y : labels) wsum += weights[static_cast<std::size_t>(y)];
  if (!(wsum > 0)) throw InvalidArgument("batch has zero total weight");
  double loss = 0;
  if (dlogits) dlogits->assign(n * K, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    auto y = static_cast<std::size_t>(labels[i]);
    double w = weights[y] / wsum;
    // log-softmax computed directly for accuracy
    T mx = *std::max_element(logits.begin() + static_cast<long>(i * K), logits.begin() + static_cast<long>(i * K + K));
    double lse = 0;
    for (std::size_t k = 0; k < K; ++k) lse += std::exp(static_cast<double>(logits[i * K + k] - mx));
    loss += w * (std::log(lse) - static_cast<double>(logits[i * K + y] - mx));
    if (dlogits)
      for (std::size_t k = 0; k < K; ++k) (*dlogits)[i * K + k] = static_cast<T>(w * (p[i * K + k] - (k == y ? 1 : 0)));
  }
  return static_cast<T>(loss);
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  double weight_decay = 1e-4;  // L2 on conv/fc weights, added to the gradient
};

template <class T>
class Adam {
public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(RaterNet<T>& net) {
    auto& ts = net.tensors();
    auto& gs = net.grads();
    if (m_.empty()) {
      for (const auto& t : ts) {
        m_.emplace_back(t.data.size(), 0.0);
        v_.emplace_back(t.data.size(), 0.0);
      }
    }
    ++t_;
    double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < ts.size(); ++k) {
      if (!ts[k].trainable) continue;
      auto& w = ts[k].data;
      const auto& g = gs[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        double gi = static_cast<double>(g[i]);
        if (ts[k].decay) gi += cfg_.weight_decay * static_cast<double>(w[i]);
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1 - cfg_.beta1) * gi;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1 - cfg_.beta2) * gi * gi;
        double mh = m_[k][i] / c1, vh = v_[k][i] / c2;
        w[i] = static_cast<T>(static_cast<double>(w[i]) - cfg_.learning_rate * mh / (std::sqrt(vh) + cfg_.epsilon));
      }
    }
  }

  std::uint64_t steps() const { return t_; }

private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace treeseg
