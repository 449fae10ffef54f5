#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "opd/error.hpp"
#include "opd/rng.hpp"

namespace opd {

enum class Activation : std::uint32_t { kTanh = 0, kSilu = 1 };
enum class TimeEmbedding : std::uint32_t { kRaw = 0, kFourier = 1 };

struct NetArch {
  int dim = 2;
  std::vector<int> hidden{64, 64, 64};
  Activation activation = Activation::kSilu;
  TimeEmbedding time_embedding = TimeEmbedding::kFourier;
  int n_frequencies = 2;
  int cond_vocab = 3;

  int time_features() const {
    return time_embedding == TimeEmbedding::kRaw ? 1 : 1 + 2 * n_frequencies;
  }
  int input_dim() const { return dim + time_features() + cond_vocab; }

  friend bool operator==(const NetArch&, const NetArch&) = default;
};

/// Column-major batch of points: column b occupies data[b*rows, (b+1)*rows).
struct Batch {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Batch() = default;
  Batch(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  double* col(int b) { return data.data() + static_cast<std::size_t>(b) * rows; }
  const double* col(int b) const { return data.data() + static_cast<std::size_t>(b) * rows; }
  double& operator()(int i, int b) { return col(b)[i]; }
  double operator()(int i, int b) const { return col(b)[i]; }
};

/// Activations retained by a forward pass for the matching backward pass.
struct ForwardCache {
  std::vector<Batch> inputs;  // input to each layer
  std::vector<Batch> pre;     // pre-activation of each hidden layer
};

/// MLP velocity field v(x, t, c): input [x ; time features ; one-hot c],
/// smooth hidden activations and a linear output head of size dim.
///
/// Every column of a batch is computed by the same scalar loop, so a point's
/// output does not depend on the batch it travels in.
class VelocityField {
 public:
  VelocityField() = default;

  explicit VelocityField(NetArch arch) : arch_(std::move(arch)) {
    require(arch_.dim >= 1, "data dimension must be >= 1");
    require(arch_.cond_vocab >= 1, "cond_vocab must be >= 1");
    require(arch_.n_frequencies >= 0, "n_frequencies must be >= 0");
    for (int h : arch_.hidden) require(h >= 1, "hidden widths must be >= 1");
    int in = arch_.input_dim();
    for (int h : arch_.hidden) {
      shapes_.push_back({h, in});
      in = h;
    }
    shapes_.push_back({arch_.dim, in});
    std::size_t n = 0;
    for (auto [out, inn] : shapes_) {
      offsets_.push_back(n);
      n += static_cast<std::size_t>(out) * inn + out;
    }
    params_.assign(n, 0.0);
  }

  /// Glorot-normal hidden layers; the output head is scaled down so an
  /// untrained field starts close to zero velocity.
  static VelocityField initialized(NetArch arch, Rng rng, double head_scale = 0.1) {
    VelocityField vf(std::move(arch));
    for (std::size_t l = 0; l < vf.shapes_.size(); ++l) {
      auto [out, in] = vf.shapes_[l];
      double sd = std::sqrt(2.0 / (in + out));
      if (l + 1 == vf.shapes_.size()) sd *= head_scale;
      double* w = vf.params_.data() + vf.offsets_[l];
      for (int k = 0; k < out * in; ++k) w[k] = sd * rng.normal();
    }
    return vf;
  }

  const NetArch& arch() const { return arch_; }
  int dim() const { return arch_.dim; }
  int cond_vocab() const { return arch_.cond_vocab; }
  std::size_t n_params() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  const std::vector<std::array<int, 2>>& layer_shapes() const { return shapes_; }

  /// Velocity at a single point.
  std::vector<double> forward(std::span<const double> x, double t, int c) const {
    require(static_cast<int>(x.size()) == arch_.dim, "state has wrong dimension");
    Batch xb(arch_.dim, 1);
    std::copy(x.begin(), x.end(), xb.data.begin());
    const double ts[1] = {t};
    const int cs[1] = {c};
    return forward(xb, ts, cs).data;
  }

  /// Batched velocity. t and c hold one entry per column (or a single entry
  /// broadcast to all columns).
  Batch forward(const Batch& x, std::span<const double> t, std::span<const int> c,
                ForwardCache* cache = nullptr) const {
    require(x.rows == arch_.dim, "batch has wrong dimension");
    const int n = x.cols;
    require(t.size() == 1 || static_cast<int>(t.size()) == n, "time vector length mismatch");
    require(c.size() == 1 || static_cast<int>(c.size()) == n, "condition vector length mismatch");

    Batch h(arch_.input_dim(), n);
    for (int b = 0; b < n; ++b) {
      const double tb = t.size() == 1 ? t[0] : t[b];
      const int cb = c.size() == 1 ? c[0] : c[b];
      if (cb < 0 || cb >= arch_.cond_vocab)
        throw InvalidArgument("condition id " + std::to_string(cb) + " out of range");
      double* col = h.col(b);
      const double* xs = x.col(b);
      int k = 0;
      for (int i = 0; i < arch_.dim; ++i) col[k++] = xs[i];
      col[k++] = tb;
      if (arch_.time_embedding == TimeEmbedding::kFourier) {
        for (int f = 1; f <= arch_.n_frequencies; ++f) {
          col[k++] = std::sin(f * std::numbers::pi * tb);
          col[k++] = std::cos(f * std::numbers::pi * tb);
        }
      }
      for (int i = 0; i < arch_.cond_vocab; ++i) col[k++] = (i == cb) ? 1.0 : 0.0;
    }

    if (cache) {
      cache->inputs.clear();
      cache->pre.clear();
    }
    const std::size_t n_layers = shapes_.size();
    for (std::size_t l = 0; l < n_layers; ++l) {
      auto [out, in] = shapes_[l];
      const double* w = params_.data() + offsets_[l];
      const double* bias = w + static_cast<std::size_t>(out) * in;
      Batch z(out, n);
      for (int b = 0; b < n; ++b) affine(w, bias, out, in, h.col(b), z.col(b));
      if (cache) cache->inputs.push_back(h);
      if (l + 1 == n_layers) return z;
      if (cache) cache->pre.push_back(z);
      for (double& v : z.data) v = activate(v);
      h = std::move(z);
    }
    return h;  // unreachable: there is always an output layer
  }

  /// Accumulates d(loss)/d(params) into grad given d(loss)/d(output).
  void backward(const ForwardCache& cache, const Batch& d_out, std::span<double> grad) const {
    require(grad.size() == params_.size(), "gradient buffer has wrong length");
    const std::size_t n_layers = shapes_.size();
    require(cache.inputs.size() == n_layers, "forward cache does not match this network");
    const int n = d_out.cols;
    Batch delta = d_out;
    for (std::size_t l = n_layers; l-- > 0;) {
      auto [out, in] = shapes_[l];
      const double* w = params_.data() + offsets_[l];
      double* gw = grad.data() + offsets_[l];
      double* gb = gw + static_cast<std::size_t>(out) * in;
      const Batch& input = cache.inputs[l];
      for (int b = 0; b < n; ++b) {
        const double* dz = delta.col(b);
        const double* xin = input.col(b);
        for (int k = 0; k < in; ++k) {
          double* gwk = gw + static_cast<std::size_t>(k) * out;
          const double xk = xin[k];
          for (int i = 0; i < out; ++i) gwk[i] += dz[i] * xk;
        }
        for (int i = 0; i < out; ++i) gb[i] += dz[i];
      }
      if (l == 0) break;
      const Batch& pre = cache.pre[l - 1];
      Batch next(in, n);
      for (int b = 0; b < n; ++b) {
        const double* dz = delta.col(b);
        double* dh = next.col(b);
        const double* zp = pre.col(b);
        for (int k = 0; k < in; ++k) {
          const double* wk = w + static_cast<std::size_t>(k) * out;
          double s = 0.0;
          for (int i = 0; i < out; ++i) s += wk[i] * dz[i];
          dh[k] = s * activate_grad(zp[k]);
        }
      }
      delta = std::move(next);
    }
  }

  friend bool operator==(const VelocityField& a, const VelocityField& b) {
    return a.arch_ == b.arch_ && a.params_ == b.params_;
  }

 private:
  static void affine(const double* w, const double* bias, int out, int in, const double* x,
                     double* z) {
    for (int i = 0; i < out; ++i) z[i] = bias[i];
    for (int k = 0; k < in; ++k) {
      const double* wk = w + static_cast<std::size_t>(k) * out;
      const double xk = x[k];
      for (int i = 0; i < out; ++i) z[i] += wk[i] * xk;
    }
  }

  double activate(double z) const {
    if (arch_.activation == Activation::kTanh) return std::tanh(z);
    return z / (1.0 + std::exp(-z));
  }
  double activate_grad(double z) const {
    if (arch_.activation == Activation::kTanh) {
      const double th = std::tanh(z);
      return 1.0 - th * th;
    }
    const double s = 1.0 / (1.0 + std::exp(-z));
    return s * (1.0 + z * (1.0 - s));
  }

  NetArch arch_;
  std::vector<std::array<int, 2>> shapes_;  // {out, in}; weights stored column-major
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// Checkpoint format (little-endian):
//   "OPDF" | u32 version | u32 dim | u32 cond_vocab | u32 activation |
//   u32 time_embedding | u32 n_frequencies | u32 n_layers |
//   n_layers x (u32 out, u32 in) | u64 n_params | n_params x f32
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put_le(std::vector<unsigned char>& out, T v) {
  static_assert(std::is_integral_v<T> || std::is_same_v<T, float>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.insert(out.end(), bytes.begin(), bytes.end());
}

template <class T>
T get_le(std::span<const unsigned char> in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw InvalidArgument("checkpoint truncated");
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  pos += sizeof(T);
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

}  // namespace detail

/// Parameters are stored as f32; a save/load/save cycle is byte-identical.
inline std::vector<unsigned char> encode_checkpoint(const VelocityField& vf) {
  std::vector<unsigned char> out{'O', 'P', 'D', 'F'};
  const NetArch& a = vf.arch();
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, a.dim);
  detail::put_le<std::uint32_t>(out, a.cond_vocab);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.activation));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.time_embedding));
  detail::put_le<std::uint32_t>(out, a.n_frequencies);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(vf.layer_shapes().size()));
  for (auto [o, i] : vf.layer_shapes()) {
    detail::put_le<std::uint32_t>(out, o);
    detail::put_le<std::uint32_t>(out, i);
  }
  detail::put_le<std::uint64_t>(out, vf.n_params());
  for (double p : vf.params()) detail::put_le<float>(out, static_cast<float>(p));
  return out;
}

inline VelocityField decode_checkpoint(std::span<const unsigned char> in) {
  if (in.size() < 4 || std::memcmp(in.data(), "OPDF", 4) != 0)
    throw InvalidArgument("not an OPDF checkpoint");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(in, pos);
  if (version != kCheckpointVersion)
    throw InvalidArgument("unsupported checkpoint version " + std::to_string(version));
  NetArch a;
  a.dim = static_cast<int>(detail::get_le<std::uint32_t>(in, pos));
  a.cond_vocab = static_cast<int>(detail::get_le<std::uint32_t>(in, pos));
  const auto act = detail::get_le<std::uint32_t>(in, pos);
  const auto emb = detail::get_le<std::uint32_t>(in, pos);
  if (act > 1 || emb > 1) throw InvalidArgument("unknown activation or time embedding tag");
  a.activation = static_cast<Activation>(act);
  a.time_embedding = static_cast<TimeEmbedding>(emb);
  a.n_frequencies = static_cast<int>(detail::get_le<std::uint32_t>(in, pos));
  const auto n_layers = detail::get_le<std::uint32_t>(in, pos);
  if (n_layers < 1 || n_layers > 64) throw InvalidArgument("implausible layer count");
  std::vector<std::array<int, 2>> shapes(n_layers);
  for (auto& s : shapes) {
    s[0] = static_cast<int>(detail::get_le<std::uint32_t>(in, pos));
    s[1] = static_cast<int>(detail::get_le<std::uint32_t>(in, pos));
  }
  a.hidden.clear();
  for (std::uint32_t l = 0; l + 1 < n_layers; ++l) a.hidden.push_back(shapes[l][0]);
  VelocityField vf(a);
  if (vf.layer_shapes() != shapes) throw InvalidArgument("checkpoint layer shapes are inconsistent");
  const auto n = detail::get_le<std::uint64_t>(in, pos);
  if (n != vf.n_params()) throw InvalidArgument("checkpoint parameter count mismatch");
  auto p = vf.params();
  for (std::size_t k = 0; k < n; ++k) p[k] = detail::get_le<float>(in, pos);
  if (pos != in.size()) throw InvalidArgument("trailing bytes after checkpoint");
  return vf;
}

inline void save_checkpoint(const VelocityField& vf, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(vf);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline VelocityField load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingPrerequisite("missing checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

/// Rounds parameters to f32 so in-memory state equals what a checkpoint holds.
inline void quantize_to_f32(VelocityField& vf) {
  for (double& p : vf.params()) p = static_cast<float>(p);
}

/// FNV-1a over the raw parameter bytes; used to check on-policy invariants.
inline std::uint64_t params_hash(const VelocityField& vf) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double p : vf.params()) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(p);
    for (int k = 0; k < 8; ++k) {
      h ^= (bits >> (8 * k)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace opd
