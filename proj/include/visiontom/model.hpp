#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "io.hpp"
#include "rng.hpp"

namespace vtom {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using CMatMap = Eigen::Map<const Mat<T>>;

struct ModelConfig {
  int layers = 4;
  int heads = 8;
  int head_dim = 16;
  int vocab = 53;
  int visual_channels = 7;
  int frames = 8;
  int grid = 6;
  int max_text = 4;
  std::uint64_t seed = 42;
  // Raw pixel value v enters the visual embedding as (v - pixel_center) / pixel_scale.
  double pixel_center = 128.0;
  double pixel_scale = 127.0;
  // Fixed spatial code for grid cells: random Fourier features of the cell coordinates.
  double code_bandwidth = 1.0;
  double code_gain = 4.0;

  int hidden() const { return heads * head_dim; }
  int visual_tokens() const { return frames * visual_channels; }
  int max_seq() const { return visual_tokens() + max_text; }
  int cells() const { return grid * grid; }
  int frame_values() const { return visual_tokens() * cells(); }

  void validate() const {
    if (layers < 1) throw ConfigError("layers must be >= 1");
    if (heads < 1) throw ConfigError("heads must be >= 1");
    if (head_dim < 2) throw ConfigError("head_dim must be >= 2");
    if (hidden() % 2 != 0) throw ConfigError("hidden width must be even");
    if (frames < 1 || visual_channels < 1 || grid < 1) throw ConfigError("visual shape must be positive");
    if (max_text < 1) throw ConfigError("max_text must be >= 1");
    if (vocab < 1) throw ConfigError("vocab must be >= 1");
    if (!(pixel_scale > 0)) throw ConfigError("pixel_scale must be positive");
    if (!(code_bandwidth > 0)) throw ConfigError("code_bandwidth must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline std::uint64_t config_hash(const ModelConfig& c) {
  Hasher h;
  for (int v : {c.layers, c.heads, c.head_dim, c.vocab, c.visual_channels, c.frames, c.grid, c.max_text})
    h.value<std::int32_t>(v);
  h.value(c.seed);
  for (double v : {c.pixel_center, c.pixel_scale, c.code_bandwidth, c.code_gain}) h.value(v);
  return h.digest();
}

struct HeadId {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadId&) const = default;
};

// Parameters live in one flat buffer so that optimizers, gradients and checkpoints share a layout.
template <class T>
struct Weights {
  enum Block : int { kCode, kPos, kTok, kQuery, kKey, kValue, kOut, kUnembed, kBlocks };

  ModelConfig cfg;
  std::vector<T> data;
  std::array<std::size_t, kBlocks + 1> off{};

  Weights() = default;
  explicit Weights(const ModelConfig& c) : cfg(c) {
    c.validate();
    const std::size_t hid = c.hidden();
    const std::array<std::size_t, kBlocks> sizes = {
        static_cast<std::size_t>(c.cells()) * hid,
        static_cast<std::size_t>(c.max_seq()) * hid,
        static_cast<std::size_t>(c.vocab) * hid,
        c.layers * hid * hid,
        c.layers * hid * hid,
        c.layers * hid * hid,
        c.layers * hid * hid,
        static_cast<std::size_t>(c.vocab) * hid,
    };
    off[0] = 0;
    for (int b = 0; b < kBlocks; ++b) off[b + 1] = off[b] + sizes[b];
    data.assign(off[kBlocks], T(0));
  }

  // The spatial code is fixed at construction and never trained.
  static bool trainable(int block) { return block != kCode; }

  std::size_t size() const { return data.size(); }

  MatMap<T> code() { return map(kCode, cfg.cells()); }
  CMatMap<T> code() const { return cmap(kCode, cfg.cells()); }
  MatMap<T> pos() { return map(kPos, cfg.max_seq()); }
  CMatMap<T> pos() const { return cmap(kPos, cfg.max_seq()); }
  MatMap<T> tok() { return map(kTok, cfg.vocab); }
  CMatMap<T> tok() const { return cmap(kTok, cfg.vocab); }
  MatMap<T> unembed() { return map(kUnembed, cfg.vocab); }
  CMatMap<T> unembed() const { return cmap(kUnembed, cfg.vocab); }
  MatMap<T> wq(int l) { return layer(kQuery, l); }
  CMatMap<T> wq(int l) const { return clayer(kQuery, l); }
  MatMap<T> wk(int l) { return layer(kKey, l); }
  CMatMap<T> wk(int l) const { return clayer(kKey, l); }
  MatMap<T> wv(int l) { return layer(kValue, l); }
  CMatMap<T> wv(int l) const { return clayer(kValue, l); }
  MatMap<T> wo(int l) { return layer(kOut, l); }
  CMatMap<T> wo(int l) const { return clayer(kOut, l); }

  template <class U>
  Weights<U> cast() const {
    Weights<U> w(cfg);
    for (std::size_t i = 0; i < data.size(); ++i) w.data[i] = static_cast<U>(data[i]);
    return w;
  }

  bool operator==(const Weights& o) const { return cfg == o.cfg && data == o.data; }

 private:
  MatMap<T> map(Block b, int rows) { return MatMap<T>(data.data() + off[b], rows, cfg.hidden()); }
  CMatMap<T> cmap(Block b, int rows) const { return CMatMap<T>(data.data() + off[b], rows, cfg.hidden()); }
  MatMap<T> layer(Block b, int l) {
    const int hid = cfg.hidden();
    return MatMap<T>(data.data() + off[b] + static_cast<std::size_t>(l) * hid * hid, hid, hid);
  }
  CMatMap<T> clayer(Block b, int l) const {
    const int hid = cfg.hidden();
    return CMatMap<T>(data.data() + off[b] + static_cast<std::size_t>(l) * hid * hid, hid, hid);
  }
};

inline Weights<double> init_weights(const ModelConfig& cfg) {
  Weights<double> w(cfg);
  Rng rng(cfg.seed);
  const int hid = cfg.hidden();
  const int half = hid / 2;

  std::vector<double> omega(static_cast<std::size_t>(half) * 2);
  for (auto& v : omega) v = rng.normal() / cfg.code_bandwidth;
  auto code = w.code();
  const double norm = cfg.code_gain / std::sqrt(static_cast<double>(half));
  for (int r = 0; r < cfg.grid; ++r)
    for (int c = 0; c < cfg.grid; ++c) {
      const int cell = r * cfg.grid + c;
      for (int j = 0; j < half; ++j) {
        const double z = r * omega[2 * j] + c * omega[2 * j + 1];
        code(cell, j) = std::cos(z) * norm;
        code(cell, half + j) = std::sin(z) * norm;
      }
    }

  auto fill = [&](auto m, double scale) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * scale;
  };
  fill(w.pos(), 0.5);
  fill(w.tok(), 0.5);
  const double s = 1.0 / std::sqrt(static_cast<double>(hid));
  for (int l = 0; l < cfg.layers; ++l) {
    fill(w.wq(l), s);
    fill(w.wk(l), s);
    fill(w.wv(l), s);
    fill(w.wo(l), s);
  }
  fill(w.unembed(), s);
  return w;
}

struct HookSpec {
  struct Target {
    HeadId head;
    std::vector<double> vec;
  };
  std::vector<Target> targets;
  double alpha = 1.0;

  void validate(const ModelConfig& cfg) const {
    for (const auto& t : targets) {
      if (t.head.layer < 0 || t.head.layer >= cfg.layers || t.head.head < 0 || t.head.head >= cfg.heads)
        throw SizeError("hook target out of model bounds");
      if (static_cast<int>(t.vec.size()) != cfg.head_dim) throw SizeError("hook vector length != head_dim");
    }
  }
};

template <class T>
struct ForwardOutput {
  Vec<T> logits;
  Mat<T> trace;  // row l*H + h: head output at the final position
};

template <class T>
struct Tape {
  std::vector<Mat<T>> x;     // residual stream entering each layer
  std::vector<Mat<T>> z;     // normalized input to attention
  std::vector<Vec<T>> rstd;  // per-row 1/std of each layer norm
  std::vector<Mat<T>> q, k, v, o;
  std::vector<std::vector<Mat<T>>> p;  // attention probabilities per layer, head
  RowVec<T> zf;
  T rstd_f{};
  std::vector<int> options;
};

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
void layer_norm_rows(const Mat<T>& x, Mat<T>& y, Vec<T>& rstd) {
  const auto n = x.cols();
  y.resize(x.rows(), n);
  rstd.resize(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T mu = x.row(i).mean();
    const auto c = x.row(i).array() - mu;
    const T var = (c * c).sum() / static_cast<T>(n);
    rstd(i) = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    y.row(i) = c * rstd(i);
  }
}

// dx for y = (x - mean) * rstd given dy, with y already computed.
template <class T, class DY, class Y>
RowVec<T> layer_norm_back(const DY& dy, const Y& y, T rstd) {
  const T n = static_cast<T>(dy.size());
  const T m1 = dy.sum() / n;
  const T m2 = dy.dot(y) / n;
  return (rstd * (dy.array() - m1 - y.array() * m2)).matrix();
}

template <class T>
std::pair<double, Vec<T>> cross_entropy(const Vec<T>& logits, int target) {
  const T mx = logits.maxCoeff();
  Vec<T> e = (logits.array() - mx).exp().matrix();
  const T sum = e.sum();
  Vec<T> grad = e / sum;
  grad(target) -= T(1);
  const double loss = static_cast<double>(std::log(sum) + mx - logits(target));
  return {loss, grad};
}

template <class T>
int argmax_lowest(const Vec<T>& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

template <class T>
class Model {
 public:
  Model() = default;
  explicit Model(Weights<T> w) : w_(std::move(w)) { w_.cfg.validate(); }

  const ModelConfig& config() const { return w_.cfg; }
  const Weights<T>& weights() const { return w_; }
  // Number of grad_wrt_visual evaluations so far (not synchronized).
  std::uint64_t grad_calls() const { return grad_calls_; }
  Weights<T>& weights() { return w_; }

  // frames: visual_tokens x cells raw values (token t = frame * channels + channel).
  Mat<T> embed(std::span<const double> frames, std::span<const int> text) const {
    const auto& c = w_.cfg;
    if (static_cast<int>(frames.size()) != c.frame_values()) throw SizeError("frame grid size mismatch");
    if (text.empty() || static_cast<int>(text.size()) > c.max_text) throw SizeError("text length out of range");
    const int m = c.visual_tokens();
    const int s = m + static_cast<int>(text.size());
    Mat<T> u(m, c.cells());
    const T center = static_cast<T>(c.pixel_center);
    const T inv = static_cast<T>(1.0 / c.pixel_scale);
    for (int i = 0; i < m * c.cells(); ++i) u.data()[i] = (static_cast<T>(frames[i]) - center) * inv;
    Mat<T> state(s, c.hidden());
    state.topRows(m).noalias() = u * w_.code();
    for (std::size_t j = 0; j < text.size(); ++j) {
      if (text[j] < 0 || text[j] >= c.vocab) throw SizeError("token id out of vocabulary");
      state.row(m + j) = w_.tok().row(text[j]);
    }
    state += w_.pos().topRows(s);
    return state;
  }

  ForwardOutput<T> forward(const Mat<T>& state, std::span<const int> options, const HookSpec* hooks = nullptr,
                           Tape<T>* tape = nullptr) const {
    const auto& c = w_.cfg;
    const int S = static_cast<int>(state.rows());
    const int H = c.heads, D = c.head_dim, hid = c.hidden();
    if (state.cols() != hid || S < 1 || S > c.max_seq()) throw SizeError("state shape mismatch");
    if (options.empty()) throw SizeError("no answer options");
    for (int o : options)
      if (o < 0 || o >= c.vocab) throw SizeError("option token out of vocabulary");

    // Per-head additive vectors, already scaled by alpha. Exactly-zero vectors are skipped so that
    // alpha = 0 or delta = 0 leaves the arithmetic untouched.
    Mat<T> add;
    std::vector<char> active;
    if (hooks) {
      hooks->validate(c);
      add = Mat<T>::Zero(c.layers * H, D);
      active.assign(static_cast<std::size_t>(c.layers) * H, 0);
      for (const auto& t : hooks->targets) {
        const int r = t.head.layer * H + t.head.head;
        for (int d = 0; d < D; ++d) add(r, d) += static_cast<T>(hooks->alpha * t.vec[d]);
      }
      for (int r = 0; r < c.layers * H; ++r) active[r] = add.row(r).cwiseAbs().maxCoeff() != T(0);
    }

    ForwardOutput<T> out;
    out.trace.resize(c.layers * H, D);
    if (tape) {
      *tape = Tape<T>{};
      tape->options.assign(options.begin(), options.end());
    }
    const T scale = T(1) / std::sqrt(static_cast<T>(D));
    Mat<T> x = state;
    Mat<T> z, q, k, v, o(S, hid), sc;
    Vec<T> rstd;
    for (int l = 0; l < c.layers; ++l) {
      layer_norm_rows(x, z, rstd);
      q.noalias() = z * w_.wq(l);
      k.noalias() = z * w_.wk(l);
      v.noalias() = z * w_.wv(l);
      std::vector<Mat<T>> probs;
      for (int h = 0; h < H; ++h) {
        sc.noalias() = q.middleCols(h * D, D) * k.middleCols(h * D, D).transpose();
        for (int i = 0; i < S; ++i) {
          T mx = -std::numeric_limits<T>::infinity();
          for (int j = 0; j <= i; ++j) {
            sc(i, j) *= scale;
            mx = std::max(mx, sc(i, j));
          }
          T sum = 0;
          for (int j = 0; j <= i; ++j) {
            sc(i, j) = std::exp(sc(i, j) - mx);
            sum += sc(i, j);
          }
          for (int j = 0; j <= i; ++j) sc(i, j) /= sum;
          for (int j = i + 1; j < S; ++j) sc(i, j) = 0;
        }
        o.middleCols(h * D, D).noalias() = sc * v.middleCols(h * D, D);
        if (hooks && active[l * H + h]) o.middleCols(h * D, D).rowwise() += add.row(l * H + h);
        out.trace.row(l * H + h) = o.block(S - 1, h * D, 1, D);
        if (tape) probs.push_back(sc);
      }
      if (tape) {
        tape->x.push_back(x);
        tape->z.push_back(z);
        tape->rstd.push_back(rstd);
        tape->q.push_back(q);
        tape->k.push_back(k);
        tape->v.push_back(v);
        tape->o.push_back(o);
        tape->p.push_back(std::move(probs));
      }
      x.noalias() += o * w_.wo(l);
      if (!x.allFinite()) throw NumericError("non-finite residual stream at layer " + std::to_string(l));
    }

    const RowVec<T> last = x.row(S - 1);
    const T mu = last.mean();
    const RowVec<T> cen = (last.array() - mu).matrix();
    const T rf = T(1) / std::sqrt(cen.squaredNorm() / static_cast<T>(hid) + static_cast<T>(kLayerNormEps));
    const RowVec<T> zf = cen * rf;
    out.logits.resize(options.size());
    for (std::size_t i = 0; i < options.size(); ++i) out.logits(i) = w_.unembed().row(options[i]).dot(zf);
    if (!out.logits.allFinite()) throw NumericError("non-finite logits");
    if (tape) {
      tape->zf = zf;
      tape->rstd_f = rf;
    }
    return out;
  }

  // Reverse pass. Returns d loss / d state; adds parameter gradients into grad when given.
  Mat<T> backward(const Tape<T>& tape, const Vec<T>& dlogits, std::vector<T>* grad = nullptr) const {
    const auto& c = w_.cfg;
    const int H = c.heads, D = c.head_dim, hid = c.hidden();
    const int S = static_cast<int>(tape.x[0].rows());
    const T scale = T(1) / std::sqrt(static_cast<T>(D));
    auto gmap = [&](int block, int rows, std::size_t extra = 0) {
      return MatMap<T>(grad->data() + w_.off[block] + extra, rows, hid);
    };

    RowVec<T> dzf = RowVec<T>::Zero(hid);
    for (std::size_t i = 0; i < tape.options.size(); ++i) {
      dzf += dlogits(i) * w_.unembed().row(tape.options[i]);
      if (grad) gmap(Weights<T>::kUnembed, c.vocab).row(tape.options[i]) += dlogits(i) * tape.zf;
    }
    Mat<T> dx = Mat<T>::Zero(S, hid);
    dx.row(S - 1) = layer_norm_back<T>(dzf, tape.zf, tape.rstd_f);

    Mat<T> dout, dq(S, hid), dk(S, hid), dv(S, hid), dp, ds, dz, dxn(S, hid);
    for (int l = c.layers - 1; l >= 0; --l) {
      const std::size_t loff = static_cast<std::size_t>(l) * hid * hid;
      if (grad) gmap(Weights<T>::kOut, hid, loff).noalias() += tape.o[l].transpose() * dx;
      dout.noalias() = dx * w_.wo(l).transpose();
      for (int h = 0; h < H; ++h) {
        const Mat<T>& P = tape.p[l][h];
        const auto dOh = dout.middleCols(h * D, D);
        dp.noalias() = dOh * tape.v[l].middleCols(h * D, D).transpose();
        dv.middleCols(h * D, D).noalias() = P.transpose() * dOh;
        ds.resize(S, S);
        for (int i = 0; i < S; ++i) {
          T dot = 0;
          for (int j = 0; j <= i; ++j) dot += dp(i, j) * P(i, j);
          for (int j = 0; j <= i; ++j) ds(i, j) = P(i, j) * (dp(i, j) - dot) * scale;
          for (int j = i + 1; j < S; ++j) ds(i, j) = 0;
        }
        dq.middleCols(h * D, D).noalias() = ds * tape.k[l].middleCols(h * D, D);
        dk.middleCols(h * D, D).noalias() = ds.transpose() * tape.q[l].middleCols(h * D, D);
      }
      if (grad) {
        gmap(Weights<T>::kQuery, hid, loff).noalias() += tape.z[l].transpose() * dq;
        gmap(Weights<T>::kKey, hid, loff).noalias() += tape.z[l].transpose() * dk;
        gmap(Weights<T>::kValue, hid, loff).noalias() += tape.z[l].transpose() * dv;
      }
      dz.noalias() = dq * w_.wq(l).transpose();
      dz.noalias() += dk * w_.wk(l).transpose();
      dz.noalias() += dv * w_.wv(l).transpose();
      for (int i = 0; i < S; ++i) dxn.row(i) = layer_norm_back<T>(dz.row(i), tape.z[l].row(i), tape.rstd[l](i));
      dx += dxn;
    }
    return dx;
  }

  // Gradient of the embedding with respect to raw frame values; adds pos/tok gradients into grad.
  std::vector<double> embed_backward(const Mat<T>& dstate, std::span<const int> text, std::vector<T>* grad = nullptr,
                                     bool want_frames = true) const {
    const auto& c = w_.cfg;
    const int m = c.visual_tokens();
    const int hid = c.hidden();
    if (grad) {
      MatMap<T> gp(grad->data() + w_.off[Weights<T>::kPos], c.max_seq(), hid);
      gp.topRows(dstate.rows()) += dstate;
      MatMap<T> gt(grad->data() + w_.off[Weights<T>::kTok], c.vocab, hid);
      for (std::size_t j = 0; j < text.size(); ++j) gt.row(text[j]) += dstate.row(m + j);
    }
    std::vector<double> df;
    if (want_frames) {
      Mat<T> g = dstate.topRows(m) * w_.code().transpose();
      const T inv = static_cast<T>(1.0 / c.pixel_scale);
      df.resize(static_cast<std::size_t>(c.frame_values()));
      for (std::size_t i = 0; i < df.size(); ++i) df[i] = static_cast<double>(g.data()[i] * inv);
    }
    return df;
  }

  Vec<T> logits(std::span<const double> frames, std::span<const int> text, std::span<const int> options,
                const HookSpec* hooks = nullptr) const {
    return forward(embed(frames, text), options, hooks).logits;
  }

  struct VisualGradient {
    double loss = 0;
    Vec<T> logits;
    std::vector<double> grad;
  };

  // Cross-entropy on option `target`, differentiated with respect to the raw frame values.
  VisualGradient grad_wrt_visual(std::span<const double> frames, std::span<const int> text,
                                 std::span<const int> options, int target) const {
    if (target < 0 || target >= static_cast<int>(options.size())) throw SizeError("target option out of range");
    ++grad_calls_;
    Tape<T> tape;
    auto out = forward(embed(frames, text), options, nullptr, &tape);
    auto [loss, dl] = cross_entropy(out.logits, target);
    Mat<T> ds = backward(tape, dl);
    VisualGradient r;
    r.loss = loss;
    r.logits = out.logits;
    r.grad = embed_backward(ds, text, nullptr, true);
    return r;
  }

 private:
  Weights<T> w_;
  mutable std::uint64_t grad_calls_ = 0;
};

inline constexpr char kCheckpointMagic[9] = "VTOMCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_config(BinWriter& w, const ModelConfig& c) {
  for (int v : {c.layers, c.heads, c.head_dim, c.vocab, c.visual_channels, c.frames, c.grid, c.max_text})
    w.put<std::int32_t>(v);
  w.put<std::uint64_t>(c.seed);
  for (double v : {c.pixel_center, c.pixel_scale, c.code_bandwidth, c.code_gain}) w.put(v);
}

inline ModelConfig read_config(BinReader& r) {
  ModelConfig c;
  for (int* p : {&c.layers, &c.heads, &c.head_dim, &c.vocab, &c.visual_channels, &c.frames, &c.grid, &c.max_text})
    *p = r.get<std::int32_t>();
  c.seed = r.get<std::uint64_t>();
  for (double* p : {&c.pixel_center, &c.pixel_scale, &c.code_bandwidth, &c.code_gain}) *p = r.get<double>();
  c.validate();
  return c;
}

inline void save_checkpoint(const std::string& path, const Weights<double>& w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  BinWriter bw(os);
  bw.magic(kCheckpointMagic);
  bw.put<std::uint32_t>(kCheckpointVersion);
  write_config(bw, w.cfg);
  bw.put<std::uint64_t>(w.data.size());
  bw.put_array(w.data.data(), w.data.size());
  if (!os) throw FormatError("write failed: " + path);
}

inline Weights<double> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  BinReader br(is);
  br.expect_magic(kCheckpointMagic);
  const auto ver = br.get<std::uint32_t>();
  if (ver != kCheckpointVersion) throw FormatError("checkpoint version " + std::to_string(ver) + " unsupported");
  Weights<double> w(read_config(br));
  const auto n = br.get<std::uint64_t>();
  if (n != w.data.size()) throw FormatError("checkpoint weight count does not match config");
  br.get_array(w.data.data(), w.data.size());
  br.expect_end();
  return w;
}

}  // namespace vtom
