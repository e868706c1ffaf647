#pragma once

// Small pre-LayerNorm transformer encoder with a 3-way classification head on
// [CLS] and a weight-tied masked-LM head. Forward, loss terms, exact backward
// and the SGD update all live here.
//
// The model is templated on the scalar type: training runs in float, the
// finite-difference gradient check runs the same code in double.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mddeval/tokenizer.hpp"

namespace mddeval {

struct EncoderConfig {
  size_t vocab_size = 0;
  size_t max_seq_len = 128;
  size_t dim = 128;
  size_t layers = 2;
  size_t heads = 4;
  size_t ffn_dim = 512;
  double init_std = 0.02;  // embeddings; weight matrices use 1/sqrt(fan_in)

  bool operator==(const EncoderConfig&) const = default;

  void validate() const {
    if (vocab_size <= special::count) throw validation_error("encoder vocab_size must exceed the special tokens");
    if (dim == 0 || heads == 0 || dim % heads != 0) throw validation_error("encoder dim must be a positive multiple of heads");
    if (layers == 0 || ffn_dim == 0) throw validation_error("encoder layers and ffn_dim must be positive");
    if (max_seq_len < 8) throw validation_error("encoder max_seq_len must be at least 8");
  }
};

inline void to_json(json& j, const EncoderConfig& c) {
  j = json{{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"dim", c.dim},
           {"layers", c.layers},         {"heads", c.heads},             {"ffn_dim", c.ffn_dim},
           {"init_std", c.init_std}};
}

inline void from_json(const json& j, EncoderConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("dim").get_to(c.dim);
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("ffn_dim").get_to(c.ffn_dim);
  j.at("init_std").get_to(c.init_std);
}

// ---------------------------------------------------------------------------
// Parameter layout: one flat array, addressed by named blocks.
// ---------------------------------------------------------------------------

struct ParamBlock {
  std::string name;
  size_t rows = 0;
  size_t cols = 0;
  size_t offset = 0;
  size_t size() const { return rows * cols; }
};

struct LayerOffsets {
  size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

class ParamLayout {
 public:
  explicit ParamLayout(const EncoderConfig& c) {
    const size_t d = c.dim, f = c.ffn_dim;
    tok = add("tok_emb", c.vocab_size, d);
    pos = add("pos_emb", c.max_seq_len, d);
    seg = add("seg_emb", 2, d);
    for (size_t l = 0; l < c.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      LayerOffsets o{};
      o.ln1_g = add(p + "ln1.gamma", 1, d);
      o.ln1_b = add(p + "ln1.beta", 1, d);
      o.wq = add(p + "attn.wq", d, d);
      o.bq = add(p + "attn.bq", 1, d);
      o.wk = add(p + "attn.wk", d, d);
      o.bk = add(p + "attn.bk", 1, d);
      o.wv = add(p + "attn.wv", d, d);
      o.bv = add(p + "attn.bv", 1, d);
      o.wo = add(p + "attn.wo", d, d);
      o.bo = add(p + "attn.bo", 1, d);
      o.ln2_g = add(p + "ln2.gamma", 1, d);
      o.ln2_b = add(p + "ln2.beta", 1, d);
      o.w1 = add(p + "ffn.w1", d, f);
      o.b1 = add(p + "ffn.b1", 1, f);
      o.w2 = add(p + "ffn.w2", f, d);
      o.b2 = add(p + "ffn.b2", 1, d);
      layer.push_back(o);
    }
    lnf_g = add("final_ln.gamma", 1, d);
    lnf_b = add("final_ln.beta", 1, d);
    cls_w = add("cls.w", d, kNumClasses);
    cls_b = add("cls.b", 1, kNumClasses);
    mlm_b = add("mlm.bias", 1, c.vocab_size);
  }

  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  size_t total() const { return total_; }

  const ParamBlock& block(std::string_view name) const {
    for (const auto& b : blocks_)
      if (b.name == name) return b;
    throw validation_error("no parameter block named '" + std::string(name) + "'");
  }

  size_t tok, pos, seg, lnf_g, lnf_b, cls_w, cls_b, mlm_b;
  std::vector<LayerOffsets> layer;

 private:
  size_t add(std::string name, size_t rows, size_t cols) {
    blocks_.push_back({std::move(name), rows, cols, total_});
    total_ += rows * cols;
    return blocks_.back().offset;
  }

  std::vector<ParamBlock> blocks_;
  size_t total_ = 0;
};

/// Which objectives have updated the weights; the infiller requires mlm.
struct TrainingInfo {
  uint64_t ce_steps = 0;
  uint64_t mlm_steps = 0;
  bool operator==(const TrainingInfo&) const = default;
};

template <typename T>
class BasicEncoder {
 public:
  using Scalar = T;

  explicit BasicEncoder(EncoderConfig config) : config_((config.validate(), config)), layout_(config_), params_(layout_.total(), T(0)) {
    for (size_t i = 0; i < config_.layers; ++i) {
      fill(layout_.layer[i].ln1_g, config_.dim, T(1));
      fill(layout_.layer[i].ln2_g, config_.dim, T(1));
    }
    fill(layout_.lnf_g, config_.dim, T(1));
  }

  /// Seeded initialization. The classifier head stays at zero so an
  /// untrained model predicts the uniform distribution.
  void initialize(uint64_t seed) {
    Rng rng(seed);
    const size_t d = config_.dim, f = config_.ffn_dim;
    auto normal = [&](size_t off, size_t n, double std) {
      for (size_t i = 0; i < n; ++i) params_[off + i] = static_cast<T>(rng.normal() * std);
    };
    normal(layout_.tok, config_.vocab_size * d, config_.init_std);
    normal(layout_.pos, config_.max_seq_len * d, config_.init_std);
    normal(layout_.seg, 2 * d, config_.init_std);
    for (const auto& o : layout_.layer) {
      const double sd = 1.0 / std::sqrt(static_cast<double>(d));
      normal(o.wq, d * d, sd);
      normal(o.wk, d * d, sd);
      normal(o.wv, d * d, sd);
      normal(o.wo, d * d, sd);
      normal(o.w1, d * f, sd);
      normal(o.w2, f * d, 1.0 / std::sqrt(static_cast<double>(f)));
    }
  }

  const EncoderConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  const T* at(size_t offset) const { return params_.data() + offset; }
  T* at(size_t offset) { return params_.data() + offset; }

  TrainingInfo& info() { return info_; }
  const TrainingInfo& info() const { return info_; }

  template <typename U>
  BasicEncoder<U> cast() const {
    BasicEncoder<U> out(config_);
    std::transform(params_.begin(), params_.end(), out.params().begin(), [](T v) { return static_cast<U>(v); });
    out.info() = info_;
    return out;
  }

  bool all_finite() const {
    return std::all_of(params_.begin(), params_.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  void fill(size_t off, size_t n, T v) { std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(off), n, v); }

  EncoderConfig config_;
  ParamLayout layout_;
  std::vector<T> params_;
  TrainingInfo info_;
};

using EncoderModel = BasicEncoder<float>;

/// Gradient buffer with the same layout as the model parameters.
template <typename T>
struct Gradients {
  std::vector<T> data;

  explicit Gradients(size_t n = 0) : data(n, T(0)) {}
  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  double norm() const {
    double s = 0.0;
    for (T v : data) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
  }
};

// ---------------------------------------------------------------------------
// Dense helpers (row-major, weights stored [in x out])
// ---------------------------------------------------------------------------

namespace kernels {

/// y[rows x out] = x[rows x in] W[in x out] + b
template <typename T>
void affine(const T* x, const T* w, const T* b, T* y, size_t rows, size_t in, size_t out) {
  for (size_t r = 0; r < rows; ++r) {
    T* yr = y + r * out;
    std::copy(b, b + out, yr);
    const T* xr = x + r * in;
    for (size_t i = 0; i < in; ++i) {
      const T xi = xr[i];
      const T* wi = w + i * out;
      for (size_t j = 0; j < out; ++j) yr[j] += xi * wi[j];
    }
  }
}

/// Accumulates dW += x^T dy, db += colsum(dy), dx = dy W^T (dx may be null).
template <typename T>
void affine_backward(const T* x, const T* w, const T* dy, T* dw, T* db, T* dx, size_t rows, size_t in, size_t out) {
  for (size_t r = 0; r < rows; ++r) {
    const T* dyr = dy + r * out;
    const T* xr = x + r * in;
    for (size_t j = 0; j < out; ++j) db[j] += dyr[j];
    for (size_t i = 0; i < in; ++i) {
      const T xi = xr[i];
      T* dwi = dw + i * out;
      for (size_t j = 0; j < out; ++j) dwi[j] += xi * dyr[j];
    }
    if (dx) {
      T* dxr = dx + r * in;
      for (size_t i = 0; i < in; ++i) {
        const T* wi = w + i * out;
        T acc = 0;
        for (size_t j = 0; j < out; ++j) acc += wi[j] * dyr[j];
        dxr[i] = acc;
      }
    }
  }
}

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
void layer_norm(const T* x, const T* g, const T* b, T* xhat, T* rstd, T* y, size_t rows, size_t d) {
  for (size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    double mean = 0.0;
    for (size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(d);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + kLayerNormEps));
    rstd[r] = rs;
    for (size_t i = 0; i < d; ++i) {
      const T h = static_cast<T>((xr[i] - mean)) * rs;
      xhat[r * d + i] = h;
      y[r * d + i] = g[i] * h + b[i];
    }
  }
}

/// dx = LN'(dy); accumulates dg, db.
template <typename T>
void layer_norm_backward(const T* xhat, const T* rstd, const T* g, const T* dy, T* dg, T* db, T* dx, size_t rows, size_t d) {
  for (size_t r = 0; r < rows; ++r) {
    const T* hr = xhat + r * d;
    const T* dyr = dy + r * d;
    T mean_dh = 0, mean_dh_h = 0;
    for (size_t i = 0; i < d; ++i) {
      dg[i] += dyr[i] * hr[i];
      db[i] += dyr[i];
      const T dh = dyr[i] * g[i];
      mean_dh += dh;
      mean_dh_h += dh * hr[i];
    }
    mean_dh /= static_cast<T>(d);
    mean_dh_h /= static_cast<T>(d);
    for (size_t i = 0; i < d; ++i) dx[r * d + i] = rstd[r] * (dyr[i] * g[i] - mean_dh - hr[i] * mean_dh_h);
  }
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename T>
T gelu(T x) {
  const T t = std::tanh(static_cast<T>(kGeluC) * (x + static_cast<T>(0.044715) * x * x * x));
  return static_cast<T>(0.5) * x * (1 + t);
}

template <typename T>
T gelu_grad(T x) {
  const T u = static_cast<T>(kGeluC) * (x + static_cast<T>(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = static_cast<T>(kGeluC) * (1 + static_cast<T>(3 * 0.044715) * x * x);
  return static_cast<T>(0.5) * (1 + t) + static_cast<T>(0.5) * x * (1 - t * t) * du;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct ForwardOutput {
  std::array<double, kNumClasses> class_logits{};
  std::vector<std::vector<double>> mlm_logits;  // one vocab-sized row per requested position
};

template <typename T>
struct LayerCache {
  std::vector<T> x_in, ln1_hat, ln1_rstd, a, q, k, v, probs, ctx, x_mid, ln2_hat, ln2_rstd, b, h_pre, h_act;
};

/// Activations kept for backward. Reusable across calls to avoid allocation.
template <typename T>
struct ForwardCache {
  std::vector<TokenId> ids;
  std::vector<Segment> segments;
  std::vector<size_t> mlm_positions;
  std::vector<LayerCache<T>> layers;
  std::vector<T> x_final, lnf_hat, lnf_rstd, h_final;
};

namespace detail {
template <typename T>
void resize(std::vector<T>& v, size_t n) {
  v.assign(n, T(0));
}
}  // namespace detail

/// Runs the encoder over `ids`. MLM logits are produced only for
/// `mlm_positions`. Inference is deterministic (no dropout).
template <typename T>
ForwardOutput forward(const BasicEncoder<T>& model, std::span<const TokenId> ids, std::span<const Segment> segments,
                      std::span<const size_t> mlm_positions, ForwardCache<T>& cache) {
  const auto& cfg = model.config();
  const auto& L = model.layout();
  const size_t n = ids.size(), d = cfg.dim, f = cfg.ffn_dim, H = cfg.heads, dh = d / H;
  if (n == 0 || n > cfg.max_seq_len) throw validation_error("sequence length " + std::to_string(n) + " outside [1, max_seq_len]");
  if (segments.size() != n) throw validation_error("segment mask length mismatch");
  for (TokenId id : ids)
    if (id < 0 || static_cast<size_t>(id) >= cfg.vocab_size) throw validation_error("token id " + std::to_string(id) + " out of vocabulary range");

  cache.ids.assign(ids.begin(), ids.end());
  cache.segments.assign(segments.begin(), segments.end());
  cache.mlm_positions.assign(mlm_positions.begin(), mlm_positions.end());
  cache.layers.resize(cfg.layers);

  std::vector<T> x(n * d);
  for (size_t t = 0; t < n; ++t) {
    const T* e = model.at(L.tok + static_cast<size_t>(ids[t]) * d);
    const T* p = model.at(L.pos + t * d);
    const T* s = model.at(L.seg + static_cast<size_t>(segments[t]) * d);
    for (size_t i = 0; i < d; ++i) x[t * d + i] = e[i] + p[i] + s[i];
  }

  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (size_t l = 0; l < cfg.layers; ++l) {
    auto& c = cache.layers[l];
    const auto& o = L.layer[l];
    c.x_in = x;
    detail::resize(c.ln1_hat, n * d);
    detail::resize(c.ln1_rstd, n);
    detail::resize(c.a, n * d);
    kernels::layer_norm(c.x_in.data(), model.at(o.ln1_g), model.at(o.ln1_b), c.ln1_hat.data(), c.ln1_rstd.data(), c.a.data(), n, d);
    detail::resize(c.q, n * d);
    detail::resize(c.k, n * d);
    detail::resize(c.v, n * d);
    kernels::affine(c.a.data(), model.at(o.wq), model.at(o.bq), c.q.data(), n, d, d);
    kernels::affine(c.a.data(), model.at(o.wk), model.at(o.bk), c.k.data(), n, d, d);
    kernels::affine(c.a.data(), model.at(o.wv), model.at(o.bv), c.v.data(), n, d, d);
    detail::resize(c.probs, H * n * n);
    detail::resize(c.ctx, n * d);
    for (size_t h = 0; h < H; ++h) {
      for (size_t i = 0; i < n; ++i) {
        T* pr = c.probs.data() + (h * n + i) * n;
        const T* qi = c.q.data() + i * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (size_t j = 0; j < n; ++j) {
          const T* kj = c.k.data() + j * d + h * dh;
          T s = 0;
          for (size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
          pr[j] = s * scale;
          mx = std::max(mx, pr[j]);
        }
        T z = 0;
        for (size_t j = 0; j < n; ++j) {
          pr[j] = std::exp(pr[j] - mx);
          z += pr[j];
        }
        T* ci = c.ctx.data() + i * d + h * dh;
        for (size_t j = 0; j < n; ++j) {
          pr[j] /= z;
          const T* vj = c.v.data() + j * d + h * dh;
          for (size_t e = 0; e < dh; ++e) ci[e] += pr[j] * vj[e];
        }
      }
    }
    std::vector<T> att(n * d);
    kernels::affine(c.ctx.data(), model.at(o.wo), model.at(o.bo), att.data(), n, d, d);
    c.x_mid.resize(n * d);
    for (size_t i = 0; i < n * d; ++i) c.x_mid[i] = c.x_in[i] + att[i];

    detail::resize(c.ln2_hat, n * d);
    detail::resize(c.ln2_rstd, n);
    detail::resize(c.b, n * d);
    kernels::layer_norm(c.x_mid.data(), model.at(o.ln2_g), model.at(o.ln2_b), c.ln2_hat.data(), c.ln2_rstd.data(), c.b.data(), n, d);
    detail::resize(c.h_pre, n * f);
    kernels::affine(c.b.data(), model.at(o.w1), model.at(o.b1), c.h_pre.data(), n, d, f);
    c.h_act.resize(n * f);
    for (size_t i = 0; i < n * f; ++i) c.h_act[i] = kernels::gelu(c.h_pre[i]);
    std::vector<T> ffn(n * d);
    kernels::affine(c.h_act.data(), model.at(o.w2), model.at(o.b2), ffn.data(), n, f, d);
    for (size_t i = 0; i < n * d; ++i) x[i] = c.x_mid[i] + ffn[i];
  }

  cache.x_final = x;
  detail::resize(cache.lnf_hat, n * d);
  detail::resize(cache.lnf_rstd, n);
  detail::resize(cache.h_final, n * d);
  kernels::layer_norm(cache.x_final.data(), model.at(L.lnf_g), model.at(L.lnf_b), cache.lnf_hat.data(), cache.lnf_rstd.data(),
                      cache.h_final.data(), n, d);

  ForwardOutput out;
  const T* h0 = cache.h_final.data();
  const T* wc = model.at(L.cls_w);
  const T* bc = model.at(L.cls_b);
  for (int k = 0; k < kNumClasses; ++k) {
    double s = bc[k];
    for (size_t i = 0; i < d; ++i) s += static_cast<double>(h0[i]) * static_cast<double>(wc[i * kNumClasses + k]);
    out.class_logits[static_cast<size_t>(k)] = s;
  }

  const T* emb = model.at(L.tok);
  const T* mb = model.at(L.mlm_b);
  out.mlm_logits.reserve(mlm_positions.size());
  for (size_t p : mlm_positions) {
    if (p >= n) throw validation_error("mlm position out of range");
    const T* hp = cache.h_final.data() + p * d;
    std::vector<double> row(cfg.vocab_size);
    for (size_t v = 0; v < cfg.vocab_size; ++v) {
      const T* ev = emb + v * d;
      T s = mb[v];
      for (size_t i = 0; i < d; ++i) s += hp[i] * ev[i];
      row[v] = s;
    }
    out.mlm_logits.push_back(std::move(row));
  }
  return out;
}

template <typename T>
ForwardOutput forward(const BasicEncoder<T>& model, const EncodedPair& encoded) {
  ForwardCache<T> cache;
  return forward(model, std::span<const TokenId>(encoded.ids), std::span<const Segment>(encoded.segments), {}, cache);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Accumulates into `grads` the gradient of sum_k dclass[k]*logit_k +
/// sum_p sum_v dmlm[p][v]*mlm_logit[p][v] through the cached forward pass.
template <typename T>
void backward(const BasicEncoder<T>& model, const ForwardCache<T>& cache, std::span<const double> dclass,
              const std::vector<std::vector<double>>& dmlm, Gradients<T>& grads) {
  const auto& cfg = model.config();
  const auto& L = model.layout();
  const size_t n = cache.ids.size(), d = cfg.dim, f = cfg.ffn_dim, H = cfg.heads, dh = d / H;
  T* g = grads.data.data();

  std::vector<T> dh_final(n * d, T(0));
  {
    const T* h0 = cache.h_final.data();
    const T* wc = model.at(L.cls_w);
    T* dwc = g + L.cls_w;
    T* dbc = g + L.cls_b;
    for (int k = 0; k < kNumClasses; ++k) {
      const T dk = static_cast<T>(dclass[static_cast<size_t>(k)]);
      if (dk == T(0)) continue;
      dbc[k] += dk;
      for (size_t i = 0; i < d; ++i) {
        dwc[i * kNumClasses + k] += h0[i] * dk;
        dh_final[i] += wc[i * kNumClasses + k] * dk;
      }
    }
  }
  {
    const T* emb = model.at(L.tok);
    T* demb = g + L.tok;
    T* dmb = g + L.mlm_b;
    for (size_t pi = 0; pi < cache.mlm_positions.size(); ++pi) {
      const size_t p = cache.mlm_positions[pi];
      const T* hp = cache.h_final.data() + p * d;
      T* dhp = dh_final.data() + p * d;
      const auto& row = dmlm.at(pi);
      for (size_t v = 0; v < cfg.vocab_size; ++v) {
        const T dv = static_cast<T>(row[v]);
        if (dv == T(0)) continue;
        dmb[v] += dv;
        const T* ev = emb + v * d;
        T* dev = demb + v * d;
        for (size_t i = 0; i < d; ++i) {
          dev[i] += hp[i] * dv;
          dhp[i] += ev[i] * dv;
        }
      }
    }
  }

  std::vector<T> dx(n * d);
  kernels::layer_norm_backward(cache.lnf_hat.data(), cache.lnf_rstd.data(), model.at(L.lnf_g), dh_final.data(), g + L.lnf_g,
                               g + L.lnf_b, dx.data(), n, d);

  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<T> dh_act(n * f), dbuf(n * d), dln(n * d), dctx(n * d), dq(n * d), dk(n * d), dv(n * d), dp(n), tmp(n * d);
  for (size_t l = cfg.layers; l-- > 0;) {
    const auto& c = cache.layers[l];
    const auto& o = L.layer[l];

    // feed-forward branch: x_out = x_mid + W2 gelu(W1 LN2(x_mid))
    kernels::affine_backward(c.h_act.data(), model.at(o.w2), dx.data(), g + o.w2, g + o.b2, dh_act.data(), n, f, d);
    for (size_t i = 0; i < n * f; ++i) dh_act[i] *= kernels::gelu_grad(c.h_pre[i]);
    kernels::affine_backward(c.b.data(), model.at(o.w1), dh_act.data(), g + o.w1, g + o.b1, dbuf.data(), n, d, f);
    kernels::layer_norm_backward(c.ln2_hat.data(), c.ln2_rstd.data(), model.at(o.ln2_g), dbuf.data(), g + o.ln2_g, g + o.ln2_b,
                                 dln.data(), n, d);
    for (size_t i = 0; i < n * d; ++i) dx[i] += dln[i];  // now d(x_mid)

    // attention branch: x_mid = x_in + Wo attn(LN1(x_in))
    kernels::affine_backward(c.ctx.data(), model.at(o.wo), dx.data(), g + o.wo, g + o.bo, dctx.data(), n, d, d);
    std::fill(dq.begin(), dq.end(), T(0));
    std::fill(dk.begin(), dk.end(), T(0));
    std::fill(dv.begin(), dv.end(), T(0));
    for (size_t h = 0; h < H; ++h) {
      for (size_t i = 0; i < n; ++i) {
        const T* pr = c.probs.data() + (h * n + i) * n;
        const T* dci = dctx.data() + i * d + h * dh;
        T dot = 0;
        for (size_t j = 0; j < n; ++j) {
          const T* vj = c.v.data() + j * d + h * dh;
          T* dvj = dv.data() + j * d + h * dh;
          T s = 0;
          for (size_t e = 0; e < dh; ++e) {
            s += dci[e] * vj[e];
            dvj[e] += pr[j] * dci[e];
          }
          dp[j] = s;
          dot += pr[j] * s;
        }
        const T* qi = c.q.data() + i * d + h * dh;
        T* dqi = dq.data() + i * d + h * dh;
        for (size_t j = 0; j < n; ++j) {
          const T ds = pr[j] * (dp[j] - dot) * scale;
          if (ds == T(0)) continue;
          const T* kj = c.k.data() + j * d + h * dh;
          T* dkj = dk.data() + j * d + h * dh;
          for (size_t e = 0; e < dh; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
          }
        }
      }
    }
    kernels::affine_backward(c.a.data(), model.at(o.wq), dq.data(), g + o.wq, g + o.bq, dbuf.data(), n, d, d);
    kernels::affine_backward(c.a.data(), model.at(o.wk), dk.data(), g + o.wk, g + o.bk, tmp.data(), n, d, d);
    for (size_t i = 0; i < n * d; ++i) dbuf[i] += tmp[i];
    kernels::affine_backward(c.a.data(), model.at(o.wv), dv.data(), g + o.wv, g + o.bv, tmp.data(), n, d, d);
    for (size_t i = 0; i < n * d; ++i) dbuf[i] += tmp[i];
    kernels::layer_norm_backward(c.ln1_hat.data(), c.ln1_rstd.data(), model.at(o.ln1_g), dbuf.data(), g + o.ln1_g, g + o.ln1_b,
                                 dln.data(), n, d);
    for (size_t i = 0; i < n * d; ++i) dx[i] += dln[i];  // now d(x_in)
  }

  for (size_t t = 0; t < n; ++t) {
    T* de = g + L.tok + static_cast<size_t>(cache.ids[t]) * d;
    T* dpz = g + L.pos + t * d;
    T* ds = g + L.seg + static_cast<size_t>(cache.segments[t]) * d;
    for (size_t i = 0; i < d; ++i) {
      de[i] += dx[t * d + i];
      dpz[i] += dx[t * d + i];
      ds[i] += dx[t * d + i];
    }
  }
}

// ---------------------------------------------------------------------------
// Loss terms. Each returns the value and its gradient w.r.t. the logits it
// differentiates.
// ---------------------------------------------------------------------------

using SoftLabelProbs = std::array<double, kNumClasses>;

template <typename Range>
std::vector<double> softmax(const Range& logits) {
  std::vector<double> p(std::begin(logits), std::end(logits));
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : p) v /= z;
  return p;
}

template <typename Range>
std::vector<double> log_softmax(const Range& logits) {
  std::vector<double> p(std::begin(logits), std::end(logits));
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double v : p) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  for (double& v : p) v -= lz;
  return p;
}

inline SoftLabelProbs class_probs(const std::array<double, kNumClasses>& logits) {
  auto p = softmax(logits);
  return {p[0], p[1], p[2]};
}

inline SoftLabelProbs one_hot(PairLabel label) {
  SoftLabelProbs t{};
  t[static_cast<size_t>(label)] = 1.0;
  return t;
}

struct LossValue {
  double value = 0.0;
  std::array<double, kNumClasses> grad{};
};

/// -sum_k target_k log softmax(logits)_k
inline LossValue loss_ce(const std::array<double, kNumClasses>& logits, const SoftLabelProbs& target) {
  const auto lp = log_softmax(logits);
  LossValue out;
  for (size_t k = 0; k < kNumClasses; ++k) {
    out.value -= target[k] * lp[k];
    out.grad[k] = std::exp(lp[k]) - target[k];
  }
  return out;
}

inline LossValue loss_ce(const std::array<double, kNumClasses>& logits, PairLabel target) { return loss_ce(logits, one_hot(target)); }

enum class KlDirection {
  clean_to_noisy,  // KL(p_clean || p_noisy)
  symmetric,       // KL(p_clean || p_noisy) + KL(p_noisy || p_clean)
};

/// Consistency term. The clean distribution is a fixed reference; the
/// returned gradient is w.r.t. the noisy logits only.
inline LossValue loss_kl(const std::array<double, kNumClasses>& clean, const std::array<double, kNumClasses>& noisy,
                         KlDirection direction = KlDirection::clean_to_noisy) {
  const auto lp = log_softmax(clean);
  const auto lq = log_softmax(noisy);
  LossValue out;
  double reverse = 0.0;
  for (size_t k = 0; k < kNumClasses; ++k) {
    const double p = std::exp(lp[k]), q = std::exp(lq[k]);
    out.value += p * (lp[k] - lq[k]);
    out.grad[k] = q - p;
    reverse += q * (lq[k] - lp[k]);
  }
  if (direction == KlDirection::symmetric) {
    out.value += reverse;
    for (size_t k = 0; k < kNumClasses; ++k) out.grad[k] += std::exp(lq[k]) * (lq[k] - lp[k] - reverse);
  }
  return out;
}

struct MlmLoss {
  double value = 0.0;
  std::vector<std::vector<double>> grad;  // per target position, vocab-sized
};

/// Mean cross-entropy over masked positions; zero when there are none.
inline MlmLoss loss_mlm(const std::vector<std::vector<double>>& mlm_logits, std::span<const TokenId> targets) {
  MlmLoss out;
  if (targets.empty()) return out;
  if (mlm_logits.size() != targets.size()) throw validation_error("mlm logits/targets size mismatch");
  const double inv = 1.0 / static_cast<double>(targets.size());
  out.grad.reserve(targets.size());
  for (size_t i = 0; i < targets.size(); ++i) {
    auto lp = log_softmax(mlm_logits[i]);
    const auto t = static_cast<size_t>(targets[i]);
    out.value -= lp.at(t) * inv;
    for (double& v : lp) v = std::exp(v) * inv;
    lp[t] -= inv;
    out.grad.push_back(std::move(lp));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batched gradient of the composite objective
// ---------------------------------------------------------------------------

struct LossSpec {
  bool ce = true;
  bool kl = false;
  bool mlm = false;
  double ce_weight = 1.0;
  double kl_weight = 1.0;
  double mlm_weight = 1.0;
  KlDirection kl_direction = KlDirection::clean_to_noisy;
};

/// One training example: the clean pair with its (soft) target, plus the
/// optional noisy re-encoding (consistency) and masked copy (MLM).
struct TrainExample {
  EncodedPair clean;
  SoftLabelProbs target{};
  std::optional<EncodedPair> noisy;
  std::optional<MaskedSequence> masked;
};

struct LossBreakdown {
  double ce = 0.0;
  double kl = 0.0;
  double mlm = 0.0;
  double total = 0.0;
  double target_entropy = 0.0;  // mean entropy of the CE targets
  size_t correct = 0;           // argmax(clean logits) == argmax(target)
  size_t count = 0;
};

inline int argmax_class(const std::array<double, kNumClasses>& v) {
  int best = 0;
  for (int k = 1; k < kNumClasses; ++k)
    if (v[static_cast<size_t>(k)] > v[static_cast<size_t>(best)]) best = k;
  return best;
}

template <typename T>
void check_finite(const BasicEncoder<T>& model, const Gradients<T>& grads) {
  for (const auto& b : model.layout().blocks()) {
    for (size_t i = 0; i < b.size(); ++i)
      if (!std::isfinite(grads.data[b.offset + i])) throw Error(ErrorKind::numerical, "non-finite gradient in parameter block " + b.name);
  }
}

/// Gradient of the mean (over the batch) of the enabled, weighted loss terms.
/// Per-example contributions are accumulated in batch order.
template <typename T>
LossBreakdown compute_gradients(const BasicEncoder<T>& model, std::span<const TrainExample> batch, const LossSpec& spec,
                                Gradients<T>& grads) {
  grads.data.assign(model.params().size(), T(0));
  LossBreakdown lb;
  if (batch.empty()) return lb;
  const double inv = 1.0 / static_cast<double>(batch.size());
  ForwardCache<T> cache;
  const std::vector<std::vector<double>> no_mlm;
  for (const auto& ex : batch) {
    const auto clean = forward(model, std::span<const TokenId>(ex.clean.ids), std::span<const Segment>(ex.clean.segments), {}, cache);
    ++lb.count;
    if (argmax_class(clean.class_logits) == argmax_class(ex.target)) ++lb.correct;
    for (double p : ex.target)
      if (p > 0) lb.target_entropy -= p * std::log(p) * inv;

    if (spec.ce) {
      auto ce = loss_ce(clean.class_logits, ex.target);
      lb.ce += ce.value * inv;
      for (double& v : ce.grad) v *= spec.ce_weight * inv;
      backward(model, cache, ce.grad, no_mlm, grads);
    }
    if (spec.kl && ex.noisy) {
      const auto noisy = forward(model, std::span<const TokenId>(ex.noisy->ids), std::span<const Segment>(ex.noisy->segments), {}, cache);
      auto kl = loss_kl(clean.class_logits, noisy.class_logits, spec.kl_direction);
      lb.kl += kl.value * inv;
      for (double& v : kl.grad) v *= spec.kl_weight * inv;
      backward(model, cache, kl.grad, no_mlm, grads);
    }
    if (spec.mlm && ex.masked && !ex.masked->targets.empty()) {
      std::vector<size_t> positions;
      std::vector<TokenId> targets;
      for (auto [p, id] : ex.masked->targets) {
        positions.push_back(p);
        targets.push_back(id);
      }
      const auto out = forward(model, std::span<const TokenId>(ex.masked->ids), std::span<const Segment>(ex.clean.segments),
                               std::span<const size_t>(positions), cache);
      auto mlm = loss_mlm(out.mlm_logits, targets);
      lb.mlm += mlm.value * inv;
      for (auto& row : mlm.grad)
        for (double& v : row) v *= spec.mlm_weight * inv;
      const std::array<double, kNumClasses> zero{};
      backward(model, cache, zero, mlm.grad, grads);
    }
  }
  lb.total = spec.ce_weight * lb.ce + spec.kl_weight * lb.kl + spec.mlm_weight * lb.mlm;
  check_finite(model, grads);
  return lb;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Scales `grads` in place so its global L2 norm is at most clip_norm
/// (no-op when clip_norm <= 0). Returns the norm before clipping.
template <typename T>
double clip_global_norm(Gradients<T>& grads, double clip_norm) {
  const double norm = grads.norm();
  if (clip_norm > 0.0 && norm > clip_norm) {
    const T s = static_cast<T>(clip_norm / norm);
    for (T& v : grads.data) v *= s;
  }
  return norm;
}

/// Plain SGD: global-norm clipping, then params -= lr * grads.
template <typename T>
double sgd_step(BasicEncoder<T>& model, Gradients<T> grads, double lr, double clip_norm) {
  if (!(lr >= 0.0)) throw validation_error("learning rate must be non-negative");
  const double norm = clip_global_norm(grads, clip_norm);
  auto p = model.params();
  const T step = static_cast<T>(lr);
  for (size_t i = 0; i < p.size(); ++i) p[i] -= step * grads.data[i];
  if (!model.all_finite()) throw Error(ErrorKind::numerical, "non-finite parameters after update");
  return norm;
}

/// SGD with heavy-ball momentum: v = mu v + g; params -= lr v.
template <typename T>
class MomentumSgd {
 public:
  MomentumSgd(double lr, double momentum, double clip_norm) : lr_(lr), momentum_(momentum), clip_norm_(clip_norm) {
    if (!(lr > 0.0)) throw validation_error("learning rate must be positive");
  }

  double step(BasicEncoder<T>& model, Gradients<T>& grads) {
    const double norm = clip_global_norm(grads, clip_norm_);
    auto p = model.params();
    if (velocity_.size() != p.size()) velocity_.assign(p.size(), T(0));
    const T mu = static_cast<T>(momentum_), lr = static_cast<T>(lr_);
    for (size_t i = 0; i < p.size(); ++i) {
      velocity_[i] = mu * velocity_[i] + grads.data[i];
      p[i] -= lr * velocity_[i];
    }
    if (!model.all_finite()) throw Error(ErrorKind::numerical, "non-finite parameters after update");
    return norm;
  }

 private:
  double lr_, momentum_, clip_norm_;
  std::vector<T> velocity_;
};

/// Adam with bias correction, after global-norm clipping.
template <typename T>
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double clip_norm = 1.0)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), clip_norm_(clip_norm) {
    if (!(lr > 0.0)) throw validation_error("learning rate must be positive");
  }

  double step(BasicEncoder<T>& model, Gradients<T>& grads) {
    const double norm = clip_global_norm(grads, clip_norm_);
    auto p = model.params();
    if (m_.size() != p.size()) {
      m_.assign(p.size(), 0.0);
      v_.assign(p.size(), 0.0);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (size_t i = 0; i < p.size(); ++i) {
      const double g = grads.data[i];
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * g * g;
      p[i] -= static_cast<T>(lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_));
    }
    if (!model.all_finite()) throw Error(ErrorKind::numerical, "non-finite parameters after update");
    return norm;
  }

 private:
  double lr_, b1_, b2_, eps_, clip_norm_;
  uint64_t t_ = 0;
  std::vector<double> m_, v_;
};

/// Re-indexes a model onto another vocabulary. Rows of the token embedding
/// and MLM bias are carried over by token string; tokens absent from `from`
/// get fresh N(0, init_std) embeddings and zero bias. Everything else is copied.
inline EncoderModel remap_vocabulary(const EncoderModel& model, const Vocabulary& from, const Vocabulary& to, uint64_t seed) {
  if (from.size() != model.config().vocab_size) throw validation_error("source vocabulary does not match the model");
  EncoderConfig cfg = model.config();
  cfg.vocab_size = to.size();
  EncoderModel out(cfg);
  const auto& a = model.layout();
  const auto& b = out.layout();
  const size_t d = cfg.dim;
  // all blocks after the token embedding except the trailing MLM bias line up
  std::copy(model.params().begin() + static_cast<std::ptrdiff_t>(a.pos), model.params().begin() + static_cast<std::ptrdiff_t>(a.mlm_b),
            out.params().begin() + static_cast<std::ptrdiff_t>(b.pos));
  Rng rng(seed);
  for (size_t i = 0; i < to.size(); ++i) {
    const auto& tok = to.token(static_cast<TokenId>(i));
    if (from.contains(tok)) {
      const auto j = static_cast<size_t>(from.id(tok));
      std::copy_n(model.at(a.tok + j * d), d, out.at(b.tok + i * d));
      *out.at(b.mlm_b + i) = *model.at(a.mlm_b + j);
    } else {
      for (size_t k = 0; k < d; ++k) *out.at(b.tok + i * d + k) = static_cast<float>(rng.normal() * cfg.init_std);
    }
  }
  out.info() = model.info();
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON container with config, vocabulary fingerprint, an opaque
// config hash from the producing stage, and named flat parameter blocks.
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  std::string vocab_fingerprint;
  std::string config_hash;
};

inline void save_checkpoint(const std::filesystem::path& path, const EncoderModel& model, const CheckpointMeta& meta) {
  ordered_json j;
  j["format"] = 1;
  j["config"] = json(model.config());
  j["vocab_fingerprint"] = meta.vocab_fingerprint;
  j["config_hash"] = meta.config_hash;
  j["training"] = {{"ce_steps", model.info().ce_steps}, {"mlm_steps", model.info().mlm_steps}};
  ordered_json blocks = ordered_json::array();
  for (const auto& b : model.layout().blocks()) {
    ordered_json jb;
    jb["name"] = b.name;
    jb["shape"] = {b.rows, b.cols};
    auto p = model.params().subspan(b.offset, b.size());
    jb["data"] = std::vector<float>(p.begin(), p.end());
    blocks.push_back(std::move(jb));
  }
  j["blocks"] = std::move(blocks);
  auto out = detail::open_output(path);
  out << j.dump() << '\n';
}

struct LoadedCheckpoint {
  EncoderModel model;
  CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw validation_error(path.string() + ": " + e.what());
  }
  if (!j.contains("format") || j["format"] != 1) throw validation_error(path.string() + ": unsupported checkpoint format");
  EncoderModel model(j.at("config").get<EncoderConfig>());
  model.info().ce_steps = j.at("training").at("ce_steps").get<uint64_t>();
  model.info().mlm_steps = j.at("training").at("mlm_steps").get<uint64_t>();
  const auto& blocks = model.layout().blocks();
  const auto& jb = j.at("blocks");
  if (jb.size() != blocks.size()) throw validation_error(path.string() + ": parameter block count disagrees with config");
  for (size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const auto& e = jb[i];
    const auto shape = e.at("shape").get<std::vector<size_t>>();
    if (e.at("name") != b.name || shape.size() != 2 || shape[0] != b.rows || shape[1] != b.cols)
      throw validation_error(path.string() + ": block " + b.name + " shape disagrees with config");
    const auto data = e.at("data").get<std::vector<float>>();
    if (data.size() != b.size()) throw validation_error(path.string() + ": block " + b.name + " has wrong element count");
    std::copy(data.begin(), data.end(), model.params().begin() + static_cast<std::ptrdiff_t>(b.offset));
  }
  return {std::move(model), {j.at("vocab_fingerprint").get<std::string>(), j.at("config_hash").get<std::string>()}};
}

}  // namespace mddeval
