#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "prefgate/error.hpp"
#include "prefgate/rng.hpp"
#include "prefgate/tensor.hpp"
#include "prefgate/tokenizer.hpp"

namespace prefgate {

inline constexpr double kLayerNormEps = 1e-5;

struct ArchConfig {
  std::size_t vocab = kVocabSize;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t ffn_hidden = 64;
  std::size_t n_layers = 1;
  std::size_t max_len = kDefaultMaxLen;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || ffn_hidden == 0 || n_layers == 0)
      throw usage_error("ArchConfig: all sizes must be positive");
    if (d_model % n_heads != 0)
      throw usage_error("ArchConfig: d_model must be divisible by n_heads");
    if (vocab < kVocabSize)
      throw usage_error("ArchConfig: vocab must cover the byte vocabulary");
  }

  bool operator==(const ArchConfig&) const = default;
};

// Pre-layer-norm transformer block. No biases on the attention projections;
// FFN has biases; output projection is untied from the token embedding.
struct LayerParams {
  Tensor ln1_gain, ln1_bias;  // [D]
  Tensor wq, wk, wv, wo;      // [D, D]
  Tensor ln2_gain, ln2_bias;  // [D]
  Tensor w1, b1;              // [D, F], [F]
  Tensor w2, b2;              // [F, D], [D]

  bool operator==(const LayerParams&) const = default;
};

struct ModelParams {
  ArchConfig arch;
  Tensor tok_emb;  // [V, D]
  Tensor pos_emb;  // [max_len, D]
  std::vector<LayerParams> layers;
  Tensor lnf_gain, lnf_bias;  // [D]
  Tensor w_out;               // [D, V]

  bool operator==(const ModelParams&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

// Fixed enumeration order; serialization, the optimizer, and the gradient
// checker all iterate tensors through this list.
inline std::vector<NamedTensor> tensor_list(ModelParams& p) {
  std::vector<NamedTensor> out;
  out.push_back({"tok_emb", &p.tok_emb});
  out.push_back({"pos_emb", &p.pos_emb});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    LayerParams& lp = p.layers[l];
    out.push_back({pre + "ln1.gain", &lp.ln1_gain});
    out.push_back({pre + "ln1.bias", &lp.ln1_bias});
    out.push_back({pre + "wq", &lp.wq});
    out.push_back({pre + "wk", &lp.wk});
    out.push_back({pre + "wv", &lp.wv});
    out.push_back({pre + "wo", &lp.wo});
    out.push_back({pre + "ln2.gain", &lp.ln2_gain});
    out.push_back({pre + "ln2.bias", &lp.ln2_bias});
    out.push_back({pre + "w1", &lp.w1});
    out.push_back({pre + "b1", &lp.b1});
    out.push_back({pre + "w2", &lp.w2});
    out.push_back({pre + "b2", &lp.b2});
  }
  out.push_back({"lnf.gain", &p.lnf_gain});
  out.push_back({"lnf.bias", &p.lnf_bias});
  out.push_back({"w_out", &p.w_out});
  return out;
}

inline std::vector<NamedTensor> tensor_list(const ModelParams& p) {
  return tensor_list(const_cast<ModelParams&>(p));
}

inline ModelParams zero_params(const ArchConfig& arch) {
  arch.validate();
  const std::size_t d = arch.d_model, f = arch.ffn_hidden, v = arch.vocab;
  ModelParams p;
  p.arch = arch;
  p.tok_emb = Tensor::mat(v, d);
  p.pos_emb = Tensor::mat(arch.max_len, d);
  p.layers.resize(arch.n_layers);
  for (auto& lp : p.layers) {
    lp.ln1_gain = Tensor::vec(d, 1.0);
    lp.ln1_bias = Tensor::vec(d);
    lp.wq = Tensor::mat(d, d);
    lp.wk = Tensor::mat(d, d);
    lp.wv = Tensor::mat(d, d);
    lp.wo = Tensor::mat(d, d);
    lp.ln2_gain = Tensor::vec(d, 1.0);
    lp.ln2_bias = Tensor::vec(d);
    lp.w1 = Tensor::mat(d, f);
    lp.b1 = Tensor::vec(f);
    lp.w2 = Tensor::mat(f, d);
    lp.b2 = Tensor::vec(d);
  }
  p.lnf_gain = Tensor::vec(d, 1.0);
  p.lnf_bias = Tensor::vec(d);
  p.w_out = Tensor::mat(d, v);
  return p;
}

// Same shapes as `like`, every entry zero (including norm gains).
inline ModelParams zeros_like(const ModelParams& like) {
  ModelParams g = zero_params(like.arch);
  for (auto& nt : tensor_list(g))
    if (nt.name.find("gain") != std::string::npos) nt.tensor->fill(0.0);
  return g;
}

// Weights uniform in (-0.02, 0.02) from an mt19937_64 stream (see rng.hpp);
// layer-norm gains start at 1, layer-norm biases at 0.
inline ModelParams init_params(const ArchConfig& arch, std::uint64_t seed) {
  ModelParams p = zero_params(arch);
  Rng rng(seed);
  for (auto& nt : tensor_list(p)) {
    const bool is_ln = nt.name.find("ln") != std::string::npos;
    if (is_ln) continue;  // gains already 1, biases already 0
    for (double& w : nt.tensor->data) w = rng.uniform(-0.02, 0.02);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct LayerCache {
  Tensor ln1_out;  // [L, D]
  Tensor ln1_xhat;
  std::vector<double> ln1_inv_std;
  Tensor q, k, v;           // [L, D]
  std::vector<Tensor> att;  // per head, [L, L] row-softmax, causal
  Tensor head_concat;       // [L, D]
  Tensor x1;                // after attention residual
  Tensor ln2_out;
  Tensor ln2_xhat;
  std::vector<double> ln2_inv_std;
  Tensor f1;    // [L, F] pre-activation
  Tensor relu;  // [L, F]
  Tensor x2;    // after FFN residual
};

struct ForwardCache {
  Tensor x0;  // embeddings, input to layer 0
  std::vector<LayerCache> layers;
  Tensor lnf_xhat;
  std::vector<double> lnf_inv_std;
  Tensor y;       // final layer-norm output
  Tensor logits;  // [L, V]
};

namespace detail {

// out = gain * (x - mean) / sqrt(var + eps) + bias, per row
inline void layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       Tensor& out, Tensor& xhat,
                       std::vector<double>& inv_std) {
  const std::size_t rows = x.rows(), d = x.cols();
  out = Tensor::mat(rows, d);
  xhat = Tensor::mat(rows, d);
  inv_std.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x(r, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double dv = x(r, c) - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (x(r, c) - mean) * is;
      xhat(r, c) = xh;
      out(r, c) = gain[c] * xh + bias[c];
    }
  }
}

// out[L, cols(w)] = x[L, rows(w)] * w, optionally + bias
inline void matmul(const Tensor& x, const Tensor& w, Tensor& out,
                   const Tensor* bias = nullptr) {
  const std::size_t rows = x.rows(), inner = x.cols(), cols = w.cols();
  out = Tensor::mat(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double* orow = &out.data[r * cols];
    if (bias)
      for (std::size_t c = 0; c < cols; ++c) orow[c] = bias->data[c];
    for (std::size_t i = 0; i < inner; ++i) {
      const double xv = x(r, i);
      if (xv == 0.0) continue;
      const double* wrow = &w.data[i * cols];
      for (std::size_t c = 0; c < cols; ++c) orow[c] += xv * wrow[c];
    }
  }
}

}  // namespace detail

inline void forward_cache(const ModelParams& p, const std::vector<TokenId>& ids,
                          ForwardCache& cache) {
  const ArchConfig& arch = p.arch;
  const std::size_t L = ids.size();
  if (L == 0) throw data_error("forward: empty token sequence");
  if (L > arch.max_len)
    throw data_error("forward: sequence length " + std::to_string(L) +
                     " exceeds max_len " + std::to_string(arch.max_len));
  for (TokenId id : ids)
    if (id >= arch.vocab)
      throw data_error("forward: token id " + std::to_string(id) +
                       " out of vocabulary");

  const std::size_t D = arch.d_model, H = arch.n_heads, dh = arch.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  cache.x0 = Tensor::mat(L, D);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < D; ++c)
      cache.x0(t, c) = p.tok_emb(ids[t], c) + p.pos_emb(t, c);

  cache.layers.assign(arch.n_layers, LayerCache{});
  const Tensor* x = &cache.x0;
  for (std::size_t l = 0; l < arch.n_layers; ++l) {
    const LayerParams& lp = p.layers[l];
    LayerCache& lc = cache.layers[l];

    detail::layer_norm(*x, lp.ln1_gain, lp.ln1_bias, lc.ln1_out, lc.ln1_xhat,
                       lc.ln1_inv_std);
    detail::matmul(lc.ln1_out, lp.wq, lc.q);
    detail::matmul(lc.ln1_out, lp.wk, lc.k);
    detail::matmul(lc.ln1_out, lp.wv, lc.v);

    lc.att.assign(H, Tensor());
    lc.head_concat = Tensor::mat(L, D);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      Tensor& att = lc.att[h];
      att = Tensor::mat(L, L);
      for (std::size_t t = 0; t < L; ++t) {
        // causal scores with max-subtraction softmax
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t u = 0; u <= t; ++u) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c)
            s += lc.q(t, off + c) * lc.k(u, off + c);
          s *= scale;
          att(t, u) = s;
          if (s > mx) mx = s;
        }
        double z = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          att(t, u) = std::exp(att(t, u) - mx);
          z += att(t, u);
        }
        for (std::size_t u = 0; u <= t; ++u) att(t, u) /= z;
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t u = 0; u <= t; ++u)
            acc += att(t, u) * lc.v(u, off + c);
          lc.head_concat(t, off + c) = acc;
        }
      }
    }

    Tensor attn_out;
    detail::matmul(lc.head_concat, lp.wo, attn_out);
    lc.x1 = Tensor::mat(L, D);
    for (std::size_t i = 0; i < L * D; ++i)
      lc.x1[i] = (*x)[i] + attn_out[i];

    detail::layer_norm(lc.x1, lp.ln2_gain, lp.ln2_bias, lc.ln2_out,
                       lc.ln2_xhat, lc.ln2_inv_std);
    detail::matmul(lc.ln2_out, lp.w1, lc.f1, &lp.b1);
    lc.relu = lc.f1;
    for (double& v : lc.relu.data)
      if (v < 0.0) v = 0.0;
    Tensor f2;
    detail::matmul(lc.relu, lp.w2, f2, &lp.b2);
    lc.x2 = Tensor::mat(L, D);
    for (std::size_t i = 0; i < L * D; ++i) lc.x2[i] = lc.x1[i] + f2[i];

    x = &lc.x2;
  }

  detail::layer_norm(*x, p.lnf_gain, p.lnf_bias, cache.y, cache.lnf_xhat,
                     cache.lnf_inv_std);
  detail::matmul(cache.y, p.w_out, cache.logits);
}

// Row r of the result holds unnormalized scores for the token at position
// r + 1 given ids[0..r].
inline Tensor forward(const ModelParams& p, const std::vector<TokenId>& ids) {
  ForwardCache cache;
  forward_cache(p, ids, cache);
  return std::move(cache.logits);
}

// log softmax(logits_row)[target], with max-subtraction
inline double row_log_prob(const Tensor& logits, std::size_t row,
                           std::size_t target) {
  const std::size_t v = logits.cols();
  const double* l = &logits.data[row * v];
  double mx = l[0];
  for (std::size_t c = 1; c < v; ++c)
    if (l[c] > mx) mx = l[c];
  double z = 0.0;
  for (std::size_t c = 0; c < v; ++c) z += std::exp(l[c] - mx);
  return l[target] - mx - std::log(z);
}

// Sum of natural-log token probabilities over a layout's response span,
// plus the length-normalized value (Σ log p) / |y|.
struct NormalizedScore {
  double logp_sum = 0.0;
  std::size_t length = 0;  // |y| = response bytes + EOS
  double logp_norm = 0.0;
};

inline NormalizedScore score_layout(const ModelParams& p,
                                    const ScoringLayout& layout) {
  const Tensor logits = forward(p, layout.ids);
  NormalizedScore s;
  s.length = layout.response_len;
  for (std::size_t pos = layout.span_begin; pos < layout.span_end; ++pos)
    s.logp_sum += row_log_prob(logits, pos - 1, layout.ids[pos]);
  s.logp_norm = s.logp_sum / static_cast<double>(s.length);
  return s;
}

inline NormalizedScore score_response(const ModelParams& p,
                                      std::string_view prompt,
                                      std::string_view response) {
  return score_layout(p, build_sequence(prompt, response, p.arch.max_len));
}

// ---------------------------------------------------------------------------
// Parameter files
//
// Binary, little-endian:
//   magic "PREFGATE" (8 bytes), u32 version = 1,
//   u32 vocab, d_model, n_heads, ffn_hidden, n_layers, max_len,
//   u32 tensor count, then per tensor:
//     u32 name length, name bytes, u32 rank, u64 dims..., f64 data row-major.
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr char kParamsMagic[8] = {'P', 'R', 'E', 'F',
                                         'G', 'A', 'T', 'E'};
inline constexpr std::uint32_t kParamsVersion = 1;

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline void put_f64(std::ostream& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(out, v);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw data_error("parameter file truncated while reading " + what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& in, const std::string& what) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8))
    throw data_error("parameter file truncated while reading " + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& in, const std::string& what) {
  const std::uint64_t v = get_u64(in, what);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

}  // namespace detail

inline void save_params(const ModelParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open " + path + " for writing");
  out.write(detail::kParamsMagic, 8);
  detail::put_u32(out, detail::kParamsVersion);
  for (std::size_t v : {p.arch.vocab, p.arch.d_model, p.arch.n_heads,
                        p.arch.ffn_hidden, p.arch.n_layers, p.arch.max_len})
    detail::put_u32(out, static_cast<std::uint32_t>(v));
  const auto tensors = tensor_list(p);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(nt.name.size()));
    out.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(nt.tensor->rank()));
    for (std::size_t d : nt.tensor->shape) detail::put_u64(out, d);
    for (double d : nt.tensor->data) detail::put_f64(out, d);
  }
  out.flush();
  if (!out) throw data_error("I/O error while writing " + path);
}

inline ModelParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path + " for reading");
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, detail::kParamsMagic, 8) != 0)
    throw data_error(path + ": not a parameter file (bad magic)");
  const std::uint32_t version = detail::get_u32(in, "version");
  if (version != detail::kParamsVersion)
    throw data_error(path + ": unsupported format version " +
                     std::to_string(version));
  ArchConfig arch;
  arch.vocab = detail::get_u32(in, "vocab");
  arch.d_model = detail::get_u32(in, "d_model");
  arch.n_heads = detail::get_u32(in, "n_heads");
  arch.ffn_hidden = detail::get_u32(in, "ffn_hidden");
  arch.n_layers = detail::get_u32(in, "n_layers");
  arch.max_len = detail::get_u32(in, "max_len");
  try {
    arch.validate();
  } catch (const usage_error& e) {
    throw data_error(path + ": invalid arch header: " + e.what());
  }
  ModelParams p = zero_params(arch);
  auto tensors = tensor_list(p);
  const std::uint32_t count = detail::get_u32(in, "tensor count");
  if (count != tensors.size())
    throw data_error(path + ": expected " + std::to_string(tensors.size()) +
                     " tensors, file has " + std::to_string(count));
  for (auto& nt : tensors) {
    const std::uint32_t name_len = detail::get_u32(in, "tensor name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len))
      throw data_error(path + ": truncated tensor name");
    if (name != nt.name)
      throw data_error(path + ": expected tensor \"" + nt.name +
                       "\", found \"" + name + "\"");
    const std::uint32_t rank = detail::get_u32(in, "rank of " + name);
    std::vector<std::size_t> dims(rank);
    for (std::size_t d = 0; d < rank; ++d)
      dims[d] = static_cast<std::size_t>(detail::get_u64(in, "dims of " + name));
    if (dims != nt.tensor->shape)
      throw data_error(path + ": tensor \"" + name +
                       "\" has a shape inconsistent with the arch header");
    for (double& d : nt.tensor->data)
      d = detail::get_f64(in, "data of " + name);
  }
  return p;
}

inline ModelParams load_params(const std::string& path,
                               const ArchConfig& expected) {
  ModelParams p = load_params(path);
  if (!(p.arch == expected)) {
    auto diff = [&]() -> std::string {
      if (p.arch.d_model != expected.d_model) return "d_model";
      if (p.arch.n_heads != expected.n_heads) return "n_heads";
      if (p.arch.ffn_hidden != expected.ffn_hidden) return "ffn_hidden";
      if (p.arch.n_layers != expected.n_layers) return "n_layers";
      if (p.arch.vocab != expected.vocab) return "vocab";
      return "max_len";
    };
    throw data_error(path + ": arch mismatch in " + diff() +
                     " (every tensor derived from it, e.g. tok_emb, differs)");
  }
  return p;
}

}  // namespace prefgate
