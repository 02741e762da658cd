#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aswap/bytesio.hpp"
#include "aswap/optim.hpp"
#include "aswap/tensor.hpp"
#include "aswap/tokenizer.hpp"

namespace aswap {

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ffn = 256;
  int context_len = 128;
  int vocab_size = kVocabSize;
  std::uint64_t init_seed = 1;

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ffn < 1) {
      throw ShapeError("model config: dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ShapeError("model config: d_model must be divisible by n_heads");
    }
    if (context_len < 2) {
      throw ShapeError("model config: context_len must be >= 2");
    }
    if (vocab_size < 2) {
      throw ShapeError("model config: vocab_size must be >= 2");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

// Linear layers adapters can attach to. Order within a layer is fixed and is
// also the serialization order.
enum class TargetKind : std::uint32_t {
  WQ = 0,
  WK = 1,
  WV = 2,
  WO = 3,
  FFN1 = 4,
  FFN2 = 5,
};

struct TargetRef {
  int layer = 0;
  TargetKind kind = TargetKind::WQ;
  auto operator<=>(const TargetRef&) const = default;
};

inline std::string target_name(TargetRef t) {
  static const char* names[] = {"wq", "wk", "wv", "wo", "ffn1", "ffn2"};
  return "layer" + std::to_string(t.layer) + "." +
         names[std::uint32_t(t.kind)];
}

// (d_in, d_out) of a target's weight as used in x*W form.
inline std::pair<int, int> target_dims(const ModelConfig& cfg, TargetKind kind) {
  switch (kind) {
    case TargetKind::FFN1:
      return {cfg.d_model, cfg.d_ffn};
    case TargetKind::FFN2:
      return {cfg.d_ffn, cfg.d_model};
    default:
      return {cfg.d_model, cfg.d_model};
  }
}

// Summed low-rank deltas in (d_out x d_in) orientation, ready to merge into
// the base weights for inference.
template <typename Scalar>
struct ComposedDeltas {
  std::map<TargetRef, Mat<Scalar>> deltas;

  const Mat<Scalar>* find(TargetRef t) const {
    auto it = deltas.find(t);
    return it == deltas.end() ? nullptr : &it->second;
  }
  bool empty() const { return deltas.empty(); }
};

// Graph-side adapter attachment used while training: per target, the (A, B)
// factors as differentiable tensors plus the alpha/r scaling.
template <typename Scalar>
struct LoraSites {
  Scalar scaling = Scalar(1);
  std::map<TargetRef, std::pair<Tensor<Scalar>, Tensor<Scalar>>> ab;  // A, B

  const std::pair<Tensor<Scalar>, Tensor<Scalar>>* find(TargetRef t) const {
    auto it = ab.find(t);
    return it == ab.end() ? nullptr : &it->second;
  }
};

template <typename Scalar>
struct LayerWeights {
  Tensor<Scalar> w_q, w_k, w_v, w_o;        // [d_model, d_model]
  Tensor<Scalar> ln1_g, ln1_b, ln2_g, ln2_b;  // [1, d_model]
  Tensor<Scalar> w_ffn1, b_ffn1;            // [d_model, d_ffn], [1, d_ffn]
  Tensor<Scalar> w_ffn2, b_ffn2;            // [d_ffn, d_model], [1, d_model]
};

struct CompletionReport {
  std::string doc_id;
  int context_tokens = 0;
  int scored_tokens = 0;
  double mean_nll = 0.0;
  double perplexity = 1.0;
};

// Pre-norm decoder-only transformer with learned positional embeddings.
// Move-only; clone() gives an independent deep copy. Once frozen, parameters
// are non-differentiable constants and the weights hash is pinned.
template <typename Scalar>
class BaseModel {
 public:
  BaseModel(const BaseModel&) = delete;
  BaseModel& operator=(const BaseModel&) = delete;
  BaseModel(BaseModel&&) = default;
  BaseModel& operator=(BaseModel&&) = default;

  static BaseModel init(const ModelConfig& cfg) {
    return BaseModel(cfg, Scalar(0.02));
  }
  // All-zero weights (layer norm gains stay 1): emits exactly uniform logits.
  static BaseModel zeros(const ModelConfig& cfg) {
    return BaseModel(cfg, Scalar(0));
  }

  const ModelConfig& config() const { return cfg_; }
  bool frozen() const { return frozen_; }

  void freeze() {
    for (Tensor<Scalar>* p : params()) p->set_requires_grad(false);
    frozen_ = true;
    cached_hash_ = weights_hash();
  }

  // Parameters in declaration order; the serialization order.
  std::vector<Tensor<Scalar>*> params() {
    std::vector<Tensor<Scalar>*> out;
    out.push_back(&token_embedding_);
    out.push_back(&positional_embedding_);
    for (auto& l : layers_) {
      out.push_back(&l.w_q);
      out.push_back(&l.w_k);
      out.push_back(&l.w_v);
      out.push_back(&l.w_o);
      out.push_back(&l.ln1_g);
      out.push_back(&l.ln1_b);
      out.push_back(&l.ln2_g);
      out.push_back(&l.ln2_b);
      out.push_back(&l.w_ffn1);
      out.push_back(&l.b_ffn1);
      out.push_back(&l.w_ffn2);
      out.push_back(&l.b_ffn2);
    }
    out.push_back(&lnf_g_);
    out.push_back(&lnf_b_);
    out.push_back(&w_head_);
    return out;
  }
  std::vector<const Tensor<Scalar>*> params() const {
    auto mut = const_cast<BaseModel*>(this)->params();
    return {mut.begin(), mut.end()};
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto* p : params()) n += std::size_t(p->size());
    return n;
  }

  // SHA-256 over the little-endian 32-bit serialization of all parameters in
  // declaration order: the model's identity.
  std::string weights_hash() const {
    if (frozen_ && !cached_hash_.empty()) return cached_hash_;
    ByteWriter w;
    write_params(w);
    return Sha256::hex_digest(w.data());
  }

  BaseModel clone() const {
    BaseModel out(cfg_, Scalar(0));
    auto src = params();
    auto dst = out.params();
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i]->value() = src[i]->value();
      dst[i]->set_requires_grad(src[i]->requires_grad());
    }
    out.frozen_ = frozen_;
    out.cached_hash_ = cached_hash_;
    return out;
  }

  // -------------------------------------------------------------------
  // Inference path: plain Eigen math, no tape. Deltas, when present, are
  // merged into the affected weights ((d_out x d_in) orientation, so the
  // transpose lands on the x*W layout).
  // -------------------------------------------------------------------

  Mat<Scalar> forward_logits(std::span<const int> tokens,
                             const ComposedDeltas<Scalar>* deltas = nullptr) const {
    Mat<Scalar> h = hidden_states(tokens, deltas);
    return h * w_head_.value();
  }

  // Final hidden states after the last layer norm, [n, d_model].
  Mat<Scalar> hidden_states(std::span<const int> tokens,
                            const ComposedDeltas<Scalar>* deltas = nullptr) const {
    check_tokens(tokens);
    const Index n = Index(tokens.size());
    const int dh = cfg_.d_model / cfg_.n_heads;

    Mat<Scalar> x(n, cfg_.d_model);
    for (Index i = 0; i < n; ++i) {
      x.row(i) = token_embedding_.value().row(tokens[std::size_t(i)]) +
                 positional_embedding_.value().row(i);
    }

    auto effective = [&](const Tensor<Scalar>& w, TargetRef t) -> Mat<Scalar> {
      if (deltas != nullptr) {
        if (const Mat<Scalar>* d = deltas->find(t)) {
          if (d->rows() != w.cols() || d->cols() != w.rows()) {
            throw ShapeError("adapter delta shape mismatch at " + target_name(t));
          }
          return w.value() + d->transpose();
        }
      }
      return w.value();
    };

    for (int li = 0; li < cfg_.n_layers; ++li) {
      const auto& l = layers_[std::size_t(li)];
      Mat<Scalar> hn = norm_rows(x, l.ln1_g.value(), l.ln1_b.value());
      const Mat<Scalar> q = hn * effective(l.w_q, {li, TargetKind::WQ});
      const Mat<Scalar> k = hn * effective(l.w_k, {li, TargetKind::WK});
      const Mat<Scalar> v = hn * effective(l.w_v, {li, TargetKind::WV});
      Mat<Scalar> ctx(n, cfg_.d_model);
      const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(dh));
      for (int h_i = 0; h_i < cfg_.n_heads; ++h_i) {
        const Index c0 = Index(h_i) * dh;
        Mat<Scalar> scores =
            q.middleCols(c0, dh) * k.middleCols(c0, dh).transpose() * inv_sqrt;
        for (Index i = 0; i < n; ++i) {
          for (Index j = i + 1; j < n; ++j) scores(i, j) = Scalar(-1e30);
        }
        for (Index i = 0; i < n; ++i) {
          const Scalar m = scores.row(i).maxCoeff();
          scores.row(i) = (scores.row(i).array() - m).exp();
          scores.row(i) /= scores.row(i).sum();
        }
        ctx.middleCols(c0, dh) = scores * v.middleCols(c0, dh);
      }
      x += ctx * effective(l.w_o, {li, TargetKind::WO});

      Mat<Scalar> hn2 = norm_rows(x, l.ln2_g.value(), l.ln2_b.value());
      Mat<Scalar> f = hn2 * effective(l.w_ffn1, {li, TargetKind::FFN1});
      f.rowwise() += l.b_ffn1.value().row(0);
      f = gelu_value(f);
      Mat<Scalar> f2 = f * effective(l.w_ffn2, {li, TargetKind::FFN2});
      f2.rowwise() += l.b_ffn2.value().row(0);
      x += f2;
    }
    return norm_rows(x, lnf_g_.value(), lnf_b_.value());
  }

  // -------------------------------------------------------------------
  // Training path: define-by-run graph. When sites are given, the targeted
  // linears gain the factorized branch x A^T B^T * scaling.
  // -------------------------------------------------------------------

  Tensor<Scalar> forward_logits_graph(std::span<const int> tokens,
                                      const LoraSites<Scalar>* sites = nullptr) const {
    check_tokens(tokens);
    const int dh = cfg_.d_model / cfg_.n_heads;

    std::vector<int> tok(tokens.begin(), tokens.end());
    std::vector<int> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = int(i);
    Tensor<Scalar> x = add(rows_lookup(token_embedding_, std::move(tok)),
                           rows_lookup(positional_embedding_, std::move(pos)));

    auto linear = [&](const Tensor<Scalar>& xin, const Tensor<Scalar>& w,
                      TargetRef t) -> Tensor<Scalar> {
      Tensor<Scalar> y = matmul(xin, w);
      if (sites != nullptr) {
        if (const auto* ab = sites->find(t)) {
          Tensor<Scalar> lora =
              matmul_nt(matmul_nt(xin, ab->first), ab->second);
          y = add(y, scale(lora, sites->scaling));
        }
      }
      return y;
    };

    const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(dh));
    for (int li = 0; li < cfg_.n_layers; ++li) {
      const auto& l = layers_[std::size_t(li)];
      Tensor<Scalar> hn = layer_norm_rows(x, l.ln1_g, l.ln1_b);
      Tensor<Scalar> q = linear(hn, l.w_q, {li, TargetKind::WQ});
      Tensor<Scalar> k = linear(hn, l.w_k, {li, TargetKind::WK});
      Tensor<Scalar> v = linear(hn, l.w_v, {li, TargetKind::WV});
      std::vector<Tensor<Scalar>> heads;
      heads.reserve(std::size_t(cfg_.n_heads));
      for (int h_i = 0; h_i < cfg_.n_heads; ++h_i) {
        const Index c0 = Index(h_i) * dh;
        Tensor<Scalar> qh = cols_slice(q, c0, dh);
        Tensor<Scalar> kh = cols_slice(k, c0, dh);
        Tensor<Scalar> vh = cols_slice(v, c0, dh);
        Tensor<Scalar> probs =
            softmax_rows(causal_mask(scale(matmul_nt(qh, kh), inv_sqrt)));
        heads.push_back(matmul(probs, vh));
      }
      x = add(x, linear(hconcat(heads), l.w_o, {li, TargetKind::WO}));

      Tensor<Scalar> hn2 = layer_norm_rows(x, l.ln2_g, l.ln2_b);
      Tensor<Scalar> f = gelu(add_rowvec(
          linear(hn2, l.w_ffn1, {li, TargetKind::FFN1}), l.b_ffn1));
      Tensor<Scalar> f2 =
          add_rowvec(linear(f, l.w_ffn2, {li, TargetKind::FFN2}), l.b_ffn2);
      x = add(x, f2);
    }
    Tensor<Scalar> hfinal = layer_norm_rows(x, lnf_g_, lnf_b_);
    return matmul(hfinal, w_head_);
  }

  // Mean next-token NLL of one document under the graph path.
  Tensor<Scalar> doc_loss_graph(std::span<const int> tokens,
                                const LoraSites<Scalar>* sites = nullptr) const {
    if (tokens.size() < 2) throw ShapeError("doc_loss: need at least 2 tokens");
    Tensor<Scalar> logits =
        forward_logits_graph(tokens.first(tokens.size() - 1), sites);
    std::vector<int> targets(tokens.begin() + 1, tokens.end());
    return cross_entropy_mean(logits, std::move(targets));
  }

  // -------------------------------------------------------------------
  // Checkpoint format: "ASWP" magic, version, config fields as little-endian
  // integers, parameters as little-endian f32 in declaration order, trailing
  // SHA-256 of all preceding bytes.
  // -------------------------------------------------------------------

  static constexpr std::uint32_t kFormatVersion = 1;

  std::string serialize() const {
    ByteWriter w;
    w.magic("ASWP");
    w.u32(kFormatVersion);
    w.i32(cfg_.n_layers);
    w.i32(cfg_.d_model);
    w.i32(cfg_.n_heads);
    w.i32(cfg_.d_ffn);
    w.i32(cfg_.context_len);
    w.i32(cfg_.vocab_size);
    w.u64(cfg_.init_seed);
    write_params(w);
    return w.finish_with_digest();
  }

  void save(const std::filesystem::path& path) const {
    atomic_write_file(path, serialize());
  }

  // Checkpoints hold frozen bases; the loaded model is frozen.
  static BaseModel load(const std::filesystem::path& path) {
    ByteReader r(read_file(path));
    r.verify_trailing_digest("base model checkpoint");
    r.expect_magic("ASWP", "base model checkpoint");
    const std::uint32_t version = r.u32();
    if (version != kFormatVersion) {
      throw IoError("base model checkpoint: unsupported version");
    }
    ModelConfig cfg;
    cfg.n_layers = r.i32();
    cfg.d_model = r.i32();
    cfg.n_heads = r.i32();
    cfg.d_ffn = r.i32();
    cfg.context_len = r.i32();
    cfg.vocab_size = r.i32();
    cfg.init_seed = r.u64();
    cfg.validate();
    BaseModel m(cfg, Scalar(0));
    for (Tensor<Scalar>* p : m.params()) {
      for (Index i = 0; i < p->rows(); ++i) {
        for (Index j = 0; j < p->cols(); ++j) {
          p->value()(i, j) = Scalar(r.f32());
        }
      }
    }
    if (!r.at_end()) throw IoError("base model checkpoint: trailing bytes");
    m.freeze();
    return m;
  }

 private:
  BaseModel(const ModelConfig& cfg, Scalar init_std) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    auto weight = [&](Index r, Index c) {
      return Tensor<Scalar>::from(rng.normal<Scalar>(r, c, init_std), true);
    };
    auto zeros = [&](Index r, Index c) {
      return Tensor<Scalar>::zeros(r, c, true);
    };
    auto ones = [&](Index c) {
      return Tensor<Scalar>::from(Mat<Scalar>::Ones(1, c), true);
    };
    token_embedding_ = weight(cfg_.vocab_size, cfg_.d_model);
    positional_embedding_ = weight(cfg_.context_len, cfg_.d_model);
    layers_.reserve(std::size_t(cfg_.n_layers));
    for (int i = 0; i < cfg_.n_layers; ++i) {
      LayerWeights<Scalar> l;
      l.w_q = weight(cfg_.d_model, cfg_.d_model);
      l.w_k = weight(cfg_.d_model, cfg_.d_model);
      l.w_v = weight(cfg_.d_model, cfg_.d_model);
      l.w_o = weight(cfg_.d_model, cfg_.d_model);
      l.ln1_g = ones(cfg_.d_model);
      l.ln1_b = zeros(1, cfg_.d_model);
      l.ln2_g = ones(cfg_.d_model);
      l.ln2_b = zeros(1, cfg_.d_model);
      l.w_ffn1 = weight(cfg_.d_model, cfg_.d_ffn);
      l.b_ffn1 = zeros(1, cfg_.d_ffn);
      l.w_ffn2 = weight(cfg_.d_ffn, cfg_.d_model);
      l.b_ffn2 = zeros(1, cfg_.d_model);
      layers_.push_back(std::move(l));
    }
    lnf_g_ = ones(cfg_.d_model);
    lnf_b_ = zeros(1, cfg_.d_model);
    w_head_ = weight(cfg_.d_model, cfg_.vocab_size);
  }

  void check_tokens(std::span<const int> tokens) const {
    if (tokens.empty()) throw ShapeError("forward: empty token sequence");
    if (Index(tokens.size()) > cfg_.context_len) {
      throw ShapeError("forward: sequence longer than context_len");
    }
    for (int t : tokens) {
      if (t < 0 || t >= cfg_.vocab_size) {
        throw ShapeError("forward: token id out of range");
      }
    }
  }

  static Mat<Scalar> norm_rows(const Mat<Scalar>& x, const Mat<Scalar>& g,
                               const Mat<Scalar>& b) {
    const Scalar eps = Scalar(1e-5);
    Mat<Scalar> y(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
      const Scalar mean = x.row(i).mean();
      const Scalar var = (x.row(i).array() - mean).square().sum() / Scalar(x.cols());
      y.row(i) = (((x.row(i).array() - mean) / std::sqrt(var + eps)) *
                      g.row(0).array() +
                  b.row(0).array())
                     .matrix();
    }
    return y;
  }

  static Mat<Scalar> gelu_value(const Mat<Scalar>& x) {
    const Scalar k = Scalar(0.7978845608028654);
    const Scalar c = Scalar(0.044715);
    return (Scalar(0.5) * x.array() *
            (Scalar(1) + (k * (x.array() + c * x.array().cube())).tanh()))
        .matrix();
  }

  void write_params(ByteWriter& w) const {
    for (const Tensor<Scalar>* p : params()) {
      const auto& m = p->value();
      for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) w.f32(float(m(i, j)));
      }
    }
  }

  ModelConfig cfg_;
  Tensor<Scalar> token_embedding_;
  Tensor<Scalar> positional_embedding_;
  std::vector<LayerWeights<Scalar>> layers_;
  Tensor<Scalar> lnf_g_, lnf_b_;
  Tensor<Scalar> w_head_;
  bool frozen_ = false;
  std::string cached_hash_;
};

// ---------------------------------------------------------------------------
// Pretraining and evaluation
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int steps = 300;
  int batch_size = 8;
  float lr = 1e-3f;
  float weight_decay = 0.01f;
  // Documents held out of training for the before/after NLL check, taken
  // deterministically from the end of the corpus.
  int holdout_docs = 8;
  std::uint64_t seed = 1234;
};

struct PretrainStats {
  double initial_holdout_nll = 0.0;
  double final_holdout_nll = 0.0;
  int steps = 0;
  double wall_seconds = 0.0;
};

template <typename Scalar>
double mean_doc_nll(const BaseModel<Scalar>& model,
                    std::span<const std::string> docs) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& doc : docs) {
    std::vector<int> ids = tokenize(doc);
    if (Index(ids.size()) > model.config().context_len) {
      ids.resize(std::size_t(model.config().context_len));
    }
    const Mat<Scalar> logits = model.forward_logits(
        std::span<const int>(ids.data(), ids.size() - 1));
    for (std::size_t i = 1; i < ids.size(); ++i) {
      const auto row = logits.row(Index(i - 1));
      const Scalar m = row.maxCoeff();
      const double lse = double(m) + std::log(double((row.array() - m).exp().sum()));
      total += lse - double(row(ids[i]));
      ++count;
    }
  }
  return count == 0 ? 0.0 : total / double(count);
}

// Next-token training over a document corpus. The model is frozen and hashed
// on completion.
template <typename Scalar>
PretrainStats pretrain(BaseModel<Scalar>& model, std::vector<std::string> corpus,
                       const PretrainConfig& cfg) {
  if (model.frozen()) throw NumericError("pretrain: model is frozen");
  if (corpus.empty()) throw ShapeError("pretrain: empty corpus");

  const int holdout = std::min<int>(cfg.holdout_docs, int(corpus.size()) - 1);
  std::vector<std::string> train_docs(corpus.begin(), corpus.end() - holdout);
  std::vector<std::string> holdout_docs(corpus.end() - holdout, corpus.end());
  if (holdout == 0) holdout_docs = train_docs;

  PretrainStats stats;
  stats.initial_holdout_nll = mean_doc_nll(model, holdout_docs);

  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(cfg.seed);
  AdamWConfig<Scalar> ocfg;
  ocfg.lr = Scalar(cfg.lr);
  ocfg.weight_decay = Scalar(cfg.weight_decay);
  AdamW<Scalar> opt(ocfg);
  auto param_ptrs = model.params();
  std::vector<Tensor<Scalar>> param_tensors;
  for (auto* p : param_ptrs) param_tensors.push_back(*p);

  const int ctx = model.config().context_len;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor<Scalar> loss;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int pick = rng.uniform_int(0, int(train_docs.size()) - 1);
      std::vector<int> ids = tokenize(train_docs[std::size_t(pick)]);
      if (Index(ids.size()) > ctx) ids.resize(std::size_t(ctx));
      Tensor<Scalar> doc_loss = model.doc_loss_graph(ids);
      loss = b == 0 ? doc_loss : add(loss, doc_loss);
    }
    loss = scale(loss, Scalar(1) / Scalar(cfg.batch_size));
    backward(loss);
    opt.step(std::span<Tensor<Scalar>>(param_tensors));
    for (auto& p : param_tensors) p.zero_grad();
    ++stats.steps;
  }
  stats.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  stats.final_holdout_nll = mean_doc_nll(model, holdout_docs);
  model.freeze();
  return stats;
}

// Force decoding: the first ceil(n/2) tokens are context, the rest are scored.
template <typename Scalar>
CompletionReport force_decode_nll(const BaseModel<Scalar>& model,
                                  const ComposedDeltas<Scalar>* deltas,
                                  std::string_view doc,
                                  std::string doc_id = {}) {
  std::vector<int> ids = tokenize(doc);
  if (Index(ids.size()) > model.config().context_len) {
    ids.resize(std::size_t(model.config().context_len));
  }
  const int n = int(ids.size());
  if (n < 2) throw ShapeError("force_decode: document too short");
  const int context = (n + 1) / 2;
  const int scored = n - context;

  const Mat<Scalar> logits = model.forward_logits(
      std::span<const int>(ids.data(), std::size_t(n - 1)), deltas);
  double total = 0.0;
  for (int i = context; i < n; ++i) {
    const auto row = logits.row(i - 1);
    const Scalar m = row.maxCoeff();
    const double lse = double(m) + std::log(double((row.array() - m).exp().sum()));
    total += lse - double(row(ids[std::size_t(i)]));
  }

  CompletionReport rep;
  rep.doc_id = std::move(doc_id);
  rep.context_tokens = context;
  rep.scored_tokens = scored;
  rep.mean_nll = total / double(scored);
  rep.perplexity = std::exp(rep.mean_nll);
  return rep;
}

// Greedy when temperature == 0, otherwise seeded softmax sampling. Returns
// only the newly generated bytes.
template <typename Scalar>
std::string generate(const BaseModel<Scalar>& model,
                     const ComposedDeltas<Scalar>* deltas,
                     std::string_view prompt, int max_new_tokens,
                     double temperature = 0.0, std::uint64_t seed = 0) {
  std::vector<int> ids = tokenize_prefix(prompt);
  const int ctx = model.config().context_len;
  if (Index(ids.size()) > ctx) {
    throw ShapeError("generate: prompt longer than context_len");
  }
  Rng rng(seed);
  std::vector<int> out;
  for (int step = 0; step < max_new_tokens; ++step) {
    std::span<const int> window(ids);
    if (int(window.size()) > ctx) window = window.last(std::size_t(ctx));
    const Mat<Scalar> logits = model.forward_logits(window, deltas);
    const auto row = logits.row(logits.rows() - 1);
    int next = 0;
    if (temperature <= 0.0) {
      Index arg = 0;
      row.maxCoeff(&arg);
      next = int(arg);
    } else {
      Eigen::Array<double, Eigen::Dynamic, 1> p =
          (row.template cast<double>().array() / temperature).transpose();
      p = (p - p.maxCoeff()).exp();
      p /= p.sum();
      double u = rng.uniform();
      next = int(p.size()) - 1;
      double acc = 0.0;
      for (Index i = 0; i < p.size(); ++i) {
        acc += p(i);
        if (u < acc) {
          next = int(i);
          break;
        }
      }
    }
    if (next == kEos) break;
    ids.push_back(next);
    out.push_back(next);
  }
  return detokenize(out);
}

}  // namespace aswap
