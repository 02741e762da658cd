#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aswap/model.hpp"

namespace aswap {

enum class TargetSet : std::uint32_t {
  AttentionOnly = 0,  // wq, wk, wv, wo
  AllLinear = 1,      // attention plus ffn1/ffn2
};

inline std::string target_set_name(TargetSet s) {
  return s == TargetSet::AttentionOnly ? "attention-only" : "all-linear";
}

inline TargetSet target_set_from_name(const std::string& s) {
  if (s == "attention-only") return TargetSet::AttentionOnly;
  if (s == "all-linear") return TargetSet::AllLinear;
  throw ShapeError("unknown target set: " + s);
}

inline std::vector<TargetRef> target_list(const ModelConfig& cfg, TargetSet set) {
  std::vector<TargetRef> out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    out.push_back({l, TargetKind::WQ});
    out.push_back({l, TargetKind::WK});
    out.push_back({l, TargetKind::WV});
    out.push_back({l, TargetKind::WO});
    if (set == TargetSet::AllLinear) {
      out.push_back({l, TargetKind::FFN1});
      out.push_back({l, TargetKind::FFN2});
    }
  }
  return out;
}

struct AdapterTrainConfig {
  int epochs = 10;
  int batch_size = 4;
  int grad_accum_steps = 5;
  float lr = 1e-3f;

  bool operator==(const AdapterTrainConfig&) const = default;
};

struct AdapterConfig {
  int rank = 8;
  float alpha = 16.0f;
  TargetSet targets = TargetSet::AttentionOnly;
  std::uint64_t init_seed = 42;
  AdapterTrainConfig train;

  float scaling() const { return alpha / float(rank); }

  void validate() const {
    if (rank < 1) throw ShapeError("adapter config: rank must be >= 1");
    if (!(alpha > 0)) throw ShapeError("adapter config: alpha must be > 0");
    if (train.epochs < 0 || train.batch_size < 1 || train.grad_accum_steps < 1) {
      throw ShapeError("adapter config: bad training parameters");
    }
  }

  bool operator==(const AdapterConfig&) const = default;
};

template <typename Scalar>
struct LoraPair {
  Mat<Scalar> a;  // [r, d_in]
  Mat<Scalar> b;  // [d_out, r]
};

template <typename Scalar>
struct Adapter {
  std::string adapter_id;
  std::string group_id;
  AdapterConfig config;
  std::vector<std::pair<TargetRef, LoraPair<Scalar>>> targets;  // canonical order
  std::string base_model_hash;  // hex
  std::string manifest_hash;    // hex, the trained document set
  std::int64_t trained_at = 0;  // unix seconds; bookkeeping only, not serialized

  const LoraPair<Scalar>* find(TargetRef t) const {
    for (const auto& [ref, pair] : targets) {
      if (ref == t) return &pair;
    }
    return nullptr;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [ref, pair] : targets) {
      n += std::size_t(pair.a.size() + pair.b.size());
    }
    return n;
  }

  static constexpr std::uint32_t kFormatVersion = 1;

  std::string serialize() const {
    ByteWriter w;
    w.magic("ASWA");
    w.u32(kFormatVersion);
    w.str(adapter_id);
    w.str(group_id);
    w.str(base_model_hash);
    w.u32(std::uint32_t(config.rank));
    w.f32(config.alpha);
    w.u32(std::uint32_t(config.targets));
    w.u64(config.init_seed);
    w.str(manifest_hash);
    for (const auto& [ref, pair] : targets) {
      for (Index i = 0; i < pair.a.rows(); ++i) {
        for (Index j = 0; j < pair.a.cols(); ++j) w.f32(float(pair.a(i, j)));
      }
      for (Index i = 0; i < pair.b.rows(); ++i) {
        for (Index j = 0; j < pair.b.cols(); ++j) w.f32(float(pair.b(i, j)));
      }
    }
    return w.finish_with_digest();
  }

  void save(const std::filesystem::path& path) const {
    atomic_write_file(path, serialize());
  }

  static Adapter load(const std::filesystem::path& path,
                      const ModelConfig& model_cfg) {
    ByteReader r(read_file(path));
    r.verify_trailing_digest("adapter file");
    r.expect_magic("ASWA", "adapter file");
    if (r.u32() != kFormatVersion) {
      throw IoError("adapter file: unsupported version");
    }
    Adapter ad;
    ad.adapter_id = r.str();
    ad.group_id = r.str();
    ad.base_model_hash = r.str();
    ad.config.rank = int(r.u32());
    ad.config.alpha = r.f32();
    ad.config.targets = TargetSet(r.u32());
    ad.config.init_seed = r.u64();
    ad.manifest_hash = r.str();
    for (TargetRef t : target_list(model_cfg, ad.config.targets)) {
      const auto [d_in, d_out] = target_dims(model_cfg, t.kind);
      LoraPair<Scalar> pair;
      pair.a.resize(ad.config.rank, d_in);
      pair.b.resize(d_out, ad.config.rank);
      for (Index i = 0; i < pair.a.rows(); ++i) {
        for (Index j = 0; j < pair.a.cols(); ++j) pair.a(i, j) = Scalar(r.f32());
      }
      for (Index i = 0; i < pair.b.rows(); ++i) {
        for (Index j = 0; j < pair.b.cols(); ++j) pair.b(i, j) = Scalar(r.f32());
      }
      ad.targets.emplace_back(t, std::move(pair));
    }
    if (!r.at_end()) throw IoError("adapter file: trailing bytes");
    return ad;
  }
};

// A entries are drawn from a seeded N(0, 0.02^2), B starts at zero, so a
// fresh adapter is an exact no-op on the base model. The same seed yields
// bitwise-identical A matrices regardless of group.
template <typename Scalar>
Adapter<Scalar> init_adapter(const ModelConfig& model_cfg,
                             const AdapterConfig& cfg, std::string group_id,
                             std::string adapter_id,
                             std::string base_model_hash = {}) {
  cfg.validate();
  model_cfg.validate();
  Adapter<Scalar> ad;
  ad.adapter_id = std::move(adapter_id);
  ad.group_id = std::move(group_id);
  ad.config = cfg;
  ad.base_model_hash = std::move(base_model_hash);
  Rng rng(cfg.init_seed);
  for (TargetRef t : target_list(model_cfg, cfg.targets)) {
    const auto [d_in, d_out] = target_dims(model_cfg, t.kind);
    if (cfg.rank > std::min(d_in, d_out)) {
      throw ShapeError("adapter rank exceeds min(d_in, d_out) at " +
                       target_name(t));
    }
    LoraPair<Scalar> pair;
    pair.a = rng.normal<Scalar>(cfg.rank, d_in, Scalar(0.02));
    pair.b = Mat<Scalar>::Zero(d_out, cfg.rank);
    ad.targets.emplace_back(t, std::move(pair));
  }
  return ad;
}

// (alpha / r) * B * A, the dense weight delta of one target, in
// (d_out x d_in) orientation.
template <typename Scalar>
Mat<Scalar> effective_delta(const Adapter<Scalar>& ad, TargetRef target) {
  const LoraPair<Scalar>* pair = ad.find(target);
  if (pair == nullptr) {
    throw ShapeError("adapter does not target " + target_name(target));
  }
  return Scalar(ad.config.scaling()) * (pair->b * pair->a);
}

struct MixEntry {
  std::string adapter_id;
  double weight = 1.0;
};

enum class WeightingMode { Uniform, DensitySoftmax };

inline std::string weighting_mode_name(WeightingMode m) {
  return m == WeightingMode::Uniform ? "uniform" : "density-softmax";
}

inline WeightingMode weighting_mode_from_name(const std::string& s) {
  if (s == "uniform") return WeightingMode::Uniform;
  if (s == "density-softmax") return WeightingMode::DensitySoftmax;
  throw ShapeError("unknown weighting mode: " + s);
}

struct AdapterMix {
  std::vector<MixEntry> entries;
  WeightingMode weighting_mode = WeightingMode::Uniform;

  void validate() const {
    if (entries.empty()) throw ShapeError("adapter mix: no entries");
    double sum = 0.0;
    for (const auto& e : entries) sum += e.weight;
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ShapeError("adapter mix: weights must sum to 1");
    }
  }
};

// Weighted sum of per-adapter deltas over the union of their targets. A
// singleton mix with weight 1.0 reproduces that adapter's deltas exactly.
template <typename Scalar>
ComposedDeltas<Scalar> compose(
    const std::vector<std::pair<const Adapter<Scalar>*, double>>& weighted) {
  if (weighted.empty()) throw ShapeError("compose: no adapters");
  double sum = 0.0;
  for (const auto& [ad, w] : weighted) sum += w;
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ShapeError("compose: weights must sum to 1");
  }
  const std::string& base_hash = weighted.front().first->base_model_hash;
  for (const auto& [ad, w] : weighted) {
    if (ad->base_model_hash != base_hash) {
      throw ShapeError("compose: adapters target different base models");
    }
  }
  ComposedDeltas<Scalar> out;
  for (const auto& [ad, w] : weighted) {
    for (const auto& [ref, pair] : ad->targets) {
      Mat<Scalar> contrib = Scalar(w) * effective_delta(*ad, ref);
      auto it = out.deltas.find(ref);
      if (it == out.deltas.end()) {
        out.deltas.emplace(ref, std::move(contrib));
      } else {
        it->second += contrib;
      }
    }
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> compose_target(
    const std::vector<std::pair<const Adapter<Scalar>*, double>>& weighted,
    TargetRef target) {
  ComposedDeltas<Scalar> all = compose(weighted);
  const Mat<Scalar>* d = all.find(target);
  if (d == nullptr) throw ShapeError("compose: no adapter targets " + target_name(target));
  return *d;
}

struct TrainLog {
  double wall_seconds = 0.0;
  std::size_t token_count = 0;
  double final_loss = 0.0;
  int optimizer_steps = 0;
  std::size_t adapter_params = 0;
  std::size_t base_params = 0;
  double param_ratio = 0.0;
};

// Trains one adapter against a frozen base. Only A/B receive gradients; the
// base parameters are non-differentiable constants, so their gradients are
// never even allocated. Fully seeded: same (base, docs, config) reproduces
// the adapter bitwise. `resume_from` continues from an existing adapter's
// A/B state (sequential fine-tuning) instead of a fresh initialization.
template <typename Scalar>
std::pair<Adapter<Scalar>, TrainLog> train_adapter(
    const BaseModel<Scalar>& base, std::span<const std::string> docs,
    const AdapterConfig& cfg, std::string group_id, std::string adapter_id,
    std::string manifest_hash = {},
    const Adapter<Scalar>* resume_from = nullptr) {
  if (!base.frozen()) throw NumericError("train_adapter: base model not frozen");
  if (docs.empty()) throw ShapeError("train_adapter: empty corpus");
  cfg.validate();

  Adapter<Scalar> ad = init_adapter<Scalar>(base.config(), cfg,
                                            std::move(group_id),
                                            std::move(adapter_id),
                                            base.weights_hash());
  ad.manifest_hash = std::move(manifest_hash);
  if (resume_from != nullptr) {
    if (resume_from->targets.size() != ad.targets.size()) {
      throw ShapeError("train_adapter: resume adapter has different targets");
    }
    for (std::size_t i = 0; i < ad.targets.size(); ++i) {
      ad.targets[i].second = resume_from->targets[i].second;
    }
  }

  LoraSites<Scalar> sites;
  sites.scaling = Scalar(cfg.scaling());
  std::vector<Tensor<Scalar>> trainables;
  for (auto& [ref, pair] : ad.targets) {
    Tensor<Scalar> a = Tensor<Scalar>::from(pair.a, true);
    Tensor<Scalar> b = Tensor<Scalar>::from(pair.b, true);
    sites.ab.emplace(ref, std::make_pair(a, b));
    trainables.push_back(a);
    trainables.push_back(b);
  }

  AdamWConfig<Scalar> ocfg;
  ocfg.lr = Scalar(cfg.train.lr);
  AdamW<Scalar> opt(ocfg);
  // Separate stream from init so standalone init_adapter stays bit-equal.
  Rng order_rng(cfg.init_seed ^ 0x9e3779b97f4a7c15ull);

  const int ctx = base.config().context_len;
  std::vector<std::vector<int>> token_docs;
  token_docs.reserve(docs.size());
  TrainLog log;
  for (const auto& d : docs) {
    std::vector<int> ids = tokenize(d);
    if (Index(ids.size()) > ctx) ids.resize(std::size_t(ctx));
    token_docs.push_back(std::move(ids));
  }

  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    std::vector<int> order(token_docs.size());
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);

    double epoch_loss = 0.0;
    int micro_batches = 0;
    int pending = 0;
    std::size_t at = 0;
    while (at < order.size()) {
      const std::size_t take =
          std::min<std::size_t>(std::size_t(cfg.train.batch_size),
                                order.size() - at);
      Tensor<Scalar> loss;
      for (std::size_t b = 0; b < take; ++b) {
        const auto& ids = token_docs[std::size_t(order[at + b])];
        log.token_count += ids.size();
        Tensor<Scalar> doc_loss = base.doc_loss_graph(ids, &sites);
        loss = b == 0 ? doc_loss : add(loss, doc_loss);
      }
      at += take;
      loss = scale(loss, Scalar(1) / Scalar(take));
      epoch_loss += double(loss.value()(0, 0));
      ++micro_batches;
      // Gradients accumulate across micro-batches until the step.
      backward(scale(loss, Scalar(1) / Scalar(cfg.train.grad_accum_steps)));
      ++pending;
      if (pending == cfg.train.grad_accum_steps || at >= order.size()) {
        opt.step(std::span<Tensor<Scalar>>(trainables));
        for (auto& t : trainables) t.zero_grad();
        pending = 0;
        ++log.optimizer_steps;
      }
    }
    if (micro_batches > 0) log.final_loss = epoch_loss / micro_batches;
  }
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  for (auto& [ref, pair] : ad.targets) {
    const auto& ab = sites.ab.at(ref);
    pair.a = ab.first.value();
    pair.b = ab.second.value();
  }
  ad.trained_at = std::int64_t(std::time(nullptr));
  log.adapter_params = ad.param_count();
  log.base_params = base.param_count();
  log.param_ratio = double(log.adapter_params) / double(log.base_params);
  return {std::move(ad), log};
}

}  // namespace aswap
