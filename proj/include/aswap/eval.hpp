#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aswap/config.hpp"
#include "aswap/corpus.hpp"
#include "aswap/registry.hpp"

namespace aswap {

// Per-document measurements behind the retrieval/access tables.
struct EvalDoc {
  std::string doc_id;
  std::string group_id;
  double base_ppl = 0.0;
  double oracle_ppl = 0.0;
  double top1_ppl = 0.0;
  double top2_ppl = 0.0;
  double top3_ppl = 0.0;
  double top1_pca_ppl = 0.0;
  double no_access_ppl = 0.0;
  bool top1_hit = false;
  bool top2_hit = false;
  bool top3_hit = false;
  bool top1_pca_hit = false;
};

struct RetrievalResult {
  std::vector<EvalDoc> docs;
  double mean(double EvalDoc::*field) const;
  double accuracy(bool EvalDoc::*field) const;
};

struct PurgedDoc {
  std::string doc_id;
  std::string group_id;
  double before_ppl = 0.0;
  double after_ppl = 0.0;
  double retrain_seconds = 0.0;
  bool determinism_ok = false;
};

struct PurgeResult {
  std::vector<PurgedDoc> docs;
  // Mean ppl over non-purged docs of the affected groups, before and after.
  double bystander_before = 0.0;
  double bystander_after = 0.0;
  double total_retrain_seconds = 0.0;
  double est_full_retrain_seconds = 0.0;
  double build_all_groups_seconds = 0.0;
};

struct ForgettingResult {
  // perplexity[stage][strategy]; strategies fixed as FT, RT, AS.
  std::vector<double> ft, rt, as;
};

struct ShardPoint {
  int shard_size = 0;
  int adapter_count = 0;
  double mean_perplexity = 0.0;
  double mean_train_seconds = 0.0;
  double total_train_seconds = 0.0;
};

struct ShardResult {
  std::vector<ShardPoint> points;
};

// Builds and caches the full desk pipeline (corpus, base checkpoint,
// registry with adapters and retriever) under cfg.workspace, and runs the
// five experiments. Every experiment writes its CSV (plus a *_timing.csv
// sidecar when wall-clock numbers are involved) into cfg.output and appends
// to manifest.json; the deterministic files are byte-stable across runs of
// the same config.
class EvalHarness {
 public:
  explicit EvalHarness(CliConfig cfg);

  // Idempotent: reuses the workspace when its recorded config hash matches.
  void build();

  const Registry& registry() const { return *registry_; }
  Registry& registry() { return *registry_; }
  const BaseModel<float>& base() const { return *base_; }
  const CliConfig& config() const { return cfg_; }
  double build_train_seconds() const { return build_train_seconds_; }

  // Evaluation documents of a group: active, not retriever-heldout, capped
  // at eval_docs_per_group, ordered by content hash.
  std::vector<std::string> eval_doc_ids(const std::string& group_id) const;

  RetrievalResult retrieval_eval();
  RetrievalResult access_control_eval();  // same measurements, access.csv view
  PurgeResult purge_eval();
  ForgettingResult forgetting_eval();
  ShardResult shard_tradeoff_eval();

  // Runs everything and finalizes the manifest.
  void run_all();
  void write_manifest();

 private:
  RetrievalResult measure_docs();
  void write_csv(const std::string& name, const std::string& content,
                 bool deterministic);

  CliConfig cfg_;
  std::optional<Registry> registry_;
  std::optional<BaseModel<float>> base_;
  std::optional<GeneratedCorpus> corpus_;
  std::optional<RetrievalResult> measured_;
  double build_train_seconds_ = 0.0;
  std::map<std::string, std::string> manifest_files_;  // name -> sha256
};

}  // namespace aswap
