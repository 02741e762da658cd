#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "aswap/lora.hpp"
#include "aswap/model.hpp"
#include "aswap/retriever.hpp"

namespace aswap {

// Mutation attempted against state that has moved on (stale adapter,
// already-purged document, manifest mismatch).
struct StaleRegistryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DocumentRecord {
  std::string doc_id;
  std::string group_id;
  std::string content_hash;
  std::uint64_t byte_length = 0;
  std::string status = "active";  // active | purged
  std::string stored_path;        // workspace-relative; empty once purged
};

struct GroupRecord {
  std::string group_id;
  std::string access_label;
  std::optional<std::string> shard_of;
  std::vector<std::string> document_ids;  // sorted
  std::optional<std::string> adapter_id;
  std::string manifest_hash;  // over sorted active content hashes
  std::vector<std::string> heldout_doc_ids;
};

struct AdapterRecord {
  std::string adapter_id;
  std::string group_id;
  std::string file;  // workspace-relative
  std::string base_model_hash;
  std::string manifest_hash;
  AdapterConfig config;
  std::int64_t trained_at = 0;
};

// Content-derived identity: the same group, document manifest, and adapter
// configuration always name the same adapter, which is what makes a
// post-purge retrain bitwise-reproducible by a from-scratch build.
std::string make_adapter_id(const std::string& group_id,
                            const std::string& manifest_hash,
                            const AdapterConfig& cfg);

struct RetrieverRecord {
  int version = 0;
  std::string file;
  ProjectionKind kind = ProjectionKind::LDA;
  double ridge_lambda = 1e-3;
  double reg_eps = 1e-6;
  double heldout_fraction = 0.10;
  int heldout_min = 8;
  int em_iterations = 0;
};

struct RetrieverFitParams {
  ProjectionKind kind = ProjectionKind::LDA;
  double ridge_lambda = 1e-3;
  double reg_eps = 1e-6;
  double heldout_fraction = 0.10;
  int heldout_min = 8;
  int em_iterations = 0;
};

struct UserCredential {
  std::string user_id;
  std::set<std::string> labels;
};

struct PurgeAudit {
  bool doc_absent_from_store = false;
  bool doc_absent_from_manifest = false;
  bool determinism_check_passed = false;
  bool ok() const {
    return doc_absent_from_store && doc_absent_from_manifest &&
           determinism_check_passed;
  }
};

struct PurgeReport {
  std::string doc_id;
  std::string group_id;
  std::string old_adapter_id;
  std::string new_adapter_id;
  double retrain_seconds = 0.0;
  bool retriever_refit = false;
  PurgeAudit audit;
};

struct AuditReport {
  std::vector<std::string> violations;
  bool clean() const { return violations.empty(); }
};

// Source of truth for documents, groups, adapters, and the retriever.
// Persisted as canonical JSON (sorted keys) next to a content-addressed
// document store. Mutating operations take an exclusive file lock and land
// through a temp-file rename, so readers observe complete states only.
class Registry {
 public:
  static Registry create(const std::filesystem::path& workspace);
  static Registry open(const std::filesystem::path& workspace);

  const std::filesystem::path& workspace() const { return workspace_; }

  // --- corpus -----------------------------------------------------------
  // One subdirectory per group under corpus_dir; the directory name is both
  // group id and access label. Returns the group ids touched. Idempotent;
  // purged documents stay purged.
  std::vector<std::string> ingest(const std::filesystem::path& corpus_dir);

  // Splits a group into ceil(n/max_docs) shards by sorted content hash. The
  // parent group is replaced; shards inherit its access label.
  std::vector<std::string> shard_group(const std::string& group_id, int max_docs);

  std::string document_bytes(const std::string& doc_id) const;
  // Active document contents ordered by content hash: the exact training
  // corpus the manifest hash binds.
  std::vector<std::string> group_training_docs(const std::string& group_id) const;

  // --- base model --------------------------------------------------------
  void set_base_model(const BaseModel<float>& model);
  BaseModel<float> load_base_model() const;
  const std::string& base_model_hash() const { return base_hash_; }

  // --- access ------------------------------------------------------------
  bool check_access(const UserCredential& user, const std::string& adapter_id) const;
  std::set<std::string> accessible_adapters(const UserCredential& user) const;

  // --- adapters ----------------------------------------------------------
  // Trains on the group's active documents and registers the result.
  // Returns the new adapter id.
  std::string train_group(const std::string& group_id, const BaseModel<float>& base,
                          const AdapterConfig& cfg);
  void register_adapter(const std::string& group_id, const Adapter<float>& adapter,
                        const AdapterConfig& cfg);
  Adapter<float> load_adapter(const std::string& adapter_id) const;
  std::map<std::string, std::string> adapter_by_group() const;

  // --- retriever ----------------------------------------------------------
  // Held-out fraction/minimum used when (re)selecting per-group retriever
  // samples. Changing it reselects every group's held-out set.
  void set_heldout_policy(double fraction, int min_docs);
  double heldout_fraction() const { return heldout_fraction_; }
  int heldout_min() const { return heldout_min_; }

  void fit_retriever(const BaseModel<float>& base, const RetrieverFitParams& params);
  RetrieverModel load_retriever() const;
  bool has_retriever() const { return retriever_.has_value(); }
  const RetrieverRecord& retriever_record() const;

  // --- purge and audit -----------------------------------------------------
  PurgeReport purge_document(const std::string& doc_id, const BaseModel<float>& base);
  AuditReport audit() const;

  // --- introspection --------------------------------------------------------
  const std::map<std::string, DocumentRecord>& documents() const { return documents_; }
  const std::map<std::string, GroupRecord>& groups() const { return groups_; }
  const std::map<std::string, AdapterRecord>& adapters() const { return adapters_; }
  ModelConfig base_config() const;

 private:
  Registry() = default;

  void save_locked();
  void load_state();
  std::string compute_manifest(const GroupRecord& g) const;
  void refresh_heldout(GroupRecord& g);
  std::vector<const DocumentRecord*> active_docs_by_hash(const GroupRecord& g) const;
  void store_document(const std::string& bytes, DocumentRecord& rec);
  bool content_referenced(const std::string& content_hash) const;
  void fit_retriever_unsaved(const BaseModel<float>& base,
                             const RetrieverFitParams& params,
                             std::vector<std::filesystem::path>& obsolete);

  std::filesystem::path workspace_;
  std::map<std::string, DocumentRecord> documents_;
  std::map<std::string, GroupRecord> groups_;
  std::map<std::string, AdapterRecord> adapters_;
  std::optional<RetrieverRecord> retriever_;
  std::string base_hash_;
  std::string base_file_;
  double heldout_fraction_ = 0.10;
  int heldout_min_ = 8;
};

}  // namespace aswap
