#include "aswap/registry.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "aswap/bytesio.hpp"
#include "aswap/sha256.hpp"

namespace aswap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint32_t kRegistryFormat = 1;

// Exclusive advisory lock serializing writers on one workspace.
class WriterLock {
 public:
  explicit WriterLock(const fs::path& workspace) {
    const fs::path lock_path = workspace / ".lock";
    fd_ = ::open(lock_path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + lock_path.string());
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw IoError("cannot lock " + lock_path.string());
    }
  }
  ~WriterLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  WriterLock(const WriterLock&) = delete;
  WriterLock& operator=(const WriterLock&) = delete;

 private:
  int fd_ = -1;
};

json adapter_config_to_json(const AdapterConfig& cfg) {
  return json{{"rank", cfg.rank},
              {"alpha", cfg.alpha},
              {"targets", target_set_name(cfg.targets)},
              {"init_seed", cfg.init_seed},
              {"train",
               {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"grad_accum_steps", cfg.train.grad_accum_steps},
                {"lr", cfg.train.lr}}}};
}

AdapterConfig adapter_config_from_json(const json& j) {
  AdapterConfig cfg;
  cfg.rank = j.at("rank").get<int>();
  cfg.alpha = j.at("alpha").get<float>();
  cfg.targets = target_set_from_name(j.at("targets").get<std::string>());
  cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  const json& t = j.at("train");
  cfg.train.epochs = t.at("epochs").get<int>();
  cfg.train.batch_size = t.at("batch_size").get<int>();
  cfg.train.grad_accum_steps = t.at("grad_accum_steps").get<int>();
  cfg.train.lr = t.at("lr").get<float>();
  return cfg;
}

std::string sanitize_component(const std::string& name) {
  for (char c : name) {
    if (c == '/' || c == '\\' || c == 0) {
      throw ShapeError("illegal character in name: " + name);
    }
  }
  if (name.empty() || name == "." || name == "..") {
    throw ShapeError("illegal name: '" + name + "'");
  }
  return name;
}

}  // namespace

std::string make_adapter_id(const std::string& group_id,
                            const std::string& manifest_hash,
                            const AdapterConfig& cfg) {
  const std::string key =
      manifest_hash + ":" + adapter_config_to_json(cfg).dump();
  return "adp-" + group_id + "-" + Sha256::hex_digest(key).substr(0, 12);
}

Registry Registry::create(const fs::path& workspace) {
  fs::create_directories(workspace);
  fs::create_directories(workspace / "store");
  fs::create_directories(workspace / "adapters");
  fs::create_directories(workspace / "models");
  fs::create_directories(workspace / "retriever");
  if (fs::exists(workspace / "registry.json")) {
    throw IoError("registry already exists at " + workspace.string());
  }
  Registry r;
  r.workspace_ = workspace;
  WriterLock lock(workspace);
  r.save_locked();
  return r;
}

Registry Registry::open(const fs::path& workspace) {
  Registry r;
  r.workspace_ = workspace;
  r.load_state();
  return r;
}

void Registry::save_locked() {
  json docs = json::object();
  for (const auto& [id, d] : documents_) {
    docs[id] = {{"group_id", d.group_id},
                {"content_hash", d.content_hash},
                {"byte_length", d.byte_length},
                {"status", d.status},
                {"stored_path", d.stored_path}};
  }
  json groups = json::object();
  for (const auto& [id, g] : groups_) {
    json jg = {{"access_label", g.access_label},
               {"document_ids", g.document_ids},
               {"manifest_hash", g.manifest_hash},
               {"heldout_doc_ids", g.heldout_doc_ids}};
    if (g.shard_of) jg["shard_of"] = *g.shard_of;
    if (g.adapter_id) jg["adapter_id"] = *g.adapter_id;
    groups[id] = std::move(jg);
  }
  json adapters = json::object();
  for (const auto& [id, a] : adapters_) {
    adapters[id] = {{"group_id", a.group_id},
                    {"file", a.file},
                    {"base_model_hash", a.base_model_hash},
                    {"manifest_hash", a.manifest_hash},
                    {"config", adapter_config_to_json(a.config)},
                    {"trained_at", a.trained_at}};
  }
  json root = {{"format", kRegistryFormat},
               {"documents", std::move(docs)},
               {"groups", std::move(groups)},
               {"adapters", std::move(adapters)},
               {"settings",
                {{"heldout_fraction", heldout_fraction_},
                 {"heldout_min", heldout_min_}}}};
  if (!base_hash_.empty()) {
    root["base_model"] = {{"file", base_file_}, {"weights_hash", base_hash_}};
  }
  if (retriever_) {
    root["retriever"] = {{"version", retriever_->version},
                         {"file", retriever_->file},
                         {"kind", projection_kind_name(retriever_->kind)},
                         {"ridge_lambda", retriever_->ridge_lambda},
                         {"reg_eps", retriever_->reg_eps},
                         {"heldout_fraction", retriever_->heldout_fraction},
                         {"heldout_min", retriever_->heldout_min},
                         {"em_iterations", retriever_->em_iterations}};
  }
  atomic_write_file(workspace_ / "registry.json", root.dump(2) + "\n");
}

void Registry::load_state() {
  const fs::path path = workspace_ / "registry.json";
  json root = json::parse(read_file(path));
  if (root.at("format").get<std::uint32_t>() != kRegistryFormat) {
    throw IoError("registry.json: unsupported format");
  }
  documents_.clear();
  groups_.clear();
  adapters_.clear();
  retriever_.reset();
  base_hash_.clear();
  base_file_.clear();

  for (const auto& [id, jd] : root.at("documents").items()) {
    DocumentRecord d;
    d.doc_id = id;
    d.group_id = jd.at("group_id").get<std::string>();
    d.content_hash = jd.at("content_hash").get<std::string>();
    d.byte_length = jd.at("byte_length").get<std::uint64_t>();
    d.status = jd.at("status").get<std::string>();
    d.stored_path = jd.at("stored_path").get<std::string>();
    documents_.emplace(id, std::move(d));
  }
  for (const auto& [id, jg] : root.at("groups").items()) {
    GroupRecord g;
    g.group_id = id;
    g.access_label = jg.at("access_label").get<std::string>();
    g.document_ids = jg.at("document_ids").get<std::vector<std::string>>();
    g.manifest_hash = jg.at("manifest_hash").get<std::string>();
    g.heldout_doc_ids = jg.at("heldout_doc_ids").get<std::vector<std::string>>();
    if (jg.contains("shard_of")) g.shard_of = jg.at("shard_of").get<std::string>();
    if (jg.contains("adapter_id")) g.adapter_id = jg.at("adapter_id").get<std::string>();
    groups_.emplace(id, std::move(g));
  }
  for (const auto& [id, ja] : root.at("adapters").items()) {
    AdapterRecord a;
    a.adapter_id = id;
    a.group_id = ja.at("group_id").get<std::string>();
    a.file = ja.at("file").get<std::string>();
    a.base_model_hash = ja.at("base_model_hash").get<std::string>();
    a.manifest_hash = ja.at("manifest_hash").get<std::string>();
    a.config = adapter_config_from_json(ja.at("config"));
    a.trained_at = ja.at("trained_at").get<std::int64_t>();
    adapters_.emplace(id, std::move(a));
  }
  if (root.contains("settings")) {
    heldout_fraction_ = root.at("settings").at("heldout_fraction").get<double>();
    heldout_min_ = root.at("settings").at("heldout_min").get<int>();
  }
  if (root.contains("base_model")) {
    base_file_ = root.at("base_model").at("file").get<std::string>();
    base_hash_ = root.at("base_model").at("weights_hash").get<std::string>();
  }
  if (root.contains("retriever")) {
    const json& jr = root.at("retriever");
    RetrieverRecord r;
    r.version = jr.at("version").get<int>();
    r.file = jr.at("file").get<std::string>();
    r.kind = projection_kind_from_name(jr.at("kind").get<std::string>());
    r.ridge_lambda = jr.at("ridge_lambda").get<double>();
    r.reg_eps = jr.at("reg_eps").get<double>();
    r.heldout_fraction = jr.at("heldout_fraction").get<double>();
    r.heldout_min = jr.at("heldout_min").get<int>();
    r.em_iterations = jr.at("em_iterations").get<int>();
    retriever_ = r;
  }
}

std::string Registry::compute_manifest(const GroupRecord& g) const {
  std::vector<std::string> hashes;
  for (const auto& doc_id : g.document_ids) {
    const auto& d = documents_.at(doc_id);
    if (d.status == "active") hashes.push_back(d.content_hash);
  }
  std::sort(hashes.begin(), hashes.end());
  std::string joined;
  for (const auto& h : hashes) {
    joined += h;
    joined.push_back('\n');
  }
  return Sha256::hex_digest(joined);
}

std::vector<const DocumentRecord*> Registry::active_docs_by_hash(
    const GroupRecord& g) const {
  std::vector<const DocumentRecord*> docs;
  for (const auto& doc_id : g.document_ids) {
    const auto& d = documents_.at(doc_id);
    if (d.status == "active") docs.push_back(&d);
  }
  std::sort(docs.begin(), docs.end(),
            [](const DocumentRecord* a, const DocumentRecord* b) {
              if (a->content_hash != b->content_hash) {
                return a->content_hash < b->content_hash;
              }
              return a->doc_id < b->doc_id;
            });
  return docs;
}

void Registry::refresh_heldout(GroupRecord& g) {
  const auto docs = active_docs_by_hash(g);
  // heldout_fraction of the group, at least heldout_min, capped at the group
  // size. Held-out samples stay in adapter training data; they are only
  // excluded from evaluation completions.
  const std::size_t by_fraction =
      std::size_t(std::ceil(heldout_fraction_ * double(docs.size())));
  const std::size_t want =
      std::max<std::size_t>(std::size_t(std::max(heldout_min_, 0)), by_fraction);
  const std::size_t take = std::min(want, docs.size());
  g.heldout_doc_ids.clear();
  for (std::size_t i = 0; i < take; ++i) {
    g.heldout_doc_ids.push_back(docs[i]->doc_id);
  }
}

void Registry::store_document(const std::string& bytes, DocumentRecord& rec) {
  rec.content_hash = Sha256::hex_digest(bytes);
  rec.byte_length = bytes.size();
  rec.stored_path = "store/" + rec.content_hash;
  const fs::path target = workspace_ / rec.stored_path;
  if (!fs::exists(target)) atomic_write_file(target, bytes);
}

bool Registry::content_referenced(const std::string& content_hash) const {
  for (const auto& [id, d] : documents_) {
    if (d.status == "active" && d.content_hash == content_hash) return true;
  }
  return false;
}

std::vector<std::string> Registry::ingest(const fs::path& corpus_dir) {
  if (!fs::is_directory(corpus_dir)) {
    throw IoError("corpus directory not found: " + corpus_dir.string());
  }
  WriterLock lock(workspace_);

  std::vector<std::string> touched;
  std::vector<fs::path> group_dirs;
  for (const auto& entry : fs::directory_iterator(corpus_dir)) {
    if (entry.is_directory()) group_dirs.push_back(entry.path());
  }
  std::sort(group_dirs.begin(), group_dirs.end());

  for (const auto& dir : group_dirs) {
    const std::string group_id = sanitize_component(dir.filename().string());
    auto [git, created] = groups_.try_emplace(group_id);
    GroupRecord& g = git->second;
    if (created) {
      g.group_id = group_id;
      g.access_label = group_id;
    }

    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(dir)) {
      if (f.is_regular_file()) files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());

    std::set<std::string> group_hashes;
    for (const auto& doc_id : g.document_ids) {
      group_hashes.insert(documents_.at(doc_id).content_hash);
    }

    for (const auto& file : files) {
      const std::string doc_id = group_id + "/" + file.filename().string();
      const std::string bytes = read_file(file);
      const std::string hash = Sha256::hex_digest(bytes);

      auto dit = documents_.find(doc_id);
      if (dit != documents_.end()) {
        if (dit->second.status == "purged") continue;  // tombstone holds
        if (dit->second.content_hash != hash) {
          throw StaleRegistryError("duplicate doc_id with different content: " +
                                   doc_id);
        }
        continue;  // idempotent re-ingest
      }
      // Byte-identical duplicates within one group collapse to one record.
      if (group_hashes.count(hash)) continue;

      DocumentRecord rec;
      rec.doc_id = doc_id;
      rec.group_id = group_id;
      store_document(bytes, rec);
      group_hashes.insert(rec.content_hash);
      documents_.emplace(doc_id, std::move(rec));
      g.document_ids.push_back(doc_id);
    }
    std::sort(g.document_ids.begin(), g.document_ids.end());
    g.manifest_hash = compute_manifest(g);
    refresh_heldout(g);
    touched.push_back(group_id);
  }
  save_locked();
  return touched;
}

std::vector<std::string> Registry::shard_group(const std::string& group_id,
                                               int max_docs) {
  if (max_docs < 1) throw ShapeError("shard_group: max_docs must be >= 1");
  WriterLock lock(workspace_);
  auto git = groups_.find(group_id);
  if (git == groups_.end()) {
    throw StaleRegistryError("unknown group: " + group_id);
  }
  GroupRecord parent = git->second;
  if (parent.adapter_id) {
    throw StaleRegistryError("cannot shard a group with a registered adapter");
  }

  const auto docs = active_docs_by_hash(parent);
  const std::size_t shard_count =
      (docs.size() + std::size_t(max_docs) - 1) / std::size_t(max_docs);
  std::vector<std::string> shard_ids;
  groups_.erase(git);

  for (std::size_t s = 0; s < std::max<std::size_t>(shard_count, 1); ++s) {
    GroupRecord shard;
    shard.group_id = parent.group_id + "#s" + std::to_string(s);
    shard.access_label = parent.access_label;
    shard.shard_of = parent.group_id;
    for (std::size_t i = s * std::size_t(max_docs);
         i < std::min(docs.size(), (s + 1) * std::size_t(max_docs)); ++i) {
      shard.document_ids.push_back(docs[i]->doc_id);
    }
    std::sort(shard.document_ids.begin(), shard.document_ids.end());
    for (const auto& doc_id : shard.document_ids) {
      documents_.at(doc_id).group_id = shard.group_id;
    }
    shard.manifest_hash = compute_manifest(shard);
    refresh_heldout(shard);
    shard_ids.push_back(shard.group_id);
    groups_.emplace(shard.group_id, std::move(shard));
  }
  save_locked();
  return shard_ids;
}

std::string Registry::document_bytes(const std::string& doc_id) const {
  auto it = documents_.find(doc_id);
  if (it == documents_.end()) {
    throw StaleRegistryError("unknown document: " + doc_id);
  }
  if (it->second.status != "active") {
    throw StaleRegistryError("document already purged: " + doc_id);
  }
  return read_file(workspace_ / it->second.stored_path);
}

std::vector<std::string> Registry::group_training_docs(
    const std::string& group_id) const {
  auto it = groups_.find(group_id);
  if (it == groups_.end()) throw StaleRegistryError("unknown group: " + group_id);
  std::vector<std::string> out;
  for (const auto* d : active_docs_by_hash(it->second)) {
    out.push_back(read_file(workspace_ / d->stored_path));
  }
  return out;
}

void Registry::set_base_model(const BaseModel<float>& model) {
  if (!model.frozen()) throw NumericError("registry: base model must be frozen");
  WriterLock lock(workspace_);
  base_file_ = "models/base.aswp";
  model.save(workspace_ / base_file_);
  base_hash_ = model.weights_hash();
  save_locked();
}

BaseModel<float> Registry::load_base_model() const {
  if (base_file_.empty()) throw StaleRegistryError("no base model registered");
  auto model = BaseModel<float>::load(workspace_ / base_file_);
  if (model.weights_hash() != base_hash_) {
    throw StaleRegistryError("base model checkpoint does not match registry hash");
  }
  return model;
}

ModelConfig Registry::base_config() const {
  if (base_file_.empty()) throw StaleRegistryError("no base model registered");
  return BaseModel<float>::load(workspace_ / base_file_).config();
}

bool Registry::check_access(const UserCredential& user,
                            const std::string& adapter_id) const {
  auto it = adapters_.find(adapter_id);
  if (it == adapters_.end()) {
    throw StaleRegistryError("unknown adapter: " + adapter_id);
  }
  const auto& label = groups_.at(it->second.group_id).access_label;
  return user.labels.count(label) > 0;
}

std::set<std::string> Registry::accessible_adapters(
    const UserCredential& user) const {
  std::set<std::string> out;
  for (const auto& [id, a] : adapters_) {
    if (user.labels.count(groups_.at(a.group_id).access_label)) out.insert(id);
  }
  return out;
}

std::string Registry::train_group(const std::string& group_id,
                                  const BaseModel<float>& base,
                                  const AdapterConfig& cfg) {
  auto git = groups_.find(group_id);
  if (git == groups_.end()) throw StaleRegistryError("unknown group: " + group_id);
  const auto docs = group_training_docs(group_id);
  if (docs.empty()) throw StaleRegistryError("group has no active documents: " + group_id);

  const std::string adapter_id =
      make_adapter_id(group_id, git->second.manifest_hash, cfg);
  auto [adapter, log] = train_adapter<float>(base, docs, cfg, group_id,
                                             adapter_id,
                                             git->second.manifest_hash);
  register_adapter(group_id, adapter, cfg);
  return adapter_id;
}

void Registry::register_adapter(const std::string& group_id,
                                const Adapter<float>& adapter,
                                const AdapterConfig& cfg) {
  WriterLock lock(workspace_);
  auto git = groups_.find(group_id);
  if (git == groups_.end()) throw StaleRegistryError("unknown group: " + group_id);
  GroupRecord& g = git->second;
  if (adapter.manifest_hash != g.manifest_hash) {
    throw StaleRegistryError(
        "adapter manifest does not match the group's current manifest "
        "(stale adapter): " + adapter.adapter_id);
  }
  if (base_hash_.empty() || adapter.base_model_hash != base_hash_) {
    throw StaleRegistryError("adapter base hash does not match registry base: " +
                             adapter.adapter_id);
  }

  AdapterRecord rec;
  rec.adapter_id = adapter.adapter_id;
  rec.group_id = group_id;
  rec.file = "adapters/" + adapter.adapter_id + ".aswa";
  rec.base_model_hash = adapter.base_model_hash;
  rec.manifest_hash = adapter.manifest_hash;
  rec.config = cfg;
  rec.trained_at = adapter.trained_at;
  adapter.save(workspace_ / rec.file);

  // The previous adapter file stays on disk under its own name; only purge
  // destroys files.
  if (g.adapter_id) adapters_.erase(*g.adapter_id);
  g.adapter_id = rec.adapter_id;
  adapters_[rec.adapter_id] = std::move(rec);
  save_locked();
}

Adapter<float> Registry::load_adapter(const std::string& adapter_id) const {
  auto it = adapters_.find(adapter_id);
  if (it == adapters_.end()) {
    throw StaleRegistryError("unknown adapter: " + adapter_id);
  }
  return Adapter<float>::load(workspace_ / it->second.file, base_config());
}

std::map<std::string, std::string> Registry::adapter_by_group() const {
  std::map<std::string, std::string> out;
  for (const auto& [id, g] : groups_) {
    if (g.adapter_id) out[id] = *g.adapter_id;
  }
  return out;
}

void Registry::set_heldout_policy(double fraction, int min_docs) {
  if (fraction < 0.0 || fraction > 1.0) {
    throw ShapeError("heldout fraction must be in [0, 1]");
  }
  if (min_docs < 0) throw ShapeError("heldout minimum must be >= 0");
  WriterLock lock(workspace_);
  heldout_fraction_ = fraction;
  heldout_min_ = min_docs;
  for (auto& [gid, g] : groups_) refresh_heldout(g);
  save_locked();
}

void Registry::fit_retriever_unsaved(const BaseModel<float>& base,
                                     const RetrieverFitParams& params,
                                     std::vector<fs::path>& obsolete) {
  if (params.heldout_fraction != heldout_fraction_ ||
      params.heldout_min != heldout_min_) {
    heldout_fraction_ = params.heldout_fraction;
    heldout_min_ = params.heldout_min;
    for (auto& [gid, g] : groups_) refresh_heldout(g);
  }
  EmbeddingProvider provider(base);
  std::vector<std::string> group_ids;
  for (const auto& [id, g] : groups_) {
    if (g.adapter_id) group_ids.push_back(id);
  }
  if (group_ids.size() < 2) {
    throw StaleRegistryError("retriever needs at least 2 groups with adapters");
  }

  std::vector<Vec> vectors;
  std::vector<int> labels;
  for (std::size_t gi = 0; gi < group_ids.size(); ++gi) {
    const GroupRecord& g = groups_.at(group_ids[gi]);
    for (const auto& doc_id : g.heldout_doc_ids) {
      vectors.push_back(provider.embed(document_bytes(doc_id)));
      labels.push_back(int(gi));
    }
  }
  Matd x(Eigen::Index(vectors.size()), provider.dim());
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    x.row(Eigen::Index(i)) = vectors[i].transpose();
  }

  RetrieverModel model;
  model.ridge_lambda = params.ridge_lambda;
  model.reg_eps = params.reg_eps;
  if (params.kind == ProjectionKind::LDA) {
    model.projection = fit_lda(x, labels, params.ridge_lambda);
  } else {
    const int d_out =
        std::min<int>(int(group_ids.size()) - 1, provider.dim());
    model.projection = fit_pca(x, d_out);
  }
  model.gmm = fit_gmm(model.projection.project_rows(x), labels, group_ids,
                      params.reg_eps, params.em_iterations);

  const int version = retriever_ ? retriever_->version + 1 : 1;
  RetrieverRecord rec;
  rec.version = version;
  rec.file = "retriever/retriever.v" + std::to_string(version) + ".aswr";
  rec.kind = params.kind;
  rec.ridge_lambda = params.ridge_lambda;
  rec.reg_eps = params.reg_eps;
  rec.heldout_fraction = params.heldout_fraction;
  rec.heldout_min = params.heldout_min;
  rec.em_iterations = params.em_iterations;
  model.save(workspace_ / rec.file);
  if (retriever_) obsolete.push_back(workspace_ / retriever_->file);
  retriever_ = rec;
}

void Registry::fit_retriever(const BaseModel<float>& base,
                             const RetrieverFitParams& params) {
  WriterLock lock(workspace_);
  std::vector<fs::path> obsolete;
  fit_retriever_unsaved(base, params, obsolete);
  save_locked();
  for (const auto& p : obsolete) fs::remove(p);
}

RetrieverModel Registry::load_retriever() const {
  if (!retriever_) throw StaleRegistryError("no retriever fitted");
  return RetrieverModel::load(workspace_ / retriever_->file);
}

const RetrieverRecord& Registry::retriever_record() const {
  if (!retriever_) throw StaleRegistryError("no retriever fitted");
  return *retriever_;
}

PurgeReport Registry::purge_document(const std::string& doc_id,
                                     const BaseModel<float>& base) {
  WriterLock lock(workspace_);
  auto dit = documents_.find(doc_id);
  if (dit == documents_.end()) {
    throw StaleRegistryError("unknown document: " + doc_id);
  }
  if (dit->second.status != "active") {
    throw StaleRegistryError("document already purged: " + doc_id);
  }
  if (base.weights_hash() != base_hash_) {
    throw StaleRegistryError("purge: base model does not match registry");
  }

  PurgeReport report;
  report.doc_id = doc_id;
  report.group_id = dit->second.group_id;
  const std::string purged_hash = dit->second.content_hash;

  std::vector<fs::path> obsolete_files;
  try {
    GroupRecord& g = groups_.at(report.group_id);
    // Stage every change in memory first; nothing lands until save_locked().
    dit->second.status = "purged";
    dit->second.stored_path.clear();
    g.manifest_hash = compute_manifest(g);
    refresh_heldout(g);

    bool group_has_docs = false;
    for (const auto& id : g.document_ids) {
      group_has_docs |= documents_.at(id).status == "active";
    }

    if (g.adapter_id) {
      report.old_adapter_id = *g.adapter_id;
      const AdapterRecord old_rec = adapters_.at(*g.adapter_id);
      obsolete_files.push_back(workspace_ / old_rec.file);

      if (group_has_docs) {
        std::vector<std::string> docs;
        for (const auto* d : active_docs_by_hash(g)) {
          docs.push_back(read_file(workspace_ / d->stored_path));
        }
        const std::string new_id =
            make_adapter_id(report.group_id, g.manifest_hash, old_rec.config);

        const auto t0 = std::chrono::steady_clock::now();
        auto [adapter, log] = train_adapter<float>(base, docs, old_rec.config,
                                                   report.group_id, new_id,
                                                   g.manifest_hash);
        report.retrain_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        // Removal guarantee check: a second from-scratch run must reproduce
        // the adapter bitwise.
        auto [replay, replay_log] = train_adapter<float>(
            base, docs, old_rec.config, report.group_id, new_id, g.manifest_hash);
        report.audit.determinism_check_passed =
            adapter.serialize() == replay.serialize();

        AdapterRecord rec;
        rec.adapter_id = new_id;
        rec.group_id = report.group_id;
        rec.file = "adapters/" + new_id + ".aswa";
        rec.base_model_hash = adapter.base_model_hash;
        rec.manifest_hash = adapter.manifest_hash;
        rec.config = old_rec.config;
        rec.trained_at = adapter.trained_at;
        adapter.save(workspace_ / rec.file);

        adapters_.erase(report.old_adapter_id);
        g.adapter_id = new_id;
        adapters_[new_id] = rec;
        report.new_adapter_id = new_id;
      } else {
        // Last document gone: the adapter is deleted outright, no retraining.
        adapters_.erase(report.old_adapter_id);
        g.adapter_id.reset();
        report.audit.determinism_check_passed = true;
      }

      if (retriever_) {
        int groups_with_adapters = 0;
        for (const auto& [gid, grec] : groups_) {
          groups_with_adapters += grec.adapter_id ? 1 : 0;
        }
        if (groups_with_adapters >= 2) {
          std::vector<fs::path> obsolete_retriever;
          RetrieverFitParams params;
          params.kind = retriever_->kind;
          params.ridge_lambda = retriever_->ridge_lambda;
          params.reg_eps = retriever_->reg_eps;
          params.heldout_fraction = retriever_->heldout_fraction;
          params.heldout_min = retriever_->heldout_min;
          params.em_iterations = retriever_->em_iterations;
          fit_retriever_unsaved(base, params, obsolete_retriever);
          for (auto& p : obsolete_retriever) obsolete_files.push_back(p);
          report.retriever_refit = true;
        } else {
          // Density ranking needs two components; drop the retriever.
          obsolete_files.push_back(workspace_ / retriever_->file);
          retriever_.reset();
        }
      }
    } else {
      report.audit.determinism_check_passed = true;
    }

    // Atomic swap: the new registry state references only new files.
    save_locked();
  } catch (...) {
    // Retrain or refit failed: disk state is untouched, so reloading it
    // leaves the old adapter active and the purge retriable.
    load_state();
    throw;
  }

  // Destroy the purged bytes and superseded files.
  if (!content_referenced(purged_hash)) {
    fs::remove(workspace_ / ("store/" + purged_hash));
  }
  for (const auto& p : obsolete_files) fs::remove(p);

  report.audit.doc_absent_from_store =
      documents_.at(doc_id).status == "purged" &&
      documents_.at(doc_id).stored_path.empty() &&
      (content_referenced(purged_hash) ||
       !fs::exists(workspace_ / ("store/" + purged_hash)));
  const GroupRecord& gfinal = groups_.at(report.group_id);
  report.audit.doc_absent_from_manifest =
      gfinal.manifest_hash == compute_manifest(gfinal);
  // The purged hash must not contribute to the manifest.
  {
    bool contributes = false;
    for (const auto& id : gfinal.document_ids) {
      const auto& d = documents_.at(id);
      contributes |= d.status == "active" && d.content_hash == purged_hash;
    }
    report.audit.doc_absent_from_manifest &= !contributes;
  }
  return report;
}

AuditReport Registry::audit() const {
  AuditReport report;
  auto violation = [&](const std::string& msg) {
    report.violations.push_back(msg);
  };

  for (const auto& [id, g] : groups_) {
    const std::string manifest = compute_manifest(g);
    if (manifest != g.manifest_hash) {
      violation("group " + id + ": stored manifest is stale");
    }
    if (g.adapter_id && !adapters_.count(*g.adapter_id)) {
      violation("group " + id + ": adapter record missing");
    }
  }

  ModelConfig mcfg;
  bool have_base = false;
  if (!base_file_.empty()) {
    try {
      auto base = BaseModel<float>::load(workspace_ / base_file_);
      if (base.weights_hash() != base_hash_) {
        violation("base model checkpoint hash mismatch");
      }
      mcfg = base.config();
      have_base = true;
    } catch (const std::exception& e) {
      violation(std::string("base model unreadable: ") + e.what());
    }
  }

  for (const auto& [id, a] : adapters_) {
    auto git = groups_.find(a.group_id);
    if (git == groups_.end()) {
      violation("adapter " + id + ": group missing");
      continue;
    }
    if (a.manifest_hash != git->second.manifest_hash) {
      violation("adapter " + id + ": manifest does not match group manifest");
    }
    if (a.base_model_hash != base_hash_) {
      violation("adapter " + id + ": base hash does not match registry base");
    }
    if (have_base) {
      try {
        auto ad = Adapter<float>::load(workspace_ / a.file, mcfg);
        if (ad.manifest_hash != a.manifest_hash) {
          violation("adapter " + id + ": file manifest differs from record");
        }
        if (ad.base_model_hash != a.base_model_hash) {
          violation("adapter " + id + ": file base hash differs from record");
        }
      } catch (const std::exception& e) {
        violation("adapter " + id + ": unreadable: " + e.what());
      }
    }
  }

  // Document store integrity and purge guarantees.
  std::set<std::string> active_hashes;
  for (const auto& [id, d] : documents_) {
    if (d.status == "active") {
      active_hashes.insert(d.content_hash);
      const fs::path p = workspace_ / d.stored_path;
      if (!fs::exists(p)) {
        violation("document " + id + ": stored bytes missing");
      } else if (Sha256::hex_digest(read_file(p)) != d.content_hash) {
        violation("document " + id + ": stored bytes do not match content hash");
      }
    }
  }
  for (const auto& [id, d] : documents_) {
    if (d.status == "purged" && !active_hashes.count(d.content_hash) &&
        fs::exists(workspace_ / ("store/" + d.content_hash))) {
      violation("document " + id + ": purged bytes still present in store");
    }
  }
  if (fs::is_directory(workspace_ / "store")) {
    for (const auto& f : fs::directory_iterator(workspace_ / "store")) {
      const std::string name = f.path().filename().string();
      if (!active_hashes.count(name)) {
        violation("store: orphan content " + name);
      }
    }
  }

  if (retriever_ && !fs::exists(workspace_ / retriever_->file)) {
    violation("retriever file missing: " + retriever_->file);
  }
  return report;
}

}  // namespace aswap
