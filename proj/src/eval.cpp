#include "aswap/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>

#include "aswap/bytesio.hpp"
#include "aswap/sha256.hpp"

namespace aswap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

double now_seconds(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::vector<std::string> read_dir_docs(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& f : fs::directory_iterator(dir)) {
    if (f.is_regular_file()) files.push_back(f.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<std::string> docs;
  for (const auto& f : files) docs.push_back(read_file(f));
  return docs;
}

}  // namespace

double RetrievalResult::mean(double EvalDoc::*field) const {
  double s = 0.0;
  for (const auto& d : docs) s += d.*field;
  return docs.empty() ? 0.0 : s / double(docs.size());
}

double RetrievalResult::accuracy(bool EvalDoc::*field) const {
  double s = 0.0;
  for (const auto& d : docs) s += (d.*field) ? 1.0 : 0.0;
  return docs.empty() ? 0.0 : s / double(docs.size());
}

EvalHarness::EvalHarness(CliConfig cfg) : cfg_(std::move(cfg)) {}

void EvalHarness::build() {
  const fs::path ws = cfg_.workspace;
  const fs::path stamp = ws / "pipeline.json";
  const std::string want_hash = cfg_.config_hash();

  if (fs::exists(stamp)) {
    json j = json::parse(read_file(stamp));
    if (j.at("config_hash").get<std::string>() == want_hash) {
      corpus_ = generate_corpus(ws / "corpus", cfg_.corpus);
      registry_ = Registry::open(ws / "registry");
      base_ = registry_->load_base_model();
      build_train_seconds_ = j.at("all_groups_train_seconds").get<double>();
      return;
    }
    fs::remove_all(ws);
  } else if (fs::exists(ws / "registry" / "registry.json")) {
    // A registry someone else built; refuse to clobber it.
    throw StaleRegistryError("workspace " + ws.string() +
                             " was not built by the eval harness; use a "
                             "fresh --workspace");
  }
  fs::create_directories(ws);

  corpus_ = generate_corpus(ws / "corpus", cfg_.corpus);

  auto model = BaseModel<float>::init(cfg_.model);
  pretrain(model, corpus_->neutral, cfg_.pretrain);

  registry_ = Registry::create(ws / "registry");
  registry_->ingest(corpus_->groups_dir);
  registry_->set_base_model(model);
  base_ = std::move(model);

  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& g : corpus_->group_ids) {
    registry_->train_group(g, *base_, cfg_.adapter);
  }
  build_train_seconds_ = now_seconds(t0);
  registry_->fit_retriever(*base_, cfg_.retriever);

  atomic_write_file(stamp, json{{"config_hash", want_hash},
                                {"all_groups_train_seconds", build_train_seconds_}}
                               .dump(2) +
                               "\n");
}

std::vector<std::string> EvalHarness::eval_doc_ids(
    const std::string& group_id) const {
  const auto& g = registry_->groups().at(group_id);
  std::set<std::string> held(g.heldout_doc_ids.begin(), g.heldout_doc_ids.end());
  std::vector<std::pair<std::string, std::string>> by_hash;
  for (const auto& doc_id : g.document_ids) {
    const auto& d = registry_->documents().at(doc_id);
    if (d.status == "active" && !held.count(doc_id)) {
      by_hash.emplace_back(d.content_hash, doc_id);
    }
  }
  std::sort(by_hash.begin(), by_hash.end());
  std::vector<std::string> out;
  for (const auto& [hash, id] : by_hash) {
    if (int(out.size()) >= cfg_.eval.eval_docs_per_group) break;
    out.push_back(id);
  }
  return out;
}

RetrievalResult EvalHarness::measure_docs() {
  if (measured_) return *measured_;
  EmbeddingProvider provider(*base_);
  auto retriever = registry_->load_retriever();
  auto by_group = registry_->adapter_by_group();

  std::vector<std::string> group_ids;
  for (const auto& [gid, g] : registry_->groups()) {
    if (g.adapter_id) {
      group_ids.push_back(gid);
    } else {
      throw StaleRegistryError("untrained group: " + gid);
    }
  }
  if (group_ids.size() < 2) {
    throw StaleRegistryError(
        "evaluation needs at least 2 trained adapters (no-access condition "
        "excludes the oracle)");
  }

  // PCA baseline fit on the same held-out vectors as the registry retriever.
  std::vector<Vec> held_vecs;
  std::vector<int> held_labels;
  for (std::size_t gi = 0; gi < group_ids.size(); ++gi) {
    for (const auto& did : registry_->groups().at(group_ids[gi]).heldout_doc_ids) {
      held_vecs.push_back(provider.embed(registry_->document_bytes(did)));
      held_labels.push_back(int(gi));
    }
  }
  Matd held(Eigen::Index(held_vecs.size()), provider.dim());
  for (std::size_t i = 0; i < held_vecs.size(); ++i) {
    held.row(Eigen::Index(i)) = held_vecs[i].transpose();
  }
  const int pca_dims = std::min<int>(int(group_ids.size()) - 1, provider.dim());
  auto pca_projection = fit_pca(held, pca_dims);
  auto pca_gmm = fit_gmm(pca_projection.project_rows(held), held_labels,
                         group_ids, cfg_.retriever.reg_eps);

  std::set<std::string> all_adapters;
  for (const auto& [g, a] : by_group) all_adapters.insert(a);
  std::map<std::string, Adapter<float>> adapters;
  for (const auto& [g, a] : by_group) {
    adapters.emplace(a, registry_->load_adapter(a));
  }
  auto deltas_for = [&](const RankedAdapters& ranked) {
    std::vector<std::pair<const Adapter<float>*, double>> weighted;
    const auto w = ranked.weights();
    for (std::size_t i = 0; i < ranked.entries.size(); ++i) {
      weighted.emplace_back(&adapters.at(ranked.entries[i].adapter_id),
                            ranked.entries.size() == 1 ? 1.0 : w[i]);
    }
    return compose<float>(weighted);
  };

  RetrievalResult result;
  for (const auto& gid : group_ids) {
    const std::string oracle_id = *registry_->groups().at(gid).adapter_id;
    for (const auto& doc_id : eval_doc_ids(gid)) {
      EvalDoc row;
      row.doc_id = doc_id;
      row.group_id = gid;
      const std::string bytes = registry_->document_bytes(doc_id);
      const Vec q = provider.embed(bytes);

      row.base_ppl = force_decode_nll<float>(*base_, nullptr, bytes).perplexity;
      auto oracle_deltas = compose<float>({{&adapters.at(oracle_id), 1.0}});
      row.oracle_ppl =
          force_decode_nll<float>(*base_, &oracle_deltas, bytes).perplexity;

      for (int k = 1; k <= 3; ++k) {
        auto ranked = rank_and_filter(retriever.gmm, retriever.projection, q,
                                      by_group, all_adapters, k,
                                      cfg_.retrieval.weighting);
        bool hit = false;
        for (const auto& e : ranked.entries) hit |= e.adapter_id == oracle_id;
        auto deltas = deltas_for(ranked);
        const double ppl =
            force_decode_nll<float>(*base_, &deltas, bytes).perplexity;
        if (k == 1) {
          row.top1_hit = hit;
          row.top1_ppl = ppl;
        } else if (k == 2) {
          row.top2_hit = hit;
          row.top2_ppl = ppl;
        } else {
          row.top3_hit = hit;
          row.top3_ppl = ppl;
        }
      }

      {
        auto ranked = rank_and_filter(pca_gmm, pca_projection, q, by_group,
                                      all_adapters, 1, cfg_.retrieval.weighting);
        row.top1_pca_hit = ranked.entries[0].adapter_id == oracle_id;
        auto deltas = deltas_for(ranked);
        row.top1_pca_ppl =
            force_decode_nll<float>(*base_, &deltas, bytes).perplexity;
      }

      {
        auto accessible = all_adapters;
        accessible.erase(oracle_id);
        auto ranked = rank_and_filter(retriever.gmm, retriever.projection, q,
                                      by_group, accessible, 1,
                                      cfg_.retrieval.weighting);
        auto deltas = deltas_for(ranked);
        row.no_access_ppl =
            force_decode_nll<float>(*base_, &deltas, bytes).perplexity;
      }
      result.docs.push_back(std::move(row));
    }
  }
  measured_ = result;
  return result;
}

void EvalHarness::write_csv(const std::string& name, const std::string& content,
                            bool deterministic) {
  atomic_write_file(cfg_.output / name, content);
  if (deterministic) {
    manifest_files_[name] = Sha256::hex_digest(content);
  }
}

RetrievalResult EvalHarness::retrieval_eval() {
  auto result = measure_docs();
  std::string csv = "condition,mean_perplexity,oracle_accuracy,n_docs\n";
  const int n = int(result.docs.size());
  auto line = [&](const std::string& cond, double ppl, double acc) {
    csv += cond + "," + fmt(ppl) + "," + fmt(acc) + "," + std::to_string(n) + "\n";
  };
  line("top-3", result.mean(&EvalDoc::top3_ppl), result.accuracy(&EvalDoc::top3_hit));
  line("top-2", result.mean(&EvalDoc::top2_ppl), result.accuracy(&EvalDoc::top2_hit));
  line("top-1", result.mean(&EvalDoc::top1_ppl), result.accuracy(&EvalDoc::top1_hit));
  line("top-1-pca", result.mean(&EvalDoc::top1_pca_ppl),
       result.accuracy(&EvalDoc::top1_pca_hit));
  line("oracle", result.mean(&EvalDoc::oracle_ppl), 1.0);
  line("base", result.mean(&EvalDoc::base_ppl), 0.0);
  write_csv("retrieval.csv", csv, true);
  return result;
}

RetrievalResult EvalHarness::access_control_eval() {
  auto result = measure_docs();
  std::string csv = "condition,mean_perplexity,n_docs\n";
  const int n = int(result.docs.size());
  csv += "no-access," + fmt(result.mean(&EvalDoc::no_access_ppl)) + "," +
         std::to_string(n) + "\n";
  csv += "with-access," + fmt(result.mean(&EvalDoc::top1_ppl)) + "," +
         std::to_string(n) + "\n";
  write_csv("access.csv", csv, true);
  return result;
}

PurgeResult EvalHarness::purge_eval() {
  // Purging mutates; run against a disposable copy of the registry.
  const fs::path clone = cfg_.workspace / "purge_run";
  fs::remove_all(clone);
  fs::copy(cfg_.workspace / "registry", clone, fs::copy_options::recursive);
  auto reg = Registry::open(clone);

  PurgeResult result;
  result.build_all_groups_seconds = build_train_seconds_;

  const int purge_count =
      std::min<int>(cfg_.eval.purge_docs, int(corpus_->group_ids.size()));
  std::map<std::string, Adapter<float>> before_adapters;
  std::vector<std::pair<std::string, std::string>> victims;  // (doc, group)
  for (int i = 0; i < purge_count; ++i) {
    const std::string gid = corpus_->group_ids[std::size_t(i)];
    const auto ids = eval_doc_ids(gid);
    if (ids.empty()) {
      throw ShapeError("purge_eval: group " + gid +
                       " has no evaluation documents (all held out?)");
    }
    victims.emplace_back(ids.front(), gid);
    const std::string aid = *reg.groups().at(gid).adapter_id;
    before_adapters.emplace(gid, reg.load_adapter(aid));
  }

  // Bystanders: the other eval docs of the affected groups.
  std::vector<std::pair<std::string, std::string>> bystanders;
  for (const auto& [victim, gid] : victims) {
    for (const auto& doc_id : eval_doc_ids(gid)) {
      if (doc_id != victim) bystanders.emplace_back(doc_id, gid);
    }
  }

  auto adapter_ppl = [&](const Adapter<float>& ad, const std::string& bytes) {
    auto deltas = compose<float>({{&ad, 1.0}});
    return force_decode_nll<float>(*base_, &deltas, bytes).perplexity;
  };

  double bystander_before = 0.0;
  std::vector<std::string> bystander_bytes;
  for (const auto& [doc_id, gid] : bystanders) {
    bystander_bytes.push_back(reg.document_bytes(doc_id));
    bystander_before +=
        adapter_ppl(before_adapters.at(gid), bystander_bytes.back());
  }

  std::size_t group_tokens = 0, total_tokens = 0;
  for (const auto& [gid, g] : reg.groups()) {
    for (const auto& doc_id : g.document_ids) {
      const auto& d = reg.documents().at(doc_id);
      if (d.status == "active") total_tokens += d.byte_length + 2;
    }
  }

  for (const auto& [victim, gid] : victims) {
    PurgedDoc pd;
    pd.doc_id = victim;
    pd.group_id = gid;
    const std::string bytes = reg.document_bytes(victim);
    pd.before_ppl = adapter_ppl(before_adapters.at(gid), bytes);

    auto report = reg.purge_document(victim, *base_);
    pd.retrain_seconds = report.retrain_seconds;
    pd.determinism_ok = report.audit.ok();
    auto new_adapter = reg.load_adapter(report.new_adapter_id);
    pd.after_ppl = adapter_ppl(new_adapter, bytes);
    result.total_retrain_seconds += pd.retrain_seconds;

    if (group_tokens == 0) {
      for (const auto& doc_id : reg.groups().at(gid).document_ids) {
        const auto& d = reg.documents().at(doc_id);
        if (d.status == "active") group_tokens += d.byte_length + 2;
      }
      result.est_full_retrain_seconds =
          pd.retrain_seconds * double(total_tokens) / double(group_tokens);
    }
    result.docs.push_back(std::move(pd));
  }

  double bystander_after = 0.0;
  for (std::size_t i = 0; i < bystanders.size(); ++i) {
    const auto& [doc_id, gid] = bystanders[i];
    auto ad = reg.load_adapter(*reg.groups().at(gid).adapter_id);
    bystander_after += adapter_ppl(ad, bystander_bytes[i]);
  }
  if (!bystanders.empty()) {
    result.bystander_before = bystander_before / double(bystanders.size());
    result.bystander_after = bystander_after / double(bystanders.size());
  }

  double before_mean = 0.0, after_mean = 0.0;
  for (const auto& d : result.docs) {
    before_mean += d.before_ppl;
    after_mean += d.after_ppl;
  }
  before_mean /= double(result.docs.size());
  after_mean /= double(result.docs.size());

  std::string csv = "condition,mean_perplexity,n_docs\n";
  csv += "before-purge," + fmt(before_mean) + "," +
         std::to_string(result.docs.size()) + "\n";
  csv += "purged," + fmt(after_mean) + "," + std::to_string(result.docs.size()) +
         "\n";
  csv += "bystanders-before," + fmt(result.bystander_before) + "," +
         std::to_string(bystanders.size()) + "\n";
  csv += "bystanders-after," + fmt(result.bystander_after) + "," +
         std::to_string(bystanders.size()) + "\n";
  write_csv("purge.csv", csv, true);

  std::string timing = "metric,seconds\n";
  timing += "mean_single_adapter_retrain," +
            fmt(result.total_retrain_seconds / double(result.docs.size())) + "\n";
  timing += "estimated_full_corpus_retrain," +
            fmt(result.est_full_retrain_seconds) + "\n";
  timing += "all_groups_build_train," + fmt(result.build_all_groups_seconds) + "\n";
  write_csv("purge_timing.csv", timing, false);
  return result;
}

ForgettingResult EvalHarness::forgetting_eval() {
  std::vector<std::vector<std::string>> months;
  for (const auto& m : corpus_->month_ids) {
    months.push_back(read_dir_docs(corpus_->months_dir / m));
  }
  const auto& first_month = months.front();
  auto month1_ppl = [&](const Adapter<float>& ad) {
    auto deltas = compose<float>({{&ad, 1.0}});
    double s = 0.0;
    for (const auto& doc : first_month) {
      s += force_decode_nll<float>(*base_, &deltas, doc).perplexity;
    }
    return s / double(first_month.size());
  };

  const AdapterConfig& acfg = cfg_.eval.forgetting_adapter;
  ForgettingResult result;

  // FT: one adapter fine-tuned month after month.
  Adapter<float> ft;
  for (std::size_t m = 0; m < months.size(); ++m) {
    auto [next, log] =
        train_adapter<float>(*base_, months[m], acfg, "ft", "ft-stage", "",
                             m == 0 ? nullptr : &ft);
    ft = std::move(next);
    result.ft.push_back(month1_ppl(ft));
  }
  // RT: retrained from scratch on all data seen so far.
  std::vector<std::string> cumulative;
  for (std::size_t m = 0; m < months.size(); ++m) {
    cumulative.insert(cumulative.end(), months[m].begin(), months[m].end());
    auto [rt, log] = train_adapter<float>(*base_, cumulative, acfg, "rt",
                                          "rt-stage");
    result.rt.push_back(month1_ppl(rt));
  }
  // AS: per-month adapters; month 1 recall always uses the month-1 adapter,
  // whose bytes never change.
  auto [as1, as_log] = train_adapter<float>(*base_, months[0], acfg, "as", "as-m1");
  for (std::size_t m = 0; m < months.size(); ++m) {
    result.as.push_back(month1_ppl(as1));
  }

  std::string csv = "stage,strategy,perplexity\n";
  for (std::size_t m = 0; m < months.size(); ++m) {
    csv += std::to_string(m + 1) + ",FT," + fmt(result.ft[m]) + "\n";
    csv += std::to_string(m + 1) + ",RT," + fmt(result.rt[m]) + "\n";
    csv += std::to_string(m + 1) + ",AS," + fmt(result.as[m]) + "\n";
  }
  write_csv("forgetting.csv", csv, true);
  return result;
}

ShardResult EvalHarness::shard_tradeoff_eval() {
  auto docs = read_dir_docs(corpus_->shard_dir / "shardbase");
  // Deterministic order by content hash, matching the registry's sharding.
  std::sort(docs.begin(), docs.end(),
            [](const std::string& a, const std::string& b) {
              return Sha256::hex_digest(a) < Sha256::hex_digest(b);
            });
  const AdapterConfig& acfg = cfg_.eval.shard_adapter;

  ShardResult result;
  for (int shard_size : cfg_.eval.shard_sizes) {
    if (shard_size < 1) throw ShapeError("shard size must be >= 1");
    ShardPoint point;
    point.shard_size = shard_size;
    point.adapter_count =
        int((docs.size() + std::size_t(shard_size) - 1) / std::size_t(shard_size));
    double ppl_sum = 0.0;
    int ppl_count = 0;
    for (int s = 0; s < point.adapter_count; ++s) {
      const std::size_t lo = std::size_t(s) * std::size_t(shard_size);
      const std::size_t hi =
          std::min(docs.size(), lo + std::size_t(shard_size));
      std::vector<std::string> shard(docs.begin() + long(lo),
                                     docs.begin() + long(hi));
      const auto t0 = std::chrono::steady_clock::now();
      auto [ad, log] = train_adapter<float>(
          *base_, shard, acfg, "shard", "shard-" + std::to_string(shard_size));
      point.total_train_seconds += now_seconds(t0);
      auto deltas = compose<float>({{&ad, 1.0}});
      for (const auto& doc : shard) {
        ppl_sum += force_decode_nll<float>(*base_, &deltas, doc).perplexity;
        ++ppl_count;
      }
    }
    point.mean_train_seconds =
        point.total_train_seconds / double(point.adapter_count);
    point.mean_perplexity = ppl_sum / double(ppl_count);
    result.points.push_back(point);
  }

  std::string csv = "shard_size,adapter_count,mean_perplexity\n";
  for (const auto& p : result.points) {
    csv += std::to_string(p.shard_size) + "," + std::to_string(p.adapter_count) +
           "," + fmt(p.mean_perplexity) + "\n";
  }
  write_csv("shards.csv", csv, true);

  std::string timing = "shard_size,mean_train_seconds,total_train_seconds\n";
  for (const auto& p : result.points) {
    timing += std::to_string(p.shard_size) + "," + fmt(p.mean_train_seconds) +
              "," + fmt(p.total_train_seconds) + "\n";
  }
  write_csv("shards_timing.csv", timing, false);
  return result;
}

void EvalHarness::write_manifest() {
  json files = json::object();
  for (const auto& [name, hash] : manifest_files_) files[name] = hash;
  const json manifest = {{"config_hash", cfg_.config_hash()},
                         {"files", std::move(files)}};
  atomic_write_file(cfg_.output / "manifest.json", manifest.dump(2) + "\n");
}

void EvalHarness::run_all() {
  build();
  retrieval_eval();
  access_control_eval();
  purge_eval();
  forgetting_eval();
  shard_tradeoff_eval();
  write_manifest();
}

}  // namespace aswap
