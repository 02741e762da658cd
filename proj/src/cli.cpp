#include "aswap/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <iostream>

#include "aswap/config.hpp"
#include "aswap/eval.hpp"
#include "aswap/registry.hpp"

namespace aswap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliContext {
  CliConfig cfg;
  std::ostream* out = nullptr;
};

void log_operation(const CliConfig& cfg, const std::string& command,
                   const std::string& outcome) {
  const json entry = {{"command", command},
                      {"config_hash", cfg.config_hash()},
                      {"timestamp", std::int64_t(std::time(nullptr))},
                      {"outcome", outcome}};
  append_to_file(cfg.workspace / "oplog.jsonl", entry.dump() + "\n");
}

const UserCredential& find_user(const CliConfig& cfg, const std::string& id) {
  for (const auto& u : cfg.users) {
    if (u.user_id == id) return u;
  }
  throw UsageError("unknown user: " + id);
}

Registry open_registry(const CliConfig& cfg) {
  const fs::path path = cfg.workspace / "registry";
  if (!fs::exists(path / "registry.json")) {
    throw StaleRegistryError("no registry at " + path.string() +
                             " (run ingest first)");
  }
  return Registry::open(path);
}

Registry open_or_create_registry(const CliConfig& cfg) {
  const fs::path path = cfg.workspace / "registry";
  if (fs::exists(path / "registry.json")) return Registry::open(path);
  return Registry::create(path);
}

GeneratedCorpus ensure_corpus(const CliConfig& cfg) {
  return generate_corpus(cfg.workspace / "corpus", cfg.corpus);
}

// --- subcommand bodies -----------------------------------------------------

int cmd_ingest(CliContext& ctx, const std::string& corpus_dir) {
  auto reg = open_or_create_registry(ctx.cfg);
  fs::path dir;
  if (!corpus_dir.empty()) {
    dir = corpus_dir;
  } else {
    dir = ensure_corpus(ctx.cfg).groups_dir;
  }
  auto groups = reg.ingest(dir);
  *ctx.out << "ingested " << groups.size() << " groups from " << dir.string()
           << "\n";
  for (const auto& g : groups) {
    const auto& rec = reg.groups().at(g);
    *ctx.out << "  " << g << ": " << rec.document_ids.size()
             << " docs, manifest " << rec.manifest_hash.substr(0, 12) << "\n";
  }
  return 0;
}

int cmd_pretrain(CliContext& ctx) {
  auto corpus = ensure_corpus(ctx.cfg);
  auto model = BaseModel<float>::init(ctx.cfg.model);
  auto stats = pretrain(model, corpus.neutral, ctx.cfg.pretrain);
  auto reg = open_or_create_registry(ctx.cfg);
  reg.set_base_model(model);
  *ctx.out << "pretrained base model: holdout nll "
           << stats.initial_holdout_nll << " -> " << stats.final_holdout_nll
           << " over " << stats.steps << " steps ("
           << stats.wall_seconds << "s)\n"
           << "weights_hash " << model.weights_hash() << "\n";
  return 0;
}

int cmd_train_group(CliContext& ctx, const std::string& which) {
  auto reg = open_registry(ctx.cfg);
  auto base = reg.load_base_model();
  std::vector<std::string> groups;
  if (which == "all") {
    for (const auto& [gid, g] : reg.groups()) groups.push_back(gid);
  } else {
    groups.push_back(which);
  }
  for (const auto& g : groups) {
    const std::string id = reg.train_group(g, base, ctx.cfg.adapter);
    const auto& rec = reg.adapters().at(id);
    *ctx.out << "trained " << id << " for group " << g << " (manifest "
             << rec.manifest_hash.substr(0, 12) << ")\n";
  }
  return 0;
}

int cmd_fit_retriever(CliContext& ctx) {
  auto reg = open_registry(ctx.cfg);
  auto base = reg.load_base_model();
  reg.fit_retriever(base, ctx.cfg.retriever);
  const auto& rec = reg.retriever_record();
  *ctx.out << "fitted retriever v" << rec.version << " ("
           << projection_kind_name(rec.kind) << ") -> " << rec.file << "\n";
  return 0;
}

int cmd_query(CliContext& ctx, const std::string& user_id, int k,
              const std::string& text) {
  auto reg = open_registry(ctx.cfg);
  auto base = reg.load_base_model();
  const auto& user = find_user(ctx.cfg, user_id);
  const auto accessible = reg.accessible_adapters(user);
  if (accessible.empty()) {
    throw AccessDeniedError("user " + user_id + " has no accessible adapters");
  }
  auto retriever = reg.load_retriever();
  EmbeddingProvider provider(base);
  const Vec q = provider.embed(text);
  auto ranked =
      rank_and_filter(retriever.gmm, retriever.projection, q,
                      reg.adapter_by_group(), accessible, k,
                      ctx.cfg.retrieval.weighting);

  std::vector<Adapter<float>> loaded;
  loaded.reserve(ranked.entries.size());
  for (const auto& e : ranked.entries) loaded.push_back(reg.load_adapter(e.adapter_id));
  std::vector<std::pair<const Adapter<float>*, double>> weighted;
  const auto weights = ranked.weights();
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    weighted.emplace_back(&loaded[i], loaded.size() == 1 ? 1.0 : weights[i]);
  }
  auto deltas = compose<float>(weighted);
  const std::string completion =
      generate<float>(base, &deltas, text, ctx.cfg.generation.max_new_tokens,
                      ctx.cfg.generation.temperature, ctx.cfg.seed);

  *ctx.out << "completion: " << completion << "\n";
  *ctx.out << "provenance:\n";
  for (std::size_t i = 0; i < ranked.entries.size(); ++i) {
    *ctx.out << "  adapter " << ranked.entries[i].adapter_id << " weight "
             << weights[i] << " log_density " << ranked.entries[i].log_density
             << "\n";
  }
  return 0;
}

int cmd_complete(CliContext& ctx, const std::string& doc_id,
                 const std::string& user_id, int k) {
  auto reg = open_registry(ctx.cfg);
  auto base = reg.load_base_model();
  const std::string bytes = reg.document_bytes(doc_id);

  ComposedDeltas<float> deltas;
  std::string mode;
  std::vector<Adapter<float>> loaded;
  if (user_id.empty()) {
    // Oracle mode: the adapter of the document's own group.
    const auto& doc = reg.documents().at(doc_id);
    const auto& group = reg.groups().at(doc.group_id);
    if (!group.adapter_id) {
      throw StaleRegistryError("group " + doc.group_id + " has no adapter");
    }
    loaded.push_back(reg.load_adapter(*group.adapter_id));
    deltas = compose<float>({{&loaded[0], 1.0}});
    mode = "oracle(" + *group.adapter_id + ")";
  } else {
    const auto& user = find_user(ctx.cfg, user_id);
    const auto accessible = reg.accessible_adapters(user);
    if (accessible.empty()) {
      throw AccessDeniedError("user " + user_id + " has no accessible adapters");
    }
    auto retriever = reg.load_retriever();
    EmbeddingProvider provider(base);
    auto ranked = rank_and_filter(retriever.gmm, retriever.projection,
                                  provider.embed(bytes), reg.adapter_by_group(),
                                  accessible, k, ctx.cfg.retrieval.weighting);
    std::vector<std::pair<const Adapter<float>*, double>> weighted;
    const auto weights = ranked.weights();
    loaded.reserve(ranked.entries.size());
    for (std::size_t i = 0; i < ranked.entries.size(); ++i) {
      loaded.push_back(reg.load_adapter(ranked.entries[i].adapter_id));
    }
    for (std::size_t i = 0; i < loaded.size(); ++i) {
      weighted.emplace_back(&loaded[i], loaded.size() == 1 ? 1.0 : weights[i]);
    }
    deltas = compose<float>(weighted);
    mode = "retrieved(top-" + std::to_string(k) + ")";
  }

  auto report = force_decode_nll<float>(base, &deltas, bytes, doc_id);
  *ctx.out << "doc " << report.doc_id << " mode " << mode << "\n"
           << "context_tokens " << report.context_tokens << " scored_tokens "
           << report.scored_tokens << "\n"
           << "mean_nll " << report.mean_nll << " perplexity "
           << report.perplexity << "\n";
  return 0;
}

int cmd_purge(CliContext& ctx, const std::string& doc_id) {
  auto reg = open_registry(ctx.cfg);
  auto base = reg.load_base_model();
  auto report = reg.purge_document(doc_id, base);
  *ctx.out << "purged " << report.doc_id << " from group " << report.group_id
           << "\n";
  if (!report.new_adapter_id.empty()) {
    *ctx.out << "retrained adapter " << report.old_adapter_id << " -> "
             << report.new_adapter_id << " in " << report.retrain_seconds
             << "s\n";
  }
  *ctx.out << "retriever_refit " << (report.retriever_refit ? "yes" : "no")
           << "\n"
           << "audit doc_absent_from_store=" << report.audit.doc_absent_from_store
           << " doc_absent_from_manifest=" << report.audit.doc_absent_from_manifest
           << " determinism_check_passed="
           << report.audit.determinism_check_passed << "\n";
  return report.audit.ok() ? 0 : 1;
}

int cmd_audit(CliContext& ctx) {
  auto reg = open_registry(ctx.cfg);
  auto report = reg.audit();
  *ctx.out << report.violations.size() << " violations\n";
  for (const auto& v : report.violations) *ctx.out << "  " << v << "\n";
  return report.clean() ? 0 : 1;
}

int cmd_eval(CliContext& ctx, const std::string& which) {
  static const std::set<std::string> known = {"retrieval", "access",    "purge",
                                              "forgetting", "shards",   "all"};
  if (!known.count(which)) throw UsageError("unknown experiment: " + which);
  EvalHarness harness(ctx.cfg);
  harness.build();
  if (which == "retrieval") {
    harness.retrieval_eval();
  } else if (which == "access") {
    harness.access_control_eval();
  } else if (which == "purge") {
    harness.purge_eval();
  } else if (which == "forgetting") {
    harness.forgetting_eval();
  } else if (which == "shards") {
    harness.shard_tradeoff_eval();
  } else if (which == "all") {
    harness.retrieval_eval();
    harness.access_control_eval();
    harness.purge_eval();
    harness.forgetting_eval();
    harness.shard_tradeoff_eval();
  } else {
    throw UsageError("unknown experiment: " + which);
  }
  harness.write_manifest();
  *ctx.out << "experiment outputs in " << ctx.cfg.output.string() << "\n";
  return 0;
}

}  // namespace

int cli_run(int argc, const char* const* argv, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"access-controlled LoRA adapter lifecycle over a desk-scale LM"};
  app.require_subcommand(1);

  std::string config_path;
  std::string workspace_flag, output_flag;
  std::optional<std::uint64_t> seed_flag;
  std::optional<int> k_flag;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--workspace", workspace_flag, "workspace directory override");
  app.add_option("--output", output_flag, "output directory override");
  app.add_option("--seed", seed_flag, "global seed override");
  app.add_option("--k", k_flag, "retrieval depth override");

  auto* ingest = app.add_subcommand("ingest", "ingest a corpus into the registry");
  std::string corpus_dir;
  ingest->add_option("--corpus", corpus_dir,
                     "corpus directory (one subdirectory per group); defaults "
                     "to the generated desk corpus");

  app.add_subcommand("pretrain", "pretrain and freeze the base model");

  auto* train = app.add_subcommand("train-group", "train a group adapter");
  std::string group = "all";
  train->add_option("group", group, "group id or 'all'");

  app.add_subcommand("fit-retriever", "fit the LDA+GMM retriever");

  auto* query = app.add_subcommand("query", "route a query and generate");
  std::string user_id, query_text;
  query->add_option("--user", user_id, "user id from the config")->required();
  query->add_option("text", query_text, "query text")->required();

  auto* complete = app.add_subcommand("complete", "force-decode a document");
  std::string doc_id, complete_user;
  complete->add_option("--doc", doc_id, "document id")->required();
  complete->add_option("--user", complete_user,
                       "retrieve adapters as this user instead of the oracle");

  auto* purge = app.add_subcommand("purge", "purge a document and retrain");
  std::string purge_doc;
  purge->add_option("--doc", purge_doc, "document id")->required();

  app.add_subcommand("audit", "verify registry integrity");

  auto* eval = app.add_subcommand("eval", "run a desk experiment");
  std::string experiment;
  eval->add_option("experiment", experiment,
                   "retrieval|access|purge|forgetting|shards|all")
      ->required();

  // Global flags remain valid after the subcommand name.
  for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; })) {
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  CliContext ctx;
  ctx.out = &out;
  std::string command = app.get_subcommands().front()->get_name();
  bool mutating = command == "ingest" || command == "pretrain" ||
                  command == "train-group" || command == "fit-retriever" ||
                  command == "purge" || command == "eval";
  bool config_ready = false;
  try {
    ctx.cfg = config_path.empty() ? CliConfig::desk_defaults()
                                  : CliConfig::load(config_path);
    if (!workspace_flag.empty()) ctx.cfg.workspace = workspace_flag;
    if (!output_flag.empty()) ctx.cfg.output = output_flag;
    if (seed_flag) ctx.cfg.seed = *seed_flag;
    if (k_flag) ctx.cfg.retrieval.k = *k_flag;
    config_ready = true;

    // Effective configuration in canonical form, plus its hash, so every
    // run records exactly what it ran with.
    out << ctx.cfg.canonical();
    out << "config_hash: " << ctx.cfg.config_hash() << "\n";

    int rc = 0;
    if (command == "ingest") {
      rc = cmd_ingest(ctx, corpus_dir);
    } else if (command == "pretrain") {
      rc = cmd_pretrain(ctx);
    } else if (command == "train-group") {
      rc = cmd_train_group(ctx, group);
    } else if (command == "fit-retriever") {
      rc = cmd_fit_retriever(ctx);
    } else if (command == "query") {
      rc = cmd_query(ctx, user_id, k_flag.value_or(ctx.cfg.retrieval.k),
                     query_text);
    } else if (command == "complete") {
      rc = cmd_complete(ctx, doc_id, complete_user,
                        k_flag.value_or(ctx.cfg.retrieval.k));
    } else if (command == "purge") {
      rc = cmd_purge(ctx, purge_doc);
    } else if (command == "audit") {
      rc = cmd_audit(ctx);
    } else if (command == "eval") {
      rc = cmd_eval(ctx, experiment);
    } else {
      err << "error: unknown command " << command << "\n";
      return 2;
    }
    if (mutating) log_operation(ctx.cfg, command, rc == 0 ? "ok" : "failed");
    return rc;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const AccessDeniedError& e) {
    if (mutating && config_ready) log_operation(ctx.cfg, command, std::string("error: ") + e.what());
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const StaleRegistryError& e) {
    if (mutating && config_ready) log_operation(ctx.cfg, command, std::string("error: ") + e.what());
    err << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    if (mutating && config_ready) log_operation(ctx.cfg, command, std::string("error: ") + e.what());
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace aswap
