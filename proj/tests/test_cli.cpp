#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "aswap/cli.hpp"
#include "aswap/config.hpp"

using namespace aswap;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = 0;
  std::string out;
  std::string err;
};

RunResult run_cli(std::vector<std::string> args) {
  std::vector<const char*> argv{"aswap"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  RunResult r;
  r.code = cli_run(int(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// A tiny but complete configuration the CLI commands can run in seconds.
fs::path write_mini_config(const fs::path& root) {
  CliConfig cfg = CliConfig::desk_defaults();
  cfg.workspace = root / "ws";
  cfg.output = root / "out";
  cfg.model.n_layers = 1;
  cfg.model.d_model = 32;
  cfg.model.n_heads = 4;
  cfg.model.d_ffn = 64;
  cfg.model.context_len = 64;
  cfg.pretrain.steps = 20;
  cfg.pretrain.batch_size = 4;
  cfg.pretrain.holdout_docs = 4;
  cfg.corpus.group_count = 3;
  cfg.corpus.docs_per_group = 8;
  cfg.corpus.months = 3;
  cfg.corpus.docs_per_month = 4;
  cfg.corpus.shard_docs = 8;
  cfg.corpus.neutral_docs = 24;
  cfg.adapter.train.epochs = 2;
  cfg.eval.forgetting_adapter = cfg.adapter;
  cfg.eval.shard_adapter = cfg.adapter;
  cfg.eval.eval_docs_per_group = 3;
  cfg.eval.purge_docs = 1;
  cfg.eval.shard_sizes = {4, 8};
  cfg.retriever.heldout_min = 4;
  cfg.users.clear();
  cfg.users.push_back({"alice", {"g0", "g1", "g2"}});
  cfg.users.push_back({"bob", {"g1"}});
  cfg.users.push_back({"nobody", {}});
  const fs::path path = root / "config.json";
  atomic_write_file(path, cfg.canonical());
  return path;
}

const fs::path& suite_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "aswap_cli_suite";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

const std::string& config_path() {
  static std::string path = write_mini_config(suite_root()).string();
  return path;
}

}  // namespace

TEST_CASE("cli: unknown command exits 2") {
  auto r = run_cli({"frobnicate"});
  CHECK(r.code == 2);
  CHECK(r.err.find("error:") != std::string::npos);
}

TEST_CASE("cli: unknown config key is an error naming the key") {
  const fs::path bad = suite_root() / "bad.json";
  atomic_write_file(bad, "{\"topk\": 3}\n");
  auto r = run_cli({"--config", bad.string(), "audit"});
  CHECK(r.code == 2);
  CHECK(r.err.find("topk") != std::string::npos);
}

TEST_CASE("cli: malformed config file is an error") {
  const fs::path bad = suite_root() / "malformed.json";
  atomic_write_file(bad, "{not json");
  auto r = run_cli({"--config", bad.string(), "audit"});
  CHECK(r.code == 2);
}

TEST_CASE("cli: empty config file yields the documented defaults") {
  const fs::path empty = suite_root() / "empty.json";
  atomic_write_file(empty, "{}\n");
  auto r = run_cli({"--config", empty.string(), "audit"});
  // No registry yet at the default workspace: stale-state error, but the
  // echoed config must match the desk defaults.
  CHECK(r.code == 4);
  CHECK(r.out.find(CliConfig::desk_defaults().config_hash()) != std::string::npos);
}

TEST_CASE("cli: full pipeline, then query/complete/purge/audit") {
  // pretrain (creates registry), ingest, train, fit retriever.
  auto r = run_cli({"--config", config_path(), "pretrain"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("weights_hash") != std::string::npos);

  r = run_cli({"--config", config_path(), "ingest"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("ingested 3 groups") != std::string::npos);

  r = run_cli({"--config", config_path(), "train-group", "all"});
  REQUIRE(r.code == 0);

  r = run_cli({"--config", config_path(), "fit-retriever"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("fitted retriever v1") != std::string::npos);

  // Clean audit: exit 0 and the literal count.
  r = run_cli({"--config", config_path(), "audit"});
  CHECK(r.code == 0);
  CHECK(r.out.find("0 violations") != std::string::npos);

  // Query with provenance.
  r = run_cli({"--config", config_path(), "query", "--user", "alice",
               "--k", "2", "eaca bdbd"});
  CHECK(r.code == 0);
  CHECK(r.out.find("completion:") != std::string::npos);
  CHECK(r.out.find("provenance:") != std::string::npos);
  CHECK(r.out.find("log_density") != std::string::npos);

  // A user with no labels is denied with exit 3.
  r = run_cli({"--config", config_path(), "query", "--user", "nobody", "hi"});
  CHECK(r.code == 3);

  // Restricted user: provenance must only name adapters of group g1.
  r = run_cli({"--config", config_path(), "query", "--user", "bob",
               "--k", "3", "whatever text"});
  CHECK(r.code == 0);
  {
    std::istringstream lines(r.out);
    std::string line;
    bool saw_adapter = false;
    while (std::getline(lines, line)) {
      if (line.find("  adapter ") == 0) {
        saw_adapter = true;
        CHECK(line.find("adp-g1-") != std::string::npos);
      }
    }
    CHECK(saw_adapter);
  }

  // Oracle completion of a known document.
  r = run_cli({"--config", config_path(), "complete", "--doc", "g0/doc_000.txt"});
  CHECK(r.code == 0);
  CHECK(r.out.find("perplexity") != std::string::npos);
  CHECK(r.out.find("mode oracle") != std::string::npos);

  // Purge once: ok. Purge twice: stale-state exit 4.
  r = run_cli({"--config", config_path(), "purge", "--doc", "g0/doc_001.txt"});
  CHECK(r.code == 0);
  CHECK(r.out.find("determinism_check_passed=1") != std::string::npos);
  r = run_cli({"--config", config_path(), "purge", "--doc", "g0/doc_001.txt"});
  CHECK(r.code == 4);
  CHECK(r.err.find("already purged") != std::string::npos);

  r = run_cli({"--config", config_path(), "audit"});
  CHECK(r.code == 0);

  // Mutating commands appended to the operation log.
  const fs::path oplog = suite_root() / "ws" / "oplog.jsonl";
  REQUIRE(fs::exists(oplog));
  const std::string log = read_file(oplog);
  CHECK(log.find("\"command\":\"pretrain\"") != std::string::npos);
  CHECK(log.find("\"command\":\"train-group\"") != std::string::npos);
  CHECK(log.find("\"command\":\"purge\"") != std::string::npos);
  CHECK(log.find("\"config_hash\"") != std::string::npos);
}

TEST_CASE("config: canonical JSON round trip is exact") {
  CliConfig cfg = CliConfig::desk_defaults();
  cfg.retrieval.k = 3;
  cfg.retriever.kind = ProjectionKind::PCA;
  cfg.adapter.alpha = 12.5f;
  cfg.users.push_back({"extra", {"g0", "g3"}});
  const fs::path path = suite_root() / "roundtrip.json";
  atomic_write_file(path, cfg.canonical());
  CliConfig parsed = CliConfig::load(path);
  CHECK(parsed.canonical() == cfg.canonical());
  CHECK(parsed.config_hash() == cfg.config_hash());
}

TEST_CASE("cli: flag overrides take precedence over the config file") {
  auto r = run_cli({"--config", config_path(), "--k", "3", "audit"});
  CHECK(r.code == 0);
  CHECK(r.out.find("\"k\": 3") != std::string::npos);
}

TEST_CASE("cli: eval subcommand writes experiment outputs") {
  const fs::path out2 = suite_root() / "out_eval";
  auto r = run_cli({"--config", config_path(), "--output", out2.string(),
                    "--workspace", (suite_root() / "ws_eval").string(),
                    "eval", "shards"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(out2 / "shards.csv"));
  CHECK(fs::exists(out2 / "shards_timing.csv"));
  CHECK(fs::exists(out2 / "manifest.json"));

  auto bad = run_cli({"--config", config_path(), "eval", "nonsense"});
  CHECK(bad.code == 2);
}
