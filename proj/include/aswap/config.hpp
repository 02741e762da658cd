#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "aswap/corpus.hpp"
#include "aswap/lora.hpp"
#include "aswap/model.hpp"
#include "aswap/registry.hpp"

namespace aswap {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RetrievalConfig {
  int k = 1;
  WeightingMode weighting = WeightingMode::Uniform;
};

struct GenerationConfig {
  int max_new_tokens = 48;
  double temperature = 0.0;
};

struct EvalConfig {
  int eval_docs_per_group = 12;
  int purge_docs = 3;
  std::vector<int> shard_sizes = {4, 8, 16, 32};
  AdapterConfig forgetting_adapter;
  AdapterConfig shard_adapter;
};

// The one canonical configuration: defaults <- config file <- flags. Unknown
// keys anywhere in the file are errors, not silently ignored.
struct CliConfig {
  std::uint64_t seed = 7;
  std::filesystem::path workspace = "workspace";
  std::filesystem::path output = "out";
  ModelConfig model;
  PretrainConfig pretrain;
  AdapterConfig adapter;
  RetrieverFitParams retriever;
  RetrievalConfig retrieval;
  GenerationConfig generation;
  CorpusSpec corpus;
  EvalConfig eval;
  std::vector<UserCredential> users;

  static CliConfig desk_defaults();

  nlohmann::json to_json() const;
  static CliConfig from_json(const nlohmann::json& j);
  // Parses a config file and overlays it on the desk defaults.
  static CliConfig load(const std::filesystem::path& path);

  // Canonical form: sorted keys, two-space indent, trailing newline.
  std::string canonical() const;
  std::string config_hash() const;
};

}  // namespace aswap
