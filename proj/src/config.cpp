#include "aswap/config.hpp"

#include "aswap/bytesio.hpp"
#include "aswap/sha256.hpp"

namespace aswap {

using nlohmann::json;

namespace {

// Rejects keys that are not in the allowed set; the error names the key.
void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw UsageError("unknown config key \"" + key + "\" in " + where);
    }
  }
}

template <typename T>
void maybe(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

json model_to_json(const ModelConfig& m) {
  return {{"n_layers", m.n_layers},   {"d_model", m.d_model},
          {"n_heads", m.n_heads},     {"d_ffn", m.d_ffn},
          {"context_len", m.context_len}, {"vocab_size", m.vocab_size},
          {"init_seed", m.init_seed}};
}

void model_from_json(const json& j, ModelConfig& m) {
  check_keys(j, {"n_layers", "d_model", "n_heads", "d_ffn", "context_len",
                 "vocab_size", "init_seed"},
             "model");
  maybe(j, "n_layers", m.n_layers);
  maybe(j, "d_model", m.d_model);
  maybe(j, "n_heads", m.n_heads);
  maybe(j, "d_ffn", m.d_ffn);
  maybe(j, "context_len", m.context_len);
  maybe(j, "vocab_size", m.vocab_size);
  maybe(j, "init_seed", m.init_seed);
}

json adapter_to_json(const AdapterConfig& a) {
  return {{"rank", a.rank},
          {"alpha", a.alpha},
          {"targets", target_set_name(a.targets)},
          {"init_seed", a.init_seed},
          {"train",
           {{"epochs", a.train.epochs},
            {"batch_size", a.train.batch_size},
            {"grad_accum_steps", a.train.grad_accum_steps},
            {"lr", a.train.lr}}}};
}

void adapter_from_json(const json& j, AdapterConfig& a,
                       const std::string& where) {
  check_keys(j, {"rank", "alpha", "targets", "init_seed", "train"}, where);
  maybe(j, "rank", a.rank);
  maybe(j, "alpha", a.alpha);
  if (j.contains("targets")) {
    a.targets = target_set_from_name(j.at("targets").get<std::string>());
  }
  maybe(j, "init_seed", a.init_seed);
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, {"epochs", "batch_size", "grad_accum_steps", "lr"},
               where + ".train");
    maybe(t, "epochs", a.train.epochs);
    maybe(t, "batch_size", a.train.batch_size);
    maybe(t, "grad_accum_steps", a.train.grad_accum_steps);
    maybe(t, "lr", a.train.lr);
  }
}

}  // namespace

CliConfig CliConfig::desk_defaults() {
  CliConfig cfg;
  cfg.model.init_seed = 1;

  cfg.pretrain.steps = 500;
  cfg.pretrain.batch_size = 8;
  cfg.pretrain.lr = 1e-3f;
  cfg.pretrain.holdout_docs = 16;
  cfg.pretrain.seed = 1234;

  cfg.adapter.rank = 4;
  cfg.adapter.alpha = 8.0f;
  cfg.adapter.targets = TargetSet::AllLinear;
  cfg.adapter.init_seed = 42;
  cfg.adapter.train.epochs = 80;
  cfg.adapter.train.lr = 1.5e-2f;

  cfg.retriever.kind = ProjectionKind::LDA;
  cfg.retriever.ridge_lambda = 1e-3;
  cfg.retriever.reg_eps = 1e-2;
  cfg.retriever.heldout_fraction = 0.10;
  cfg.retriever.heldout_min = 12;
  cfg.retriever.em_iterations = 0;

  cfg.eval.forgetting_adapter = cfg.adapter;
  cfg.eval.forgetting_adapter.train.epochs = 45;
  cfg.eval.shard_adapter = cfg.adapter;
  cfg.eval.shard_adapter.train.epochs = 40;

  // Desk users: one per group label plus an analyst with broad access.
  for (int g = 0; g < cfg.corpus.group_count; ++g) {
    const std::string label = "g" + std::to_string(g);
    cfg.users.push_back({"user-" + label, {label}});
  }
  cfg.users.push_back(
      {"analyst", {"g0", "g1", "g2", "g3", "g4", "g5", "shardbase"}});
  return cfg;
}

json CliConfig::to_json() const {
  json users_json = json::array();
  for (const auto& u : users) {
    users_json.push_back(
        {{"user_id", u.user_id},
         {"labels", std::vector<std::string>(u.labels.begin(), u.labels.end())}});
  }
  return {
      {"seed", seed},
      {"paths", {{"workspace", workspace.string()}, {"output", output.string()}}},
      {"model", model_to_json(model)},
      {"pretrain",
       {{"steps", pretrain.steps},
        {"batch_size", pretrain.batch_size},
        {"lr", pretrain.lr},
        {"weight_decay", pretrain.weight_decay},
        {"holdout_docs", pretrain.holdout_docs},
        {"seed", pretrain.seed}}},
      {"adapter", adapter_to_json(adapter)},
      {"retriever",
       {{"kind", projection_kind_name(retriever.kind)},
        {"ridge_lambda", retriever.ridge_lambda},
        {"reg_eps", retriever.reg_eps},
        {"heldout_fraction", retriever.heldout_fraction},
        {"heldout_min", retriever.heldout_min},
        {"em_iterations", retriever.em_iterations}}},
      {"retrieval",
       {{"k", retrieval.k}, {"weighting", weighting_mode_name(retrieval.weighting)}}},
      {"generation",
       {{"max_new_tokens", generation.max_new_tokens},
        {"temperature", generation.temperature}}},
      {"corpus",
       {{"seed", corpus.seed},
        {"group_count", corpus.group_count},
        {"docs_per_group", corpus.docs_per_group},
        {"months", corpus.months},
        {"docs_per_month", corpus.docs_per_month},
        {"shard_docs", corpus.shard_docs},
        {"neutral_docs", corpus.neutral_docs},
        {"body_words", corpus.body_words},
        {"style_max_len", corpus.style_max_len}}},
      {"eval",
       {{"eval_docs_per_group", eval.eval_docs_per_group},
        {"purge_docs", eval.purge_docs},
        {"shard_sizes", eval.shard_sizes},
        {"forgetting_adapter", adapter_to_json(eval.forgetting_adapter)},
        {"shard_adapter", adapter_to_json(eval.shard_adapter)}}},
      {"users", users_json},
  };
}

CliConfig CliConfig::from_json(const json& j) {
  CliConfig cfg = desk_defaults();
  check_keys(j,
             {"seed", "paths", "model", "pretrain", "adapter", "retriever",
              "retrieval", "generation", "corpus", "eval", "users"},
             "config root");
  maybe(j, "seed", cfg.seed);
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    check_keys(p, {"workspace", "output"}, "paths");
    if (p.contains("workspace")) cfg.workspace = p.at("workspace").get<std::string>();
    if (p.contains("output")) cfg.output = p.at("output").get<std::string>();
  }
  if (j.contains("model")) model_from_json(j.at("model"), cfg.model);
  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    check_keys(p, {"steps", "batch_size", "lr", "weight_decay", "holdout_docs", "seed"},
               "pretrain");
    maybe(p, "steps", cfg.pretrain.steps);
    maybe(p, "batch_size", cfg.pretrain.batch_size);
    maybe(p, "lr", cfg.pretrain.lr);
    maybe(p, "weight_decay", cfg.pretrain.weight_decay);
    maybe(p, "holdout_docs", cfg.pretrain.holdout_docs);
    maybe(p, "seed", cfg.pretrain.seed);
  }
  if (j.contains("adapter")) adapter_from_json(j.at("adapter"), cfg.adapter, "adapter");
  if (j.contains("retriever")) {
    const json& r = j.at("retriever");
    check_keys(r,
               {"kind", "ridge_lambda", "reg_eps", "heldout_fraction",
                "heldout_min", "em_iterations"},
               "retriever");
    if (r.contains("kind")) {
      cfg.retriever.kind = projection_kind_from_name(r.at("kind").get<std::string>());
    }
    maybe(r, "ridge_lambda", cfg.retriever.ridge_lambda);
    maybe(r, "reg_eps", cfg.retriever.reg_eps);
    maybe(r, "heldout_fraction", cfg.retriever.heldout_fraction);
    maybe(r, "heldout_min", cfg.retriever.heldout_min);
    maybe(r, "em_iterations", cfg.retriever.em_iterations);
  }
  if (j.contains("retrieval")) {
    const json& r = j.at("retrieval");
    check_keys(r, {"k", "weighting"}, "retrieval");
    maybe(r, "k", cfg.retrieval.k);
    if (r.contains("weighting")) {
      cfg.retrieval.weighting =
          weighting_mode_from_name(r.at("weighting").get<std::string>());
    }
  }
  if (j.contains("generation")) {
    const json& g = j.at("generation");
    check_keys(g, {"max_new_tokens", "temperature"}, "generation");
    maybe(g, "max_new_tokens", cfg.generation.max_new_tokens);
    maybe(g, "temperature", cfg.generation.temperature);
  }
  if (j.contains("corpus")) {
    const json& c = j.at("corpus");
    check_keys(c,
               {"seed", "group_count", "docs_per_group", "months",
                "docs_per_month", "shard_docs", "neutral_docs", "body_words",
                "style_max_len"},
               "corpus");
    maybe(c, "seed", cfg.corpus.seed);
    maybe(c, "group_count", cfg.corpus.group_count);
    maybe(c, "docs_per_group", cfg.corpus.docs_per_group);
    maybe(c, "months", cfg.corpus.months);
    maybe(c, "docs_per_month", cfg.corpus.docs_per_month);
    maybe(c, "shard_docs", cfg.corpus.shard_docs);
    maybe(c, "neutral_docs", cfg.corpus.neutral_docs);
    maybe(c, "body_words", cfg.corpus.body_words);
    maybe(c, "style_max_len", cfg.corpus.style_max_len);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e,
               {"eval_docs_per_group", "purge_docs", "shard_sizes",
                "forgetting_adapter", "shard_adapter"},
               "eval");
    maybe(e, "eval_docs_per_group", cfg.eval.eval_docs_per_group);
    maybe(e, "purge_docs", cfg.eval.purge_docs);
    maybe(e, "shard_sizes", cfg.eval.shard_sizes);
    if (e.contains("forgetting_adapter")) {
      adapter_from_json(e.at("forgetting_adapter"), cfg.eval.forgetting_adapter,
                        "eval.forgetting_adapter");
    }
    if (e.contains("shard_adapter")) {
      adapter_from_json(e.at("shard_adapter"), cfg.eval.shard_adapter,
                        "eval.shard_adapter");
    }
  }
  if (j.contains("users")) {
    cfg.users.clear();
    for (const json& ju : j.at("users")) {
      check_keys(ju, {"user_id", "labels"}, "users[]");
      UserCredential u;
      u.user_id = ju.at("user_id").get<std::string>();
      for (const json& l : ju.at("labels")) u.labels.insert(l.get<std::string>());
      cfg.users.push_back(std::move(u));
    }
  }
  return cfg;
}

CliConfig CliConfig::load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw UsageError("malformed config file " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("config root must be a JSON object");
  return from_json(j);
}

std::string CliConfig::canonical() const { return to_json().dump(2) + "\n"; }

std::string CliConfig::config_hash() const {
  // Identifies the experiment, not the environment: two runs of the same
  // configuration into different directories share a hash.
  json j = to_json();
  j.erase("paths");
  return Sha256::hex_digest(j.dump(2) + "\n");
}

}  // namespace aswap
