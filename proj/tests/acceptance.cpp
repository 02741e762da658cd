// Acceptance suite: drives the full desk pipeline and checks each release
// criterion at its stated tolerance, printing one PASS/FAIL line per
// criterion. Exits nonzero if any criterion fails.

#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "aswap/eval.hpp"
#include "gradcheck.hpp"

using namespace aswap;
namespace fs = std::filesystem;

namespace {

struct Criterion {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Criterion> results;

void record(int id, const std::string& name, bool pass,
            const std::string& detail) {
  results.push_back({id, name, pass, detail});
  std::printf("[%s] criterion %d (%s): %s\n", pass ? "PASS" : "FAIL", id,
              name.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof(buf), format, args);
  va_end(args);
  return buf;
}

// --- criterion 1: gradient correctness -------------------------------------

void check_gradients() {
  using aswap::testing::gradcheck;
  struct Case {
    const char* name;
    std::function<aswap::testing::GradcheckResult(Rng&)> run;
  };
  auto two_input = [](auto op, Index r1, Index c1, Index r2, Index c2) {
    return [=](Rng& rng) {
      return gradcheck(
          [=](const std::vector<Tensor<double>>& in) {
            return sum_all(mul(op(in[0], in[1]), op(in[0], in[1])));
          },
          {Mat<double>(rng.normal<double>(r1, c1, 1.0)),
           Mat<double>(rng.normal<double>(r2, c2, 1.0))});
    };
  };
  std::vector<Case> cases;
  cases.push_back({"add", two_input([](auto& a, auto& b) { return add(a, b); },
                                    3, 4, 3, 4)});
  cases.push_back({"sub", two_input([](auto& a, auto& b) { return sub(a, b); },
                                    3, 4, 3, 4)});
  cases.push_back({"mul", two_input([](auto& a, auto& b) { return mul(a, b); },
                                    3, 4, 3, 4)});
  cases.push_back({"matmul", two_input(
      [](auto& a, auto& b) { return matmul(a, b); }, 3, 4, 4, 2)});
  cases.push_back({"matmul_nt", two_input(
      [](auto& a, auto& b) { return matmul_nt(a, b); }, 3, 4, 2, 4)});
  cases.push_back({"matmul_tn", two_input(
      [](auto& a, auto& b) { return matmul_tn(a, b); }, 4, 3, 4, 2)});
  cases.push_back({"add_rowvec", two_input(
      [](auto& a, auto& b) { return add_rowvec(a, b); }, 3, 4, 1, 4)});
  cases.push_back({"softmax_rows", [](Rng& rng) {
    return gradcheck(
        [](const std::vector<Tensor<double>>& in) {
          return sum_all(mul(softmax_rows(in[0]), in[1]));
        },
        {Mat<double>(rng.normal<double>(3, 5, 1.0)),
         Mat<double>(rng.normal<double>(3, 5, 1.0))});
  }});
  cases.push_back({"causal_softmax", [](Rng& rng) {
    return gradcheck(
        [](const std::vector<Tensor<double>>& in) {
          return sum_all(mul(softmax_rows(causal_mask(in[0])), in[1]));
        },
        {Mat<double>(rng.normal<double>(4, 4, 1.0)),
         Mat<double>(rng.normal<double>(4, 4, 1.0))});
  }});
  cases.push_back({"layer_norm", [](Rng& rng) {
    return gradcheck(
        [](const std::vector<Tensor<double>>& in) {
          return sum_all(mul(layer_norm_rows(in[0], in[1], in[2]), in[3]));
        },
        {Mat<double>(rng.normal<double>(3, 6, 1.0)),
         Mat<double>(rng.normal<double>(1, 6, 1.0)),
         Mat<double>(rng.normal<double>(1, 6, 1.0)),
         Mat<double>(rng.normal<double>(3, 6, 1.0))});
  }});
  cases.push_back({"gelu", [](Rng& rng) {
    return gradcheck(
        [](const std::vector<Tensor<double>>& in) {
          return sum_all(mul(gelu(in[0]), in[1]));
        },
        {Mat<double>(rng.normal<double>(3, 4, 1.0)),
         Mat<double>(rng.normal<double>(3, 4, 1.0))});
  }});
  cases.push_back({"rows_lookup", [](Rng& rng) {
    std::vector<int> ids{0, 2, 2, 4, 1};
    return gradcheck(
        [ids](const std::vector<Tensor<double>>& in) {
          return sum_all(mul(rows_lookup(in[0], ids), in[1]));
        },
        {Mat<double>(rng.normal<double>(5, 3, 1.0)),
         Mat<double>(rng.normal<double>(5, 3, 1.0))});
  }});
  cases.push_back({"slice_concat", [](Rng& rng) {
    return gradcheck(
        [](const std::vector<Tensor<double>>& in) {
          std::vector<Tensor<double>> parts{cols_slice(in[0], 2, 2),
                                            cols_slice(in[0], 0, 2)};
          return sum_all(mul(hconcat(parts), in[1]));
        },
        {Mat<double>(rng.normal<double>(3, 4, 1.0)),
         Mat<double>(rng.normal<double>(3, 4, 1.0))});
  }});
  cases.push_back({"cross_entropy", [](Rng& rng) {
    std::vector<int> targets;
    for (int i = 0; i < 4; ++i) targets.push_back(rng.uniform_int(0, 6));
    return gradcheck(
        [targets](const std::vector<Tensor<double>>& in) {
          return cross_entropy_mean(in[0], targets);
        },
        {Mat<double>(rng.normal<double>(4, 7, 1.0))});
  }});

  double worst = 0.0;
  long cases_run = 0;
  std::string worst_name = "-";
  for (const auto& c : cases) {
    for (int seed = 0; seed < 100; ++seed) {
      Rng rng(std::uint64_t(seed) * 6151 + 3);
      const auto res = c.run(rng);
      ++cases_run;
      if (res.max_rel_error > worst) {
        worst = res.max_rel_error;
        worst_name = c.name;
      }
    }
  }
  record(1, "gradient-correctness", worst < 1e-5,
         fmt("%ld random cases over %zu primitives, worst rel err %.2e (%s), "
             "tolerance 1e-5",
             cases_run, cases.size(), worst, worst_name.c_str()));
}

// --- criterion 2: adapter identity and linearity ----------------------------

void check_adapter_algebra(const EvalHarness& h) {
  const auto& base = h.base();
  const ModelConfig& mcfg = base.config();
  const AdapterConfig& acfg = h.config().adapter;

  bool identity_ok = true;
  auto fresh = init_adapter<float>(mcfg, acfg, "probe", "probe-a",
                                   base.weights_hash());
  auto zero_deltas = compose<float>({{&fresh, 1.0}});
  for (const char* text : {"eaea bdbd cac", "01234 | qrst", "zz@@##"}) {
    std::vector<int> ids = tokenize(text);
    const auto with = base.forward_logits(ids, &zero_deltas);
    const auto without = base.forward_logits(ids);
    identity_ok &= (with - without).cwiseAbs().maxCoeff() == 0.0f;
  }

  // Weighted composition versus element-wise sums.
  Rng rng(404);
  auto a1 = init_adapter<float>(mcfg, acfg, "p1", "p1", base.weights_hash());
  auto a2 = init_adapter<float>(mcfg, acfg, "p2", "p2", base.weights_hash());
  for (auto& [ref, pair] : a1.targets) {
    pair.b = rng.normal<float>(pair.b.rows(), pair.b.cols(), 0.5f);
  }
  for (auto& [ref, pair] : a2.targets) {
    pair.a = rng.normal<float>(pair.a.rows(), pair.a.cols(), 0.5f);
    pair.b = rng.normal<float>(pair.b.rows(), pair.b.cols(), 0.5f);
  }
  auto mix = compose<float>({{&a1, 0.25}, {&a2, 0.75}});
  float max_err = 0.0f;
  for (auto& [ref, pair] : a1.targets) {
    Mat<float> expect =
        0.25f * effective_delta(a1, ref) + 0.75f * effective_delta(a2, ref);
    max_err = std::max(max_err, (*mix.find(ref) - expect).cwiseAbs().maxCoeff());
  }

  // Top-1 mixture equals plain single-adapter inference, bitwise.
  bool top1_ok = true;
  const auto by_group = h.registry().adapter_by_group();
  const auto first_group = by_group.begin();
  auto adapter = h.registry().load_adapter(first_group->second);
  RankedAdapters ranked;
  ranked.k = 1;
  ranked.weighting = WeightingMode::Uniform;
  ranked.entries.push_back({first_group->second, -1.0});
  AdapterMix top1_mix = ranked.to_mix();
  std::vector<std::pair<const Adapter<float>*, double>> weighted;
  for (const auto& e : top1_mix.entries) weighted.emplace_back(&adapter, e.weight);
  auto mix_deltas = compose<float>(weighted);
  auto single_deltas = compose<float>({{&adapter, 1.0}});
  for (const auto& doc_id : h.eval_doc_ids(first_group->first)) {
    const std::string bytes = h.registry().document_bytes(doc_id);
    std::vector<int> ids = tokenize(bytes);
    if (Index(ids.size()) > mcfg.context_len) ids.resize(std::size_t(mcfg.context_len));
    const auto via_mix = base.forward_logits(ids, &mix_deltas);
    const auto via_single = base.forward_logits(ids, &single_deltas);
    top1_ok &= (via_mix - via_single).cwiseAbs().maxCoeff() == 0.0f;
  }

  const double ratio =
      double(fresh.param_count()) / double(base.param_count());
  record(2, "adapter-identity-linearity",
         identity_ok && max_err < 1e-6f && top1_ok,
         fmt("init identity bitwise=%s, composition max err %.2e (tol 1e-6), "
             "top-1 mix == single adapter bitwise=%s, param ratio %.2f%%",
             identity_ok ? "yes" : "no", double(max_err),
             top1_ok ? "yes" : "no", 100.0 * ratio));
}

// --- criteria 3-5: retrieval, oracle advantage, access control --------------

void check_retrieval_block(EvalHarness& h) {
  auto result = h.retrieval_eval();
  h.access_control_eval();
  const int n = int(result.docs.size());

  int oracle_better = 0;
  for (const auto& d : result.docs) oracle_better += d.oracle_ppl < d.base_ppl;
  const double mean_oracle = result.mean(&EvalDoc::oracle_ppl);
  const double mean_top1 = result.mean(&EvalDoc::top1_ppl);
  record(3, "oracle-advantage",
         oracle_better >= int(std::ceil(0.95 * n)) && mean_oracle <= mean_top1,
         fmt("oracle < base on %d/%d docs (need 95%%), mean oracle %.2f <= "
             "mean top-1 %.2f",
             oracle_better, n, mean_oracle, mean_top1));

  const double acc1 = result.accuracy(&EvalDoc::top1_hit);
  const double acc2 = result.accuracy(&EvalDoc::top2_hit);
  const double acc3 = result.accuracy(&EvalDoc::top3_hit);
  const double acc_pca = result.accuracy(&EvalDoc::top1_pca_hit);
  record(4, "retriever-accuracy",
         acc1 >= 0.90 && acc3 >= acc2 && acc2 >= acc1 && acc1 >= acc_pca + 0.05,
         fmt("top-1 %.1f%% (need >=90%%), nesting %.1f%% <= %.1f%% <= %.1f%%, "
             "LDA %.1f%% >= PCA %.1f%% + 5 points",
             100 * acc1, 100 * acc1, 100 * acc2, 100 * acc3, 100 * acc1,
             100 * acc_pca));

  const double mean_no = result.mean(&EvalDoc::no_access_ppl);
  const double ratio = mean_no / mean_top1;

  // Access soundness over randomized users and queries.
  auto retriever = h.registry().load_retriever();
  EmbeddingProvider provider(h.base());
  const auto by_group = h.registry().adapter_by_group();
  std::vector<Vec> query_pool;
  for (const auto& [gid, aid] : by_group) {
    for (const auto& doc_id : h.eval_doc_ids(gid)) {
      query_pool.push_back(provider.embed(h.registry().document_bytes(doc_id)));
    }
  }
  std::vector<std::string> all_ids;
  for (const auto& [gid, aid] : by_group) all_ids.push_back(aid);
  Rng rng(2024);
  int trials = 0, leaks = 0;
  for (int t = 0; t < 1000; ++t) {
    std::set<std::string> accessible;
    for (const auto& id : all_ids) {
      if (rng.uniform() < 0.5) accessible.insert(id);
    }
    if (accessible.empty()) {
      accessible.insert(all_ids[std::size_t(rng.uniform_int(
          0, int(all_ids.size()) - 1))]);
    }
    const Vec& q = query_pool[std::size_t(
        rng.uniform_int(0, int(query_pool.size()) - 1))];
    const int k = rng.uniform_int(1, 3);
    auto ranked = rank_and_filter(retriever.gmm, retriever.projection, q,
                                  by_group, accessible, k, WeightingMode::Uniform);
    ++trials;
    for (const auto& e : ranked.entries) leaks += accessible.count(e.adapter_id) == 0;
  }
  record(5, "access-control",
         ratio >= 1.5 && leaks == 0 && trials >= 1000,
         fmt("no-access/with-access perplexity ratio %.2f (need >=1.5), "
             "restricted selections %d over %d randomized trials",
             ratio, leaks, trials));
}

// --- criterion 6: purge ------------------------------------------------------

void check_purge(EvalHarness& h) {
  auto result = h.purge_eval();
  const int n = int(result.docs.size());
  int increased = 0;
  bool determinism = true;
  for (const auto& d : result.docs) {
    increased += d.after_ppl > d.before_ppl;
    determinism &= d.determinism_ok;
  }
  const double mean_retrain = result.total_retrain_seconds / double(n);
  const double bound = result.build_all_groups_seconds / 5.0;
  const int groups = int(h.registry().groups().size());
  record(6, "purge-removal",
         increased >= int(std::ceil(0.95 * n)) && determinism &&
             groups >= 5 && mean_retrain < bound &&
             mean_retrain < result.est_full_retrain_seconds,
         fmt("perplexity increased on %d/%d purged docs, retrain bitwise "
             "deterministic=%s, mean retrain %.1fs < %.1fs (1/5 of all-%d-"
             "groups build), full-corpus estimate %.1fs",
             increased, n, determinism ? "yes" : "no", mean_retrain, bound,
             groups, result.est_full_retrain_seconds));
}

// --- criterion 7: forgetting -------------------------------------------------

void check_forgetting(EvalHarness& h) {
  auto result = h.forgetting_eval();
  const std::size_t stages = result.as.size();
  bool as_constant = stages >= 6;
  for (double v : result.as) as_constant &= v == result.as.front();
  const double ft_rise = result.ft.back() / result.ft.front();
  const bool rt_better = result.rt.back() <= result.ft.back();
  record(7, "forgetting",
         as_constant && ft_rise >= 1.5 && rt_better,
         fmt("AS exactly constant over %zu stages=%s, FT month-1 rise %.2fx "
             "(need >=1.5), RT final %.2f <= FT final %.2f",
             stages, as_constant ? "yes" : "no", ft_rise, result.rt.back(),
             result.ft.back()));
}

// --- criterion 8: shard trade-off ---------------------------------------------

void check_shards(EvalHarness& h) {
  auto result = h.shard_tradeoff_eval();
  bool monotone = true;
  bool counts_ok = true;
  const int total = h.config().corpus.shard_docs;
  for (std::size_t i = 0; i < result.points.size(); ++i) {
    const auto& p = result.points[i];
    counts_ok &= p.adapter_count ==
                 (total + p.shard_size - 1) / p.shard_size;
    if (i > 0) {
      monotone &= p.mean_train_seconds >=
                  result.points[i - 1].mean_train_seconds;
    }
  }
  const bool csv_ok =
      fs::exists(h.config().output / "shards.csv") &&
      read_file(h.config().output / "shards.csv").find("mean_perplexity") !=
          std::string::npos;
  std::string trend;
  for (const auto& p : result.points) {
    trend += fmt("%d:%.2f ", p.shard_size, p.mean_perplexity);
  }
  record(8, "shard-tradeoff", monotone && counts_ok && csv_ok,
         fmt("per-adapter seconds non-decreasing=%s, counts=ceil(N/shard)=%s, "
             "perplexity-vs-size CSV emitted=%s (%s)",
             monotone ? "yes" : "no", counts_ok ? "yes" : "no",
             csv_ok ? "yes" : "no", trend.c_str()));
}

// --- criterion 9: determinism --------------------------------------------------

void check_determinism(const CliConfig& cfg1, const CliConfig& cfg2) {
  bool all_equal = true;
  std::string mismatch;
  for (const char* name : {"retrieval.csv", "access.csv", "purge.csv",
                           "forgetting.csv", "shards.csv", "manifest.json"}) {
    const std::string a = read_file(cfg1.output / name);
    const std::string b = read_file(cfg2.output / name);
    if (a != b) {
      all_equal = false;
      mismatch += std::string(name) + " ";
    }
  }
  record(9, "replay-determinism", all_equal,
         all_equal ? "all experiment CSVs and the manifest byte-identical "
                     "across two runs of the same config hash"
                   : "mismatch in: " + mismatch);
}

}  // namespace

int main() {
  const fs::path root = "aswap_acceptance";
  CliConfig cfg = CliConfig::desk_defaults();
  cfg.workspace = root / "ws";
  cfg.output = root / "run1";

  std::printf("acceptance: building desk pipeline (config %s)\n",
              cfg.config_hash().substr(0, 12).c_str());
  std::fflush(stdout);

  check_gradients();

  EvalHarness run1(cfg);
  run1.build();
  check_adapter_algebra(run1);
  check_retrieval_block(run1);
  check_purge(run1);
  check_forgetting(run1);
  check_shards(run1);
  run1.write_manifest();

  CliConfig cfg2 = cfg;
  cfg2.output = root / "run2";
  EvalHarness run2(cfg2);
  run2.run_all();
  check_determinism(cfg, cfg2);

  int failed = 0;
  for (const auto& c : results) failed += c.pass ? 0 : 1;
  std::printf("acceptance: %zu criteria, %d failed\n", results.size(), failed);
  return failed == 0 ? 0 : 1;
}
