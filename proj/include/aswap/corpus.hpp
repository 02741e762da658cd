#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace aswap {

// Synthetic desk corpora. Every partition (access group or month) writes
// over its own disjoint letter slice, so adapters hold genuinely separate
// knowledge and sequential fine-tuning interferes across partitions.
// Documents open with a shared "style" run of variable length: high-variance
// directions common to all partitions that a purely unsupervised projection
// wastes its dimensions on, while a label-aware projection ignores them.
struct CorpusSpec {
  std::uint64_t seed = 7;
  int group_count = 6;       // access-control groups (max 6)
  int docs_per_group = 24;
  int months = 6;            // forgetting stages (max 6)
  int docs_per_month = 8;
  int shard_docs = 32;       // single-label corpus for the shard trade-off
  int neutral_docs = 192;    // base-model pretraining text
  int body_words = 5;
  int style_max_len = 20;

  bool operator==(const CorpusSpec&) const = default;
};

struct GeneratedCorpus {
  std::filesystem::path groups_dir;
  std::filesystem::path months_dir;
  std::filesystem::path shard_dir;
  std::vector<std::string> neutral;
  std::vector<std::string> group_ids;
  std::vector<std::string> month_ids;
};

// Writes groups/, months/, shard/ corpora under root and returns the neutral
// pretraining documents in memory. Fully determined by the CorpusSpec fields.
GeneratedCorpus generate_corpus(const std::filesystem::path& root,
                                const CorpusSpec& spec);

}  // namespace aswap
