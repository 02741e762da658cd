#include "aswap/corpus.hpp"

#include <fstream>

#include "aswap/bytesio.hpp"
#include "aswap/tensor.hpp"

namespace aswap {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kStyleAlphabets = {
    "0123456789", ".,;:!?", "+-*/=<>", "()[]{}", "#$%&@~", "'\"^_|",
};

std::string style_chunk(Rng& rng, int max_len) {
  const std::string& alpha =
      kStyleAlphabets[std::size_t(rng.uniform_int(0, int(kStyleAlphabets.size()) - 1))];
  const int len = rng.uniform_int(0, max_len);
  std::string out;
  out.reserve(std::size_t(len));
  for (int i = 0; i < len; ++i) {
    if (i > 0 && i % 7 == 6) {
      out.push_back(' ');
    } else {
      out.push_back(alpha[std::size_t(rng.uniform_int(0, int(alpha.size()) - 1))]);
    }
  }
  return out;
}

std::string word_from(Rng& rng, const std::string& alphabet, int min_len,
                      int max_len) {
  const int len = rng.uniform_int(min_len, max_len);
  std::string out;
  for (int i = 0; i < len; ++i) {
    out.push_back(alphabet[std::size_t(rng.uniform_int(0, int(alphabet.size()) - 1))]);
  }
  return out;
}

// One partition document: shared-style prefix, then a tag word fixed per
// partition, then doc-unique words from the partition's alphabet slice.
std::string partition_doc(Rng& rng, const std::string& alphabet,
                          const std::string& tag, int body_words,
                          int style_max_len) {
  std::string doc = style_chunk(rng, style_max_len);
  if (!doc.empty()) doc += " | ";
  doc += tag;
  for (int w = 0; w < body_words; ++w) {
    doc.push_back(' ');
    doc += word_from(rng, alphabet, 3, 6);
  }
  return doc;
}

void write_doc(const fs::path& dir, int index, const std::string& text) {
  char name[32];
  std::snprintf(name, sizeof(name), "doc_%03d.txt", index);
  atomic_write_file(dir / name, text);
}

void emit_partition(const fs::path& dir, Rng& rng, const std::string& alphabet,
                    const std::string& tag, int docs, int body_words,
                    int style_max_len) {
  fs::create_directories(dir);
  for (int i = 0; i < docs; ++i) {
    write_doc(dir, i, partition_doc(rng, alphabet, tag, body_words, style_max_len));
  }
}

}  // namespace

GeneratedCorpus generate_corpus(const fs::path& root, const CorpusSpec& spec) {
  if (spec.group_count < 2 || spec.group_count > 6) {
    throw ShapeError("corpus: group_count must be in [2, 6]");
  }
  if (spec.months < 1 || spec.months > 6) {
    throw ShapeError("corpus: months must be in [1, 6]");
  }
  GeneratedCorpus out;
  out.groups_dir = root / "groups";
  out.months_dir = root / "months";
  out.shard_dir = root / "shard";
  Rng rng(spec.seed);

  // Access groups over disjoint lowercase slices: a-d, e-h, i-l, m-p, q-t, u-x.
  const std::string lowercase = "abcdefghijklmnopqrstuvwx";
  for (int g = 0; g < spec.group_count; ++g) {
    const std::string id = "g" + std::to_string(g);
    const std::string alphabet = lowercase.substr(std::size_t(g) * 4, 4);
    const std::string tag = word_from(rng, alphabet, 5, 5);
    emit_partition(out.groups_dir / id, rng, alphabet, tag, spec.docs_per_group,
                   spec.body_words, spec.style_max_len);
    out.group_ids.push_back(id);
  }

  // Months over disjoint uppercase slices: A-D, E-H, ...
  const std::string uppercase = "ABCDEFGHIJKLMNOPQRSTUVWX";
  for (int m = 0; m < spec.months; ++m) {
    const std::string id = "m" + std::to_string(m + 1);
    const std::string alphabet = uppercase.substr(std::size_t(m) * 4, 4);
    const std::string tag = word_from(rng, alphabet, 5, 5);
    emit_partition(out.months_dir / id, rng, alphabet, tag, spec.docs_per_month,
                   spec.body_words, spec.style_max_len);
    out.month_ids.push_back(id);
  }

  // Shard corpus: one label, full lowercase alphabet.
  {
    const std::string tag = word_from(rng, lowercase, 5, 5);
    emit_partition(out.shard_dir / "shardbase", rng, lowercase, tag,
                   spec.shard_docs, spec.body_words, spec.style_max_len);
  }

  // Neutral pretraining text: every byte class the partitions use shows up
  // (letters both cases, digits, punctuation), but no partition document.
  const std::string all_letters = "abcdefghijklmnopqrstuvwxyz";
  const std::string all_upper = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
  for (int d = 0; d < spec.neutral_docs; ++d) {
    std::string s = style_chunk(rng, spec.style_max_len / 2);
    if (!s.empty()) s += " | ";
    const int words = 4 + rng.uniform_int(0, 5);
    for (int w = 0; w < words; ++w) {
      if (w) s.push_back(' ');
      const double pick = rng.uniform();
      if (pick < 0.55) {
        s += word_from(rng, all_letters, 2, 7);
      } else if (pick < 0.8) {
        s += word_from(rng, all_upper, 2, 6);
      } else {
        s += word_from(rng, kStyleAlphabets[0], 1, 4);
      }
    }
    out.neutral.push_back(std::move(s));
  }
  return out;
}

}  // namespace aswap
