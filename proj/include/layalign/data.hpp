// SPDX-License-Identifier: Apache-2.0
#pragma once

// Vocabulary, corpus records and the synthetic cipher-language generator.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "layalign/decoder.hpp"
#include "layalign/model.hpp"

namespace layalign {

class Vocabulary {
 public:
  static constexpr const char* kSpecials[] = {"<pad>", "<bos>", "<sep>", "<eos>", "<unk>"};

  Vocabulary();  // specials only
  explicit Vocabulary(const std::vector<std::string>& content);

  std::int32_t add(const std::string& token);
  std::int32_t id(const std::string& token) const;  // <unk> when absent
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(std::int32_t id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  static bool is_special(const std::string& token);

  std::vector<std::int32_t> encode(const std::string& text) const;
  /// Joins tokens with single spaces; special tokens are dropped.
  std::string decode(const std::vector<std::int32_t>& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

/// Splits on whitespace and rejoins with single spaces.
std::string normalize_whitespace(const std::string& text);
std::vector<std::string> split_tokens(const std::string& text);

struct ParallelExample {
  std::string src;
  std::string tgt;  // English side
  std::string lang;
  Stage stage = Stage::kTranslation;
  std::string id;  // optional; parallel sets pair records by it
};

std::string stage_name(Stage s);
Stage parse_stage(const std::string& s);

/// Line-delimited JSON records {src, tgt, lang, stage[, id]}. Errors carry
/// file:line context. With `expected` set, a record of the other stage is an
/// ingestion error.
std::vector<ParallelExample> read_corpus(const std::filesystem::path& path,
                                         std::optional<Stage> expected = std::nullopt);
std::string format_corpus(const std::vector<ParallelExample>& records);

/// Target ids end with <eos>.
std::vector<TokenizedExample> tokenize(const std::vector<ParallelExample>& records,
                                       const Vocabulary& vocab);

struct SynthLanguage {
  std::string name;
  std::string tier = "high";
  std::string cipher = "random";  // random | identity | explicit
  std::map<std::string, std::string> mapping;  // explicit only: base token -> cipher token
  bool shared_script = false;  // surface tokens reuse the base spelling
};

struct SynthSpec {
  std::string base_language = "en";
  std::vector<std::string> base_words;
  std::vector<SynthLanguage> languages;
  std::map<std::string, std::size_t> stage1_counts;  // tier -> sentences per language
  std::map<std::string, std::size_t> stage2_counts;  // tier -> task items per language
  std::vector<std::string> tasks = {"arithmetic"};    // arithmetic | copy | classification
  std::size_t eval_items = 30;            // held-out task items per task, shared by languages
  std::size_t parallel_sentences = 40;    // held-out parallel set for representation analysis
  std::size_t pretrain_sentences = 2000;  // base-language copy records
  std::size_t pretrain_task_copies = 10;  // repeats of every base-language task item
  std::size_t min_len = 3;
  std::size_t max_len = 7;
  std::uint64_t seed = 1;

  static SynthSpec defaults();
  void validate() const;
  /// Content tokens every cipher permutes: digits, operators, words, task words.
  std::vector<std::string> content_vocabulary() const;
};

struct SynthCorpus {
  Vocabulary vocab;
  std::vector<ParallelExample> stage1, stage2, eval, parallel, pretrain;
  std::map<std::string, std::string> tiers;  // language -> tier
  std::map<std::string, std::map<std::string, std::string>> ciphers;  // lang -> base -> surface
};

SynthCorpus generate_synthetic_corpus(const SynthSpec& spec);

/// Writes vocab.txt, stage1.jsonl, stage2.jsonl, eval.jsonl, parallel.jsonl,
/// pretrain.jsonl, tiers.json and lexicon.json. Files are staged in a temporary directory
/// and renamed into place only after all of them were written.
void write_synthetic_corpus(const SynthCorpus& corpus, const std::filesystem::path& dir);

std::map<std::string, std::string> read_tiers(const std::filesystem::path& path);

/// language -> base token -> surface token, as written to lexicon.json.
using Lexicon = std::map<std::string, std::map<std::string, std::string>>;
Lexicon read_lexicon(const std::filesystem::path& path);

/// (base id, surface id) for every lexicon entry. Throws InputError for
/// tokens missing from `vocab`.
std::vector<std::pair<std::int32_t, std::int32_t>> lexicon_pairs(const Lexicon& lexicon,
                                                                 const Vocabulary& vocab);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

/// Atomic text write via a sibling temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace layalign
