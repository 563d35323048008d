// SPDX-License-Identifier: Apache-2.0
#include "layalign/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <sstream>

namespace layalign {

namespace fs = std::filesystem;
using nlohmann::json;

Vocabulary::Vocabulary() {
  for (const char* s : kSpecials) add(s);
}

Vocabulary::Vocabulary(const std::vector<std::string>& content) : Vocabulary() {
  for (const auto& t : content) add(t);
}

std::int32_t Vocabulary::add(const std::string& token) {
  if (token.empty() || token.find_first_of(" \t\r\n") != std::string::npos) {
    throw InputError("vocabulary token '" + token + "' is empty or contains whitespace");
  }
  const auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const auto id = static_cast<std::int32_t>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

std::int32_t Vocabulary::id(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? 4 : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::is_special(const std::string& token) {
  return std::any_of(std::begin(kSpecials), std::end(kSpecials),
                     [&](const char* s) { return token == s; });
}

std::vector<std::string> split_tokens(const std::string& text) {
  std::istringstream ss(text);
  std::vector<std::string> out;
  for (std::string t; ss >> t;) out.push_back(t);
  return out;
}

std::string normalize_whitespace(const std::string& text) {
  std::string out;
  for (const auto& t : split_tokens(text)) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

std::vector<std::int32_t> Vocabulary::encode(const std::string& text) const {
  std::vector<std::int32_t> ids;
  for (const auto& t : split_tokens(text)) ids.push_back(id(t));
  return ids;
}

std::string Vocabulary::decode(const std::vector<std::int32_t>& ids) const {
  std::string out;
  for (std::int32_t i : ids) {
    if (i >= 0 && static_cast<std::size_t>(i) < std::size(kSpecials)) continue;
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

void Vocabulary::save(const fs::path& path) const {
  std::string s;
  for (const auto& t : tokens_) s += t + "\n";
  write_file_atomic(path, s);
}

Vocabulary Vocabulary::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  const std::size_t n_special = std::size(kSpecials);
  if (lines.size() < n_special) throw InputError(path.string() + ": vocabulary lacks special tokens");
  for (std::size_t i = 0; i < n_special; ++i) {
    if (lines[i] != kSpecials[i]) {
      throw InputError(path.string() + ":" + std::to_string(i + 1) + ": expected " + kSpecials[i]);
    }
  }
  Vocabulary v;
  for (std::size_t i = n_special; i < lines.size(); ++i) {
    if (v.contains(lines[i])) {
      throw InputError(path.string() + ":" + std::to_string(i + 1) + ": duplicate token " +
                       lines[i]);
    }
    v.add(lines[i]);
  }
  return v;
}

std::string stage_name(Stage s) { return s == Stage::kTranslation ? "translation" : "task"; }

Stage parse_stage(const std::string& s) {
  if (s == "translation") return Stage::kTranslation;
  if (s == "task") return Stage::kTask;
  throw InputError("unknown stage tag '" + s + "'");
}

std::vector<ParallelExample> read_corpus(const fs::path& path, std::optional<Stage> expected) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path.string());
  std::vector<ParallelExample> out;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw InputError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw InputError(where + "record is not an object");
    for (const auto& [key, value] : j.items()) {
      if (key != "src" && key != "tgt" && key != "lang" && key != "stage" && key != "id") {
        throw InputError(where + "unknown field '" + key + "'");
      }
      if (!value.is_string()) throw InputError(where + "field '" + key + "' must be a string");
    }
    ParallelExample ex;
    for (const char* key : {"src", "tgt", "lang", "stage"}) {
      if (!j.contains(key)) throw InputError(where + "missing field '" + key + "'");
    }
    ex.src = j["src"].get<std::string>();
    ex.tgt = j["tgt"].get<std::string>();
    ex.lang = j["lang"].get<std::string>();
    if (j.contains("id")) ex.id = j["id"].get<std::string>();
    try {
      ex.stage = parse_stage(j["stage"].get<std::string>());
    } catch (const InputError& e) {
      throw InputError(where + e.what());
    }
    if (split_tokens(ex.src).empty() || split_tokens(ex.tgt).empty() || ex.lang.empty()) {
      throw InputError(where + "src, tgt and lang must be nonempty");
    }
    if (expected && ex.stage != *expected) {
      throw InputError(where + stage_name(ex.stage) + "-tagged record in a " +
                       stage_name(*expected) + " corpus");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::string format_corpus(const std::vector<ParallelExample>& records) {
  std::string s;
  for (const auto& r : records) {
    json j;
    j["src"] = r.src;
    j["tgt"] = r.tgt;
    j["lang"] = r.lang;
    j["stage"] = stage_name(r.stage);
    if (!r.id.empty()) j["id"] = r.id;
    s += j.dump() + "\n";
  }
  return s;
}

std::vector<TokenizedExample> tokenize(const std::vector<ParallelExample>& records,
                                       const Vocabulary& vocab) {
  std::vector<TokenizedExample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    TokenizedExample t;
    t.source = vocab.encode(r.src);
    t.target = vocab.encode(r.tgt);
    t.target.push_back(vocab.id("<eos>"));
    t.lang = r.lang;
    t.id = r.id;
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------

SynthSpec SynthSpec::defaults() {
  SynthSpec s;
  s.base_words = {"cat",  "dog",  "sun",   "moon", "tree", "river", "stone", "bird", "fish", "house",
                  "road", "book", "water", "fire", "wind", "rain",  "star",  "hill", "boat", "door"};
  s.languages = {{"xa", "high", "random", {}, false},
                 {"xb", "high", "random", {}, false},
                 {"xc", "low", "random", {}, false}};
  s.stage1_counts = {{"high", 1000}, {"low", 100}};
  s.stage2_counts = {{"high", 70}, {"low", 7}};
  return s;
}

std::vector<std::string> SynthSpec::content_vocabulary() const {
  std::vector<std::string> v;
  for (int d = 0; d <= 9; ++d) v.push_back(std::to_string(d));
  v.emplace_back("+");
  v.emplace_back("=");
  for (const auto& w : base_words) v.push_back(w);
  for (const auto& t : tasks) {
    if (t == "copy") v.emplace_back("copy");
    if (t == "classification") {
      v.emplace_back("same");
      v.emplace_back("yes");
      v.emplace_back("no");
    }
  }
  return v;
}

void SynthSpec::validate() const {
  if (languages.size() < 2) throw ConfigError("synthetic corpus needs at least two languages");
  if (min_len == 0 || max_len < min_len) throw ConfigError("invalid sentence length range");
  if (tasks.empty()) throw ConfigError("synthetic corpus needs at least one task");
  std::set<std::string> known_tasks = {"arithmetic", "copy", "classification"};
  for (const auto& t : tasks) {
    if (!known_tasks.count(t)) throw ConfigError("unknown task template '" + t + "'");
  }
  const auto content = content_vocabulary();
  const std::set<std::string> content_set(content.begin(), content.end());
  if (content_set.size() != content.size()) throw ConfigError("duplicate base vocabulary entry");
  for (const auto& w : content) {
    if (Vocabulary::is_special(w)) throw ConfigError("base vocabulary contains special token " + w);
  }
  std::set<std::string> names = {base_language};
  for (const auto& l : languages) {
    if (l.name.empty() || !names.insert(l.name).second) {
      throw ConfigError("language names must be unique and differ from the base language");
    }
    if (!stage1_counts.count(l.tier) || !stage2_counts.count(l.tier)) {
      throw ConfigError("language " + l.name + " uses tier '" + l.tier + "' without sample counts");
    }
    if (l.cipher == "explicit") {
      std::set<std::string> images;
      for (const auto& [from, to] : l.mapping) {
        if (Vocabulary::is_special(from) || Vocabulary::is_special(to)) {
          throw ConfigError("cipher for " + l.name + " maps special token " +
                            (Vocabulary::is_special(from) ? from : to));
        }
        if (!content_set.count(from)) {
          throw ConfigError("cipher for " + l.name + " maps unknown token " + from);
        }
        if (!images.insert(to).second) {
          throw ConfigError("cipher for " + l.name + " is not injective at " + to);
        }
        if (to.find_first_of(" \t\r\n") != std::string::npos || to.empty()) {
          throw ConfigError("cipher for " + l.name + " produces an invalid token");
        }
      }
      if (l.mapping.size() != content.size()) {
        throw ConfigError("cipher for " + l.name + " must cover all " +
                          std::to_string(content.size()) + " content tokens");
      }
    } else if (l.cipher != "random" && l.cipher != "identity") {
      throw ConfigError("unknown cipher kind '" + l.cipher + "'");
    } else if (!l.mapping.empty()) {
      throw ConfigError("cipher mapping given for non-explicit cipher of " + l.name);
    }
  }
}

namespace {

struct TaskItem {
  std::string key;     // stable identifier
  std::vector<std::string> prompt;
  std::vector<std::string> answer;
};

std::vector<std::string> random_sentence(const std::vector<std::string>& content,
                                         std::size_t min_len, std::size_t max_len,
                                         std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<std::size_t> pick(0, content.size() - 1);
  std::vector<std::string> s(len(rng));
  for (auto& t : s) t = content[pick(rng)];
  return s;
}

std::string join(const std::vector<std::string>& toks) {
  std::string s;
  for (const auto& t : toks) {
    if (!s.empty()) s += ' ';
    s += t;
  }
  return s;
}

std::vector<TaskItem> task_pool(const std::string& task, const SynthSpec& spec,
                                std::mt19937_64& rng) {
  std::vector<TaskItem> pool;
  if (task == "arithmetic") {
    for (int a = 0; a <= 9; ++a) {
      for (int b = 0; b <= 9; ++b) {
        TaskItem it;
        it.key = "a" + std::to_string(a) + "_" + std::to_string(b);
        it.prompt = {std::to_string(a), "+", std::to_string(b), "="};
        for (char c : std::to_string(a + b)) it.answer.emplace_back(1, c);
        pool.push_back(std::move(it));
      }
    }
  } else if (task == "copy") {
    for (int i = 0; i < 100; ++i) {
      TaskItem it;
      it.key = "c" + std::to_string(i);
      it.answer = random_sentence(spec.base_words, 2, 4, rng);
      it.prompt = {"copy"};
      it.prompt.insert(it.prompt.end(), it.answer.begin(), it.answer.end());
      pool.push_back(std::move(it));
    }
  } else {
    const auto& w = spec.base_words;
    std::uniform_int_distribution<std::size_t> pick(0, w.size() - 1);
    for (int i = 0; i < 100; ++i) {
      TaskItem it;
      it.key = "k" + std::to_string(i);
      const std::string x = w[pick(rng)];
      const std::string y = (i % 2 == 0) ? x : w[pick(rng)];
      it.prompt = {"same", x, y};
      it.answer = {x == y ? "yes" : "no"};
      pool.push_back(std::move(it));
    }
  }
  return pool;
}

}  // namespace

SynthCorpus generate_synthetic_corpus(const SynthSpec& spec) {
  spec.validate();
  const auto content = spec.content_vocabulary();
  SynthCorpus c;
  c.vocab = Vocabulary(content);

  // Ciphers first so the vocabulary order only depends on the spec.
  for (std::size_t li = 0; li < spec.languages.size(); ++li) {
    const SynthLanguage& l = spec.languages[li];
    std::map<std::string, std::string> m;
    if (l.cipher == "explicit") {
      m = l.mapping;
    } else {
      std::vector<std::string> image = content;
      if (l.cipher == "random") {
        std::mt19937_64 rng(spec.seed * 7919u + 104729u * (li + 1));
        std::shuffle(image.begin(), image.end(), rng);
      }
      for (std::size_t i = 0; i < content.size(); ++i) {
        m[content[i]] = l.shared_script ? image[i] : l.name + "_" + image[i];
      }
    }
    for (const auto& tok : content) c.vocab.add(m.at(tok));
    c.ciphers[l.name] = std::move(m);
    c.tiers[l.name] = l.tier;
  }
  const auto encipher = [&](const std::string& lang, const std::vector<std::string>& toks) {
    std::vector<std::string> out;
    for (const auto& t : toks) out.push_back(c.ciphers.at(lang).at(t));
    return join(out);
  };

  std::mt19937_64 rng(spec.seed);
  for (const auto& l : spec.languages) {
    const std::size_t n = spec.stage1_counts.at(l.tier);
    for (std::size_t i = 0; i < n; ++i) {
      const auto s = random_sentence(content, spec.min_len, spec.max_len, rng);
      c.stage1.push_back({encipher(l.name, s), join(s), l.name, Stage::kTranslation,
                          l.name + "-t" + std::to_string(i)});
    }
  }
  for (std::size_t i = 0; i < spec.parallel_sentences; ++i) {
    const auto s = random_sentence(content, spec.min_len, spec.max_len, rng);
    const std::string id = "p" + std::to_string(i);
    c.parallel.push_back({join(s), join(s), spec.base_language, Stage::kTranslation, id});
    for (const auto& l : spec.languages) {
      c.parallel.push_back({encipher(l.name, s), join(s), l.name, Stage::kTranslation, id});
    }
  }
  for (std::size_t i = 0; i < spec.pretrain_sentences; ++i) {
    const auto s = join(random_sentence(content, spec.min_len, spec.max_len, rng));
    c.pretrain.push_back({s, s, spec.base_language, Stage::kTranslation,
                          spec.base_language + "-t" + std::to_string(i)});
  }

  for (const auto& task : spec.tasks) {
    std::vector<TaskItem> pool = task_pool(task, spec, rng);
    std::shuffle(pool.begin(), pool.end(), rng);
    const std::size_t n_eval = std::min(spec.eval_items, pool.size() - 1);
    const std::vector<TaskItem> held(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_eval));
    const std::vector<TaskItem> train(pool.begin() + static_cast<std::ptrdiff_t>(n_eval), pool.end());
    for (std::size_t r = 0; r < spec.pretrain_task_copies; ++r) {
      for (const auto& it : pool) {
        c.pretrain.push_back({join(it.prompt), join(it.answer), spec.base_language, Stage::kTask,
                              spec.base_language + "-" + it.key});
      }
    }
    for (const auto& l : spec.languages) {
      std::vector<TaskItem> order = train;
      std::shuffle(order.begin(), order.end(), rng);
      const std::size_t n = spec.stage2_counts.at(l.tier);
      for (std::size_t i = 0; i < n; ++i) {
        const TaskItem& it = order[i % order.size()];
        c.stage2.push_back({encipher(l.name, it.prompt), join(it.answer), l.name, Stage::kTask,
                            l.name + "-" + it.key + (i >= order.size() ? "-r" + std::to_string(i / order.size()) : "")});
      }
      for (const auto& it : held) {
        c.eval.push_back({encipher(l.name, it.prompt), join(it.answer), l.name, Stage::kTask, it.key});
      }
    }
  }
  return c;
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_synthetic_corpus(const SynthCorpus& corpus, const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> files;
  std::string vocab;
  for (const auto& t : corpus.vocab.tokens()) vocab += t + "\n";
  files.emplace_back("vocab.txt", vocab);
  files.emplace_back("stage1.jsonl", format_corpus(corpus.stage1));
  files.emplace_back("stage2.jsonl", format_corpus(corpus.stage2));
  files.emplace_back("eval.jsonl", format_corpus(corpus.eval));
  files.emplace_back("parallel.jsonl", format_corpus(corpus.parallel));
  files.emplace_back("pretrain.jsonl", format_corpus(corpus.pretrain));
  json tiers(corpus.tiers);
  files.emplace_back("tiers.json", tiers.dump(2) + "\n");
  json lexicon(corpus.ciphers);
  files.emplace_back("lexicon.json", lexicon.dump(2) + "\n");

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const fs::path staging = dir / ".staging";
  fs::remove_all(staging, ec);
  fs::create_directories(staging, ec);
  if (ec) throw IoError("cannot create " + staging.string() + ": " + ec.message());
  try {
    for (const auto& [name, text] : files) {
      std::ofstream out(staging / name, std::ios::binary);
      out.write(text.data(), static_cast<std::streamsize>(text.size()));
      if (!out) throw IoError("cannot write " + (staging / name).string());
    }
    for (const auto& [name, text] : files) {
      fs::rename(staging / name, dir / name, ec);
      if (ec) throw IoError("cannot move " + name + " into " + dir.string() + ": " + ec.message());
    }
  } catch (...) {
    fs::remove_all(staging, ec);
    throw;
  }
  fs::remove_all(staging, ec);
}

std::map<std::string, std::string> read_tiers(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": malformed tier map (" + e.what() + ")");
  }
  if (!j.is_object()) throw InputError(path.string() + ": tier map must be an object");
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_string()) throw InputError(path.string() + ": tier of " + k + " must be a string");
    out[k] = v.get<std::string>();
  }
  return out;
}

Lexicon read_lexicon(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": malformed lexicon (" + e.what() + ")");
  }
  if (!j.is_object()) throw InputError(path.string() + ": lexicon must be an object");
  Lexicon out;
  for (const auto& [lang, table] : j.items()) {
    if (!table.is_object()) throw InputError(path.string() + ": lexicon of " + lang + " must be an object");
    for (const auto& [base, surface] : table.items()) {
      if (!surface.is_string()) {
        throw InputError(path.string() + ": " + lang + "." + base + " must be a string");
      }
      out[lang][base] = surface.get<std::string>();
    }
  }
  return out;
}

std::vector<std::pair<std::int32_t, std::int32_t>> lexicon_pairs(const Lexicon& lexicon,
                                                                 const Vocabulary& vocab) {
  std::vector<std::pair<std::int32_t, std::int32_t>> out;
  for (const auto& [lang, table] : lexicon) {
    for (const auto& [base, surface] : table) {
      if (!vocab.contains(base) || !vocab.contains(surface)) {
        throw InputError("lexicon entry " + lang + ":" + base + " -> " + surface +
                         " is not in the vocabulary");
      }
      out.emplace_back(vocab.id(base), vocab.id(surface));
    }
  }
  return out;
}

}  // namespace layalign
