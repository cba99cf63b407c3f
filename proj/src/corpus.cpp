#include "repdrop/corpus.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "repdrop/repmetrics.hpp"

namespace repdrop {

namespace {

template <typename F>
void for_each_word(std::string_view text, F&& f) {
  std::size_t i = 0;
  const auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
           c == '\v';
  };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) f(text.substr(i, j - i));
    i = j;
  }
}

}  // namespace

Vocabulary::Vocabulary() {
  id_to_token_.emplace_back(kUnkToken);
  token_to_id_.emplace(std::string(kUnkToken), 0);
}

Vocabulary Vocabulary::build(std::span<const std::string> texts,
                             std::size_t max_vocab) {
  if (texts.empty()) throw Error("empty corpus");
  if (max_vocab < 2) throw ConfigError("max_vocab must be at least 2");

  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& text : texts) {
    for_each_word(text, [&](std::string_view w) { ++counts[std::string(w)]; });
  }
  counts.erase(std::string(kUnkToken));

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(),
                                                          counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab;
  const std::size_t keep = std::min(ranked.size(), max_vocab - 1);
  for (std::size_t i = 0; i < keep; ++i) vocab.add(ranked[i].first);
  return vocab;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open vocabulary file: " + path.string());
  Vocabulary vocab;
  std::string line;
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (index == 0) {
      if (line != kUnkToken) {
        throw Error("vocabulary file must start with " +
                    std::string(kUnkToken));
      }
    } else {
      if (line.empty()) throw Error("empty token in vocabulary file");
      if (vocab.contains(line)) throw Error("duplicate token: " + line);
      vocab.add(line);
    }
    ++index;
  }
  if (index == 0) throw Error("empty vocabulary file: " + path.string());
  return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write vocabulary file: " + path.string());
  for (const auto& tok : id_to_token_) out << tok << '\n';
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? unk_id() : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw Error("token id out of range: " + std::to_string(id));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const {
  return token_to_id_.count(std::string(token)) > 0;
}

TokenId Vocabulary::add(const std::string& token) {
  auto [it, inserted] =
      token_to_id_.emplace(token, static_cast<TokenId>(id_to_token_.size()));
  if (inserted) id_to_token_.push_back(token);
  return it->second;
}

TokenSeq tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSeq seq;
  seq.text = std::string(text);
  for_each_word(text, [&](std::string_view w) { seq.ids.push_back(vocab.id(w)); });
  return seq;
}

std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.token(ids[i]);
  }
  return out;
}

void Corpus::recount() {
  total_words = 0;
  for (const auto& d : documents) total_words += d.size();
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    lines.push_back(std::move(line));
  }
  return lines;
}

Corpus make_corpus(std::string name, std::span<const std::string> lines,
                   const Vocabulary& vocab) {
  Corpus corpus;
  corpus.name = std::move(name);
  corpus.vocab_size = vocab.size();
  corpus.documents.reserve(lines.size());
  for (const auto& line : lines) {
    auto seq = tokenize(line, vocab);
    if (!seq.empty()) corpus.documents.push_back(std::move(seq));
  }
  corpus.recount();
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path, const Vocabulary& vocab) {
  const auto lines = read_lines(path);
  return make_corpus(path.stem().string(), lines, vocab);
}

Corpus chunk_documents(const Corpus& corpus, std::size_t max_len,
                       std::size_t min_len) {
  if (max_len == 0) throw ConfigError("max_len must be positive");
  Corpus out;
  out.name = corpus.name;
  out.vocab_size = corpus.vocab_size;
  for (const auto& doc : corpus.documents) {
    for (std::size_t start = 0; start < doc.size(); start += max_len) {
      const std::size_t end = std::min(doc.size(), start + max_len);
      if (end - start < min_len) continue;
      TokenSeq chunk;
      chunk.ids.assign(doc.ids.begin() + static_cast<std::ptrdiff_t>(start),
                       doc.ids.begin() + static_cast<std::ptrdiff_t>(end));
      out.documents.push_back(std::move(chunk));
    }
  }
  out.recount();
  return out;
}

std::vector<Shard> shard_by_rep2(const Corpus& corpus, std::size_t k) {
  if (k < 2) throw ConfigError("number of shards must be at least 2");
  const std::size_t n_docs = corpus.documents.size();
  if (k > n_docs) {
    throw ConfigError("cannot split " + std::to_string(n_docs) +
                      " documents into " + std::to_string(k) + " shards");
  }

  std::vector<double> score(n_docs, 0.0);
  for (std::size_t i = 0; i < n_docs; ++i) {
    const auto& d = corpus.documents[i];
    if (d.size() >= 2) score[i] = rep_n(d.view(), 2);
  }
  std::vector<std::size_t> order(n_docs);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });

  // prefix[i] = words in the first i sorted documents.
  std::vector<std::size_t> prefix(n_docs + 1, 0);
  for (std::size_t i = 0; i < n_docs; ++i) {
    prefix[i + 1] = prefix[i] + corpus.documents[order[i]].size();
  }
  const double total = static_cast<double>(prefix[n_docs]);

  std::vector<std::size_t> cuts{0};
  for (std::size_t s = 1; s < k; ++s) {
    const double target = total * static_cast<double>(s) / static_cast<double>(k);
    const std::size_t lo = cuts.back() + 1;
    const std::size_t hi = n_docs - (k - s);
    std::size_t best = lo;
    double best_gap = std::abs(static_cast<double>(prefix[lo]) - target);
    for (std::size_t c = lo + 1; c <= hi; ++c) {
      const double gap = std::abs(static_cast<double>(prefix[c]) - target);
      if (gap < best_gap) {
        best = c;
        best_gap = gap;
      }
      if (static_cast<double>(prefix[c]) > target) break;
    }
    cuts.push_back(best);
  }
  cuts.push_back(n_docs);

  std::vector<Shard> shards(k);
  for (std::size_t s = 0; s < k; ++s) {
    auto& shard = shards[s];
    double weighted = 0.0;
    for (std::size_t i = cuts[s]; i < cuts[s + 1]; ++i) {
      const auto& doc = corpus.documents[order[i]];
      shard.documents.push_back(doc);
      shard.word_count += doc.size();
      weighted += score[order[i]] * static_cast<double>(doc.size());
    }
    const auto r = corpus_rep_n(shard.documents, 2);
    shard.rep2_mean = r.used ? r.mean : 0.0;
    shard.rep2_word_weighted =
        shard.word_count ? weighted / static_cast<double>(shard.word_count) : 0.0;
  }
  return shards;
}

void write_shards(const std::vector<Shard>& shards, const Vocabulary& vocab,
                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (std::size_t s = 0; s < shards.size(); ++s) {
    const auto file = "shard_" + std::to_string(s) + ".txt";
    std::ofstream out(dir / file);
    if (!out) throw Error("cannot write " + (dir / file).string());
    for (const auto& doc : shards[s].documents) {
      out << (doc.text.empty() ? detokenize(doc.ids, vocab) : doc.text) << '\n';
    }
    manifest.push_back({{"shard", s},
                        {"file", file},
                        {"documents", shards[s].documents.size()},
                        {"word_count", shards[s].word_count},
                        {"rep2_mean", shards[s].rep2_mean},
                        {"rep2_word_weighted", shards[s].rep2_word_weighted}});
  }
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

PromptSet extract_prompts(const Corpus& test_corpus, std::size_t prompt_len,
                          std::size_t gen_len) {
  if (prompt_len == 0) throw ConfigError("prompt_len must be positive");
  PromptSet set;
  set.prompt_len = prompt_len;
  for (const auto& doc : test_corpus.documents) {
    if (doc.size() < prompt_len + 1) {
      ++set.skipped;
      continue;
    }
    TokenSeq prompt, ref;
    const auto begin = doc.ids.begin();
    const auto split = begin + static_cast<std::ptrdiff_t>(prompt_len);
    const auto stop =
        begin + static_cast<std::ptrdiff_t>(std::min(doc.size(), prompt_len + gen_len));
    prompt.ids.assign(begin, split);
    ref.ids.assign(split, stop);
    set.prompts.push_back(std::move(prompt));
    set.references.push_back(std::move(ref));
  }
  if (set.prompts.empty()) {
    throw Error("no document has at least " + std::to_string(prompt_len + 1) +
                " tokens");
  }
  return set;
}

}  // namespace repdrop
