#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace repdrop {

using TokenId = std::int32_t;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised for invalid user input or configuration (CLI exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct TokenSeq {
  std::vector<TokenId> ids;
  std::string text;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  std::span<const TokenId> view() const { return ids; }
};

// Whitespace word-level vocabulary with a frequency cap. Id 0 is always <unk>;
// the remaining ids are assigned by descending frequency, ties broken
// lexicographically.
class Vocabulary {
 public:
  static constexpr std::string_view kUnkToken = "<unk>";

  Vocabulary();

  static Vocabulary build(std::span<const std::string> texts,
                          std::size_t max_vocab);
  // One token per line, id = line index.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const;
  TokenId unk_id() const { return 0; }
  std::size_t size() const { return id_to_token_.size(); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  // Appends a token if absent and returns its id.
  TokenId add(const std::string& token);

  bool operator==(const Vocabulary& other) const {
    return id_to_token_ == other.id_to_token_;
  }

 private:
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
};

TokenSeq tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab);

struct Corpus {
  std::string name;
  std::vector<TokenSeq> documents;
  std::size_t total_words = 0;
  // Size of the vocabulary the documents were encoded with.
  std::size_t vocab_size = 0;

  void recount();
};

// Reads non-empty lines of a UTF-8 text file.
std::vector<std::string> read_lines(const std::filesystem::path& path);

Corpus make_corpus(std::string name, std::span<const std::string> lines,
                   const Vocabulary& vocab);
Corpus load_corpus(const std::filesystem::path& path, const Vocabulary& vocab);

// Splits every document into consecutive chunks of at most max_len tokens.
// Chunks shorter than min_len are dropped.
Corpus chunk_documents(const Corpus& corpus, std::size_t max_len,
                       std::size_t min_len = 2);

struct Shard {
  std::vector<TokenSeq> documents;
  // Unweighted mean of per-document rep-2.
  double rep2_mean = 0.0;
  // Word-weighted mean of per-document rep-2.
  double rep2_word_weighted = 0.0;
  std::size_t word_count = 0;
};

// Sorts documents by rep-2 (stable, ascending) and cuts the sorted list into
// k contiguous shards with each cut placed at the prefix word count closest
// to its equal-words target.
std::vector<Shard> shard_by_rep2(const Corpus& corpus, std::size_t k);

// One text file per shard (shard_<i>.txt) plus manifest.json.
void write_shards(const std::vector<Shard>& shards, const Vocabulary& vocab,
                  const std::filesystem::path& dir);

struct PromptSet {
  std::vector<TokenSeq> prompts;
  std::vector<TokenSeq> references;
  std::size_t skipped = 0;
  std::size_t prompt_len = 32;
};

PromptSet extract_prompts(const Corpus& test_corpus, std::size_t prompt_len = 32,
                          std::size_t gen_len = 128);

}  // namespace repdrop
