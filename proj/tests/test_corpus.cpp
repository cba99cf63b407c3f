#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "repdrop/corpus.hpp"
#include "repdrop/repmask.hpp"
#include "repdrop/repmetrics.hpp"

using namespace repdrop;

namespace {

Corpus corpus_of(const std::vector<std::vector<TokenId>>& docs, std::size_t vocab = 100) {
  Corpus c;
  c.name = "t";
  c.vocab_size = vocab;
  for (const auto& d : docs) c.documents.push_back(TokenSeq{d, {}});
  c.recount();
  return c;
}

std::vector<TokenId> random_doc(Rng& rng, std::size_t len, std::uint64_t vocab) {
  std::vector<TokenId> d(len);
  for (auto& t : d) t = static_cast<TokenId>(rng.below(vocab));
  return d;
}

}  // namespace

TEST_SUITE("corpus") {
  TEST_CASE("build_vocab keeps every token when it fits") {
    const std::vector<std::string> texts{"a a b"};
    const auto v = Vocabulary::build(texts, 3);
    CHECK(v.size() == 3);
    CHECK(v.token(0) == "<unk>");
    CHECK(v.token(1) == "a");
    CHECK(v.token(2) == "b");
  }

  TEST_CASE("build_vocab breaks frequency ties lexicographically") {
    const std::vector<std::string> texts{"a a c b"};
    const auto v = Vocabulary::build(texts, 3);
    CHECK(v.size() == 3);
    CHECK(v.contains("a"));
    CHECK(v.contains("b"));
    CHECK_FALSE(v.contains("c"));
  }

  TEST_CASE("build_vocab rejects empty input and tiny caps") {
    CHECK_THROWS_WITH(Vocabulary::build(std::vector<std::string>{}, 10), "empty corpus");
    CHECK_THROWS_AS(Vocabulary::build(std::vector<std::string>{"a"}, 1), ConfigError);
  }

  TEST_CASE("vocabulary maps are exact inverses") {
    const std::vector<std::string> texts{"the cat sat on the mat", "the dog"};
    const auto v = Vocabulary::build(texts, 100);
    for (std::size_t i = 0; i < v.size(); ++i) {
      CHECK(v.id(v.token(static_cast<TokenId>(i))) == static_cast<TokenId>(i));
    }
  }

  TEST_CASE("tokenize looks up words and maps OOV to unk") {
    const auto v = Vocabulary::build(std::vector<std::string>{"a b"}, 10);
    const auto s = tokenize("a b a", v);
    CHECK(s.ids == std::vector<TokenId>{v.id("a"), v.id("b"), v.id("a")});
    CHECK(tokenize("a zzz", v).ids == std::vector<TokenId>{v.id("a"), v.unk_id()});
    CHECK(tokenize("", v).empty());
    for (TokenId id : tokenize("a b zzz q", v).ids) CHECK(static_cast<std::size_t>(id) < v.size());
  }

  TEST_CASE("tokenize is idempotent through detokenize") {
    const auto v = Vocabulary::build(std::vector<std::string>{"x y z x"}, 3);
    const auto once = tokenize("x y z w x", v);
    const auto twice = tokenize(detokenize(once.ids, v), v);
    CHECK(once.ids == twice.ids);
  }

  TEST_CASE("vocabulary file round trip") {
    const auto dir = std::filesystem::path(REPDROP_TEST_TMP) / "vocab";
    std::filesystem::create_directories(dir);
    const auto v = Vocabulary::build(std::vector<std::string>{"b a c a"}, 10);
    v.save(dir / "v.txt");
    CHECK(Vocabulary::load(dir / "v.txt") == v);
  }

  TEST_CASE("corpus loading skips blank lines and counts words") {
    const auto dir = std::filesystem::path(REPDROP_TEST_TMP) / "corpus";
    std::filesystem::create_directories(dir);
    {
      std::ofstream out(dir / "c.txt");
      out << "a b c\n\n  \nd e\n";
    }
    const auto lines = read_lines(dir / "c.txt");
    CHECK(lines.size() == 2);
    const auto v = Vocabulary::build(lines, 100);
    const auto c = load_corpus(dir / "c.txt", v);
    CHECK(c.name == "c");
    CHECK(c.documents.size() == 2);
    CHECK(c.total_words == 5);
    CHECK_THROWS(read_lines(dir / "missing.txt"));
  }

  TEST_CASE("chunk_documents splits at max_len and drops short tails") {
    const auto c = corpus_of({{1, 2, 3, 4, 5, 6, 7}, {8}});
    const auto chunks = chunk_documents(c, 3, 2);
    REQUIRE(chunks.documents.size() == 2);
    CHECK(chunks.documents[0].ids == std::vector<TokenId>{1, 2, 3});
    CHECK(chunks.documents[1].ids == std::vector<TokenId>{4, 5, 6});
    CHECK(chunk_documents(c, 3, 1).documents.size() == 4);
  }

  TEST_CASE("shard_by_rep2 with k equal to the document count") {
    // rep-2 values 0.75, 0, 1/3, 0.5, 0.25, 2/3 (all distinct)
    const auto c = corpus_of({{1, 1, 1, 1, 1},
                              {1, 2, 3, 4},
                              {1, 2, 1, 2},
                              {1, 2, 1, 2, 1},
                              {1, 2, 3, 1, 2},
                              {1, 1, 1, 1}});
    const auto shards = shard_by_rep2(c, 6);
    REQUIRE(shards.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) CHECK(shards[i].documents.size() == 1);
    for (std::size_t i = 1; i < 6; ++i) CHECK(shards[i - 1].rep2_mean < shards[i].rep2_mean);
  }

  TEST_CASE("shard_by_rep2 hand partition of four ten-word documents") {
    // Ten tokens: 10-m distinct ones followed by m copies of token 5, giving
    // m-2 repeated bigrams, so rep-2 = (m-2)/9.
    auto make = [](int repeats) {
      const int m = repeats + 2;
      std::vector<TokenId> d;
      for (int i = 0; i < 10 - m; ++i) d.push_back(10 + i);
      for (int i = 0; i < m; ++i) d.push_back(5);
      return d;
    };
    std::vector<std::vector<TokenId>> docs;
    // Order in the corpus is scrambled relative to rep-2.
    docs = {make(3), make(0), make(2), make(1)};
    const auto c = corpus_of(docs);
    std::vector<double> r;
    for (const auto& d : c.documents) r.push_back(rep_n(d.view(), 2));
    CHECK(r[1] < r[3]);
    CHECK(r[3] < r[2]);
    CHECK(r[2] < r[0]);
    const auto shards = shard_by_rep2(c, 2);
    REQUIRE(shards.size() == 2);
    CHECK(shards[0].word_count == 20);
    CHECK(shards[1].word_count == 20);
    CHECK(shards[0].documents[0].ids == docs[1]);
    CHECK(shards[0].documents[1].ids == docs[3]);
    CHECK(shards[1].documents[0].ids == docs[2]);
    CHECK(shards[1].documents[1].ids == docs[0]);
  }

  TEST_CASE("shard_by_rep2 properties on random corpora") {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<std::vector<TokenId>> docs;
      const std::size_t ndocs = 10 + rng.below(20);
      std::size_t max_len = 0;
      for (std::size_t i = 0; i < ndocs; ++i) {
        docs.push_back(random_doc(rng, 2 + rng.below(40), 2 + rng.below(10)));
        max_len = std::max(max_len, docs.back().size());
      }
      const auto c = corpus_of(docs);
      const std::size_t k = 2 + rng.below(4);
      const auto shards = shard_by_rep2(c, k);
      REQUIRE(shards.size() == k);

      // Concatenation is a permutation of the input.
      std::vector<std::vector<TokenId>> all;
      double weighted = 0.0;
      std::size_t words = 0;
      for (const auto& s : shards) {
        CHECK_FALSE(s.documents.empty());
        for (const auto& d : s.documents) all.push_back(d.ids);
        weighted += s.rep2_word_weighted * static_cast<double>(s.word_count);
        words += s.word_count;
      }
      auto sorted_in = docs;
      std::sort(sorted_in.begin(), sorted_in.end());
      std::sort(all.begin(), all.end());
      CHECK(all == sorted_in);

      // rep2 nondecreasing, and each shard's rep2_mean recomputes from its docs.
      for (std::size_t i = 1; i < k; ++i) CHECK(shards[i - 1].rep2_mean <= shards[i].rep2_mean);
      for (const auto& s : shards) {
        double sum = 0;
        for (const auto& d : s.documents) sum += oracle::rep_n(d.ids, 2);
        CHECK(s.rep2_mean == doctest::Approx(sum / s.documents.size()).epsilon(1e-12));
      }

      // Word-weighted aggregate equals the corpus word-weighted rep-2.
      double corpus_weighted = 0.0;
      for (const auto& d : docs) {
        corpus_weighted += oracle::rep_n(d, 2) * static_cast<double>(d.size());
      }
      CHECK(std::abs(weighted / words - corpus_weighted / c.total_words) < 1e-9);

      if (k == 2) {
        const auto diff = shards[0].word_count > shards[1].word_count
                              ? shards[0].word_count - shards[1].word_count
                              : shards[1].word_count - shards[0].word_count;
        CHECK(diff <= max_len);
      }
    }
  }

  TEST_CASE("shard_by_rep2 errors") {
    const auto c = corpus_of({{1, 2}, {3, 4}});
    CHECK_THROWS(shard_by_rep2(c, 3));
    CHECK_THROWS(shard_by_rep2(c, 1));
  }

  TEST_CASE("extract_prompts slices and skips") {
    std::vector<TokenId> long_doc(200);
    for (std::size_t i = 0; i < 200; ++i) long_doc[i] = static_cast<TokenId>(i % 50);
    const auto one = extract_prompts(corpus_of({long_doc}), 32, 128);
    REQUIRE(one.prompts.size() == 1);
    CHECK(one.prompts[0].ids == std::vector<TokenId>(long_doc.begin(), long_doc.begin() + 32));
    CHECK(one.references[0].ids ==
          std::vector<TokenId>(long_doc.begin() + 32, long_doc.begin() + 160));

    const auto three = extract_prompts(
        corpus_of({std::vector<TokenId>(20, 1), std::vector<TokenId>(40, 1), long_doc}), 32, 128);
    CHECK(three.prompts.size() == 2);
    CHECK(three.skipped == 1);
    for (const auto& p : three.prompts) CHECK(p.size() == 32);

    CHECK_THROWS(extract_prompts(corpus_of({std::vector<TokenId>(20, 1)}), 32, 128));
  }
}
