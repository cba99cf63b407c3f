#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "repdrop/analysis.hpp"
#include "repdrop/train.hpp"

using namespace repdrop;

namespace {

using Ids = std::vector<TokenId>;

struct Fixture {
  Vocabulary vocab;
  Corpus corpus;
};

Fixture fixture(const std::vector<std::string>& docs) {
  Fixture f{Vocabulary::build(docs, 1000), {}};
  f.corpus = make_corpus("t", docs, f.vocab);
  return f;
}

Corpus random_corpus(Rng& rng, std::size_t vocab) {
  Corpus c;
  c.vocab_size = vocab;
  const std::size_t ndocs = 1 + rng.below(6);
  for (std::size_t d = 0; d < ndocs; ++d) {
    Ids ids(1 + rng.below(30));
    for (auto& t : ids) t = static_cast<TokenId>(rng.below(vocab));
    c.documents.push_back(TokenSeq{ids, {}});
  }
  c.recount();
  return c;
}

Transformer<double> zero_model(int vocab) {
  ModelConfig m;
  m.layers = 2;
  m.heads = 2;
  m.d_model = 16;
  m.d_ff = 16;
  m.vocab = vocab;
  m.max_len = 32;
  auto model = Transformer<double>::initialize(m, 0);
  std::fill(model.params().begin(), model.params().end(), 0.0);
  return model;
}

}  // namespace

TEST_SUITE("analysis") {
  TEST_CASE("inflow examples") {
    auto f = fixture({"a b"});
    auto t = compute_inflow(f.corpus);
    CHECK(t.at(f.vocab.id("b")) == 1.0);
    CHECK(t.at(f.vocab.id("a")) == 0.0);

    f = fixture({"a b", "a c"});
    t = compute_inflow(f.corpus);
    CHECK(t.at(f.vocab.id("b")) == 0.5);
    CHECK(t.at(f.vocab.id("c")) == 0.5);
    CHECK(t.at(f.vocab.id("a")) == 0.0);
    CHECK(t.conditional(f.vocab.id("a"), f.vocab.id("b")) == 0.5);

    Corpus empty;
    CHECK_THROWS(compute_inflow(empty));
  }

  TEST_CASE("conditionals are normalized per predecessor") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      const auto c = random_corpus(rng, 2 + rng.below(8));
      const auto t = compute_inflow(c);
      double total_inflow = 0.0;
      for (std::size_t v = 0; v < c.vocab_size; ++v) {
        total_inflow += t.inflow[v];
        CHECK(t.inflow[v] >= 0.0);
        if (t.successor_totals[v] == 0) continue;
        double s = 0.0;
        for (std::size_t w = 0; w < c.vocab_size; ++w) {
          s += t.conditional(static_cast<TokenId>(v), static_cast<TokenId>(w));
        }
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
      // Summing inflow over words counts one unit per predecessor with successors.
      std::size_t preds = 0;
      for (auto n : t.successor_totals) preds += n > 0;
      CHECK(std::abs(total_inflow - static_cast<double>(preds)) < 1e-9);
    }
  }

  TEST_CASE("threshold rule edge cases") {
    auto f = fixture({"a b c a b d", "c a b"});
    const auto t = compute_inflow(f.corpus);
    InflowRule rule;
    rule.threshold = 10.0;
    const auto none = select_high_inflow_pairs(t, rule);
    CHECK(none.pairs.empty());
    CHECK_FALSE(none.warning.empty());

    rule.threshold = 0.0;
    const auto all = select_high_inflow_pairs(t, rule);
    std::set<TokenPair> observed;
    for (const auto& [pair, count] : t.bigram_counts) observed.insert(pair);
    CHECK(all.pairs == observed);
    CHECK(all.warning.empty());
    for (const auto& [v, w] : all.pairs) CHECK(all.words.count(w) == 1);

    rule.mode = InflowRule::Mode::kCoverage;
    rule.target_coverage = 0.5;
    const auto cov = select_high_inflow_pairs(t, rule);
    CHECK(cov.estimated_coverage >= 0.5);
    for (const auto& [v, w] : cov.pairs) CHECK(t.at(w) > cov.threshold);
  }

  TEST_CASE("merge examples") {
    auto f = fixture({"a b c"});
    const auto a = f.vocab.id("a"), b = f.vocab.id("b"), c = f.vocab.id("c");
    auto m = merge_pairs(f.corpus, f.vocab, {{a, b}});
    REQUIRE(m.fused.size() == 1);
    const TokenId ab = m.fused.begin()->first;
    CHECK(m.corpus.documents[0].ids == Ids{ab, c});
    CHECK(m.vocab.token(ab) == "a@@b");
    CHECK(m.vocab.size() == f.vocab.size() + 1);
    CHECK(m.merges == 1);
    CHECK(std::abs(m.word_percent - 2.0 / 3.0) < 1e-15);

    f = fixture({"a a a"});
    const auto aa = f.vocab.id("a");
    m = merge_pairs(f.corpus, f.vocab, {{aa, aa}});
    CHECK(m.corpus.documents[0].ids == Ids{m.fused.begin()->first, aa});

    m = merge_pairs(f.corpus, f.vocab, {});
    CHECK(m.corpus.documents[0].ids == f.corpus.documents[0].ids);
    CHECK(m.merges == 0);
  }

  TEST_CASE("merge scopes") {
    auto f = fixture({"a b c a b", "a b d"});
    const auto a = f.vocab.id("a"), b = f.vocab.id("b");
    const auto all = merge_pairs(f.corpus, f.vocab, {{a, b}}, MergeScope::kAll);
    const auto rep = merge_pairs(f.corpus, f.vocab, {{a, b}}, MergeScope::kRepetitive);
    const auto rnd = merge_pairs(f.corpus, f.vocab, {{a, b}}, MergeScope::kRandomSubset, 4);
    CHECK(all.merges == 3);
    // (a, b) repeats only inside the first document.
    CHECK(rep.merges == 2);
    CHECK(rep.corpus.documents[1].ids == f.corpus.documents[1].ids);
    CHECK(rnd.merges == rep.merges);
  }

  TEST_CASE("merge then unmerge restores the stream") {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t V = 2 + rng.below(5);
      const auto c = random_corpus(rng, V);
      std::vector<std::string> names;
      for (std::size_t i = 0; i < V; ++i) names.push_back("w" + std::to_string(i));
      Vocabulary vocab = Vocabulary::build(std::vector<std::string>{"x"}, 2);
      for (std::size_t i = 2; i < V; ++i) vocab.add(names[i]);
      REQUIRE(vocab.size() == V);
      std::set<TokenPair> pairs;
      for (int k = 0; k < 3; ++k) {
        pairs.insert({static_cast<TokenId>(rng.below(V)), static_cast<TokenId>(rng.below(V))});
      }
      for (auto scope : {MergeScope::kAll, MergeScope::kRepetitive, MergeScope::kRandomSubset}) {
        const auto m = merge_pairs(c, vocab, pairs, scope, rng.next_u64());
        std::size_t words = 0;
        for (std::size_t d = 0; d < c.documents.size(); ++d) {
          const auto back = unmerge(m.corpus.documents[d].ids, m.fused);
          CHECK(back == c.documents[d].ids);
          words += m.corpus.documents[d].size();
        }
        CHECK(words + m.merges == c.total_words);
      }
    }
  }

  TEST_CASE("overlap report") {
    const std::set<int> x{1, 2, 3};
    CHECK(overlap_report(x, x).fraction_of_a == 1.0);
    CHECK(overlap_report(x, std::set<int>{7, 8}).fraction_of_a == 0.0);
    const auto r = overlap_report(x, std::set<int>{2});
    CHECK(r.fraction_of_a == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(r.fraction_of_b == 1.0);
    CHECK(r.intersection == 1);
    CHECK_THROWS(overlap_report(std::set<int>{}, x));
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      std::set<int> a, b;
      const auto na = 1 + rng.below(10), nb = rng.below(10);
      for (std::uint64_t i = 0; i < na; ++i) a.insert(static_cast<int>(rng.below(12)));
      for (std::uint64_t i = 0; i < nb; ++i) b.insert(static_cast<int>(rng.below(12)));
      const auto o = overlap_report(a, b);
      CHECK(o.fraction_of_a >= 0.0);
      CHECK(o.fraction_of_a <= 1.0);
      CHECK(o.fraction_of_b <= 1.0);
      CHECK(o.intersection <= std::min(a.size(), b.size()));
    }
  }

  TEST_CASE("repetitive word and pair shares") {
    auto f = fixture({"a b c a b", "d e"});
    // a b repeats: 4 of 7 words
    CHECK(std::abs(repetitive_word_percent(f.corpus, 2) - 4.0 / 7.0) < 1e-15);
    const auto a = f.vocab.id("a"), b = f.vocab.id("b"), d = f.vocab.id("d"),
               e = f.vocab.id("e");
    CHECK(repetitive_pair_share(f.corpus, {{a, b}}) == 1.0);
    CHECK(repetitive_pair_share(f.corpus, {{a, b}, {d, e}}) == doctest::Approx(2.0 / 3.0));
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
      const auto c = random_corpus(rng, 3);
      std::size_t covered = 0;
      for (const auto& doc : c.documents) {
        for (auto v : oracle::repetitive_positions(doc.ids, 2)) covered += v;
      }
      CHECK(std::abs(repetitive_word_percent(c, 2) -
                     static_cast<double>(covered) / static_cast<double>(c.total_words)) < 1e-12);
    }
  }

  TEST_CASE("probe on a context-free model has zero delta") {
    const auto model = zero_model(8);
    const Ids s{1, 2, 3, 1, 2, 4, 1, 2};
    const auto results = self_reinforcement_probe(model, s, 2);
    REQUIRE(results.size() == 1);
    CHECK(results[0].start == 6);
    CHECK(results[0].ngram == Ids{1, 2});
    CHECK(results[0].delta() == 0.0);
    CHECK(std::abs(results[0].p_unmasked - 1.0 / 64.0) < 1e-15);
    CHECK(self_reinforcement_probe(model, Ids{1, 2, 3, 4}, 2).empty());
  }

  TEST_CASE("masking keys outside the context leaves the probe unchanged") {
    ModelConfig m;
    m.layers = 2;
    m.heads = 2;
    m.d_model = 16;
    m.d_ff = 16;
    m.vocab = 8;
    m.max_len = 16;
    const auto model = Transformer<double>::initialize(m, 3);
    const Ids s{1, 2, 3, 1, 2, 4, 5, 6};
    std::vector<std::uint8_t> none(s.size(), 0), late(s.size(), 0), early(s.size(), 0);
    late[6] = late[7] = 1;
    early[0] = early[1] = 1;
    const auto a = probe_span(model, s, 3, 2, none);
    const auto b = probe_span(model, s, 3, 2, late);
    CHECK(a.delta() == 0.0);
    CHECK(b.delta() == 0.0);
    CHECK(probe_span(model, s, 3, 2, early).delta() != 0.0);
    CHECK_THROWS(probe_span(model, s, 0, 2, none));
    CHECK_THROWS(probe_span(model, s, 7, 2, none));
  }

  TEST_CASE("probe on a model trained to copy") {
    // Each training document is a random 6-token block followed by its copy.
    Rng rng(17);
    Corpus c;
    c.vocab_size = 16;
    for (int d = 0; d < 256; ++d) {
      Ids block(6);
      for (auto& t : block) t = static_cast<TokenId>(1 + rng.below(15));
      Ids doc = block;
      doc.insert(doc.end(), block.begin(), block.end());
      c.documents.push_back(TokenSeq{doc, {}});
    }
    c.recount();
    ModelConfig m;
    m.layers = 2;
    m.heads = 2;
    m.d_model = 32;
    m.d_ff = 64;
    m.vocab = 16;
    m.max_len = 12;
    TrainConfig t;
    t.steps = 1500;
    t.lr = 3e-3;
    t.batch = 16;
    t.warmup = 100;
    t.seed = 1;
    t.log_interval = 500;
    t.eval_interval = 0;
    ObjectiveSpec mle;
    const auto r = train(m, c, t, mle);
    // A held-out block and its copy: every second-half bigram is predictable
    // only through its earlier occurrence.
    const Ids s{3, 9, 5, 12, 7, 1, 3, 9, 5, 12, 7, 1};
    const auto results = self_reinforcement_probe(r.checkpoint.model, s, 2);
    REQUIRE(results.size() == 5);
    for (const auto& p : results) {
      MESSAGE("copy probe p_unmasked=" << p.p_unmasked << " p_masked=" << p.p_masked);
      CHECK(p.p_unmasked > 10.0 * p.p_masked);
    }
  }

  TEST_CASE("amplification") {
    CHECK(amplification_report(0.03, 0.45).ratio == doctest::Approx(15.0).epsilon(1e-12));
    CHECK(amplification_report(0.2, 0.2).ratio == 1.0);
    CHECK(amplification_report(0.0356, 0.4705).ratio == doctest::Approx(13.2).epsilon(0.005));
    CHECK_THROWS_WITH(amplification_report(0.0, 0.4), "undefined ratio: training rep-2 is zero");
  }

  TEST_CASE("spearman") {
    const std::vector<double> x{1, 2, 3, 4, 5};
    CHECK(spearman(x, std::vector<double>{2, 4, 6, 8, 100}) == doctest::Approx(1.0));
    CHECK(spearman(x, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
    // ranks with ties: y = (1, 2.5, 2.5, 4, 5); closed form 0.9746794344808963
    CHECK(spearman(x, std::vector<double>{1, 3, 3, 4, 5}) ==
          doctest::Approx(0.9746794344808963).epsilon(1e-12));
    CHECK(spearman(x, std::vector<double>(5, 1.0)) == 0.0);
    CHECK_THROWS(spearman(x, std::vector<double>{1}));
  }

  TEST_CASE("sign test") {
    CHECK(sign_test_p_value(0, 0) == 1.0);
    CHECK(sign_test_p_value(3, 0) == doctest::Approx(0.125).epsilon(1e-12));
    CHECK(sign_test_p_value(0, 3) == doctest::Approx(1.0).epsilon(1e-12));
    // P(X >= 8), X ~ Bin(10, 1/2) = 56 / 1024
    CHECK(sign_test_p_value(8, 2) == doctest::Approx(56.0 / 1024.0).epsilon(1e-12));
  }

  TEST_CASE("inflow json") {
    auto f = fixture({"a b", "a c"});
    const auto j = to_json(compute_inflow(f.corpus), f.vocab, 1);
    REQUIRE(j.at("top_inflow").size() == 1);
    CHECK(j.at("top_inflow")[0].at("token") == "b");
    CHECK(j.at("total_words") == 4);
    CHECK(j.at("distinct_bigrams") == 2);
  }
}
