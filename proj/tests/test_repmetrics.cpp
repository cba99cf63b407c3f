#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "repdrop/repmask.hpp"
#include "repdrop/repmetrics.hpp"

using namespace repdrop;

namespace {

using Ids = std::vector<TokenId>;

// Fixed next-token distribution regardless of context.
class ConstantScorer : public SequenceScorer {
 public:
  ConstantScorer(std::vector<double> probs, std::size_t max_len)
      : probs_(std::move(probs)), max_len_(max_len) {}
  std::size_t vocab_size() const override { return probs_.size(); }
  std::size_t max_len() const override { return max_len_; }
  std::vector<double> token_log_probs(std::span<const TokenId> ids) const override {
    std::vector<double> out;
    for (std::size_t i = 1; i < ids.size(); ++i) out.push_back(std::log(probs_[ids[i]]));
    return out;
  }

 private:
  std::vector<double> probs_;
  std::size_t max_len_;
};

// Probability 1 on the true next token.
class OracleScorer : public SequenceScorer {
 public:
  explicit OracleScorer(std::size_t vocab) : vocab_(vocab) {}
  std::size_t vocab_size() const override { return vocab_; }
  std::size_t max_len() const override { return 16; }
  std::vector<double> token_log_probs(std::span<const TokenId> ids) const override {
    return std::vector<double>(ids.size() - 1, 0.0);
  }

 private:
  std::size_t vocab_;
};

Corpus corpus_of(const std::vector<Ids>& docs, std::size_t vocab) {
  Corpus c;
  c.vocab_size = vocab;
  for (const auto& d : docs) c.documents.push_back(TokenSeq{d, {}});
  c.recount();
  return c;
}

Ids random_seq(Rng& rng, std::size_t len, std::uint64_t vocab) {
  Ids s(len);
  for (auto& t : s) t = static_cast<TokenId>(rng.below(vocab));
  return s;
}

}  // namespace

TEST_SUITE("repmetrics") {
  TEST_CASE("rep_n examples") {
    CHECK(rep_n(Ids{0, 1, 2, 3}, 2) == 0.0);
    CHECK(rep_n(Ids{0, 1, 0, 1}, 2) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(rep_n(Ids{0, 0, 0, 0, 0}, 2) == 0.75);
    CHECK_THROWS_WITH(rep_n(Ids{0}, 2), "sequence shorter than n");
  }

  TEST_CASE("rep_w examples") {
    CHECK(rep_w(Ids{0, 1, 2, 3}, 16) == 0.0);
    CHECK(rep_w(Ids{0, 1, 0, 1}, 16) == 0.5);
    CHECK(rep_w(Ids{0, 0, 0, 0}, 16) == 0.75);
    // window of 1 only sees the immediate predecessor
    CHECK(rep_w(Ids{0, 1, 0, 1}, 1) == 0.0);
  }

  TEST_CASE("rep_r examples") {
    CHECK(rep_r(Ids{0, 1, 2, 3}) == 0.0);
    CHECK(rep_r(Ids{0, 1, 0, 1}) == 1.0);
    CHECK(rep_r(Ids{0, 1, 2, 0, 1}) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK_THROWS(rep_r(Ids{0}));
  }

  TEST_CASE("metrics equal the brute-force oracles") {
    Rng rng(7);
    for (int trial = 0; trial < 300; ++trial) {
      const auto s = random_seq(rng, 1 + rng.below(64), 1 + rng.below(8));
      for (int n : {1, 2, 3, 4}) {
        if (s.size() >= static_cast<std::size_t>(n)) CHECK(rep_n(s, n) == oracle::rep_n(s, n));
      }
      for (int w : {1, 4, 16}) CHECK(rep_w(s, w) == oracle::rep_w(s, w));
      if (s.size() >= 2) CHECK(rep_r(s) == oracle::rep_r(s));
    }
  }

  TEST_CASE("rep_n is invariant under token relabeling") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      const auto s = random_seq(rng, 2 + rng.below(40), 6);
      std::vector<TokenId> perm(6);
      std::iota(perm.begin(), perm.end(), 0);
      for (std::size_t i = 5; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
      Ids relabeled;
      for (TokenId t : s) relabeled.push_back(perm[t]);
      CHECK(rep_n(s, 2) == rep_n(relabeled, 2));
    }
  }

  TEST_CASE("appending a new token does not add a rep_w hit") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      auto s = random_seq(rng, 1 + rng.below(30), 5);
      const double hits = rep_w(s, 16) * s.size();
      s.push_back(99);
      CHECK(rep_w(s, 16) * s.size() == doctest::Approx(hits));
    }
  }

  TEST_CASE("corpus averages skip short sequences") {
    const std::vector<TokenSeq> seqs{{Ids{0, 1, 2}, {}}, {Ids{0, 0, 0}, {}}, {Ids{4}, {}}};
    const auto s = corpus_rep_n(seqs, 2);
    CHECK(s.mean == 0.25);
    CHECK(s.used == 2);
    CHECK(s.skipped == 1);
    const std::vector<TokenSeq> single{{Ids{0, 1, 0, 1}, {}}};
    CHECK(corpus_rep_n(single, 2).mean == rep_n(Ids{0, 1, 0, 1}, 2));
    const std::vector<TokenSeq> none{{Ids{4}, {}}};
    CHECK_THROWS(corpus_rep_n(none, 2));
  }

  TEST_CASE("perplexity closed forms") {
    const auto corpus = corpus_of({{0, 1, 2, 3}, {3, 2, 1}}, 4);
    ConstantScorer uniform(std::vector<double>(4, 0.25), 16);
    const auto r = perplexity(uniform, corpus);
    CHECK(r.ppl == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(r.predicted_tokens == 5);

    const auto two = corpus_of({{0, 1, 1, 0, 1}}, 2);
    CHECK(perplexity(ConstantScorer({0.5, 0.5}, 16), two).ppl ==
          doctest::Approx(2.0).epsilon(1e-12));
    CHECK(perplexity(OracleScorer(4), corpus).ppl == 1.0);
  }

  TEST_CASE("perplexity is invariant under document order and windows long documents") {
    const auto a = corpus_of({{0, 1}, {1, 0, 1}, {1, 1, 1, 1}}, 2);
    const auto b = corpus_of({{1, 1, 1, 1}, {0, 1}, {1, 0, 1}}, 2);
    ConstantScorer s({0.3, 0.7}, 16);
    CHECK(perplexity(s, a).ppl == doctest::Approx(perplexity(s, b).ppl).epsilon(1e-14));

    // max_len 3: a 7-token document is scored as windows of 3, 3, 1 tokens;
    // the first token of each window is not predicted.
    ConstantScorer small({0.5, 0.5}, 3);
    const auto r = perplexity(small, corpus_of({{0, 1, 0, 1, 0, 1, 0}}, 2));
    CHECK(r.predicted_tokens == 4);
  }

  TEST_CASE("perplexity rejects a vocabulary mismatch") {
    ConstantScorer s({0.5, 0.5}, 16);
    CHECK_THROWS(perplexity(s, corpus_of({{0, 1}}, 3)));
  }

  TEST_CASE("report serialization") {
    const std::vector<TokenSeq> seqs{{Ids{0, 1, 0, 1, 0}, {}}, {Ids{2, 3, 4, 5}, {}}};
    auto rep = compute_report(seqs, MetricConfig{}, "m");
    CHECK(rep.rep_n.at(2) == doctest::Approx((0.5 + 0.0) / 2));
    CHECK(rep.num_sequences == 2);
    const auto back = report_from_json(to_json(rep));
    CHECK(back.rep_n == rep.rep_n);
    CHECK(back.rep_w == rep.rep_w);
    CHECK(back.rep_r == rep.rep_r);
    CHECK_FALSE(back.ppl.has_value());
    CHECK(csv_header() == "Rep-2,Rep-3,Rep-4,Rep-w,Rep-r,PPL");
    CHECK(csv_row(rep) == "25.00,16.67,0.00,30.00,50.00,--");
    rep.ppl = 21.984;
    CHECK(csv_row(rep, true) == "m,25.00,16.67,0.00,30.00,50.00,21.98");
  }
}
