#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "repdrop/corpus.hpp"
#include "repdrop/model.hpp"

namespace repdrop {

using TokenPair = std::pair<TokenId, TokenId>;

struct InflowTable {
  // inflow[w] = sum over observed predecessors v of count(v, w) / count(v, .)
  std::vector<double> inflow;
  std::map<TokenPair, std::size_t> bigram_counts;
  std::vector<std::size_t> successor_totals;
  std::size_t total_words = 0;

  double at(TokenId w) const;
  // P(w | v) from relative bigram frequencies.
  double conditional(TokenId v, TokenId w) const;
};

InflowTable compute_inflow(const Corpus& corpus);

struct InflowRule {
  enum class Mode { kThreshold, kCoverage };
  Mode mode = Mode::kThreshold;
  double threshold = 0.03;
  // Target fraction of corpus words covered by the selected pairs.
  double target_coverage = 0.311;
};

struct HighInflowSelection {
  std::set<TokenPair> pairs;
  std::unordered_set<TokenId> words;  // second tokens of the selected pairs
  double threshold = 0.0;
  // Sum of 2 * count(v, w) over selected pairs divided by total words, capped
  // at 1; the exact merged share comes from merge_pairs.
  double estimated_coverage = 0.0;
  std::string warning;
};

HighInflowSelection select_high_inflow_pairs(const InflowTable& table, const InflowRule& rule);

enum class MergeScope { kAll, kRepetitive, kRandomSubset };

struct MergeResult {
  Corpus corpus;
  Vocabulary vocab;
  // fused id -> original pair
  std::map<TokenId, TokenPair> fused;
  std::size_t merges = 0;
  // 2 * merges / words before merging.
  double word_percent = 0.0;
};

// Left-to-right greedy non-overlapping fusion of selected bigrams.
// kRepetitive fuses only occurrences of bigrams appearing at least twice in
// their document; kRandomSubset fuses a uniform random subset of the kAll
// candidates with the same size as the kRepetitive merge count.
MergeResult merge_pairs(const Corpus& corpus, const Vocabulary& vocab,
                        const std::set<TokenPair>& pairs, MergeScope scope = MergeScope::kAll,
                        std::uint64_t seed = 0);

std::vector<TokenId> unmerge(std::span<const TokenId> ids,
                             const std::map<TokenId, TokenPair>& fused);

struct OverlapReport {
  std::size_t size_a = 0;
  std::size_t size_b = 0;
  std::size_t intersection = 0;
  double fraction_of_a = 0.0;  // |A n B| / |A|
  double fraction_of_b = 0.0;  // |A n B| / |B|, 0 when B is empty
};

template <typename Set>
OverlapReport overlap_report(const Set& a, const Set& b) {
  if (a.empty()) throw Error("overlap_report: first set is empty");
  OverlapReport r;
  r.size_a = a.size();
  r.size_b = b.size();
  for (const auto& x : a) r.intersection += b.count(x);
  r.fraction_of_a = static_cast<double>(r.intersection) / static_cast<double>(r.size_a);
  r.fraction_of_b =
      r.size_b ? static_cast<double>(r.intersection) / static_cast<double>(r.size_b) : 0.0;
  return r;
}

// Share of corpus words covered by a repeated n-gram within their document.
double repetitive_word_percent(const Corpus& corpus, int n);

// Share of bigram occurrences of `pairs` that repeat within their document.
double repetitive_pair_share(const Corpus& corpus, const std::set<TokenPair>& pairs);

struct ProbeResult {
  std::vector<TokenId> ngram;
  std::size_t start = 0;  // last occurrence
  double p_unmasked = 0.0;
  double p_masked = 0.0;
  double delta() const { return p_unmasked - p_masked; }
};

// For each n-gram occurring twice or more, the teacher-forced probability of
// its last occurrence with full context versus with the keys of earlier
// occurrences (positions before the last occurrence) masked in every layer.
template <typename T>
std::vector<ProbeResult> self_reinforcement_probe(const Transformer<T>& model,
                                                  std::span<const TokenId> seq, int n);

// Same probe with an explicit set of masked key positions for one target span.
template <typename T>
ProbeResult probe_span(const Transformer<T>& model, std::span<const TokenId> seq,
                       std::size_t start, std::size_t length,
                       const std::vector<std::uint8_t>& masked_keys);

struct AmplificationReport {
  double train_rep2 = 0.0;
  double generated_rep2 = 0.0;
  double ratio = 0.0;
};

AmplificationReport amplification_report(double train_rep2, double generated_rep2);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

// One-sided sign test: P(X >= positives) for X ~ Binomial(positives + negatives, 1/2).
double sign_test_p_value(std::size_t positives, std::size_t negatives);

nlohmann::json to_json(const InflowTable& table, const Vocabulary& vocab, std::size_t top = 50);

}  // namespace repdrop
