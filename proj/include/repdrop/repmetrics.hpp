#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "repdrop/corpus.hpp"

namespace repdrop {

struct MetricConfig {
  std::vector<int> ns{2, 3, 4};
  int w = 16;
};

// 1 - |unique n-grams| / (L - n + 1). Throws when L < n.
double rep_n(std::span<const TokenId> seq, int n);

// Fraction of tokens that already occur among the previous min(w, t) tokens.
double rep_w(std::span<const TokenId> seq, int w = 16);

// Fraction of positions that take part in a bigram occurring at least twice
// in the sequence, either as its first or its second token. Throws when L < 2.
double rep_r(std::span<const TokenId> seq);

struct CorpusScore {
  double mean = 0.0;
  std::size_t used = 0;
  std::size_t skipped = 0;
};

// Unweighted mean of rep_n over sequences with L >= n.
CorpusScore corpus_rep_n(std::span<const TokenSeq> seqs, int n);
CorpusScore corpus_rep_w(std::span<const TokenSeq> seqs, int w);
CorpusScore corpus_rep_r(std::span<const TokenSeq> seqs);

// Anything that can assign teacher-forced next-token log-probabilities.
class SequenceScorer {
 public:
  virtual ~SequenceScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t max_len() const = 0;
  // log P(x_i | x_<i) for i = 1 .. L-1 (L-1 values).
  virtual std::vector<double> token_log_probs(
      std::span<const TokenId> ids) const = 0;
};

struct PerplexityResult {
  double ppl = 0.0;
  double mean_nll = 0.0;
  std::size_t predicted_tokens = 0;
};

// exp of the mean NLL over every token but the first of each window; documents
// longer than scorer.max_len() are scored in consecutive windows.
PerplexityResult perplexity(const SequenceScorer& scorer, const Corpus& corpus);

struct MetricsReport {
  std::string name;
  std::map<int, double> rep_n;
  double rep_w = 0.0;
  double rep_r = 0.0;
  std::optional<double> ppl;
  std::size_t num_sequences = 0;
  std::size_t skipped = 0;
};

MetricsReport compute_report(std::span<const TokenSeq> seqs,
                             const MetricConfig& config, std::string name = {});

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

// Rep-2,Rep-3,Rep-4,Rep-w,Rep-r,PPL as percentages with two decimals.
std::string csv_header(bool with_name = false);
std::string csv_row(const MetricsReport& report, bool with_name = false);

}  // namespace repdrop
