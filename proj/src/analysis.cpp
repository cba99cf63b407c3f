#include "repdrop/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "repdrop/repmask.hpp"

namespace repdrop {

double InflowTable::at(TokenId w) const {
  if (w < 0 || static_cast<std::size_t>(w) >= inflow.size()) return 0.0;
  return inflow[static_cast<std::size_t>(w)];
}

double InflowTable::conditional(TokenId v, TokenId w) const {
  auto it = bigram_counts.find({v, w});
  if (it == bigram_counts.end()) return 0.0;
  return static_cast<double>(it->second) /
         static_cast<double>(successor_totals[static_cast<std::size_t>(v)]);
}

InflowTable compute_inflow(const Corpus& corpus) {
  if (corpus.documents.empty()) throw Error("empty corpus");
  InflowTable table;
  TokenId max_id = 0;
  for (const auto& doc : corpus.documents) {
    for (TokenId t : doc.ids) max_id = std::max(max_id, t);
  }
  const auto size = std::max<std::size_t>(corpus.vocab_size, static_cast<std::size_t>(max_id) + 1);
  table.inflow.assign(size, 0.0);
  table.successor_totals.assign(size, 0);
  for (const auto& doc : corpus.documents) {
    table.total_words += doc.size();
    for (std::size_t i = 0; i + 1 < doc.size(); ++i) {
      ++table.bigram_counts[{doc.ids[i], doc.ids[i + 1]}];
      ++table.successor_totals[static_cast<std::size_t>(doc.ids[i])];
    }
  }
  for (const auto& [pair, count] : table.bigram_counts) {
    table.inflow[static_cast<std::size_t>(pair.second)] +=
        static_cast<double>(count) /
        static_cast<double>(table.successor_totals[static_cast<std::size_t>(pair.first)]);
  }
  return table;
}

namespace {

HighInflowSelection select_at(const InflowTable& table, double threshold) {
  HighInflowSelection sel;
  sel.threshold = threshold;
  std::size_t covered = 0;
  for (const auto& [pair, count] : table.bigram_counts) {
    if (table.at(pair.second) > threshold) {
      sel.pairs.insert(pair);
      sel.words.insert(pair.second);
      covered += 2 * count;
    }
  }
  sel.estimated_coverage =
      table.total_words ? std::min(1.0, static_cast<double>(covered) /
                                            static_cast<double>(table.total_words))
                        : 0.0;
  return sel;
}

}  // namespace

HighInflowSelection select_high_inflow_pairs(const InflowTable& table, const InflowRule& rule) {
  HighInflowSelection sel;
  if (rule.mode == InflowRule::Mode::kThreshold) {
    sel = select_at(table, rule.threshold);
  } else {
    // Candidate thresholds sit just below each distinct inflow value; pick the
    // one whose estimated coverage is closest to the target.
    std::vector<double> values;
    for (double v : table.inflow) {
      if (v > 0.0) values.push_back(v);
    }
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    double best_gap = std::numeric_limits<double>::infinity();
    double best_threshold = values.empty() ? 0.0 : values.back();
    // Coverage as a function of the threshold, computed in one sweep from
    // the highest inflow downwards.
    std::map<double, std::size_t, std::greater<>> by_inflow;
    for (const auto& [pair, count] : table.bigram_counts) {
      by_inflow[table.at(pair.second)] += 2 * count;
    }
    std::size_t covered = 0;
    std::size_t idx = values.size();
    for (const auto& [value, words] : by_inflow) {
      if (value <= 0.0) break;
      covered += words;
      const double cov = static_cast<double>(covered) / static_cast<double>(table.total_words);
      while (idx > 0 && values[idx - 1] >= value) --idx;
      const double threshold = idx > 0 ? values[idx - 1] : 0.0;
      const double gap = std::abs(std::min(1.0, cov) - rule.target_coverage);
      if (gap < best_gap) {
        best_gap = gap;
        best_threshold = threshold;
      }
    }
    sel = select_at(table, best_threshold);
  }
  if (sel.pairs.empty()) sel.warning = "inflow rule selected no pairs";
  return sel;
}

namespace {

std::string fused_name(const Vocabulary& vocab, TokenPair p) {
  return vocab.token(p.first) + "@@" + vocab.token(p.second);
}

// Candidate start positions of a greedy non-overlapping scan.
std::vector<std::size_t> greedy_candidates(std::span<const TokenId> ids,
                                           const std::set<TokenPair>& pairs,
                                           bool repetitive_only) {
  std::map<TokenPair, std::size_t> local;
  if (repetitive_only) {
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) ++local[{ids[i], ids[i + 1]}];
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i + 1 < ids.size();) {
    const TokenPair p{ids[i], ids[i + 1]};
    if (pairs.count(p) && (!repetitive_only || local[p] > 1)) {
      out.push_back(i);
      i += 2;
    } else {
      ++i;
    }
  }
  return out;
}

}  // namespace

MergeResult merge_pairs(const Corpus& corpus, const Vocabulary& vocab,
                        const std::set<TokenPair>& pairs, MergeScope scope,
                        std::uint64_t seed) {
  MergeResult result;
  result.vocab = vocab;
  std::map<TokenPair, TokenId> pair_to_fused;
  for (const auto& p : pairs) {
    const TokenId id = result.vocab.add(fused_name(vocab, p));
    pair_to_fused[p] = id;
    result.fused[id] = p;
  }

  std::vector<std::vector<std::size_t>> chosen(corpus.documents.size());
  if (scope == MergeScope::kRandomSubset) {
    std::size_t quota = 0;
    std::vector<std::pair<std::size_t, std::size_t>> pool;  // (doc, start)
    for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
      const auto ids = corpus.documents[d].view();
      quota += greedy_candidates(ids, pairs, true).size();
      for (std::size_t s : greedy_candidates(ids, pairs, false)) pool.emplace_back(d, s);
    }
    Rng rng(seed);
    quota = std::min(quota, pool.size());
    for (std::size_t i = 0; i < quota; ++i) {
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    }
    pool.resize(quota);
    std::sort(pool.begin(), pool.end());
    for (const auto& [d, s] : pool) chosen[d].push_back(s);
  } else {
    for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
      chosen[d] = greedy_candidates(corpus.documents[d].view(), pairs,
                                    scope == MergeScope::kRepetitive);
    }
  }

  result.corpus.name = corpus.name;
  result.corpus.vocab_size = result.vocab.size();
  for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
    const auto& ids = corpus.documents[d].ids;
    TokenSeq out;
    std::size_t next = 0;
    for (std::size_t i = 0; i < ids.size();) {
      if (next < chosen[d].size() && chosen[d][next] == i) {
        out.ids.push_back(pair_to_fused.at({ids[i], ids[i + 1]}));
        ++result.merges;
        ++next;
        i += 2;
      } else {
        out.ids.push_back(ids[i]);
        ++i;
      }
    }
    result.corpus.documents.push_back(std::move(out));
  }
  result.corpus.recount();
  result.word_percent = corpus.total_words ? 2.0 * static_cast<double>(result.merges) /
                                                 static_cast<double>(corpus.total_words)
                                           : 0.0;
  return result;
}

std::vector<TokenId> unmerge(std::span<const TokenId> ids,
                             const std::map<TokenId, TokenPair>& fused) {
  std::vector<TokenId> out;
  out.reserve(ids.size() * 2);
  for (TokenId t : ids) {
    auto it = fused.find(t);
    if (it == fused.end()) {
      out.push_back(t);
    } else {
      out.push_back(it->second.first);
      out.push_back(it->second.second);
    }
  }
  return out;
}

double repetitive_word_percent(const Corpus& corpus, int n) {
  std::size_t covered = 0;
  for (const auto& doc : corpus.documents) covered += count_repetitive_tokens(doc.view(), n);
  return corpus.total_words
             ? static_cast<double>(covered) / static_cast<double>(corpus.total_words)
             : 0.0;
}

double repetitive_pair_share(const Corpus& corpus, const std::set<TokenPair>& pairs) {
  std::size_t total = 0, repeated = 0;
  for (const auto& doc : corpus.documents) {
    std::map<TokenPair, std::size_t> local;
    for (std::size_t i = 0; i + 1 < doc.size(); ++i) {
      const TokenPair p{doc.ids[i], doc.ids[i + 1]};
      if (pairs.count(p)) ++local[p];
    }
    for (const auto& [p, c] : local) {
      total += c;
      if (c > 1) repeated += c;
    }
  }
  return total ? static_cast<double>(repeated) / static_cast<double>(total) : 0.0;
}

template <typename T>
ProbeResult probe_span(const Transformer<T>& model, std::span<const TokenId> seq,
                       std::size_t start, std::size_t length,
                       const std::vector<std::uint8_t>& masked_keys) {
  if (start == 0 || start + length > seq.size()) throw Error("probe span out of range");
  if (masked_keys.size() != seq.size()) throw Error("mask length does not match sequence");
  const std::size_t stop = start + length;
  const auto ctx = seq.first(stop);
  ProbeResult r;
  r.ngram.assign(seq.begin() + static_cast<std::ptrdiff_t>(start),
                 seq.begin() + static_cast<std::ptrdiff_t>(stop));
  r.start = start;
  const auto span_prob = [&](const std::vector<double>& lp) {
    double s = 0.0;
    for (std::size_t i = start; i < stop; ++i) s += lp[i - 1];
    return std::exp(s);
  };
  r.p_unmasked = span_prob(model.log_probs(ctx, nullptr));
  LayerMaskSet masks;
  RepetitionMask mask;
  mask.masked.assign(masked_keys.begin(), masked_keys.begin() + static_cast<std::ptrdiff_t>(stop));
  masks.per_layer.assign(static_cast<std::size_t>(model.config().layers), mask);
  r.p_masked = span_prob(model.log_probs(ctx, &masks));
  return r;
}

template <typename T>
std::vector<ProbeResult> self_reinforcement_probe(const Transformer<T>& model,
                                                  std::span<const TokenId> seq, int n) {
  std::vector<ProbeResult> out;
  const NgramIndex index(seq, n);
  for (const auto& entry : index.entries()) {
    if (entry.spans.size() < 2) continue;
    const auto last = entry.spans.back();
    std::vector<std::uint8_t> masked(seq.size(), 0);
    for (std::size_t k = 0; k + 1 < entry.spans.size(); ++k) {
      const auto& s = entry.spans[k];
      for (std::size_t i = s.start; i < std::min(s.end, last.start); ++i) masked[i] = 1;
    }
    out.push_back(probe_span(model, seq, last.start, last.end - last.start, masked));
  }
  return out;
}

template ProbeResult probe_span<float>(const Transformer<float>&, std::span<const TokenId>,
                                       std::size_t, std::size_t, const std::vector<std::uint8_t>&);
template ProbeResult probe_span<double>(const Transformer<double>&, std::span<const TokenId>,
                                        std::size_t, std::size_t,
                                        const std::vector<std::uint8_t>&);
template std::vector<ProbeResult> self_reinforcement_probe<float>(const Transformer<float>&,
                                                                  std::span<const TokenId>, int);
template std::vector<ProbeResult> self_reinforcement_probe<double>(const Transformer<double>&,
                                                                   std::span<const TokenId>, int);

AmplificationReport amplification_report(double train_rep2, double generated_rep2) {
  if (!(train_rep2 > 0.0)) throw Error("undefined ratio: training rep-2 is zero");
  return {train_rep2, generated_rep2, generated_rep2 / train_rep2};
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("spearman needs two equal-length series");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double sign_test_p_value(std::size_t positives, std::size_t negatives) {
  const std::size_t n = positives + negatives;
  if (n == 0) return 1.0;
  // Sum of C(n, k) / 2^n for k >= positives, in log space.
  double p = 0.0;
  for (std::size_t k = positives; k <= n; ++k) {
    const double log_c = std::lgamma(static_cast<double>(n) + 1) -
                         std::lgamma(static_cast<double>(k) + 1) -
                         std::lgamma(static_cast<double>(n - k) + 1);
    p += std::exp(log_c - static_cast<double>(n) * std::log(2.0));
  }
  return std::min(1.0, p);
}

nlohmann::json to_json(const InflowTable& table, const Vocabulary& vocab, std::size_t top) {
  std::vector<std::pair<double, TokenId>> ranked;
  for (std::size_t i = 0; i < table.inflow.size(); ++i) {
    if (table.inflow[i] > 0.0) ranked.emplace_back(table.inflow[i], static_cast<TokenId>(i));
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  nlohmann::json words = nlohmann::json::array();
  for (std::size_t i = 0; i < std::min(top, ranked.size()); ++i) {
    const auto id = ranked[i].second;
    words.push_back({{"token", static_cast<std::size_t>(id) < vocab.size() ? vocab.token(id) : "?"},
                     {"id", id},
                     {"inflow", ranked[i].first}});
  }
  return {{"total_words", table.total_words},
          {"distinct_bigrams", table.bigram_counts.size()},
          {"top_inflow", words}};
}

}  // namespace repdrop
