#include "repdrop/repmetrics.hpp"

#include <cmath>
#include <cstdio>
#include <unordered_map>
#include <unordered_set>

namespace repdrop {

namespace {

// Hash set over n-gram windows of a sequence, keyed by start index.
struct WindowHash {
  std::span<const TokenId> seq;
  std::size_t n;
  std::size_t operator()(std::size_t start) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
      h ^= static_cast<std::uint32_t>(seq[start + i]);
      h *= 0x100000001b3ULL;
    }
    return static_cast<std::size_t>(h);
  }
};

struct WindowEq {
  std::span<const TokenId> seq;
  std::size_t n;
  bool operator()(std::size_t a, std::size_t b) const {
    for (std::size_t i = 0; i < n; ++i) {
      if (seq[a + i] != seq[b + i]) return false;
    }
    return true;
  }
};

std::uint64_t bigram_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
  return buf;
}

}  // namespace

double rep_n(std::span<const TokenId> seq, int n) {
  if (n < 1) throw ConfigError("n must be at least 1");
  const auto un = static_cast<std::size_t>(n);
  if (seq.size() < un) throw Error("sequence shorter than n");
  const std::size_t windows = seq.size() - un + 1;
  std::unordered_set<std::size_t, WindowHash, WindowEq> unique(
      windows * 2, WindowHash{seq, un}, WindowEq{seq, un});
  for (std::size_t i = 0; i < windows; ++i) unique.insert(i);
  return 1.0 - static_cast<double>(unique.size()) / static_cast<double>(windows);
}

double rep_w(std::span<const TokenId> seq, int w) {
  if (w < 1) throw ConfigError("w must be at least 1");
  if (seq.empty()) throw Error("empty sequence");
  std::unordered_map<TokenId, std::size_t> last_seen;
  std::size_t hits = 0;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    auto it = last_seen.find(seq[t]);
    if (it != last_seen.end() && t - it->second <= static_cast<std::size_t>(w)) {
      ++hits;
    }
    last_seen[seq[t]] = t;
  }
  return static_cast<double>(hits) / static_cast<double>(seq.size());
}

double rep_r(std::span<const TokenId> seq) {
  if (seq.size() < 2) throw Error("sequence shorter than 2");
  std::unordered_map<std::uint64_t, std::size_t> counts;
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    ++counts[bigram_key(seq[i], seq[i + 1])];
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const bool fwd =
        i + 1 < seq.size() && counts[bigram_key(seq[i], seq[i + 1])] > 1;
    const bool back = i > 0 && counts[bigram_key(seq[i - 1], seq[i])] > 1;
    if (fwd || back) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(seq.size());
}

namespace {

template <typename F>
CorpusScore mean_over(std::span<const TokenSeq> seqs, std::size_t min_len,
                      F&& metric) {
  CorpusScore score;
  double sum = 0.0;
  for (const auto& s : seqs) {
    if (s.size() < min_len) {
      ++score.skipped;
      continue;
    }
    sum += metric(s.view());
    ++score.used;
  }
  if (score.used == 0) {
    throw Error("no sequence of length >= " + std::to_string(min_len));
  }
  score.mean = sum / static_cast<double>(score.used);
  return score;
}

}  // namespace

CorpusScore corpus_rep_n(std::span<const TokenSeq> seqs, int n) {
  if (n < 1) throw ConfigError("n must be at least 1");
  return mean_over(seqs, static_cast<std::size_t>(n),
                   [n](std::span<const TokenId> s) { return rep_n(s, n); });
}

CorpusScore corpus_rep_w(std::span<const TokenSeq> seqs, int w) {
  return mean_over(seqs, 1, [w](std::span<const TokenId> s) { return rep_w(s, w); });
}

CorpusScore corpus_rep_r(std::span<const TokenSeq> seqs) {
  return mean_over(seqs, 2, [](std::span<const TokenId> s) { return rep_r(s); });
}

PerplexityResult perplexity(const SequenceScorer& scorer, const Corpus& corpus) {
  if (corpus.vocab_size != scorer.vocab_size()) {
    throw Error("vocabulary mismatch: corpus uses " +
                std::to_string(corpus.vocab_size) + " tokens, model has " +
                std::to_string(scorer.vocab_size()));
  }
  const std::size_t window = scorer.max_len();
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& doc : corpus.documents) {
    for (std::size_t start = 0; start + 1 < doc.size(); start += window) {
      const std::size_t len = std::min(window, doc.size() - start);
      if (len < 2) break;
      const auto lp = scorer.token_log_probs(doc.view().subspan(start, len));
      for (double v : lp) nll -= v;
      count += lp.size();
    }
  }
  if (count == 0) throw Error("corpus has no predictable tokens");
  PerplexityResult r;
  r.predicted_tokens = count;
  r.mean_nll = nll / static_cast<double>(count);
  r.ppl = std::exp(r.mean_nll);
  return r;
}

MetricsReport compute_report(std::span<const TokenSeq> seqs,
                             const MetricConfig& config, std::string name) {
  MetricsReport report;
  report.name = std::move(name);
  report.num_sequences = seqs.size();
  for (int n : config.ns) {
    const auto s = corpus_rep_n(seqs, n);
    report.rep_n[n] = s.mean;
    report.skipped = std::max(report.skipped, s.skipped);
  }
  report.rep_w = corpus_rep_w(seqs, config.w).mean;
  report.rep_r = corpus_rep_r(seqs).mean;
  return report;
}

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["name"] = report.name;
  nlohmann::json reps = nlohmann::json::object();
  for (const auto& [n, v] : report.rep_n) reps[std::to_string(n)] = v;
  j["rep_n"] = reps;
  j["rep_w"] = report.rep_w;
  j["rep_r"] = report.rep_r;
  j["ppl"] = report.ppl ? nlohmann::json(*report.ppl) : nlohmann::json(nullptr);
  j["num_sequences"] = report.num_sequences;
  j["skipped"] = report.skipped;
  return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.name = j.value("name", "");
  for (const auto& [k, v] : j.at("rep_n").items()) r.rep_n[std::stoi(k)] = v.get<double>();
  r.rep_w = j.at("rep_w").get<double>();
  r.rep_r = j.at("rep_r").get<double>();
  if (j.contains("ppl") && !j["ppl"].is_null()) r.ppl = j["ppl"].get<double>();
  r.num_sequences = j.value("num_sequences", std::size_t{0});
  r.skipped = j.value("skipped", std::size_t{0});
  return r;
}

std::string csv_header(bool with_name) {
  return std::string(with_name ? "Model," : "") + "Rep-2,Rep-3,Rep-4,Rep-w,Rep-r,PPL";
}

std::string csv_row(const MetricsReport& report, bool with_name) {
  std::string row = with_name ? report.name + "," : "";
  for (int n : {2, 3, 4}) {
    auto it = report.rep_n.find(n);
    row += (it == report.rep_n.end() ? std::string("--") : percent(it->second)) + ",";
  }
  row += percent(report.rep_w) + "," + percent(report.rep_r) + ",";
  if (report.ppl) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", *report.ppl);
    row += buf;
  } else {
    row += "--";
  }
  return row;
}

}  // namespace repdrop
