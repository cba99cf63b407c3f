#include "repdrop/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

namespace repdrop {

namespace {

constexpr double kProbFloor = 1e-12;

struct NameEntry {
  const char* name;
  ObjectiveKind kind;
};
constexpr NameEntry kObjectiveNames[] = {
    {"mle", ObjectiveKind::kMle},
    {"rep_dropout", ObjectiveKind::kRepDropout},
    {"rand_dropout", ObjectiveKind::kRandDropout},
    {"scalegrad", ObjectiveKind::kScaleGrad},
    {"unlikelihood", ObjectiveKind::kUnlikelihood},
};

struct ScopeName {
  const char* name;
  ScopeVariant variant;
};
constexpr ScopeName kScopeNames[] = {
    {"prefix_all", ScopeVariant::kPrefixAll},
    {"prefix_repetitive", ScopeVariant::kPrefixRepetitive},
    {"prefix_random_subset", ScopeVariant::kPrefixRandomSubset},
    {"high_inflow_all", ScopeVariant::kHighInflowAll},
    {"high_inflow_repetitive", ScopeVariant::kHighInflowRepetitive},
    {"high_inflow_random_subset", ScopeVariant::kHighInflowRandomSubset},
};

bool is_high_inflow(ScopeVariant v) {
  return v == ScopeVariant::kHighInflowAll || v == ScopeVariant::kHighInflowRepetitive ||
         v == ScopeVariant::kHighInflowRandomSubset;
}

std::uint64_t sequence_fingerprint(std::span<const TokenId> seq) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (TokenId t : seq) {
    h ^= static_cast<std::uint32_t>(t);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<TokenId> random_subset(std::vector<TokenId> pool, std::size_t k, Rng& rng) {
  k = std::min(k, pool.size());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

void ObjectiveSpec::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("dropout rate p must be in [0, 1]");
  if (n < 1) throw ConfigError("n-gram length must be at least 1");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1]");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (scope.n < 1) throw ConfigError("scope n-gram length must be at least 1");
}

std::string to_string(ObjectiveKind kind) {
  for (const auto& e : kObjectiveNames) {
    if (e.kind == kind) return e.name;
  }
  return "unknown";
}

std::string to_string(ScopeVariant variant) {
  for (const auto& e : kScopeNames) {
    if (e.variant == variant) return e.name;
  }
  return "unknown";
}

ObjectiveKind parse_objective_kind(const std::string& name) {
  for (const auto& e : kObjectiveNames) {
    if (name == e.name) return e.kind;
  }
  throw ConfigError("unknown objective: " + name);
}

ScopeVariant parse_scope_variant(const std::string& name) {
  for (const auto& e : kScopeNames) {
    if (name == e.name) return e.variant;
  }
  throw ConfigError("unknown penalization scope: " + name);
}

std::vector<std::vector<TokenId>> select_scopes(std::span<const TokenId> seq,
                                                const PenalizationScope& scope,
                                                const ScopeAux& aux) {
  const ScopeVariant v = scope.variant;
  if (is_high_inflow(v) && aux.high_inflow == nullptr) {
    throw Error("high-inflow scope requires inflow statistics");
  }
  std::vector<std::vector<TokenId>> out;
  if (seq.size() < 2) return out;
  out.reserve(seq.size() - 1);

  const bool needs_rep = v != ScopeVariant::kPrefixAll && v != ScopeVariant::kHighInflowAll;
  std::vector<std::uint8_t> rep;
  if (needs_rep) rep = repetitive_positions(NgramIndex(seq, scope.n));

  const auto inflow_ok = [&](TokenId t) {
    return !is_high_inflow(v) || aux.high_inflow->count(t) > 0;
  };

  std::vector<TokenId> all;  // eligible prefix types, first-occurrence order
  std::vector<TokenId> reps;
  std::unordered_map<TokenId, bool> seen_all, seen_rep;
  const std::uint64_t base = derive_seed(scope.seed, sequence_fingerprint(seq), 0);

  for (std::size_t t = 1; t < seq.size(); ++t) {
    const TokenId tok = seq[t - 1];
    if (inflow_ok(tok) && !seen_all[tok]) {
      seen_all[tok] = true;
      all.push_back(tok);
    }
    if (needs_rep && inflow_ok(tok) && rep[t - 1] && !seen_rep[tok]) {
      seen_rep[tok] = true;
      reps.push_back(tok);
    }
    std::vector<TokenId> s;
    switch (v) {
      case ScopeVariant::kPrefixAll:
      case ScopeVariant::kHighInflowAll:
        s = all;
        break;
      case ScopeVariant::kPrefixRepetitive:
      case ScopeVariant::kHighInflowRepetitive:
        s = reps;
        break;
      case ScopeVariant::kPrefixRandomSubset:
      case ScopeVariant::kHighInflowRandomSubset: {
        Rng rng(derive_seed(base, t, 1));
        s = random_subset(all, reps.size(), rng);
        break;
      }
    }
    std::sort(s.begin(), s.end());
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TokenId> select_scope(std::span<const TokenId> seq, std::size_t t,
                                  const PenalizationScope& scope,
                                  const ScopeAux& aux) {
  if (t < 1 || t >= seq.size()) {
    throw Error("scope position out of range: " + std::to_string(t));
  }
  auto all = select_scopes(seq.first(t + 1), scope, aux);
  return std::move(all.back());
}

std::vector<double> scalegrad_rescale(std::span<const double> probs,
                                      std::span<const TokenId> non_novel,
                                      double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1]");
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw Error("not a probability distribution");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw Error("not a probability distribution");

  std::vector<double> out(probs.begin(), probs.end());
  std::vector<std::uint8_t> flagged(probs.size(), 0);
  for (TokenId t : non_novel) {
    if (t < 0 || static_cast<std::size_t>(t) >= probs.size()) {
      throw Error("token id out of range in non-novel set");
    }
    flagged[static_cast<std::size_t>(t)] = 1;
  }
  double z = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (flagged[i]) out[i] *= gamma;
    z += out[i];
  }
  for (double& p : out) p /= z;
  return out;
}

namespace {

// Softmax of a row into `probs`; returns log-sum-exp.
template <typename T>
double softmax_row(std::span<const T> logits, std::span<T> probs) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T z : logits) mx = std::max(mx, z);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = static_cast<T>(std::exp(static_cast<double>(logits[i] - mx)));
    sum += static_cast<double>(probs[i]);
  }
  const T inv = static_cast<T>(1.0 / sum);
  for (auto& p : probs) p *= inv;
  return static_cast<double>(mx) + std::log(sum);
}

}  // namespace

template <typename T>
double position_loss(std::span<const T> logits, TokenId target,
                     std::span<const TokenId> scope, const ObjectiveSpec& spec,
                     std::span<T> grad, bool* clamped) {
  const std::size_t vocab = logits.size();
  const auto tgt = static_cast<std::size_t>(target);
  switch (spec.kind) {
    case ObjectiveKind::kMle:
    case ObjectiveKind::kRepDropout:
    case ObjectiveKind::kRandDropout: {
      const double lse = softmax_row(logits, grad);
      grad[tgt] -= T(1);
      return lse - static_cast<double>(logits[tgt]);
    }
    case ObjectiveKind::kScaleGrad: {
      // Novel tokens are scaled by gamma; equivalently every scope member is
      // shifted by -log(gamma) before the softmax.
      std::vector<T> shifted(logits.begin(), logits.end());
      const T shift = static_cast<T>(-std::log(spec.gamma));
      for (TokenId c : scope) shifted[static_cast<std::size_t>(c)] += shift;
      const double lse = softmax_row(std::span<const T>(shifted), grad);
      grad[tgt] -= T(1);
      return lse - static_cast<double>(shifted[tgt]);
    }
    case ObjectiveKind::kUnlikelihood: {
      const double lse = softmax_row(logits, grad);
      double loss = lse - static_cast<double>(logits[tgt]);
      // grad = p - e_t + alpha * sum_c w_c (e_c - p), w_c = p_c / (1 - p_c)
      double wsum = 0.0;
      std::vector<std::pair<std::size_t, double>> weights;
      weights.reserve(scope.size());
      for (TokenId c : scope) {
        const auto ci = static_cast<std::size_t>(c);
        if (ci == tgt) continue;
        const double pc = static_cast<double>(grad[ci]);
        const double rest = 1.0 - pc;
        if (rest < kProbFloor) {
          loss -= spec.alpha * std::log(kProbFloor);
          if (clamped) *clamped = true;
          continue;
        }
        loss -= spec.alpha * std::log(rest);
        const double w = pc / rest;
        weights.emplace_back(ci, w);
        wsum += w;
      }
      const double a = spec.alpha;
      if (a != 0.0 && !weights.empty()) {
        const T scale = static_cast<T>(1.0 - a * wsum);
        for (std::size_t i = 0; i < vocab; ++i) grad[i] *= scale;
        for (const auto& [ci, w] : weights) grad[ci] += static_cast<T>(a * w);
      }
      grad[tgt] -= T(1);
      return loss;
    }
  }
  throw Error("unhandled objective kind");
}

template double position_loss<float>(std::span<const float>, TokenId,
                                     std::span<const TokenId>, const ObjectiveSpec&,
                                     std::span<float>, bool*);
template double position_loss<double>(std::span<const double>, TokenId,
                                      std::span<const TokenId>, const ObjectiveSpec&,
                                      std::span<double>, bool*);

UnlikelihoodResult unlikelihood_loss(std::span<const double> logits,
                                     std::size_t vocab,
                                     std::span<const TokenId> targets,
                                     const std::vector<std::vector<TokenId>>& scopes,
                                     double alpha) {
  if (vocab == 0 || logits.size() != vocab * targets.size()) {
    throw Error("logits shape does not match targets");
  }
  if (scopes.size() != targets.size()) throw Error("one scope per position required");
  if (targets.empty()) throw Error("no positions");
  UnlikelihoodResult r;
  std::vector<double> probs(vocab);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto row = logits.subspan(t * vocab, vocab);
    const double lse = softmax_row(row, std::span<double>(probs));
    const auto tgt = static_cast<std::size_t>(targets[t]);
    r.mle += lse - row[tgt];
    for (TokenId c : scopes[t]) {
      const auto ci = static_cast<std::size_t>(c);
      if (ci == tgt) continue;
      double rest = 1.0 - probs[ci];
      if (rest < kProbFloor) {
        rest = kProbFloor;
        r.clamped = true;
      }
      r.penalty -= std::log(rest);
    }
  }
  const double count = static_cast<double>(targets.size());
  r.mle /= count;
  r.penalty /= count;
  r.loss = r.mle + alpha * r.penalty;
  return r;
}

}  // namespace repdrop
