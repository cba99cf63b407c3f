#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "repdrop/corpus.hpp"
#include "repdrop/repmask.hpp"

namespace repdrop {

enum class ObjectiveKind { kMle, kRepDropout, kRandDropout, kScaleGrad, kUnlikelihood };

enum class ScopeVariant {
  kPrefixAll,
  kPrefixRepetitive,
  kPrefixRandomSubset,
  kHighInflowAll,
  kHighInflowRepetitive,
  kHighInflowRandomSubset,
};

struct PenalizationScope {
  ScopeVariant variant = ScopeVariant::kPrefixAll;
  // n-gram length defining "repetitive" positions.
  int n = 2;
  // Seed for the random-subset variants.
  std::uint64_t seed = 0;
};

struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::kMle;
  double p = 0.6;      // dropout rate
  int n = 2;           // n-gram length for the dropout masks
  double gamma = 0.2;  // ScaleGrad
  double alpha = 1.0;  // unlikelihood
  PenalizationScope scope;

  void validate() const;
  bool uses_masks() const {
    return kind == ObjectiveKind::kRepDropout || kind == ObjectiveKind::kRandDropout;
  }
  bool uses_scopes() const {
    return kind == ObjectiveKind::kScaleGrad || kind == ObjectiveKind::kUnlikelihood;
  }
};

std::string to_string(ObjectiveKind kind);
std::string to_string(ScopeVariant variant);
ObjectiveKind parse_objective_kind(const std::string& name);
ScopeVariant parse_scope_variant(const std::string& name);

// Token ids considered "high inflow"; required by the HighInflow* variants.
struct ScopeAux {
  const std::unordered_set<TokenId>* high_inflow = nullptr;
};

// Penalized token types for predicting position t (0-based, 1 <= t < L) from
// the prefix ids[0..t).
std::vector<TokenId> select_scope(std::span<const TokenId> seq, std::size_t t,
                                  const PenalizationScope& scope,
                                  const ScopeAux& aux = {});

// Scopes for every predicted position 1..L-1, computed in one pass.
// Element t-1 holds the scope for position t.
std::vector<std::vector<TokenId>> select_scopes(std::span<const TokenId> seq,
                                                const PenalizationScope& scope,
                                                const ScopeAux& aux = {});

// Renormalized down-scaling: non-novel tokens get gamma * p_i / Z.
std::vector<double> scalegrad_rescale(std::span<const double> probs,
                                      std::span<const TokenId> non_novel,
                                      double gamma);

struct UnlikelihoodResult {
  double loss = 0.0;
  double mle = 0.0;
  double penalty = 0.0;
  // Set when some negative had probability within 1e-12 of 1.
  bool clamped = false;
};

// Mean over positions of -log p(target) + alpha * sum_{c in scope \ target}
// -log(1 - p(c)). logits is row-major [positions x vocab].
UnlikelihoodResult unlikelihood_loss(std::span<const double> logits,
                                     std::size_t vocab,
                                     std::span<const TokenId> targets,
                                     const std::vector<std::vector<TokenId>>& scopes,
                                     double alpha);

// Loss of one position and its gradient with respect to that position's
// logits. `scope` is ignored for kinds that do not use it.
template <typename T>
double position_loss(std::span<const T> logits, TokenId target,
                     std::span<const TokenId> scope, const ObjectiveSpec& spec,
                     std::span<T> grad, bool* clamped = nullptr);

}  // namespace repdrop
