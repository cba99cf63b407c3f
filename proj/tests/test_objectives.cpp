#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "oracles.hpp"
#include "repdrop/objectives.hpp"

using namespace repdrop;

namespace {

using Ids = std::vector<TokenId>;

Ids random_seq(Rng& rng, std::size_t len, std::uint64_t vocab) {
  Ids s(len);
  for (auto& t : s) t = static_cast<TokenId>(rng.below(vocab));
  return s;
}

std::vector<double> random_logits(Rng& rng, std::size_t n, double scale = 2.0) {
  std::vector<double> z(n);
  for (auto& v : z) v = scale * rng.normal();
  return z;
}

ObjectiveSpec spec_of(ObjectiveKind kind) {
  ObjectiveSpec s;
  s.kind = kind;
  return s;
}

double loss_at(const std::vector<double>& z, TokenId target, const Ids& scope,
               const ObjectiveSpec& spec) {
  std::vector<double> g(z.size());
  return position_loss<double>(z, target, scope, spec, g);
}

}  // namespace

TEST_SUITE("objectives") {
  TEST_CASE("names round trip and bad names are config errors") {
    for (auto k : {ObjectiveKind::kMle, ObjectiveKind::kRepDropout, ObjectiveKind::kRandDropout,
                   ObjectiveKind::kScaleGrad, ObjectiveKind::kUnlikelihood}) {
      CHECK(parse_objective_kind(to_string(k)) == k);
    }
    CHECK(to_string(ObjectiveKind::kRepDropout) == "rep_dropout");
    CHECK_THROWS_AS(parse_objective_kind("bogus"), ConfigError);
    CHECK(parse_scope_variant("prefix_repetitive") == ScopeVariant::kPrefixRepetitive);
    CHECK_THROWS_AS(parse_scope_variant("x"), ConfigError);
  }

  TEST_CASE("spec validation") {
    ObjectiveSpec s;
    s.gamma = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.gamma = 0.2;
    s.alpha = -1;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.alpha = 1;
    s.p = 1.5;
    CHECK_THROWS_AS(s.validate(), ConfigError);
  }

  TEST_CASE("scalegrad_rescale examples") {
    const std::vector<double> p{0.5, 0.5};
    const auto out = scalegrad_rescale(p, Ids{1}, 0.2);
    CHECK(std::abs(out[0] - 0.5 / 0.6) < 1e-12);
    CHECK(std::abs(out[1] - 0.1 / 0.6) < 1e-12);
    CHECK(scalegrad_rescale(p, Ids{1}, 1.0) == p);
    CHECK(scalegrad_rescale(p, Ids{}, 0.2) == p);
    CHECK_THROWS(scalegrad_rescale(std::vector<double>{0.5, 0.6}, Ids{}, 0.2));
    CHECK_THROWS(scalegrad_rescale(p, Ids{}, 0.0));
  }

  TEST_CASE("scalegrad_rescale properties") {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t V = 2 + rng.below(10);
      std::vector<double> p(V);
      double s = 0;
      for (auto& v : p) s += (v = rng.uniform() + 1e-3);
      for (auto& v : p) v /= s;
      Ids nn;
      for (std::size_t i = 0; i + 1 < V; ++i) {
        if (rng.below(2)) nn.push_back(static_cast<TokenId>(i));
      }
      const double gamma = 0.05 + 0.9 * rng.uniform();
      const auto q = scalegrad_rescale(p, nn, gamma);
      double total = 0;
      for (double v : q) total += v;
      CHECK(std::abs(total - 1.0) < 1e-9);
      for (TokenId t : nn) CHECK(q[t] < p[t]);
    }
  }

  TEST_CASE("unlikelihood closed forms") {
    // probabilities (0.25, 0.25, 0.5)
    const std::vector<double> z{0.0, 0.0, std::log(2.0)};
    const auto r = unlikelihood_loss(z, 3, Ids{0}, {Ids{2}}, 1.0);
    CHECK(std::abs(r.mle - std::log(4.0)) < 1e-12);
    CHECK(std::abs(r.penalty - (-std::log(0.5))) < 1e-12);
    CHECK(std::abs(r.loss - (std::log(4.0) + std::log(2.0))) < 1e-12);
    CHECK_FALSE(r.clamped);

    const auto a0 = unlikelihood_loss(z, 3, Ids{0}, {Ids{2}}, 0.0);
    CHECK(a0.loss == a0.mle);
    const auto empty = unlikelihood_loss(z, 3, Ids{0}, {Ids{}}, 1.0);
    CHECK(empty.loss == empty.mle);
    // The target itself is never a negative.
    const auto self = unlikelihood_loss(z, 3, Ids{2}, {Ids{2}}, 1.0);
    CHECK(self.penalty == 0.0);
  }

  TEST_CASE("unlikelihood clamps a negative with probability one") {
    const std::vector<double> z{0.0, 2000.0};
    const auto r = unlikelihood_loss(z, 2, Ids{0}, {Ids{1}}, 1.0);
    CHECK(r.clamped);
    CHECK(std::abs(r.penalty + std::log(1e-12)) < 1e-9);
  }

  TEST_CASE("unlikelihood is at least MLE") {
    Rng rng(37);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t V = 3 + rng.below(6), T = 1 + rng.below(5);
      const auto z = random_logits(rng, V * T);
      Ids targets;
      std::vector<Ids> scopes;
      bool any_negative = false;
      for (std::size_t t = 0; t < T; ++t) {
        targets.push_back(static_cast<TokenId>(rng.below(V)));
        Ids sc;
        for (std::size_t i = 0; i < V; ++i) {
          if (rng.below(3) == 0) sc.push_back(static_cast<TokenId>(i));
        }
        for (TokenId c : sc) any_negative |= c != targets.back();
        scopes.push_back(sc);
      }
      const auto r = unlikelihood_loss(z, V, targets, scopes, 1.0);
      CHECK(r.loss >= r.mle);
      if (any_negative) CHECK(r.loss > r.mle);
    }
  }

  TEST_CASE("position_loss matches unlikelihood_loss and reduces to MLE") {
    Rng rng(41);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t V = 2 + rng.below(8);
      const auto z = random_logits(rng, V);
      const auto target = static_cast<TokenId>(rng.below(V));
      Ids scope;
      for (std::size_t i = 0; i < V; ++i) {
        if (rng.below(2)) scope.push_back(static_cast<TokenId>(i));
      }
      auto ul = spec_of(ObjectiveKind::kUnlikelihood);
      ul.alpha = 1.0;
      const double expect = unlikelihood_loss(z, V, Ids{target}, {scope}, 1.0).loss;
      CHECK(std::abs(loss_at(z, target, scope, ul) - expect) < 1e-9);

      const double mle = loss_at(z, target, scope, spec_of(ObjectiveKind::kMle));
      ul.alpha = 0.0;
      CHECK(loss_at(z, target, scope, ul) == mle);
      auto sg = spec_of(ObjectiveKind::kScaleGrad);
      sg.gamma = 1.0;
      CHECK(loss_at(z, target, scope, sg) == mle);
    }
  }

  TEST_CASE("scalegrad training loss scales the novel tokens") {
    // vocab {a, b}, p = (0.5, 0.5), scope (non-novel) = {b}, gamma = 0.2:
    // novel a becomes 0.1 / 0.6, b becomes 0.5 / 0.6.
    const std::vector<double> z{0.0, 0.0};
    auto sg = spec_of(ObjectiveKind::kScaleGrad);
    sg.gamma = 0.2;
    CHECK(std::abs(loss_at(z, 1, Ids{1}, sg) + std::log(0.5 / 0.6)) < 1e-12);
    CHECK(std::abs(loss_at(z, 0, Ids{1}, sg) + std::log(0.1 / 0.6)) < 1e-12);
  }

  TEST_CASE("position_loss gradients match central differences") {
    Rng rng(43);
    const double eps = 1e-5;
    for (auto kind : {ObjectiveKind::kMle, ObjectiveKind::kScaleGrad,
                      ObjectiveKind::kUnlikelihood}) {
      for (int trial = 0; trial < 20; ++trial) {
        const std::size_t V = 2 + rng.below(8);
        auto z = random_logits(rng, V);
        const auto target = static_cast<TokenId>(rng.below(V));
        Ids scope;
        for (std::size_t i = 0; i < V; ++i) {
          if (rng.below(2)) scope.push_back(static_cast<TokenId>(i));
        }
        auto spec = spec_of(kind);
        spec.alpha = 0.7;
        spec.gamma = 0.3;
        std::vector<double> g(V);
        position_loss<double>(z, target, scope, spec, g);
        for (std::size_t i = 0; i < V; ++i) {
          const double z0 = z[i];
          z[i] = z0 + eps;
          const double up = loss_at(z, target, scope, spec);
          z[i] = z0 - eps;
          const double down = loss_at(z, target, scope, spec);
          z[i] = z0;
          CHECK(oracle::relative_error(g[i], (up - down) / (2 * eps)) < 1e-6);
        }
      }
    }
  }

  TEST_CASE("scope examples") {
    PenalizationScope all{ScopeVariant::kPrefixAll, 2, 0};
    PenalizationScope rep{ScopeVariant::kPrefixRepetitive, 2, 0};
    // [a, b, a, b] predicting the fourth token: prefix {a, b}
    CHECK(select_scope(Ids{0, 1, 0, 1}, 3, all) == Ids{0, 1});
    // [a, b, c, a, b] predicting the fifth token: c is not in a repeated bigram
    CHECK(select_scope(Ids{0, 1, 2, 0, 1}, 4, rep) == Ids{0, 1});
    CHECK(select_scope(Ids{0, 1, 2, 3}, 3, rep).empty());
    CHECK_THROWS(select_scope(Ids{0, 1}, 2, all));
    PenalizationScope hi{ScopeVariant::kHighInflowAll, 2, 0};
    CHECK_THROWS(select_scopes(Ids{0, 1, 2}, hi));
    const std::unordered_set<TokenId> inflow{1};
    CHECK(select_scope(Ids{0, 1, 2, 1}, 3, hi, ScopeAux{&inflow}) == Ids{1});
  }

  TEST_CASE("scope properties over random sequences") {
    Rng rng(47);
    for (int trial = 0; trial < 100; ++trial) {
      const auto s = random_seq(rng, 2 + rng.below(40), 2 + rng.below(6));
      const std::uint64_t seed = rng.next_u64();
      const auto all = select_scopes(s, {ScopeVariant::kPrefixAll, 2, seed});
      const auto rep = select_scopes(s, {ScopeVariant::kPrefixRepetitive, 2, seed});
      const auto rnd = select_scopes(s, {ScopeVariant::kPrefixRandomSubset, 2, seed});
      REQUIRE(all.size() == s.size() - 1);
      for (std::size_t t = 0; t < all.size(); ++t) {
        // Repetitive and random scopes are subsets of the prefix.
        CHECK(std::includes(all[t].begin(), all[t].end(), rep[t].begin(), rep[t].end()));
        CHECK(std::includes(all[t].begin(), all[t].end(), rnd[t].begin(), rnd[t].end()));
        CHECK(rnd[t].size() == rep[t].size());
        // Prefix set is exactly the distinct tokens before position t+1.
        Ids prefix(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(t + 1));
        std::sort(prefix.begin(), prefix.end());
        prefix.erase(std::unique(prefix.begin(), prefix.end()), prefix.end());
        CHECK(all[t] == prefix);
      }
      CHECK(select_scopes(s, {ScopeVariant::kPrefixRandomSubset, 2, seed}) == rnd);
    }
  }
}
