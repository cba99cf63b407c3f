#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "repdrop/corpus.hpp"

namespace repdrop {

// Additive value standing in for -inf in attention masks. exp() of it
// relative to any finite score underflows to exactly zero in float and double.
inline constexpr double kMaskedValue = -1e9;

// splitmix64-based generator. Bit-identical across platforms, unlike the
// standard distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}
  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);
  double normal();
  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

// Deterministic seed for (base, sequence index, layer index).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t sequence_index,
                          std::uint64_t layer_index);

struct NgramSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  bool operator==(const NgramSpan&) const = default;
};

struct NgramEntry {
  std::vector<TokenId> gram;
  std::vector<NgramSpan> spans;
};

// All n-grams of a sequence with their occurrence spans, in order of first
// occurrence.
class NgramIndex {
 public:
  NgramIndex() = default;
  NgramIndex(std::span<const TokenId> seq, int n);

  int n() const { return n_; }
  std::size_t length() const { return length_; }
  const std::vector<NgramEntry>& entries() const { return entries_; }
  const NgramEntry* find(std::span<const TokenId> gram) const;
  bool empty() const { return entries_.empty(); }

 private:
  int n_ = 0;
  std::size_t length_ = 0;
  std::vector<NgramEntry> entries_;
};

NgramIndex find_ngrams(std::span<const TokenId> seq, int n);

struct RepetitionMask {
  // 1 where the position is hidden as an attention key.
  std::vector<std::uint8_t> masked;
  std::uint64_t seed = 0;
  double p = 0.0;
  int n = 2;

  std::size_t size() const { return masked.size(); }
  std::size_t count() const;
  double value(std::size_t i) const { return masked[i] ? kMaskedValue : 0.0; }
  std::vector<double> values() const;
};

RepetitionMask gen_mask_rep(const NgramIndex& index, double p, Rng& rng);
RepetitionMask gen_mask_rep(std::span<const TokenId> seq, double p, int n,
                            std::uint64_t seed);

// Masks round(p * count_repetitive_tokens) positions drawn uniformly without
// replacement from the whole sequence.
RepetitionMask gen_mask_rand(const NgramIndex& index, double p, Rng& rng);
RepetitionMask gen_mask_rand(std::span<const TokenId> seq, int n, double p,
                             std::uint64_t seed);

// Positions covered by at least one n-gram that occurs twice or more.
std::vector<std::uint8_t> repetitive_positions(const NgramIndex& index);
std::size_t count_repetitive_tokens(std::span<const TokenId> seq, int n);

enum class MaskKind { kRepetition, kRandom };

struct LayerMaskSet {
  std::vector<RepetitionMask> per_layer;
};

// One independent mask per layer, seeded with derive_seed(base_seed,
// sequence_index, layer).
LayerMaskSet make_layer_masks(std::span<const TokenId> seq, MaskKind kind,
                              double p, int n, int layers,
                              std::uint64_t base_seed,
                              std::uint64_t sequence_index);

// Row-major L x L additive mask.
struct AttentionMask {
  std::size_t length = 0;
  std::vector<double> values;
  double at(std::size_t i, std::size_t j) const { return values[i * length + j]; }
  bool finite(std::size_t i, std::size_t j) const { return at(i, j) > kMaskedValue / 2; }
};

AttentionMask causal_mask(std::size_t length);

// M'[i][j] = M[i][j] + rep[j] (saturated at kMaskedValue), then M'[i][i] = 0.
AttentionMask assemble_attention_mask(const AttentionMask& causal,
                                      const RepetitionMask& rep);

// Binary layout: uint32 little-endian length L, then L bytes of {0,1}.
void write_mask_binary(const RepetitionMask& mask,
                       const std::filesystem::path& path);
RepetitionMask read_mask_binary(const std::filesystem::path& path);
nlohmann::json mask_metadata(const RepetitionMask& mask);

}  // namespace repdrop
