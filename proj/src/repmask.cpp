#include "repdrop/repmask.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <unordered_map>

namespace repdrop {

std::uint64_t Rng::next_u64() {
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound == 0) return 0;
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % bound;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t sequence_index,
                          std::uint64_t layer_index) {
  Rng a(base ^ 0x5851f42d4c957f2dULL);
  Rng b(a.next_u64() ^ sequence_index);
  Rng c(b.next_u64() ^ (layer_index * 0x9e3779b97f4a7c15ULL));
  return c.next_u64();
}

namespace {

struct GramHash {
  std::size_t operator()(std::span<const TokenId> g) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (TokenId t : g) {
      h ^= static_cast<std::uint32_t>(t);
      h *= 0x100000001b3ULL;
    }
    return static_cast<std::size_t>(h);
  }
};

}  // namespace

NgramIndex::NgramIndex(std::span<const TokenId> seq, int n)
    : n_(n), length_(seq.size()) {
  if (n < 1) throw ConfigError("n must be at least 1");
  const auto un = static_cast<std::size_t>(n);
  if (seq.size() < un) return;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> buckets;
  GramHash hash;
  for (std::size_t i = un - 1; i < seq.size(); ++i) {
    const std::size_t start = i + 1 - un;
    const auto gram = seq.subspan(start, un);
    auto& bucket = buckets[hash(gram)];
    NgramEntry* entry = nullptr;
    for (std::size_t idx : bucket) {
      if (std::equal(gram.begin(), gram.end(), entries_[idx].gram.begin())) {
        entry = &entries_[idx];
        break;
      }
    }
    if (!entry) {
      bucket.push_back(entries_.size());
      entries_.push_back({std::vector<TokenId>(gram.begin(), gram.end()), {}});
      entry = &entries_.back();
    }
    entry->spans.push_back({start, i + 1});
  }
}

const NgramEntry* NgramIndex::find(std::span<const TokenId> gram) const {
  for (const auto& e : entries_) {
    if (e.gram.size() == gram.size() &&
        std::equal(gram.begin(), gram.end(), e.gram.begin())) {
      return &e;
    }
  }
  return nullptr;
}

NgramIndex find_ngrams(std::span<const TokenId> seq, int n) {
  return NgramIndex(seq, n);
}

std::size_t RepetitionMask::count() const {
  std::size_t c = 0;
  for (auto m : masked) c += m;
  return c;
}

std::vector<double> RepetitionMask::values() const {
  std::vector<double> v(masked.size());
  for (std::size_t i = 0; i < masked.size(); ++i) v[i] = value(i);
  return v;
}

RepetitionMask gen_mask_rep(const NgramIndex& index, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("dropout rate must be in [0, 1]");
  RepetitionMask mask;
  mask.masked.assign(index.length(), 0);
  mask.p = p;
  mask.n = index.n();
  for (const auto& entry : index.entries()) {
    if (entry.spans.size() < 2) continue;
    if (rng.uniform() < p) {
      for (const auto& s : entry.spans) {
        for (std::size_t i = s.start; i < s.end; ++i) mask.masked[i] = 1;
      }
    }
  }
  return mask;
}

RepetitionMask gen_mask_rep(std::span<const TokenId> seq, double p, int n,
                            std::uint64_t seed) {
  Rng rng(seed);
  auto mask = gen_mask_rep(NgramIndex(seq, n), p, rng);
  mask.seed = seed;
  return mask;
}

std::vector<std::uint8_t> repetitive_positions(const NgramIndex& index) {
  std::vector<std::uint8_t> covered(index.length(), 0);
  for (const auto& entry : index.entries()) {
    if (entry.spans.size() < 2) continue;
    for (const auto& s : entry.spans) {
      for (std::size_t i = s.start; i < s.end; ++i) covered[i] = 1;
    }
  }
  return covered;
}

std::size_t count_repetitive_tokens(std::span<const TokenId> seq, int n) {
  std::size_t c = 0;
  for (auto v : repetitive_positions(NgramIndex(seq, n))) c += v;
  return c;
}

RepetitionMask gen_mask_rand(const NgramIndex& index, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("dropout rate must be in [0, 1]");
  RepetitionMask mask;
  const std::size_t len = index.length();
  mask.masked.assign(len, 0);
  mask.p = p;
  mask.n = index.n();
  std::size_t covered = 0;
  for (auto v : repetitive_positions(index)) covered += v;
  const auto k = std::min<std::size_t>(
      len, static_cast<std::size_t>(std::llround(p * static_cast<double>(covered))));
  if (k == 0) return mask;
  // Partial Fisher-Yates over the positions.
  std::vector<std::size_t> pos(len);
  for (std::size_t i = 0; i < len; ++i) pos[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(len - i);
    std::swap(pos[i], pos[j]);
    mask.masked[pos[i]] = 1;
  }
  return mask;
}

RepetitionMask gen_mask_rand(std::span<const TokenId> seq, int n, double p,
                             std::uint64_t seed) {
  Rng rng(seed);
  auto mask = gen_mask_rand(NgramIndex(seq, n), p, rng);
  mask.seed = seed;
  return mask;
}

LayerMaskSet make_layer_masks(std::span<const TokenId> seq, MaskKind kind,
                              double p, int n, int layers,
                              std::uint64_t base_seed,
                              std::uint64_t sequence_index) {
  const NgramIndex index(seq, n);
  LayerMaskSet set;
  set.per_layer.reserve(static_cast<std::size_t>(layers));
  for (int l = 0; l < layers; ++l) {
    const auto seed = derive_seed(base_seed, sequence_index, static_cast<std::uint64_t>(l));
    Rng rng(seed);
    auto mask = kind == MaskKind::kRepetition ? gen_mask_rep(index, p, rng)
                                              : gen_mask_rand(index, p, rng);
    mask.seed = seed;
    set.per_layer.push_back(std::move(mask));
  }
  return set;
}

AttentionMask causal_mask(std::size_t length) {
  AttentionMask m;
  m.length = length;
  m.values.assign(length * length, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = i + 1; j < length; ++j) m.values[i * length + j] = kMaskedValue;
  }
  return m;
}

AttentionMask assemble_attention_mask(const AttentionMask& causal,
                                      const RepetitionMask& rep) {
  if (causal.length != rep.size()) {
    throw Error("mask length " + std::to_string(rep.size()) +
                " does not match sequence length " + std::to_string(causal.length));
  }
  AttentionMask out = causal;
  const std::size_t len = causal.length;
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < len; ++j) {
      double& v = out.values[i * len + j];
      v = std::max(v + rep.value(j), kMaskedValue);
    }
    out.values[i * len + i] = 0.0;
  }
  return out;
}

void write_mask_binary(const RepetitionMask& mask,
                       const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const auto len = static_cast<std::uint32_t>(mask.size());
  const unsigned char header[4] = {
      static_cast<unsigned char>(len & 0xff), static_cast<unsigned char>((len >> 8) & 0xff),
      static_cast<unsigned char>((len >> 16) & 0xff),
      static_cast<unsigned char>((len >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(header), 4);
  out.write(reinterpret_cast<const char*>(mask.masked.data()),
            static_cast<std::streamsize>(mask.masked.size()));
}

RepetitionMask read_mask_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  unsigned char header[4];
  if (!in.read(reinterpret_cast<char*>(header), 4)) throw Error("truncated mask file");
  const std::uint32_t len = header[0] | (header[1] << 8) | (header[2] << 16) |
                            (static_cast<std::uint32_t>(header[3]) << 24);
  RepetitionMask mask;
  mask.masked.resize(len);
  if (!in.read(reinterpret_cast<char*>(mask.masked.data()), len)) {
    throw Error("truncated mask file");
  }
  for (auto v : mask.masked) {
    if (v > 1) throw Error("mask file contains a value other than 0 or 1");
  }
  return mask;
}

nlohmann::json mask_metadata(const RepetitionMask& mask) {
  return {{"length", mask.size()}, {"p", mask.p}, {"n", mask.n},
          {"seed", mask.seed}, {"masked", mask.count()},
          {"masked_value", kMaskedValue}};
}

}  // namespace repdrop
