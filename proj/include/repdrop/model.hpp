#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "repdrop/corpus.hpp"
#include "repdrop/objectives.hpp"
#include "repdrop/repmask.hpp"
#include "repdrop/repmetrics.hpp"

namespace repdrop {

struct ModelConfig {
  int layers = 2;
  int heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab = 0;
  int max_len = 256;
  // Residual/embedding dropout rate; only active during training.
  double dropout = 0.0;

  int head_dim() const { return d_model / heads; }
  // Per-head scaling sqrt(d_model / heads).
  double attn_scale() const { return std::sqrt(static_cast<double>(head_dim())); }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// GPT-2 small shape (12 layers, 12 heads, 768 hidden).
ModelConfig gpt2_small_preset(int vocab);

struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

// Offsets of every parameter tensor inside one flat buffer.
struct ParameterLayout {
  struct Layer {
    TensorSlot ln1_g, ln1_b;
    TensorSlot w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    TensorSlot ln2_g, ln2_b;
    TensorSlot w_fc, b_fc, w_proj, b_proj;
  };

  TensorSlot tok_emb;  // vocab x d, also the tied output projection
  TensorSlot pos_emb;  // max_len x d
  std::vector<Layer> layers;
  TensorSlot lnf_g, lnf_b;
  std::vector<TensorSlot> all;
  std::size_t total = 0;

  explicit ParameterLayout(const ModelConfig& config);
};

// Per-sequence inputs to a training step.
struct SequenceBatch {
  std::vector<std::span<const TokenId>> sequences;
  // Empty, or one LayerMaskSet per sequence.
  std::vector<LayerMaskSet> masks;
  // Empty, or for each sequence one scope per predicted position.
  std::vector<std::vector<std::vector<TokenId>>> scopes;
};

struct LossResult {
  double loss = 0.0;
  std::size_t predicted = 0;
  bool clamped = false;
};

template <typename T>
class Transformer : public SequenceScorer {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Mat>;
  using ConstMatMap = Eigen::Map<const Mat>;
  // Fixed alignment keeps vectorized kernels, and so rounding, independent of
  // where the buffer happens to be allocated.
  using ParamVec = std::vector<T, Eigen::aligned_allocator<T>>;

  explicit Transformer(const ModelConfig& config);
  // GPT-2 style initialisation: N(0, 0.02), residual projections scaled by
  // 1/sqrt(2 * layers), unit layer-norm gains, zero biases.
  static Transformer initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const ParameterLayout& layout() const { return layout_; }
  ParamVec& params() { return params_; }
  const ParamVec& params() const { return params_; }

  template <typename U>
  Transformer<U> cast() const;

  // Logits for every position (L x vocab). Masks, when given, hold one
  // repetition mask per layer.
  Mat logits(std::span<const TokenId> ids, const LayerMaskSet* masks = nullptr) const;

  // Next-token logits after the last position only.
  std::vector<T> next_token_logits(std::span<const TokenId> ids) const;

  // Attention probabilities of one layer and head (L x L), for inspection.
  Mat attention(std::span<const TokenId> ids, int layer, int head,
                const LayerMaskSet* masks = nullptr) const;

  // log P(x_i | x_<i), i = 1..L-1, optionally with key masks.
  std::vector<double> log_probs(std::span<const TokenId> ids,
                                const LayerMaskSet* masks) const;

  // Mean objective over all predicted positions of the batch; gradients are
  // accumulated (not overwritten) into `grads`, which must be params().size().
  // `dropout_rng` enables residual dropout when non-null.
  LossResult loss_and_grads(const SequenceBatch& batch, const ObjectiveSpec& objective,
                            std::span<T> grads, Rng* dropout_rng = nullptr) const;

  // Loss only (no gradients, no dropout).
  LossResult loss(const SequenceBatch& batch, const ObjectiveSpec& objective) const;

  // SequenceScorer
  std::size_t vocab_size() const override { return static_cast<std::size_t>(config_.vocab); }
  std::size_t max_len() const override { return static_cast<std::size_t>(config_.max_len); }
  std::vector<double> token_log_probs(std::span<const TokenId> ids) const override {
    return log_probs(ids, nullptr);
  }

  struct Cache;

 private:
  ConstMatMap view(const TensorSlot& s) const;
  void forward(std::span<const TokenId> ids, const LayerMaskSet* masks, Rng* dropout_rng,
               Cache& cache, bool last_row_only) const;
  void backward(std::span<const TokenId> ids, const Cache& cache, const Mat& dlogits,
                std::span<T> grads) const;

  ModelConfig config_;
  ParameterLayout layout_;
  ParamVec params_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

// Appends gen_len argmax tokens (ties -> lowest id). Contexts longer than
// max_len are truncated to their last max_len tokens. No masks are applied.
template <typename T>
TokenSeq greedy_decode(const Transformer<T>& model, std::span<const TokenId> prompt,
                       std::size_t gen_len = 128);

}  // namespace repdrop
