#include "repdrop/model.hpp"

#include <algorithm>
#include <limits>
#include <numbers>

namespace repdrop {

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model needs at least one layer");
  if (heads < 1) throw ConfigError("model needs at least one head");
  if (d_model < 1 || d_model % heads != 0) {
    throw ConfigError("d_model must be a positive multiple of heads");
  }
  if (d_ff < 1) throw ConfigError("d_ff must be positive");
  if (vocab < 2) throw ConfigError("vocabulary must have at least 2 tokens");
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"layers", layers}, {"heads", heads},     {"d_model", d_model},
          {"d_ff", d_ff},     {"vocab", vocab},     {"max_len", max_len},
          {"dropout", dropout}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.dropout = j.value("dropout", 0.0);
  return c;
}

ModelConfig gpt2_small_preset(int vocab) {
  ModelConfig c;
  c.layers = 12;
  c.heads = 12;
  c.d_model = 768;
  c.d_ff = 3072;
  c.vocab = vocab;
  c.max_len = 256;
  c.dropout = 0.1;
  return c;
}

ParameterLayout::ParameterLayout(const ModelConfig& config) {
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  auto add = [this](std::string name, std::size_t rows, std::size_t cols) {
    TensorSlot s{std::move(name), total, rows, cols};
    total += rows * cols;
    all.push_back(s);
    return s;
  };
  tok_emb = add("tok_emb", static_cast<std::size_t>(config.vocab), d);
  pos_emb = add("pos_emb", static_cast<std::size_t>(config.max_len), d);
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    Layer L;
    L.ln1_g = add(p + "ln1_g", 1, d);
    L.ln1_b = add(p + "ln1_b", 1, d);
    L.w_q = add(p + "w_q", d, d);
    L.b_q = add(p + "b_q", 1, d);
    L.w_k = add(p + "w_k", d, d);
    L.b_k = add(p + "b_k", 1, d);
    L.w_v = add(p + "w_v", d, d);
    L.b_v = add(p + "b_v", 1, d);
    L.w_o = add(p + "w_o", d, d);
    L.b_o = add(p + "b_o", 1, d);
    L.ln2_g = add(p + "ln2_g", 1, d);
    L.ln2_b = add(p + "ln2_b", 1, d);
    L.w_fc = add(p + "w_fc", d, ff);
    L.b_fc = add(p + "b_fc", 1, ff);
    L.w_proj = add(p + "w_proj", ff, d);
    L.b_proj = add(p + "b_proj", 1, d);
    layers.push_back(std::move(L));
  }
  lnf_g = add("lnf_g", 1, d);
  lnf_b = add("lnf_b", 1, d);
}

namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <typename T>
T gelu(T u) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2 / pi)
  return static_cast<T>(0.5) * u *
         (T(1) + std::tanh(c * (u + static_cast<T>(0.044715) * u * u * u)));
}

template <typename T>
T gelu_grad(T u) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  const T inner = c * (u + static_cast<T>(0.044715) * u * u * u);
  const T t = std::tanh(inner);
  return static_cast<T>(0.5) * (T(1) + t) +
         static_cast<T>(0.5) * u * (T(1) - t * t) * c *
             (T(1) + static_cast<T>(3 * 0.044715) * u * u);
}

}  // namespace

template <typename T>
struct Transformer<T>::Cache {
  struct Layer {
    Mat x_in;
    Mat xhat1;
    std::vector<T> rstd1;
    Mat a, q, k, v;
    std::vector<Mat> probs;  // per head
    Mat o;
    Mat drop_attn;  // empty when dropout is off
    Mat x_mid;
    Mat xhat2;
    std::vector<T> rstd2;
    Mat b, u, g;
    Mat drop_mlp;
  };
  Mat drop_emb;
  std::vector<Layer> layers;
  Mat x_final, xhat_f;
  std::vector<T> rstd_f;
  Mat f;
  Mat logits;
};

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config)
    : config_(config), layout_(config) {
  config_.validate();
  params_.assign(layout_.total, T(0));
}

template <typename T>
Transformer<T> Transformer<T>::initialize(const ModelConfig& config, std::uint64_t seed) {
  Transformer model(config);
  Rng rng(seed);
  const double std_dev = 0.02;
  const double resid_std = 0.02 / std::sqrt(2.0 * config.layers);
  auto fill_normal = [&](const TensorSlot& s, double sd) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      model.params_[s.offset + i] = static_cast<T>(sd * rng.normal());
    }
  };
  auto fill_const = [&](const TensorSlot& s, T v) {
    std::fill_n(model.params_.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), v);
  };
  const auto& L = model.layout_;
  fill_normal(L.tok_emb, std_dev);
  fill_normal(L.pos_emb, 0.01);
  for (const auto& layer : L.layers) {
    fill_const(layer.ln1_g, T(1));
    fill_const(layer.ln2_g, T(1));
    fill_normal(layer.w_q, std_dev);
    fill_normal(layer.w_k, std_dev);
    fill_normal(layer.w_v, std_dev);
    fill_normal(layer.w_o, resid_std);
    fill_normal(layer.w_fc, std_dev);
    fill_normal(layer.w_proj, resid_std);
  }
  fill_const(L.lnf_g, T(1));
  return model;
}

template <typename T>
template <typename U>
Transformer<U> Transformer<T>::cast() const {
  Transformer<U> out(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.params()[i] = static_cast<U>(params_[i]);
  }
  return out;
}

template <typename T>
typename Transformer<T>::ConstMatMap Transformer<T>::view(const TensorSlot& s) const {
  return ConstMatMap(params_.data() + s.offset, static_cast<Eigen::Index>(s.rows),
                     static_cast<Eigen::Index>(s.cols));
}

namespace {

template <typename Mat, typename Vec>
void layer_norm_forward(const Mat& x, const Vec& gain, const Vec& bias, Mat& xhat,
                        std::vector<typename Mat::Scalar>& rstd, Mat& out) {
  using T = typename Mat::Scalar;
  const auto rows = x.rows();
  const auto cols = x.cols();
  xhat.resize(rows, cols);
  out.resize(rows, cols);
  rstd.resize(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[static_cast<std::size_t>(r)] = rs;
    xhat.row(r) = (x.row(r).array() - mean) * rs;
  }
  out = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
}

// Accumulates dgain/dbias and returns dx.
template <typename Mat, typename Vec, typename GradVec>
Mat layer_norm_backward(const Mat& dout, const Mat& xhat,
                        const std::vector<typename Mat::Scalar>& rstd, const Vec& gain,
                        GradVec dgain, GradVec dbias) {
  using T = typename Mat::Scalar;
  dgain += (dout.array() * xhat.array()).colwise().sum().matrix();
  dbias += dout.colwise().sum();
  Mat dxhat = dout.array().rowwise() * gain.row(0).array();
  Mat dx(dout.rows(), dout.cols());
  const T inv_n = T(1) / static_cast<T>(dout.cols());
  for (Eigen::Index r = 0; r < dout.rows(); ++r) {
    const T m1 = dxhat.row(r).sum() * inv_n;
    const T m2 = dxhat.row(r).dot(xhat.row(r)) * inv_n;
    dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) *
                rstd[static_cast<std::size_t>(r)];
  }
  return dx;
}

template <typename Mat>
void dropout_mask(Mat& mask, Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  using T = typename Mat::Scalar;
  mask.resize(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.uniform() < rate ? T(0) : keep;
  }
}

}  // namespace

template <typename T>
void Transformer<T>::forward(std::span<const TokenId> ids, const LayerMaskSet* masks,
                             Rng* dropout_rng, Cache& cache, bool last_row_only) const {
  const auto len = static_cast<Eigen::Index>(ids.size());
  if (ids.empty()) throw Error("empty input sequence");
  if (ids.size() > static_cast<std::size_t>(config_.max_len)) {
    throw Error("sequence of length " + std::to_string(ids.size()) +
                " exceeds max_len " + std::to_string(config_.max_len));
  }
  if (masks && masks->per_layer.size() != static_cast<std::size_t>(config_.layers)) {
    throw Error("expected one repetition mask per layer");
  }
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  const int heads = config_.heads;
  const auto hd = static_cast<Eigen::Index>(config_.head_dim());
  const T scale = static_cast<T>(1.0 / config_.attn_scale());
  const bool use_dropout = dropout_rng != nullptr && config_.dropout > 0.0;

  const auto tok = view(layout_.tok_emb);
  const auto pos = view(layout_.pos_emb);
  Mat x(len, d);
  for (Eigen::Index i = 0; i < len; ++i) {
    const auto id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= config_.vocab) throw Error("token id out of range");
    x.row(i) = tok.row(id) + pos.row(i);
  }
  if (use_dropout) {
    dropout_mask(cache.drop_emb, len, d, config_.dropout, *dropout_rng);
    x = x.cwiseProduct(cache.drop_emb);
  }

  const AttentionMask causal = causal_mask(ids.size());
  Mat additive(len, len);
  cache.layers.resize(static_cast<std::size_t>(config_.layers));

  for (int l = 0; l < config_.layers; ++l) {
    const auto& P = layout_.layers[static_cast<std::size_t>(l)];
    auto& C = cache.layers[static_cast<std::size_t>(l)];
    {
      const AttentionMask m = masks ? assemble_attention_mask(
                                          causal, masks->per_layer[static_cast<std::size_t>(l)])
                                    : causal;
      for (Eigen::Index i = 0; i < additive.size(); ++i) {
        additive.data()[i] = static_cast<T>(m.values[static_cast<std::size_t>(i)]);
      }
    }
    C.x_in = x;
    layer_norm_forward(x, view(P.ln1_g), view(P.ln1_b), C.xhat1, C.rstd1, C.a);
    C.q = (C.a * view(P.w_q)).rowwise() + view(P.b_q).row(0);
    C.k = (C.a * view(P.w_k)).rowwise() + view(P.b_k).row(0);
    C.v = (C.a * view(P.w_v)).rowwise() + view(P.b_v).row(0);
    C.probs.resize(static_cast<std::size_t>(heads));
    C.o.resize(len, d);
    for (int h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * hd;
      Mat& S = C.probs[static_cast<std::size_t>(h)];
      S.noalias() = C.q.middleCols(c0, hd) * C.k.middleCols(c0, hd).transpose();
      S = S * scale + additive;
      for (Eigen::Index r = 0; r < len; ++r) {
        const T mx = S.row(r).maxCoeff();
        S.row(r) = (S.row(r).array() - mx).exp();
        S.row(r) /= S.row(r).sum();
      }
      C.o.middleCols(c0, hd).noalias() = S * C.v.middleCols(c0, hd);
    }
    Mat y = (C.o * view(P.w_o)).rowwise() + view(P.b_o).row(0);
    if (use_dropout) {
      dropout_mask(C.drop_attn, len, d, config_.dropout, *dropout_rng);
      y = y.cwiseProduct(C.drop_attn);
    } else {
      C.drop_attn.resize(0, 0);
    }
    C.x_mid = x + y;

    layer_norm_forward(C.x_mid, view(P.ln2_g), view(P.ln2_b), C.xhat2, C.rstd2, C.b);
    C.u = (C.b * view(P.w_fc)).rowwise() + view(P.b_fc).row(0);
    C.g = C.u.unaryExpr([](T v) { return gelu(v); });
    Mat z = (C.g * view(P.w_proj)).rowwise() + view(P.b_proj).row(0);
    if (use_dropout) {
      dropout_mask(C.drop_mlp, len, d, config_.dropout, *dropout_rng);
      z = z.cwiseProduct(C.drop_mlp);
    } else {
      C.drop_mlp.resize(0, 0);
    }
    x = C.x_mid + z;
  }
  cache.x_final = x;
  layer_norm_forward(x, view(layout_.lnf_g), view(layout_.lnf_b), cache.xhat_f,
                     cache.rstd_f, cache.f);
  if (last_row_only) {
    cache.logits = cache.f.bottomRows(1) * tok.transpose();
  } else {
    cache.logits.noalias() = cache.f * tok.transpose();
  }
}

template <typename T>
void Transformer<T>::backward(std::span<const TokenId> ids, const Cache& cache,
                              const Mat& dlogits, std::span<T> grads) const {
  const auto len = static_cast<Eigen::Index>(ids.size());
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  const auto hd = static_cast<Eigen::Index>(config_.head_dim());
  const T scale = static_cast<T>(1.0 / config_.attn_scale());

  auto gview = [&](const TensorSlot& s) {
    return MatMap(grads.data() + s.offset, static_cast<Eigen::Index>(s.rows),
                  static_cast<Eigen::Index>(s.cols));
  };

  const auto tok = view(layout_.tok_emb);
  auto dtok = gview(layout_.tok_emb);
  // logits = f * tok^T
  dtok.noalias() += dlogits.transpose() * cache.f;
  Mat df = dlogits * tok;

  Mat dx = layer_norm_backward(df, cache.xhat_f, cache.rstd_f, view(layout_.lnf_g),
                               gview(layout_.lnf_g), gview(layout_.lnf_b));

  for (int l = config_.layers - 1; l >= 0; --l) {
    const auto& P = layout_.layers[static_cast<std::size_t>(l)];
    const auto& C = cache.layers[static_cast<std::size_t>(l)];

    // MLP branch: x_out = x_mid + drop(g * W_proj + b_proj)
    Mat dz = C.drop_mlp.size() ? Mat(dx.cwiseProduct(C.drop_mlp)) : dx;
    gview(P.w_proj).noalias() += C.g.transpose() * dz;
    gview(P.b_proj) += dz.colwise().sum();
    Mat dg = dz * view(P.w_proj).transpose();
    Mat du = dg.cwiseProduct(C.u.unaryExpr([](T v) { return gelu_grad(v); }));
    gview(P.w_fc).noalias() += C.b.transpose() * du;
    gview(P.b_fc) += du.colwise().sum();
    Mat db = du * view(P.w_fc).transpose();
    Mat dx_mid = dx + layer_norm_backward(db, C.xhat2, C.rstd2, view(P.ln2_g),
                                          gview(P.ln2_g), gview(P.ln2_b));

    // Attention branch: x_mid = x_in + drop(o * W_o + b_o)
    Mat dy = C.drop_attn.size() ? Mat(dx_mid.cwiseProduct(C.drop_attn)) : dx_mid;
    gview(P.w_o).noalias() += C.o.transpose() * dy;
    gview(P.b_o) += dy.colwise().sum();
    Mat dout = dy * view(P.w_o).transpose();

    Mat dq(len, d), dk(len, d), dv(len, d);
    for (int h = 0; h < config_.heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * hd;
      const Mat& Pr = C.probs[static_cast<std::size_t>(h)];
      const auto dO = dout.middleCols(c0, hd);
      dv.middleCols(c0, hd).noalias() = Pr.transpose() * dO;
      Mat dP = dO * C.v.middleCols(c0, hd).transpose();
      Mat dS(len, len);
      for (Eigen::Index r = 0; r < len; ++r) {
        const T dot = dP.row(r).dot(Pr.row(r));
        dS.row(r) = Pr.row(r).array() * (dP.row(r).array() - dot);
      }
      dS *= scale;
      dq.middleCols(c0, hd).noalias() = dS * C.k.middleCols(c0, hd);
      dk.middleCols(c0, hd).noalias() = dS.transpose() * C.q.middleCols(c0, hd);
    }
    gview(P.w_q).noalias() += C.a.transpose() * dq;
    gview(P.b_q) += dq.colwise().sum();
    gview(P.w_k).noalias() += C.a.transpose() * dk;
    gview(P.b_k) += dk.colwise().sum();
    gview(P.w_v).noalias() += C.a.transpose() * dv;
    gview(P.b_v) += dv.colwise().sum();
    Mat da = dq * view(P.w_q).transpose();
    da.noalias() += dk * view(P.w_k).transpose();
    da.noalias() += dv * view(P.w_v).transpose();
    dx = dx_mid + layer_norm_backward(da, C.xhat1, C.rstd1, view(P.ln1_g),
                                      gview(P.ln1_g), gview(P.ln1_b));
  }

  if (cache.drop_emb.size()) dx = dx.cwiseProduct(cache.drop_emb);
  auto dpos = gview(layout_.pos_emb);
  for (Eigen::Index i = 0; i < len; ++i) {
    dtok.row(ids[static_cast<std::size_t>(i)]) += dx.row(i);
    dpos.row(i) += dx.row(i);
  }
}

template <typename T>
typename Transformer<T>::Mat Transformer<T>::logits(std::span<const TokenId> ids,
                                                    const LayerMaskSet* masks) const {
  Cache cache;
  forward(ids, masks, nullptr, cache, false);
  return std::move(cache.logits);
}

template <typename T>
std::vector<T> Transformer<T>::next_token_logits(std::span<const TokenId> ids) const {
  Cache cache;
  forward(ids, nullptr, nullptr, cache, true);
  return std::vector<T>(cache.logits.data(), cache.logits.data() + cache.logits.size());
}

template <typename T>
typename Transformer<T>::Mat Transformer<T>::attention(std::span<const TokenId> ids,
                                                       int layer, int head,
                                                       const LayerMaskSet* masks) const {
  if (layer < 0 || layer >= config_.layers || head < 0 || head >= config_.heads) {
    throw Error("layer or head index out of range");
  }
  Cache cache;
  forward(ids, masks, nullptr, cache, true);
  return cache.layers[static_cast<std::size_t>(layer)].probs[static_cast<std::size_t>(head)];
}

template <typename T>
std::vector<double> Transformer<T>::log_probs(std::span<const TokenId> ids,
                                              const LayerMaskSet* masks) const {
  Cache cache;
  forward(ids, masks, nullptr, cache, false);
  std::vector<double> out;
  out.reserve(ids.size() - 1);
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    const auto row = cache.logits.row(static_cast<Eigen::Index>(i));
    const double mx = static_cast<double>(row.maxCoeff());
    double sum = 0.0;
    for (Eigen::Index k = 0; k < row.size(); ++k) {
      sum += std::exp(static_cast<double>(row(k)) - mx);
    }
    out.push_back(static_cast<double>(row(ids[i + 1])) - mx - std::log(sum));
  }
  return out;
}

namespace {

void check_batch(const SequenceBatch& batch, const ObjectiveSpec& objective, int layers) {
  if (batch.sequences.empty()) throw Error("empty batch");
  if (objective.uses_masks() != !batch.masks.empty()) {
    throw Error(objective.uses_masks()
                    ? "dropout objective requires repetition masks"
                    : "repetition masks supplied to an objective that does not use them");
  }
  if (!batch.masks.empty()) {
    if (batch.masks.size() != batch.sequences.size()) {
      throw Error("one mask set per sequence required");
    }
    for (const auto& m : batch.masks) {
      if (m.per_layer.size() != static_cast<std::size_t>(layers)) {
        throw Error("one mask per layer required");
      }
    }
  }
  if (objective.uses_scopes() && batch.scopes.size() != batch.sequences.size()) {
    throw Error("objective requires penalization scopes for every sequence");
  }
}

}  // namespace

template <typename T>
LossResult Transformer<T>::loss_and_grads(const SequenceBatch& batch,
                                          const ObjectiveSpec& objective,
                                          std::span<T> grads, Rng* dropout_rng) const {
  check_batch(batch, objective, config_.layers);
  if (grads.size() != params_.size()) throw Error("gradient buffer has wrong size");
  LossResult result;
  for (const auto& s : batch.sequences) {
    if (s.size() >= 2) result.predicted += s.size() - 1;
  }
  if (result.predicted == 0) throw Error("batch has no predictable tokens");
  const T inv_count = static_cast<T>(1.0 / static_cast<double>(result.predicted));
  const std::vector<TokenId> no_scope;

  double total = 0.0;
  Cache cache;
  ParamVec acc(params_.size(), T(0));
  for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
    const auto ids = batch.sequences[b];
    if (ids.size() < 2) continue;
    const LayerMaskSet* masks = batch.masks.empty() ? nullptr : &batch.masks[b];
    forward(ids, masks, dropout_rng, cache, false);
    const auto len = static_cast<Eigen::Index>(ids.size());
    const auto vocab = static_cast<std::size_t>(config_.vocab);
    Mat dlogits = Mat::Zero(len, static_cast<Eigen::Index>(vocab));
    for (Eigen::Index i = 0; i + 1 < len; ++i) {
      const auto scope = objective.uses_scopes()
                             ? std::span<const TokenId>(batch.scopes[b][static_cast<std::size_t>(i)])
                             : std::span<const TokenId>(no_scope);
      const std::span<const T> row(cache.logits.data() + i * cache.logits.cols(), vocab);
      const std::span<T> grow(dlogits.data() + i * dlogits.cols(), vocab);
      total += position_loss<T>(row, ids[static_cast<std::size_t>(i + 1)], scope, objective,
                                grow, &result.clamped);
    }
    dlogits *= inv_count;
    backward(ids, cache, dlogits, acc);
  }
  for (std::size_t i = 0; i < acc.size(); ++i) grads[i] += acc[i];
  result.loss = total / static_cast<double>(result.predicted);
  if (!std::isfinite(result.loss)) {
    throw Error("non-finite loss (" + std::to_string(result.loss) + ") over " +
                std::to_string(result.predicted) + " positions");
  }
  return result;
}

template <typename T>
LossResult Transformer<T>::loss(const SequenceBatch& batch,
                                const ObjectiveSpec& objective) const {
  check_batch(batch, objective, config_.layers);
  LossResult result;
  double total = 0.0;
  std::vector<T> scratch(static_cast<std::size_t>(config_.vocab));
  const std::vector<TokenId> no_scope;
  Cache cache;
  for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
    const auto ids = batch.sequences[b];
    if (ids.size() < 2) continue;
    const LayerMaskSet* masks = batch.masks.empty() ? nullptr : &batch.masks[b];
    forward(ids, masks, nullptr, cache, false);
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      const auto scope = objective.uses_scopes() ? std::span<const TokenId>(batch.scopes[b][i])
                                                 : std::span<const TokenId>(no_scope);
      const std::span<const T> row(
          cache.logits.data() + static_cast<Eigen::Index>(i) * cache.logits.cols(),
          scratch.size());
      total += position_loss<T>(row, ids[i + 1], scope, objective, std::span<T>(scratch),
                                &result.clamped);
      ++result.predicted;
    }
  }
  if (result.predicted == 0) throw Error("batch has no predictable tokens");
  result.loss = total / static_cast<double>(result.predicted);
  return result;
}

template <typename T>
TokenSeq greedy_decode(const Transformer<T>& model, std::span<const TokenId> prompt,
                       std::size_t gen_len) {
  if (prompt.empty()) throw Error("empty prompt");
  TokenSeq out;
  out.ids.assign(prompt.begin(), prompt.end());
  const std::size_t window = model.max_len();
  for (std::size_t step = 0; step < gen_len; ++step) {
    const std::size_t start = out.ids.size() > window ? out.ids.size() - window : 0;
    const auto ctx = std::span<const TokenId>(out.ids).subspan(start);
    const auto logits = model.next_token_logits(ctx);
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.size(); ++k) {
      if (logits[k] > logits[best]) best = k;
    }
    out.ids.push_back(static_cast<TokenId>(best));
  }
  return out;
}

template class Transformer<float>;
template class Transformer<double>;
template Transformer<double> Transformer<float>::cast<double>() const;
template Transformer<float> Transformer<double>::cast<float>() const;
template Transformer<float> Transformer<float>::cast<float>() const;
template Transformer<double> Transformer<double>::cast<double>() const;
template TokenSeq greedy_decode<float>(const Transformer<float>&, std::span<const TokenId>,
                                       std::size_t);
template TokenSeq greedy_decode<double>(const Transformer<double>&, std::span<const TokenId>,
                                        std::size_t);

}  // namespace repdrop
