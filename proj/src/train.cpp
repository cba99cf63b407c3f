#include "repdrop/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace repdrop {

namespace {

constexpr char kMagic[8] = {'R', 'D', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kVersion = 1;

// Salts separating the independent random streams of a training step.
constexpr std::uint64_t kOrderSalt = 0x6f72646572ULL;
constexpr std::uint64_t kMaskSalt = 0x6d61736bULL;
constexpr std::uint64_t kScopeSalt = 0x73636f7065ULL;
constexpr std::uint64_t kDropoutSalt = 0x64726f70ULL;

template <typename Int>
void write_le(std::ostream& out, Int v) {
  unsigned char buf[sizeof(Int)];
  for (std::size_t i = 0; i < sizeof(Int); ++i) {
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(buf), sizeof(Int));
}

template <typename Int>
Int read_le(std::istream& in) {
  unsigned char buf[sizeof(Int)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(Int))) throw Error("truncated checkpoint");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(Int); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<Int>(v);
}

void write_floats(std::ostream& out, std::span<const float> data) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
  } else {
    for (float f : data) write_le(out, std::bit_cast<std::uint32_t>(f));
  }
}

void read_floats(std::istream& in, std::span<float> data) {
  if constexpr (std::endian::native == std::endian::little) {
    if (!in.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(float)))) {
      throw Error("truncated checkpoint");
    }
  } else {
    for (float& f : data) f = std::bit_cast<float>(read_le<std::uint32_t>(in));
  }
}

// Deterministic permutation of the training chunks for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, epoch, kOrderSalt));
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  return order;
}

}  // namespace

int TrainConfig::resolved_warmup() const {
  return warmup < 0 ? steps / 10 : warmup;
}

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch < 1) throw ConfigError("batch must be positive");
  if (resolved_warmup() > steps) throw ConfigError("warmup must not exceed steps");
  if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (eval_interval < 0 || log_interval < 1) throw ConfigError("invalid logging intervals");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"steps", steps},         {"lr", lr},
          {"batch", batch},         {"warmup", warmup},
          {"grad_clip", grad_clip}, {"weight_decay", weight_decay},
          {"seed", seed},           {"eval_interval", eval_interval},
          {"log_interval", log_interval}, {"eval_docs", eval_docs}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  c.warmup = j.value("warmup", c.warmup);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.log_interval = j.value("log_interval", c.log_interval);
  c.eval_docs = j.value("eval_docs", c.eval_docs);
  return c;
}

double lr_multiplier(int step, int warmup, int total_steps) {
  if (step < warmup) return static_cast<double>(step) / std::max(1, warmup);
  if (total_steps <= warmup) return 1.0;
  return std::max(0.0, static_cast<double>(total_steps - step) /
                           static_cast<double>(total_steps - warmup));
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto& model = ckpt.model;
  nlohmann::json header;
  header["format"] = "repdrop-checkpoint";
  header["model"] = model.config().to_json();
  header["step"] = ckpt.step;
  header["seed"] = ckpt.seed;
  header["dtype"] = "float32-le";
  header["num_params"] = model.params().size();
  header["has_optimizer"] = !ckpt.optimizer.m.empty();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& s : model.layout().all) {
    tensors.push_back({{"name", s.name}, {"offset", s.offset}, {"rows", s.rows}, {"cols", s.cols}});
  }
  header["tensors"] = tensors;
  header["meta"] = ckpt.meta;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_le<std::uint32_t>(out, kVersion);
  write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_floats(out, model.params());
  if (!ckpt.optimizer.m.empty()) {
    write_floats(out, ckpt.optimizer.m);
    write_floats(out, ckpt.optimizer.v);
  }
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw Error("not a checkpoint file: " + path.string());
  }
  const auto version = read_le<std::uint32_t>(in);
  if (version != kVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto len = read_le<std::uint64_t>(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw Error("truncated checkpoint");
  const auto header = nlohmann::json::parse(text);

  Checkpoint ckpt(Transformer<float>(ModelConfig::from_json(header.at("model"))));
  if (header.at("num_params").get<std::size_t>() != ckpt.model.params().size()) {
    throw Error("checkpoint parameter count does not match its config");
  }
  read_floats(in, ckpt.model.params());
  if (header.value("has_optimizer", false)) {
    ckpt.optimizer.m.resize(ckpt.model.params().size());
    ckpt.optimizer.v.resize(ckpt.model.params().size());
    read_floats(in, ckpt.optimizer.m);
    read_floats(in, ckpt.optimizer.v);
  }
  ckpt.step = header.at("step").get<int>();
  ckpt.seed = header.at("seed").get<std::uint64_t>();
  ckpt.meta = header.value("meta", nlohmann::json::object());
  return ckpt;
}

TrainResult train(const ModelConfig& model_config, const Corpus& corpus,
                  const TrainConfig& config, const ObjectiveSpec& objective,
                  const TrainOptions& options) {
  config.validate();
  objective.validate();
  model_config.validate();
  if (corpus.vocab_size != static_cast<std::size_t>(model_config.vocab)) {
    throw Error("corpus vocabulary size does not match the model");
  }
  const Corpus chunks =
      chunk_documents(corpus, static_cast<std::size_t>(model_config.max_len), 2);
  if (chunks.documents.empty()) throw Error("training corpus has no usable sequences");

  TrainResult result{options.resume ? *options.resume
                                    : Checkpoint(Transformer<float>::initialize(
                                          model_config, config.seed)),
                     {}};
  Checkpoint& ckpt = result.checkpoint;
  if (!(ckpt.model.config() == model_config)) {
    throw Error("resume checkpoint has a different model configuration");
  }
  ckpt.seed = config.seed;
  auto& params = ckpt.model.params();
  const std::size_t n_params = params.size();
  if (ckpt.optimizer.m.empty()) {
    ckpt.optimizer.m.assign(n_params, 0.0f);
    ckpt.optimizer.v.assign(n_params, 0.0f);
  }
  ckpt.meta["train"] = config.to_json();
  ckpt.meta["objective"] = to_string(objective.kind);

  const int warmup = config.resolved_warmup();
  const auto n_chunks = chunks.documents.size();
  const auto batch_size = static_cast<std::size_t>(config.batch);
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  Corpus val_subset;
  const Corpus* val = options.validation;
  if (val && config.eval_docs > 0 &&
      val->documents.size() > static_cast<std::size_t>(config.eval_docs)) {
    val_subset = *val;
    val_subset.documents.resize(static_cast<std::size_t>(config.eval_docs));
    val_subset.recount();
    val = &val_subset;
  }

  std::vector<float> grads(n_params);
  std::vector<std::size_t> order;
  std::uint64_t order_epoch = UINT64_MAX;
  double initial_loss = -1.0;
  int diverged_steps = 0;
  double window_loss = 0.0;
  int window_count = 0;

  const int last_step =
      options.stop_after > 0 ? std::min(options.stop_after, config.steps) : config.steps;
  for (int step = ckpt.step + 1; step <= last_step; ++step) {
    SequenceBatch batch;
    batch.sequences.reserve(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
      const std::uint64_t g = static_cast<std::uint64_t>(step - 1) * batch_size + b;
      const std::uint64_t epoch = g / n_chunks;
      if (epoch != order_epoch) {
        order = epoch_order(n_chunks, config.seed, epoch);
        order_epoch = epoch;
      }
      batch.sequences.push_back(chunks.documents[order[g % n_chunks]].view());
    }
    const auto step_seed = static_cast<std::uint64_t>(step);
    if (objective.uses_masks()) {
      const auto kind = objective.kind == ObjectiveKind::kRepDropout ? MaskKind::kRepetition
                                                                     : MaskKind::kRandom;
      const auto base = derive_seed(config.seed, step_seed, kMaskSalt);
      for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
        batch.masks.push_back(make_layer_masks(batch.sequences[b], kind, objective.p,
                                               objective.n, model_config.layers, base, b));
      }
    }
    if (objective.uses_scopes()) {
      for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
        PenalizationScope scope = objective.scope;
        scope.seed = derive_seed(config.seed ^ objective.scope.seed, step_seed, kScopeSalt + b);
        batch.scopes.push_back(select_scopes(batch.sequences[b], scope, options.scope_aux));
      }
    }

    std::fill(grads.begin(), grads.end(), 0.0f);
    Rng dropout_rng(derive_seed(config.seed, step_seed, kDropoutSalt));
    const auto lr_result = ckpt.model.loss_and_grads(
        batch, objective, grads, model_config.dropout > 0.0 ? &dropout_rng : nullptr);
    const double loss = lr_result.loss;

    double norm_sq = 0.0;
    for (float g : grads) norm_sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(norm_sq);
    if (!std::isfinite(norm)) throw TrainingDiverged("non-finite gradient at step " + std::to_string(step));
    const float clip = norm > config.grad_clip ? static_cast<float>(config.grad_clip / norm) : 1.0f;

    const double lr = config.lr * lr_multiplier(step, warmup, config.steps);
    const double bc1 = 1.0 - std::pow(beta1, step);
    const double bc2 = 1.0 - std::pow(beta2, step);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto inv_bc2 = static_cast<float>(1.0 / bc2);
    const auto wd = static_cast<float>(lr * config.weight_decay);
    auto& m = ckpt.optimizer.m;
    auto& v = ckpt.optimizer.v;
    for (std::size_t i = 0; i < n_params; ++i) {
      const float g = grads[i] * clip;
      m[i] = static_cast<float>(beta1) * m[i] + static_cast<float>(1 - beta1) * g;
      v[i] = static_cast<float>(beta2) * v[i] + static_cast<float>(1 - beta2) * g * g;
      const float denom = std::sqrt(v[i] * inv_bc2) + static_cast<float>(eps);
      params[i] -= step_size * m[i] / denom + wd * params[i];
    }
    ckpt.step = step;

    if (initial_loss < 0.0) initial_loss = loss;
    diverged_steps = loss > 10.0 * initial_loss ? diverged_steps + 1 : 0;
    if (diverged_steps >= 1000) {
      throw TrainingDiverged("loss " + std::to_string(loss) + " stayed above 10x the initial " +
                             std::to_string(initial_loss) + " for 1000 steps (step " +
                             std::to_string(step) + ")");
    }

    window_loss += loss;
    ++window_count;
    const bool eval_now = val && config.eval_interval > 0 &&
                          (step % config.eval_interval == 0 || step == config.steps);
    if (step % config.log_interval == 0 || eval_now || step == config.steps) {
      LogRow row;
      row.step = step;
      row.loss = window_loss / window_count;
      if (eval_now) row.val_ppl = perplexity(ckpt.model, *val).ppl;
      result.history.push_back(row);
      if (options.on_log) options.on_log(row);
      window_loss = 0.0;
      window_count = 0;
    }
  }
  return result;
}

void write_log_csv(const std::vector<LogRow>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "step,loss,val_ppl\n";
  char buf[64];
  for (const auto& row : history) {
    std::snprintf(buf, sizeof(buf), "%.6f", row.loss);
    out << row.step << ',' << buf << ',';
    if (row.val_ppl) {
      std::snprintf(buf, sizeof(buf), "%.4f", *row.val_ppl);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace repdrop
