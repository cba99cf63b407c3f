#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "repdrop/corpus.hpp"
#include "repdrop/model.hpp"
#include "repdrop/objectives.hpp"

namespace repdrop {

struct TrainConfig {
  int steps = 100000;
  double lr = 5e-5;
  int batch = 128;
  // Negative means 10% of steps.
  int warmup = 10000;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  int eval_interval = 10000;
  int log_interval = 100;
  // Validation documents used for the periodic PPL (0 = all).
  int eval_docs = 0;

  int resolved_warmup() const;
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct LogRow {
  int step = 0;
  double loss = 0.0;
  std::optional<double> val_ppl;
};

struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
};

struct Checkpoint {
  Transformer<float> model;
  AdamState optimizer;
  int step = 0;
  std::uint64_t seed = 0;
  // Free-form provenance (train config, objective, vocabulary digest).
  nlohmann::json meta = nlohmann::json::object();

  explicit Checkpoint(Transformer<float> m) : model(std::move(m)) {}
};

// Header: 8-byte magic "RDCKPT01", uint32 version, uint64 header length,
// header JSON; then little-endian float32 blocks: params, adam m, adam v.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

struct TrainOptions {
  const Corpus* validation = nullptr;
  ScopeAux scope_aux;
  // Called after every logged row.
  std::function<void(const LogRow&)> on_log;
  std::optional<Checkpoint> resume;
  // Stop after this step (0 = run to config.steps). The schedule still uses
  // config.steps, so a stopped run can be resumed exactly.
  int stop_after = 0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogRow> history;
};

// Documents longer than the model's max_len are split into chunks. Every
// random draw (batch order, masks, scopes, dropout) is derived from
// (config.seed, step), so runs are reproducible and resumable.
TrainResult train(const ModelConfig& model_config, const Corpus& corpus,
                  const TrainConfig& config, const ObjectiveSpec& objective,
                  const TrainOptions& options = {});

// Learning-rate multiplier for 1-based step s: linear warmup then linear decay.
double lr_multiplier(int step, int warmup, int total_steps);

void write_log_csv(const std::vector<LogRow>& history, const std::filesystem::path& path);

}  // namespace repdrop
