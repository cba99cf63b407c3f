#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "repdrop/analysis.hpp"
#include "repdrop/corpus.hpp"
#include "repdrop/model.hpp"
#include "repdrop/objectives.hpp"
#include "repdrop/repmetrics.hpp"
#include "repdrop/train.hpp"

namespace repdrop {

struct DataConfig {
  std::filesystem::path train;
  std::filesystem::path valid;
  std::filesystem::path test;
  std::size_t max_vocab = 50000;
};

struct DecodeConfig {
  std::size_t prompt_len = 32;
  std::size_t gen_len = 128;
  // Number of test prompts to decode (0 = every qualifying document).
  std::size_t num_prompts = 0;
};

// Flat INI file:
//
//   seed = 0
//   [data]      train, valid, test, max_vocab
//   [model]     preset, layers, heads, d_model, d_ff, max_len, dropout
//   [train]     steps, lr, batch, warmup, grad_clip, weight_decay,
//               eval_interval, log_interval, eval_docs
//   [objective] kind, p, n, gamma, alpha, scope, scope_n,
//               inflow_mode, inflow_threshold, inflow_coverage
//   [decode]    prompt_len, gen_len, num_prompts
//   [metrics]   ns, w
//   [output]    dir
//
// A top-level `preset = desk` starts from desk_preset() instead of the
// full-size defaults. Relative paths are resolved against the file's directory.
struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;  // model.vocab is filled in from the built vocabulary
  TrainConfig train;
  ObjectiveSpec objective;
  InflowRule inflow;
  DecodeConfig decode;
  MetricConfig metrics;
  std::filesystem::path out_dir = "runs/default";
  std::uint64_t seed = 0;
  std::string preset = "default";

  // GPT-2 small, 100K steps, lr 5e-5, batch 128, warmup 10K, dropout 0.1.
  static ExperimentConfig defaults();
  // Single-core scale: 2 layers, d_model 64, an 8192-word vocabulary, 8000 steps.
  static ExperimentConfig desk_preset();

  static ExperimentConfig load(const std::filesystem::path& path);
  static ExperimentConfig parse(const std::string& text,
                                const std::filesystem::path& base_dir = {});

  // Copies seed into train.seed and objective.scope.seed.
  void apply_seed(std::uint64_t s);
  void validate(bool check_paths = true) const;
  std::string to_ini() const;
  nlohmann::json to_json() const;
  // FNV-1a of to_ini(), hex.
  std::string digest() const;
};

struct Dataset {
  Vocabulary vocab;
  Corpus train;
  Corpus valid;
  Corpus test;
};

// Builds the vocabulary from the training split and encodes all three.
// Empty valid/test paths yield empty corpora.
Dataset load_dataset(const DataConfig& data);

// High-inflow word set for the HighInflow* scope variants.
std::unordered_set<TokenId> high_inflow_words(const Corpus& train, const InflowRule& rule);

TrainResult run_training(const ExperimentConfig& config, const Dataset& data,
                         std::function<void(const LogRow&)> on_log = {});

struct Generation {
  std::vector<TokenId> prompt;
  std::vector<TokenId> continuation;
};

std::vector<Generation> generate_all(const Transformer<float>& model, const PromptSet& prompts,
                                     std::size_t gen_len);

// One JSON object per line: prompt, continuation (text) and their ids.
void write_generations(const std::vector<Generation>& gens, const Vocabulary& vocab,
                       const std::filesystem::path& path);
std::vector<Generation> read_generations(const std::filesystem::path& path);

// Repetition metrics of the continuations; PPL is left unset.
MetricsReport evaluate_generations(const std::vector<Generation>& gens,
                                   const MetricConfig& metrics, std::string name = {});

// Training, decoding and scoring of one configuration. Outputs written into
// config.out_dir: config.ini, checkpoint.bin, train_log.csv, generations.jsonl,
// metrics.json, metrics.csv.
struct RunSummary {
  MetricsReport generated;
  double valid_ppl = 0.0;
  double train_rep2 = 0.0;
  std::size_t num_params = 0;
};

RunSummary run_experiment(const ExperimentConfig& config, const Dataset& data,
                          std::function<void(const LogRow&)> on_log = {});

nlohmann::json to_json(const RunSummary& summary);
RunSummary summary_from_json(const nlohmann::json& j);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace repdrop
