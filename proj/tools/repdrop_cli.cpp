// repdrop command-line entry point.
//
//   repdrop analyze  --input FILE                 rep-n / rep-w / rep-r of a text file
//   repdrop shard    --input FILE --k 6           rep-2 sorted shards + manifest
//   repdrop train    --config FILE                checkpoint, vocabulary, training log
//   repdrop generate --config FILE                greedy continuations of test prompts
//   repdrop eval     --run DIR [--run DIR ...]    Table-2 style metrics of generations
//   repdrop probe    --run DIR --input FILE       self-reinforcement probe
//   repdrop inflow   --input FILE                 high-inflow statistics and merging
//   repdrop report   --out DIR                    summary tables and SVG charts
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "repdrop/analysis.hpp"
#include "repdrop/experiment.hpp"
#include "repdrop/report.hpp"

namespace fs = std::filesystem;
using namespace repdrop;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

std::string fixed(double v, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

fs::path require_file(const std::string& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + " is required");
  if (!fs::exists(p)) throw ConfigError("no such file: " + p);
  return p;
}

ExperimentConfig load_config(const Globals& g) {
  if (g.config.empty()) throw ConfigError("--config is required");
  auto cfg = ExperimentConfig::load(g.config);
  if (g.seed) cfg.apply_seed(*g.seed);
  if (!g.out.empty()) cfg.out_dir = g.out;
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Globals& g, const fs::path& fallback) {
  fs::path dir = g.out.empty() ? fallback : fs::path(g.out);
  fs::create_directories(dir);
  return dir;
}

// Vocabulary built from the file itself; metrics only depend on token identity.
Corpus read_text_corpus(const fs::path& path, Vocabulary* vocab_out = nullptr) {
  const auto lines = read_lines(path);
  auto vocab = Vocabulary::build(lines, std::numeric_limits<std::size_t>::max());
  Corpus c = make_corpus(path.stem().string(), lines, vocab);
  if (vocab_out) *vocab_out = std::move(vocab);
  return c;
}

struct RunFiles {
  fs::path dir;
  fs::path checkpoint() const { return dir / "checkpoint.bin"; }
  fs::path vocab() const { return dir / "vocab.txt"; }
  fs::path generations() const { return dir / "generations.jsonl"; }
};

Checkpoint load_run_checkpoint(const RunFiles& run, Vocabulary& vocab) {
  vocab = Vocabulary::load(require_file(run.vocab().string(), "vocab.txt"));
  auto ckpt = load_checkpoint(require_file(run.checkpoint().string(), "checkpoint.bin"));
  if (static_cast<std::size_t>(ckpt.model.config().vocab) != vocab.size()) {
    throw Error("vocabulary mismatch: checkpoint has " +
                std::to_string(ckpt.model.config().vocab) + " tokens, vocab.txt has " +
                std::to_string(vocab.size()));
  }
  return ckpt;
}

int cmd_analyze(const Globals& g, const std::string& input, const std::vector<int>& ns, int w) {
  const auto corpus = read_text_corpus(require_file(input, "--input"));
  MetricConfig mc;
  if (!ns.empty()) mc.ns = ns;
  mc.w = w;
  const auto report = compute_report(corpus.documents, mc, corpus.name);
  const auto dir = out_dir(g, ".");
  nlohmann::json j = to_json(report);
  if (g.seed) j["seed"] = *g.seed;
  write_text_file(dir / "metrics.json", j.dump(2) + "\n");
  write_text_file(dir / "metrics.csv",
                  csv_header(true) + "\n" + csv_row(report, true) + "\n");
  std::cout << csv_header(true) << "\n" << csv_row(report, true) << "\n";
  return 0;
}

int cmd_shard(const Globals& g, const std::string& input, std::size_t k) {
  Vocabulary vocab;
  const auto corpus = read_text_corpus(require_file(input, "--input"), &vocab);
  const auto shards = shard_by_rep2(corpus, k);
  const auto dir = out_dir(g, "shards");
  write_shards(shards, vocab, dir);
  for (std::size_t i = 0; i < shards.size(); ++i) {
    std::cout << "shard " << i << ": " << shards[i].documents.size() << " docs, "
              << shards[i].word_count << " words, rep-2 " << fixed(100 * shards[i].rep2_mean, 2)
              << "%\n";
  }
  return 0;
}

int cmd_train(const Globals& g) {
  const auto cfg = load_config(g);
  const auto data = load_dataset(cfg.data);
  fs::create_directories(cfg.out_dir);
  write_text_file(cfg.out_dir / "config.ini", cfg.to_ini());
  data.vocab.save(cfg.out_dir / "vocab.txt");
  auto result = run_training(cfg, data, [](const LogRow& r) {
    std::cerr << "step " << r.step << " loss " << fixed(r.loss, 4);
    if (r.val_ppl) std::cerr << " val_ppl " << fixed(*r.val_ppl, 2);
    std::cerr << "\n";
  });
  save_checkpoint(result.checkpoint, cfg.out_dir / "checkpoint.bin");
  write_log_csv(result.history, cfg.out_dir / "train_log.csv");
  std::cout << "wrote " << (cfg.out_dir / "checkpoint.bin").string() << "\n";
  return 0;
}

int cmd_generate(const Globals& g) {
  const auto cfg = load_config(g);
  if (cfg.data.test.empty()) throw ConfigError("data.test is required for generation");
  const RunFiles run{cfg.out_dir};
  Vocabulary vocab;
  const auto ckpt = load_run_checkpoint(run, vocab);
  const auto test = load_corpus(cfg.data.test, vocab);
  auto prompts = extract_prompts(test, cfg.decode.prompt_len, cfg.decode.gen_len);
  if (cfg.decode.num_prompts > 0 && prompts.prompts.size() > cfg.decode.num_prompts) {
    prompts.prompts.resize(cfg.decode.num_prompts);
    prompts.references.resize(cfg.decode.num_prompts);
  }
  const auto gens = generate_all(ckpt.model, prompts, cfg.decode.gen_len);
  write_generations(gens, vocab, run.generations());
  std::cout << "wrote " << gens.size() << " generations to " << run.generations().string()
            << " (" << prompts.skipped << " short documents skipped)\n";
  return 0;
}

int cmd_eval(const Globals& g, const std::vector<std::string>& runs, const std::string& test_path,
             const std::vector<int>& ns, int w) {
  if (runs.empty()) throw ConfigError("at least one --run directory is required");
  MetricConfig mc;
  if (!ns.empty()) mc.ns = ns;
  mc.w = w;
  std::vector<MetricsReport> reports;
  for (const auto& r : runs) {
    const RunFiles run{r};
    Vocabulary vocab;
    const auto ckpt = load_run_checkpoint(run, vocab);
    const auto gens = read_generations(require_file(run.generations().string(), "generations"));
    auto report = evaluate_generations(gens, mc, fs::path(r).lexically_normal().filename().string());
    if (report.name.empty()) report.name = fs::path(r).parent_path().filename().string();
    if (!test_path.empty()) {
      const auto test = load_corpus(require_file(test_path, "--test"), vocab);
      report.ppl = perplexity(ckpt.model, test).ppl;
    }
    nlohmann::json j = to_json(report);
    j["seed"] = ckpt.seed;
    write_text_file(run.dir / "metrics.json", j.dump(2) + "\n");
    reports.push_back(std::move(report));
  }
  const std::string table = metrics_table_csv(reports);
  if (!g.out.empty()) write_text_file(fs::path(g.out) / "eval.csv", table);
  std::cout << table;
  return 0;
}

int cmd_probe(const Globals& g, const std::string& run_dir, const std::string& input, int n,
              std::size_t max_seqs) {
  const RunFiles run{run_dir};
  Vocabulary vocab;
  const auto ckpt = load_run_checkpoint(run, vocab);
  const auto corpus = chunk_documents(load_corpus(require_file(input, "--input"), vocab),
                                      static_cast<std::size_t>(ckpt.model.config().max_len));
  std::string table = "sequence,position,ngram,p_unmasked,p_masked,delta\n";
  std::size_t used = 0, targets = 0, positives = 0, negatives = 0;
  double sum_seq_delta = 0.0;
  for (std::size_t s = 0; s < corpus.documents.size() && used < max_seqs; ++s) {
    const auto results = self_reinforcement_probe(ckpt.model, corpus.documents[s].view(), n);
    if (results.empty()) continue;
    ++used;
    double seq_delta = 0.0;
    for (const auto& r : results) {
      table += std::to_string(s) + "," + std::to_string(r.start) + ",\"" +
               detokenize(r.ngram, vocab) + "\"," + fixed(r.p_unmasked, 9) + "," +
               fixed(r.p_masked, 9) + "," + fixed(r.delta(), 9) + "\n";
      seq_delta += r.delta();
    }
    targets += results.size();
    seq_delta /= static_cast<double>(results.size());
    sum_seq_delta += seq_delta;
    if (seq_delta > 0) ++positives;
    if (seq_delta < 0) ++negatives;
  }
  nlohmann::json summary = {
      {"sequences", used},
      {"targets", targets},
      {"n", n},
      {"mean_delta", used ? sum_seq_delta / static_cast<double>(used) : 0.0},
      {"positive_sequences", positives},
      {"negative_sequences", negatives},
      {"sign_test_p", sign_test_p_value(positives, negatives)},
      {"seed", ckpt.seed}};
  const auto dir = out_dir(g, run.dir);
  write_text_file(dir / "probe.csv", table);
  write_text_file(dir / "probe.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_inflow(const Globals& g, const std::string& input, std::optional<double> threshold,
               std::optional<double> coverage, std::size_t top) {
  Vocabulary vocab;
  const auto corpus = read_text_corpus(require_file(input, "--input"), &vocab);
  const auto table = compute_inflow(corpus);
  InflowRule rule;
  if (threshold && coverage) throw ConfigError("use either --threshold or --coverage");
  if (coverage) {
    rule.mode = InflowRule::Mode::kCoverage;
    rule.target_coverage = *coverage;
  } else if (threshold) {
    rule.threshold = *threshold;
  }
  const auto sel = select_high_inflow_pairs(table, rule);
  if (!sel.warning.empty()) std::cerr << "warning: " << sel.warning << "\n";

  nlohmann::json j = to_json(table, vocab, top);
  j["threshold"] = sel.threshold;
  j["selected_pairs"] = sel.pairs.size();
  j["high_inflow_words"] = sel.words.size();
  j["estimated_coverage"] = sel.estimated_coverage;
  nlohmann::json scopes;
  const std::pair<const char*, MergeScope> kinds[] = {{"all", MergeScope::kAll},
                                                       {"repetitive", MergeScope::kRepetitive},
                                                       {"random_subset", MergeScope::kRandomSubset}};
  for (const auto& [name, scope] : kinds) {
    const auto merged = merge_pairs(corpus, vocab, sel.pairs, scope, g.seed.value_or(0));
    scopes[name] = {{"merges", merged.merges},
                    {"word_percent", fixed(100 * merged.word_percent, 2)}};
  }
  j["merge"] = scopes;
  j["repetitive_word_percent"] = fixed(100 * repetitive_word_percent(corpus, 2), 2);
  j["repetitive_pair_share"] = fixed(100 * repetitive_pair_share(corpus, sel.pairs), 2);
  if (g.seed) j["seed"] = *g.seed;

  const auto dir = out_dir(g, ".");
  write_text_file(dir / "inflow.json", j.dump(2) + "\n");
  std::string csv = "token,inflow\n";
  for (const auto& row : j["top_inflow"]) {
    csv += row["token"].get<std::string>() + "," + fixed(row["inflow"].get<double>(), 6) + "\n";
  }
  write_text_file(dir / "inflow.csv", csv);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_report(const Globals& g) {
  if (g.out.empty()) throw ConfigError("--out (the run directory) is required");
  const auto result = build_report(g.out);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
  for (const auto& p : result.written) std::cout << "wrote " << p.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Repetition-dropout toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Experiment config (INI)");
  app.add_option("--seed", g.seed, "Seed override");
  app.add_option("--out", g.out, "Output directory");

  std::string input, test_path;
  std::vector<int> ns;
  int w = 16;
  std::size_t k = 6;
  std::vector<std::string> runs;
  std::string run_dir;
  int n = 2;
  std::size_t max_seqs = 100;
  std::optional<double> threshold, coverage;
  std::size_t top = 50;

  auto* analyze = app.add_subcommand("analyze", "Repetition metrics of a text corpus");
  analyze->add_option("--input", input, "One document per line")->required();
  analyze->add_option("--ns", ns, "n values for rep-n")->delimiter(',');
  analyze->add_option("--w", w, "rep-w window")->check(CLI::PositiveNumber);

  auto* shard = app.add_subcommand("shard", "Split a corpus into rep-2 sorted shards");
  shard->add_option("--input", input)->required();
  shard->add_option("--k", k, "Number of shards");

  app.add_subcommand("train", "Train a model from --config");
  app.add_subcommand("generate", "Greedy-decode the test prompts of --config");

  auto* eval = app.add_subcommand("eval", "Metrics of generations plus test perplexity");
  eval->add_option("--run", runs, "Run directory (repeatable)")->required();
  eval->add_option("--test", test_path, "Test corpus for PPL");
  eval->add_option("--ns", ns)->delimiter(',');
  eval->add_option("--w", w)->check(CLI::PositiveNumber);

  auto* probe = app.add_subcommand("probe", "Self-reinforcement probe");
  probe->add_option("--run", run_dir, "Run directory with checkpoint.bin and vocab.txt")->required();
  probe->add_option("--input", input, "Corpus to probe")->required();
  probe->add_option("--n", n, "n-gram length")->check(CLI::PositiveNumber);
  probe->add_option("--max-seqs", max_seqs, "Sequences with repeats to probe");

  auto* inflow = app.add_subcommand("inflow", "High-inflow word statistics");
  inflow->add_option("--input", input)->required();
  inflow->add_option("--threshold", threshold, "Inflow threshold");
  inflow->add_option("--coverage", coverage, "Target word coverage for calibration");
  inflow->add_option("--top", top, "Number of words listed");

  app.add_subcommand("report", "Summary tables and charts for --out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "analyze") return cmd_analyze(g, input, ns, w);
    if (name == "shard") return cmd_shard(g, input, k);
    if (name == "train") return cmd_train(g);
    if (name == "generate") return cmd_generate(g);
    if (name == "eval") return cmd_eval(g, runs, test_path, ns, w);
    if (name == "probe") return cmd_probe(g, run_dir, input, n, max_seqs);
    if (name == "inflow") return cmd_inflow(g, input, threshold, coverage, top);
    if (name == "report") return cmd_report(g);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
