#include "repdrop/experiment.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace repdrop {

namespace pt = boost::property_tree;

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.model = gpt2_small_preset(0);
  return c;
}

ExperimentConfig ExperimentConfig::desk_preset() {
  ExperimentConfig c;
  c.preset = "desk";
  c.data.max_vocab = 8192;
  c.model.layers = 2;
  c.model.heads = 4;
  c.model.d_model = 64;
  c.model.d_ff = 256;
  c.model.max_len = 160;
  c.model.dropout = 0.0;
  c.train.steps = 8000;
  c.train.lr = 1e-3;
  c.train.batch = 8;
  c.train.warmup = -1;
  c.train.eval_interval = 1000;
  c.train.log_interval = 100;
  c.train.eval_docs = 100;
  c.decode.num_prompts = 200;
  return c;
}

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& value) {
  if (value.empty()) return {};
  std::filesystem::path p(value);
  if (p.is_relative() && !base.empty()) p = base / p;
  return p.lexically_normal();
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    try {
      out.push_back(std::stoi(item.substr(b)));
    } catch (const std::exception&) {
      throw ConfigError("not an integer list: " + text);
    }
  }
  return out;
}

template <typename V>
void read_into(const pt::ptree& tree, const std::string& key, V& value) {
  if (auto v = tree.get_optional<std::string>(key)) {
    try {
      value = tree.get<V>(key);
    } catch (const pt::ptree_bad_data&) {
      throw ConfigError("invalid value for " + key + ": " + *v);
    }
  }
}

void check_keys(const pt::ptree& tree) {
  static const std::map<std::string, std::set<std::string>> known = {
      {"data", {"train", "valid", "test", "max_vocab"}},
      {"model", {"preset", "layers", "heads", "d_model", "d_ff", "max_len", "dropout"}},
      {"train",
       {"steps", "lr", "batch", "warmup", "grad_clip", "weight_decay", "eval_interval",
        "log_interval", "eval_docs"}},
      {"objective",
       {"kind", "p", "n", "gamma", "alpha", "scope", "scope_n", "inflow_mode",
        "inflow_threshold", "inflow_coverage"}},
      {"decode", {"prompt_len", "gen_len", "num_prompts"}},
      {"metrics", {"ns", "w"}},
      {"output", {"dir"}},
  };
  for (const auto& [key, child] : tree) {
    if (child.empty()) {
      if (key != "seed" && key != "preset") throw ConfigError("unknown top-level key: " + key);
      continue;
    }
    auto it = known.find(key);
    if (it == known.end()) throw ConfigError("unknown section: [" + key + "]");
    for (const auto& [sub, unused] : child) {
      if (!it->second.count(sub)) throw ConfigError("unknown key: " + key + "." + sub);
    }
  }
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& text,
                                         const std::filesystem::path& base_dir) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  check_keys(tree);

  const auto preset = tree.get<std::string>("preset", "default");
  ExperimentConfig c;
  if (preset == "desk") {
    c = desk_preset();
  } else if (preset == "default") {
    c = defaults();
  } else {
    throw ConfigError("unknown preset: " + preset);
  }
  c.preset = preset;

  std::uint64_t seed = 0;
  read_into(tree, "seed", seed);

  if (auto d = tree.get_child_optional("data")) {
    c.data.train = resolve(base_dir, d->get<std::string>("train", ""));
    c.data.valid = resolve(base_dir, d->get<std::string>("valid", ""));
    c.data.test = resolve(base_dir, d->get<std::string>("test", ""));
    read_into(*d, "max_vocab", c.data.max_vocab);
  }
  if (auto m = tree.get_child_optional("model")) {
    if (auto p = m->get_optional<std::string>("preset")) {
      if (*p == "gpt2_small") {
        c.model = gpt2_small_preset(0);
      } else if (*p != "custom") {
        throw ConfigError("unknown model preset: " + *p);
      }
    }
    read_into(*m, "layers", c.model.layers);
    read_into(*m, "heads", c.model.heads);
    read_into(*m, "d_model", c.model.d_model);
    read_into(*m, "d_ff", c.model.d_ff);
    read_into(*m, "max_len", c.model.max_len);
    read_into(*m, "dropout", c.model.dropout);
  }
  if (auto t = tree.get_child_optional("train")) {
    read_into(*t, "steps", c.train.steps);
    read_into(*t, "lr", c.train.lr);
    read_into(*t, "batch", c.train.batch);
    read_into(*t, "warmup", c.train.warmup);
    read_into(*t, "grad_clip", c.train.grad_clip);
    read_into(*t, "weight_decay", c.train.weight_decay);
    read_into(*t, "eval_interval", c.train.eval_interval);
    read_into(*t, "log_interval", c.train.log_interval);
    read_into(*t, "eval_docs", c.train.eval_docs);
  }
  if (auto o = tree.get_child_optional("objective")) {
    if (auto k = o->get_optional<std::string>("kind")) c.objective.kind = parse_objective_kind(*k);
    read_into(*o, "p", c.objective.p);
    read_into(*o, "n", c.objective.n);
    read_into(*o, "gamma", c.objective.gamma);
    read_into(*o, "alpha", c.objective.alpha);
    if (auto s = o->get_optional<std::string>("scope")) {
      c.objective.scope.variant = parse_scope_variant(*s);
    }
    read_into(*o, "scope_n", c.objective.scope.n);
    if (auto mode = o->get_optional<std::string>("inflow_mode")) {
      if (*mode == "threshold") {
        c.inflow.mode = InflowRule::Mode::kThreshold;
      } else if (*mode == "coverage") {
        c.inflow.mode = InflowRule::Mode::kCoverage;
      } else {
        throw ConfigError("inflow_mode must be threshold or coverage");
      }
    }
    read_into(*o, "inflow_threshold", c.inflow.threshold);
    read_into(*o, "inflow_coverage", c.inflow.target_coverage);
  }
  if (auto d = tree.get_child_optional("decode")) {
    read_into(*d, "prompt_len", c.decode.prompt_len);
    read_into(*d, "gen_len", c.decode.gen_len);
    read_into(*d, "num_prompts", c.decode.num_prompts);
  }
  if (auto m = tree.get_child_optional("metrics")) {
    if (auto ns = m->get_optional<std::string>("ns")) c.metrics.ns = parse_int_list(*ns);
    read_into(*m, "w", c.metrics.w);
  }
  if (auto o = tree.get_child_optional("output")) {
    if (auto dir = o->get_optional<std::string>("dir")) c.out_dir = resolve(base_dir, *dir);
  }
  c.apply_seed(seed);
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.parent_path());
}

void ExperimentConfig::apply_seed(std::uint64_t s) {
  seed = s;
  train.seed = s;
  objective.scope.seed = s;
}

void ExperimentConfig::validate(bool check_paths) const {
  if (data.train.empty()) throw ConfigError("data.train is required");
  if (check_paths) {
    for (const auto* p : {&data.train, &data.valid, &data.test}) {
      if (!p->empty() && !std::filesystem::exists(*p)) {
        throw ConfigError("no such file: " + p->string());
      }
    }
  }
  if (data.max_vocab < 2) throw ConfigError("max_vocab must be at least 2");
  ModelConfig m = model;
  if (m.vocab < 2) m.vocab = 2;
  m.validate();
  train.validate();
  objective.validate();
  if (decode.prompt_len < 1 || decode.gen_len < 1) {
    throw ConfigError("prompt_len and gen_len must be positive");
  }
  if (metrics.ns.empty()) throw ConfigError("metrics.ns must not be empty");
  for (int n : metrics.ns) {
    if (n < 1) throw ConfigError("metrics.ns entries must be positive");
  }
  if (metrics.w < 1) throw ConfigError("metrics.w must be positive");
}

std::string ExperimentConfig::to_ini() const {
  std::ostringstream o;
  o << "preset = " << preset << "\n";
  o << "seed = " << seed << "\n\n";
  o << "[data]\n";
  o << "train = " << data.train.string() << "\n";
  o << "valid = " << data.valid.string() << "\n";
  o << "test = " << data.test.string() << "\n";
  o << "max_vocab = " << data.max_vocab << "\n\n";
  o << "[model]\n";
  o << "preset = custom\n";
  o << "layers = " << model.layers << "\n";
  o << "heads = " << model.heads << "\n";
  o << "d_model = " << model.d_model << "\n";
  o << "d_ff = " << model.d_ff << "\n";
  o << "max_len = " << model.max_len << "\n";
  o << "dropout = " << fmt_double(model.dropout) << "\n\n";
  o << "[train]\n";
  o << "steps = " << train.steps << "\n";
  o << "lr = " << fmt_double(train.lr) << "\n";
  o << "batch = " << train.batch << "\n";
  o << "warmup = " << train.warmup << "\n";
  o << "grad_clip = " << fmt_double(train.grad_clip) << "\n";
  o << "weight_decay = " << fmt_double(train.weight_decay) << "\n";
  o << "eval_interval = " << train.eval_interval << "\n";
  o << "log_interval = " << train.log_interval << "\n";
  o << "eval_docs = " << train.eval_docs << "\n\n";
  o << "[objective]\n";
  o << "kind = " << to_string(objective.kind) << "\n";
  o << "p = " << fmt_double(objective.p) << "\n";
  o << "n = " << objective.n << "\n";
  o << "gamma = " << fmt_double(objective.gamma) << "\n";
  o << "alpha = " << fmt_double(objective.alpha) << "\n";
  o << "scope = " << to_string(objective.scope.variant) << "\n";
  o << "scope_n = " << objective.scope.n << "\n";
  o << "inflow_mode = "
    << (inflow.mode == InflowRule::Mode::kThreshold ? "threshold" : "coverage") << "\n";
  o << "inflow_threshold = " << fmt_double(inflow.threshold) << "\n";
  o << "inflow_coverage = " << fmt_double(inflow.target_coverage) << "\n\n";
  o << "[decode]\n";
  o << "prompt_len = " << decode.prompt_len << "\n";
  o << "gen_len = " << decode.gen_len << "\n";
  o << "num_prompts = " << decode.num_prompts << "\n\n";
  o << "[metrics]\n";
  o << "ns = ";
  for (std::size_t i = 0; i < metrics.ns.size(); ++i) o << (i ? "," : "") << metrics.ns[i];
  o << "\n";
  o << "w = " << metrics.w << "\n\n";
  o << "[output]\n";
  o << "dir = " << out_dir.string() << "\n";
  return o.str();
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["preset"] = preset;
  j["seed"] = seed;
  j["data"] = {{"train", data.train.string()},
               {"valid", data.valid.string()},
               {"test", data.test.string()},
               {"max_vocab", data.max_vocab}};
  j["model"] = model.to_json();
  j["train"] = train.to_json();
  j["objective"] = {{"kind", to_string(objective.kind)},
                    {"p", objective.p},
                    {"n", objective.n},
                    {"gamma", objective.gamma},
                    {"alpha", objective.alpha},
                    {"scope", to_string(objective.scope.variant)},
                    {"scope_n", objective.scope.n}};
  j["decode"] = {{"prompt_len", decode.prompt_len},
                 {"gen_len", decode.gen_len},
                 {"num_prompts", decode.num_prompts}};
  j["metrics"] = {{"ns", metrics.ns}, {"w", metrics.w}};
  j["out_dir"] = out_dir.string();
  return j;
}

std::string ExperimentConfig::digest() const {
  // Output location does not affect results.
  ExperimentConfig c = *this;
  c.out_dir.clear();
  const std::string text = c.to_ini();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Dataset load_dataset(const DataConfig& data) {
  Dataset ds;
  const auto lines = read_lines(data.train);
  ds.vocab = Vocabulary::build(lines, data.max_vocab);
  ds.train = make_corpus(data.train.stem().string(), lines, ds.vocab);
  if (!data.valid.empty()) ds.valid = load_corpus(data.valid, ds.vocab);
  if (!data.test.empty()) ds.test = load_corpus(data.test, ds.vocab);
  return ds;
}

std::unordered_set<TokenId> high_inflow_words(const Corpus& train, const InflowRule& rule) {
  const auto selection = select_high_inflow_pairs(compute_inflow(train), rule);
  return selection.words;
}

TrainResult run_training(const ExperimentConfig& config, const Dataset& data,
                         std::function<void(const LogRow&)> on_log) {
  ModelConfig model = config.model;
  model.vocab = static_cast<int>(data.vocab.size());
  std::unordered_set<TokenId> inflow_words;
  TrainOptions options;
  options.validation = data.valid.documents.empty() ? nullptr : &data.valid;
  options.on_log = std::move(on_log);
  const auto v = config.objective.scope.variant;
  if (config.objective.uses_scopes() &&
      (v == ScopeVariant::kHighInflowAll || v == ScopeVariant::kHighInflowRepetitive ||
       v == ScopeVariant::kHighInflowRandomSubset)) {
    inflow_words = high_inflow_words(data.train, config.inflow);
    options.scope_aux.high_inflow = &inflow_words;
  }
  auto result = train(model, data.train, config.train, config.objective, options);
  result.checkpoint.meta["config_digest"] = config.digest();
  result.checkpoint.meta["seed"] = config.seed;
  return result;
}

std::vector<Generation> generate_all(const Transformer<float>& model, const PromptSet& prompts,
                                     std::size_t gen_len) {
  std::vector<Generation> out;
  out.reserve(prompts.prompts.size());
  for (const auto& p : prompts.prompts) {
    const auto full = greedy_decode(model, p.view(), gen_len);
    Generation g;
    g.prompt = p.ids;
    g.continuation.assign(full.ids.begin() + static_cast<std::ptrdiff_t>(p.size()),
                          full.ids.end());
    out.push_back(std::move(g));
  }
  return out;
}

void write_generations(const std::vector<Generation>& gens, const Vocabulary& vocab,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& g : gens) {
    nlohmann::json j = {{"prompt", detokenize(g.prompt, vocab)},
                        {"continuation", detokenize(g.continuation, vocab)},
                        {"prompt_ids", g.prompt},
                        {"continuation_ids", g.continuation}};
    out << j.dump() << '\n';
  }
}

std::vector<Generation> read_generations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read generations " + path.string());
  std::vector<Generation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Generation g;
      g.prompt = j.at("prompt_ids").get<std::vector<TokenId>>();
      g.continuation = j.at("continuation_ids").get<std::vector<TokenId>>();
      out.push_back(std::move(g));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

MetricsReport evaluate_generations(const std::vector<Generation>& gens,
                                   const MetricConfig& metrics, std::string name) {
  if (gens.empty()) throw Error("no generations to evaluate");
  std::vector<TokenSeq> seqs;
  seqs.reserve(gens.size());
  for (const auto& g : gens) seqs.push_back(TokenSeq{g.continuation, {}});
  return compute_report(seqs, metrics, std::move(name));
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

nlohmann::json to_json(const RunSummary& s) {
  return {{"generated", to_json(s.generated)},
          {"valid_ppl", s.valid_ppl},
          {"train_rep2", s.train_rep2},
          {"num_params", s.num_params}};
}

RunSummary summary_from_json(const nlohmann::json& j) {
  RunSummary s;
  s.generated = report_from_json(j.at("generated"));
  s.valid_ppl = j.at("valid_ppl").get<double>();
  s.train_rep2 = j.at("train_rep2").get<double>();
  s.num_params = j.at("num_params").get<std::size_t>();
  return s;
}

RunSummary run_experiment(const ExperimentConfig& config, const Dataset& data,
                          std::function<void(const LogRow&)> on_log) {
  if (data.test.documents.empty()) throw ConfigError("a test split is required");
  const auto& dir = config.out_dir;
  std::filesystem::create_directories(dir);
  write_text_file(dir / "config.ini", config.to_ini());

  auto result = run_training(config, data, std::move(on_log));
  save_checkpoint(result.checkpoint, dir / "checkpoint.bin");
  write_log_csv(result.history, dir / "train_log.csv");
  const auto& model = result.checkpoint.model;

  PromptSet prompts = extract_prompts(data.test, config.decode.prompt_len, config.decode.gen_len);
  if (config.decode.num_prompts > 0 && prompts.prompts.size() > config.decode.num_prompts) {
    prompts.prompts.resize(config.decode.num_prompts);
    prompts.references.resize(config.decode.num_prompts);
  }
  const auto gens = generate_all(model, prompts, config.decode.gen_len);
  write_generations(gens, data.vocab, dir / "generations.jsonl");

  RunSummary s;
  s.generated = evaluate_generations(gens, config.metrics, dir.filename().string());
  s.generated.ppl = perplexity(model, data.test).ppl;
  s.valid_ppl = data.valid.documents.empty() ? 0.0 : perplexity(model, data.valid).ppl;
  s.train_rep2 = corpus_rep_n(data.train.documents, 2).mean;
  s.num_params = model.params().size();

  nlohmann::json j = to_json(s);
  j["seed"] = config.seed;
  j["config_digest"] = config.digest();
  write_text_file(dir / "metrics.json", j.dump(2) + "\n");
  write_text_file(dir / "metrics.csv", csv_header(true) + "\n" + csv_row(s.generated, true) + "\n");
  return s;
}

}  // namespace repdrop
