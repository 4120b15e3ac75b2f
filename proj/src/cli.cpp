#include "germtl/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "germtl/data.hpp"
#include "germtl/errors.hpp"
#include "germtl/hashing.hpp"
#include "germtl/tokenizer.hpp"

namespace germtl::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- value parsing ---------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
  throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(value) +
                    "' as " + std::string(want));
}

double to_double(std::string_view key, std::string_view v) {
  const std::string s = trim(v);
  double out = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) bad_value(key, v, "a number");
  return out;
}

long long to_int(std::string_view key, std::string_view v) {
  const std::string s = trim(v);
  long long out = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) bad_value(key, v, "an integer");
  return out;
}

int to_int32(std::string_view key, std::string_view v) {
  const long long x = to_int(key, v);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
    bad_value(key, v, "a 32-bit integer");
  }
  return static_cast<int>(x);
}

std::uint64_t to_uint(std::string_view key, std::string_view v) {
  const std::string s = trim(v);
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    bad_value(key, v, "a nonnegative integer");
  }
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  const std::string s = trim(v);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  bad_value(key, v, "a boolean");
}

std::vector<std::uint64_t> to_seed_list(std::string_view key, std::string_view v) {
  std::vector<std::uint64_t> out;
  std::string s(v);
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_uint(key, item));
  if (out.empty()) bad_value(key, v, "a comma-separated seed list");
  return out;
}

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

struct Key {
  const char* name;
  bool hashed;  // part of config_hash
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define GERMTL_REAL(field, key)                                                        \
  Key { key, true, [](ExperimentConfig& c, std::string_view v) { c.field = to_double(key, v); }, \
        [](const ExperimentConfig& c) { return fmt_double(c.field); } }
#define GERMTL_INT(field, key)                                                         \
  Key { key, true, [](ExperimentConfig& c, std::string_view v) { c.field = to_int32(key, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.field); } }
#define GERMTL_PATH(field, key)                                                        \
  Key { key, false, [](ExperimentConfig& c, std::string_view v) { c.field = trim(v); }, \
        [](const ExperimentConfig& c) { return c.field; } }

const std::vector<Key>& key_table() {
  static const std::vector<Key> keys{
      GERMTL_REAL(train.learning_rate, "learning_rate"),
      GERMTL_INT(train.num_epochs, "num_epochs"),
      GERMTL_REAL(train.adam_epsilon, "adam_epsilon"),
      GERMTL_REAL(train.adam_beta1, "adam_beta1"),
      GERMTL_REAL(train.adam_beta2, "adam_beta2"),
      GERMTL_REAL(train.warmup_ratio, "warmup_ratio"),
      GERMTL_INT(train.warmup_steps, "warmup_steps"),
      GERMTL_REAL(train.max_grad_norm, "max_grad_norm"),
      GERMTL_INT(train.batch_size, "batch_size"),
      GERMTL_INT(train.eval_every_batches, "eval_every_batches"),
      GERMTL_INT(train.early_stop_patience_evals, "early_stop_patience_evals"),
      GERMTL_INT(train.gradient_accumulation_steps, "gradient_accumulation_steps"),
      Key{"environment", true,
          [](ExperimentConfig& c, std::string_view v) {
            try {
              c.train.environment = parse_environment(trim(v));
            } catch (const std::exception&) {
              bad_value("environment", v, "stl or mtl");
            }
          },
          [](const ExperimentConfig& c) { return lower(std::string(environment_name(c.train.environment))); }},
      Key{"lm_stage", true,
          [](ExperimentConfig& c, std::string_view v) { c.train.lm_stage = to_bool("lm_stage", v); },
          [](const ExperimentConfig& c) { return std::string(c.train.lm_stage ? "true" : "false"); }},
      Key{"seeds", true,
          [](ExperimentConfig& c, std::string_view v) { c.train.seeds = to_seed_list("seeds", v); },
          [](const ExperimentConfig& c) {
            std::string s;
            for (auto x : c.train.seeds) s += (s.empty() ? "" : ",") + std::to_string(x);
            return s;
          }},
      GERMTL_REAL(train.mlm_probability, "mlm_probability"),
      GERMTL_INT(encoder.vocab_size, "vocab_size"),
      GERMTL_INT(encoder.d_model, "d_model"),
      GERMTL_INT(encoder.n_layers, "n_layers"),
      GERMTL_INT(encoder.n_heads, "n_heads"),
      GERMTL_INT(encoder.d_ff, "d_ff"),
      GERMTL_INT(encoder.max_seq_len, "max_seq_len"),
      GERMTL_REAL(encoder.dropout, "dropout"),
      Key{"model_name", true, [](ExperimentConfig& c, std::string_view v) { c.model_name = trim(v); },
          [](const ExperimentConfig& c) { return c.model_name; }},
      GERMTL_PATH(train_path, "train_path"),
      GERMTL_PATH(val_path, "val_path"),
      GERMTL_PATH(lm_corpus_path, "lm_corpus_path"),
      GERMTL_PATH(vocab_path, "vocab_path"),
      GERMTL_PATH(output_dir, "output_dir"),
      GERMTL_REAL(split_ratio, "split_ratio"),
      Key{"split_seed", true,
          [](ExperimentConfig& c, std::string_view v) { c.split_seed = to_uint("split_seed", v); },
          [](const ExperimentConfig& c) { return std::to_string(c.split_seed); }},
      Key{"averaging", true,
          [](ExperimentConfig& c, std::string_view v) { c.averaging = parse_averaging(trim(v)); },
          [](const ExperimentConfig& c) { return std::string(averaging_name(c.averaging)); }},
  };
  return keys;
}

#undef GERMTL_REAL
#undef GERMTL_INT
#undef GERMTL_PATH

const Key& find_key(std::string_view name) {
  for (const auto& k : key_table())
    if (name == k.name) return k;
  throw ConfigError("unknown config key '" + std::string(name) + "'");
}

}  // namespace

void ExperimentConfig::validate() const {
  train.validate();
  encoder.validate();
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split_ratio must lie in (0, 1)");
  if (model_name.empty()) throw ConfigError("model_name must not be empty");
  if (model_name.find_first_of(",\n\"") != std::string::npos) {
    throw ConfigError("model_name must not contain commas, quotes or line breaks");
  }
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& k : key_table()) v.push_back(k.name);
    return v;
  }();
  return names;
}

void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  find_key(trim(key)).set(cfg, value);
}

std::string get_config_value(const ExperimentConfig& cfg, std::string_view key) {
  return find_key(key).get(cfg);
}

void apply_config_text(ExperimentConfig& cfg, std::string_view text, std::string_view source) {
  std::istringstream is{std::string(text)};
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(std::string(source) + ":" + std::to_string(n) + ": expected key = value");
    }
    try {
      set_config_value(cfg, t.substr(0, eq), t.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(source) + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  ExperimentConfig cfg;
  apply_config_text(cfg, ss.str(), path.string());
  return cfg;
}

std::string render_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : key_table()) out += std::string(k.name) + " = " + k.get(cfg) + "\n";
  return out;
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::string canon;
  for (const auto& k : key_table())
    if (k.hashed) canon += std::string(k.name) + "=" + k.get(cfg) + "\n";
  return hex_digest(canon);
}

// ---- commands --------------------------------------------------------------

namespace {

struct ConfigOptions {
  std::string config_file;
  std::vector<std::string> sets;
};

void add_config_options(CLI::App* cmd, ConfigOptions& o) {
  cmd->add_option("--config", o.config_file, "Configuration file (key = value lines)");
  cmd->add_option("--set", o.sets, "Override a configuration key: key=value (repeatable)");
}

ExperimentConfig resolve(const ConfigOptions& o) {
  ExperimentConfig cfg = o.config_file.empty() ? ExperimentConfig{} : load_config(o.config_file);
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  return cfg;
}

std::string vocab_hash(const Vocab& v) { return hex_digest(v.serialize()); }

Vocab load_vocab(const std::string& path) {
  if (path.empty()) throw ConfigError("a vocabulary is required (vocab_path or --vocab)");
  return Vocab::load(path);
}

std::vector<Example> load_texts(const std::string& path) {
  FormatSpec fmt;
  fmt.require_labels = false;
  return load_dataset(path, fmt);
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void write_text(const fs::path& path, const std::string& content) {
  ensure_parent(path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << content;
  if (!os) throw DataError("cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// Metadata written next to artifacts whose own format has no room for it.
void write_sidecar(const fs::path& artifact, const std::string& command, const json& fields) {
  json j = fields;
  j["artifact"] = artifact.filename().string();
  j["command"] = command;
  write_text(artifact.string() + ".meta.json", j.dump(2) + "\n");
}

json metrics_json(const TaskMetrics& m) {
  json j{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
  if (!m.note.empty()) j["note"] = m.note;
  return j;
}

TaskMetrics metrics_from_json(const json& j, Averaging avg) {
  return {j.at("precision").get<double>(), j.at("recall").get<double>(), j.at("f1").get<double>(),
          avg, j.value("note", "")};
}

std::vector<PredictionRow> prediction_rows(std::span<const EncodedExample> data,
                                           const std::array<std::vector<int>, 3>& labels) {
  std::vector<PredictionRow> rows;
  for (std::size_t i = 0; i < data.size(); ++i)
    rows.push_back({data[i].id, {labels[0][i], labels[1][i], labels[2][i]}});
  return rows;
}

// ---- build-vocab -----------------------------------------------------------

struct BuildVocabOptions {
  ConfigOptions cfg;
  std::string corpus, out;
  int max_size = 0;
  int min_freq = 1;
};

int cmd_build_vocab(const BuildVocabOptions& o, std::ostream& out) {
  ExperimentConfig cfg = resolve(o.cfg);
  const std::string path = o.out.empty() ? cfg.vocab_path : o.out;
  if (path.empty()) throw ConfigError("build-vocab: --out (or vocab_path) is required");
  const std::string corpus_path = o.corpus.empty() ? cfg.train_path : o.corpus;
  if (corpus_path.empty()) throw ConfigError("build-vocab: --corpus (or train_path) is required");
  const int max_size = o.max_size > 0 ? o.max_size : cfg.encoder.vocab_size;

  auto data = load_texts(corpus_path);
  std::vector<std::string> texts;
  for (const auto& e : data) texts.push_back(e.text);
  Vocab vocab = build_vocab(texts, max_size, o.min_freq);
  ensure_parent(path);
  vocab.save(path);

  long pieces = 0, unknown = 0;
  for (const auto& t : texts) {
    for (const auto& p : tokenize(vocab, t)) {
      ++pieces;
      unknown += p == "[UNK]";
    }
  }
  const double coverage = pieces ? 1.0 - static_cast<double>(unknown) / static_cast<double>(pieces) : 1.0;
  write_sidecar(path, "build-vocab",
                {{"vocab_hash", vocab_hash(vocab)},
                 {"config_hash", config_hash(cfg)},
                 {"corpus", corpus_path},
                 {"max_size", max_size},
                 {"min_freq", o.min_freq},
                 {"size", vocab.size()},
                 {"coverage", coverage}});
  out << "vocabulary: " << vocab.size() << " tokens (max " << max_size << ") written to " << path << "\n"
      << "vocab hash: " << vocab_hash(vocab) << "\n"
      << "coverage: " << std::fixed << std::setprecision(4) << coverage << " (" << pieces
      << " corpus pieces, " << unknown << " unknown)\n";
  return kOk;
}

// ---- shared training setup -----------------------------------------------------

struct TrainOptions {
  ConfigOptions cfg;
  std::string env, train, val, vocab, out;
  bool lm = false;
  int seeds = 0;
  bool quiet = false;
};

ExperimentConfig resolve_train(const TrainOptions& o) {
  ExperimentConfig cfg = resolve(o.cfg);
  if (!o.env.empty()) set_config_value(cfg, "environment", o.env);
  if (o.lm) cfg.train.lm_stage = true;
  if (o.seeds > 0) {
    cfg.train.seeds.clear();
    for (int s = 1; s <= o.seeds; ++s) cfg.train.seeds.push_back(static_cast<std::uint64_t>(s));
  } else if (o.seeds < 0) {
    throw ConfigError("--seeds must be positive");
  }
  if (!o.train.empty()) cfg.train_path = o.train;
  if (!o.val.empty()) cfg.val_path = o.val;
  if (!o.vocab.empty()) cfg.vocab_path = o.vocab;
  if (!o.out.empty()) cfg.output_dir = o.out;
  return cfg;
}

struct Prepared {
  Vocab vocab;
  ExperimentData data;
};

Prepared prepare(ExperimentConfig& cfg) {
  if (cfg.train_path.empty()) throw ConfigError("train_path (or --train) is required");
  Vocab vocab = load_vocab(cfg.vocab_path);
  cfg.encoder.vocab_size = vocab.size();
  cfg.validate();

  auto train = load_dataset(cfg.train_path);
  std::vector<Example> val;
  if (cfg.val_path.empty()) {
    auto parts = split(train, cfg.split_ratio, cfg.split_seed);
    train = std::move(parts.first);
    val = std::move(parts.second);
  } else {
    val = load_dataset(cfg.val_path);
  }
  if (train.empty()) throw DataError("training set is empty");

  Prepared p{vocab, {}};
  p.data.encoder = cfg.encoder;
  p.data.train = encode_examples(vocab, train, cfg.encoder.max_seq_len);
  p.data.val = encode_examples(vocab, val, cfg.encoder.max_seq_len);
  p.data.predict = p.data.val;
  if (cfg.train.lm_stage) {
    std::vector<Example> corpus = cfg.lm_corpus_path.empty() ? train : load_texts(cfg.lm_corpus_path);
    for (const auto& e : corpus) p.data.lm_corpus.push_back(encode(vocab, e.text, cfg.encoder.max_seq_len));
  }
  return p;
}

json config_json(const ExperimentConfig& cfg) {
  json j = json::object();
  for (const auto& k : key_table()) j[k.name] = k.get(cfg);
  return j;
}

json eval_history_json(const RunRecord& r) {
  json h = json::array();
  for (const auto& pt : r.eval_history) {
    json f1 = json::object();
    for (Task t : kAllTasks)
      if (pt.f1[task_index(t)]) f1[std::string(task_name(t))] = *pt.f1[task_index(t)];
    h.push_back({{"step", pt.step}, {"val_loss", pt.val_loss}, {"f1", f1}});
  }
  return h;
}

json task_metrics_json(const std::array<TaskMetrics, 3>& m) {
  json j = json::object();
  for (Task t : kAllTasks) j[std::string(task_name(t))] = metrics_json(m[task_index(t)]);
  return j;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  ExperimentConfig cfg = resolve_train(o);
  Prepared prep = prepare(cfg);
  if (prep.data.val.empty()) throw DataError("validation set is empty");
  const std::string chash = config_hash(cfg);
  const std::string vhash = vocab_hash(prep.vocab);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir / "checkpoints");
  fs::create_directories(dir / "predictions");

  ProgressFn progress;
  if (!o.quiet) progress = [&err](const std::string& m) { err << "training " << m << "\n"; };
  ExperimentResult res = run_experiment(cfg.train, prep.data, progress);

  json manifest{{"format", "germtl-manifest"},
                {"version", 1},
                {"environment", res.environment},
                {"model_name", cfg.model_name},
                {"config_hash", chash},
                {"vocab_hash", vhash},
                {"averaging", std::string(averaging_name(cfg.averaging))},
                {"seeds", cfg.train.seeds},
                {"config", config_json(cfg)}};
  const json meta{{"config_hash", chash}, {"vocab_hash", vhash}, {"environment", res.environment}};

  std::vector<ResultRow> rows;
  json runs = json::array(), seeds_json = json::array();
  for (const auto& sr : res.seeds) {
    const std::string stem = "seed" + std::to_string(sr.seed);
    for (const auto& m : sr.models) {
      const std::string name = m.task ? stem + "_" + std::string(task_name(*m.task)) : stem;
      const fs::path ckpt = fs::path("checkpoints") / (name + ".json");
      save_checkpoint(dir / ckpt, m.params, {vhash, chash});
      json run{{"seed", sr.seed},
               {"checkpoint", ckpt.generic_string()},
               {"eval_history", eval_history_json(m.record)},
               {"stopped_early", m.record.stopped_early},
               {"best_checkpoint_step", m.record.best_checkpoint_step},
               {"steps_run", m.record.steps_run}};
      run["task"] = m.task ? json(std::string(task_name(*m.task))) : json(nullptr);
      runs.push_back(run);
    }
    const fs::path pred = fs::path("predictions") / (stem + ".csv");
    write_predictions(dir / pred, prediction_rows(prep.data.predict, sr.predictions));
    write_sidecar(dir / pred, "train", meta);
    auto metrics = score_predictions(sr.predictions, prep.data.predict, cfg.averaging);
    seeds_json.push_back({{"seed", sr.seed}, {"predictions", pred.generic_string()}, {"metrics", task_metrics_json(metrics)}});
    rows.push_back({cfg.model_name + " " + stem, res.environment, metrics});
  }
  std::array<TaskMetrics, 3> mean;
  for (std::size_t k = 0; k < 3; ++k) {
    for (const auto& r : rows) {
      mean[k].precision += r.tasks[k].precision;
      mean[k].recall += r.tasks[k].recall;
      mean[k].f1 += r.tasks[k].f1;
    }
    const double n = static_cast<double>(rows.size());
    mean[k] = {mean[k].precision / n, mean[k].recall / n, mean[k].f1 / n, cfg.averaging, ""};
  }
  const fs::path ens = fs::path("predictions") / "ensemble.csv";
  write_predictions(dir / ens, prediction_rows(prep.data.predict, res.ensemble));
  write_sidecar(dir / ens, "train", meta);
  auto ens_metrics = score_predictions(res.ensemble, prep.data.predict, cfg.averaging);
  rows.push_back({cfg.model_name + " ensemble", res.environment, ens_metrics});

  manifest["runs"] = runs;
  manifest["validation"] = {{"per_seed", seeds_json},
                            {"ensemble", {{"predictions", ens.generic_string()}, {"metrics", task_metrics_json(ens_metrics)}}},
                            {"seed_mean", task_metrics_json(mean)}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  auto table = results_table(rows);
  write_text(dir / "validation_table.txt", table.text);
  write_text(dir / "validation.csv", table.delimited);
  out << "environment " << res.environment << ", config hash " << chash << "\n"
      << table.text << "manifest written to " << (dir / "manifest.json").string() << "\n";
  return kOk;
}

// ---- pretrain-lm -----------------------------------------------------------

int cmd_pretrain_lm(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  ExperimentConfig cfg = resolve_train(o);
  cfg.train.lm_stage = true;
  Prepared prep = prepare(cfg);
  const std::string chash = config_hash(cfg);
  const std::string vhash = vocab_hash(prep.vocab);
  const fs::path dir = fs::path(cfg.output_dir) / "lm";
  fs::create_directories(dir);
  for (std::uint64_t seed : cfg.train.seeds) {
    if (!o.quiet) err << "LM stage seed " << seed << "\n";
    LmStats stats;
    ModelParams p = ModelParams::init_mtl(cfg.encoder, true, mix_seed(seed, 0));
    p = lm_finetune(p, prep.data.lm_corpus, cfg.train, mix_seed(seed, 100), &stats);
    const fs::path ckpt = dir / ("seed" + std::to_string(seed) + ".json");
    save_checkpoint(ckpt, p, {vhash, chash});
    const double acc = masked_token_accuracy(p, prep.data.lm_corpus, mix_seed(seed, 0xACC), 1,
                                             cfg.train.mlm_probability);
    out << "seed " << seed << ": " << stats.step_losses.size() << " steps, final MLM loss "
        << (stats.step_losses.empty() ? 0.0 : stats.step_losses.back()) << ", masked accuracy " << acc
        << ", checkpoint " << ckpt.string() << "\n";
  }
  return kOk;
}

// ---- predict ---------------------------------------------------------------

struct PredictOptions {
  ConfigOptions cfg;
  std::vector<std::string> checkpoints;
  std::string input, vocab, out;
};

int cmd_predict(const PredictOptions& o, std::ostream& out) {
  const bool have_config = !o.cfg.config_file.empty() || !o.cfg.sets.empty();
  ExperimentConfig cfg = resolve(o.cfg);
  const std::string vocab_path = o.vocab.empty() ? cfg.vocab_path : o.vocab;
  Vocab vocab = load_vocab(vocab_path);
  const std::string vhash = vocab_hash(vocab);
  cfg.encoder.vocab_size = vocab.size();
  const std::string chash = config_hash(cfg);

  auto input = load_texts(o.input);
  std::array<std::vector<std::vector<int>>, 3> votes;
  std::set<std::string> config_hashes;
  for (const auto& path : o.checkpoints) {
    auto [params, info] = load_checkpoint(path);
    if (info.vocab_hash != vhash) {
      throw ConfigError("refusing to predict: checkpoint " + path + " was trained with vocabulary " +
                        info.vocab_hash + " but " + vocab_path + " has hash " + vhash);
    }
    if (have_config && info.config_hash != chash) {
      throw ConfigError("refusing to predict: checkpoint " + path + " was trained under config hash " +
                        info.config_hash + " but the given configuration hashes to " + chash);
    }
    config_hashes.insert(info.config_hash);
    std::vector<EncodedInput> enc;
    for (const auto& e : input) enc.push_back(encode(vocab, e.text, params.config.max_seq_len));
    auto labels = predict_labels(params, enc, cfg.train.batch_size);
    if (params.environment == Environment::MTL) {
      for (std::size_t k = 0; k < 3; ++k) votes[k].push_back(std::move(labels[k]));
    } else {
      const std::size_t k = task_index(*params.stl_task);
      votes[k].push_back(std::move(labels[k]));
    }
  }
  for (Task t : kAllTasks) {
    if (votes[task_index(t)].empty()) {
      throw ConfigError("no checkpoint covers task '" + std::string(task_name(t)) +
                        "': an STL checkpoint predicts only its own task, so pass one STL "
                        "checkpoint per task or an MTL checkpoint");
    }
  }
  std::vector<PredictionRow> rows;
  std::array<std::vector<int>, 3> labels;
  for (std::size_t k = 0; k < 3; ++k)
    labels[k] = ensemble_predict(votes[k]);
  for (std::size_t i = 0; i < input.size(); ++i)
    rows.push_back({input[i].id, {labels[0][i], labels[1][i], labels[2][i]}});
  ensure_parent(o.out);
  write_predictions(o.out, rows);
  write_sidecar(o.out, "predict",
                {{"vocab_hash", vhash},
                 {"config_hash", config_hashes.size() == 1 ? json(*config_hashes.begin()) : json(config_hashes)},
                 {"checkpoints", o.checkpoints}});
  out << rows.size() << " predictions written to " << o.out << "\n";
  return kOk;
}

// ---- evaluate --------------------------------------------------------------

struct EvaluateOptions {
  std::string gold;
  std::vector<std::string> preds, names;
  std::string environment = "-";
  std::string averaging = "macro";
  std::string out_dir;
};

std::array<std::vector<int>, 3> align(const std::vector<Example>& gold,
                                      const std::vector<PredictionRow>& pred,
                                      const std::string& source) {
  std::map<std::string, const PredictionRow*> by_id;
  for (const auto& r : pred) {
    if (!by_id.emplace(r.id, &r).second) throw DataError(source + ": duplicate id " + r.id);
  }
  std::vector<std::string> missing, extra;
  std::set<std::string> gold_ids;
  for (const auto& e : gold) {
    gold_ids.insert(e.id);
    if (!by_id.contains(e.id)) missing.push_back(e.id);
  }
  for (const auto& r : pred)
    if (!gold_ids.contains(r.id)) extra.push_back(r.id);
  if (!missing.empty() || !extra.empty()) {
    auto list = [](const std::vector<std::string>& ids) {
      std::string s;
      for (std::size_t i = 0; i < ids.size() && i < 20; ++i) s += (i ? ", " : "") + ids[i];
      if (ids.size() > 20) s += ", ... (" + std::to_string(ids.size()) + " total)";
      return s;
    };
    std::string msg = source + ": ids do not match the gold file.";
    if (!missing.empty()) msg += " Missing from predictions: " + list(missing) + ".";
    if (!extra.empty()) msg += " Not in gold: " + list(extra) + ".";
    throw DataError(msg);
  }
  std::array<std::vector<int>, 3> out;
  for (const auto& e : gold)
    for (std::size_t k = 0; k < 3; ++k) out[k].push_back(by_id.at(e.id)->labels[k]);
  return out;
}

std::array<TaskMetrics, 3> score(const std::array<std::vector<int>, 3>& pred,
                                 const std::vector<Example>& gold, Averaging avg) {
  std::array<TaskMetrics, 3> m;
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<int> g;
    for (const auto& e : gold) g.push_back(e.labels[k]);
    m[k] = prf1(confusion(pred[k], g), avg);
  }
  return m;
}

void emit_table(const ResultsTable& table, const std::string& out_dir, std::ostream& out) {
  out << table.text;
  if (out_dir.empty()) return;
  write_text(fs::path(out_dir) / "results.txt", table.text);
  write_text(fs::path(out_dir) / "results.csv", table.delimited);
  out << "results written to " << (fs::path(out_dir) / "results.csv").string() << "\n";
}

int cmd_evaluate(const EvaluateOptions& o, std::ostream& out) {
  const Averaging avg = parse_averaging(o.averaging);
  if (!o.names.empty() && o.names.size() != o.preds.size()) {
    throw ConfigError("--name must be given once per --pred file");
  }
  auto gold = load_dataset(o.gold);
  if (gold.empty()) throw DataError(o.gold + ": no examples");
  std::vector<ResultRow> rows;
  std::array<std::vector<std::vector<int>>, 3> votes;
  for (std::size_t i = 0; i < o.preds.size(); ++i) {
    auto aligned = align(gold, read_predictions(o.preds[i]), o.preds[i]);
    const std::string name = o.names.empty() ? fs::path(o.preds[i]).stem().string() : o.names[i];
    rows.push_back({name, o.environment, score(aligned, gold, avg)});
    for (std::size_t k = 0; k < 3; ++k) votes[k].push_back(std::move(aligned[k]));
  }
  if (o.preds.size() > 1) {
    std::array<std::vector<int>, 3> ens;
    for (std::size_t k = 0; k < 3; ++k) ens[k] = ensemble_predict(votes[k]);
    rows.push_back({"ensemble", o.environment, score(ens, gold, avg)});
  }
  emit_table(results_table(rows), o.out_dir, out);
  return kOk;
}

// ---- report ----------------------------------------------------------------

struct ReportOptions {
  std::vector<std::string> manifests;
  std::string aggregate = "ensemble";
  std::string out_dir;
};

int cmd_report(const ReportOptions& o, std::ostream& out) {
  if (o.aggregate != "ensemble" && o.aggregate != "mean") {
    throw ConfigError("--aggregate must be ensemble or mean");
  }
  std::vector<ResultRow> rows;
  for (const auto& m : o.manifests) {
    fs::path path = m;
    if (fs::is_directory(path)) path /= "manifest.json";
    json j = read_json(path);
    try {
      if (j.at("format") != "germtl-manifest") throw DataError(path.string() + ": not a run manifest");
      const Averaging avg = parse_averaging(j.at("averaging").get<std::string>());
      const json& metrics = o.aggregate == "ensemble" ? j.at("validation").at("ensemble").at("metrics")
                                                      : j.at("validation").at("seed_mean");
      ResultRow row{j.at("model_name").get<std::string>(), j.at("environment").get<std::string>(), {}};
      for (Task t : kAllTasks)
        row.tasks[task_index(t)] = metrics_from_json(metrics.at(std::string(task_name(t))), avg);
      rows.push_back(std::move(row));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }
  auto env_rank = [](const std::string& e) {
    return std::find(kEnvironmentLabels.begin(), kEnvironmentLabels.end(), e) - kEnvironmentLabels.begin();
  };
  std::stable_sort(rows.begin(), rows.end(), [&](const ResultRow& a, const ResultRow& b) {
    if (a.model != b.model) return a.model < b.model;
    return env_rank(a.environment) < env_rank(b.environment);
  });
  emit_table(results_table(rows), o.out_dir, out);
  return kOk;
}

// ---- synth -----------------------------------------------------------------

struct SynthOptions {
  int n = 1000;
  std::uint64_t seed = 1;
  SynthSpec spec;
  std::string out;
};

int cmd_synth(const SynthOptions& o, std::ostream& out) {
  auto data = synth_generate(o.n, o.seed, o.spec);
  ensure_parent(o.out);
  write_dataset(o.out, data);
  const auto s = summarize(data);
  out << s.total << " synthetic comments written to " << o.out << "\n";
  for (int f = 0; f < 2; ++f)
    for (int e = 0; e < 2; ++e)
      for (int t = 0; t < 2; ++t)
        out << "  toxic=" << t << " engaging=" << e << " fact=" << f << ": " << s.count(t, e, f) << "\n";
  return kOk;
}

}  // namespace

// ---- entry point -----------------------------------------------------------

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multitask transformer classifiers for toxic, engaging and fact-claiming comments",
               "germtl"};
  app.require_subcommand(1);

  BuildVocabOptions bv;
  auto* build = app.add_subcommand("build-vocab", "Build a subword vocabulary from a comment file");
  add_config_options(build, bv.cfg);
  build->add_option("--corpus", bv.corpus, "Comment file (header with comment_id, comment_text)");
  build->add_option("--out", bv.out, "Vocabulary file to write");
  build->add_option("--max-size", bv.max_size, "Maximum vocabulary size (default: vocab_size)");
  build->add_option("--min-freq", bv.min_freq, "Minimum piece frequency")->check(CLI::PositiveNumber);

  TrainOptions tr, lm;
  auto add_train_options = [](CLI::App* cmd, TrainOptions& o) {
    add_config_options(cmd, o.cfg);
    cmd->add_option("--env", o.env, "Environment: stl or mtl");
    cmd->add_flag("--lm", o.lm, "Run the masked-language-model stage first");
    cmd->add_option("--seeds", o.seeds, "Train with seeds 1..N");
    cmd->add_option("--train", o.train, "Training file");
    cmd->add_option("--val", o.val, "Validation file (default: split the training file)");
    cmd->add_option("--vocab", o.vocab, "Vocabulary file");
    cmd->add_option("--out", o.out, "Output directory");
    cmd->add_flag("--quiet", o.quiet, "No progress messages");
  };
  auto* train = app.add_subcommand("train", "Train STL or MTL models for every seed");
  add_train_options(train, tr);
  auto* pretrain = app.add_subcommand("pretrain-lm", "Run only the masked-language-model stage");
  add_train_options(pretrain, lm);

  PredictOptions pr;
  auto* predict = app.add_subcommand("predict", "Label comments with trained checkpoints");
  add_config_options(predict, pr.cfg);
  predict->add_option("--checkpoint", pr.checkpoints, "Checkpoint file (repeatable; several vote)")->required();
  predict->add_option("--input", pr.input, "Comment file")->required();
  predict->add_option("--vocab", pr.vocab, "Vocabulary file");
  predict->add_option("--out", pr.out, "Predictions file to write")->required();

  EvaluateOptions ev;
  auto* evaluate = app.add_subcommand("evaluate", "Score prediction files against gold labels");
  evaluate->add_option("--gold", ev.gold, "Gold file")->required();
  evaluate->add_option("--pred", ev.preds, "Predictions file (repeatable; several add an ensemble row)")->required();
  evaluate->add_option("--name", ev.names, "Row name per predictions file");
  evaluate->add_option("--environment", ev.environment, "Environment label for the rows");
  evaluate->add_option("--averaging", ev.averaging, "macro or positive_class");
  evaluate->add_option("--out-dir", ev.out_dir, "Directory for results.txt and results.csv");

  ReportOptions rp;
  auto* report = app.add_subcommand("report", "Combine training runs into one results table");
  report->add_option("--run", rp.manifests, "Run directory or manifest file (repeatable)")->required();
  report->add_option("--aggregate", rp.aggregate, "ensemble or mean (mean of seed scores)");
  report->add_option("--out-dir", rp.out_dir, "Directory for results.txt and results.csv");

  SynthOptions sy;
  auto* synth = app.add_subcommand("synth", "Write a synthetic comment file with planted marker tokens");
  synth->add_option("--n", sy.n, "Number of comments")->check(CLI::PositiveNumber);
  synth->add_option("--seed", sy.seed, "Generator seed");
  synth->add_option("--correlation", sy.spec.correlation, "Pairwise label agreement in [0.5, 1]");
  synth->add_option("--noise", sy.spec.noise, "Probability of inverting a marker decision");
  synth->add_option("--positive-rate", sy.spec.positive_rate, "Share of positive latent classes");
  synth->add_option("--out", sy.out, "File to write")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (*build) return cmd_build_vocab(bv, out);
    if (*train) return cmd_train(tr, out, err);
    if (*pretrain) return cmd_pretrain_lm(lm, out, err);
    if (*predict) return cmd_predict(pr, out);
    if (*evaluate) return cmd_evaluate(ev, out);
    if (*report) return cmd_report(rp, out);
    if (*synth) return cmd_synth(sy, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kUsageError;
  } catch (const EnvironmentError& e) {
    err << "environment error: " << e.what() << "\n";
    return kUsageError;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  }
  return kUsageError;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace germtl::cli
