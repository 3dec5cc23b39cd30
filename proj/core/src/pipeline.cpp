#include "dtr/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <initializer_list>
#include <iomanip>
#include <set>
#include <sstream>
#include <string_view>

#include "dtr/checkpoint.hpp"
#include "dtr/disentangler.hpp"
#include "dtr/embedding.hpp"
#include "dtr/rewriter.hpp"
#include "dtr/special_tokens.hpp"

extern char** environ;

namespace dtr::pipeline {

namespace fs = std::filesystem;
using corpus::Style;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string style_name(Style s) { return std::string(corpus::to_string(s)); }

Style parse_style_or_throw(const std::string& label, const std::string& key) {
  auto s = corpus::parse_style(label);
  if (!s) throw ValidationError(key + ": unknown style '" + label + "'");
  return *s;
}

void validate_model(const nn::ModelConfig& m, const std::string& key) {
  nn::ModelConfig probe = m;
  probe.vocab_size = std::max(probe.vocab_size, kNumSpecial + 1);
  try {
    probe.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(key + ": " + e.what());
  }
}

/// Rejects keys outside `allowed` so a misplaced setting cannot silently fall back to a default.
void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!obj.is_object()) throw ValidationError(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ValidationError((where.empty() ? key : where + "." + key) + ": unknown key");
    }
  }
}

void validate_hyper(const nn::TrainHyper& h, int max_len, const std::string& key) {
  try {
    h.validate(max_len);
  } catch (const std::invalid_argument& e) {
    throw ValidationError(key + ": " + e.what());
  }
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in);
}

template <typename Fn>
void for_each_jsonl(const fs::path& path, Fn fn) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) fn(json::parse(line));
  }
}

std::ofstream open_output(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

int stage_index(std::string_view stage) {
  for (std::size_t i = 0; i < kStages.size(); ++i) {
    if (kStages[i] == stage) return static_cast<int>(i);
  }
  throw ValidationError("unknown stage '" + std::string(stage) + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration

void PipelineConfig::validate() const {
  if (name.empty() || name.find('/') != std::string::npos) throw ValidationError("name: must be a non-empty plain name");
  if (dialogues.empty()) throw ValidationError("data.dialogues: path is required");
  if (styles.empty()) throw ValidationError("styles: at least one style is required");
  if (std::set<Style>(styles.begin(), styles.end()).size() != styles.size()) throw ValidationError("styles: duplicates");
  for (Style s : styles) {
    if (!style_corpora.count(s)) throw ValidationError("data.style." + style_name(s) + ": path is required");
  }
  if (knowledge_selection != "all" && knowledge_selection != "top1-bleu1") {
    throw ValidationError("data.knowledge_selection: expected 'all' or 'top1-bleu1'");
  }
  if (min_count < 1) throw ValidationError("data.min_count: must be >= 1");
  if (valid_fraction <= 0.0 || test_fraction <= 0.0 || valid_fraction + test_fraction >= 1.0) {
    throw ValidationError("data.valid_fraction/test_fraction: must be positive and sum below 1");
  }
  validate_model(generator_model, "models.generator");
  validate_model(dae_model, "models.dae");
  validate_model(disentangler_model, "models.disentangler");
  validate_model(rewriter_model, "models.rewriter");
  validate_model(classifier_model, "models.classifier");
  if (rewriter_from_generator) {
    const auto& g = generator_model;
    const auto& r = rewriter_model;
    if (g.layers != r.layers || g.hidden != r.hidden || g.heads != r.heads || g.ff_dim != r.ff_dim ||
        g.max_len != r.max_len || g.dropout != r.dropout) {
      throw ValidationError("models.rewriter_init: 'generator' needs identical generator and rewriter models");
    }
  }
  validate_hyper(generator_train, generator_model.max_len, "training.generator");
  validate_hyper(dae_train, dae_model.max_len, "training.dae");
  validate_hyper(disentangler_train, disentangler_model.max_len, "training.disentangler");
  validate_hyper(rewriter_train, rewriter_model.max_len, "training.rewriter");
  validate_hyper(classifier_train, classifier_model.max_len, "training.classifier");
  if (!(replace_rate > 0.0 && replace_rate < 100.0)) throw ValidationError("disentangle.replace_rate: must be in (0, 100)");
  if (z < 1) throw ValidationError("disentangle.z: must be >= 1");
  if (margin < 0.0) throw ValidationError("disentangle.margin: must be >= 0");
  if (beam < 1) throw ValidationError("beam: must be >= 1");
  if (rl_valid_examples < 1) throw ValidationError("rl.valid_examples: must be >= 1");
  try {
    rl.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
}

json to_json(const PipelineConfig& c) {
  json style = json::object();
  for (const auto& [s, p] : c.style_corpora) style[style_name(s)] = p.string();
  json styles = json::array();
  for (Style s : c.styles) styles.push_back(style_name(s));
  json rl = c.rl;
  rl["valid_examples"] = c.rl_valid_examples;
  rl["reward_weights"] = {{"sim", c.reward_weights.sim}, {"cls", c.reward_weights.cls}};
  return json{{"name", c.name},
              {"seed", c.seed},
              {"run_root", c.run_root.string()},
              {"data",
               {{"dialogues", c.dialogues.string()},
                {"style", style},
                {"embeddings", c.embeddings.string()},
                {"knowledge_selection", c.knowledge_selection},
                {"min_count", c.min_count},
                {"valid_fraction", c.valid_fraction},
                {"test_fraction", c.test_fraction}}},
              {"models",
               {{"generator", c.generator_model},
                {"dae", c.dae_model},
                {"disentangler", c.disentangler_model},
                {"rewriter", c.rewriter_model},
                {"classifier", c.classifier_model},
                {"rewriter_init", c.rewriter_from_generator ? "generator" : "scratch"}}},
              {"training",
               {{"generator", c.generator_train},
                {"dae", c.dae_train},
                {"disentangler", c.disentangler_train},
                {"rewriter", c.rewriter_train},
                {"classifier", c.classifier_train}}},
              {"disentangle", {{"replace_rate", c.replace_rate}, {"z", c.z}, {"margin", c.margin}}},
              {"beam", c.beam},
              {"rl", rl},
              {"styles", styles}};
}

PipelineConfig config_from_json(const json& j) {
  PipelineConfig c;
  check_keys(j, {"name", "seed", "run_root", "data", "models", "training", "disentangle", "beam", "rl", "styles"}, "");
  try {
    c.name = j.value("name", c.name);
    c.seed = j.value("seed", c.seed);
    c.run_root = j.value("run_root", c.run_root.string());
    const json data = j.value("data", json::object());
    check_keys(data, {"dialogues", "style", "embeddings", "knowledge_selection", "min_count", "valid_fraction", "test_fraction"},
               "data");
    c.dialogues = data.value("dialogues", std::string());
    const json style = data.value("style", json::object());
    for (const auto& [label, path] : style.items()) {
      c.style_corpora[parse_style_or_throw(label, "data.style")] = path.get<std::string>();
    }
    c.embeddings = data.value("embeddings", std::string());
    c.knowledge_selection = data.value("knowledge_selection", c.knowledge_selection);
    c.min_count = data.value("min_count", c.min_count);
    c.valid_fraction = data.value("valid_fraction", c.valid_fraction);
    c.test_fraction = data.value("test_fraction", c.test_fraction);

    const json models = j.value("models", json::object());
    check_keys(models, {"generator", "dae", "disentangler", "rewriter", "classifier", "rewriter_init"}, "models");
    auto model = [&](const char* key, nn::ModelConfig& out) {
      if (!models.contains(key)) return;
      check_keys(models.at(key), {"layers", "hidden", "heads", "ff_dim", "dropout", "max_len", "vocab_size"},
                 std::string("models.") + key);
      out = models.at(key).get<nn::ModelConfig>();
    };
    model("generator", c.generator_model);
    model("dae", c.dae_model);
    model("disentangler", c.disentangler_model);
    model("rewriter", c.rewriter_model);
    model("classifier", c.classifier_model);
    const auto init = models.value("rewriter_init", std::string("scratch"));
    if (init != "scratch" && init != "generator") {
      throw ValidationError("models.rewriter_init: expected 'scratch' or 'generator'");
    }
    c.rewriter_from_generator = init == "generator";
    const json training = j.value("training", json::object());
    check_keys(training, {"generator", "dae", "disentangler", "rewriter", "classifier"}, "training");
    auto hyper = [&](const char* key, nn::TrainHyper& out) {
      if (!training.contains(key)) return;
      check_keys(training.at(key), {"learning_rate", "token_batch", "max_epochs", "patience", "seed", "grad_clip"},
                 std::string("training.") + key);
      out = training.at(key).get<nn::TrainHyper>();
    };
    hyper("generator", c.generator_train);
    hyper("dae", c.dae_train);
    hyper("disentangler", c.disentangler_train);
    hyper("rewriter", c.rewriter_train);
    hyper("classifier", c.classifier_train);

    const json dis = j.value("disentangle", json::object());
    check_keys(dis, {"replace_rate", "z", "margin"}, "disentangle");
    c.replace_rate = dis.value("replace_rate", c.replace_rate);
    c.z = dis.value("z", c.z);
    c.margin = dis.value("margin", c.margin);
    c.beam = j.value("beam", c.beam);
    if (j.contains("rl")) {
      const json& rl = j.at("rl");
      check_keys(rl, {"batch_examples", "steps", "seed", "learning_rate", "entropy_bonus", "grad_clip", "eval_every",
                      "replace_rate", "valid_examples", "reward_weights"},
                 "rl");
      c.rl = rl.get<rl::RlConfig>();
      c.rl_valid_examples = rl.value("valid_examples", c.rl_valid_examples);
      const json w = rl.value("reward_weights", json::object());
      check_keys(w, {"sim", "cls"}, "rl.reward_weights");
      c.reward_weights.sim = w.value("sim", c.reward_weights.sim);
      c.reward_weights.cls = w.value("cls", c.reward_weights.cls);
    }
    if (j.contains("styles")) {
      c.styles.clear();
      for (const auto& s : j.at("styles")) c.styles.push_back(parse_style_or_throw(s.get<std::string>(), "styles"));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return c;
}

void apply_env_overrides(json& j) {
  for (char** env = environ; env && *env; ++env) {
    const std::string entry(*env);
    if (entry.rfind("DTR_", 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string key = entry.substr(4, eq - 4);
    const std::string raw = entry.substr(eq + 1);
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char ch) { return std::tolower(ch); });
    std::vector<std::string> parts;
    for (std::size_t pos = 0;;) {
      const auto next = key.find("__", pos);
      parts.push_back(key.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
      if (next == std::string::npos) break;
      pos = next + 2;
    }
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json* node = &j;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) (*node)[parts[i]] = json::object();
      node = &(*node)[parts[i]];
    }
    (*node)[parts.back()] = value;
    spdlog::info("config override from environment: {}", entry.substr(0, eq));
  }
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ValidationError("config file " + path.string() + " is not a JSON object");
  apply_env_overrides(j);
  auto config = config_from_json(j);
  // relative paths are taken from the config file's directory
  const auto base = fs::absolute(path).parent_path();
  auto resolve = [&](fs::path& p) {
    if (!p.empty() && p.is_relative()) p = (base / p).lexically_normal();
  };
  resolve(config.run_root);
  resolve(config.dialogues);
  resolve(config.embeddings);
  for (auto& [style, p] : config.style_corpora) resolve(p);
  return config;
}

std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stage) {
  return splitmix(global_seed ^ nn::fnv1a(stage.data(), stage.size()));
}

bool is_per_style(std::string_view stage) { return stage != "train-generator"; }

std::string stage_key(std::string_view stage, std::optional<Style> style) {
  std::string key(stage);
  if (style) key += "/" + style_name(*style);
  return key;
}

std::string config_hash(const PipelineConfig& config) {
  json j = to_json(config);
  j.erase("name");
  j.erase("run_root");
  const std::string dump = j.dump();
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << nn::fnv1a(dump.data(), dump.size());
  return os.str();
}

// ---------------------------------------------------------------------------
// manifest and lock

RunManifest RunManifest::load_or_create(const fs::path& run_dir, const std::string& hash) {
  RunManifest m;
  m.path_ = run_dir / "manifest.json";
  if (fs::exists(m.path_)) {
    m.data_ = read_json(m.path_);
  } else {
    m.data_ = json{{"config_hash", hash}, {"created_at", utc_now()}, {"stages", json::object()}};
  }
  if (!m.data_.contains("stages")) m.data_["stages"] = json::object();
  return m;
}

bool RunManifest::completed(const std::string& key) const { return data_.at("stages").contains(key); }

void RunManifest::mark_completed(const std::string& key, const json& outputs) {
  data_["stages"][key] = json{{"completed_at", utc_now()}, {"outputs", outputs}};
}

void RunManifest::invalidate_from(std::string_view stage, std::optional<Style> style) {
  const int from = stage_index(stage);
  auto& stages = data_["stages"];
  for (std::size_t i = static_cast<std::size_t>(from); i < kStages.size(); ++i) {
    if (!is_per_style(kStages[i])) {
      stages.erase(std::string(kStages[i]));
      continue;
    }
    for (Style s : corpus::kAllStyles) {
      // a generator rerun makes every style stale
      if (!style || *style == s || stage == "train-generator") stages.erase(stage_key(kStages[i], s));
    }
  }
}

void RunManifest::save() const { write_json(path_, data_); }

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
  fs::create_directories(run_dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) {
    throw std::runtime_error("run directory " + run_dir.string() + " is locked by another process (remove " +
                             path_.string() + " if it is stale)");
  }
  std::fclose(f);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------
// workspace

namespace {

struct RunPaths {
  fs::path root, corpora, checkpoints, predictions, reports;
  explicit RunPaths(const PipelineConfig& c)
      : root(c.run_dir()),
        corpora(root / "corpora"),
        checkpoints(root / "checkpoints"),
        predictions(root / "predictions"),
        reports(root / "reports") {}
  fs::path style_file(Style s) const { return corpora / ("style_" + style_name(s) + ".jsonl"); }
  fs::path ckpt(const std::string& stem) const { return checkpoints / (stem + ".ckpt"); }
};

std::vector<int> join_with(const corpus::Vocabulary& vocab, std::span<const std::string> parts, int sep) {
  std::vector<int> out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.push_back(sep);
    const auto ids = vocab.encode(corpus::tokenize(parts[i]));
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::vector<int> clip(std::vector<int> ids, int max_len) {
  if (ids.size() > static_cast<std::size_t>(max_len)) ids.resize(static_cast<std::size_t>(max_len));
  return ids;
}

}  // namespace

std::vector<const Dialogue*> Workspace::dialogues_in(const std::string& split_name) const {
  const std::vector<std::string>* ids = nullptr;
  if (split_name == "train") ids = &split.train;
  if (split_name == "valid") ids = &split.valid;
  if (split_name == "test") ids = &split.test;
  if (!ids) throw ValidationError("unknown split '" + split_name + "' (expected train, valid or test)");
  const std::set<std::string> wanted(ids->begin(), ids->end());
  std::vector<const Dialogue*> out;
  for (const auto& d : dialogues) {
    if (wanted.count(d.raw.id)) out.push_back(&d);
  }
  return out;
}

std::vector<int> Workspace::encode(std::string_view text) const { return vocab.encode(corpus::tokenize(text)); }

std::string Workspace::decode(std::span<const int> ids) const { return corpus::detokenize(vocab.decode(ids)); }

Workspace load_workspace(const PipelineConfig& config) {
  const RunPaths paths(config);
  if (!fs::exists(paths.corpora / "splits.json")) {
    throw ValidationError("run " + config.name + " is not prepared (run the prepare command first)");
  }
  Workspace ws;
  ws.vocab = corpus::Vocabulary::load(paths.corpora / "vocab.txt");
  const json splits = read_json(paths.corpora / "splits.json");
  ws.split.train = splits.at("train").get<std::vector<std::string>>();
  ws.split.valid = splits.at("valid").get<std::vector<std::string>>();
  ws.split.test = splits.at("test").get<std::vector<std::string>>();

  const auto kdg = corpus::load_kdg_corpus(paths.corpora / "dialogues.jsonl");
  const int max_len = config.generator_model.max_len;
  for (const auto& ex : kdg.records) {
    Dialogue d;
    d.raw = ex;
    d.knowledge = join_with(ws.vocab, ex.knowledge, kSep);
    d.context = join_with(ws.vocab, ex.context, kSep);
    d.response = clip(ws.encode(ex.response), max_len);
    d.source = d.knowledge;
    d.source.push_back(kCtx);
    d.source.insert(d.source.end(), d.context.begin(), d.context.end());
    if (d.source.size() > static_cast<std::size_t>(max_len)) {
      // keep the context end; the oldest knowledge tokens go first
      d.source.erase(d.source.begin(), d.source.end() - max_len);
    }
    ws.dialogues.push_back(std::move(d));
  }
  for (Style s : config.styles) {
    const auto loaded = corpus::load_style_corpus(paths.style_file(s));
    ws.style[s] = loaded.records;
    auto& toks = ws.style_tokens[s];
    for (const auto& sent : loaded.records) toks.push_back(clip(ws.encode(sent.text), config.dae_model.max_len));
    const auto& halves = splits.at("style_halves").at(style_name(s));
    ws.first_half[s] = halves.at("first").get<std::vector<std::string>>();
    ws.second_half[s] = halves.at("second").get<std::vector<std::string>>();
  }
  return ws;
}

// ---------------------------------------------------------------------------
// prepare

namespace {

void log_rejects(const std::string& file, const std::vector<corpus::LoadError>& errors) {
  for (const auto& e : errors) spdlog::warn("{}:{}: rejected: {}", file, e.line, e.message);
}

void prepare_impl(const PipelineConfig& config) {
  const RunPaths paths(config);
  if (!fs::exists(config.dialogues)) throw ValidationError("data.dialogues: file not found: " + config.dialogues.string());
  for (Style s : config.styles) {
    const auto& p = config.style_corpora.at(s);
    if (!fs::exists(p)) throw ValidationError("data.style." + style_name(s) + ": file not found: " + p.string());
  }
  if (!config.embeddings.empty() && !fs::exists(config.embeddings)) {
    throw ValidationError("data.embeddings: file not found: " + config.embeddings.string());
  }

  auto kdg = corpus::load_kdg_corpus(config.dialogues);
  log_rejects(config.dialogues.string(), kdg.errors);
  if (kdg.records.empty()) throw ValidationError("data.dialogues: no valid records in " + config.dialogues.string());
  if (config.knowledge_selection == "top1-bleu1") {
    for (auto& ex : kdg.records) ex.knowledge = {corpus::select_knowledge_top1(ex.knowledge, ex.response)};
  }

  std::vector<std::vector<std::string>> streams;
  for (const auto& ex : kdg.records) {
    for (const auto& k : ex.knowledge) streams.push_back(corpus::tokenize(k));
    for (const auto& u : ex.context) streams.push_back(corpus::tokenize(u));
    streams.push_back(corpus::tokenize(ex.response));
  }
  std::map<Style, std::vector<corpus::StyleSentence>> style;
  for (Style s : config.styles) {
    const auto& path = config.style_corpora.at(s);
    auto loaded = corpus::load_style_corpus(path);
    log_rejects(path.string(), loaded.errors);
    std::erase_if(loaded.records, [&](const corpus::StyleSentence& x) {
      if (x.style == s) return false;
      spdlog::warn("{}: sentence {} has style {}, skipped", path.string(), x.id, corpus::to_string(x.style));
      return true;
    });
    if (loaded.records.size() < 2) throw ValidationError("data.style." + style_name(s) + ": need at least 2 sentences");
    for (const auto& x : loaded.records) streams.push_back(corpus::tokenize(x.text));
    style[s] = std::move(loaded.records);
  }
  const auto vocab = corpus::build_vocab(streams, config.min_count);

  std::vector<std::string> ids;
  std::set<std::string> seen;
  for (const auto& ex : kdg.records) {
    if (!seen.insert(ex.id).second) throw ValidationError("data.dialogues: duplicate id '" + ex.id + "'");
    ids.push_back(ex.id);
  }
  const auto split = corpus::split_corpus(ids, config.valid_fraction, config.test_fraction,
                                          derive_seed(config.seed, "split"));
  json splits{{"train", split.train}, {"valid", split.valid}, {"test", split.test}, {"style_halves", json::object()}};
  for (Style s : config.styles) {
    const auto [first, second] = corpus::split_style_corpus(style[s], derive_seed(config.seed, "style-split/" + style_name(s)));
    json a = json::array(), b = json::array();
    for (const auto& x : first) a.push_back(x.id);
    for (const auto& x : second) b.push_back(x.id);
    splits["style_halves"][style_name(s)] = {{"first", a}, {"second", b}};
  }

  vocab.save(paths.corpora / "vocab.txt");
  write_json(paths.corpora / "splits.json", splits);
  corpus::write_kdg_corpus(paths.corpora / "dialogues.jsonl", kdg.records);
  for (Style s : config.styles) corpus::write_style_corpus(paths.style_file(s), style[s]);
  spdlog::info("prepared run {}: {} dialogues ({} train / {} valid / {} test), vocabulary {}", config.name,
               kdg.records.size(), split.train.size(), split.valid.size(), split.test.size(), vocab.size());
}

RunManifest open_manifest(const PipelineConfig& config, bool force) {
  const auto hash = config_hash(config);
  auto manifest = RunManifest::load_or_create(config.run_dir(), hash);
  if (manifest.config_hash() != hash) {
    if (!force) {
      throw ValidationError("run directory " + config.run_dir().string() + " was created with a different configuration (" +
                            manifest.config_hash() + " vs " + hash + "); use a new run name or --force");
    }
    spdlog::warn("configuration changed for run {}; continuing because of --force", config.name);
    manifest.set_config_hash(hash);
  }
  return manifest;
}

}  // namespace

void cmd_prepare(const PipelineConfig& config, bool force) {
  config.validate();
  RunLock lock(config.run_dir());
  auto manifest = open_manifest(config, force);
  prepare_impl(config);
  manifest.mark_completed("prepare");
  manifest.save();
}

// ---------------------------------------------------------------------------
// stages

namespace {

class Runner {
 public:
  Runner(const PipelineConfig& config, RunManifest& manifest, bool force)
      : config_(config), paths_(config), manifest_(manifest), force_(force), ws_(load_workspace(config)) {}

  const Workspace& workspace() const { return ws_; }

  nn::ModelConfig model_config(nn::ModelConfig m) const {
    m.vocab_size = ws_.vocab.size();
    return m;
  }

  nn::TrainHyper hyper(nn::TrainHyper h, const std::string& stage) const {
    h.seed = derive_seed(config_.seed, stage);
    return h;
  }

  void require(std::string_view stage, std::optional<Style> style) {
    const int idx = stage_index(stage);
    std::vector<std::string> missing;
    for (int i = 0; i < idx; ++i) {
      const auto prev = kStages[static_cast<std::size_t>(i)];
      const auto key = stage_key(prev, is_per_style(prev) ? style : std::nullopt);
      if (!manifest_.completed(key)) missing.push_back(key);
    }
    if (missing.empty()) return;
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    if (!force_) {
      throw ValidationError("stage " + stage_key(stage, style) + " requires completed stage(s): " + list);
    }
    spdlog::warn("running {} without completed prerequisites ({}) because of --force", stage_key(stage, style), list);
  }

  void run(std::string_view stage, std::optional<Style> style) {
    require(stage, style);
    const auto key = stage_key(stage, style);
    spdlog::info("stage {}", key);
    const auto t0 = std::chrono::steady_clock::now();
    json outputs;
    if (stage == "train-generator") outputs = train_generator();
    if (stage == "train-dae") outputs = train_dae(*style);
    if (stage == "build-triples") outputs = build_triples(*style);
    if (stage == "train-disentangler") outputs = train_disentangler(*style);
    if (stage == "build-templates") outputs = build_templates(*style);
    if (stage == "train-rewriter") outputs = train_rewriter(*style);
    if (stage == "train-rl") outputs = train_rl(*style);
    manifest_.invalidate_from(stage, style);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    outputs["seconds"] = secs;
    manifest_.mark_completed(key, outputs);
    manifest_.save();
    spdlog::info("stage {} done in {:.1f}s", key, secs);
  }

  // generator outputs are cached per split because the generator is frozen after its stage
  std::map<std::string, std::vector<int>> generator_outputs(const std::string& split) {
    const auto path = paths_.corpora / ("generator_" + split + ".jsonl");
    std::map<std::string, std::vector<int>> out;
    if (fs::exists(path)) {
      for_each_jsonl(path, [&](const json& j) {
        out[j.at("id").get<std::string>()] = ws_.vocab.encode(j.at("tokens").get<std::vector<std::string>>());
      });
      return out;
    }
    auto generator = nn::load_checkpoint(paths_.ckpt("generator"), ws_.vocab.size());
    auto file = open_output(path);
    for (const Dialogue* d : ws_.dialogues_in(split)) {
      auto hyp = nn::beam_decode(generator, d->source, config_.beam, generator.config().max_len);
      file << ordered_json{{"id", d->raw.id}, {"tokens", ws_.vocab.decode(hyp.tokens)}}.dump() << '\n';
      out[d->raw.id] = std::move(hyp.tokens);
    }
    return out;
  }

  EmbeddingTable embedder(Style s) const {
    if (!config_.embeddings.empty()) return EmbeddingTable::load_text(config_.embeddings);
    return EmbeddingTable::load_text(paths_.corpora / ("embeddings_" + style_name(s) + ".txt"));
  }

  disent::Disentangler final_disentangler(Style s) const {
    auto path = paths_.ckpt("disentangler_" + style_name(s));
    if (!fs::exists(path)) {
      if (!force_) throw std::runtime_error("missing checkpoint " + path.string() + " (run the train-rl stage)");
      path = paths_.ckpt("disentangler_ws_" + style_name(s));
      spdlog::warn("using the weakly supervised disentangler {} because of --force", path.string());
    }
    return disent::Disentangler::load(path, ws_.vocab.size());
  }

  nn::Seq2SeqModel rewriter(Style s) const {
    return nn::load_checkpoint(paths_.ckpt("rewriter_" + style_name(s)), ws_.vocab.size());
  }

 private:
  std::vector<std::vector<int>> half(Style s, bool first, std::vector<std::string>* ids = nullptr) const {
    const auto& wanted = first ? ws_.first_half.at(s) : ws_.second_half.at(s);
    const std::set<std::string> keep(wanted.begin(), wanted.end());
    std::vector<std::vector<int>> out;
    const auto& sents = ws_.style.at(s);
    for (std::size_t i = 0; i < sents.size(); ++i) {
      if (!keep.count(sents[i].id)) continue;
      out.push_back(ws_.style_tokens.at(s)[i]);
      if (ids) ids->push_back(sents[i].id);
    }
    return out;
  }

  std::vector<nn::TokenPair> generator_pairs(const std::string& split) const {
    std::vector<nn::TokenPair> pairs;
    for (const Dialogue* d : ws_.dialogues_in(split)) pairs.push_back({d->source, d->response});
    return pairs;
  }

  json train_generator() {
    const auto model_cfg = model_config(config_.generator_model);
    const auto h = hyper(config_.generator_train, "train-generator");
    nn::Seq2SeqModel model(model_cfg, h.seed);
    const auto train = generator_pairs("train");
    const auto valid = generator_pairs("valid");
    const auto report = nn::fit_seq2seq(model, train, valid, h);
    nn::save_checkpoint(model, paths_.ckpt("generator"), {report.best_epoch, report.best_valid_loss, json(report)});
    write_json(paths_.reports / "train-generator.json", json(report));
    for (const char* split : {"train", "valid", "test"}) fs::remove(paths_.corpora / (std::string("generator_") + split + ".jsonl"));
    return {{"checkpoint", paths_.ckpt("generator").string()}, {"best_valid_loss", report.best_valid_loss}};
  }

  json train_dae(Style s) {
    const auto name = style_name(s);
    const auto sentences = half(s, true);
    nn::TrainReport report;
    auto model = disent::train_dae(sentences, model_config(config_.dae_model), hyper(config_.dae_train, "train-dae/" + name),
                                   &report);
    nn::save_checkpoint(model, paths_.ckpt("dae_" + name), {report.best_epoch, report.best_valid_loss, json(report)});
    write_json(paths_.reports / ("train-dae_" + name + ".json"), json(report));
    const auto table = EmbeddingTable::from_matrix(model.params().at("embed").value, ws_.vocab, "dae:" + name);
    table.save_text(paths_.corpora / ("embeddings_" + name + ".txt"));
    return {{"checkpoint", paths_.ckpt("dae_" + name).string()}, {"best_valid_loss", report.best_valid_loss}};
  }

  json build_triples(Style s) {
    const auto name = style_name(s);
    auto dae = nn::load_checkpoint(paths_.ckpt("dae_" + name), ws_.vocab.size());
    const auto table = embedder(s);
    std::vector<std::string> ids;
    const auto sentences = half(s, false, &ids);
    std::vector<disent::DistanceSequence> seqs;
    auto dist_file = open_output(paths_.corpora / ("distances_" + name + ".jsonl"));
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      if (sentences[i].size() < 2) {
        spdlog::warn("sentence {} has fewer than 2 tokens; no distances", ids[i]);
        continue;
      }
      auto seq = disent::leave_one_out_distances(dae, sentences[i], ws_.vocab, table);
      seq.id = ids[i];
      dist_file << ordered_json{{"id", seq.id},
                                {"tokens", ws_.vocab.decode(seq.tokens)},
                                {"predictions", ws_.vocab.decode(seq.predictions)},
                                {"distances", seq.distances}}
                       .dump()
                << '\n';
      seqs.push_back(std::move(seq));
    }
    const auto triples = disent::build_ranking_triples(seqs, config_.z, derive_seed(config_.seed, "build-triples/" + name));
    auto triple_file = open_output(paths_.corpora / ("triples_" + name + ".jsonl"));
    for (const auto& t : triples) {
      triple_file << ordered_json{{"id", seqs[t.sentence].id}, {"i", t.i}, {"j", t.j}, {"y", t.y}}.dump() << '\n';
    }
    return {{"sentences", seqs.size()}, {"triples", triples.size()}};
  }

  std::vector<disent::DistanceSequence> load_distances(Style s) const {
    std::vector<disent::DistanceSequence> seqs;
    for_each_jsonl(paths_.corpora / ("distances_" + style_name(s) + ".jsonl"), [&](const json& j) {
      disent::DistanceSequence d;
      d.id = j.at("id").get<std::string>();
      d.tokens = ws_.vocab.encode(j.at("tokens").get<std::vector<std::string>>());
      d.predictions = ws_.vocab.encode(j.at("predictions").get<std::vector<std::string>>());
      d.distances = j.at("distances").get<std::vector<double>>();
      seqs.push_back(std::move(d));
    });
    return seqs;
  }

  json train_disentangler(Style s) {
    const auto name = style_name(s);
    const auto seqs = load_distances(s);
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < seqs.size(); ++i) index[seqs[i].id] = i;
    std::vector<disent::RankingTriple> triples;
    for_each_jsonl(paths_.corpora / ("triples_" + name + ".jsonl"), [&](const json& j) {
      triples.push_back({index.at(j.at("id").get<std::string>()), j.at("i").get<int>(), j.at("j").get<int>(),
                         j.at("y").get<int>()});
    });
    const auto h = hyper(config_.disentangler_train, "train-disentangler/" + name);
    disent::Disentangler model(model_config(config_.disentangler_model), h.seed);
    const auto report = disent::train_disentangler_ws(model, seqs, triples, h, config_.margin);
    model.save(paths_.ckpt("disentangler_ws_" + name), json(report));
    write_json(paths_.reports / ("train-disentangler_" + name + ".json"), json(report));
    return {{"checkpoint", paths_.ckpt("disentangler_ws_" + name).string()}, {"valid_accuracy", report.valid_accuracy}};
  }

  json build_templates(Style s) {
    const auto name = style_name(s);
    const auto model = disent::Disentangler::load(paths_.ckpt("disentangler_ws_" + name), ws_.vocab.size());
    std::vector<std::string> ids;
    for (const auto& x : ws_.style.at(s)) ids.push_back(x.id);
    const auto pairs = disent::build_template_corpus(model, ids, ws_.style_tokens.at(s), config_.replace_rate);
    auto file = open_output(paths_.corpora / ("templates_" + name + ".jsonl"));
    for (const auto& p : pairs) {
      std::vector<std::string> actions;
      for (auto a : p.templ.actions) actions.emplace_back(a == disent::Action::kReplace ? "replace" : "retain");
      file << ordered_json{{"id", p.id},
                           {"template", ws_.vocab.decode(p.templ.tokens)},
                           {"target", ws_.vocab.decode(p.target)},
                           {"actions", actions}}
                  .dump()
           << '\n';
    }
    return {{"templates", pairs.size()}};
  }

  json train_rewriter(Style s) {
    const auto name = style_name(s);
    std::vector<disent::TemplatePair> pairs;
    for_each_jsonl(paths_.corpora / ("templates_" + name + ".jsonl"), [&](const json& j) {
      disent::TemplatePair p;
      p.id = j.at("id").get<std::string>();
      p.templ.tokens = ws_.vocab.encode(j.at("template").get<std::vector<std::string>>());
      p.target = ws_.vocab.encode(j.at("target").get<std::vector<std::string>>());
      pairs.push_back(std::move(p));
    });
    nn::TrainReport report;
    std::optional<nn::Seq2SeqModel> init;
    if (config_.rewriter_from_generator) init = nn::load_checkpoint(paths_.ckpt("generator"), ws_.vocab.size());
    auto model = rewriter::train_rewriter(pairs, model_config(config_.rewriter_model),
                                          hyper(config_.rewriter_train, "train-rewriter/" + name), &report,
                                          init ? &*init : nullptr);
    nn::save_checkpoint(model, paths_.ckpt("rewriter_" + name), {report.best_epoch, report.best_valid_loss, json(report)});
    write_json(paths_.reports / ("train-rewriter_" + name + ".json"), json(report));
    return {{"checkpoint", paths_.ckpt("rewriter_" + name).string()}, {"best_valid_loss", report.best_valid_loss}};
  }

  std::vector<rl::RlExample> rl_examples(const std::string& split, std::size_t limit) {
    const auto outputs = generator_outputs(split);
    std::vector<rl::RlExample> out;
    for (const Dialogue* d : ws_.dialogues_in(split)) {
      if (out.size() >= limit) break;
      const auto& gen = outputs.at(d->raw.id);
      if (gen.empty()) continue;
      out.push_back({d->raw.id, clip(gen, config_.disentangler_model.max_len), d->context, d->knowledge, d->response});
    }
    return out;
  }

  json train_rl(Style s) {
    const auto name = style_name(s);
    // the style classifier serves as both reward and evaluation meter
    std::vector<std::vector<int>> negatives;
    for (const Dialogue* d : ws_.dialogues_in("train")) negatives.push_back(d->response);
    rewards::ClassifierReport cls_report;
    const auto classifier = rewards::train_style_classifier(
        ws_.style_tokens.at(s), negatives, s, model_config(config_.classifier_model),
        hyper(config_.classifier_train, "train-classifier/" + name), force_, &cls_report);
    classifier.save(paths_.ckpt("classifier_" + name));
    write_json(paths_.reports / ("train-classifier_" + name + ".json"), json(cls_report));

    const auto train = rl_examples("train", std::numeric_limits<std::size_t>::max());
    const auto valid = rl_examples("valid", static_cast<std::size_t>(config_.rl_valid_examples));
    auto model = disent::Disentangler::load(paths_.ckpt("disentangler_ws_" + name), ws_.vocab.size());
    auto rewriter_model = rewriter(s);
    const auto table = embedder(s);
    const rewards::RewardModel reward_model{&ws_.vocab, &table, &classifier, config_.reward_weights};
    auto cfg = config_.rl;
    cfg.seed = derive_seed(config_.seed, "train-rl/" + name);
    cfg.replace_rate = config_.replace_rate;
    auto log = open_output(paths_.reports / ("train-rl_" + name + ".jsonl"));
    const auto report = rl::train_rl(train, valid, model, rewriter_model, reward_model, cfg,
                                     [&](const rl::StepStats& st) { log << json(st).dump() << '\n'; });
    model.save(paths_.ckpt("disentangler_" + name), {{"best_step", report.best_step}});
    json summary = report;
    summary.erase("steps");
    write_json(paths_.reports / ("train-rl_" + name + ".json"), summary);
    return {{"checkpoint", paths_.ckpt("disentangler_" + name).string()},
            {"classifier_accuracy", cls_report.heldout_accuracy},
            {"best_validation_reward", report.best_validation_reward}};
  }

  const PipelineConfig& config_;
  RunPaths paths_;
  RunManifest& manifest_;
  bool force_;
  Workspace ws_;
};

}  // namespace

RunManifest cmd_pipeline(const PipelineConfig& config, const PipelineRequest& request) {
  config.validate();
  RunLock lock(config.run_dir());
  auto manifest = open_manifest(config, request.force);
  if (!manifest.completed("prepare")) {
    prepare_impl(config);
    manifest.mark_completed("prepare");
    manifest.save();
  }
  const auto styles = request.styles.empty() ? config.styles : request.styles;
  for (Style s : styles) {
    if (std::find(config.styles.begin(), config.styles.end(), s) == config.styles.end()) {
      throw ValidationError("style " + style_name(s) + " is not configured for this run");
    }
  }
  std::vector<std::string> stages = request.stages;
  const bool resume = stages.empty();
  if (resume) stages.assign(kStages.begin(), kStages.end());
  std::sort(stages.begin(), stages.end(), [](const auto& a, const auto& b) { return stage_index(a) < stage_index(b); });
  stages.erase(std::unique(stages.begin(), stages.end()), stages.end());

  Runner runner(config, manifest, request.force);
  for (const auto& stage : stages) {
    if (!is_per_style(stage)) {
      if (resume && manifest.completed(stage)) continue;
      runner.run(stage, std::nullopt);
      continue;
    }
    for (Style s : styles) {
      if (resume && manifest.completed(stage_key(stage, s))) continue;
      runner.run(stage, s);
    }
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// generation and reports

std::filesystem::path cmd_generate(const PipelineConfig& config, Style style, const std::string& split, bool force) {
  config.validate();
  RunLock lock(config.run_dir());
  auto manifest = open_manifest(config, force);
  const auto name = style_name(style);
  if (!manifest.completed(stage_key("train-rl", style)) && !force) {
    throw ValidationError("generate requires completed stage " + stage_key("train-rl", style));
  }
  Runner runner(config, manifest, force);
  const auto& ws = runner.workspace();
  const auto dialogues = ws.dialogues_in(split);
  const auto generated = runner.generator_outputs(split);
  auto model = runner.final_disentangler(style);
  auto rewriter_model = runner.rewriter(style);
  const RunPaths paths(config);
  const auto out_path = paths.predictions / (name + "_" + split + ".jsonl");
  auto out = open_output(out_path);
  const int max_len = model.config().max_len;
  for (const Dialogue* d : dialogues) {
    auto response = clip(generated.at(d->raw.id), max_len);
    disent::TokenScores scores;
    disent::Template templ;
    rewriter::StyledResponse styled;
    if (!response.empty()) {
      scores = model.score(response, d->context, d->knowledge, true);
      templ = disent::extract_template(response, scores.scores, config.replace_rate);
      styled = rewriter::rewrite(rewriter_model, templ.tokens, config.beam, style, d->raw.id);
    }
    out << ordered_json{{"id", d->raw.id},
                        {"style", name},
                        {"generator_response", ws.decode(response)},
                        {"scores", scores.scores},
                        {"template", ws.decode(templ.tokens)},
                        {"styled_response", ws.decode(styled.tokens)},
                        {"logprob", styled.log_prob}}
               .dump()
        << '\n';
  }
  spdlog::info("wrote {} predictions to {}", dialogues.size(), out_path.string());
  return out_path;
}

std::vector<Prediction> read_predictions(const fs::path& path) {
  std::vector<Prediction> out;
  for_each_jsonl(path, [&](const json& j) {
    out.push_back({j.at("id").get<std::string>(), j.at("style").get<std::string>(),
                   j.at("generator_response").get<std::string>(), j.at("template").get<std::string>(),
                   j.at("styled_response").get<std::string>(), j.at("logprob").get<double>()});
  });
  return out;
}

metrics::EvalReport evaluate_run(std::span<const Prediction> predictions,
                                 const std::map<std::string, std::string>& references) {
  if (predictions.empty()) throw ValidationError("evaluate: empty prediction file");
  std::vector<std::string> unresolved;
  for (const auto& p : predictions) {
    if (!references.count(p.id)) unresolved.push_back(p.id);
  }
  if (!unresolved.empty()) {
    std::string list;
    for (const auto& id : unresolved) list += (list.empty() ? "" : ", ") + id;
    throw ValidationError("evaluate: prediction ids without a reference: " + list);
  }
  std::vector<metrics::Tokens> styled, generated, refs;
  for (const auto& p : predictions) {
    styled.push_back(corpus::tokenize(p.styled_response));
    generated.push_back(corpus::tokenize(p.generator_response));
    refs.push_back(corpus::tokenize(references.at(p.id)));
  }
  auto report = metrics::score_corpus(styled, refs);
  report.style = predictions.front().style;
  double gen_f1 = 0.0;
  for (std::size_t i = 0; i < generated.size(); ++i) gen_f1 += metrics::unigram_f1(generated[i], refs[i]);
  report.generator_f1 = gen_f1 / static_cast<double>(generated.size());
  report.f1_drop = report.generator_f1 - report.f1;
  report.f1_relative_drop = report.generator_f1 > 0.0 ? report.f1_drop / report.generator_f1 : 0.0;
  return report;
}

namespace {

double mean_intensity(const rewards::StyleClassifier& classifier, const Workspace& ws,
                      const std::vector<std::string>& texts) {
  std::vector<std::vector<int>> ids;
  for (const auto& t : texts) {
    auto enc = ws.encode(t);
    if (enc.empty()) enc.push_back(kUnk);
    ids.push_back(std::move(enc));
  }
  return rewards::mean_style_intensity(classifier, ids);
}

std::map<std::string, std::string> reference_map(const Workspace& ws, const std::string& split) {
  std::map<std::string, std::string> refs;
  for (const Dialogue* d : ws.dialogues_in(split)) refs[d->raw.id] = d->raw.response;
  return refs;
}

}  // namespace

std::vector<metrics::EvalReport> cmd_evaluate(const PipelineConfig& config, const std::string& split) {
  config.validate();
  RunLock lock(config.run_dir());
  const RunPaths paths(config);
  const auto ws = load_workspace(config);
  const auto refs = reference_map(ws, split);
  std::vector<metrics::EvalReport> reports;
  std::map<Style, std::map<std::string, metrics::Tokens>> outputs;
  for (Style s : config.styles) {
    const auto path = paths.predictions / (style_name(s) + "_" + split + ".jsonl");
    if (!fs::exists(path)) continue;
    const auto preds = read_predictions(path);
    const auto classifier = rewards::StyleClassifier::load(paths.ckpt("classifier_" + style_name(s)), ws.vocab.size());
    auto report = evaluate_run(preds, refs);
    std::vector<std::string> styled, generated;
    for (const auto& p : preds) {
      styled.push_back(p.styled_response);
      generated.push_back(p.generator_response);
      outputs[s][p.id] = corpus::tokenize(p.styled_response);
    }
    report.style_intensity = mean_intensity(classifier, ws, styled);
    report.generator_style_intensity = mean_intensity(classifier, ws, generated);
    reports.push_back(std::move(report));
  }
  if (reports.empty()) throw ValidationError("evaluate: no prediction files for split '" + split + "' (run generate first)");
  if (outputs.size() == corpus::kAllStyles.size()) {
    std::vector<std::vector<metrics::Tokens>> groups;
    std::vector<std::string> ids;
    for (const auto& [id, tokens] : outputs.begin()->second) {
      std::vector<metrics::Tokens> group;
      for (Style s : corpus::kAllStyles) {
        auto it = outputs[s].find(id);
        if (it != outputs[s].end()) group.push_back(it->second);
      }
      groups.push_back(std::move(group));
      ids.push_back(id);
    }
    const double d1 = metrics::inner_distinct_n(groups, 1, ids);
    const double d2 = metrics::inner_distinct_n(groups, 2, ids);
    for (auto& r : reports) {
      r.inner_distinct1 = d1;
      r.inner_distinct2 = d2;
    }
  }
  json j = json::array();
  for (const auto& r : reports) j.push_back(r);
  write_json(paths.reports / ("eval_" + split + ".json"), j);
  auto table = open_output(paths.reports / ("eval_" + split + ".txt"));
  table << metrics::format_table(reports);
  return reports;
}

std::vector<SweepRow> cmd_sweep_pr(const PipelineConfig& config, std::span<const double> replace_rates,
                                   const std::string& split) {
  config.validate();
  if (replace_rates.empty()) throw ValidationError("sweep-pr: no replace rates given");
  for (double r : replace_rates) {
    if (!(r > 0.0 && r < 100.0)) throw ValidationError("sweep-pr: replace rate " + std::to_string(r) + " is outside (0, 100)");
  }
  RunLock lock(config.run_dir());
  auto manifest = open_manifest(config, false);
  for (Style s : config.styles) {
    if (!manifest.completed(stage_key("train-rl", s))) {
      throw ValidationError("sweep-pr requires completed stage " + stage_key("train-rl", s));
    }
  }
  Runner runner(config, manifest, false);
  const auto& ws = runner.workspace();
  const auto dialogues = ws.dialogues_in(split);
  const auto generated = runner.generator_outputs(split);

  struct StyleModels {
    disent::Disentangler model;
    nn::Seq2SeqModel rewriter;
    std::vector<std::vector<double>> scores;  // per dialogue
  };
  std::map<Style, StyleModels> models;
  for (Style s : config.styles) {
    auto& m = models[s];
    m.model = runner.final_disentangler(s);
    m.rewriter = runner.rewriter(s);
    for (const Dialogue* d : dialogues) {
      const auto& resp = generated.at(d->raw.id);
      m.scores.push_back(resp.empty() ? std::vector<double>{} : m.model.score(resp, d->context, d->knowledge, true).scores);
    }
  }

  std::vector<SweepRow> rows;
  for (double rate : replace_rates) {
    SweepRow row;
    row.replace_rate = rate;
    std::map<Style, std::vector<metrics::Tokens>> outputs;
    for (Style s : config.styles) {
      auto& m = models[s];
      double f1 = 0.0;
      for (std::size_t i = 0; i < dialogues.size(); ++i) {
        const auto& resp = generated.at(dialogues[i]->raw.id);
        metrics::Tokens hyp;
        if (!resp.empty()) {
          const auto templ = disent::extract_template(resp, m.scores[i], rate);
          hyp = ws.vocab.decode(rewriter::rewrite(m.rewriter, templ.tokens, config.beam, s).tokens);
        }
        f1 += metrics::unigram_f1(hyp, corpus::tokenize(dialogues[i]->raw.response));
        outputs[s].push_back(std::move(hyp));
      }
      row.style_f1[style_name(s)] = dialogues.empty() ? 0.0 : f1 / static_cast<double>(dialogues.size());
      row.f1 += row.style_f1[style_name(s)] / static_cast<double>(config.styles.size());
    }
    if (outputs.size() == corpus::kAllStyles.size()) {
      std::vector<std::vector<metrics::Tokens>> groups;
      for (std::size_t i = 0; i < dialogues.size(); ++i) {
        std::vector<metrics::Tokens> g;
        for (Style s : corpus::kAllStyles) g.push_back(outputs[s][i]);
        groups.push_back(std::move(g));
      }
      row.inner_distinct1 = metrics::inner_distinct_n(groups, 1);
      row.inner_distinct2 = metrics::inner_distinct_n(groups, 2);
    }
    spdlog::info("sweep P_r={} F1={:.4f}", rate, row.f1);
    rows.push_back(std::move(row));
  }

  const RunPaths paths(config);
  json j = json::array();
  for (const auto& r : rows) {
    j.push_back({{"replace_rate", r.replace_rate},
                 {"f1", r.f1},
                 {"style_f1", r.style_f1},
                 {"inner_distinct1", r.inner_distinct1 ? json(*r.inner_distinct1) : json()},
                 {"inner_distinct2", r.inner_distinct2 ? json(*r.inner_distinct2) : json()}});
  }
  write_json(paths.reports / ("sweep_pr_" + split + ".json"), j);
  auto table = open_output(paths.reports / ("sweep_pr_" + split + ".txt"));
  table << format_sweep(rows);
  return rows;
}

std::string format_sweep(std::span<const SweepRow> rows) {
  std::ostringstream os;
  os << std::setw(8) << "P_r" << std::setw(10) << "F1" << std::setw(10) << "iD-1" << std::setw(10) << "iD-2" << "\n"
     << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << std::setw(8) << std::setprecision(1) << r.replace_rate << std::setprecision(4) << std::setw(10) << r.f1;
    for (const auto& v : {r.inner_distinct1, r.inner_distinct2}) {
      if (v) {
        os << std::setw(10) << *v;
      } else {
        os << std::setw(10) << "-";
      }
    }
    os << "\n";
  }
  return os.str();
}

std::vector<TokenScore> cmd_style_tokens(const PipelineConfig& config, Style style, std::size_t top_n) {
  config.validate();
  RunLock lock(config.run_dir());
  auto manifest = open_manifest(config, false);
  const RunPaths paths(config);
  const auto ws = load_workspace(config);
  const auto name = style_name(style);
  if (!ws.style.count(style)) throw ValidationError("style " + name + " is not configured for this run");
  auto path = paths.ckpt("disentangler_" + name);
  if (!fs::exists(path)) path = paths.ckpt("disentangler_ws_" + name);
  if (!fs::exists(path)) throw ValidationError("style-tokens requires completed stage " + stage_key("train-disentangler", style));
  const auto model = disent::Disentangler::load(path, ws.vocab.size());

  std::map<int, std::pair<double, std::size_t>> acc;
  for (const auto& tokens : ws.style_tokens.at(style)) {
    if (tokens.empty()) continue;
    const auto scores = model.score_alpha(tokens).scores;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      auto& [sum, n] = acc[tokens[i]];
      sum += scores[i];
      ++n;
    }
  }
  std::vector<TokenScore> out;
  for (const auto& [id, v] : acc) out.push_back({ws.vocab.token(id), v.first / static_cast<double>(v.second), v.second});
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.mean_score > b.mean_score; });
  if (out.size() > top_n) out.resize(top_n);
  json j = json::array();
  for (const auto& t : out) j.push_back({{"token", t.token}, {"mean_score", t.mean_score}, {"count", t.count}});
  write_json(paths.reports / ("style_tokens_" + name + ".json"), j);
  return out;
}

}  // namespace dtr::pipeline
