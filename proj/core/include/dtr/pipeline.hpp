#pragma once

// Run orchestration: configuration, run directories, the staged training
// pipeline and the generate / evaluate / sweep / style-token reports.

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtr/corpus.hpp"
#include "dtr/metrics.hpp"
#include "dtr/rewards.hpp"
#include "dtr/rl.hpp"
#include "dtr/seq2seq.hpp"
#include "dtr/transformer.hpp"

namespace dtr::pipeline {

/// Bad configuration, bad arguments or an unmet stage dependency.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PipelineConfig {
  std::string name = "default";
  std::uint64_t seed = 1;
  std::filesystem::path run_root = "runs";
  std::filesystem::path dialogues;
  std::map<corpus::Style, std::filesystem::path> style_corpora;
  std::filesystem::path embeddings;  // optional word2vec text file
  std::string knowledge_selection = "top1-bleu1";  // or "all": keep every sentence
  int min_count = 1;
  double valid_fraction = 0.1;
  double test_fraction = 0.1;

  nn::ModelConfig generator_model, dae_model, disentangler_model, rewriter_model, classifier_model;
  bool rewriter_from_generator = false;  // warm start in place of a pretrained backbone
  nn::TrainHyper generator_train, dae_train, disentangler_train, rewriter_train, classifier_train;

  double replace_rate = 25.0;
  int z = 10;
  double margin = 0.2;
  int beam = 5;
  rl::RlConfig rl;
  rewards::RewardWeights reward_weights;
  int rl_valid_examples = 64;

  std::vector<corpus::Style> styles{corpus::kAllStyles.begin(), corpus::kAllStyles.end()};

  /// Throws ValidationError naming the offending key.
  void validate() const;
  std::filesystem::path run_dir() const { return run_root / name; }
};

nlohmann::json to_json(const PipelineConfig& config);
PipelineConfig config_from_json(const nlohmann::json& j);

/// Applies DTR_* environment variables: DTR_SEED=3 sets "seed",
/// DTR_RL__STEPS=10 sets rl.steps. Values are parsed as JSON when possible.
void apply_env_overrides(nlohmann::json& j);

/// Reads a JSON config file and applies environment overrides. Relative
/// paths resolve against the config file directory.
PipelineConfig load_config(const std::filesystem::path& path);

/// Seed of a named stage, derived from the global seed.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stage);

inline constexpr std::array<std::string_view, 7> kStages = {
    "train-generator", "train-dae", "build-triples", "train-disentangler", "build-templates", "train-rewriter",
    "train-rl"};

bool is_per_style(std::string_view stage);

/// Stage completion record stored as manifest.json in the run directory.
class RunManifest {
 public:
  static RunManifest load_or_create(const std::filesystem::path& run_dir, const std::string& config_hash);

  bool completed(const std::string& key) const;
  void mark_completed(const std::string& key, const nlohmann::json& outputs = nlohmann::json::object());
  /// Clears `key` and every later stage for the same style.
  void invalidate_from(std::string_view stage, std::optional<corpus::Style> style);
  std::string config_hash() const { return data_.value("config_hash", ""); }
  void set_config_hash(const std::string& hash) { data_["config_hash"] = hash; }
  void save() const;
  const nlohmann::json& data() const { return data_; }

 private:
  std::filesystem::path path_;
  nlohmann::json data_;
};

std::string stage_key(std::string_view stage, std::optional<corpus::Style> style);
std::string config_hash(const PipelineConfig& config);

/// Exclusive lock on a run directory for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct Dialogue {
  corpus::DialogueExample raw;
  std::vector<int> source;  // knowledge SEP ... CTX context SEP ...
  std::vector<int> context;
  std::vector<int> knowledge;
  std::vector<int> response;
};

/// Tokenized corpora of a prepared run.
struct Workspace {
  corpus::Vocabulary vocab;
  std::vector<Dialogue> dialogues;
  corpus::CorpusSplit split;
  std::map<corpus::Style, std::vector<corpus::StyleSentence>> style;
  std::map<corpus::Style, std::vector<std::vector<int>>> style_tokens;
  std::map<corpus::Style, std::vector<std::string>> first_half;   // D_s1 ids
  std::map<corpus::Style, std::vector<std::string>> second_half;  // D_s2 ids

  std::vector<const Dialogue*> dialogues_in(const std::string& split_name) const;
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;
};

Workspace load_workspace(const PipelineConfig& config);

/// Writes vocabulary, splits and tokenized corpora into <run>/corpora.
void cmd_prepare(const PipelineConfig& config, bool force);

struct PipelineRequest {
  std::vector<std::string> stages;  // empty = all, in order
  std::vector<corpus::Style> styles;  // empty = config styles
  bool force = false;
};

/// Runs the requested stages in dependency order. Without explicit stages,
/// completed ones are skipped (resume).
RunManifest cmd_pipeline(const PipelineConfig& config, const PipelineRequest& request);

/// Predictions JSONL for one style over a split ("train", "valid" or "test").
std::filesystem::path cmd_generate(const PipelineConfig& config, corpus::Style style, const std::string& split,
                                   bool force = false);

struct Prediction {
  std::string id;
  std::string style;
  std::string generator_response;
  std::string templ;
  std::string styled_response;
  double log_prob = 0.0;
};

std::vector<Prediction> read_predictions(const std::filesystem::path& path);

/// Metrics of one prediction file against references; generator F1 and the
/// drop are computed on the same references.
metrics::EvalReport evaluate_run(std::span<const Prediction> predictions,
                                 const std::map<std::string, std::string>& references);

/// Evaluates every style with a predictions file for `split`; adds
/// inner-Distinct when all three styles are present. Writes reports.
std::vector<metrics::EvalReport> cmd_evaluate(const PipelineConfig& config, const std::string& split);

struct SweepRow {
  double replace_rate = 0.0;
  double f1 = 0.0;  // mean over styles
  std::map<std::string, double> style_f1;
  std::optional<double> inner_distinct1;
  std::optional<double> inner_distinct2;
};

std::vector<SweepRow> cmd_sweep_pr(const PipelineConfig& config, std::span<const double> replace_rates,
                                   const std::string& split);
std::string format_sweep(std::span<const SweepRow> rows);

struct TokenScore {
  std::string token;
  double mean_score = 0.0;
  std::size_t count = 0;
};

/// Highest mean-scoring token types over the style corpus.
std::vector<TokenScore> cmd_style_tokens(const PipelineConfig& config, corpus::Style style, std::size_t top_n);

}  // namespace dtr::pipeline
