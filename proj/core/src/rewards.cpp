#include "dtr/rewards.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "dtr/checkpoint.hpp"
#include "dtr/special_tokens.hpp"

namespace dtr::rewards {

using nn::Graph;
using nn::Matrix;
using nn::Rng;
using nn::Var;

namespace {

bool is_control(std::string_view tok) {
  return std::find(kSpecialTokens.begin(), kSpecialTokens.end(), tok) != kSpecialTokens.end();
}

std::optional<nn::RowVector> mean_vector(const EmbeddingTable& table, std::span<const std::string> tokens) {
  nn::RowVector sum = nn::RowVector::Zero(table.dim());
  int n = 0;
  for (const auto& t : tokens) {
    if (is_control(t) || !table.contains(t)) continue;
    sum += table.vector(t);
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::vector<int> clip_length(std::span<const int> tokens, int max_len) {
  const auto n = std::min(tokens.size(), static_cast<std::size_t>(max_len));
  return {tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n)};
}

}  // namespace

double semantic_similarity(const EmbeddingTable& table, std::span<const std::string> a,
                           std::span<const std::string> b) {
  const auto va = mean_vector(table, a);
  const auto vb = mean_vector(table, b);
  if (!va || !vb) {
    spdlog::warn("semantic_similarity: no embeddable tokens on one side, similarity set to 0");
    return 0.0;
  }
  return cosine(*va, *vb);
}

void to_json(nlohmann::json& j, const ClassifierReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"valid_loss", e.valid_loss}});
  j = nlohmann::json{{"positives", r.positives},
                     {"negatives", r.negatives},
                     {"heldout_accuracy", r.heldout_accuracy},
                     {"best_valid_loss", r.best_valid_loss},
                     {"best_epoch", r.best_epoch},
                     {"epochs", epochs}};
}

StyleClassifier::StyleClassifier(const nn::ModelConfig& config, corpus::Style style, std::uint64_t seed)
    : config_(config), style_(style) {
  config_.validate();
  Rng rng(seed);
  encoder_ = nn::TokenEncoder(config_, "cls.", params_, rng);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(config_.hidden)));
  Matrix w(config_.hidden, 1);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  params_.add("cls.w", std::move(w));
  params_.add("cls.b", Matrix::Zero(1, 1));
}

Var StyleClassifier::logit(Graph& g, std::span<const int> tokens, Rng* dropout_rng) {
  Var h = g.mean_rows(encoder_.forward(g, params_, tokens, dropout_rng));
  return g.add(g.matmul(h, g.param(params_.at("cls.w"))), g.param(params_.at("cls.b")));
}

double StyleClassifier::probability(std::span<const int> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("style classifier: empty input");
  const auto ids = clip_length(tokens, config_.max_len);
  Graph g(false);
  const double z = g.value(const_cast<StyleClassifier&>(*this).logit(g, ids, nullptr))(0, 0);
  // keep the output strictly inside (0, 1) even for saturated logits
  return std::clamp(1.0 / (1.0 + std::exp(-z)), 1e-12, 1.0 - 1e-12);
}

void StyleClassifier::save(const std::filesystem::path& path) const {
  nn::TensorArchive ar;
  ar.kind = "style-classifier";
  ar.header["config"] = config_;
  ar.header["style"] = std::string(corpus::to_string(style_));
  ar.header["heldout_accuracy"] = heldout_accuracy_;
  nn::store_parameters(ar, params_);
  nn::write_archive(path, ar);
}

StyleClassifier StyleClassifier::load(const std::filesystem::path& path, int expected_vocab_size) {
  const auto ar = nn::read_archive(path);
  if (ar.kind != "style-classifier") {
    throw std::runtime_error("checkpoint kind '" + ar.kind + "' is not style-classifier: " + path.string());
  }
  const auto config = ar.header.at("config").get<nn::ModelConfig>();
  if (expected_vocab_size > 0 && config.vocab_size != expected_vocab_size) {
    throw std::runtime_error("checkpoint vocab_size " + std::to_string(config.vocab_size) +
                             " does not match vocabulary size " + std::to_string(expected_vocab_size) + ": " +
                             path.string());
  }
  const auto style = corpus::parse_style(ar.header.at("style").get<std::string>());
  if (!style) throw std::runtime_error("classifier checkpoint has an unknown style: " + path.string());
  StyleClassifier c(config, *style, 0);
  nn::restore_parameters(ar, c.params_);
  c.heldout_accuracy_ = ar.header.value("heldout_accuracy", 0.0);
  return c;
}

namespace {

struct Labelled {
  std::vector<int> tokens;
  double label = 0.0;
};

double bce_loss(StyleClassifier& model, std::span<const Labelled> data, double* accuracy) {
  std::vector<double> losses;
  std::size_t correct = 0;
  for (const auto& ex : data) {
    const double p = model.probability(ex.tokens);
    losses.push_back(-(ex.label * std::log(p) + (1.0 - ex.label) * std::log(1.0 - p)));
    if ((p >= 0.5) == (ex.label > 0.5)) ++correct;
  }
  if (accuracy) *accuracy = data.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
  std::sort(losses.begin(), losses.end());
  return data.empty() ? 0.0 : std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(data.size());
}

}  // namespace

StyleClassifier train_style_classifier(std::span<const std::vector<int>> positives,
                                       std::span<const std::vector<int>> negatives, corpus::Style style,
                                       const nn::ModelConfig& config, const nn::TrainHyper& hyper, bool force,
                                       ClassifierReport* report) {
  if (positives.empty() || negatives.empty()) {
    throw std::invalid_argument("train_style_classifier: both classes need at least one example");
  }
  hyper.validate(config.max_len);
  Rng split_rng(hyper.seed + 41);
  std::vector<Labelled> train, valid;
  auto split_class = [&](std::span<const std::vector<int>> items, double label) {
    std::vector<std::size_t> idx(items.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), split_rng);
    const std::size_t n_valid = items.size() >= 10 ? items.size() / 10 : 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto tokens = clip_length(items[idx[i]], config.max_len);
      if (tokens.empty()) continue;
      (i < n_valid ? valid : train).push_back({std::move(tokens), label});
    }
  };
  split_class(positives, 1.0);
  split_class(negatives, 0.0);
  const std::vector<Labelled>& monitor = valid.empty() ? train : valid;

  StyleClassifier model(config, style, hyper.seed);
  auto& params = model.params();
  nn::Adam adam(hyper.learning_rate);
  Rng rng(hyper.seed);
  ClassifierReport rep;
  rep.positives = positives.size();
  rep.negatives = negatives.size();
  rep.best_valid_loss = bce_loss(model, monitor, nullptr);
  std::map<std::string, Matrix> best;
  for (const auto& [name, p] : params) best.emplace(name, p.value);
  int stale = 0;

  std::vector<std::size_t> order(train.size());
  for (int epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t pos = 0;
    while (pos < order.size()) {
      std::vector<std::size_t> batch;
      std::size_t tokens = 0;
      while (pos < order.size()) {
        const std::size_t n = train[order[pos]].tokens.size();
        if (!batch.empty() && tokens + n > static_cast<std::size_t>(hyper.token_batch)) break;
        batch.push_back(order[pos++]);
        tokens += n;
      }
      params.zero_grad();
      const double inv = 1.0 / static_cast<double>(batch.size());
      for (std::size_t b : batch) {
        Graph g;
        Var loss = g.bce_with_logits(model.logit(g, train[b].tokens, &rng), train[b].label);
        epoch_loss += g.value(loss)(0, 0);
        g.backward(loss, Matrix::Constant(1, 1, inv));
      }
      if (!std::isfinite(epoch_loss)) {
        throw std::runtime_error("classifier training diverged at epoch " + std::to_string(epoch));
      }
      nn::clip_grad_norm(params, hyper.grad_clip);
      adam.step(params);
    }
    const double valid_loss = bce_loss(model, monitor, nullptr);
    rep.epochs.push_back({epoch, epoch_loss / static_cast<double>(train.size()), valid_loss});
    if (valid_loss < rep.best_valid_loss) {
      rep.best_valid_loss = valid_loss;
      rep.best_epoch = epoch;
      for (const auto& [name, p] : params) best[name] = p.value;
      stale = 0;
    } else if (++stale >= hyper.patience) {
      break;
    }
  }
  for (auto& [name, p] : params) p.value = best.at(name);
  bce_loss(model, monitor, &rep.heldout_accuracy);
  model.set_heldout_accuracy(rep.heldout_accuracy);
  if (report) *report = rep;
  if (rep.heldout_accuracy < kMinDeployAccuracy) {
    if (!force) {
      throw std::runtime_error("style classifier held-out accuracy " + std::to_string(rep.heldout_accuracy) +
                               " is below " + std::to_string(kMinDeployAccuracy) + "; rerun with --force to deploy");
    }
    spdlog::warn("deploying style classifier with held-out accuracy {:.3f} (forced)", rep.heldout_accuracy);
  }
  return model;
}

double style_intensity(const StyleClassifier& classifier, std::span<const int> tokens) {
  return classifier.probability(tokens);
}

double mean_style_intensity(const StyleClassifier& classifier, std::span<const std::vector<int>> corpus) {
  if (corpus.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& t : corpus) sum += classifier.probability(t);
  return sum / static_cast<double>(corpus.size());
}

void to_json(nlohmann::json& j, const RewardRecord& r) {
  j = nlohmann::json{{"id", r.id}, {"sim", r.sim}, {"cls", r.cls}, {"total", r.total}, {"advantage", r.advantage}};
}

std::vector<RewardRecord> compute_rewards(std::span<const RewardInput> batch, const RewardModel& model) {
  if (batch.empty()) throw std::invalid_argument("compute_rewards: empty batch");
  if (!model.vocab || !model.table || !model.classifier) throw std::invalid_argument("compute_rewards: incomplete reward model");
  std::vector<RewardRecord> out;
  out.reserve(batch.size());
  double mean = 0.0;
  for (const auto& in : batch) {
    RewardRecord r;
    r.id = in.id;
    const auto hyp = model.vocab->decode(in.hypothesis);
    const auto ref = model.vocab->decode(in.reference);
    r.sim = semantic_similarity(*model.table, hyp, ref);
    r.cls = model.classifier->probability(in.hypothesis);
    r.total = model.weights.sim * r.sim + model.weights.cls * r.cls;
    mean += r.total;
    out.push_back(std::move(r));
  }
  mean /= static_cast<double>(out.size());
  for (auto& r : out) r.advantage = r.total - mean;
  return out;
}

}  // namespace dtr::rewards
