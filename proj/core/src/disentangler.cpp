#include "dtr/disentangler.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "dtr/checkpoint.hpp"
#include "dtr/corpus.hpp"
#include "dtr/special_tokens.hpp"

namespace dtr::disent {

using nn::Graph;
using nn::Matrix;
using nn::Rng;
using nn::Var;

int replace_count(std::size_t m, double replace_rate) {
  if (!(replace_rate > 0.0 && replace_rate < 100.0)) throw std::invalid_argument("replace rate must be in (0, 100)");
  if (m == 0) return 0;
  // the epsilon keeps exact products such as 8 * 25 / 100 from rounding down
  const auto k = static_cast<int>(std::floor(static_cast<double>(m) * replace_rate / 100.0 + 1e-9));
  return std::clamp(k, 1, static_cast<int>(m));
}

std::vector<Action> threshold_actions(std::span<const double> scores, double replace_rate) {
  const int k = replace_count(scores.size(), replace_rate);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<Action> actions(scores.size(), Action::kRetain);
  for (int r = 0; r < k; ++r) actions[order[static_cast<std::size_t>(r)]] = Action::kReplace;
  return actions;
}

Template apply_actions(std::span<const int> tokens, std::span<const Action> actions, double replace_rate) {
  if (tokens.size() != actions.size()) throw std::invalid_argument("apply_actions: token/action length mismatch");
  Template t;
  t.actions.assign(actions.begin(), actions.end());
  t.replace_rate = replace_rate;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (actions[i] == Action::kRetain) {
      t.tokens.push_back(tokens[i]);
    } else if (i == 0 || actions[i - 1] == Action::kRetain) {
      t.tokens.push_back(kStar);
    }
  }
  return t;
}

Template extract_template(std::span<const int> tokens, std::span<const double> scores, double replace_rate) {
  if (tokens.size() != scores.size()) throw std::invalid_argument("extract_template: token/score length mismatch");
  const auto actions = threshold_actions(scores, replace_rate);
  return apply_actions(tokens, actions, replace_rate);
}

// ---------------------------------------------------------------------------

Disentangler::Disentangler(const nn::ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  alpha_ = nn::TokenEncoder(config_, "alpha.", params_, rng);
  beta_ = nn::TokenEncoder(config_, "beta.", params_, rng);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(config_.hidden)));
  Matrix w(config_.hidden, 1);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  params_.add("alpha.w", std::move(w));
  // beta starts neutral: sigmoid(0) = 0.5 at every position
  params_.add("beta.w", Matrix::Zero(config_.hidden, 1));
}

Var Disentangler::alpha_scores(Graph& g, std::span<const int> response, Rng* dropout_rng) {
  Var h = alpha_.forward(g, params_, response, dropout_rng);
  return g.sigmoid(g.matmul(h, g.param(params_.at("alpha.w"))));
}

Var Disentangler::beta_scores(Graph& g, std::span<const int> beta_input, std::size_t response_len, Rng* dropout_rng) {
  Var h = beta_.forward(g, params_, beta_input, dropout_rng);
  h = g.rows(h, 0, static_cast<int>(response_len));
  return g.sigmoid(g.matmul(h, g.param(params_.at("beta.w"))));
}

std::vector<int> Disentangler::beta_input(std::span<const int> response, std::span<const int> context,
                                          std::span<const int> knowledge) const {
  std::vector<int> ids(response.begin(), response.end());
  ids.push_back(kSep);
  ids.insert(ids.end(), context.begin(), context.end());
  ids.push_back(kSep);
  ids.insert(ids.end(), knowledge.begin(), knowledge.end());
  if (ids.size() > static_cast<std::size_t>(config_.max_len)) ids.resize(static_cast<std::size_t>(config_.max_len));
  return ids;
}

TokenScores Disentangler::score(std::span<const int> response, std::span<const int> context,
                                std::span<const int> knowledge, bool use_beta) const {
  if (response.empty()) throw std::invalid_argument("score_tokens: empty response");
  if (response.size() > static_cast<std::size_t>(config_.max_len)) {
    throw std::invalid_argument("score_tokens: response longer than max_len");
  }
  // inference graphs never write to parameters
  auto& self = const_cast<Disentangler&>(*this);
  TokenScores out;
  out.tokens.assign(response.begin(), response.end());
  {
    Graph g(false);
    const Matrix& a = g.value(self.alpha_scores(g, response, nullptr));
    out.alpha.assign(a.data(), a.data() + a.size());
  }
  out.scores = out.alpha;
  if (use_beta) {
    Graph g(false);
    const auto input = beta_input(response, context, knowledge);
    const Matrix& b = g.value(self.beta_scores(g, input, response.size(), nullptr));
    out.beta.assign(b.data(), b.data() + b.size());
    for (std::size_t i = 0; i < out.scores.size(); ++i) out.scores[i] += out.beta[i];
  }
  return out;
}

bool Disentangler::is_beta_param(const std::string& name) const { return name.rfind("beta.", 0) == 0; }

void Disentangler::freeze_alpha(bool frozen) {
  for (auto& [name, p] : params_) {
    if (!is_beta_param(name)) p.frozen = frozen;
  }
}

void Disentangler::freeze_beta(bool frozen) {
  for (auto& [name, p] : params_) {
    if (is_beta_param(name)) p.frozen = frozen;
  }
}

void Disentangler::save(const std::filesystem::path& path, const nlohmann::json& metrics) const {
  nn::TensorArchive ar;
  ar.kind = "disentangler";
  ar.header["config"] = config_;
  ar.header["metrics"] = metrics;
  nn::store_parameters(ar, params_);
  nn::write_archive(path, ar);
}

Disentangler Disentangler::load(const std::filesystem::path& path, int expected_vocab_size) {
  const auto ar = nn::read_archive(path);
  if (ar.kind != "disentangler") {
    throw std::runtime_error("checkpoint kind '" + ar.kind + "' is not disentangler: " + path.string());
  }
  const auto config = ar.header.at("config").get<nn::ModelConfig>();
  if (expected_vocab_size > 0 && config.vocab_size != expected_vocab_size) {
    throw std::runtime_error("checkpoint vocab_size " + std::to_string(config.vocab_size) +
                             " does not match vocabulary size " + std::to_string(expected_vocab_size) + ": " +
                             path.string());
  }
  Disentangler d(config, 0);
  nn::restore_parameters(ar, d.params_);
  return d;
}

// ---------------------------------------------------------------------------

int mask_count(std::size_t m) {
  if (m == 0) return 0;
  return std::max(1, static_cast<int>(std::floor(0.15 * static_cast<double>(m) + 1e-9)));
}

std::vector<int> mask_tokens(std::span<const int> tokens, Rng& rng) {
  std::vector<int> out(tokens.begin(), tokens.end());
  std::vector<std::size_t> pos(tokens.size());
  std::iota(pos.begin(), pos.end(), 0);
  const auto k = static_cast<std::size_t>(mask_count(tokens.size()));
  // partial Fisher-Yates: the first k entries become a uniform k-subset
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pos.size() - 1);
    std::swap(pos[i], pos[pick(rng)]);
    out[pos[i]] = kMask;
  }
  return out;
}

nn::Seq2SeqModel train_dae(std::span<const std::vector<int>> sentences, const nn::ModelConfig& config,
                           const nn::TrainHyper& hyper, nn::TrainReport* report) {
  if (sentences.empty()) throw std::invalid_argument("train_dae: no sentences");
  std::vector<nn::TokenPair> pairs;
  pairs.reserve(sentences.size());
  for (const auto& s : sentences) pairs.push_back({s, s});
  return nn::train_seq2seq(pairs, config, hyper, report,
                           [](std::span<const int> src, Rng& rng) { return mask_tokens(src, rng); });
}

DistanceSequence leave_one_out_distances(nn::Seq2SeqModel& dae, std::span<const int> sentence,
                                         const corpus::Vocabulary& vocab, const EmbeddingTable& embedder) {
  DistanceSequence out;
  out.tokens.assign(sentence.begin(), sentence.end());
  if (sentence.size() < 2) return out;
  std::vector<int> masked(sentence.begin(), sentence.end());
  std::vector<int> dec_in{kBos};
  for (std::size_t i = 0; i < sentence.size(); ++i) {
    masked[i] = kMask;
    const Matrix memory = dae.memory(masked);
    const Matrix lp = dae.decoder_log_probs(memory, dec_in);
    const auto row = lp.row(lp.rows() - 1);
    int best = kNumSpecial;
    for (int v = kNumSpecial + 1; v < row.size(); ++v) {
      if (row(v) > row(best)) best = v;
    }
    out.predictions.push_back(best);
    out.distances.push_back(token_distance(embedder, vocab.token(sentence[i]), vocab.token(best)));
    masked[i] = sentence[i];
    dec_in.push_back(sentence[i]);
  }
  return out;
}

std::vector<RankingTriple> build_ranking_triples(std::span<const DistanceSequence> sequences, int z,
                                                 std::uint64_t seed) {
  if (z < 1) throw std::invalid_argument("build_ranking_triples: Z must be >= 1");
  Rng rng(seed);
  std::vector<RankingTriple> triples;
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const auto& d = sequences[s].distances;
    std::vector<std::pair<int, int>> pairs;
    for (std::size_t i = 0; i < d.size(); ++i) {
      for (std::size_t j = i + 1; j < d.size(); ++j) {
        if (d[i] != d[j]) pairs.emplace_back(static_cast<int>(i), static_cast<int>(j));
      }
    }
    if (pairs.size() > static_cast<std::size_t>(z)) {
      std::shuffle(pairs.begin(), pairs.end(), rng);
      pairs.resize(static_cast<std::size_t>(z));
    }
    for (auto [i, j] : pairs) {
      triples.push_back({s, i, j, d[static_cast<std::size_t>(i)] < d[static_cast<std::size_t>(j)] ? 1 : -1});
    }
  }
  return triples;
}

double ranking_loss(double x_i, double x_j, int y, double margin) {
  if (margin < 0.0) throw std::invalid_argument("ranking_loss: margin must be >= 0");
  return std::max(0.0, -static_cast<double>(y) * (x_i - x_j) + margin);
}

void to_json(nlohmann::json& j, const RankingReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"valid_loss", e.valid_loss}});
  j = nlohmann::json{{"initial_valid_loss", r.initial_valid_loss},
                     {"best_valid_loss", r.best_valid_loss},
                     {"valid_accuracy", r.valid_accuracy},
                     {"best_epoch", r.best_epoch},
                     {"train_triples", r.train_triples},
                     {"valid_triples", r.valid_triples},
                     {"epochs", epochs}};
}

namespace {

// Triples grouped by sentence so that each sentence is encoded once.
struct SentenceGroup {
  std::size_t sentence = 0;
  std::vector<RankingTriple> triples;
};

std::vector<SentenceGroup> group_triples(std::span<const RankingTriple> triples) {
  std::map<std::size_t, std::vector<RankingTriple>> by_sentence;
  for (const auto& t : triples) by_sentence[t.sentence].push_back(t);
  std::vector<SentenceGroup> out;
  for (auto& [s, ts] : by_sentence) out.push_back({s, std::move(ts)});
  return out;
}

double mean_group_loss(const Disentangler& model, std::span<const DistanceSequence> sequences,
                       std::span<const SentenceGroup> groups, double margin, double* accuracy = nullptr) {
  std::vector<double> losses;
  std::size_t correct = 0;
  for (const auto& grp : groups) {
    const auto x = model.score_alpha(sequences[grp.sentence].tokens).scores;
    for (const auto& t : grp.triples) {
      const double xi = x[static_cast<std::size_t>(t.i)];
      const double xj = x[static_cast<std::size_t>(t.j)];
      losses.push_back(ranking_loss(xi, xj, t.y, margin));
      if ((t.y > 0 && xi > xj) || (t.y < 0 && xi < xj)) ++correct;
    }
  }
  if (accuracy) *accuracy = losses.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(losses.size());
  if (losses.empty()) return 0.0;
  std::sort(losses.begin(), losses.end());
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
}

}  // namespace

double ranking_accuracy(const Disentangler& model, std::span<const DistanceSequence> sequences,
                        std::span<const RankingTriple> triples) {
  double acc = 0.0;
  const auto groups = group_triples(triples);
  mean_group_loss(model, sequences, groups, 0.0, &acc);
  return acc;
}

RankingReport train_disentangler_ws(Disentangler& model, std::span<const DistanceSequence> sequences,
                                    std::span<const RankingTriple> triples, const nn::TrainHyper& hyper,
                                    double margin) {
  if (triples.empty()) throw std::invalid_argument("train_disentangler_ws: no ranking triples");
  hyper.validate(model.config().max_len);
  model.freeze_beta(true);
  model.freeze_alpha(false);

  auto groups = group_triples(triples);
  Rng split_rng(hyper.seed + 29);
  std::shuffle(groups.begin(), groups.end(), split_rng);
  const std::size_t n_valid = groups.size() >= 10 ? groups.size() / 10 : 0;
  std::vector<SentenceGroup> valid(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(n_valid));
  std::vector<SentenceGroup> train(groups.begin() + static_cast<std::ptrdiff_t>(n_valid), groups.end());
  std::sort(valid.begin(), valid.end(), [](const auto& a, const auto& b) { return a.sentence < b.sentence; });
  const std::vector<SentenceGroup>& monitor = valid.empty() ? train : valid;

  RankingReport report;
  for (const auto& g : train) report.train_triples += g.triples.size();
  for (const auto& g : valid) report.valid_triples += g.triples.size();

  auto& params = model.params();
  nn::Adam adam(hyper.learning_rate);
  Rng rng(hyper.seed);
  report.initial_valid_loss = mean_group_loss(model, sequences, monitor, margin);
  report.best_valid_loss = report.initial_valid_loss;
  std::map<std::string, Matrix> best;
  for (const auto& [name, p] : params) best.emplace(name, p.value);
  int stale = 0;

  std::vector<std::size_t> order(train.size());
  for (int epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_triples = 0;
    std::size_t pos = 0;
    while (pos < order.size()) {
      // a batch holds whole sentences up to token_batch tokens
      std::vector<std::size_t> batch;
      std::size_t tokens = 0;
      while (pos < order.size()) {
        const std::size_t n = sequences[train[order[pos]].sentence].tokens.size();
        if (!batch.empty() && tokens + n > static_cast<std::size_t>(hyper.token_batch)) break;
        batch.push_back(order[pos++]);
        tokens += n;
      }
      std::size_t batch_triples = 0;
      for (std::size_t b : batch) batch_triples += train[b].triples.size();
      const double inv = 1.0 / static_cast<double>(batch_triples);
      params.zero_grad();
      for (std::size_t b : batch) {
        const auto& grp = train[b];
        Graph g;
        Var x = model.alpha_scores(g, sequences[grp.sentence].tokens, &rng);
        const Matrix& xv = g.value(x);
        Matrix seed = Matrix::Zero(xv.rows(), 1);
        for (const auto& t : grp.triples) {
          const double l = ranking_loss(xv(t.i, 0), xv(t.j, 0), t.y, margin);
          epoch_loss += l;
          if (l > 0.0) {
            seed(t.i, 0) -= t.y * inv;
            seed(t.j, 0) += t.y * inv;
          }
        }
        g.backward(x, seed);
      }
      epoch_triples += batch_triples;
      nn::clip_grad_norm(params, hyper.grad_clip);
      adam.step(params);
    }
    const double valid_loss = mean_group_loss(model, sequences, monitor, margin);
    if (!std::isfinite(valid_loss)) throw std::runtime_error("ranking training diverged at epoch " + std::to_string(epoch));
    report.epochs.push_back({epoch, epoch_loss / static_cast<double>(std::max<std::size_t>(1, epoch_triples)), valid_loss});
    spdlog::debug("ranking epoch {} train {:.4f} valid {:.4f}", epoch, report.epochs.back().train_loss, valid_loss);
    if (valid_loss < report.best_valid_loss) {
      report.best_valid_loss = valid_loss;
      report.best_epoch = epoch;
      for (const auto& [name, p] : params) best[name] = p.value;
      stale = 0;
    } else if (++stale >= hyper.patience) {
      break;
    }
  }
  for (auto& [name, p] : params) p.value = best.at(name);
  mean_group_loss(model, sequences, monitor, margin, &report.valid_accuracy);
  return report;
}

std::vector<TemplatePair> build_template_corpus(const Disentangler& model, std::span<const std::string> ids,
                                                std::span<const std::vector<int>> sentences, double replace_rate) {
  if (ids.size() != sentences.size()) throw std::invalid_argument("build_template_corpus: id/sentence count mismatch");
  std::vector<TemplatePair> out;
  out.reserve(sentences.size());
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto scores = model.score_alpha(sentences[i]);
    out.push_back({ids[i], extract_template(sentences[i], scores.scores, replace_rate), sentences[i]});
  }
  return out;
}

}  // namespace dtr::disent
