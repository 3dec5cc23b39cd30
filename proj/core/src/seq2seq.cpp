#include "dtr/seq2seq.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dtr/checkpoint.hpp"
#include "dtr/special_tokens.hpp"

namespace dtr::nn {

void TrainHyper::validate(int max_len) const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainHyper.learning_rate must be positive");
  if (token_batch < max_len) throw std::invalid_argument("TrainHyper.token_batch must be >= max_len");
  if (max_epochs < 0) throw std::invalid_argument("TrainHyper.max_epochs must be non-negative");
  if (patience < 1) throw std::invalid_argument("TrainHyper.patience must be >= 1");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("TrainHyper.grad_clip must be positive");
}

void to_json(nlohmann::json& j, const TrainHyper& h) {
  j = nlohmann::json{{"learning_rate", h.learning_rate}, {"token_batch", h.token_batch}, {"max_epochs", h.max_epochs},
                     {"patience", h.patience},           {"seed", h.seed},               {"grad_clip", h.grad_clip}};
}

void from_json(const nlohmann::json& j, TrainHyper& h) {
  h.learning_rate = j.value("learning_rate", h.learning_rate);
  h.token_batch = j.value("token_batch", h.token_batch);
  h.max_epochs = j.value("max_epochs", h.max_epochs);
  h.patience = j.value("patience", h.patience);
  h.seed = j.value("seed", h.seed);
  h.grad_clip = j.value("grad_clip", h.grad_clip);
}

void to_json(nlohmann::json& j, const TrainReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"valid_loss", e.valid_loss}});
  j = nlohmann::json{{"initial_valid_loss", r.initial_valid_loss},
                     {"best_valid_loss", r.best_valid_loss},
                     {"best_epoch", r.best_epoch},
                     {"epochs", epochs}};
}

Adam::Adam(double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParameterStore& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    if (p.frozen) continue;
    auto [it, fresh] = state_.try_emplace(name);
    if (fresh) {
      it->second.m = Matrix::Zero(p.value.rows(), p.value.cols());
      it->second.v = Matrix::Zero(p.value.rows(), p.value.cols());
    }
    Matrix& m = it->second.m;
    Matrix& v = it->second.v;
    m = beta1_ * m + (1.0 - beta1_) * p.grad;
    v = beta2_ * v + (1.0 - beta2_) * p.grad.cwiseAbs2();
    p.value.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
  }
}

void Adam::restore(long step_count, std::map<std::string, Moments> state) {
  t_ = step_count;
  state_ = std::move(state);
}

double clip_grad_norm(ParameterStore& params, double max_norm) {
  const double norm = params.grad_norm();
  if (norm > max_norm) params.scale_grad(max_norm / norm);
  return norm;
}

namespace {

std::size_t pair_tokens(const TokenPair& p) { return p.source.size() + p.target.size() + 1; }

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::span<const TokenPair> pairs,
                                                   int token_batch) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t tokens = 0;
  for (std::size_t idx : order) {
    const std::size_t n = pair_tokens(pairs[idx]);
    if (!current.empty() && tokens + n > static_cast<std::size_t>(token_batch)) {
      batches.push_back(std::move(current));
      current.clear();
      tokens = 0;
    }
    current.push_back(idx);
    tokens += n;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

std::map<std::string, Matrix> snapshot(const ParameterStore& params) {
  std::map<std::string, Matrix> out;
  for (const auto& [name, p] : params) out.emplace(name, p.value);
  return out;
}

void restore(ParameterStore& params, const std::map<std::string, Matrix>& snap) {
  for (auto& [name, p] : params) p.value = snap.at(name);
}

void check_lengths(std::span<const TokenPair> pairs, int max_len) {
  for (const auto& p : pairs) {
    if (p.source.empty() || p.target.empty()) throw std::invalid_argument("training pair with empty side");
    if (static_cast<int>(p.source.size()) > max_len || static_cast<int>(p.target.size()) > max_len) {
      throw std::invalid_argument("training pair longer than ModelConfig.max_len");
    }
  }
}

}  // namespace

double evaluate_loss(Seq2SeqModel& model, std::span<const TokenPair> pairs) {
  if (pairs.empty()) return 0.0;
  std::vector<double> losses;
  losses.reserve(pairs.size());
  std::size_t tokens = 0;
  for (const auto& p : pairs) {
    Graph g(false);
    losses.push_back(g.value(model.loss(g, p.source, p.target, nullptr))(0, 0));
    tokens += p.target.size() + 1;
  }
  // canonical summation order keeps the result independent of pair order
  std::sort(losses.begin(), losses.end());
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(tokens);
}

TrainReport fit_seq2seq(Seq2SeqModel& model, std::span<const TokenPair> train, std::span<const TokenPair> valid,
                        const TrainHyper& hyper, const SourceCorruptor& corrupt) {
  if (train.empty()) throw std::invalid_argument("fit_seq2seq: no training pairs");
  hyper.validate(model.config().max_len);
  check_lengths(train, model.config().max_len);
  check_lengths(valid, model.config().max_len);

  Rng rng(hyper.seed);
  std::vector<TokenPair> valid_pairs(valid.begin(), valid.end());
  if (corrupt) {
    Rng valid_rng(hyper.seed ^ 0x9e3779b97f4a7c15ULL);
    for (auto& p : valid_pairs) p.source = corrupt(p.source, valid_rng);
  }
  if (valid_pairs.empty()) valid_pairs.assign(train.begin(), train.end());

  ParameterStore& params = model.params();
  Adam adam(hyper.learning_rate);
  TrainReport report;
  report.initial_valid_loss = evaluate_loss(model, valid_pairs);
  report.best_valid_loss = report.initial_valid_loss;
  auto best = snapshot(params);
  int stale = 0;
  long step = 0;

  std::vector<TokenPair> epoch_pairs(train.begin(), train.end());
  std::vector<std::size_t> order(train.size());
  for (int epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    if (corrupt) {
      for (std::size_t i = 0; i < train.size(); ++i) epoch_pairs[i].source = corrupt(train[i].source, rng);
    }
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    for (const auto& batch : make_batches(order, epoch_pairs, hyper.token_batch)) {
      ++step;
      params.zero_grad();
      std::size_t batch_tokens = 0;
      for (std::size_t idx : batch) batch_tokens += epoch_pairs[idx].target.size() + 1;
      const double inv = 1.0 / static_cast<double>(batch_tokens);
      double batch_loss = 0.0;
      for (std::size_t idx : batch) {
        Graph g;
        Var loss = model.loss(g, epoch_pairs[idx].source, epoch_pairs[idx].target, &rng);
        batch_loss += g.value(loss)(0, 0);
        g.backward(loss, Matrix::Constant(1, 1, inv));
      }
      if (!std::isfinite(batch_loss)) {
        throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(step) + ": non-finite loss");
      }
      clip_grad_norm(params, hyper.grad_clip);
      adam.step(params);
      epoch_loss += batch_loss;
      epoch_tokens += batch_tokens;
    }
    const double valid_loss = evaluate_loss(model, valid_pairs);
    if (!std::isfinite(valid_loss)) {
      throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": non-finite validation loss");
    }
    report.epochs.push_back({epoch, epoch_loss / static_cast<double>(epoch_tokens), valid_loss});
    spdlog::debug("epoch {} train {:.4f} valid {:.4f}", epoch, report.epochs.back().train_loss, valid_loss);
    if (valid_loss < report.best_valid_loss) {
      report.best_valid_loss = valid_loss;
      report.best_epoch = epoch;
      best = snapshot(params);
      stale = 0;
    } else if (++stale >= hyper.patience) {
      break;
    }
  }
  restore(params, best);
  return report;
}

TrainReport fine_tune_seq2seq(Seq2SeqModel& model, std::span<const TokenPair> pairs, const TrainHyper& hyper,
                              const SourceCorruptor& corrupt) {
  if (pairs.empty()) throw std::invalid_argument("train_seq2seq: no training pairs");
  std::vector<std::size_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(hyper.seed + 17);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t n_valid = pairs.size() >= 10 ? std::max<std::size_t>(1, pairs.size() / 10) : 0;
  std::vector<TokenPair> valid, train;
  for (std::size_t i = 0; i < idx.size(); ++i) (i < n_valid ? valid : train).push_back(pairs[idx[i]]);
  return fit_seq2seq(model, train, valid, hyper, corrupt);
}

Seq2SeqModel train_seq2seq(std::span<const TokenPair> pairs, const ModelConfig& config, const TrainHyper& hyper,
                           TrainReport* report, const SourceCorruptor& corrupt) {
  if (pairs.empty()) throw std::invalid_argument("train_seq2seq: no training pairs");
  Seq2SeqModel model(config, hyper.seed);
  TrainReport r = fine_tune_seq2seq(model, pairs, hyper, corrupt);
  if (report) *report = std::move(r);
  return model;
}

// ---------------------------------------------------------------------------

namespace {

struct Beam {
  std::vector<int> tokens;
  double log_prob = 0.0;
};

Hypothesis run_beam(StepScorer& scorer, const SearchOptions& opt, int beam) {
  const int vocab = scorer.vocab_size();
  std::vector<char> banned(static_cast<std::size_t>(vocab), 0);
  for (int b : opt.banned) {
    if (b >= 0 && b < vocab && b != opt.eos) banned[static_cast<std::size_t>(b)] = 1;
  }
  std::vector<Beam> alive{Beam{}};
  std::vector<Hypothesis> finished;

  struct Candidate {
    double score;
    std::size_t parent;
    int token;
  };
  for (int step = 0; step < opt.max_len && !alive.empty(); ++step) {
    std::vector<Candidate> cands;
    cands.reserve(alive.size() * static_cast<std::size_t>(vocab));
    for (std::size_t h = 0; h < alive.size(); ++h) {
      RowVector lp = scorer.next_log_probs(alive[h].tokens);
      for (int v = 0; v < vocab; ++v) {
        if (banned[static_cast<std::size_t>(v)]) continue;
        if (v == opt.eos && step < opt.min_len) continue;
        cands.push_back({alive[h].log_prob + lp(v), h, v});
      }
    }
    const auto keep = std::min<std::size_t>(static_cast<std::size_t>(beam), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });
    std::vector<Beam> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const Candidate& c = cands[i];
      if (c.token == opt.eos) {
        finished.push_back({alive[c.parent].tokens, c.score, true});
      } else {
        Beam b{alive[c.parent].tokens, c.score};
        b.tokens.push_back(c.token);
        next.push_back(std::move(b));
      }
    }
    alive = std::move(next);
    if (!finished.empty() && !alive.empty()) {
      double best_finished = finished.front().log_prob;
      for (const auto& f : finished) best_finished = std::max(best_finished, f.log_prob);
      // extensions can only lower a score
      if (best_finished >= alive.front().log_prob) alive.clear();
    }
  }
  for (auto& b : alive) finished.push_back({std::move(b.tokens), b.log_prob, false});
  if (finished.empty()) return {};
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i) {
    if (finished[i].log_prob > finished[best].log_prob) best = i;
  }
  return finished[best];
}

}  // namespace

Hypothesis beam_search(StepScorer& scorer, const SearchOptions& options) {
  if (options.beam < 1) throw std::invalid_argument("beam_search: beam must be >= 1");
  Hypothesis best = run_beam(scorer, options, options.beam);
  if (options.beam > 1) {
    Hypothesis greedy = run_beam(scorer, options, 1);
    if (greedy.log_prob > best.log_prob) best = std::move(greedy);
  }
  return best;
}

Seq2SeqScorer::Seq2SeqScorer(Seq2SeqModel& model, std::span<const int> source)
    : model_(model), memory_(model.memory(source)) {}

RowVector Seq2SeqScorer::next_log_probs(std::span<const int> prefix) {
  std::vector<int> dec_in;
  dec_in.reserve(prefix.size() + 1);
  dec_in.push_back(kBos);
  dec_in.insert(dec_in.end(), prefix.begin(), prefix.end());
  Matrix lp = model_.decoder_log_probs(memory_, dec_in);
  return lp.row(lp.rows() - 1);
}

Hypothesis beam_decode(Seq2SeqModel& model, std::span<const int> source, int beam, int max_len) {
  Seq2SeqScorer scorer(model, source);
  SearchOptions opt;
  opt.beam = beam;
  opt.max_len = std::min(max_len, model.config().max_len);
  opt.eos = kEos;
  opt.min_len = 1;
  for (int id = 0; id < kNumSpecial; ++id) {
    if (id != kEos) opt.banned.push_back(id);
  }
  return beam_search(scorer, opt);
}

Matrix encode_tokens(Seq2SeqModel& model, std::span<const int> tokens) {
  const auto max_len = static_cast<std::size_t>(model.config().max_len);
  if (tokens.size() > max_len) {
    spdlog::warn("encode_tokens: input of {} tokens truncated to {}", tokens.size(), max_len);
    tokens = tokens.first(max_len);
  }
  return model.memory(tokens);
}

// ---------------------------------------------------------------------------

void save_checkpoint(const Seq2SeqModel& model, const std::filesystem::path& path, const CheckpointMeta& meta,
                     const Adam* optimizer) {
  TensorArchive ar;
  ar.kind = "seq2seq";
  ar.header["config"] = model.config();
  ar.header["epoch"] = meta.epoch;
  ar.header["valid_loss"] = meta.valid_loss;
  ar.header["metrics"] = meta.metrics;
  store_parameters(ar, model.params());
  if (optimizer) {
    ar.header["adam_step"] = optimizer->step_count();
    for (const auto& [name, mom] : optimizer->state()) {
      ar.tensors["adam.m/" + name] = mom.m;
      ar.tensors["adam.v/" + name] = mom.v;
    }
  }
  write_archive(path, ar);
}

Seq2SeqModel load_checkpoint(const std::filesystem::path& path, int expected_vocab_size, CheckpointMeta* meta) {
  TensorArchive ar = read_archive(path);
  if (ar.kind != "seq2seq") throw std::runtime_error("checkpoint kind '" + ar.kind + "' is not seq2seq: " + path.string());
  const auto config = ar.header.at("config").get<ModelConfig>();
  if (expected_vocab_size > 0 && config.vocab_size != expected_vocab_size) {
    throw std::runtime_error("checkpoint vocab_size " + std::to_string(config.vocab_size) + " does not match vocabulary size " +
                             std::to_string(expected_vocab_size) + ": " + path.string());
  }
  Seq2SeqModel model(config, 0);
  restore_parameters(ar, model.params());
  if (meta) {
    meta->epoch = ar.header.value("epoch", 0);
    meta->valid_loss = ar.header.value("valid_loss", 0.0);
    meta->metrics = ar.header.value("metrics", nlohmann::json::object());
  }
  return model;
}

std::uint64_t tensor_hash(const Matrix& m) {
  return fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
}

std::map<std::string, std::uint64_t> parameter_hashes(const ParameterStore& params) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& [name, p] : params) out.emplace(name, tensor_hash(p.value));
  return out;
}

}  // namespace dtr::nn
