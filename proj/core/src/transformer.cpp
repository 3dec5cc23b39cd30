#include "dtr/transformer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "dtr/special_tokens.hpp"

namespace dtr::nn {
namespace {

Matrix xavier(int rows, int cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

void add_linear(ParameterStore& s, const std::string& name, int in, int out, Rng& rng) {
  s.add(name + ".w", xavier(in, out, rng));
  s.add(name + ".b", Matrix::Zero(1, out));
}

void add_norm(ParameterStore& s, const std::string& name, int dim) {
  s.add(name + ".g", Matrix::Ones(1, dim));
  s.add(name + ".b", Matrix::Zero(1, dim));
}

void add_attention(ParameterStore& s, const std::string& name, int d, Rng& rng) {
  add_linear(s, name + ".q", d, d, rng);
  add_linear(s, name + ".k", d, d, rng);
  add_linear(s, name + ".v", d, d, rng);
  add_linear(s, name + ".o", d, d, rng);
}

Var linear(Graph& g, ParameterStore& s, const std::string& name, Var x) {
  return g.add_row(g.matmul(x, g.param(s.at(name + ".w"))), g.param(s.at(name + ".b")));
}

Var norm(Graph& g, ParameterStore& s, const std::string& name, Var x) {
  return g.layer_norm(x, g.param(s.at(name + ".g")), g.param(s.at(name + ".b")));
}

Var attend(Graph& g, ParameterStore& s, const std::string& name, Var query_in, Var kv_in, int heads, bool causal) {
  Var q = linear(g, s, name + ".q", query_in);
  Var k = linear(g, s, name + ".k", kv_in);
  Var v = linear(g, s, name + ".v", kv_in);
  return linear(g, s, name + ".o", g.attention(q, k, v, heads, causal));
}

Var feed_forward(Graph& g, ParameterStore& s, const std::string& name, Var x, double dropout, Rng* rng) {
  Var h = g.relu(linear(g, s, name + ".ff1", x));
  return linear(g, s, name + ".ff2", g.dropout(h, dropout, rng));
}

Var embed_with_positions(Graph& g, Parameter& table, const Matrix& positions, std::span<const int> ids, int hidden,
                         int max_len, double dropout, Rng* rng) {
  if (static_cast<int>(ids.size()) > max_len) throw std::invalid_argument("sequence longer than max_len");
  if (ids.empty()) throw std::invalid_argument("empty token sequence");
  Var e = g.embed(table, ids, std::sqrt(static_cast<double>(hidden)));
  Var p = g.input(positions.topRows(static_cast<Eigen::Index>(ids.size())));
  return g.dropout(g.add(e, p), dropout, rng);
}

}  // namespace

void ModelConfig::validate() const {
  if (layers <= 0) throw std::invalid_argument("ModelConfig.layers must be positive");
  if (hidden <= 0) throw std::invalid_argument("ModelConfig.hidden must be positive");
  if (heads <= 0) throw std::invalid_argument("ModelConfig.heads must be positive");
  if (hidden % heads != 0) throw std::invalid_argument("ModelConfig.hidden must be divisible by heads");
  if (ff_dim <= 0) throw std::invalid_argument("ModelConfig.ff_dim must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("ModelConfig.dropout must be in [0,1)");
  if (max_len <= 0) throw std::invalid_argument("ModelConfig.max_len must be positive");
  if (vocab_size <= kNumSpecial) throw std::invalid_argument("ModelConfig.vocab_size must exceed the special tokens");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers}, {"hidden", c.hidden},   {"heads", c.heads},          {"ff_dim", c.ff_dim},
                     {"dropout", c.dropout}, {"max_len", c.max_len}, {"vocab_size", c.vocab_size}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.layers = j.value("layers", c.layers);
  c.hidden = j.value("hidden", c.hidden);
  c.heads = j.value("heads", c.heads);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.dropout = j.value("dropout", c.dropout);
  c.max_len = j.value("max_len", c.max_len);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
}

Matrix positional_table(int max_len, int hidden) {
  Matrix pe(max_len, hidden);
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < hidden; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / hidden);
      pe(pos, i) = (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return pe;
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

TokenEncoder::TokenEncoder(const ModelConfig& config, std::string prefix, ParameterStore& store, Rng& init_rng)
    : config_(config), prefix_(std::move(prefix)), positions_(positional_table(config.max_len, config.hidden)) {
  config_.validate();
  const int d = config_.hidden;
  if (!store.contains(prefix_ + "embed")) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
    Matrix e(config_.vocab_size, d);
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = dist(init_rng);
    e.row(kPad).setZero();
    store.add(prefix_ + "embed", std::move(e));
  }
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = prefix_ + "enc." + std::to_string(l);
    add_norm(store, p + ".ln1", d);
    add_attention(store, p + ".self", d, init_rng);
    add_norm(store, p + ".ln2", d);
    add_linear(store, p + ".ff1", d, config_.ff_dim, init_rng);
    add_linear(store, p + ".ff2", config_.ff_dim, d, init_rng);
  }
  add_norm(store, prefix_ + "enc.final", d);
}

Var TokenEncoder::forward(Graph& g, ParameterStore& s, std::span<const int> ids, Rng* rng) const {
  const double drop = rng ? config_.dropout : 0.0;
  Var x = embed_with_positions(g, s.at(prefix_ + "embed"), positions_, ids, config_.hidden, config_.max_len, drop, rng);
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = prefix_ + "enc." + std::to_string(l);
    Var h = norm(g, s, p + ".ln1", x);
    x = g.add(x, g.dropout(attend(g, s, p + ".self", h, h, config_.heads, false), drop, rng));
    h = norm(g, s, p + ".ln2", x);
    x = g.add(x, g.dropout(feed_forward(g, s, p, h, drop, rng), drop, rng));
  }
  return norm(g, s, prefix_ + "enc.final", x);
}

Seq2SeqModel::Seq2SeqModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config), positions_(positional_table(config.max_len + 1, config.hidden)) {
  config_.validate();
  Rng rng(seed);
  encoder_ = TokenEncoder(config_, "", params_, rng);
  const int d = config_.hidden;
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    add_norm(params_, p + ".ln1", d);
    add_attention(params_, p + ".self", d, rng);
    add_norm(params_, p + ".ln2", d);
    add_attention(params_, p + ".cross", d, rng);
    add_norm(params_, p + ".ln3", d);
    add_linear(params_, p + ".ff1", d, config_.ff_dim, rng);
    add_linear(params_, p + ".ff2", config_.ff_dim, d, rng);
  }
  add_norm(params_, "dec.final", d);
}

Var Seq2SeqModel::encode(Graph& g, std::span<const int> source, Rng* rng) {
  return encoder_.forward(g, params_, source, rng);
}

Var Seq2SeqModel::decode(Graph& g, Var memory, std::span<const int> decoder_input, Rng* rng) {
  const double drop = rng ? config_.dropout : 0.0;
  auto& s = params_;
  // decoder inputs carry BOS, so they may be one longer than max_len
  Var x = embed_with_positions(g, s.at("embed"), positions_, decoder_input, config_.hidden, config_.max_len + 1, drop,
                               rng);
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    Var h = norm(g, s, p + ".ln1", x);
    x = g.add(x, g.dropout(attend(g, s, p + ".self", h, h, config_.heads, true), drop, rng));
    h = norm(g, s, p + ".ln2", x);
    x = g.add(x, g.dropout(attend(g, s, p + ".cross", h, memory, config_.heads, false), drop, rng));
    h = norm(g, s, p + ".ln3", x);
    x = g.add(x, g.dropout(feed_forward(g, s, p, h, drop, rng), drop, rng));
  }
  Var out = norm(g, s, "dec.final", x);
  return g.matmul_nt(out, g.param(s.at("embed")));
}

Var Seq2SeqModel::loss(Graph& g, std::span<const int> source, std::span<const int> target, Rng* rng) {
  if (static_cast<int>(target.size()) > config_.max_len) throw std::invalid_argument("target longer than max_len");
  std::vector<int> dec_in;
  dec_in.reserve(target.size() + 1);
  dec_in.push_back(kBos);
  dec_in.insert(dec_in.end(), target.begin(), target.end());
  std::vector<int> labels(target.begin(), target.end());
  labels.push_back(kEos);
  Var memory = encode(g, source, rng);
  return g.cross_entropy(decode(g, memory, dec_in, rng), labels);
}

Matrix Seq2SeqModel::memory(std::span<const int> source) {
  Graph g(false);
  return g.value(encode(g, source, nullptr));
}

Matrix Seq2SeqModel::decoder_log_probs(const Matrix& memory, std::span<const int> decoder_input) {
  Graph g(false);
  Var mem = g.input(memory);
  return log_softmax_rows(g.value(decode(g, mem, decoder_input, nullptr)));
}

}  // namespace dtr::nn
