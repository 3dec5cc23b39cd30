#include "dtr/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "dtr/corpus.hpp"
#include "dtr/special_tokens.hpp"

namespace dtr {

EmbeddingTable::EmbeddingTable(int dim, std::string source) : dim_(dim), source_(std::move(source)) {
  if (dim <= 0) throw std::invalid_argument("EmbeddingTable: dimension must be positive");
  rows_.resize(0, dim);
}

void EmbeddingTable::add(const std::string& token, const nn::RowVector& vec) {
  if (vec.size() != dim_) {
    throw std::invalid_argument("EmbeddingTable: vector for '" + token + "' has dimension " + std::to_string(vec.size()) +
                                ", expected " + std::to_string(dim_));
  }
  if (!vec.allFinite()) throw std::invalid_argument("EmbeddingTable: non-finite vector for '" + token + "'");
  auto it = index_.find(token);
  if (it != index_.end()) {
    rows_.row(it->second) = vec;
    return;
  }
  const auto r = static_cast<int>(rows_.rows());
  rows_.conservativeResize(r + 1, dim_);
  rows_.row(r) = vec;
  tokens_.push_back(token);
  index_.emplace(token, r);
}

bool EmbeddingTable::contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

nn::RowVector EmbeddingTable::vector(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw std::out_of_range("no embedding for token '" + std::string(token) + "'");
  return rows_.row(it->second);
}

EmbeddingTable EmbeddingTable::load_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embedding file " + path.string());
  EmbeddingTable table;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::istringstream ls(line);
    std::string token;
    if (!(ls >> token)) continue;
    std::vector<double> values;
    double v = 0.0;
    while (ls >> v) values.push_back(v);
    if (!ls.eof()) throw std::runtime_error(path.string() + ":" + std::to_string(number) + ": malformed number");
    // "<count> <dim>" header line
    if (number == 1 && values.size() == 1 && std::all_of(token.begin(), token.end(), ::isdigit)) continue;
    if (values.empty()) throw std::runtime_error(path.string() + ":" + std::to_string(number) + ": no vector values");
    if (table.dim_ == 0) table = EmbeddingTable(static_cast<int>(values.size()), path.string());
    table.add(token, Eigen::Map<const nn::RowVector>(values.data(), static_cast<Eigen::Index>(values.size())));
  }
  if (table.size() == 0) throw std::runtime_error("embedding file " + path.string() + " has no vectors");
  return table;
}

void EmbeddingTable::save_text(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << tokens_.size() << ' ' << dim_ << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    out << tokens_[i];
    for (int k = 0; k < dim_; ++k) out << ' ' << rows_(static_cast<Eigen::Index>(i), k);
    out << '\n';
  }
}

EmbeddingTable EmbeddingTable::from_matrix(const nn::Matrix& table, const corpus::Vocabulary& vocab, std::string source) {
  if (table.rows() != vocab.size()) throw std::invalid_argument("EmbeddingTable::from_matrix: row count != vocabulary size");
  EmbeddingTable out(static_cast<int>(table.cols()), std::move(source));
  for (int id = kNumSpecial; id < vocab.size(); ++id) out.add(vocab.token(id), table.row(id));
  return out;
}

double cosine(const nn::RowVector& a, const nn::RowVector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double token_distance(const EmbeddingTable& table, std::string_view a, std::string_view b) {
  if (a == b) return 0.0;
  if (!table.contains(a) || !table.contains(b)) return 1.0;
  return 1.0 - cosine(table.vector(a), table.vector(b));
}

}  // namespace dtr
