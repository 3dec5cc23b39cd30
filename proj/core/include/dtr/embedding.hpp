#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dtr/autograd.hpp"

namespace dtr {
namespace corpus {
class Vocabulary;
}

/// Word vectors keyed by token, all of one dimension.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(int dim, std::string source);

  void add(const std::string& token, const nn::RowVector& vec);
  bool contains(std::string_view token) const;
  /// Throws std::out_of_range for unknown tokens.
  nn::RowVector vector(std::string_view token) const;

  int dim() const { return dim_; }
  std::size_t size() const { return index_.size(); }
  const std::string& source() const { return source_; }

  /// word2vec text format: optional "<count> <dim>" header, then one token
  /// followed by its floats per line.
  static EmbeddingTable load_text(const std::filesystem::path& path);
  void save_text(const std::filesystem::path& path) const;

  /// Rows of an embedding matrix indexed by vocabulary id; control tokens are skipped.
  static EmbeddingTable from_matrix(const nn::Matrix& table, const corpus::Vocabulary& vocab, std::string source);

 private:
  int dim_ = 0;
  std::string source_;
  nn::Matrix rows_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

double cosine(const nn::RowVector& a, const nn::RowVector& b);

/// 1 - cosine, 0 on exact string match, 1 when either token is missing.
/// Always in [0, 2].
double token_distance(const EmbeddingTable& table, std::string_view a, std::string_view b);

}  // namespace dtr
