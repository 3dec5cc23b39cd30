#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// matrices. One Graph is built per example; parameters live outside the
// graph in a ParameterStore and receive accumulated gradients on backward().

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dtr::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Rng = std::mt19937_64;

struct Parameter {
  Matrix value;
  Matrix grad;
  bool frozen = false;
};

/// Named parameter tensors. Iteration order is the lexicographic name order,
/// which is what checkpoints and parameter hashes rely on.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Matrix init);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad();
  void set_frozen(bool frozen);
  std::size_t scalar_count() const;
  double grad_norm() const;
  void scale_grad(double factor);

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

 private:
  std::map<std::string, Parameter> params_;
};

struct Var {
  int id = -1;
};

class Graph {
 public:
  /// With record == false no backward closures are kept (inference mode).
  explicit Graph(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var input(Matrix value);
  Var param(Parameter& p);
  const Matrix& value(Var v) const;

  /// Backpropagates from a 1x1 root with unit seed.
  void backward(Var root);
  /// Backpropagates an explicit upstream gradient (same shape as root).
  void backward(Var root, const Matrix& seed);

  Var matmul(Var a, Var b);
  /// a * b^T
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  /// Adds a 1 x n row to every row of a.
  Var add_row(Var a, Var row);
  Var scale(Var a, double s);
  Var relu(Var a);
  Var sigmoid(Var a);
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  /// Gathers rows of `table` (scaled by `scale`); gradients scatter back into it.
  Var embed(Parameter& table, std::span<const int> ids, double scale = 1.0);
  /// Fused multi-head scaled dot-product attention. Inputs are already
  /// projected; heads split the column dimension.
  Var attention(Var q, Var k, Var v, int heads, bool causal);
  Var dropout(Var a, double rate, Rng* rng);
  Var rows(Var a, int start, int count);
  Var mean_rows(Var a);
  /// Sum over rows of -log softmax(logits)[target]; targets < 0 are ignored.
  Var cross_entropy(Var logits, std::span<const int> targets);
  /// Binary cross entropy on a 1x1 logit.
  Var bce_with_logits(Var logit, double label);

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;  // parameter values are referenced, not copied
    Parameter* param = nullptr;
    Matrix grad;
    bool has_grad = false;
    bool needs_grad = false;
    std::function<void(Graph&)> backprop;
  };

  Var push(Matrix value, bool needs_grad, std::function<void(Graph&)> backprop);
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  Matrix& grad(Var v);
  const Matrix& upstream(int id) const { return nodes_[id].grad; }

  std::vector<Node> nodes_;
  bool record_;
};

}  // namespace dtr::nn
