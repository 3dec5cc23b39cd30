#include "dtr/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dtr::nn {

Parameter& ParameterStore::add(const std::string& name, Matrix init) {
  auto [it, inserted] = params_.try_emplace(name);
  if (!inserted) throw std::invalid_argument("duplicate parameter: " + name);
  it->second.value = std::move(init);
  it->second.grad = Matrix::Zero(it->second.value.rows(), it->second.value.cols());
  return it->second;
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

void ParameterStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

void ParameterStore::set_frozen(bool frozen) {
  for (auto& [_, p] : params_) p.frozen = frozen;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

double ParameterStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& [_, p] : params_) {
    if (!p.frozen) sq += p.grad.squaredNorm();
  }
  return std::sqrt(sq);
}

void ParameterStore::scale_grad(double factor) {
  for (auto& [_, p] : params_) p.grad *= factor;
}

Var Graph::push(Matrix value, bool needs_grad, std::function<void(Graph&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = record_ && needs_grad;
  if (n.needs_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::input(Matrix value) { return push(std::move(value), false, nullptr); }

Var Graph::param(Parameter& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.needs_grad = record_ && !p.frozen;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Graph::value(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  return n.external ? *n.external : n.value;
}

Matrix& Graph::grad(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.param) {
    Matrix& g = n.param->grad;
    if (g.rows() != n.param->value.rows() || g.cols() != n.param->value.cols()) {
      g = Matrix::Zero(n.param->value.rows(), n.param->value.cols());
    }
    n.has_grad = true;
    return g;
  }
  if (!n.has_grad) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::backward(Var root) {
  const Matrix& v = value(root);
  if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("backward(): root must be scalar");
  backward(root, Matrix::Ones(1, 1));
}

void Graph::backward(Var root, const Matrix& seed) {
  if (!record_) throw std::logic_error("backward() on a non-recording graph");
  if (!needs(root)) return;
  const Matrix& v = value(root);
  if (seed.rows() != v.rows() || seed.cols() != v.cols()) {
    throw std::invalid_argument("backward(): seed shape mismatch");
  }
  grad(root) += seed;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.has_grad && n.backprop) n.backprop(*this);
  }
}

Var Graph::matmul(Var a, Var b) {
  Matrix out = value(a) * value(b);
  return push(std::move(out), needs(a) || needs(b), [a, b, self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
    const Matrix& up = g.upstream(self.id);
    if (g.needs(a)) g.grad(a).noalias() += up * g.value(b).transpose();
    if (g.needs(b)) g.grad(b).noalias() += g.value(a).transpose() * up;
  });
}

Var Graph::matmul_nt(Var a, Var b) {
  Matrix out = value(a) * value(b).transpose();
  return push(std::move(out), needs(a) || needs(b), [a, b, self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
    const Matrix& up = g.upstream(self.id);
    if (g.needs(a)) g.grad(a).noalias() += up * g.value(b);
    if (g.needs(b)) g.grad(b).noalias() += up.transpose() * g.value(a);
  });
}

Var Graph::add(Var a, Var b) {
  Matrix out = value(a) + value(b);
  return push(std::move(out), needs(a) || needs(b), [a, b, self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
    const Matrix& up = g.upstream(self.id);
    if (g.needs(a)) g.grad(a) += up;
    if (g.needs(b)) g.grad(b) += up;
  });
}

Var Graph::add_row(Var a, Var row) {
  Matrix out = value(a);
  out.rowwise() += value(row).row(0);
  return push(std::move(out), needs(a) || needs(row), [a, row, self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
    const Matrix& up = g.upstream(self.id);
    if (g.needs(a)) g.grad(a) += up;
    if (g.needs(row)) g.grad(row) += up.colwise().sum();
  });
}

Var Graph::scale(Var a, double s) {
  Matrix out = value(a) * s;
  return push(std::move(out), needs(a), [a, s, self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
    g.grad(a) += g.upstream(self.id) * s;
  });
}

Var Graph::relu(Var a) {
  Matrix out = value(a).cwiseMax(0.0);
  return push(std::move(out), needs(a), [a, self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
    const Matrix& x = g.value(a);
    g.grad(a) += (x.array() > 0.0).select(g.upstream(self.id), 0.0);
  });
}

Var Graph::sigmoid(Var a) {
  Matrix out = (1.0 / (1.0 + (-value(a).array()).exp())).matrix();
  return push(std::move(out), needs(a), [a, self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
    const Matrix& y = g.value(self);
    g.grad(a).array() += g.upstream(self.id).array() * y.array() * (1.0 - y.array());
  });
}

Var Graph::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& in = value(x);
  const auto n = in.cols();
  Matrix xhat(in.rows(), n);
  RowVector inv(in.rows());
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const double mu = in.row(r).mean();
    const double var = (in.row(r).array() - mu).square().mean();
    inv(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (in.row(r).array() - mu) * inv(r);
  }
  Matrix out = xhat;
  out.array().rowwise() *= value(gain).row(0).array();
  out.rowwise() += value(bias).row(0);
  return push(std::move(out), needs(x) || needs(gain) || needs(bias),
              [x, gain, bias, xhat = std::move(xhat), inv = std::move(inv),
               self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
                const Matrix& up = g.upstream(self.id);
                if (g.needs(gain)) g.grad(gain) += (up.array() * xhat.array()).colwise().sum().matrix();
                if (g.needs(bias)) g.grad(bias) += up.colwise().sum();
                if (g.needs(x)) {
                  Matrix dxhat = up;
                  dxhat.array().rowwise() *= g.value(gain).row(0).array();
                  Matrix& dx = g.grad(x);
                  const double n_inv = 1.0 / static_cast<double>(xhat.cols());
                  for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                    const double mean_d = dxhat.row(r).sum() * n_inv;
                    const double mean_dx = dxhat.row(r).dot(xhat.row(r)) * n_inv;
                    dx.row(r).array() += inv(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
                  }
                }
              });
}

Var Graph::embed(Parameter& table, std::span<const int> ids, double scale) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.value.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.value.rows()) throw std::out_of_range("embed(): token id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value.row(ids[i]) * scale;
  }
  std::vector<int> idx(ids.begin(), ids.end());
  Parameter* tp = &table;
  return push(std::move(out), !table.frozen, [tp, idx = std::move(idx), scale, self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
    const Matrix& up = g.upstream(self.id);
    if (tp->grad.rows() != tp->value.rows() || tp->grad.cols() != tp->value.cols()) {
      tp->grad = Matrix::Zero(tp->value.rows(), tp->value.cols());
    }
    for (std::size_t i = 0; i < idx.size(); ++i) tp->grad.row(idx[i]) += up.row(static_cast<Eigen::Index>(i)) * scale;
  });
}

Var Graph::attention(Var q, Var k, Var v, int heads, bool causal) {
  const Matrix& Q = value(q);
  const Matrix& K = value(k);
  const Matrix& V = value(v);
  const auto d = Q.cols();
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("attention(): hidden not divisible by heads");
  if (causal && Q.rows() != K.rows()) throw std::invalid_argument("attention(): causal mask needs square scores");
  const auto dh = d / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix out(Q.rows(), d);
  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const auto c0 = h * dh;
    Matrix S = (Q.middleCols(c0, dh) * K.middleCols(c0, dh).transpose()) * s;
    for (Eigen::Index r = 0; r < S.rows(); ++r) {
      if (causal) {
        for (Eigen::Index c = r + 1; c < S.cols(); ++c) S(r, c) = -std::numeric_limits<double>::infinity();
      }
      const double mx = S.row(r).maxCoeff();
      S.row(r) = (S.row(r).array() - mx).exp().matrix();
      S.row(r) /= S.row(r).sum();
    }
    out.middleCols(c0, dh).noalias() = S * V.middleCols(c0, dh);
    probs[static_cast<std::size_t>(h)] = std::move(S);
  }
  return push(std::move(out), needs(q) || needs(k) || needs(v),
              [q, k, v, heads, dh, s, probs = std::move(probs), self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
                const Matrix& up = g.upstream(self.id);
                const Matrix& Q = g.value(q);
                const Matrix& K = g.value(k);
                const Matrix& V = g.value(v);
                for (int h = 0; h < heads; ++h) {
                  const auto c0 = h * dh;
                  const Matrix& P = probs[static_cast<std::size_t>(h)];
                  const auto dO = up.middleCols(c0, dh);
                  if (g.needs(v)) g.grad(v).middleCols(c0, dh).noalias() += P.transpose() * dO;
                  if (!g.needs(q) && !g.needs(k)) continue;
                  Matrix dP = dO * V.middleCols(c0, dh).transpose();
                  Matrix dS = P.array() * (dP.colwise() - (dP.array() * P.array()).rowwise().sum().matrix()).array();
                  if (g.needs(q)) g.grad(q).middleCols(c0, dh).noalias() += (dS * K.middleCols(c0, dh)) * s;
                  if (g.needs(k)) g.grad(k).middleCols(c0, dh).noalias() += (dS.transpose() * Q.middleCols(c0, dh)) * s;
                }
              });
}

Var Graph::dropout(Var a, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return a;
  const Matrix& x = value(a);
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix mask(x.rows(), x.cols());
  const double inv = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? inv : 0.0;
  Matrix out = x.cwiseProduct(mask);
  return push(std::move(out), needs(a), [a, mask = std::move(mask), self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
    g.grad(a) += g.upstream(self.id).cwiseProduct(mask);
  });
}

Var Graph::rows(Var a, int start, int count) {
  const Matrix& x = value(a);
  if (start < 0 || count < 0 || start + count > x.rows()) throw std::out_of_range("rows(): slice out of range");
  Matrix out = x.middleRows(start, count);
  return push(std::move(out), needs(a), [a, start, count, self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
    g.grad(a).middleRows(start, count) += g.upstream(self.id);
  });
}

Var Graph::mean_rows(Var a) {
  const Matrix& x = value(a);
  Matrix out = x.colwise().mean();
  const auto n = x.rows();
  return push(std::move(out), needs(a), [a, n, self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
    g.grad(a).rowwise() += g.upstream(self.id).row(0) / static_cast<double>(n);
  });
}

Var Graph::cross_entropy(Var logits, std::span<const int> targets) {
  const Matrix& z = value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != z.rows()) throw std::invalid_argument("cross_entropy(): row/target mismatch");
  Matrix probs(z.rows(), z.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double mx = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - mx).exp().matrix();
    const double sum = probs.row(r).sum();
    probs.row(r) /= sum;
    const int t = targets[static_cast<std::size_t>(r)];
    if (t >= 0) loss += (mx + std::log(sum)) - z(r, t);
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return push(Matrix::Constant(1, 1, loss), needs(logits),
              [logits, probs = std::move(probs), tg = std::move(tg), self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
                const double up = g.upstream(self.id)(0, 0);
                Matrix& dz = g.grad(logits);
                for (Eigen::Index r = 0; r < probs.rows(); ++r) {
                  const int t = tg[static_cast<std::size_t>(r)];
                  if (t < 0) continue;
                  dz.row(r) += probs.row(r) * up;
                  dz(r, t) -= up;
                }
              });
}

Var Graph::bce_with_logits(Var logit, double label) {
  const double z = value(logit)(0, 0);
  // log(1 + exp(z)) - label * z, evaluated stably
  const double loss = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - label * z;
  const double p = 1.0 / (1.0 + std::exp(-z));
  return push(Matrix::Constant(1, 1, loss), needs(logit), [logit, p, label, self = Var{static_cast<int>(nodes_.size())}](Graph& g) {
    g.grad(logit)(0, 0) += g.upstream(self.id)(0, 0) * (p - label);
  });
}

}  // namespace dtr::nn
