#pragma once

// Minimal trainable building blocks with explicit backward passes.
// Parameters live in a ParamStore; gradients go to a separate Grads buffer
// indexed by Param::index so several workers can accumulate independently.

#include <cmath>
#include <deque>
#include <random>
#include <string>
#include <vector>

#include "zorder/core.hpp"

namespace zorder {

template <class S>
struct Param {
  std::string name;
  Matrix<S> value;
  std::size_t index = 0;
};

template <class S>
using Grads = std::vector<Matrix<S>>;

template <class S>
class ParamStore {
 public:
  Param<S>& add(std::string name, Matrix<S> init) {
    for (const auto& p : params_)
      if (p.name == name) throw Error("duplicate parameter name " + name);
    params_.push_back({std::move(name), std::move(init), params_.size()});
    return params_.back();
  }

  std::size_t size() const { return params_.size(); }
  Param<S>& operator[](std::size_t i) { return params_[i]; }
  const Param<S>& operator[](std::size_t i) const { return params_[i]; }

  Param<S>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  Grads<S> zero_grads() const {
    Grads<S> g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.push_back(Matrix<S>::Zero(p.value.rows(), p.value.cols()));
    return g;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += std::size_t(p.value.size());
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Param<S>> params_;
};

template <class S>
Matrix<S> random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = S(dist(rng));
  return m;
}

// ---------------------------------------------------------------------------
// Activations

template <class S>
S gelu(S x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const S inner = S(k) * (x + S(0.044715) * x * x * x);
  return S(0.5) * x * (S(1) + std::tanh(inner));
}

template <class S>
S gelu_grad(S x) {
  constexpr double k = 0.7978845608028654;
  const S inner = S(k) * (x + S(0.044715) * x * x * x);
  const S th = std::tanh(inner);
  return S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th * th) * S(k) * (S(1) + S(3 * 0.044715) * x * x);
}

template <class S>
S sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <class S>
S silu(S x) {
  return x * sigmoid(x);
}

template <class S>
S silu_grad(S x) {
  const S s = sigmoid(x);
  return s + x * s * (S(1) - s);
}

/// ln(1 + e^x) in the overflow-free form max(x, 0) + ln(1 + e^-|x|).
template <class S>
S softplus(S x) {
  return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <class S>
Matrix<S> apply(const Matrix<S>& x, S (*f)(S)) {
  return x.unaryExpr(f);
}

// ---------------------------------------------------------------------------
// Layers

template <class S>
struct Linear {
  Param<S>* weight = nullptr;  // in x out
  Param<S>* bias = nullptr;    // 1 x out

  static Linear create(ParamStore<S>& store, const std::string& name, int in, int out, double stddev,
                       std::mt19937_64& rng) {
    Linear l;
    l.weight = &store.add(name + ".weight", random_normal<S>(in, out, stddev, rng));
    l.bias = &store.add(name + ".bias", Matrix<S>::Zero(1, out));
    return l;
  }

  int in() const { return int(weight->value.rows()); }
  int out() const { return int(weight->value.cols()); }

  Matrix<S> forward(const Matrix<S>& x) const {
    Matrix<S> y = x * weight->value;
    y.rowwise() += bias->value.row(0);
    return y;
  }

  /// Accumulates parameter gradients and returns dL/dx.
  Matrix<S> backward(const Matrix<S>& x, const Matrix<S>& dy, Grads<S>& g) const {
    g[weight->index].noalias() += x.transpose() * dy;
    g[bias->index].row(0) += dy.colwise().sum();
    return dy * weight->value.transpose();
  }

  void backward_params_only(const Matrix<S>& x, const Matrix<S>& dy, Grads<S>& g) const {
    g[weight->index].noalias() += x.transpose() * dy;
    g[bias->index].row(0) += dy.colwise().sum();
  }
};

template <class S>
struct LayerNormCache {
  Matrix<S> xhat;
  RowVector<S> rstd;  // one entry per row
};

template <class S>
struct LayerNorm {
  Param<S>* gain = nullptr;
  Param<S>* shift = nullptr;
  S eps = S(1e-5);

  static LayerNorm create(ParamStore<S>& store, const std::string& name, int dim) {
    LayerNorm n;
    n.gain = &store.add(name + ".gain", Matrix<S>::Ones(1, dim));
    n.shift = &store.add(name + ".shift", Matrix<S>::Zero(1, dim));
    return n;
  }

  Matrix<S> forward(const Matrix<S>& x, LayerNormCache<S>* cache = nullptr) const {
    const Eigen::Index D = x.cols();
    Matrix<S> xhat(x.rows(), D);
    RowVector<S> rstd(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const S mean = x.row(r).mean();
      const S var = (x.row(r).array() - mean).square().sum() / S(D);
      rstd[r] = S(1) / std::sqrt(var + eps);
      xhat.row(r) = (x.row(r).array() - mean) * rstd[r];
    }
    Matrix<S> y = (xhat.array().rowwise() * gain->value.row(0).array()).matrix();
    y.rowwise() += shift->value.row(0);
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->rstd = std::move(rstd);
    }
    return y;
  }

  Matrix<S> backward(const LayerNormCache<S>& c, const Matrix<S>& dy, Grads<S>& g) const {
    const Eigen::Index D = dy.cols();
    g[gain->index].row(0) += (dy.array() * c.xhat.array()).matrix().colwise().sum();
    g[shift->index].row(0) += dy.colwise().sum();
    Matrix<S> dxhat = (dy.array().rowwise() * gain->value.row(0).array()).matrix();
    Matrix<S> dx(dy.rows(), D);
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const S mean_d = dxhat.row(r).mean();
      const S mean_dx = (dxhat.row(r).array() * c.xhat.row(r).array()).mean();
      dx.row(r) = (dxhat.row(r).array() - mean_d - c.xhat.row(r).array() * mean_dx) * c.rstd[r];
    }
    return dx;
  }
};

}  // namespace zorder
