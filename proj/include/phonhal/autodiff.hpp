#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "phonhal/error.hpp"

namespace phonhal::nn {

// Row-major 2-D tensor. Vectors are 1 x n.
template <typename T>
using Tensor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using ParamId = size_t;

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

template <typename T>
class ParameterStore {
 public:
  ParamId add(std::string name, Tensor<T> init) {
    if (index_.count(name)) throw Error(ErrorCode::invalid_argument, "duplicate parameter name " + name);
    const ParamId id = params_.size();
    index_.emplace(name, id);
    Tensor<T> grad = Tensor<T>::Zero(init.rows(), init.cols());
    params_.push_back(Parameter<T>{std::move(name), std::move(init), std::move(grad)});
    return id;
  }

  size_t size() const { return params_.size(); }
  Parameter<T>& operator[](ParamId id) { return params_[id]; }
  const Parameter<T>& operator[](ParamId id) const { return params_[id]; }
  const ParamId* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &it->second;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += static_cast<size_t>(p.value.size());
    return n;
  }

  // Same names and shapes, values converted to U.
  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, ParamId> index_;
};

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  // Scalar value of a 1 x 1 node.
  T item() const { return value()(0, 0); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Nodes are appended in evaluation order; backward() walks
// them in reverse. A non-recording tape evaluates values only.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), nullptr, {}, {}, -1, false});
    return Var<T>(this, static_cast<int>(nodes_.size() - 1));
  }

  // Leaf bound to a stored parameter. Repeated calls return the same node.
  Var<T> param(const ParameterStore<T>& store, ParamId id) {
    if (store_ != nullptr && store_ != &store) {
      throw Error(ErrorCode::invalid_argument, "tape already bound to another parameter store");
    }
    store_ = &store;
    if (param_nodes_.size() < store.size()) param_nodes_.resize(store.size(), -1);
    if (param_nodes_[id] >= 0) return Var<T>(this, param_nodes_[id]);
    nodes_.push_back(Node{Tensor<T>(), &store[id].value, {}, {}, static_cast<int>(id), record_});
    param_nodes_[id] = static_cast<int>(nodes_.size() - 1);
    return Var<T>(this, param_nodes_[id]);
  }

  // Appends an op result. `requires_grad` is true when any input needs one.
  Var<T> push(Tensor<T> value, bool requires_grad, Backward backward) {
    const bool rg = record_ && requires_grad;
    nodes_.push_back(Node{std::move(value), nullptr, {}, rg ? std::move(backward) : Backward{}, -1, rg});
    return Var<T>(this, static_cast<int>(nodes_.size() - 1));
  }

  const Tensor<T>& value(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  Tensor<T>& grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) {
      const auto& v = value(id);
      n.grad = Tensor<T>::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  void backward(const Var<T>& root) {
    if (!record_) throw Error(ErrorCode::invalid_argument, "backward on a non-recording tape");
    if (root.rows() != 1 || root.cols() != 1) throw Error(ErrorCode::invalid_argument, "backward root must be scalar");
    grad(root.id()).setConstant(T(1));
    for (int i = root.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
  }

  // Adds gradients of parameter leaves into `out` (indexed by ParamId).
  void accumulate_param_grads(std::vector<Tensor<T>>& out) const {
    for (size_t id = 0; id < param_nodes_.size(); ++id) {
      const int node = param_nodes_[id];
      if (node < 0) continue;
      const Node& n = nodes_[static_cast<size_t>(node)];
      if (n.grad.size() == 0) continue;
      out[id] += n.grad;
    }
  }

  void accumulate_param_grads(ParameterStore<T>& store) const {
    for (size_t id = 0; id < param_nodes_.size(); ++id) {
      const int node = param_nodes_[id];
      if (node < 0) continue;
      const Node& n = nodes_[static_cast<size_t>(node)];
      if (n.grad.size() == 0) continue;
      store[id].grad += n.grad;
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external;
    Tensor<T> grad;
    Backward backward;
    int param;
    bool requires_grad;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::vector<int> param_nodes_;
  const ParameterStore<T>* store_ = nullptr;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

// ---- differentiable operations -------------------------------------------

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
// a * b^T
template <typename T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
// x * w + bias (bias broadcast over rows); w is in x out.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
// Row vector broadcast over the rows of a.
template <typename T> Var<T> add_row(const Var<T>& a, const Var<T>& row);
template <typename T> Var<T> mul_row(const Var<T>& a, const Var<T>& row);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);

template <typename T> Var<T> leaky_relu(const Var<T>& a, T slope);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> tanh(const Var<T>& a);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> square(const Var<T>& a);

// Softmax over each row (last dim), max-subtracted.
template <typename T> Var<T> softmax_rows(const Var<T>& a);

template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_cols(std::initializer_list<Var<T>> parts) {
  return concat_cols<T>(std::span<const Var<T>>(parts.begin(), parts.size()));
}
template <typename T> Var<T> slice_cols(const Var<T>& a, Eigen::Index start, Eigen::Index count);
template <typename T> Var<T> gather_rows(const Var<T>& a, std::span<const Eigen::Index> rows);
// Repeats a 1 x n row n_rows times.
template <typename T> Var<T> broadcast_rows(const Var<T>& row, Eigen::Index n_rows);

// 1 x cols mean over rows, summed top to bottom.
template <typename T> Var<T> mean_rows(const Var<T>& a);
// 1 x 1 sum of all entries.
template <typename T> Var<T> sum(const Var<T>& a);

template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

}  // namespace phonhal::nn
