#include "phonhal/autodiff.hpp"

#include <cmath>

namespace phonhal::nn {

namespace {

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw Error(ErrorCode::invalid_argument, "operands live on different tapes");
}

template <typename T>
void require_shape(bool ok, const char* op, const Var<T>& a, const Var<T>& b) {
  if (!ok) {
    throw Error(ErrorCode::invalid_argument,
                std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                    " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

template <typename T>
bool needs(const Var<T>& v) {
  return v.tape()->requires_grad(v.id());
}

// Elementwise unary op with derivative computed from (input, output).
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D dfdx) {
  Tape<T>& tape = *a.tape();
  Tensor<T> out = a.value().unaryExpr(f);
  const int ia = a.id();
  return tape.push(std::move(out), needs(a), [ia, dfdx](Tape<T>& t, int self) {
    const auto& x = t.value(ia);
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (Eigen::Index i = 0; i < x.size(); ++i) ga.data()[i] += g.data()[i] * dfdx(x.data()[i], y.data()[i]);
  });
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_shape(a.cols() == b.rows(), "matmul", a, b);
  Tape<T>& tape = *a.tape();
  Tensor<T> out = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return tape.push(std::move(out), needs(a) || needs(b), [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_shape(a.cols() == b.cols(), "matmul_nt", a, b);
  Tape<T>& tape = *a.tape();
  Tensor<T> out = a.value() * b.value().transpose();
  const int ia = a.id(), ib = b.id();
  return tape.push(std::move(out), needs(a) || needs(b), [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib);
    if (t.requires_grad(ib)) t.grad(ib).noalias() += g.transpose() * t.value(ia);
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require_same_tape(x, w);
  require_same_tape(x, bias);
  require_shape(x.cols() == w.rows(), "linear", x, w);
  require_shape(bias.rows() == 1 && bias.cols() == w.cols(), "linear bias", w, bias);
  Tape<T>& tape = *x.tape();
  Tensor<T> out = x.value() * w.value();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id(), iw = w.id(), ib = bias.id();
  return tape.push(std::move(out), needs(x) || needs(w) || needs(bias), [ix, iw, ib](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ix)) t.grad(ix).noalias() += g * t.value(iw).transpose();
    if (t.requires_grad(iw)) t.grad(iw).noalias() += t.value(ix).transpose() * g;
    if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add", a, b);
  Tensor<T> out = a.value() + b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(std::move(out), needs(a) || needs(b), [ia, ib](Tape<T>& t, int self) {
    if (t.requires_grad(ia)) t.grad(ia) += t.grad(self);
    if (t.requires_grad(ib)) t.grad(ib) += t.grad(self);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub", a, b);
  Tensor<T> out = a.value() - b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(std::move(out), needs(a) || needs(b), [ia, ib](Tape<T>& t, int self) {
    if (t.requires_grad(ia)) t.grad(ia) += t.grad(self);
    if (t.requires_grad(ib)) t.grad(ib) -= t.grad(self);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul", a, b);
  Tensor<T> out = a.value().cwiseProduct(b.value());
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(std::move(out), needs(a) || needs(b), [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
    if (t.requires_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
  });
}

template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  require_same_tape(a, row);
  require_shape(row.rows() == 1 && row.cols() == a.cols(), "add_row", a, row);
  Tensor<T> out = a.value();
  out.rowwise() += row.value().row(0);
  const int ia = a.id(), ir = row.id();
  return a.tape()->push(std::move(out), needs(a) || needs(row), [ia, ir](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ir)) t.grad(ir) += g.colwise().sum();
  });
}

template <typename T>
Var<T> mul_row(const Var<T>& a, const Var<T>& row) {
  require_same_tape(a, row);
  require_shape(row.rows() == 1 && row.cols() == a.cols(), "mul_row", a, row);
  Tensor<T> out = a.value().array().rowwise() * row.value().row(0).array();
  const int ia = a.id(), ir = row.id();
  return a.tape()->push(std::move(out), needs(a) || needs(row), [ia, ir](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia).array() += g.array().rowwise() * t.value(ir).row(0).array();
    if (t.requires_grad(ir)) t.grad(ir) += g.cwiseProduct(t.value(ia)).colwise().sum();
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value() * s;
  const int ia = a.id();
  return a.tape()->push(std::move(out), needs(a), [ia, s](Tape<T>& t, int self) { t.grad(ia) += t.grad(self) * s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value().array() + s;
  const int ia = a.id();
  return a.tape()->push(std::move(out), needs(a), [ia](Tape<T>& t, int self) { t.grad(ia) += t.grad(self); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return unary(
      a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return unary(
      a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  const auto& x = a.value();
  Tensor<T> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  const int ia = a.id();
  return a.tape()->push(std::move(out), needs(a), [ia](Tape<T>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const T dot = g.row(r).dot(y.row(r));
      ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw Error(ErrorCode::invalid_argument, "concat_cols of nothing");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p);
    require_shape(p.rows() == rows, "concat_cols", parts[0], p);
    cols += p.cols();
    rg = rg || needs(p);
  }
  Tensor<T> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    layout.emplace_back(p.id(), off);
    off += p.cols();
  }
  return parts[0].tape()->push(std::move(out), rg, [layout](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    for (const auto& [id, offset] : layout) {
      if (!t.requires_grad(id)) continue;
      auto& gp = t.grad(id);
      gp += g.middleCols(offset, gp.cols());
    }
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count <= 0 || start + count > a.cols()) {
    throw Error(ErrorCode::invalid_argument, "slice_cols out of range");
  }
  Tensor<T> out = a.value().middleCols(start, count);
  const int ia = a.id();
  return a.tape()->push(std::move(out), needs(a), [ia, start, count](Tape<T>& t, int self) {
    t.grad(ia).middleCols(start, count) += t.grad(self);
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::span<const Eigen::Index> rows) {
  const auto& x = a.value();
  Tensor<T> out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw Error(ErrorCode::invalid_argument, "gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  }
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  const int ia = a.id();
  return a.tape()->push(std::move(out), needs(a), [ia, idx = std::move(idx)](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

template <typename T>
Var<T> broadcast_rows(const Var<T>& row, Eigen::Index n_rows) {
  if (row.rows() != 1) throw Error(ErrorCode::invalid_argument, "broadcast_rows expects a row vector");
  Tensor<T> out = row.value().replicate(n_rows, 1);
  const int ir = row.id();
  return row.tape()->push(std::move(out), needs(row), [ir](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& gr = t.grad(ir);
    for (Eigen::Index r = 0; r < g.rows(); ++r) gr.row(0) += g.row(r);
  });
}

template <typename T>
Var<T> mean_rows(const Var<T>& a) {
  const auto& x = a.value();
  Tensor<T> out = Tensor<T>::Zero(1, x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(0) += x.row(r);
  out /= static_cast<T>(x.rows());
  const int ia = a.id();
  return a.tape()->push(std::move(out), needs(a), [ia](Tape<T>& t, int self) {
    auto& ga = t.grad(ia);
    const auto g = t.grad(self).row(0) / static_cast<T>(ga.rows());
    for (Eigen::Index r = 0; r < ga.rows(); ++r) ga.row(r) += g;
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tensor<T> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  return a.tape()->push(std::move(out), needs(a), [ia](Tape<T>& t, int self) {
    t.grad(ia).array() += t.grad(self)(0, 0);
  });
}

#define PHONHAL_INSTANTIATE_OPS(T)                                                          \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                     \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                                  \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                      \
  template Var<T> add(const Var<T>&, const Var<T>&);                                        \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                        \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                        \
  template Var<T> add_row(const Var<T>&, const Var<T>&);                                    \
  template Var<T> mul_row(const Var<T>&, const Var<T>&);                                    \
  template Var<T> scale(const Var<T>&, T);                                                  \
  template Var<T> add_scalar(const Var<T>&, T);                                             \
  template Var<T> leaky_relu(const Var<T>&, T);                                             \
  template Var<T> sigmoid(const Var<T>&);                                                   \
  template Var<T> tanh(const Var<T>&);                                                      \
  template Var<T> exp(const Var<T>&);                                                       \
  template Var<T> square(const Var<T>&);                                                    \
  template Var<T> softmax_rows(const Var<T>&);                                              \
  template Var<T> concat_cols(std::span<const Var<T>>);                                     \
  template Var<T> slice_cols(const Var<T>&, Eigen::Index, Eigen::Index);                    \
  template Var<T> gather_rows(const Var<T>&, std::span<const Eigen::Index>);                \
  template Var<T> broadcast_rows(const Var<T>&, Eigen::Index);                              \
  template Var<T> mean_rows(const Var<T>&);                                                 \
  template Var<T> sum(const Var<T>&);

PHONHAL_INSTANTIATE_OPS(float)
PHONHAL_INSTANTIATE_OPS(double)

}  // namespace phonhal::nn
