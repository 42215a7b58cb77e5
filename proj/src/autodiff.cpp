// Copyright 2026 xsa contributors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#include "xsa/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace xsa::ag {

namespace {

// broadcast rule: an operand with batch 1 is shared across items
std::size_t pick(std::size_t i, std::size_t batch) { return batch == 1 ? 0 : i; }

std::size_t out_batch(const Batch& a, const Batch& b) {
  require(a.size() == b.size() || a.size() == 1 || b.size() == 1,
          "autodiff: incompatible batch sizes");
  return std::max(a.size(), b.size());
}

}  // namespace

Var Tape::constant(Batch v) { return leaf(std::move(v), false); }
Var Tape::constant(Matrix m) { return leaf(std::move(m), false); }
Var Tape::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Var Tape::leaf(Batch v, bool requires_grad) {
  Node n;
  n.value = std::move(v);
  n.requires_grad = requires_grad;
  return {this, emit(std::move(n))};
}

Var Tape::leaf(Matrix m, bool requires_grad) {
  Batch b;
  b.push_back(std::move(m));
  return leaf(std::move(b), requires_grad);
}

int Tape::emit(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size() - 1);
}

void Tape::accumulate(int idx, std::size_t item, const Matrix& g) {
  Node& n = nodes_[idx];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad.reserve(n.value.size());
    for (const auto& v : n.value) n.grad.push_back(Matrix::Zero(v.rows(), v.cols()));
  }
  n.grad[item] += g;
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.idx];
  if (n.grad.empty()) return Matrix::Zero(n.value[0].rows(), n.value[0].cols());
  return n.grad[0];
}

void Tape::backward(Var loss) {
  require(loss.valid() && loss.tape == this, "backward: loss not on this tape");
  const Node& ln = nodes_[loss.idx];
  require(ln.value.size() == 1 && ln.value[0].size() == 1, "backward: loss must be scalar");
  Matrix one(1, 1);
  one(0, 0) = 1.0;
  // seed even when the loss has no trainable ancestors; backward is a no-op then
  if (nodes_[loss.idx].requires_grad) accumulate(loss.idx, 0, one);
  for (int i = loss.idx; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this);
  }
}

// ---- arithmetic -------------------------------------------------------------

Var add(Var a, Var b) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  const Batch& bv = t.value(b);
  const std::size_t nb = out_batch(av, bv);
  Batch out(nb);
  for (std::size_t i = 0; i < nb; ++i) out[i] = av[pick(i, av.size())] + bv[pick(i, bv.size())];
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a) || t.wants_grad(b);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx, bi = b.idx, asz = static_cast<int>(av.size()),
              bsz = static_cast<int>(bv.size());
    t.node(idx).backward = [idx, ai, bi, asz, bsz](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        tp.accumulate(ai, pick(i, asz), g[i]);
        tp.accumulate(bi, pick(i, bsz), g[i]);
      }
    };
  }
  return {&t, idx};
}

Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  const Batch& bv = t.value(b);
  const std::size_t nb = out_batch(av, bv);
  Batch out(nb);
  for (std::size_t i = 0; i < nb; ++i) out[i] = av[pick(i, av.size())] - bv[pick(i, bv.size())];
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a) || t.wants_grad(b);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx, bi = b.idx, asz = static_cast<int>(av.size()),
              bsz = static_cast<int>(bv.size());
    t.node(idx).backward = [idx, ai, bi, asz, bsz](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        tp.accumulate(ai, pick(i, asz), g[i]);
        tp.accumulate(bi, pick(i, bsz), -g[i]);
      }
    };
  }
  return {&t, idx};
}

Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  const Batch& bv = t.value(b);
  const std::size_t nb = out_batch(av, bv);
  Batch out(nb);
  for (std::size_t i = 0; i < nb; ++i)
    out[i] = av[pick(i, av.size())].cwiseProduct(bv[pick(i, bv.size())]);
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a) || t.wants_grad(b);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx, bi = b.idx, asz = static_cast<int>(av.size()),
              bsz = static_cast<int>(bv.size());
    t.node(idx).backward = [idx, ai, bi, asz, bsz](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        tp.accumulate(ai, pick(i, asz),
                      g[i].cwiseProduct(tp.node(bi).value[pick(i, bsz)]));
        tp.accumulate(bi, pick(i, bsz),
                      g[i].cwiseProduct(tp.node(ai).value[pick(i, asz)]));
      }
    };
  }
  return {&t, idx};
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  Batch out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx;
    t.node(idx).backward = [idx, ai, s](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) tp.accumulate(ai, i, g[i] * s);
    };
  }
  return {&t, idx};
}

Var add_scalar(Var a, double s) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  Batch out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = (av[i].array() + s).matrix();
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx;
    t.node(idx).backward = [idx, ai](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) tp.accumulate(ai, i, g[i]);
    };
  }
  return {&t, idx};
}

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  const Batch& bv = t.value(b);
  const std::size_t nb = out_batch(av, bv);
  Batch out(nb);
  for (std::size_t i = 0; i < nb; ++i) {
    const Matrix& A = av[pick(i, av.size())];
    const Matrix& B = bv[pick(i, bv.size())];
    require(A.cols() == B.rows(), "matmul: inner dimension mismatch");
    out[i] = A * B;
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a) || t.wants_grad(b);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx, bi = b.idx, asz = static_cast<int>(av.size()),
              bsz = static_cast<int>(bv.size());
    t.node(idx).backward = [idx, ai, bi, asz, bsz](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Matrix& A = tp.node(ai).value[pick(i, asz)];
        const Matrix& B = tp.node(bi).value[pick(i, bsz)];
        tp.accumulate(ai, pick(i, asz), g[i] * B.transpose());
        tp.accumulate(bi, pick(i, bsz), A.transpose() * g[i]);
      }
    };
  }
  return {&t, idx};
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  Batch out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i].transpose();
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx;
    t.node(idx).backward = [idx, ai](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) tp.accumulate(ai, i, g[i].transpose());
    };
  }
  return {&t, idx};
}

Var add_rowvec(Var a, Var bias) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  const Matrix& b = t.item(bias);
  require(b.rows() == 1 && b.cols() == av[0].cols(), "add_rowvec: bias must be 1 x cols");
  Batch out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i].rowwise() + b.row(0);
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a) || t.wants_grad(bias);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx, bi = bias.idx;
    t.node(idx).backward = [idx, ai, bi](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        tp.accumulate(ai, i, g[i]);
        tp.accumulate(bi, 0, g[i].colwise().sum());
      }
    };
  }
  return {&t, idx};
}

Var sub_colvec(Var a, Var v) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  const Batch& vv = t.value(v);
  require(vv.size() == av.size() || vv.size() == 1, "sub_colvec: batch mismatch");
  Batch out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const Matrix& c = vv[pick(i, vv.size())];
    require(c.cols() == 1 && c.rows() == av[i].rows(), "sub_colvec: needs rows x 1 column");
    out[i] = av[i].colwise() - c.col(0);
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a) || t.wants_grad(v);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx, vi = v.idx, vsz = static_cast<int>(vv.size());
    t.node(idx).backward = [idx, ai, vi, vsz](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        tp.accumulate(ai, i, g[i]);
        tp.accumulate(vi, pick(i, vsz), -g[i].rowwise().sum());
      }
    };
  }
  return {&t, idx};
}

Var slice_cols(Var a, Eigen::Index first, Eigen::Index count) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  require(first >= 0 && first + count <= av[0].cols(), "slice_cols: out of range");
  Batch out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i].middleCols(first, count);
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx;
    t.node(idx).backward = [idx, ai, first, count](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Matrix& src = tp.node(ai).value[i];
        Matrix full = Matrix::Zero(src.rows(), src.cols());
        full.middleCols(first, count) = g[i];
        tp.accumulate(ai, i, full);
      }
    };
  }
  return {&t, idx};
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: empty input");
  Tape& t = *parts[0].tape;
  const std::size_t nb = t.value(parts[0]).size();
  Eigen::Index rows = t.value(parts[0])[0].rows();
  Eigen::Index total = 0;
  bool rg = false;
  for (const Var& p : parts) {
    require(t.value(p).size() == nb && t.value(p)[0].rows() == rows,
            "concat_cols: shape mismatch");
    total += t.value(p)[0].cols();
    rg = rg || t.wants_grad(p);
  }
  Batch out(nb, Matrix(rows, total));
  for (std::size_t i = 0; i < nb; ++i) {
    Eigen::Index c = 0;
    for (const Var& p : parts) {
      const Matrix& m = t.value(p)[i];
      out[i].middleCols(c, m.cols()) = m;
      c += m.cols();
    }
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = rg;
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    std::vector<int> pidx;
    std::vector<Eigen::Index> widths;
    for (const Var& p : parts) {
      pidx.push_back(p.idx);
      widths.push_back(t.value(p)[0].cols());
    }
    t.node(idx).backward = [idx, pidx, widths](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        Eigen::Index c = 0;
        for (std::size_t k = 0; k < pidx.size(); ++k) {
          tp.accumulate(pidx[k], i, g[i].middleCols(c, widths[k]));
          c += widths[k];
        }
      }
    };
  }
  return {&t, idx};
}

// ---- nonlinearities ---------------------------------------------------------

Var relu(Var a) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  Batch out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i].cwiseMax(0.0);
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx;
    t.node(idx).backward = [idx, ai](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Matrix& x = tp.node(ai).value[i];
        tp.accumulate(ai, i, (x.array() > 0.0).select(g[i], Matrix::Zero(x.rows(), x.cols())));
      }
    };
  }
  return {&t, idx};
}

Var elu(Var a, double alpha) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  Batch out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = av[i].unaryExpr(
        [alpha](double x) { return x > 0.0 ? x : alpha * (std::exp(x) - 1.0); });
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx;
    t.node(idx).backward = [idx, ai, alpha](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Matrix& x = tp.node(ai).value[i];
        const Matrix& y = tp.node(idx).value[i];
        // d/dx = 1 for x > 0, else alpha*exp(x) = y + alpha
        Matrix d = (x.array() > 0.0)
                       .select(Eigen::ArrayXXd::Ones(x.rows(), x.cols()), y.array() + alpha)
                       .matrix();
        tp.accumulate(ai, i, g[i].cwiseProduct(d));
      }
    };
  }
  return {&t, idx};
}

Var exp_(Var a) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  Batch out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i].array().exp().matrix();
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx;
    t.node(idx).backward = [idx, ai](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        tp.accumulate(ai, i, g[i].cwiseProduct(tp.node(idx).value[i]));
    };
  }
  return {&t, idx};
}

Var log_(Var a) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  Batch out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i].array().log().matrix();
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx;
    t.node(idx).backward = [idx, ai](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        tp.accumulate(ai, i, g[i].cwiseQuotient(tp.node(ai).value[i]));
    };
  }
  return {&t, idx};
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  Batch out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    Matrix p = av[i];
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      const double mx = p.row(r).maxCoeff();
      p.row(r) = (p.row(r).array() - mx).exp().matrix();
      p.row(r) /= p.row(r).sum();
    }
    out[i] = std::move(p);
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx;
    t.node(idx).backward = [idx, ai](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Matrix& p = tp.node(idx).value[i];
        Matrix dx(p.rows(), p.cols());
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
          const double dot = g[i].row(r).dot(p.row(r));
          dx.row(r) = ((g[i].row(r).array() - dot) * p.row(r).array()).matrix();
        }
        tp.accumulate(ai, i, dx);
      }
    };
  }
  return {&t, idx};
}

Var logsumexp_rows(Var a) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  Batch out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    Matrix l(av[i].rows(), 1);
    for (Eigen::Index r = 0; r < av[i].rows(); ++r) {
      const double mx = av[i].row(r).maxCoeff();
      l(r, 0) = mx + std::log((av[i].row(r).array() - mx).exp().sum());
    }
    out[i] = std::move(l);
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(a);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx;
    t.node(idx).backward = [idx, ai](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Matrix& x = tp.node(ai).value[i];
        const Matrix& l = tp.node(idx).value[i];
        Matrix dx(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r)
          dx.row(r) = (g[i](r, 0) * (x.row(r).array() - l(r, 0)).exp()).matrix();
        tp.accumulate(ai, i, dx);
      }
    };
  }
  return {&t, idx};
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  Tape& t = *x.tape;
  const Batch& xv = t.value(x);
  const Matrix& gm = t.item(gamma);
  const Matrix& bt = t.item(beta);
  const Eigen::Index cols = xv[0].cols();
  require(gm.rows() == 1 && gm.cols() == cols, "layer_norm: gamma must be 1 x cols");
  require(bt.rows() == 1 && bt.cols() == cols, "layer_norm: beta must be 1 x cols");
  Batch out(xv.size());
  Batch xhat(xv.size());
  std::vector<Vector> istd(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const Matrix& m = xv[i];
    Matrix h(m.rows(), m.cols());
    Vector is(m.rows());
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const double mu = m.row(r).mean();
      const double var = (m.row(r).array() - mu).square().mean();
      is(r) = 1.0 / std::sqrt(var + eps);
      h.row(r) = (m.row(r).array() - mu) * is(r);
    }
    out[i] = ((h.array().rowwise() * gm.row(0).array()).rowwise() + bt.row(0).array()).matrix();
    xhat[i] = std::move(h);
    istd[i] = std::move(is);
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(x) || t.wants_grad(gamma) || t.wants_grad(beta);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int xi = x.idx, gi = gamma.idx, bi = beta.idx;
    t.node(idx).backward = [idx, xi, gi, bi, xhat, istd](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      const Matrix& gm = tp.node(gi).value[0];
      const auto cols = static_cast<double>(xhat[0].cols());
      for (std::size_t i = 0; i < g.size(); ++i) {
        tp.accumulate(gi, 0, g[i].cwiseProduct(xhat[i]).colwise().sum());
        tp.accumulate(bi, 0, g[i].colwise().sum());
        Matrix dxhat = (g[i].array().rowwise() * gm.row(0).array()).matrix();
        Matrix dx(dxhat.rows(), dxhat.cols());
        for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
          const double m1 = dxhat.row(r).sum() / cols;
          const double m2 = dxhat.row(r).cwiseProduct(xhat[i].row(r)).sum() / cols;
          dx.row(r) = (istd[i](r) *
                       (dxhat.row(r).array() - m1 - xhat[i].row(r).array() * m2))
                          .matrix();
        }
        tp.accumulate(xi, i, dx);
      }
    };
  }
  return {&t, idx};
}

// ---- reductions -------------------------------------------------------------

Var sum_all(Var a) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  double s = 0.0;
  for (const auto& m : av) s += m.sum();
  Matrix out(1, 1);
  out(0, 0) = s;
  Node n;
  n.value = Batch{out};
  n.requires_grad = t.wants_grad(a);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx;
    t.node(idx).backward = [idx, ai](Tape& tp) {
      const double g = tp.node(idx).grad[0](0, 0);
      const Batch& av = tp.node(ai).value;
      for (std::size_t i = 0; i < av.size(); ++i)
        tp.accumulate(ai, i, Matrix::Constant(av[i].rows(), av[i].cols(), g));
    };
  }
  return {&t, idx};
}

Var mean_all(Var a) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  const double count = static_cast<double>(av.size()) * static_cast<double>(av[0].size());
  return scale(sum_all(a), 1.0 / count);
}

// ---- structure ----------------------------------------------------------------

Var flatten_items(Var a) {
  Tape& t = *a.tape;
  const Batch& av = t.value(a);
  const Eigen::Index rows = av[0].rows(), cols = av[0].cols();
  Matrix out(static_cast<Eigen::Index>(av.size()), rows * cols);
  for (std::size_t i = 0; i < av.size(); ++i)
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c)
        out(static_cast<Eigen::Index>(i), r * cols + c) = av[i](r, c);
  Node n;
  n.value = Batch{std::move(out)};
  n.requires_grad = t.wants_grad(a);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx;
    t.node(idx).backward = [idx, ai, rows, cols](Tape& tp) {
      const Matrix& g = tp.node(idx).grad[0];
      const std::size_t nb = tp.node(ai).value.size();
      for (std::size_t i = 0; i < nb; ++i) {
        Matrix d(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
          for (Eigen::Index c = 0; c < cols; ++c)
            d(r, c) = g(static_cast<Eigen::Index>(i), r * cols + c);
        tp.accumulate(ai, i, d);
      }
    };
  }
  return {&t, idx};
}

// ---- convolution / pooling ----------------------------------------------------

Var temporal_conv(Var x, Var kernels) {
  Tape& t = *x.tape;
  const Batch& xv = t.value(x);
  const Matrix& W = t.item(kernels);
  const Eigen::Index C = xv[0].rows(), T = xv[0].cols();
  const Eigen::Index F = W.rows(), k = W.cols();
  const Eigen::Index pad = (k - 1) / 2;
  Batch out(xv.size(), Matrix::Zero(F * C, T));
  for (std::size_t i = 0; i < xv.size(); ++i) {
    for (Eigen::Index f = 0; f < F; ++f) {
      for (Eigen::Index j = 0; j < k; ++j) {
        const Eigen::Index off = j - pad;
        const Eigen::Index t0 = std::max<Eigen::Index>(0, -off);
        const Eigen::Index t1 = std::min<Eigen::Index>(T, T - off);
        if (t1 <= t0) continue;
        out[i].block(f * C, t0, C, t1 - t0) += W(f, j) * xv[i].block(0, t0 + off, C, t1 - t0);
      }
    }
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(x) || t.wants_grad(kernels);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int xi = x.idx, ki = kernels.idx;
    t.node(idx).backward = [idx, xi, ki, C, T, F, k, pad](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      const Matrix& W = tp.node(ki).value[0];
      Matrix dW = Matrix::Zero(F, k);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Matrix& xm = tp.node(xi).value[i];
        Matrix dx = Matrix::Zero(C, T);
        for (Eigen::Index f = 0; f < F; ++f) {
          for (Eigen::Index j = 0; j < k; ++j) {
            const Eigen::Index off = j - pad;
            const Eigen::Index t0 = std::max<Eigen::Index>(0, -off);
            const Eigen::Index t1 = std::min<Eigen::Index>(T, T - off);
            if (t1 <= t0) continue;
            const auto gb = g[i].block(f * C, t0, C, t1 - t0);
            dW(f, j) += gb.cwiseProduct(xm.block(0, t0 + off, C, t1 - t0)).sum();
            dx.block(0, t0 + off, C, t1 - t0) += W(f, j) * gb;
          }
        }
        tp.accumulate(xi, i, dx);
      }
      tp.accumulate(ki, 0, dW);
    };
  }
  return {&t, idx};
}

Var rowwise_conv(Var x, Var kernels) {
  Tape& t = *x.tape;
  const Batch& xv = t.value(x);
  const Matrix& K = t.item(kernels);
  const Eigen::Index R = xv[0].rows(), T = xv[0].cols(), k = K.cols();
  require(K.rows() == R, "rowwise_conv: one kernel row per input row");
  const Eigen::Index pad = (k - 1) / 2;
  Batch out(xv.size(), Matrix::Zero(R, T));
  for (std::size_t i = 0; i < xv.size(); ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      const Eigen::Index off = j - pad;
      const Eigen::Index t0 = std::max<Eigen::Index>(0, -off);
      const Eigen::Index t1 = std::min<Eigen::Index>(T, T - off);
      if (t1 <= t0) continue;
      out[i].block(0, t0, R, t1 - t0).array() +=
          xv[i].block(0, t0 + off, R, t1 - t0).array().colwise() * K.col(j).array();
    }
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(x) || t.wants_grad(kernels);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int xi = x.idx, ki = kernels.idx;
    t.node(idx).backward = [idx, xi, ki, R, T, k, pad](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      const Matrix& K = tp.node(ki).value[0];
      Matrix dK = Matrix::Zero(R, k);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Matrix& xm = tp.node(xi).value[i];
        Matrix dx = Matrix::Zero(R, T);
        for (Eigen::Index j = 0; j < k; ++j) {
          const Eigen::Index off = j - pad;
          const Eigen::Index t0 = std::max<Eigen::Index>(0, -off);
          const Eigen::Index t1 = std::min<Eigen::Index>(T, T - off);
          if (t1 <= t0) continue;
          const auto gb = g[i].block(0, t0, R, t1 - t0);
          dK.col(j) += gb.cwiseProduct(xm.block(0, t0 + off, R, t1 - t0)).rowwise().sum();
          dx.block(0, t0 + off, R, t1 - t0).array() += gb.array().colwise() * K.col(j).array();
        }
        tp.accumulate(xi, i, dx);
      }
      tp.accumulate(ki, 0, dK);
    };
  }
  return {&t, idx};
}

Var row_mix_groups(Var x, Var weights, int groups) {
  Tape& t = *x.tape;
  const Batch& xv = t.value(x);
  const Matrix& W = t.item(weights);
  const Eigen::Index R = xv[0].rows(), T = xv[0].cols();
  require(groups > 0 && R % groups == 0, "row_mix_groups: rows not divisible by groups");
  require(W.rows() % groups == 0, "row_mix_groups: weight rows not divisible by groups");
  const Eigen::Index cin = R / groups;
  const Eigen::Index dm = W.rows() / groups;
  require(W.cols() == cin, "row_mix_groups: weight cols must equal rows per group");
  Batch out(xv.size(), Matrix(W.rows(), T));
  for (std::size_t i = 0; i < xv.size(); ++i)
    for (Eigen::Index g = 0; g < groups; ++g)
      out[i].block(g * dm, 0, dm, T) =
          W.block(g * dm, 0, dm, cin) * xv[i].block(g * cin, 0, cin, T);
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(x) || t.wants_grad(weights);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int xi = x.idx, wi = weights.idx;
    t.node(idx).backward = [idx, xi, wi, groups, cin, dm, T](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      const Matrix& W = tp.node(wi).value[0];
      Matrix dW = Matrix::Zero(W.rows(), W.cols());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Matrix& xm = tp.node(xi).value[i];
        Matrix dx = Matrix::Zero(xm.rows(), xm.cols());
        for (Eigen::Index gr = 0; gr < groups; ++gr) {
          const auto gb = g[i].block(gr * dm, 0, dm, T);
          dW.block(gr * dm, 0, dm, cin) += gb * xm.block(gr * cin, 0, cin, T).transpose();
          dx.block(gr * cin, 0, cin, T) += W.block(gr * dm, 0, dm, cin).transpose() * gb;
        }
        tp.accumulate(xi, i, dx);
      }
      tp.accumulate(wi, 0, dW);
    };
  }
  return {&t, idx};
}

Var avg_pool_cols(Var x, int pool) {
  Tape& t = *x.tape;
  const Batch& xv = t.value(x);
  require(pool >= 1, "avg_pool_cols: pool must be >= 1");
  const Eigen::Index R = xv[0].rows(), T = xv[0].cols();
  const Eigen::Index To = T / pool;
  require(To >= 1, "avg_pool_cols: pool longer than input");
  Batch out(xv.size(), Matrix(R, To));
  for (std::size_t i = 0; i < xv.size(); ++i)
    for (Eigen::Index c = 0; c < To; ++c)
      out[i].col(c) = xv[i].middleCols(c * pool, pool).rowwise().mean();
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(x);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int xi = x.idx;
    t.node(idx).backward = [idx, xi, R, T, To, pool](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        Matrix dx = Matrix::Zero(R, T);
        for (Eigen::Index c = 0; c < To; ++c)
          dx.middleCols(c * pool, pool).colwise() += g[i].col(c) / static_cast<double>(pool);
        tp.accumulate(xi, i, dx);
      }
    };
  }
  return {&t, idx};
}

// ---- batch norm / dropout ------------------------------------------------------

Var batch_norm(Var x, Var gamma, Var beta, int n_groups, Matrix* running_mean,
               Matrix* running_var, bool training, double momentum, double eps) {
  Tape& t = *x.tape;
  const Batch& xv = t.value(x);
  const Matrix& gm = t.item(gamma);
  const Matrix& bt = t.item(beta);
  const Eigen::Index R = xv[0].rows(), T = xv[0].cols();
  require(R % n_groups == 0, "batch_norm: rows not divisible by groups");
  const Eigen::Index rpg = R / n_groups;
  require(gm.rows() == 1 && gm.cols() == n_groups, "batch_norm: gamma must be 1 x groups");
  require(bt.rows() == 1 && bt.cols() == n_groups, "batch_norm: beta must be 1 x groups");
  require(running_mean != nullptr && running_var != nullptr, "batch_norm: stats required");
  require(running_mean->cols() == n_groups && running_var->cols() == n_groups,
          "batch_norm: running stats must be 1 x groups");

  Vector mean(n_groups), var(n_groups);
  if (training) {
    const double m = static_cast<double>(xv.size()) * static_cast<double>(rpg * T);
    for (int g = 0; g < n_groups; ++g) {
      double s = 0.0, s2 = 0.0;
      for (const auto& item : xv) {
        const auto blk = item.block(g * rpg, 0, rpg, T);
        s += blk.sum();
        s2 += blk.squaredNorm();
      }
      mean(g) = s / m;
      var(g) = std::max(0.0, s2 / m - mean(g) * mean(g));
    }
    running_mean->row(0) = (1.0 - momentum) * running_mean->row(0) + momentum * mean.transpose();
    running_var->row(0) = (1.0 - momentum) * running_var->row(0) + momentum * var.transpose();
  } else {
    mean = running_mean->row(0).transpose();
    var = running_var->row(0).transpose();
  }

  Vector istd(n_groups);
  for (int g = 0; g < n_groups; ++g) istd(g) = 1.0 / std::sqrt(var(g) + eps);

  Batch out(xv.size(), Matrix(R, T));
  for (std::size_t i = 0; i < xv.size(); ++i)
    for (int g = 0; g < n_groups; ++g)
      out[i].block(g * rpg, 0, rpg, T) =
          (((xv[i].block(g * rpg, 0, rpg, T).array() - mean(g)) * istd(g)) * gm(0, g) +
           bt(0, g))
              .matrix();

  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(x) || t.wants_grad(gamma) || t.wants_grad(beta);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int xi = x.idx, gi = gamma.idx, bi = beta.idx;
    t.node(idx).backward = [idx, xi, gi, bi, n_groups, rpg, T, mean, istd, training](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      const Matrix& gm = tp.node(gi).value[0];
      const double m = static_cast<double>(g.size()) * static_cast<double>(rpg * T);
      Matrix dgamma = Matrix::Zero(1, n_groups);
      Matrix dbeta = Matrix::Zero(1, n_groups);
      // per-group sums of dy and dy*xhat over the whole batch
      Vector sum_g = Vector::Zero(n_groups), sum_gx = Vector::Zero(n_groups);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Matrix& xm = tp.node(xi).value[i];
        for (int gr = 0; gr < n_groups; ++gr) {
          const auto gb = g[i].block(gr * rpg, 0, rpg, T);
          const auto xb = xm.block(gr * rpg, 0, rpg, T);
          const double sg = gb.sum();
          const double sgx = (gb.array() * ((xb.array() - mean(gr)) * istd(gr))).sum();
          sum_g(gr) += sg;
          sum_gx(gr) += sgx;
          dbeta(0, gr) += sg;
          dgamma(0, gr) += sgx;
        }
      }
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Matrix& xm = tp.node(xi).value[i];
        Matrix dx(xm.rows(), xm.cols());
        for (int gr = 0; gr < n_groups; ++gr) {
          const auto gb = g[i].block(gr * rpg, 0, rpg, T);
          const auto xb = xm.block(gr * rpg, 0, rpg, T);
          if (training) {
            auto xhat = (xb.array() - mean(gr)) * istd(gr);
            dx.block(gr * rpg, 0, rpg, T) =
                (gm(0, gr) * istd(gr) *
                 (gb.array() - sum_g(gr) / m - xhat * (sum_gx(gr) / m)))
                    .matrix();
          } else {
            dx.block(gr * rpg, 0, rpg, T) = (gm(0, gr) * istd(gr) * gb.array()).matrix();
          }
        }
        tp.accumulate(xi, i, dx);
      }
      tp.accumulate(gi, 0, dgamma);
      tp.accumulate(bi, 0, dbeta);
    };
  }
  return {&t, idx};
}

Var dropout(Var x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  require(p < 1.0, "dropout: p must be < 1");
  Tape& t = *x.tape;
  const Batch& xv = t.value(x);
  const double keep = 1.0 - p;
  Batch mask(xv.size());
  Batch out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    Matrix m(xv[i].rows(), xv[i].cols());
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        m(r, c) = rng.uniform() < keep ? 1.0 / keep : 0.0;
    out[i] = xv[i].cwiseProduct(m);
    mask[i] = std::move(m);
  }
  Node n;
  n.value = std::move(out);
  n.requires_grad = t.wants_grad(x);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int xi = x.idx;
    t.node(idx).backward = [idx, xi, mask](Tape& tp) {
      const Batch& g = tp.node(idx).grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        tp.accumulate(xi, i, g[i].cwiseProduct(mask[i]));
    };
  }
  return {&t, idx};
}

// ---- loss helpers ----------------------------------------------------------------

Var cross_entropy_logits(Var logits, const std::vector<int>& labels) {
  Tape& t = *logits.tape;
  const Matrix& z = t.item(logits);
  const auto N = z.rows();
  require(N > 0, "cross_entropy: empty batch");
  require(static_cast<Eigen::Index>(labels.size()) == N, "cross_entropy: label count mismatch");
  double loss = 0.0;
  Matrix p(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < N; ++r) {
    require(labels[r] >= 0 && labels[r] < z.cols(), "cross_entropy: label out of range");
    const double mx = z.row(r).maxCoeff();
    const double lse = mx + std::log((z.row(r).array() - mx).exp().sum());
    loss += lse - z(r, labels[r]);
    p.row(r) = (z.row(r).array() - lse).exp();
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(N);
  Node n;
  n.value = Batch{out};
  n.requires_grad = t.wants_grad(logits);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int zi = logits.idx;
    t.node(idx).backward = [idx, zi, p, labels](Tape& tp) {
      const double g = tp.node(idx).grad[0](0, 0);
      Matrix dz = p;
      for (Eigen::Index r = 0; r < dz.rows(); ++r) dz(r, labels[r]) -= 1.0;
      tp.accumulate(zi, 0, dz * (g / static_cast<double>(dz.rows())));
    };
  }
  return {&t, idx};
}

Var pairwise_sqdist(Var a, Var b) {
  Tape& t = *a.tape;
  const Matrix& A = t.item(a);
  const Matrix& B = t.item(b);
  require(A.cols() == B.cols(), "pairwise_sqdist: feature dimension mismatch");
  const Vector sa = A.rowwise().squaredNorm();
  const Vector sb = B.rowwise().squaredNorm();
  Matrix D = ((-2.0 * A * B.transpose()).colwise() + sa).rowwise() + sb.transpose();
  D = D.cwiseMax(0.0);
  Node n;
  n.value = Batch{std::move(D)};
  n.requires_grad = t.wants_grad(a) || t.wants_grad(b);
  int idx = t.emit(std::move(n));
  if (t.node(idx).requires_grad) {
    const int ai = a.idx, bi = b.idx;
    t.node(idx).backward = [idx, ai, bi](Tape& tp) {
      const Matrix& g = tp.node(idx).grad[0];
      const Matrix& A = tp.node(ai).value[0];
      const Matrix& B = tp.node(bi).value[0];
      const Vector rs = g.rowwise().sum();
      const Vector cs = g.colwise().sum();
      tp.accumulate(ai, 0, 2.0 * (rs.asDiagonal() * A - g * B));
      tp.accumulate(bi, 0, 2.0 * (cs.asDiagonal() * B - g.transpose() * A));
    };
  }
  return {&t, idx};
}

}  // namespace xsa::ag
