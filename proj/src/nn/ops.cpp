#include "udp/nn/ops.hpp"

#include <cmath>
#include <string>

#include "udp/error.hpp"

namespace udp::nn {
namespace {

void same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorKind::kShape, std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

Tape& tape_of(Var a) {
  require(a.tape() != nullptr, ErrorKind::kInvariant, "op on an unbound Var");
  return *a.tape();
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    fail(ErrorKind::kShape, "matmul: inner dimensions " + std::to_string(av.cols()) + " vs " +
                                std::to_string(bv.rows()));
  }
  Matrix out = av * bv;
  return t.record(std::move(out), {a, b}, [a, b](const Matrix& g, Tape& tp) {
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value_of(b).transpose());
    if (tp.needs_grad(b)) tp.accumulate(b, tp.value_of(a).transpose() * g);
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  return t.record(a.value().transpose(), {a},
                  [a](const Matrix& g, Tape& tp) { tp.accumulate(a, g.transpose()); });
}

Var add(Var a, Var b) {
  same_shape(a.value(), b.value(), "add");
  Tape& t = tape_of(a);
  return t.record(a.value() + b.value(), {a, b}, [a, b](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  same_shape(a.value(), b.value(), "sub");
  Tape& t = tape_of(a);
  return t.record(a.value() - b.value(), {a, b}, [a, b](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g);
    if (tp.needs_grad(b)) tp.accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  same_shape(a.value(), b.value(), "mul");
  Tape& t = tape_of(a);
  return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](const Matrix& g, Tape& tp) {
    if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value_of(b)));
    if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value_of(a)));
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  return t.record(a.value() * s, {a}, [a, s](const Matrix& g, Tape& tp) { tp.accumulate(a, g * s); });
}

Var add_scalar(Var a, double s) {
  Tape& t = tape_of(a);
  Matrix out = a.value().array() + s;
  return t.record(std::move(out), {a}, [a](const Matrix& g, Tape& tp) { tp.accumulate(a, g); });
}

Var add_row(Var a, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) fail(ErrorKind::kShape, "add_row: bad broadcast row");
  Tape& t = tape_of(a);
  Matrix out = av.rowwise() + rv.row(0);
  return t.record(std::move(out), {a, row}, [a, row](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g);
    if (tp.needs_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

Var mul_row(Var a, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) fail(ErrorKind::kShape, "mul_row: bad broadcast row");
  Tape& t = tape_of(a);
  Matrix out = av.array().rowwise() * rv.row(0).array();
  return t.record(std::move(out), {a, row}, [a, row](const Matrix& g, Tape& tp) {
    const Matrix& r = tp.value_of(row);
    if (tp.needs_grad(a)) tp.accumulate(a, (g.array().rowwise() * r.row(0).array()).matrix());
    if (tp.needs_grad(row)) tp.accumulate(row, g.cwiseProduct(tp.value_of(a)).colwise().sum());
  });
}

Var mul_col(Var a, Var col) {
  const Matrix& av = a.value();
  const Matrix& cv = col.value();
  if (cv.cols() != 1 || cv.rows() != av.rows()) fail(ErrorKind::kShape, "mul_col: bad broadcast column");
  Tape& t = tape_of(a);
  Matrix out = av.array().colwise() * cv.col(0).array();
  return t.record(std::move(out), {a, col}, [a, col](const Matrix& g, Tape& tp) {
    const Matrix& c = tp.value_of(col);
    if (tp.needs_grad(a)) tp.accumulate(a, (g.array().colwise() * c.col(0).array()).matrix());
    if (tp.needs_grad(col)) tp.accumulate(col, g.cwiseProduct(tp.value_of(a)).rowwise().sum());
  });
}

Var silu(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().unaryExpr([](double x) { return x * sigmoid(x); });
  return t.record(std::move(out), {a}, [a](const Matrix& g, Tape& tp) {
    Matrix d = tp.value_of(a).unaryExpr([](double x) {
      const double s = sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    });
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

Var tanh(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().array().tanh();
  Matrix y = out;
  return t.record(std::move(out), {a}, [a, y = std::move(y)](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var relu(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().cwiseMax(0.0);
  return t.record(std::move(out), {a}, [a](const Matrix& g, Tape& tp) {
    Matrix mask = (tp.value_of(a).array() > 0.0).cast<double>();
    tp.accumulate(a, g.cwiseProduct(mask));
  });
}

Var softplus(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().unaryExpr(
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  return t.record(std::move(out), {a}, [a](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g.cwiseProduct(tp.value_of(a).unaryExpr([](double x) { return sigmoid(x); })));
  });
}

Var exp(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().array().exp();
  Matrix keep = out;
  return t.record(std::move(out), {a}, [a, keep = std::move(keep)](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g.cwiseProduct(keep));
  });
}

Var log(Var a) {
  Tape& t = tape_of(a);
  if ((a.value().array() <= 0.0).any()) fail(ErrorKind::kNumericalDomain, "log of a non-positive value");
  Matrix out = a.value().array().log();
  return t.record(std::move(out), {a}, [a](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g.cwiseQuotient(tp.value_of(a)));
  });
}

Var square(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().array().square();
  return t.record(std::move(out), {a}, [a](const Matrix& g, Tape& tp) {
    tp.accumulate(a, 2.0 * g.cwiseProduct(tp.value_of(a)));
  });
}

Var reciprocal(Var a) {
  Tape& t = tape_of(a);
  if ((a.value().array() == 0.0).any()) fail(ErrorKind::kNumericalDomain, "reciprocal of zero");
  Matrix out = a.value().array().inverse();
  return t.record(std::move(out), {a}, [a](const Matrix& g, Tape& tp) {
    tp.accumulate(a, -g.cwiseQuotient(tp.value_of(a).array().square().matrix()));
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), ErrorKind::kArgument, "concat_cols: no inputs");
  Tape& t = tape_of(parts[0]);
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) fail(ErrorKind::kShape, "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [keep, offsets](const Matrix& g, Tape& tp) {
    for (std::size_t i = 0; i < keep.size(); ++i) {
      if (tp.needs_grad(keep[i])) tp.accumulate(keep[i], g.middleCols(offsets[i], keep[i].cols()));
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), ErrorKind::kArgument, "concat_rows: no inputs");
  Tape& t = tape_of(parts[0]);
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) fail(ErrorKind::kShape, "concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [keep, offsets](const Matrix& g, Tape& tp) {
    for (std::size_t i = 0; i < keep.size(); ++i) {
      if (tp.needs_grad(keep[i])) tp.accumulate(keep[i], g.middleRows(offsets[i], keep[i].rows()));
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) fail(ErrorKind::kShape, "slice_rows out of range");
  Tape& t = tape_of(a);
  Matrix out = a.value().middleRows(start, count);
  return t.record(std::move(out), {a}, [a, start, count](const Matrix& g, Tape& tp) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleRows(start, count) = g;
    tp.accumulate(a, full);
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) fail(ErrorKind::kShape, "slice_cols out of range");
  Tape& t = tape_of(a);
  Matrix out = a.value().middleCols(start, count);
  return t.record(std::move(out), {a}, [a, start, count](const Matrix& g, Tape& tp) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleCols(start, count) = g;
    tp.accumulate(a, full);
  });
}

Var gather_rows(Var a, std::span<const int> rows) {
  Tape& t = tape_of(a);
  const Matrix& av = a.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), av.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= av.rows()) fail(ErrorKind::kShape, "gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = av.row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {a}, [a, idx](const Matrix& g, Tape& tp) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    tp.accumulate(a, full);
  });
}

Var repeat_rows(Var a, int times) {
  require(times >= 1, ErrorKind::kArgument, "repeat_rows: times must be positive");
  Tape& t = tape_of(a);
  const Matrix& av = a.value();
  Matrix out(av.rows() * times, av.cols());
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    for (int k = 0; k < times; ++k) out.row(r * times + k) = av.row(r);
  }
  return t.record(std::move(out), {a}, [a, times](const Matrix& g, Tape& tp) {
    Matrix acc = Matrix::Zero(a.rows(), a.cols());
    for (Eigen::Index r = 0; r < acc.rows(); ++r) {
      for (int k = 0; k < times; ++k) acc.row(r) += g.row(r * times + k);
    }
    tp.accumulate(a, acc);
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a}, [a](const Matrix& g, Tape& tp) {
    tp.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  require(n > 0, ErrorKind::kArgument, "mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var row_sums(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().rowwise().sum();
  return t.record(std::move(out), {a}, [a](const Matrix& g, Tape& tp) {
    Matrix full = g.col(0).replicate(1, a.cols());
    tp.accumulate(a, full);
  });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    const double m = av.row(r).maxCoeff();
    RowVector e = (av.row(r).array() - m).exp();
    out.row(r) = e / e.sum();
  }
  Matrix y = out;
  return t.record(std::move(out), {a}, [a, y = std::move(y)](const Matrix& g, Tape& tp) {
    Vector dot = g.cwiseProduct(y).rowwise().sum();
    Matrix d = y.cwiseProduct((g.colwise() - dot));
    tp.accumulate(a, d);
  });
}

Var log_softmax_rows(Var a) {
  Tape& t = tape_of(a);
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    const double m = av.row(r).maxCoeff();
    const double lse = m + std::log((av.row(r).array() - m).exp().sum());
    out.row(r) = av.row(r).array() - lse;
  }
  Matrix y = out;
  return t.record(std::move(out), {a}, [a, y = std::move(y)](const Matrix& g, Tape& tp) {
    Matrix p = y.array().exp();
    Vector gs = g.rowwise().sum();
    Matrix d = g - (p.array().colwise() * gs.array()).matrix();
    tp.accumulate(a, d);
  });
}

Var l2_normalize_rows(Var a, double eps) {
  Tape& t = tape_of(a);
  const Matrix& av = a.value();
  Vector norms = (av.rowwise().squaredNorm().array() + eps).sqrt();
  Matrix out = av.array().colwise() / norms.array();
  Matrix y = out;
  return t.record(std::move(out), {a}, [a, y = std::move(y), norms](const Matrix& g, Tape& tp) {
    Vector dot = g.cwiseProduct(y).rowwise().sum();
    Matrix d = (g - (y.array().colwise() * dot.array()).matrix()).array().colwise() / norms.array();
    tp.accumulate(a, d);
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.cols();
  if (gamma.cols() != n || beta.cols() != n || gamma.rows() != 1 || beta.rows() != 1) {
    fail(ErrorKind::kShape, "layer_norm_rows: gain/bias shape mismatch");
  }
  Vector mu = xv.rowwise().mean();
  Matrix centered = xv.colwise() - mu;
  Vector inv_std = ((centered.array().square().rowwise().sum() / static_cast<double>(n)) + eps).rsqrt();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat, inv_std](const Matrix& g, Tape& tp) {
                    if (tp.needs_grad(gamma)) tp.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                    if (tp.needs_grad(beta)) tp.accumulate(beta, g.colwise().sum());
                    if (tp.needs_grad(x)) {
                      Matrix dxhat = g.array().rowwise() * tp.value_of(gamma).row(0).array();
                      Vector m1 = dxhat.rowwise().mean();
                      Vector m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                      Matrix dx = dxhat.colwise() - m1;
                      dx -= (xhat.array().colwise() * m2.array()).matrix();
                      dx = dx.array().colwise() * inv_std.array();
                      tp.accumulate(x, dx);
                    }
                  });
}

Var pick(Var a, std::span<const int> index) {
  const Matrix& av = a.value();
  if (static_cast<Eigen::Index>(index.size()) != av.rows()) fail(ErrorKind::kShape, "pick: one index per row");
  Tape& t = tape_of(a);
  Matrix out(av.rows(), 1);
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    const int c = index[static_cast<std::size_t>(r)];
    if (c < 0 || c >= av.cols()) fail(ErrorKind::kArgument, "pick: label out of range");
    out(r, 0) = av(r, c);
  }
  std::vector<int> idx(index.begin(), index.end());
  return t.record(std::move(out), {a}, [a, idx](const Matrix& g, Tape& tp) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    for (Eigen::Index r = 0; r < full.rows(); ++r) full(r, idx[static_cast<std::size_t>(r)]) = g(r, 0);
    tp.accumulate(a, full);
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  return scale(mean(pick(log_softmax_rows(logits), labels)), -1.0);
}

Var pairwise_sq_dist(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) fail(ErrorKind::kShape, "pairwise_sq_dist: dimension mismatch");
  Tape& t = tape_of(a);
  Matrix out(av.rows(), bv.rows());
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    for (Eigen::Index j = 0; j < bv.rows(); ++j) out(i, j) = (av.row(i) - bv.row(j)).squaredNorm();
  }
  return t.record(std::move(out), {a, b}, [a, b](const Matrix& g, Tape& tp) {
    const Matrix& A = tp.value_of(a);
    const Matrix& B = tp.value_of(b);
    if (tp.needs_grad(a)) {
      Vector gs = g.rowwise().sum();
      Matrix d = 2.0 * ((A.array().colwise() * gs.array()).matrix() - g * B);
      tp.accumulate(a, d);
    }
    if (tp.needs_grad(b)) {
      Vector gs = g.colwise().sum().transpose();
      Matrix d = 2.0 * ((B.array().colwise() * gs.array()).matrix() - g.transpose() * A);
      tp.accumulate(b, d);
    }
  });
}

Var grouped_dot(Var q, Var keys, int groups) {
  const Matrix& qv = q.value();
  const Matrix& kv = keys.value();
  if (groups < 1 || kv.rows() != qv.rows() * groups || kv.cols() != qv.cols()) {
    fail(ErrorKind::kShape, "grouped_dot: keys must be (rows*groups x d)");
  }
  Tape& t = tape_of(q);
  Matrix out(qv.rows(), groups);
  for (Eigen::Index b = 0; b < qv.rows(); ++b) {
    for (int k = 0; k < groups; ++k) out(b, k) = qv.row(b).dot(kv.row(b * groups + k));
  }
  return t.record(std::move(out), {q, keys}, [q, keys, groups](const Matrix& g, Tape& tp) {
    const Matrix& Q = tp.value_of(q);
    const Matrix& K = tp.value_of(keys);
    if (tp.needs_grad(q)) {
      Matrix d = Matrix::Zero(Q.rows(), Q.cols());
      for (Eigen::Index b = 0; b < Q.rows(); ++b) {
        for (int k = 0; k < groups; ++k) d.row(b) += g(b, k) * K.row(b * groups + k);
      }
      tp.accumulate(q, d);
    }
    if (tp.needs_grad(keys)) {
      Matrix d(K.rows(), K.cols());
      for (Eigen::Index b = 0; b < Q.rows(); ++b) {
        for (int k = 0; k < groups; ++k) d.row(b * groups + k) = g(b, k) * Q.row(b);
      }
      tp.accumulate(keys, d);
    }
  });
}

Var multi_head_attention(Var q, Var k, Var v, int seq_len, int heads) {
  const Matrix& Q = q.value();
  same_shape(Q, k.value(), "attention q/k");
  same_shape(Q, v.value(), "attention q/v");
  if (seq_len < 1 || Q.rows() % seq_len != 0) fail(ErrorKind::kShape, "attention: rows not a multiple of seq_len");
  if (heads < 1 || Q.cols() % heads != 0) fail(ErrorKind::kShape, "attention: width not divisible by heads");
  Tape& t = tape_of(q);
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  const Eigen::Index batch = Q.rows() / seq_len;
  const Eigen::Index dh = Q.cols() / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[b * heads + h] is the L x L attention matrix.
  std::vector<Matrix> probs(static_cast<std::size_t>(batch * heads));
  Matrix out(Q.rows(), Q.cols());
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto qb = Q.block(b * seq_len, h * dh, seq_len, dh);
      auto kb = K.block(b * seq_len, h * dh, seq_len, dh);
      auto vb = V.block(b * seq_len, h * dh, seq_len, dh);
      Matrix s = (qb * kb.transpose()) * inv;
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double m = s.row(r).maxCoeff();
        RowVector e = (s.row(r).array() - m).exp();
        s.row(r) = e / e.sum();
      }
      out.block(b * seq_len, h * dh, seq_len, dh) = s * vb;
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(s);
    }
  }
  return t.record(std::move(out), {q, k, v},
                  [q, k, v, seq_len, heads, batch, dh, inv, probs = std::move(probs)](const Matrix& g,
                                                                                      Tape& tp) {
                    const Matrix& Qv = tp.value_of(q);
                    const Matrix& Kv = tp.value_of(k);
                    const Matrix& Vv = tp.value_of(v);
                    Matrix dq = Matrix::Zero(Qv.rows(), Qv.cols());
                    Matrix dk = Matrix::Zero(Qv.rows(), Qv.cols());
                    Matrix dv = Matrix::Zero(Qv.rows(), Qv.cols());
                    for (Eigen::Index b = 0; b < batch; ++b) {
                      for (int h = 0; h < heads; ++h) {
                        const Matrix& p = probs[static_cast<std::size_t>(b * heads + h)];
                        auto go = g.block(b * seq_len, h * dh, seq_len, dh);
                        auto qb = Qv.block(b * seq_len, h * dh, seq_len, dh);
                        auto kb = Kv.block(b * seq_len, h * dh, seq_len, dh);
                        auto vb = Vv.block(b * seq_len, h * dh, seq_len, dh);
                        dv.block(b * seq_len, h * dh, seq_len, dh) = p.transpose() * go;
                        Matrix dp = go * vb.transpose();
                        Vector rs = dp.cwiseProduct(p).rowwise().sum();
                        Matrix ds = p.cwiseProduct(dp.colwise() - rs) * inv;
                        dq.block(b * seq_len, h * dh, seq_len, dh) = ds * kb;
                        dk.block(b * seq_len, h * dh, seq_len, dh) = ds.transpose() * qb;
                      }
                    }
                    tp.accumulate(q, dq);
                    tp.accumulate(k, dk);
                    tp.accumulate(v, dv);
                  });
}

}  // namespace udp::nn
