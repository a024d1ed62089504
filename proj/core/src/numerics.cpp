#include "emformer/numerics.hpp"

#include <cmath>
#include <string>

namespace emformer {

namespace {

thread_local std::uint64_t t_flops = 0;

std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename Real>
std::vector<Real> column_sums(const Matrix<Real>& m) {
  std::vector<Real> out(m.cols(), Real(0));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += r[j];
  }
  return out;
}

template <typename Real>
void check_attention_shapes(const Matrix<Real>& q, const Matrix<Real>& k, const Matrix<Real>& v,
                            const BoolMask& mask, const Matrix<Real>& w_out, std::size_t heads) {
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw ShapeError("attention: q/k/v shapes " + shape_str(q.rows(), q.cols()) + ", " +
                     shape_str(k.rows(), k.cols()) + ", " + shape_str(v.rows(), v.cols()));
  }
  if (mask.rows() != q.rows() || mask.cols() != k.rows()) {
    throw ShapeError("attention: mask " + shape_str(mask.rows(), mask.cols()) + " vs " +
                     shape_str(q.rows(), k.rows()));
  }
  if (w_out.rows() != d || w_out.cols() != d) throw ShapeError("attention: w_out must be dxd");
}

// Scaled scores for one head; disallowed entries are left at zero and never
// read by masked_softmax.
template <typename Real>
Matrix<Real> head_scores(const Matrix<Real>& q, const Matrix<Real>& k, const BoolMask& mask,
                         std::size_t offset, std::size_t head_dim, Real scale) {
  Matrix<Real> s(q.rows(), k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const Real* qi = q.row(i).data() + offset;
    for (std::size_t j = 0; j < k.rows(); ++j) {
      if (!mask(i, j)) continue;
      const Real* kj = k.row(j).data() + offset;
      Real acc = 0;
      for (std::size_t c = 0; c < head_dim; ++c) acc += qi[c] * kj[c];
      s(i, j) = acc * scale;
    }
  }
  return s;
}

std::uint64_t allowed_pairs(const BoolMask& mask) {
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < mask.rows(); ++i) n += mask.allowed_in_row(i);
  return n;
}

}  // namespace

std::uint64_t flop_count() { return t_flops; }
void reset_flop_count() { t_flops = 0; }

namespace detail {
void add_flops(std::uint64_t n) { t_flops += n; }
}  // namespace detail

template <typename Real>
Matrix<Real> matmul(const Matrix<Real>& a, const Matrix<Real>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " * " + shape_str(b.rows(), b.cols()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix<Real> c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    Real* ci = c.row(i).data();
    const Real* ai = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = ai[p];
      const Real* bp = b.row(p).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  detail::add_flops(static_cast<std::uint64_t>(m) * k * n);
  return c;
}

template <typename Real>
Matrix<Real> matmul_nt(const Matrix<Real>& a, const Matrix<Real>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(a.rows(), a.cols()) + " * " +
                     shape_str(b.rows(), b.cols()) + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Matrix<Real> c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const Real* ai = a.row(i).data();
    for (std::size_t j = 0; j < n; ++j) {
      const Real* bj = b.row(j).data();
      Real acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c(i, j) = acc;
    }
  }
  detail::add_flops(static_cast<std::uint64_t>(m) * k * n);
  return c;
}

template <typename Real>
Matrix<Real> matmul_tn(const Matrix<Real>& a, const Matrix<Real>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + shape_str(a.rows(), a.cols()) + "^T * " +
                     shape_str(b.rows(), b.cols()));
  }
  const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
  Matrix<Real> c(m, n);
  for (std::size_t p = 0; p < k; ++p) {
    const Real* ap = a.row(p).data();
    const Real* bp = b.row(p).data();
    for (std::size_t i = 0; i < m; ++i) {
      const Real api = ap[i];
      Real* ci = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
  detail::add_flops(static_cast<std::uint64_t>(m) * k * n);
  return c;
}

template <typename Real>
MatmulGrads<Real> matmul_vjp(const Matrix<Real>& a, const Matrix<Real>& b, const Matrix<Real>& dc) {
  if (dc.rows() != a.rows() || dc.cols() != b.cols() || a.cols() != b.rows()) {
    throw ShapeError("matmul_vjp: shape mismatch");
  }
  return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

template <typename Real>
Matrix<Real> layer_norm(const Matrix<Real>& x, ConstSpan<Real> gain, ConstSpan<Real> bias,
                        Real eps) {
  const std::size_t d = x.cols();
  if (d == 0) throw ShapeError("layer_norm: zero feature dimension");
  if (gain.size() != d || bias.size() != d) throw ShapeError("layer_norm: gain/bias length mismatch");
  if (!(eps > Real(0))) throw ShapeError("layer_norm: eps must be positive");
  Matrix<Real> y(x.rows(), d);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row(i);
    auto yi = y.row(i);
    Real mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= Real(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const Real c = xi[j] - mean;
      var += c * c;
    }
    var /= Real(d);
    const Real inv = Real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) yi[j] = gain[j] * ((xi[j] - mean) * inv) + bias[j];
  }
  return y;
}

template <typename Real>
LayerNormGrads<Real> layer_norm_vjp(const Matrix<Real>& x, ConstSpan<Real> gain, Real eps,
                                    const Matrix<Real>& dy) {
  const std::size_t d = x.cols();
  if (d == 0) throw ShapeError("layer_norm_vjp: zero feature dimension");
  if (gain.size() != d || dy.rows() != x.rows() || dy.cols() != d) {
    throw ShapeError("layer_norm_vjp: shape mismatch");
  }
  LayerNormGrads<Real> g{Matrix<Real>(x.rows(), d), std::vector<Real>(d, Real(0)),
                         std::vector<Real>(d, Real(0))};
  std::vector<Real> xhat(d), dxhat(d);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row(i);
    auto dyi = dy.row(i);
    Real mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= Real(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const Real c = xi[j] - mean;
      var += c * c;
    }
    var /= Real(d);
    const Real inv = Real(1) / std::sqrt(var + eps);
    Real mean_dxhat = 0, mean_dxhat_xhat = 0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (xi[j] - mean) * inv;
      dxhat[j] = dyi[j] * gain[j];
      g.dgain[j] += dyi[j] * xhat[j];
      g.dbias[j] += dyi[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
    }
    mean_dxhat /= Real(d);
    mean_dxhat_xhat /= Real(d);
    auto dxi = g.dx.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      dxi[j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
  }
  return g;
}

template <typename Real>
Matrix<Real> masked_softmax(const Matrix<Real>& scores, const BoolMask& mask) {
  if (mask.rows() != scores.rows() || mask.cols() != scores.cols()) {
    throw ShapeError("masked_softmax: mask " + shape_str(mask.rows(), mask.cols()) + " vs scores " +
                     shape_str(scores.rows(), scores.cols()));
  }
  Matrix<Real> p(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    auto si = scores.row(i);
    auto pi = p.row(i);
    bool any = false;
    Real mx = 0;
    for (std::size_t j = 0; j < si.size(); ++j) {
      if (!mask(i, j)) continue;
      if (!any || si[j] > mx) mx = si[j];
      any = true;
    }
    if (!any) throw DegenerateRowError("masked_softmax: row " + std::to_string(i) + " has no allowed key");
    Real sum = 0;
    for (std::size_t j = 0; j < si.size(); ++j) {
      if (!mask(i, j)) continue;
      pi[j] = std::exp(si[j] - mx);
      sum += pi[j];
    }
    for (std::size_t j = 0; j < si.size(); ++j) {
      if (mask(i, j)) pi[j] /= sum;
    }
  }
  return p;
}

template <typename Real>
Matrix<Real> masked_softmax_vjp(const Matrix<Real>& p, const Matrix<Real>& dp) {
  if (p.rows() != dp.rows() || p.cols() != dp.cols()) throw ShapeError("masked_softmax_vjp: shape mismatch");
  Matrix<Real> ds(p.rows(), p.cols());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto pi = p.row(i);
    auto dpi = dp.row(i);
    Real dot = 0;
    for (std::size_t j = 0; j < pi.size(); ++j) dot += pi[j] * dpi[j];
    auto dsi = ds.row(i);
    for (std::size_t j = 0; j < pi.size(); ++j) dsi[j] = pi[j] * (dpi[j] - dot);
  }
  return ds;
}

template <typename Real>
Matrix<Real> multi_head_attention(const Matrix<Real>& q, const Matrix<Real>& k, const Matrix<Real>& v,
                                  const BoolMask& mask, const Matrix<Real>& w_out, std::size_t heads,
                                  AttentionProbs<Real>* probs) {
  check_attention_shapes(q, k, v, mask, w_out, heads);
  const std::size_t d = q.cols();
  const std::size_t head_dim = d / heads;
  const Real scale = Real(1) / std::sqrt(Real(head_dim));
  if (probs) probs->heads.clear();

  Matrix<Real> ctx(q.rows(), d);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * head_dim;
    Matrix<Real> p = masked_softmax(head_scores(q, k, mask, off, head_dim, scale), mask);
    for (std::size_t i = 0; i < q.rows(); ++i) {
      Real* ci = ctx.row(i).data() + off;
      for (std::size_t j = 0; j < k.rows(); ++j) {
        if (!mask(i, j)) continue;
        const Real pij = p(i, j);
        const Real* vj = v.row(j).data() + off;
        for (std::size_t c = 0; c < head_dim; ++c) ci[c] += pij * vj[c];
      }
    }
    if (probs) probs->heads.push_back(std::move(p));
  }
  detail::add_flops(2 * allowed_pairs(mask) * d);
  return matmul(ctx, w_out);
}

template <typename Real>
AttentionGrads<Real> multi_head_attention_vjp(const Matrix<Real>& q, const Matrix<Real>& k,
                                              const Matrix<Real>& v, const BoolMask& mask,
                                              const Matrix<Real>& w_out, std::size_t heads,
                                              const Matrix<Real>& dout) {
  check_attention_shapes(q, k, v, mask, w_out, heads);
  if (dout.rows() != q.rows() || dout.cols() != q.cols()) throw ShapeError("attention_vjp: dout shape");
  const std::size_t d = q.cols();
  const std::size_t head_dim = d / heads;
  const Real scale = Real(1) / std::sqrt(Real(head_dim));

  AttentionGrads<Real> g{Matrix<Real>(q.rows(), d), Matrix<Real>(k.rows(), d), Matrix<Real>(v.rows(), d),
                         Matrix<Real>()};
  Matrix<Real> ctx(q.rows(), d);
  std::vector<Matrix<Real>> ps;
  ps.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * head_dim;
    ps.push_back(masked_softmax(head_scores(q, k, mask, off, head_dim, scale), mask));
    const auto& p = ps.back();
    for (std::size_t i = 0; i < q.rows(); ++i) {
      Real* ci = ctx.row(i).data() + off;
      for (std::size_t j = 0; j < k.rows(); ++j) {
        if (!mask(i, j)) continue;
        const Real* vj = v.row(j).data() + off;
        for (std::size_t c = 0; c < head_dim; ++c) ci[c] += p(i, j) * vj[c];
      }
    }
  }
  g.dw_out = matmul_tn(ctx, dout);
  const Matrix<Real> dctx = matmul_nt(dout, w_out);

  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * head_dim;
    const auto& p = ps[h];
    Matrix<Real> dp(q.rows(), k.rows());
    for (std::size_t i = 0; i < q.rows(); ++i) {
      const Real* dci = dctx.row(i).data() + off;
      for (std::size_t j = 0; j < k.rows(); ++j) {
        if (!mask(i, j)) continue;
        const Real* vj = v.row(j).data() + off;
        Real* dvj = g.dv.row(j).data() + off;
        Real acc = 0;
        for (std::size_t c = 0; c < head_dim; ++c) {
          acc += dci[c] * vj[c];
          dvj[c] += p(i, j) * dci[c];
        }
        dp(i, j) = acc;
      }
    }
    const Matrix<Real> ds = masked_softmax_vjp(p, dp);
    for (std::size_t i = 0; i < q.rows(); ++i) {
      const Real* qi = q.row(i).data() + off;
      Real* dqi = g.dq.row(i).data() + off;
      for (std::size_t j = 0; j < k.rows(); ++j) {
        if (!mask(i, j)) continue;
        const Real coef = ds(i, j) * scale;
        const Real* kj = k.row(j).data() + off;
        Real* dkj = g.dk.row(j).data() + off;
        for (std::size_t c = 0; c < head_dim; ++c) {
          dqi[c] += coef * kj[c];
          dkj[c] += coef * qi[c];
        }
      }
    }
  }
  return g;
}

template <typename Real>
Matrix<Real> ffn_apply(const Matrix<Real>& x, const Matrix<Real>& w1, ConstSpan<Real> b1,
                       const Matrix<Real>& w2, ConstSpan<Real> b2) {
  if (b1.size() != w1.cols() || w2.rows() != w1.cols() || b2.size() != w2.cols()) {
    throw ShapeError("ffn: parameter shapes disagree");
  }
  Matrix<Real> h = matmul(x, w1);
  for (std::size_t i = 0; i < h.rows(); ++i) {
    auto hi = h.row(i);
    for (std::size_t j = 0; j < hi.size(); ++j) {
      const Real pre = hi[j] + b1[j];
      hi[j] = pre > Real(0) ? pre : Real(0);
    }
  }
  Matrix<Real> y = matmul(h, w2);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto yi = y.row(i);
    for (std::size_t j = 0; j < yi.size(); ++j) yi[j] += b2[j];
  }
  return y;
}

template <typename Real>
FfnGrads<Real> ffn_vjp(const Matrix<Real>& x, const Matrix<Real>& w1, ConstSpan<Real> b1,
                       const Matrix<Real>& w2, const Matrix<Real>& dy) {
  if (b1.size() != w1.cols() || w2.rows() != w1.cols() || dy.cols() != w2.cols() || dy.rows() != x.rows()) {
    throw ShapeError("ffn_vjp: shapes disagree");
  }
  Matrix<Real> pre = matmul(x, w1);
  Matrix<Real> act(pre.rows(), pre.cols());
  for (std::size_t i = 0; i < pre.rows(); ++i) {
    for (std::size_t j = 0; j < pre.cols(); ++j) {
      pre(i, j) += b1[j];
      act(i, j) = pre(i, j) > Real(0) ? pre(i, j) : Real(0);
    }
  }
  FfnGrads<Real> g;
  g.dw2 = matmul_tn(act, dy);
  g.db2 = column_sums(dy);
  Matrix<Real> dpre = matmul_nt(dy, w2);
  for (std::size_t i = 0; i < dpre.rows(); ++i) {
    for (std::size_t j = 0; j < dpre.cols(); ++j) {
      if (!(pre(i, j) > Real(0))) dpre(i, j) = 0;
    }
  }
  g.dw1 = matmul_tn(x, dpre);
  g.db1 = column_sums(dpre);
  g.dx = matmul_nt(dpre, w1);
  return g;
}

template <typename Real>
Matrix<Real> row_mean(const Matrix<Real>& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.rows()) throw EmptyInputError("row_mean: empty or out-of-range row set");
  Matrix<Real> out(1, x.cols());
  auto o = out.row(0);
  for (std::size_t i = begin; i < end; ++i) {
    auto xi = x.row(i);
    for (std::size_t j = 0; j < xi.size(); ++j) o[j] += xi[j];
  }
  const Real n = Real(end - begin);
  for (auto& v : o) v /= n;
  return out;
}

#define EMFORMER_INSTANTIATE_NUMERICS(Real)                                                             \
  template Matrix<Real> matmul(const Matrix<Real>&, const Matrix<Real>&);                               \
  template Matrix<Real> matmul_nt(const Matrix<Real>&, const Matrix<Real>&);                            \
  template Matrix<Real> matmul_tn(const Matrix<Real>&, const Matrix<Real>&);                            \
  template MatmulGrads<Real> matmul_vjp(const Matrix<Real>&, const Matrix<Real>&, const Matrix<Real>&); \
  template Matrix<Real> layer_norm(const Matrix<Real>&, ConstSpan<Real>, ConstSpan<Real>,   \
                                   Real);                                                               \
  template LayerNormGrads<Real> layer_norm_vjp(const Matrix<Real>&, ConstSpan<Real>, Real,        \
                                               const Matrix<Real>&);                                    \
  template Matrix<Real> masked_softmax(const Matrix<Real>&, const BoolMask&);                           \
  template Matrix<Real> masked_softmax_vjp(const Matrix<Real>&, const Matrix<Real>&);                   \
  template Matrix<Real> multi_head_attention(const Matrix<Real>&, const Matrix<Real>&,                  \
                                             const Matrix<Real>&, const BoolMask&, const Matrix<Real>&, \
                                             std::size_t, AttentionProbs<Real>*);                       \
  template AttentionGrads<Real> multi_head_attention_vjp(                                               \
      const Matrix<Real>&, const Matrix<Real>&, const Matrix<Real>&, const BoolMask&,                   \
      const Matrix<Real>&, std::size_t, const Matrix<Real>&);                                           \
  template Matrix<Real> ffn_apply(const Matrix<Real>&, const Matrix<Real>&, ConstSpan<Real>,      \
                                  const Matrix<Real>&, ConstSpan<Real>);                          \
  template FfnGrads<Real> ffn_vjp(const Matrix<Real>&, const Matrix<Real>&, ConstSpan<Real>,      \
                                  const Matrix<Real>&, const Matrix<Real>&);                            \
  template Matrix<Real> row_mean(const Matrix<Real>&, std::size_t, std::size_t);

EMFORMER_INSTANTIATE_NUMERICS(float)
EMFORMER_INSTANTIATE_NUMERICS(double)

}  // namespace emformer
