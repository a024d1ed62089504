#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "emformer/matrix.hpp"

// Dense primitives with fixed, ascending reduction order. Every result
// element depends only on the rows it is a function of, so computing a row
// alone or inside a larger batch yields bit-identical values.

namespace emformer {

// Multiply-adds performed by matmul and attention on the calling thread.
std::uint64_t flop_count();
void reset_flop_count();

// RAII window over the calling thread's multiply-add counter.
class FlopScope {
 public:
  FlopScope() : start_(flop_count()) {}
  std::uint64_t elapsed() const { return flop_count() - start_; }

 private:
  std::uint64_t start_;
};

namespace detail {
void add_flops(std::uint64_t n);
}

// C = A * B.
template <typename Real>
Matrix<Real> matmul(const Matrix<Real>& a, const Matrix<Real>& b);

// C = A * B^T.
template <typename Real>
Matrix<Real> matmul_nt(const Matrix<Real>& a, const Matrix<Real>& b);

// C = A^T * B.
template <typename Real>
Matrix<Real> matmul_tn(const Matrix<Real>& a, const Matrix<Real>& b);

template <typename Real>
struct MatmulGrads {
  Matrix<Real> da;
  Matrix<Real> db;
};

template <typename Real>
MatmulGrads<Real> matmul_vjp(const Matrix<Real>& a, const Matrix<Real>& b, const Matrix<Real>& dc);

// Row-wise y = gain * (x - mean) / sqrt(var + eps) + bias, biased variance.
template <typename Real>
Matrix<Real> layer_norm(const Matrix<Real>& x, ConstSpan<Real> gain, ConstSpan<Real> bias,
                        Real eps);

template <typename Real>
struct LayerNormGrads {
  Matrix<Real> dx;
  std::vector<Real> dgain;
  std::vector<Real> dbias;
};

template <typename Real>
LayerNormGrads<Real> layer_norm_vjp(const Matrix<Real>& x, ConstSpan<Real> gain, Real eps,
                                    const Matrix<Real>& dy);

// Softmax over the allowed entries of each row; disallowed entries are 0.
// Throws DegenerateRowError when a row has nothing allowed.
template <typename Real>
Matrix<Real> masked_softmax(const Matrix<Real>& scores, const BoolMask& mask);

// Gradient w.r.t. the scores given the softmax output p.
template <typename Real>
Matrix<Real> masked_softmax_vjp(const Matrix<Real>& p, const Matrix<Real>& dp);

// Per-head attention probabilities, filled on request.
template <typename Real>
struct AttentionProbs {
  std::vector<Matrix<Real>> heads;
};

// Head split, scaled dot product (1/sqrt(d/heads)), masked softmax, head
// concat, then output projection. q, k, v are already projected.
template <typename Real>
Matrix<Real> multi_head_attention(const Matrix<Real>& q, const Matrix<Real>& k, const Matrix<Real>& v,
                                  const BoolMask& mask, const Matrix<Real>& w_out, std::size_t heads,
                                  AttentionProbs<Real>* probs = nullptr);

template <typename Real>
struct AttentionGrads {
  Matrix<Real> dq;
  Matrix<Real> dk;
  Matrix<Real> dv;
  Matrix<Real> dw_out;
};

template <typename Real>
AttentionGrads<Real> multi_head_attention_vjp(const Matrix<Real>& q, const Matrix<Real>& k,
                                              const Matrix<Real>& v, const BoolMask& mask,
                                              const Matrix<Real>& w_out, std::size_t heads,
                                              const Matrix<Real>& dout);

// relu(x * w1 + b1) * w2 + b2
template <typename Real>
Matrix<Real> ffn_apply(const Matrix<Real>& x, const Matrix<Real>& w1, ConstSpan<Real> b1,
                       const Matrix<Real>& w2, ConstSpan<Real> b2);

template <typename Real>
struct FfnGrads {
  Matrix<Real> dx;
  Matrix<Real> dw1;
  std::vector<Real> db1;
  Matrix<Real> dw2;
  std::vector<Real> db2;
};

template <typename Real>
FfnGrads<Real> ffn_vjp(const Matrix<Real>& x, const Matrix<Real>& w1, ConstSpan<Real> b1,
                       const Matrix<Real>& w2, const Matrix<Real>& dy);

// Arithmetic mean of rows [begin, end) as a 1 x cols matrix.
template <typename Real>
Matrix<Real> row_mean(const Matrix<Real>& x, std::size_t begin, std::size_t end);

}  // namespace emformer
