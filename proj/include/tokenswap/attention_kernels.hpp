#pragma once

// Templated kernels shared by mm_attention and the toy DiT. Matrices hold one
// token per row; multi-head layouts split columns into contiguous head slices.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "tokenswap/rope_attention.hpp"

namespace tokenswap::kernels {

// Per-token cos/sin for every rotary pair of one head.
template <class T>
struct RopeTable {
  int head_dim = 0;
  Mat<T> cos;  // L x head_dim/2
  Mat<T> sin;
};

template <class T>
RopeTable<T> build_rope_table(std::span<const GridCoord> coords, int head_dim, double base) {
  RopeTable<T> table;
  table.head_dim = head_dim;
  const int pairs = head_dim / 2;
  const int per_axis = head_dim / 4;
  const auto n = static_cast<Eigen::Index>(coords.size());
  table.cos.resize(n, pairs);
  table.sin.resize(n, pairs);
  for (Eigen::Index t = 0; t < n; ++t) {
    for (int p = 0; p < pairs; ++p) {
      const bool i_axis = p < per_axis;
      const int k = i_axis ? p : p - per_axis;
      const double freq = std::pow(base, -static_cast<double>(k) / per_axis);
      const double angle = (i_axis ? coords[t].i : coords[t].j) * freq;
      table.cos(t, p) = static_cast<T>(std::cos(angle));
      table.sin(t, p) = static_cast<T>(std::sin(angle));
    }
  }
  return table;
}

// Rotates every head slice of `m` (L x heads*head_dim) in place. The inverse
// rotation is the transpose, used to pull gradients back.
template <class T>
void rope_apply(Mat<T>& m, const RopeTable<T>& table, bool inverse) {
  const int hd = table.head_dim;
  const int heads = static_cast<int>(m.cols()) / hd;
  const int pairs = hd / 2;
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    T* row = m.row(t).data();
    for (int h = 0; h < heads; ++h) {
      T* x = row + h * hd;
      for (int p = 0; p < pairs; ++p) {
        const T c = table.cos(t, p);
        const T s = inverse ? -table.sin(t, p) : table.sin(t, p);
        const T x0 = x[2 * p];
        const T x1 = x[2 * p + 1];
        x[2 * p] = x0 * c - x1 * s;
        x[2 * p + 1] = x0 * s + x1 * c;
      }
    }
  }
}

// Multi-head softmax attention. `probs` (optional) receives one L x L map per
// head for the backward pass; `masked_keys` (optional, one flag per key)
// excludes keys from every row.
template <class T>
void attention_forward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int heads,
                       Mat<T>& out, std::vector<Mat<T>>* probs,
                       const std::vector<std::uint8_t>* masked_keys,
                       AttentionRecord* record = nullptr, int record_layer = 0) {
  const auto n = q.rows();
  const int hd = static_cast<int>(q.cols()) / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  out.resize(n, q.cols());
  if (probs) probs->resize(heads);
  Mat<T> p;
  for (int h = 0; h < heads; ++h) {
    p.noalias() = (q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose()) * scale;
    if (masked_keys) {
      for (Eigen::Index key = 0; key < n; ++key) {
        if ((*masked_keys)[key]) p.col(key).setConstant(-std::numeric_limits<T>::infinity());
      }
    }
    const Eigen::Matrix<T, Eigen::Dynamic, 1> row_max = p.rowwise().maxCoeff();
    p.colwise() -= row_max;
    p.array() = p.array().exp();
    const Eigen::Matrix<T, Eigen::Dynamic, 1> inv_sum = p.rowwise().sum().cwiseInverse();
    p = inv_sum.asDiagonal() * p;
    out.middleCols(h * hd, hd).noalias() = p * v.middleCols(h * hd, hd);
    if (record) {
      float* dst = record->head_map(record_layer, h);
      for (Eigen::Index r = 0; r < n; ++r) {
        for (Eigen::Index c = 0; c < n; ++c) dst[r * n + c] = static_cast<float>(p(r, c));
      }
    }
    if (probs) (*probs)[h] = std::move(p);
  }
}

// Gradients of attention_forward with respect to the (rotated) q, k and v.
template <class T>
void attention_backward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int heads,
                        const std::vector<Mat<T>>& probs, const Mat<T>& d_out, Mat<T>& d_q,
                        Mat<T>& d_k, Mat<T>& d_v) {
  const int hd = static_cast<int>(q.cols()) / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  d_q.resize(q.rows(), q.cols());
  d_k.resize(k.rows(), k.cols());
  d_v.resize(v.rows(), v.cols());
  Mat<T> d_p;
  for (int h = 0; h < heads; ++h) {
    const Mat<T>& p = probs[h];
    const auto d_o = d_out.middleCols(h * hd, hd);
    d_v.middleCols(h * hd, hd).noalias() = p.transpose() * d_o;
    d_p.noalias() = d_o * v.middleCols(h * hd, hd).transpose();
    const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = (d_p.array() * p.array()).rowwise().sum();
    d_p = (p.array() * (d_p.array().colwise() - row_dot.array())).matrix() * scale;
    d_q.middleCols(h * hd, hd).noalias() = d_p * k.middleCols(h * hd, hd);
    d_k.middleCols(h * hd, hd).noalias() = d_p.transpose() * q.middleCols(h * hd, hd);
  }
}

}  // namespace tokenswap::kernels
