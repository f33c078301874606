// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "glip/autodiff.hpp"
#include "glip/parameters.hpp"

namespace glip::layers {

using ad::Matrix;
using ad::Tape;
using ad::Var;

using Segments = std::vector<std::pair<int, int>>;

/// x * W + b where every output row is accumulated in the same order no matter
/// how many rows x has. Text features go through this so that a phrase
/// encodes to identical bits whichever prompt it sits in.
template <typename S>
Var linear_rowwise(Tape<S>& t, Var x, Var w, Var b) {
  const auto& xv = t.value(x);
  const auto& wv = t.value(w);
  ad::check<S>(xv.cols() == wv.rows(), "linear_rowwise: inner dimensions differ");
  ad::check<S>(t.value(b).rows() == 1 && t.value(b).cols() == wv.cols(), "linear_rowwise: bias");
  Matrix<S> out(xv.rows(), wv.cols());
  out.rowwise() = t.value(b).row(0);
  for (Eigen::Index k = 0; k < xv.cols(); ++k) {
    for (Eigen::Index j = 0; j < wv.cols(); ++j) {
      const S wkj = wv(k, j);
      out.col(j) += xv.col(k) * wkj;
    }
  }
  return t.op(std::move(out), {x, w, b}, [&t, x, w, b](int self) {
    const auto& g = t.grad_ref(self);
    if (t.wants(x)) t.grad_ref(x.id).noalias() += g * t.value(w).transpose();
    if (t.wants(w)) t.grad_ref(w.id).noalias() += t.value(x).transpose() * g;
    if (t.wants(b)) t.grad_ref(b.id) += g.colwise().sum();
  });
}

/// Multi-head scaled dot-product self-attention restricted to each segment.
/// q, k, v are M x d; heads split the feature axis.
template <typename S>
Var segment_attention(Tape<S>& t, Var q, Var k, Var v, Segments segments, int heads) {
  const auto& qv = t.value(q);
  const Eigen::Index d = qv.cols();
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  Matrix<S> out = Matrix<S>::Zero(qv.rows(), d);
  std::vector<Matrix<S>> probs;  // per (segment, head)
  probs.reserve(segments.size() * heads);
  for (auto [begin, end] : segments) {
    const Eigen::Index m = end - begin;
    for (int h = 0; h < heads; ++h) {
      const Matrix<S> qs = qv.block(begin, h * dh, m, dh);
      const Matrix<S> ks = t.value(k).block(begin, h * dh, m, dh);
      const Matrix<S> vs = t.value(v).block(begin, h * dh, m, dh);
      const Matrix<S> logits = (qs * ks.transpose()) * scale;
      Matrix<S> a = ad::softmax_rows_value<S>(logits);
      const Matrix<S> o = a * vs;
      out.block(begin, h * dh, m, dh) = o;
      probs.push_back(std::move(a));
    }
  }
  return t.op(std::move(out), {q, k, v},
              [&t, q, k, v, segments = std::move(segments), heads, dh, scale,
               probs = std::move(probs)](int self) {
                const auto& g = t.grad_ref(self);
                std::size_t idx = 0;
                for (auto [begin, end] : segments) {
                  const Eigen::Index m = end - begin;
                  for (int h = 0; h < heads; ++h, ++idx) {
                    const Matrix<S>& a = probs[idx];
                    const Matrix<S> go = g.block(begin, h * dh, m, dh);
                    const Matrix<S> vs = t.value(v).block(begin, h * dh, m, dh);
                    if (t.wants(v)) t.grad_ref(v.id).block(begin, h * dh, m, dh) += a.transpose() * go;
                    if (!t.wants(q) && !t.wants(k)) continue;
                    const Matrix<S> ga = go * vs.transpose();
                    const Eigen::Matrix<S, Eigen::Dynamic, 1> dot =
                        (ga.array() * a.array()).rowwise().sum();
                    const Matrix<S> gs =
                        (a.array() * (ga.array().colwise() - dot.array())).matrix() * scale;
                    if (t.wants(q))
                      t.grad_ref(q.id).block(begin, h * dh, m, dh) +=
                          gs * t.value(k).block(begin, h * dh, m, dh);
                    if (t.wants(k))
                      t.grad_ref(k.id).block(begin, h * dh, m, dh) +=
                          gs.transpose() * t.value(q).block(begin, h * dh, m, dh);
                  }
                }
              });
}

/// Standard dense layer for row-independent inputs (regions).
template <typename S>
Var dense(Tape<S>& t, Binding<S>& p, const std::string& prefix, Var x) {
  return ad::add_row(t, ad::matmul(t, x, p(prefix + ".w")), p(prefix + ".b"));
}

template <typename S>
Var dense_rowwise(Tape<S>& t, Binding<S>& p, const std::string& prefix, Var x) {
  return linear_rowwise(t, x, p(prefix + ".w"), p(prefix + ".b"));
}

/// Pre-norm transformer layer with self-attention confined to segments.
template <typename S>
Var text_block(Tape<S>& t, Binding<S>& p, const std::string& prefix, Var x,
               const Segments& segments, int heads) {
  const Var h = ad::layer_norm(t, x, p(prefix + ".ln1.g"), p(prefix + ".ln1.b"));
  const Var q = dense_rowwise(t, p, prefix + ".attn.q", h);
  const Var k = dense_rowwise(t, p, prefix + ".attn.k", h);
  const Var v = dense_rowwise(t, p, prefix + ".attn.v", h);
  const Var att = segment_attention(t, q, k, v, segments, heads);
  const Var x1 = ad::add(t, x, dense_rowwise(t, p, prefix + ".attn.o", att));
  const Var h2 = ad::layer_norm(t, x1, p(prefix + ".ln2.g"), p(prefix + ".ln2.b"));
  const Var f = dense_rowwise(t, p, prefix + ".ffn.fc2",
                              ad::relu(t, dense_rowwise(t, p, prefix + ".ffn.fc1", h2)));
  return ad::add(t, x1, f);
}

/// Per-region residual MLP.
template <typename S>
Var vision_block(Tape<S>& t, Binding<S>& p, const std::string& prefix, Var x) {
  const Var h = ad::layer_norm(t, x, p(prefix + ".ln.g"), p(prefix + ".ln.b"));
  const Var f = dense(t, p, prefix + ".fc2", ad::relu(t, dense(t, p, prefix + ".fc1", h)));
  return ad::add(t, x, f);
}

/// Projection matrices of one cross-modality attention module.
struct CrossAttentionWeights {
  Var query_image, query_text, value_image, value_text, out_image, out_text;
};

template <typename S>
CrossAttentionWeights cross_attention_weights(Binding<S>& p, const std::string& prefix) {
  return {p(prefix + ".q_img"), p(prefix + ".q_txt"), p(prefix + ".v_img"),
          p(prefix + ".v_txt"), p(prefix + ".out_img"), p(prefix + ".out_txt")};
}

/// Cross-modality multi-head attention. Returns (image context, text context):
/// regions attend over tokens and tokens attend over regions through one
/// shared per-head affinity matrix.
template <typename S>
std::pair<Var, Var> cross_attention(Tape<S>& t, Var regions, Var tokens,
                                    const CrossAttentionWeights& w, int heads) {
  const Var oq = ad::matmul(t, regions, w.query_image);
  const Var pq = ad::matmul(t, tokens, w.query_text);
  const Var ov = ad::matmul(t, regions, w.value_image);
  const Var pv = ad::matmul(t, tokens, w.value_text);
  const Eigen::Index d = t.value(oq).cols();
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  std::vector<Var> image_ctx, text_ctx;
  for (int h = 0; h < heads; ++h) {
    const Var attn = ad::scale(
        t, ad::matmul_nt(t, ad::slice_cols(t, oq, h * dh, dh), ad::slice_cols(t, pq, h * dh, dh)),
        scale);
    image_ctx.push_back(ad::matmul(t, ad::softmax_rows(t, attn), ad::slice_cols(t, pv, h * dh, dh)));
    text_ctx.push_back(ad::matmul(t, ad::softmax_rows(t, ad::transpose(t, attn)),
                                  ad::slice_cols(t, ov, h * dh, dh)));
  }
  const Var o_ctx = heads == 1 ? image_ctx[0] : ad::hconcat(t, image_ctx);
  const Var p_ctx = heads == 1 ? text_ctx[0] : ad::hconcat(t, text_ctx);
  return {ad::matmul(t, o_ctx, w.out_image), ad::matmul(t, p_ctx, w.out_text)};
}

template <typename S>
Matrix<S> sinusoidal_positions(int rows, int d) {
  Matrix<S> pe(rows, d);
  for (int pos = 0; pos < rows; ++pos) {
    for (int i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
      pe(pos, i) = static_cast<S>(i % 2 == 0 ? std::sin(pos * rate) : std::cos(pos * rate));
    }
  }
  return pe;
}

}  // namespace glip::layers
