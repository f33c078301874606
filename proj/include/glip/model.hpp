// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "glip/autodiff.hpp"
#include "glip/box.hpp"
#include "glip/image.hpp"
#include "glip/layers.hpp"
#include "glip/model_config.hpp"
#include "glip/parameters.hpp"
#include "glip/prompt.hpp"

namespace glip {

/// One anchor per grid cell, row-major over cells; together they tile the
/// image exactly.
std::vector<Box> make_anchors(const ModelConfig& config);

/// Region-word alignment scores S = O P^T. Every entry is a plain sequential
/// dot product, so a given (region, token) pair always yields the same bits.
template <typename S>
ad::Matrix<S> align(const ad::Matrix<S>& regions, const ad::Matrix<S>& tokens) {
  if (regions.cols() != tokens.cols())
    throw Error(ErrorCode::ShapeMismatch, "align: feature widths differ");
  ad::Matrix<S> out(regions.rows(), tokens.rows());
  for (Eigen::Index i = 0; i < regions.rows(); ++i) {
    for (Eigen::Index j = 0; j < tokens.rows(); ++j) {
      S acc = S(0);
      for (Eigen::Index k = 0; k < regions.cols(); ++k) acc += regions(i, k) * tokens(j, k);
      out(i, j) = acc;
    }
  }
  return out;
}

/// Cuts an image into per-cell patches, one row per anchor.
template <typename S>
ad::Matrix<S> image_patches(const Image& image, const ModelConfig& config) {
  if (image.height != config.image_size || image.width != config.image_size) {
    throw Error(ErrorCode::ShapeMismatch,
                "image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                    ", model expects " + std::to_string(config.image_size));
  }
  const int cell = config.cell();
  ad::Matrix<S> patches(config.anchor_count(), config.patch_width());
  for (int gy = 0; gy < config.grid; ++gy) {
    for (int gx = 0; gx < config.grid; ++gx) {
      const int row = gy * config.grid + gx;
      int col = 0;
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x)
          for (int c = 0; c < 3; ++c)
            patches(row, col++) = static_cast<S>(image.at(gy * cell + y, gx * cell + x, c));
    }
  }
  return patches;
}

/// Fresh parameters for `config`. Each array draws from its own stream
/// derived from (seed, name), so adding or removing a module leaves the
/// initialization of every other array unchanged.
template <typename S>
ParameterSet<S> init_parameters(const ModelConfig& config, std::uint64_t seed);

/// Toy grounding model: patch-MLP vision encoder over grid anchors,
/// transformer language encoder, L layers of cross-modality deep fusion,
/// dot-product alignment head and box-regression head.
template <typename S>
class GroundingModel {
 public:
  using Mat = ad::Matrix<S>;
  using Var = ad::Var;

  /// Variables produced by one forward pass.
  struct Graph {
    Var regions0;  // O^0
    Var tokens0;   // P^0 (invalid for classifier-head models)
    Var regions;   // O^L, after optional region projection
    Var tokens;    // P^L
    Var logits;    // N x M (or N x c with a classifier head)
    Var deltas;    // N x 4
  };

  GroundingModel() = default;
  GroundingModel(const ModelConfig& config, std::uint64_t seed)
      : config_(config), params_(init_parameters<S>(config, seed)), seed_(seed) {
    config_.validate();
  }
  GroundingModel(const ModelConfig& config, ParameterSet<S> params, std::uint64_t seed)
      : config_(config), params_(std::move(params)), seed_(seed) {
    config_.validate();
  }

  const ModelConfig& config() const { return config_; }
  const ParameterSet<S>& parameters() const { return params_; }
  ParameterSet<S>& parameters() { return params_; }
  std::uint64_t seed() const { return seed_; }
  std::vector<Box> anchors() const { return make_anchors(config_); }

  Var image_features(ad::Tape<S>& t, Binding<S>& p, const Image& image) const {
    const Var x = t.constant(image_patches<S>(image, config_));
    return layers::dense(t, p, "vision.fc2", ad::relu(t, layers::dense(t, p, "vision.fc1", x)));
  }

  Var text_features(ad::Tape<S>& t, Binding<S>& p, const TokenizedPrompt& prompt) const {
    if (prompt.size() < 1) throw Error(ErrorCode::InvalidArgument, "empty prompt");
    Var x = ad::gather_rows(t, p("language.embed"), prompt.token_ids);
    if (config_.positional_encoding) x = ad::add(t, x, t.constant(segment_positions(prompt)));
    for (int k = 0; k < config_.text_layers; ++k) {
      x = layers::text_block(t, p, "language.layer" + std::to_string(k), x, prompt.segments,
                             config_.heads);
    }
    return x;
  }

  /// L fusion layers. Without fusion the context terms vanish and each
  /// modality runs its own blocks (late fusion).
  std::pair<Var, Var> fuse(ad::Tape<S>& t, Binding<S>& p, Var regions, Var tokens,
                           const layers::Segments& segments) const {
    if (t.value(regions).cols() != config_.d || t.value(tokens).cols() != config_.d)
      throw Error(ErrorCode::ShapeMismatch, "fuse: feature widths do not match d");
    for (int i = 0; i < config_.fusion_layers; ++i) {
      const std::string prefix = "fusion" + std::to_string(i);
      Var o_in = regions;
      Var p_in = tokens;
      if (config_.fusion_enabled) {
        const auto [o_ctx, p_ctx] = layers::cross_attention(
            t, regions, tokens, layers::cross_attention_weights(p, prefix + ".xmha"),
            config_.heads);
        o_in = ad::add(t, regions, o_ctx);
        p_in = ad::add(t, tokens, p_ctx);
      }
      regions = layers::vision_block(t, p, prefix + ".vision", o_in);
      tokens = layers::text_block(t, p, prefix + ".text", p_in, segments, config_.heads);
    }
    return {regions, tokens};
  }

  /// Late-fusion-only variant for classifier-head models.
  Var fuse_regions_only(ad::Tape<S>& t, Binding<S>& p, Var regions) const {
    for (int i = 0; i < config_.fusion_layers; ++i)
      regions = layers::vision_block(t, p, "fusion" + std::to_string(i) + ".vision", regions);
    return regions;
  }

  Var box_deltas(ad::Tape<S>& t, Binding<S>& p, Var regions) const {
    return layers::dense(t, p, "box", regions);
  }

  /// Full forward pass. `prompt_embedding`, when given, stands in for P^0
  /// and the language encoder is skipped.
  Graph forward(ad::Tape<S>& t, Binding<S>& p, const Image& image, const TokenizedPrompt& prompt,
                std::optional<Var> prompt_embedding = std::nullopt) const {
    Graph g;
    g.regions0 = image_features(t, p, image);
    if (config_.classifier_classes > 0) {
      g.regions = fuse_regions_only(t, p, g.regions0);
      g.deltas = box_deltas(t, p, g.regions);
      g.logits = ad::matmul_nt(t, g.regions, p("classifier.w"));
      return g;
    }
    g.tokens0 = prompt_embedding ? *prompt_embedding : text_features(t, p, prompt);
    if (t.value(g.tokens0).rows() != prompt.size())
      throw Error(ErrorCode::ShapeMismatch, "prompt embedding rows differ from prompt length");
    auto [o, tok] = fuse(t, p, g.regions0, g.tokens0, prompt.segments);
    g.deltas = box_deltas(t, p, o);
    if (config_.region_projection) o = ad::matmul(t, o, p("probe.proj"));
    g.regions = o;
    g.tokens = tok;
    g.logits = ad::matmul_nt(t, o, tok);
    return g;
  }

  // -- plain-matrix API -----------------------------------------------------

  Mat encode_image(const Image& image) const {
    ad::Tape<S> t;
    Binding<S> p(params_, t);
    return t.value(image_features(t, p, image));
  }

  Mat encode_text(const TokenizedPrompt& prompt) const {
    ad::Tape<S> t;
    Binding<S> p(params_, t);
    return t.value(text_features(t, p, prompt));
  }

  std::pair<Mat, Mat> fuse(const Mat& regions, const Mat& tokens,
                           const TokenizedPrompt& prompt) const {
    ad::Tape<S> t;
    Binding<S> p(params_, t);
    auto [o, tok] = fuse(t, p, t.constant(regions), t.constant(tokens), prompt.segments);
    return {t.value(o), t.value(tok)};
  }

  Mat regress_boxes(const Mat& regions) const {
    ad::Tape<S> t;
    Binding<S> p(params_, t);
    return t.value(box_deltas(t, p, t.constant(regions)));
  }

  /// Inference outputs for one (image, prompt) pair.
  struct Outputs {
    Mat regions;  // final region features (after projection, if any)
    Mat tokens;   // final token features
    Mat logits;
    Mat deltas;
  };

  Outputs infer(const Image& image, const TokenizedPrompt& prompt,
                const Mat* prompt_embedding = nullptr) const {
    ad::Tape<S> t;
    Binding<S> p(params_, t);
    std::optional<Var> pe;
    if (prompt_embedding) pe = t.constant(*prompt_embedding);
    const Graph g = forward(t, p, image, prompt, pe);
    Outputs out;
    out.regions = t.value(g.regions);
    out.deltas = t.value(g.deltas);
    if (config_.classifier_classes > 0) {
      out.tokens = params_.at("classifier.w");
    } else {
      out.tokens = t.value(g.tokens);
    }
    out.logits = align<S>(out.regions, out.tokens);
    return out;
  }

 private:
  Mat segment_positions(const TokenizedPrompt& prompt) const {
    int longest = 1;
    for (auto [b, e] : prompt.segments) longest = std::max(longest, e - b);
    const Mat table = layers::sinusoidal_positions<S>(longest, config_.d);
    Mat pe(prompt.size(), config_.d);
    for (auto [b, e] : prompt.segments)
      for (int r = b; r < e; ++r) pe.row(r) = table.row(r - b);
    return pe;
  }

  ModelConfig config_;
  ParameterSet<S> params_;
  std::uint64_t seed_ = 0;
};

// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void add_uniform(ParameterSet<S>& params, std::uint64_t seed, const std::string& name, int rows,
                 int cols, double bound) {
  Rng rng(derive_seed(seed, fnv1a(name)));
  ad::Matrix<S> m(rows, cols);
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r < rows; ++r) m(r, c) = static_cast<S>(rng.uniform(-bound, bound));
  params.emplace(name, std::move(m));
}

template <typename S>
void add_dense(ParameterSet<S>& params, std::uint64_t seed, const std::string& prefix, int in,
               int out, double gain = 1.0) {
  add_uniform(params, seed, prefix + ".w", in, out, gain * std::sqrt(3.0 / in));
  params.emplace(prefix + ".b", ad::Matrix<S>::Zero(1, out));
}

template <typename S>
void add_layer_norm(ParameterSet<S>& params, const std::string& prefix, int d) {
  params.emplace(prefix + ".g", ad::Matrix<S>::Ones(1, d));
  params.emplace(prefix + ".b", ad::Matrix<S>::Zero(1, d));
}

template <typename S>
void add_text_block(ParameterSet<S>& params, std::uint64_t seed, const std::string& prefix,
                    const ModelConfig& c) {
  add_layer_norm(params, prefix + ".ln1", c.d);
  add_dense(params, seed, prefix + ".attn.q", c.d, c.d);
  add_dense(params, seed, prefix + ".attn.k", c.d, c.d);
  add_dense(params, seed, prefix + ".attn.v", c.d, c.d);
  add_dense(params, seed, prefix + ".attn.o", c.d, c.d, 0.5);
  add_layer_norm(params, prefix + ".ln2", c.d);
  add_dense(params, seed, prefix + ".ffn.fc1", c.d, c.hidden);
  add_dense(params, seed, prefix + ".ffn.fc2", c.hidden, c.d, 0.5);
}

}  // namespace detail

template <typename S>
ParameterSet<S> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  using detail::add_dense;
  ParameterSet<S> params;
  const int d = config.d;
  add_dense(params, seed, "vision.fc1", config.patch_width(), config.hidden);
  add_dense(params, seed, "vision.fc2", config.hidden, d);
  for (int i = 0; i < config.fusion_layers; ++i) {
    const std::string prefix = "fusion" + std::to_string(i);
    detail::add_layer_norm(params, prefix + ".vision.ln", d);
    add_dense(params, seed, prefix + ".vision.fc1", d, config.hidden);
    add_dense(params, seed, prefix + ".vision.fc2", config.hidden, d, 0.5);
    if (config.classifier_classes > 0) continue;
    detail::add_text_block(params, seed, prefix + ".text", config);
    if (config.fusion_enabled) {
      const double bound = std::sqrt(3.0 / d);
      for (const char* w : {"q_img", "q_txt", "v_img", "v_txt"})
        detail::add_uniform(params, seed, prefix + ".xmha." + w, d, d, bound);
      // zero output projections: training starts from the late-fusion model
      params.emplace(prefix + ".xmha.out_img", ad::Matrix<S>::Zero(d, d));
      params.emplace(prefix + ".xmha.out_txt", ad::Matrix<S>::Zero(d, d));
    }
  }
  params.emplace("box.w", ad::Matrix<S>::Zero(d, 4));
  params.emplace("box.b", ad::Matrix<S>::Zero(1, 4));
  if (config.classifier_classes > 0) {
    detail::add_uniform(params, seed, "classifier.w", config.classifier_classes, d,
                        std::sqrt(3.0 / d));
    return params;
  }
  detail::add_uniform(params, seed, "language.embed", kHashVocabSize, d, 1.0);
  for (int k = 0; k < config.text_layers; ++k)
    detail::add_text_block(params, seed, "language.layer" + std::to_string(k), config);
  if (config.region_projection)
    params.emplace("probe.proj", ad::Matrix<S>::Identity(d, d));
  return params;
}

}  // namespace glip
