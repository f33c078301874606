// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "glip/model.hpp"

#include "json.hpp"

namespace glip {

/// Container layout: 8-byte magic "GLIPCKPT", u32 format version, u64 header
/// length, UTF-8 JSON header, then the raw little-endian arrays in header
/// order. The header records config, seed, scalar type, free-form metadata
/// and, per array, its name, shape and byte offset into the payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// SHA-256 (hex) over every array's name, shape and raw bytes, in name order.
template <typename S>
std::string parameter_hash(const ParameterSet<S>& params);

/// Same digest restricted to parameters selected by `include`.
template <typename S>
std::string parameter_hash(const ParameterSet<S>& params, const TrainablePredicate& include);

template <typename S>
void save_checkpoint(const std::string& path, const ModelConfig& config, const ParameterSet<S>& params,
                     std::uint64_t seed, const nlohmann::json& metadata = nlohmann::json::object());

template <typename S>
void save_checkpoint(const std::string& path, const GroundingModel<S>& model,
                     const nlohmann::json& metadata = nlohmann::json::object()) {
  save_checkpoint(path, model.config(), model.parameters(), model.seed(), metadata);
}

template <typename S>
struct LoadedCheckpoint {
  GroundingModel<S> model;
  nlohmann::json metadata;
  std::string scalar;  // scalar type stored in the file: "float32" or "float64"
};

/// Loads and, if needed, converts arrays to S. Throws IoError when the file
/// cannot be read and FormatError when it is not a valid container.
template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path);

/// Just the JSON header (config, seed, metadata, array index).
nlohmann::json read_checkpoint_header(const std::string& path);

/// Standalone arrays (e.g. prompt embeddings) in the same container format.
template <typename S>
void save_arrays(const std::string& path, const ParameterSet<S>& arrays,
                 const nlohmann::json& metadata = nlohmann::json::object());
template <typename S>
ParameterSet<S> load_arrays(const std::string& path, nlohmann::json* metadata = nullptr);

}  // namespace glip
