// SPDX-License-Identifier: Apache-2.0
#include "glip/checkpoint.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <type_traits>

namespace glip {

namespace {

constexpr char kMagic[8] = {'G', 'L', 'I', 'P', 'C', 'K', 'P', 'T'};

template <typename S>
const char* scalar_name() {
  return std::is_same_v<S, float> ? "float32" : "float64";
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw Error(ErrorCode::IoError, "sha256 init failed");
  }
  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), digest, &len);
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += digits[digest[i] >> 4];
      out += digits[digest[i] & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw Error(ErrorCode::FormatError, "checkpoint truncated");
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

template <typename S>
void write_container(const std::string& path, nlohmann::json header, const ParameterSet<S>& arrays) {
  std::string payload;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, m] : arrays) {
    index.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", payload.size()}});
    // column-major, as Eigen stores it
    payload.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(S));
  }
  header["scalar"] = scalar_name<S>();
  header["arrays"] = index;
  const std::string text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  out += payload;
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error(ErrorCode::IoError, "write failed: " + path);
}

struct Container {
  nlohmann::json header;
  std::string bytes;
  std::size_t payload_begin = 0;
};

Container read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot open " + path);
  Container c;
  c.bytes.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  if (c.bytes.size() < sizeof(kMagic) || std::memcmp(c.bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorCode::FormatError, path + " is not a checkpoint");
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(c.bytes, pos);
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::FormatError, "unsupported checkpoint version " + std::to_string(version));
  const auto len = take<std::uint64_t>(c.bytes, pos);
  if (pos + len > c.bytes.size()) throw Error(ErrorCode::FormatError, "checkpoint header truncated");
  try {
    c.header = nlohmann::json::parse(c.bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("checkpoint header: ") + e.what());
  }
  c.payload_begin = pos + len;
  return c;
}

template <typename Stored, typename S>
ParameterSet<S> decode_arrays(const Container& c) {
  ParameterSet<S> out;
  for (const auto& entry : c.header.at("arrays")) {
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(Stored);
    if (rows < 0 || cols < 0 || c.payload_begin + offset + bytes > c.bytes.size())
      throw Error(ErrorCode::FormatError, "checkpoint array out of bounds: " + entry.at("name").get<std::string>());
    Eigen::Matrix<Stored, Eigen::Dynamic, Eigen::Dynamic> m(rows, cols);
    std::memcpy(m.data(), c.bytes.data() + c.payload_begin + offset, bytes);
    out.emplace(entry.at("name").get<std::string>(), m.template cast<S>());
  }
  return out;
}

template <typename S>
ParameterSet<S> arrays_of(const Container& c) {
  try {
    const std::string scalar = c.header.at("scalar").get<std::string>();
    if (scalar == "float32") return decode_arrays<float, S>(c);
    if (scalar == "float64") return decode_arrays<double, S>(c);
    throw Error(ErrorCode::FormatError, "unknown scalar type " + scalar);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("checkpoint index: ") + e.what());
  }
}

}  // namespace

template <typename S>
std::string parameter_hash(const ParameterSet<S>& params, const TrainablePredicate& include) {
  Sha256 h;
  for (const auto& [name, m] : params) {
    if (!include(name)) continue;
    h.update(name.data(), name.size() + 1);
    const std::int64_t shape[2] = {m.rows(), m.cols()};
    h.update(shape, sizeof(shape));
    h.update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(S));
  }
  return h.hex();
}

template <typename S>
std::string parameter_hash(const ParameterSet<S>& params) {
  return parameter_hash(params, all_trainable());
}

template <typename S>
void save_checkpoint(const std::string& path, const ModelConfig& config, const ParameterSet<S>& params,
                     std::uint64_t seed, const nlohmann::json& metadata) {
  nlohmann::json header;
  header["format"] = "glip-checkpoint";
  header["config"] = config;
  header["seed"] = seed;
  header["metadata"] = metadata;
  header["parameter_hash"] = parameter_hash(params);
  write_container(path, header, params);
}

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  const Container c = read_container(path);
  LoadedCheckpoint<S> out;
  ModelConfig config;
  std::uint64_t seed = 0;
  try {
    if (c.header.value("format", "") != "glip-checkpoint")
      throw Error(ErrorCode::FormatError, path + " holds no model");
    config = c.header.at("config").get<ModelConfig>();
    seed = c.header.at("seed").get<std::uint64_t>();
    out.metadata = c.header.value("metadata", nlohmann::json::object());
    out.scalar = c.header.at("scalar").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("checkpoint header: ") + e.what());
  }
  ParameterSet<S> params = arrays_of<S>(c);
  const ParameterSet<S> expected = init_parameters<S>(config, 0);
  for (const auto& [name, m] : expected) {
    auto it = params.find(name);
    if (it == params.end()) throw Error(ErrorCode::FormatError, "checkpoint lacks parameter " + name);
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw Error(ErrorCode::FormatError, "checkpoint parameter has wrong shape: " + name);
  }
  out.model = GroundingModel<S>(config, std::move(params), seed);
  return out;
}

nlohmann::json read_checkpoint_header(const std::string& path) { return read_container(path).header; }

template <typename S>
void save_arrays(const std::string& path, const ParameterSet<S>& arrays, const nlohmann::json& metadata) {
  nlohmann::json header;
  header["format"] = "glip-arrays";
  header["metadata"] = metadata;
  write_container(path, header, arrays);
}

template <typename S>
ParameterSet<S> load_arrays(const std::string& path, nlohmann::json* metadata) {
  const Container c = read_container(path);
  if (metadata) *metadata = c.header.value("metadata", nlohmann::json::object());
  return arrays_of<S>(c);
}

#define GLIP_INSTANTIATE(S)                                                                         \
  template std::string parameter_hash<S>(const ParameterSet<S>&);                                    \
  template std::string parameter_hash<S>(const ParameterSet<S>&, const TrainablePredicate&);         \
  template void save_checkpoint<S>(const std::string&, const ModelConfig&, const ParameterSet<S>&,   \
                                   std::uint64_t, const nlohmann::json&);                            \
  template LoadedCheckpoint<S> load_checkpoint<S>(const std::string&);                               \
  template void save_arrays<S>(const std::string&, const ParameterSet<S>&, const nlohmann::json&);   \
  template ParameterSet<S> load_arrays<S>(const std::string&, nlohmann::json*);

GLIP_INSTANTIATE(float)
GLIP_INSTANTIATE(double)

}  // namespace glip
