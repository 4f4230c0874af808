#pragma once

// Checkpoint archive layout (all integers little-endian):
//
//   bytes 0..7    magic "JSCCCKPT"
//   u32           format version (1)
//   u64           manifest length L, followed by L bytes of JSON
//   u32           array count A
//   A times:      u32 name length, name bytes,
//                 u8 dtype (1 = float32, 2 = float64), u8 rank,
//                 rank x u64 dims, row-major element bytes
//   u64           FNV-1a 64 hash of every preceding byte
//
// The manifest records the format version, network layout, cpp, snr/sigma
// of training, step counts and initialization scheme.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "jscc/error.hpp"
#include "jscc/hash.hpp"
#include "jscc/models.hpp"

namespace jscc {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'J', 'S', 'C', 'C', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& bytes, std::size_t end, std::string path)
      : bytes_(bytes), end_(end), path_(std::move(path)) {}

  template <typename V>
  V get() {
    V v;
    take(&v, sizeof(V));
    return v;
  }
  void take(void* dst, std::size_t n) {
    if (n > end_ - pos_) {
      throw DataError("corrupt checkpoint " + path_ + ": truncated at byte " + std::to_string(pos_));
    }
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string get_string(std::size_t n) {
    std::string s(n, '\0');
    take(s.data(), n);
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
  std::size_t end_;
  std::string path_;
};

struct StoredArray {
  std::vector<std::uint64_t> dims;
  std::vector<double> values;
};

template <typename T>
void write_array(ByteWriter& w, const std::string& name, const Tensor<T>& t) {
  w.put(std::uint32_t(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put(std::uint8_t(sizeof(T) == 4 ? 1 : 2));
  const Shape s = t.shape();
  w.put(std::uint8_t(4));
  for (int d : {s.n, s.c, s.h, s.w}) w.put(std::uint64_t(d));
  w.put_bytes(t.data(), t.size() * sizeof(T));
}

}  // namespace detail

template <typename T>
nlohmann::json bundle_manifest(const ModelBundle<T>& model) {
  const auto& m = model.metadata();
  nlohmann::json j;
  j["format_version"] = kCheckpointVersion;
  j["variant"] = to_string(model.config().variant);
  j["cpp"] = model.config().cpp.str();
  j["snr_train_db"] = m.snr_train_db;
  j["sigma_train"] = m.sigma_train();
  j["jscc_steps"] = m.jscc_steps;
  j["denoiser_steps"] = m.denoiser_steps;
  j["seed"] = m.seed;
  j["init"] = m.init;
  j["autoencoder"] = model.config();
  j["denoiser"] = model.denoiser_config();
  j["has_denoiser"] = model.has_denoiser();
  j["dtype"] = sizeof(T) == 4 ? "float32" : "float64";
  return j;
}

template <typename T>
std::vector<char> serialize_bundle(const ModelBundle<T>& model) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put(kCheckpointVersion);
  const std::string manifest = bundle_manifest(model).dump();
  w.put(std::uint64_t(manifest.size()));
  w.put_bytes(manifest.data(), manifest.size());

  std::vector<std::pair<std::string, const Tensor<T>*>> arrays = model.encoder().named_arrays();
  for (auto& a : model.decoder().named_arrays()) arrays.push_back(a);
  if (model.has_denoiser()) {
    for (auto& a : model.denoiser().named_arrays()) arrays.push_back(a);
  }
  w.put(std::uint32_t(arrays.size()));
  for (const auto& [name, tensor] : arrays) detail::write_array(w, name, *tensor);
  w.put(fnv1a64(w.bytes().data(), w.bytes().size()));
  return std::move(w.bytes());
}

template <typename T>
void save_bundle(const ModelBundle<T>& model, const std::string& path) {
  const auto bytes = serialize_bundle(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

/// Fields a caller can require of a checkpoint; unset fields are not checked.
struct CheckpointExpectation {
  std::optional<Variant> variant;
  std::optional<int> codeword_channels;
  std::optional<Rational> cpp;
  std::optional<double> snr_train_db;
  bool require_denoiser = false;
};

template <typename T>
ModelBundle<T> deserialize_bundle(const std::vector<char>& bytes, const std::string& path,
                                  const CheckpointExpectation& expect = {}) {
  constexpr std::size_t trailer = sizeof(std::uint64_t);
  if (bytes.size() < sizeof(kCheckpointMagic) + trailer ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw DataError("corrupt checkpoint " + path + ": bad magic or file too short");
  }
  std::uint64_t stored_hash;
  std::memcpy(&stored_hash, bytes.data() + bytes.size() - trailer, trailer);
  if (stored_hash != fnv1a64(bytes.data(), bytes.size() - trailer)) {
    throw DataError("corrupt checkpoint " + path + ": checksum mismatch (truncated or modified file)");
  }

  detail::ByteReader r(bytes, bytes.size() - trailer, path);
  r.get_string(sizeof(kCheckpointMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint " + path + " has unsupported format version " + std::to_string(version));
  }
  const auto manifest_len = r.get<std::uint64_t>();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(r.get_string(manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint " + path + ": manifest is not valid JSON (" + e.what() + ")");
  }

  AutoencoderConfig config;
  DenoiserConfig dconfig;
  BundleMetadata meta;
  try {
    config = manifest.at("autoencoder").get<AutoencoderConfig>();
    dconfig = manifest.at("denoiser").get<DenoiserConfig>();
    meta.snr_train_db = manifest.at("snr_train_db").get<double>();
    meta.jscc_steps = manifest.at("jscc_steps").get<long>();
    meta.denoiser_steps = manifest.at("denoiser_steps").get<long>();
    meta.seed = manifest.at("seed").get<std::uint64_t>();
    meta.init = manifest.value("init", meta.init);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint " + path + ": incomplete manifest (" + e.what() + ")");
  }
  const bool has_denoiser = manifest.value("has_denoiser", false);

  if (expect.variant && *expect.variant != config.variant) {
    throw ConfigError("checkpoint " + path + " variant mismatch: requested " + to_string(*expect.variant) +
                      ", checkpoint has " + to_string(config.variant));
  }
  if (expect.codeword_channels && *expect.codeword_channels != config.codeword_channels) {
    throw ConfigError("checkpoint " + path + " codeword_channels mismatch: requested " +
                      std::to_string(*expect.codeword_channels) + ", checkpoint has " +
                      std::to_string(config.codeword_channels));
  }
  if (expect.cpp && !(*expect.cpp == config.cpp)) {
    throw ConfigError("checkpoint " + path + " cpp mismatch: requested " + expect.cpp->str() +
                      ", checkpoint has " + config.cpp.str());
  }
  if (expect.snr_train_db && std::abs(*expect.snr_train_db - meta.snr_train_db) > 1e-9) {
    throw ConfigError("checkpoint " + path + " snr_train_db mismatch: requested " +
                      std::to_string(*expect.snr_train_db) + ", checkpoint has " + std::to_string(meta.snr_train_db));
  }
  if (expect.require_denoiser && !has_denoiser) {
    throw ConfigError("checkpoint " + path + " has no trained denoiser");
  }

  std::map<std::string, detail::StoredArray> stored;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.get_string(r.get<std::uint32_t>());
    const auto dtype = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint8_t>();
    detail::StoredArray a;
    std::uint64_t elements = 1;
    for (int d = 0; d < rank; ++d) {
      a.dims.push_back(r.get<std::uint64_t>());
      elements *= a.dims.back();
    }
    if (elements > (std::uint64_t(1) << 34)) throw DataError("corrupt checkpoint " + path + ": absurd array size");
    a.values.resize(elements);
    if (dtype == 1) {
      std::vector<float> buf(elements);
      r.take(buf.data(), elements * sizeof(float));
      std::copy(buf.begin(), buf.end(), a.values.begin());
    } else if (dtype == 2) {
      r.take(a.values.data(), elements * sizeof(double));
    } else {
      throw DataError("corrupt checkpoint " + path + ": unknown dtype code " + std::to_string(dtype));
    }
    stored.emplace(name, std::move(a));
  }

  ModelBundle<T> model = ModelBundle<T>::create(config, dconfig, meta.snr_train_db, meta.seed);
  model.metadata() = meta;
  if (has_denoiser) model.init_denoiser(meta.seed);

  auto assign = [&](Network<T>& net) {
    for (auto& [name, tensor] : net.named_arrays()) {
      auto it = stored.find(name);
      if (it == stored.end()) throw DataError("checkpoint " + path + " is missing array '" + name + "'");
      const Shape s = tensor->shape();
      const auto& dims = it->second.dims;
      if (dims.size() != 4 || dims[0] != std::uint64_t(s.n) || dims[1] != std::uint64_t(s.c) ||
          dims[2] != std::uint64_t(s.h) || dims[3] != std::uint64_t(s.w)) {
        throw DataError("checkpoint " + path + " array '" + name + "' has the wrong shape (expected " + s.str() + ")");
      }
      std::transform(it->second.values.begin(), it->second.values.end(), tensor->data(),
                     [](double v) { return static_cast<T>(v); });
    }
  };
  assign(model.encoder());
  assign(model.decoder());
  if (has_denoiser) assign(model.denoiser());
  return model;
}

template <typename T>
ModelBundle<T> load_bundle(const std::string& path, const CheckpointExpectation& expect = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_bundle<T>(bytes, path, expect);
}

}  // namespace jscc
