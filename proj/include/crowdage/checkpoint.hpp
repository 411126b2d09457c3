#pragma once
// Versioned binary checkpoint:
//   "CRWDAGE\0" | u32 version | u64 payload size | payload | u32 crc32(payload)
// payload: model config JSON, train config JSON, trainer state, detector and
// age parameters. Integers are little-endian as stored by the host.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdage/config_io.hpp"
#include "crowdage/model.hpp"
#include "crowdage/pipeline.hpp"

namespace crowdage {

inline constexpr char kCheckpointMagic[8] = {'C', 'R', 'W', 'D', 'A', 'G', 'E', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  Model<float> model;
  std::optional<TrainConfig> train;
  std::optional<TrainerState> state;
};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void floats(const std::vector<float>& v) {
    pod<std::uint64_t>(v.size());
    const auto* p = reinterpret_cast<const char*>(v.data());
    buf_.insert(buf_.end(), p, p + v.size() * sizeof(float));
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& b) : b_(b) {}
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s(b_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<float> floats() {
    const auto n = pod<std::uint64_t>();
    need(n * sizeof(float));
    std::vector<float> v(n);
    std::memcpy(v.data(), b_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
    return v;
  }
  bool at_end() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > b_.size() - pos_) throw CheckpointError("checkpoint: truncated payload");
  }
  const std::vector<char>& b_;
  std::size_t pos_ = 0;
};

inline void write_params(ByteWriter& w, const nn::ParamStore<float>& s) {
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
  for (const auto& p : s) {
    w.str(p.name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(p.shape.size()));
    for (int d : p.shape) w.pod<std::int32_t>(d);
    w.floats(p.value);
  }
}

inline void read_params(ByteReader& r, nn::ParamStore<float>& s) {
  const auto n = r.pod<std::uint32_t>();
  if (n != s.size()) throw CheckpointError("checkpoint: parameter count does not match the configuration");
  for (std::uint32_t i = 0; i < n; ++i) {
    auto& p = s[i];
    const auto name = r.str();
    const auto nd = r.pod<std::uint32_t>();
    ag::Shape shape;
    for (std::uint32_t k = 0; k < nd; ++k) shape.push_back(r.pod<std::int32_t>());
    if (name != p.name || shape != p.shape)
      throw CheckpointError("checkpoint: parameter '" + name + "' does not match the configuration");
    auto v = r.floats();
    if (v.size() != p.value.size()) throw CheckpointError("checkpoint: parameter '" + name + "' has the wrong size");
    p.value = std::move(v);
  }
}

inline void write_adam(ByteWriter& w, const AdamState& a) {
  w.pod<std::int64_t>(a.step);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(a.m.size()));
  for (std::size_t i = 0; i < a.m.size(); ++i) {
    w.floats(a.m[i]);
    w.floats(a.v[i]);
  }
}

inline AdamState read_adam(ByteReader& r) {
  AdamState a;
  a.step = r.pod<std::int64_t>();
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    a.m.push_back(r.floats());
    a.v.push_back(r.floats());
  }
  return a;
}

inline std::uint32_t crc32_of(const std::vector<char>& b) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < b.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(b.size() - off, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(b.data() + off), chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Model<float>& m,
                            const TrainConfig* train = nullptr, const TrainerState* state = nullptr) {
  detail::ByteWriter w;
  w.str(to_json(m.config).dump());
  w.str(train ? to_json(*train).dump() : std::string());
  w.pod<std::uint8_t>(state ? 1 : 0);
  if (state) {
    w.pod<std::int32_t>(state->epoch);
    w.str(state->rng);
    w.str(state->sampler_rng);
    detail::write_adam(w, state->det_adam);
    detail::write_adam(w, state->age_adam);
  }
  detail::write_params(w, m.det_params);
  detail::write_params(w, m.age_params);

  const auto& payload = w.bytes();
  const std::uint64_t size = payload.size();
  const std::uint32_t crc = detail::crc32_of(payload);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint: " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof(kCheckpointVersion));
    out.write(reinterpret_cast<const char*>(&size), sizeof(size));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    if (!out) throw CheckpointError("failed writing checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t size = 0;
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file: " + path.string());
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in) throw CheckpointError("checkpoint: truncated header");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  in.read(reinterpret_cast<char*>(&size), sizeof(size));
  const auto file_size = std::filesystem::file_size(path);
  if (!in || size + 8 + 4 + 8 + 4 != file_size) throw CheckpointError("checkpoint: size mismatch (truncated or corrupt)");
  std::vector<char> payload(size);
  std::uint32_t crc = 0;
  in.read(payload.data(), static_cast<std::streamsize>(size));
  in.read(reinterpret_cast<char*>(&crc), sizeof(crc));
  if (!in) throw CheckpointError("checkpoint: truncated payload");
  if (crc != detail::crc32_of(payload)) throw CheckpointError("checkpoint: checksum mismatch (corrupt file)");

  detail::ByteReader r(payload);
  Checkpoint ck;
  try {
    const ModelConfig cfg = model_config_from_json(json::parse(r.str()));
    ck.model = Model<float>::build(cfg, 0);
    const auto train = r.str();
    if (!train.empty()) {
      TrainConfig tc;
      apply_json(tc, json::parse(train));
      ck.train = tc;
    }
    if (r.pod<std::uint8_t>()) {
      TrainerState st;
      st.epoch = r.pod<std::int32_t>();
      st.rng = r.str();
      st.sampler_rng = r.str();
      st.det_adam = detail::read_adam(r);
      st.age_adam = detail::read_adam(r);
      ck.state = st;
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: invalid header data: ") + e.what());
  }
  detail::read_params(r, ck.model.det_params);
  detail::read_params(r, ck.model.age_params);
  if (!r.at_end()) throw CheckpointError("checkpoint: trailing bytes");
  return ck;
}

}  // namespace crowdage
