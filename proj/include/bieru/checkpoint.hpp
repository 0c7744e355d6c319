#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "BIERUCKP"
//   offset 8   8 bytes   u64 header length N
//   offset 16  N bytes   UTF-8 JSON header
//   offset 16+N          payload: IEEE-754 binary64 values, little-endian
//
// Header keys:
//   format_version  integer, currently 1
//   model_config    model configuration record
//   run_config      free-form record echoed from the run that wrote the file
//   tensors         [{name, shape, offset}] with byte offsets into the payload
//   payload_bytes   total payload length
//   train_state     null, or {epoch, rng_state[4], adam{t, lr, beta1, beta2,
//                   eps, m_offset, v_offset, length}, history[], best_val_loss,
//                   epochs_without_improvement}
//
// Parameters come first in visit order, then the Adam first moments, then
// the second moments.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bieru/config_io.hpp"
#include "bieru/model.hpp"
#include "bieru/train.hpp"

namespace bieru {

inline constexpr std::uint64_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'B', 'I', 'E', 'R', 'U', 'C', 'K', 'P'};

struct Checkpoint {
  BieruModel model;
  std::optional<TrainState> train_state;
  nlohmann::json run_config = nlohmann::json::object();
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return x;
}

inline void put_doubles(std::string& out, std::span<const double> xs) {
  for (double x : xs) put_u64(out, std::bit_cast<std::uint64_t>(x));
}

inline nlohmann::json rng_to_json(const Rng& rng) {
  auto arr = nlohmann::json::array();
  for (auto w : rng.state()) arr.push_back(w);
  return arr;
}

inline nlohmann::json non_finite_safe(double x) {
  if (std::isfinite(x)) return x;
  return nullptr;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  const auto& model = ck.model;
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["model_config"] = to_json(model.config);
  header["run_config"] = ck.run_config;

  std::string payload;
  auto& index = header["tensors"] = nlohmann::json::array();
  for (const auto& slot : tensor_slots(model)) {
    index.push_back({{"name", slot.name}, {"shape", slot.shape}, {"offset", payload.size()}});
    detail::put_doubles(payload, slot.data);
  }

  if (ck.train_state) {
    const auto& ts = *ck.train_state;
    const std::size_t n = count_tensors_size(model);
    if (ts.adam.m.size() != n || ts.adam.v.size() != n) {
      throw Error(ErrorKind::shape, "serialize_checkpoint: optimizer moments do not mirror parameters");
    }
    nlohmann::json st;
    st["epoch"] = ts.epoch;
    st["rng_state"] = detail::rng_to_json(ts.rng);
    st["best_val_loss"] = detail::non_finite_safe(ts.best_val_loss);
    st["epochs_without_improvement"] = ts.epochs_without_improvement;
    auto& hist = st["history"] = nlohmann::json::array();
    for (const auto& m : ts.history) hist.push_back(to_json(m));
    nlohmann::json adam{{"t", ts.adam.t}, {"lr", ts.adam.hp.lr}, {"beta1", ts.adam.hp.beta1},
                        {"beta2", ts.adam.hp.beta2}, {"eps", ts.adam.hp.eps}, {"length", n}};
    adam["m_offset"] = payload.size();
    detail::put_doubles(payload, ts.adam.m);
    adam["v_offset"] = payload.size();
    detail::put_doubles(payload, ts.adam.v);
    st["adam"] = std::move(adam);
    header["train_state"] = std::move(st);
  } else {
    header["train_state"] = nullptr;
  }
  header["payload_bytes"] = payload.size();

  const std::string text = header.dump(1);
  std::string out(kCheckpointMagic, 8);
  detail::put_u64(out, text.size());
  out += text;
  out += payload;
  return out;
}

/// Parses a checkpoint image. With `expected`, the stored tensors must match
/// the shapes implied by that configuration.
inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::optional<ModelConfig>& expected = {}) {
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw Error(ErrorKind::checkpoint_header, "checkpoint: bad magic");
  }
  const std::uint64_t header_len = detail::get_u64(raw + 8);
  if (header_len > bytes.size() - 16) {
    throw Error(ErrorKind::checkpoint_truncated, "checkpoint: header runs past end of file");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::checkpoint_header, std::string("checkpoint: corrupt header: ") + e.what());
  }
  if (!header.is_object() || !header.contains("format_version")) {
    throw Error(ErrorKind::checkpoint_header, "checkpoint: header has no format_version");
  }
  const auto version = header["format_version"].get<std::uint64_t>();
  if (version != kCheckpointVersion) {
    std::ostringstream os;
    os << "checkpoint: format version " << version << " not supported (expected " << kCheckpointVersion << ")";
    throw Error(ErrorKind::checkpoint_version, os.str());
  }

  const std::size_t payload_start = 16 + header_len;
  const std::size_t available = bytes.size() - payload_start;
  auto read_doubles = [&](std::size_t offset, std::span<double> dst, const std::string& what) {
    if (offset % 8 != 0 || offset + dst.size() * 8 > available) {
      std::ostringstream os;
      os << "checkpoint: payload truncated while reading " << what << " (need " << offset + dst.size() * 8
         << " bytes, have " << available << ")";
      throw Error(ErrorKind::checkpoint_truncated, os.str());
    }
    const unsigned char* p = raw + payload_start + offset;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = std::bit_cast<double>(detail::get_u64(p + 8 * i));
  };

  Checkpoint ck;
  ModelConfig stored;
  try {
    stored = model_config_from_json(header.at("model_config"));
    if (header.contains("run_config")) ck.run_config = header["run_config"];
    const auto declared = header.at("payload_bytes").get<std::size_t>();
    if (declared > available) {
      std::ostringstream os;
      os << "checkpoint: payload truncated (" << available << " of " << declared << " bytes)";
      throw Error(ErrorKind::checkpoint_truncated, os.str());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::checkpoint_header, std::string("checkpoint: ") + e.what());
  }

  const ModelConfig& target = expected ? *expected : stored;
  try {
    ck.model = BieruModel::zeros(target);
  } catch (const Error& e) {
    throw Error(ErrorKind::checkpoint_header, std::string("checkpoint: invalid model config: ") + e.what());
  }

  const auto& index = header.at("tensors");
  if (!index.is_array()) throw Error(ErrorKind::checkpoint_header, "checkpoint: tensor index is not an array");
  auto slots = tensor_slots(ck.model);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (i >= index.size()) {
      std::ostringstream os;
      os << "checkpoint: tensor '" << slots[i].name << "' missing (file holds " << index.size()
         << " tensors, configuration needs " << slots.size() << ")";
      throw Error(ErrorKind::checkpoint_shape, os.str());
    }
    const auto& entry = index[i];
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::checkpoint_header, std::string("checkpoint: bad tensor index entry: ") + e.what());
    }
    if (name != slots[i].name || shape != slots[i].shape) {
      std::ostringstream os;
      os << "checkpoint: tensor '" << slots[i].name << "' expected shape " << shape_string(slots[i].shape)
         << ", file has '" << name << "' with shape " << shape_string(shape);
      throw Error(ErrorKind::checkpoint_shape, os.str());
    }
    read_doubles(offset, slots[i].data, "tensor '" + name + "'");
  }
  if (index.size() != slots.size()) {
    std::ostringstream os;
    os << "checkpoint: file holds " << index.size() << " tensors, configuration needs " << slots.size() << "; '"
       << index[slots.size()].value("name", std::string("?")) << "' is extra";
    throw Error(ErrorKind::checkpoint_shape, os.str());
  }

  if (header.contains("train_state") && !header["train_state"].is_null()) {
    try {
      const auto& st = header["train_state"];
      TrainState ts;
      ts.epoch = st.at("epoch").get<std::size_t>();
      Rng::State rs{};
      const auto& rj = st.at("rng_state");
      if (!rj.is_array() || rj.size() != 4) throw Error(ErrorKind::checkpoint_header, "checkpoint: bad rng_state");
      for (std::size_t i = 0; i < 4; ++i) rs[i] = rj[i].get<std::uint64_t>();
      ts.rng.set_state(rs);
      ts.best_val_loss = st.value("best_val_loss", nlohmann::json()).is_number()
                             ? st["best_val_loss"].get<double>()
                             : std::numeric_limits<double>::infinity();
      ts.epochs_without_improvement = st.value("epochs_without_improvement", std::size_t{0});
      for (const auto& hj : st.value("history", nlohmann::json::array())) {
        EpochMetrics m;
        m.epoch = hj.at("epoch").get<std::size_t>();
        m.mean_loss = hj.at("mean_loss").get<double>();
        m.train_metric = hj.at("train_metric").get<double>();
        if (hj.contains("val_loss")) m.val_loss = hj["val_loss"].get<double>();
        if (hj.contains("val_metric")) m.val_metric = hj["val_metric"].get<double>();
        ts.history.push_back(m);
      }
      const auto& aj = st.at("adam");
      ts.adam.t = aj.at("t").get<std::uint64_t>();
      ts.adam.hp = {aj.at("lr").get<double>(), aj.at("beta1").get<double>(), aj.at("beta2").get<double>(),
                    aj.at("eps").get<double>()};
      const auto n = aj.at("length").get<std::size_t>();
      if (n != count_tensors_size(ck.model)) {
        throw Error(ErrorKind::checkpoint_shape, "checkpoint: optimizer moments do not mirror parameters");
      }
      ts.adam.m.assign(n, 0.0);
      ts.adam.v.assign(n, 0.0);
      read_doubles(aj.at("m_offset").get<std::size_t>(), ts.adam.m, "adam.m");
      read_doubles(aj.at("v_offset").get<std::size_t>(), ts.adam.v, "adam.v");
      ck.train_state = std::move(ts);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::checkpoint_header, std::string("checkpoint: bad train_state: ") + e.what());
    }
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::io, "short write on checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expected = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, expected);
}

}  // namespace bieru
