#pragma once

// Model snapshots in memory and the "SRWSEG1" checkpoint file:
//   8 bytes   "SRWSEG1\n"
//   8 bytes   little-endian header length L
//   L bytes   JSON header {format, dtype, network, meta, tensors: [{name, shape}]}
//   payload   tensor values in header order, raw dtype

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "srwseg/network.hpp"

namespace srwseg::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

inline constexpr char kMagic[8] = {'S', 'R', 'W', 'S', 'E', 'G', '1', '\n'};

template <class T>
struct ModelState {
  std::vector<std::pair<std::string, Tensor<T>>> tensors;  // parameters, then buffers
};

template <class T>
ModelState<T> capture_state(network::Model<T>& model) {
  ModelState<T> s;
  model.for_each_parameter([&](const std::string& n, Var<T>& v) { s.tensors.emplace_back(n, v.value()); });
  model.for_each_buffer([&](const std::string& n, Tensor<T>& t) { s.tensors.emplace_back(n, t); });
  return s;
}

template <class T, class U>
void restore_state(network::Model<T>& model, const ModelState<U>& state) {
  std::size_t i = 0;
  auto take = [&](const std::string& name, Tensor<T>& dst) {
    if (i >= state.tensors.size()) throw ValidationError("restore_state: snapshot is missing '" + name + "'");
    const auto& [src_name, src] = state.tensors[i++];
    if (src_name != name) {
      throw ValidationError("restore_state: expected tensor '" + name + "', snapshot has '" + src_name + "'");
    }
    if (src.shape() != dst.shape()) {
      throw ValidationError("restore_state: '" + name + "' has shape " + to_string(src.shape()) + ", model expects " +
                            to_string(dst.shape()));
    }
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(src[k]);
  };
  model.for_each_parameter([&](const std::string& n, Var<T>& v) { take(n, v.mutable_value()); });
  model.for_each_buffer([&](const std::string& n, Tensor<T>& t) { take(n, t); });
  if (i != state.tensors.size()) throw ValidationError("restore_state: snapshot has extra tensors");
}

inline nlohmann::json network_to_json(const network::NetworkConfig& c) {
  return {{"stage_channels", c.stage_channels},
          {"srw_stages", c.srw_stages},
          {"aspp_dilations", c.aspp_dilations},
          {"num_classes", c.num_classes},
          {"input_h", c.input_h},
          {"input_w", c.input_w},
          {"aspp_channels", c.aspp_channels},
          {"low_level_channels", c.low_level_channels},
          {"decoder_channels", c.decoder_channels},
          {"reduction", c.reduction},
          {"attention_batch_shared", c.attention_batch_shared}};
}

inline network::NetworkConfig network_from_json(const nlohmann::json& j) {
  network::NetworkConfig c;
  j.at("stage_channels").get_to(c.stage_channels);
  j.at("srw_stages").get_to(c.srw_stages);
  j.at("aspp_dilations").get_to(c.aspp_dilations);
  j.at("num_classes").get_to(c.num_classes);
  j.at("input_h").get_to(c.input_h);
  j.at("input_w").get_to(c.input_w);
  j.at("aspp_channels").get_to(c.aspp_channels);
  j.at("low_level_channels").get_to(c.low_level_channels);
  j.at("decoder_channels").get_to(c.decoder_channels);
  j.at("reduction").get_to(c.reduction);
  j.at("attention_batch_shared").get_to(c.attention_batch_shared);
  return c;
}

template <class T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) {
    return "f32";
  } else {
    static_assert(std::is_same_v<T, double>, "checkpoints hold float or double tensors");
    return "f64";
  }
}

/// Writes the checkpoint through a temporary file renamed into place.
template <class T>
void save_checkpoint(const std::filesystem::path& path, network::Model<T>& model, const nlohmann::json& meta = {}) {
  const auto state = capture_state(model);
  nlohmann::json header{{"format", "SRWSEG1"},
                        {"dtype", dtype_name<T>()},
                        {"network", network_to_json(model.config())},
                        {"meta", meta.is_null() ? nlohmann::json::object() : meta}};
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : state.tensors) header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + tmp.string());
    f.write(kMagic, sizeof kMagic);
    f.write(reinterpret_cast<const char*>(&len), sizeof len);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : state.tensors) {
      f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    }
    if (!f) throw IoError("write failed for checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <class T>
struct Checkpoint {
  network::Model<T> model;
  nlohmann::json meta;
};

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint not found or unreadable: " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw ValidationError(path.string() + " is not an SRWSEG1 checkpoint");
  }
  f.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!f || len > (1u << 26)) throw ValidationError(path.string() + ": corrupt checkpoint header");
  std::string text(len, '\0');
  f.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": corrupt checkpoint header (" + e.what() + ")");
  }

  const std::string dtype = header.value("dtype", "");
  if (dtype != "f32" && dtype != "f64") throw ValidationError(path.string() + ": unsupported dtype '" + dtype + "'");
  network::NetworkConfig config;
  try {
    config = network_from_json(header.at("network"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": bad network section (" + e.what() + ")");
  }
  ModelState<double> state;
  for (const auto& e : header.at("tensors")) {
    Tensor<double> t(e.at("shape").get<Shape>());
    if (dtype == "f32") {
      std::vector<float> raw(t.size());
      f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
      for (std::size_t k = 0; k < raw.size(); ++k) t[k] = raw[k];
    } else {
      f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!f) throw ValidationError(path.string() + ": checkpoint payload is truncated");
    state.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  Checkpoint<T> out{network::Model<T>(config, 0), header.value("meta", nlohmann::json::object())};
  restore_state(out.model, state);
  return out;
}

}  // namespace srwseg::ckpt
