#include "ngpt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "ngpt/errors.hpp"

namespace ngpt {
namespace {

using nlohmann::json;
using Kind = CheckpointError::Kind;

constexpr char kMagic[4] = {'N', 'G', 'P', 'T'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get(const std::string& in, std::size_t off) {
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  return v;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <class T>
struct Slot {
  std::string name;
  T* tensor;
};

template <class State, class T = std::conditional_t<std::is_const_v<State>, const Tensor, Tensor>>
std::vector<Slot<T>> slots(State& s, const ModelConfig& cfg) {
  std::vector<Slot<T>> out;
  for (auto& e : named_params(s.params, cfg)) out.push_back({e.name, e.tensor});
  for (std::size_t i = 0; i < s.adam.m.size(); ++i)
    out.push_back({"adam.m." + s.adam.names[i], &s.adam.m[i]});
  for (std::size_t i = 0; i < s.adam.v.size(); ++i)
    out.push_back({"adam.v." + s.adam.names[i], &s.adam.v[i]});
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainState& state, const RunConfig& cfg) {
  json header;
  header["config"] = json::parse(to_json(cfg));
  header["step"] = state.step;
  header["adam_step"] = state.adam.step;
  header["rng"] = hex64(state.rng.state());
  json dir = json::array();
  std::string payload;
  for (const auto& s : slots(state, cfg.model)) {
    dir.push_back({{"name", s.name},
                   {"dtype", "f32"},
                   {"shape", s.tensor->shape()},
                   {"offset", payload.size()}});
    for (double v : s.tensor->data()) put(payload, static_cast<float>(v));
  }
  header["tensors"] = dir;
  header["payload_bytes"] = payload.size();
  const std::string h = header.dump();

  std::string out(kMagic, 4);
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  out += payload;

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(Kind::kIo, "cannot write checkpoint '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError(Kind::kIo, "short write to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw CheckpointError(Kind::kIo, "cannot move checkpoint into place at '" + path + "'");
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(Kind::kIo, "cannot read checkpoint '" + path + "'");
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (in.size() < 4 || std::memcmp(in.data(), kMagic, 4) != 0) {
    throw CheckpointError(Kind::kBadMagic, path + ": bad magic, not an NGPT checkpoint");
  }
  if (in.size() < 16) throw CheckpointError(Kind::kTruncated, path + ": truncated header");
  const auto version = get<std::uint32_t>(in, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::kVersionMismatch,
                          path + ": format version " + std::to_string(version) +
                              ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto hlen = get<std::uint64_t>(in, 8);
  if (hlen > in.size() - 16) throw CheckpointError(Kind::kTruncated, path + ": truncated header");

  json header;
  LoadedCheckpoint out;
  std::uint64_t payload_bytes = 0;
  try {
    header = json::parse(in.substr(16, hlen));
    out.config = parse_run_config(header.at("config").dump());
    out.config.finalize();
    payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw CheckpointError(Kind::kMalformed, path + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::kMalformed, path + ": invalid config: " + e.what());
  }
  const std::size_t base = 16 + hlen;
  if (in.size() - base < payload_bytes) {
    throw CheckpointError(Kind::kTruncated, path + ": payload has " +
                                                std::to_string(in.size() - base) + " of " +
                                                std::to_string(payload_bytes) + " bytes");
  }

  TrainState& st = out.state;
  st.params = init_params(out.config.model, 0);
  st.adam = make_adam_state(st.params, out.config.model);
  std::map<std::string, Tensor*> by_name;
  for (const auto& s : slots(st, out.config.model)) by_name[s.name] = s.tensor;
  try {
    st.step = header.at("step").get<std::int64_t>();
    st.adam.step = header.at("adam_step").get<std::int64_t>();
    st.rng.set_state(std::stoull(header.at("rng").get<std::string>(), nullptr, 16));
    std::size_t seen = 0;
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto it = by_name.find(name);
      if (it == by_name.end()) {
        throw CheckpointError(Kind::kMalformed, path + ": unexpected tensor '" + name + "'");
      }
      const Shape shape = t.at("shape").get<Shape>();
      if (shape != it->second->shape() || t.at("dtype") != "f32") {
        throw CheckpointError(Kind::kMalformed, path + ": tensor '" + name + "' has shape " +
                                                    to_string(shape) + ", config implies " +
                                                    to_string(it->second->shape()));
      }
      const auto off = t.at("offset").get<std::uint64_t>();
      const std::uint64_t bytes = element_count(shape) * sizeof(float);
      if (off > payload_bytes || bytes > payload_bytes - off) {
        throw CheckpointError(Kind::kTruncated, path + ": tensor '" + name + "' runs past payload");
      }
      auto data = it->second->data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = static_cast<double>(get<float>(in, base + off + i * sizeof(float)));
      }
      ++seen;
    }
    if (seen != by_name.size()) {
      throw CheckpointError(Kind::kMalformed, path + ": tensor directory is incomplete");
    }
  } catch (const json::exception& e) {
    throw CheckpointError(Kind::kMalformed, path + ": malformed header: " + e.what());
  } catch (const std::invalid_argument&) {
    throw CheckpointError(Kind::kMalformed, path + ": malformed rng state");
  }
  return out;
}

}  // namespace ngpt
