// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout:
//
//   "METAATT1"                 8-byte magic
//   u64 little-endian          header length N
//   N bytes of JSON            {schema_version, config, run, optimizer_steps, rng_state,
//                               tensors: [{name, shape, offset}]}
//   f64 little-endian payload  tensors back to back, offsets counted in values
//
// Adam moments travel as ordinary tensors named "adam.m.<param>" / "adam.v.<param>",
// so a checkpoint restores training exactly.

#pragma once

#include "meta_attention/errors.hpp"
#include "meta_attention/model.hpp"
#include "meta_attention/optim.hpp"
#include "meta_attention/parameter.hpp"

#include "json.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace meta_attention {

inline constexpr char kCheckpointMagic[8] = {'M', 'E', 'T', 'A', 'A', 'T', 'T', '1'};
inline constexpr int kCheckpointSchemaVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  ModelConfig config;
  nlohmann::ordered_json run = nlohmann::ordered_json::object();  // caller metadata, stored verbatim
  std::size_t optimizer_steps = 0;
  std::string rng_state;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {
inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}
inline std::uint64_t get_u64(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
}  // namespace detail

/// Snapshot of model parameters, plus optimiser moments and RNG state when given.
inline Checkpoint make_checkpoint(const TinyLM& model, const Adam* opt = nullptr, const Rng* rng = nullptr) {
  Checkpoint ck;
  ck.config = model.config();
  const auto params = model.parameters();
  for (const auto& p : params) ck.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  if (opt) {
    ck.optimizer_steps = opt->steps();
    for (std::size_t i = 0; i < params.size(); ++i) ck.tensors.push_back({"adam.m." + params[i].name, params[i].tensor.shape(), opt->first_moments()[i]});
    for (std::size_t i = 0; i < params.size(); ++i) ck.tensors.push_back({"adam.v." + params[i].name, params[i].tensor.shape(), opt->second_moments()[i]});
  }
  if (rng) ck.rng_state = rng->state();
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::ordered_json header;
  header["schema_version"] = kCheckpointSchemaVersion;
  header["config"] = nlohmann::ordered_json::parse(nlohmann::json(ck.config).dump());
  header["run"] = ck.run;
  header["optimizer_steps"] = ck.optimizer_steps;
  header["rng_state"] = ck.rng_state;
  header["tensors"] = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& t : ck.tensors) {
    if (numel(t.shape) != t.values.size()) throw contract_error("checkpoint tensor " + t.name + " does not match its shape");
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size();
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw input_error("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : ck.tensors)
    for (double v : t.values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw input_error("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("checkpoint not found: " + path);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto fail = [&](const std::string& why) { return input_error("corrupt checkpoint " + path + ": " + why); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw fail("bad magic");
  const std::uint64_t header_len = detail::get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw fail("truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  }
  if (header.value("schema_version", 0) != kCheckpointSchemaVersion) throw fail("unsupported schema version");

  Checkpoint ck;
  try {
    ck.config = header.at("config").get<ModelConfig>();
    ck.run = header.at("run");
    ck.optimizer_steps = header.at("optimizer_steps").get<std::size_t>();
    ck.rng_state = header.at("rng_state").get<std::string>();
    const unsigned char* payload = bytes.data() + 16 + header_len;
    const std::size_t payload_values = (bytes.size() - 16 - header_len) / 8;
    for (const auto& entry : header.at("tensors")) {
      CheckpointTensor t{entry.at("name").get<std::string>(), entry.at("shape").get<Shape>(), {}};
      const auto offset = entry.at("offset").get<std::size_t>();
      const std::size_t n = numel(t.shape);
      if (offset + n > payload_values) throw fail("tensor " + t.name + " runs past the payload");
      t.values.resize(n);
      for (std::size_t i = 0; i < n; ++i) t.values[i] = std::bit_cast<double>(detail::get_u64(payload + 8 * (offset + i)));
      ck.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  }
  return ck;
}

/// Copies stored values into a model built from the same config, and into `opt` when given.
inline void restore_checkpoint(const Checkpoint& ck, TinyLM& model, Adam* opt = nullptr) {
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto* t = ck.find(p.name);
    if (!t) throw input_error("checkpoint is missing parameter " + p.name);
    if (t->shape != p.tensor.shape()) throw input_error("checkpoint parameter " + p.name + " has shape " + to_string(t->shape) + ", model expects " + to_string(p.tensor.shape()));
    std::copy(t->values.begin(), t->values.end(), p.tensor.mutable_data().begin());
    if (opt) {
      const auto* m = ck.find("adam.m." + p.name);
      const auto* v = ck.find("adam.v." + p.name);
      if (!m || !v) throw input_error("checkpoint carries no optimiser state for " + p.name);
      opt->first_moments()[i] = m->values;
      opt->second_moments()[i] = v->values;
    }
  }
  if (opt) opt->set_steps(ck.optimizer_steps);
}

}  // namespace meta_attention
