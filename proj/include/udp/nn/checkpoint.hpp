#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "udp/nn/autograd.hpp"

namespace udp::nn {

/// Named tensors plus a JSON header. On disk: "UDPCKPT1", an 8-byte
/// little-endian header length, the header JSON, then each tensor's values
/// as row-major little-endian doubles in header order.
struct Checkpoint {
  std::string stage;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Appends every parameter under `prefix + name`.
void export_parameters(const ParameterList& params, Checkpoint& ckpt, const std::string& prefix = "");
/// Copies matching tensors into `params`; every parameter must be present with
/// an identical shape.
void import_parameters(const ParameterList& params, const Checkpoint& ckpt, const std::string& prefix = "");

/// Content hash over parameter names, shapes and raw values.
std::string parameter_hash(const ParameterList& params);

}  // namespace udp::nn
