#include "udp/nn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "udp/error.hpp"
#include "udp/util.hpp"

namespace udp::nn {
namespace {

constexpr char kMagic[8] = {'U', 'D', 'P', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian hosts");

}  // namespace

const Matrix* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return &m;
  }
  return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header;
  header["stage"] = ckpt.stage;
  header["meta"] = ckpt.meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, m] : ckpt.tensors) {
    header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  }
  const std::string head = header.dump();
  std::string blob(kMagic, sizeof(kMagic));
  const std::uint64_t len = head.size();
  blob.append(reinterpret_cast<const char*>(&len), sizeof(len));
  blob += head;
  for (const auto& [name, m] : ckpt.tensors) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double v = m(r, c);
        blob.append(reinterpret_cast<const char*>(&v), sizeof(v));
      }
    }
  }
  write_file(path, blob);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string blob = read_file(path);
  if (blob.size() < sizeof(kMagic) + 8 || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorKind::kParse, path.string() + ": not a checkpoint file");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, blob.data() + sizeof(kMagic), sizeof(len));
  std::size_t at = sizeof(kMagic) + sizeof(len);
  if (len > blob.size() - at) fail(ErrorKind::kParse, path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(at, len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, path.string() + ": bad header: " + e.what());
  }
  at += len;
  Checkpoint ckpt;
  ckpt.stage = header.at("stage").get<std::string>();
  ckpt.meta = header.at("meta");
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
    if (bytes > blob.size() - at) fail(ErrorKind::kParse, path.string() + ": truncated tensor data");
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        std::memcpy(&m(r, c), blob.data() + at, sizeof(double));
        at += sizeof(double);
      }
    }
    ckpt.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  if (at != blob.size()) fail(ErrorKind::kParse, path.string() + ": trailing bytes");
  return ckpt;
}

void export_parameters(const ParameterList& params, Checkpoint& ckpt, const std::string& prefix) {
  for (const Parameter* p : params) ckpt.tensors.emplace_back(prefix + p->name, p->value);
}

void import_parameters(const ParameterList& params, const Checkpoint& ckpt, const std::string& prefix) {
  for (Parameter* p : params) {
    const Matrix* m = ckpt.find(prefix + p->name);
    if (m == nullptr) fail(ErrorKind::kParse, "checkpoint is missing tensor " + prefix + p->name);
    if (m->rows() != p->value.rows() || m->cols() != p->value.cols()) {
      fail(ErrorKind::kShape, "checkpoint tensor " + prefix + p->name + " has the wrong shape");
    }
    p->value = *m;
    p->zero_grad();
  }
}

std::string parameter_hash(const ParameterList& params) {
  Fnv1a h;
  for (const Parameter* p : params) {
    h.update(p->name);
    const std::int64_t shape[2] = {p->value.rows(), p->value.cols()};
    h.update(shape, sizeof(shape));
    h.update(p->value.data(), static_cast<std::size_t>(p->value.size()) * sizeof(double));
  }
  return h.hex();
}

}  // namespace udp::nn
