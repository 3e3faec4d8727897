#include "udp/encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <mutex>
#include <numeric>
#include <vector>

#include "udp/error.hpp"
#include "udp/roberta.hpp"
#include "udp/util.hpp"

namespace udp {

EncoderMode parse_encoder_mode(std::string_view name) {
  if (name == "hash") return EncoderMode::kHash;
  if (name == "checkpoint") return EncoderMode::kCheckpoint;
  fail(ErrorKind::kConfiguration, "unknown encoder.mode '" + std::string(name) + "'");
}

HashEmbedding::HashEmbedding(int dim) : dim_(dim) {
  require(dim > 0, ErrorKind::kConfiguration, "encoder.dim must be positive");
}

nn::Vector HashEmbedding::embed(std::string_view text) const {
  std::string s;
  s.reserve(text.size() + 2);
  s.push_back(' ');
  for (unsigned char c : text) s.push_back(static_cast<char>(std::tolower(c)));
  s.push_back(' ');
  nn::Vector v = nn::Vector::Zero(dim_);
  for (std::size_t n = 3; n <= 5; ++n) {
    if (s.size() < n) continue;
    for (std::size_t i = 0; i + n <= s.size(); ++i) {
      Fnv1a h;
      h.update(&n, sizeof(n));
      h.update(s.data() + i, n);
      const std::uint64_t d = h.digest();
      const double sign = (d >> 63) ? -1.0 : 1.0;
      v(static_cast<Eigen::Index>(d % static_cast<std::uint64_t>(dim_))) += sign;
    }
  }
  const double norm = v.norm();
  if (norm > 0) v /= norm;
  return v;
}

std::string HashEmbedding::fingerprint() const {
  return "hash-ngram3to5-d" + std::to_string(dim_);
}

TextEncoder::TextEncoder(std::unique_ptr<EmbeddingBackend> backend, EncoderConfig config)
    : backend_(std::move(backend)), config_(std::move(config)) {
  require(backend_ != nullptr, ErrorKind::kConfiguration, "text encoder needs a backend");
}

std::shared_ptr<TextEncoder> TextEncoder::create(const EncoderConfig& config) {
  std::unique_ptr<EmbeddingBackend> backend;
  if (config.mode == EncoderMode::kHash) {
    backend = std::make_unique<HashEmbedding>(config.dim);
  } else {
    backend = std::make_unique<RobertaEncoder>(RobertaEncoder::load(config.checkpoint_name));
  }
  return std::make_shared<TextEncoder>(std::move(backend), config);
}

nn::Vector TextEncoder::lookup(std::string_view text) const {
  const std::string key(text);
  {
    std::shared_lock lock(mu_);
    auto it = cache_.find(key);
    if (it != cache_.end()) {
      ++hits_;
      return it->second;
    }
  }
  ++misses_;
  nn::Vector v = backend_->embed(text);
  if (!v.allFinite()) fail(ErrorKind::kNumericalDomain, "encoder produced a non-finite embedding");
  if (config_.cache_capacity > 0) {
    std::unique_lock lock(mu_);
    if (cache_.size() >= config_.cache_capacity) cache_.clear();
    cache_.emplace(key, v);
  }
  return v;
}

Embedding TextEncoder::encode_text(std::string_view text, SourceKind kind) const {
  if (text.empty()) fail(ErrorKind::kArgument, "cannot encode empty text");
  return Embedding{lookup(text), kind};
}

Embedding TextEncoder::encode_condition(std::span<const std::string> utterances) const {
  if (utterances.empty()) fail(ErrorKind::kArgument, "condition needs at least one utterance");
  std::vector<std::size_t> order(utterances.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return utterances[a] < utterances[b]; });
  nn::Vector sum = nn::Vector::Zero(dim());
  for (std::size_t i : order) sum += encode_text(utterances[i]).vector;
  return Embedding{sum / static_cast<double>(utterances.size()), SourceKind::kUtterance};
}

Embedding TextEncoder::encode_history(std::span<const std::string> lines) const {
  std::string joined;
  for (const auto& l : lines) {
    joined += l;
    joined += '\n';
  }
  if (joined.empty()) joined = "[dialogue start]";
  return encode_text(truncate_front(joined, config_.max_history_chars), SourceKind::kHistory);
}

CacheStats TextEncoder::cache_stats() const {
  std::shared_lock lock(mu_);
  return CacheStats{hits_.load(), misses_.load(), cache_.size()};
}

std::string truncate_front(std::string_view text, std::size_t max_chars) {
  if (text.size() <= max_chars) return std::string(text);
  std::size_t start = text.size() - max_chars;
  while (start < text.size() && (static_cast<unsigned char>(text[start]) & 0xC0) == 0x80) ++start;
  return std::string(text.substr(start));
}

double cosine(const nn::Vector& a, const nn::Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) fail(ErrorKind::kArgument, "cosine of a zero vector");
  return a.dot(b) / (na * nb);
}

}  // namespace udp
