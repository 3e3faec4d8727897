#pragma once

#include <atomic>
#include <cstddef>
#include <memory>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>

#include "udp/nn/autograd.hpp"

namespace udp {

enum class EncoderMode { kHash, kCheckpoint };
EncoderMode parse_encoder_mode(std::string_view name);

struct EncoderConfig {
  EncoderMode mode = EncoderMode::kHash;
  /// Directory holding model.safetensors, vocab.json, merges.txt and config.json.
  std::string checkpoint_name;
  /// Output width in hash mode; checkpoint mode takes it from the model.
  int dim = 256;
  /// Dialogue histories keep only their most recent characters.
  std::size_t max_history_chars = 512;
  std::size_t cache_capacity = 1 << 14;
};

enum class SourceKind { kUtterance, kHistory, kPersona, kStrategy };

struct Embedding {
  nn::Vector vector;
  SourceKind source_kind = SourceKind::kUtterance;
};

/// Produces sentence vectors. Implementations must be pure functions of the text.
class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;
  virtual nn::Vector embed(std::string_view text) const = 0;
  virtual int dim() const = 0;
  virtual std::string fingerprint() const = 0;
};

/// Signed feature hashing of character 3..5-grams, L2-normalized.
class HashEmbedding final : public EmbeddingBackend {
 public:
  explicit HashEmbedding(int dim);
  nn::Vector embed(std::string_view text) const override;
  int dim() const override { return dim_; }
  std::string fingerprint() const override;

 private:
  int dim_;
};

struct CacheStats {
  std::size_t hits = 0;
  std::size_t misses = 0;
  std::size_t size = 0;
};

/// Frozen text encoder with a transparent memo cache. Safe for concurrent use.
class TextEncoder {
 public:
  TextEncoder(std::unique_ptr<EmbeddingBackend> backend, EncoderConfig config);

  static std::shared_ptr<TextEncoder> create(const EncoderConfig& config);

  Embedding encode_text(std::string_view text, SourceKind kind = SourceKind::kUtterance) const;
  /// Mean of per-utterance embeddings. Summation runs in sorted-text order so
  /// the result does not depend on the order of `utterances`.
  Embedding encode_condition(std::span<const std::string> utterances) const;
  /// Encodes the trailing `max_history_chars` characters of the joined turns.
  Embedding encode_history(std::span<const std::string> lines) const;

  int dim() const { return backend_->dim(); }
  std::string fingerprint() const { return backend_->fingerprint(); }
  CacheStats cache_stats() const;
  const EncoderConfig& config() const { return config_; }

 private:
  nn::Vector lookup(std::string_view text) const;

  std::unique_ptr<EmbeddingBackend> backend_;
  EncoderConfig config_;
  mutable std::shared_mutex mu_;
  mutable std::unordered_map<std::string, nn::Vector> cache_;
  mutable std::atomic<std::size_t> hits_{0};
  mutable std::atomic<std::size_t> misses_{0};
};

/// Keeps the last `max_chars` bytes of `text`, starting on a UTF-8 boundary.
std::string truncate_front(std::string_view text, std::size_t max_chars);

double cosine(const nn::Vector& a, const nn::Vector& b);

}  // namespace udp
