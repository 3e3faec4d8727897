#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "udp/encoder.hpp"

namespace udp {

/// Raw tensors of a .safetensors file, converted to float.
struct SafeTensors {
  struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<float> data;
  };
  std::map<std::string, Tensor> tensors;

  static SafeTensors load(const std::filesystem::path& path);
  static SafeTensors parse(std::string_view bytes);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

/// GPT-2 style byte-level BPE as used by RoBERTa checkpoints.
class ByteLevelBpe {
 public:
  ByteLevelBpe(std::unordered_map<std::string, int> vocab, std::vector<std::pair<std::string, std::string>> merges);
  static ByteLevelBpe load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt);

  /// Token ids without special tokens.
  std::vector<int> encode(std::string_view text) const;
  int token_id(const std::string& token) const;

  /// Pre-tokenizer split (contractions, letter runs, digit runs, symbols, spaces).
  static std::vector<std::string> pre_tokenize(std::string_view text);

 private:
  std::vector<std::string> bpe(const std::string& word) const;

  std::unordered_map<std::string, int> vocab_;
  std::map<std::pair<std::string, std::string>, int> ranks_;
  std::vector<std::string> byte_to_unicode_;
};

struct RobertaConfig {
  int hidden = 768;
  int layers = 12;
  int heads = 12;
  int intermediate = 3072;
  int max_positions = 514;
  int pad_token_id = 1;
  int bos_token_id = 0;
  int eos_token_id = 2;
  double layer_norm_eps = 1e-5;
};

/// Frozen RoBERTa forward pass; the sentence vector is the final-layer
/// hidden state of the leading <s> token.
class RobertaEncoder final : public EmbeddingBackend {
 public:
  static RobertaEncoder load(const std::filesystem::path& dir);

  nn::Vector embed(std::string_view text) const override;
  int dim() const override { return config_.hidden; }
  std::string fingerprint() const override { return fingerprint_; }

  /// Final-layer hidden states for explicit ids (special tokens included).
  Eigen::MatrixXf hidden_states(const std::vector<int>& ids) const;
  std::vector<int> tokenize(std::string_view text) const;

 private:
  struct Dense {
    Eigen::MatrixXf weight;  // (in x out)
    Eigen::RowVectorXf bias;
  };
  struct Norm {
    Eigen::RowVectorXf gain;
    Eigen::RowVectorXf bias;
  };
  struct Layer {
    Dense q, k, v, attn_out;
    Norm attn_norm;
    Dense up, down;
    Norm out_norm;
  };

  RobertaEncoder(RobertaConfig config, ByteLevelBpe tokenizer) : config_(config), tokenizer_(std::move(tokenizer)) {}

  RobertaConfig config_;
  ByteLevelBpe tokenizer_;
  Eigen::MatrixXf word_embeddings_;
  Eigen::MatrixXf position_embeddings_;
  Eigen::RowVectorXf token_type_embedding_;
  Norm embedding_norm_;
  std::vector<Layer> layers_;
  std::string fingerprint_;
};

}  // namespace udp
