#include "udp/roberta.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include <json.hpp>

#include "udp/error.hpp"
#include "udp/util.hpp"

namespace udp {
namespace {

using nlohmann::json;
using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FFu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  float f;
  std::memcpy(&f, &bits, sizeof(f));
  return f;
}

float bf16_to_float(std::uint16_t h) {
  const std::uint32_t bits = static_cast<std::uint32_t>(h) << 16;
  float f;
  std::memcpy(&f, &bits, sizeof(f));
  return f;
}

std::string codepoint_utf8(int cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return out;
}

std::vector<std::string> byte_to_unicode_table() {
  std::vector<int> bs;
  for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
  for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
  for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
  std::vector<int> cs = bs;
  int n = 0;
  for (int b = 0; b < 256; ++b) {
    if (std::find(bs.begin(), bs.end(), b) == bs.end()) {
      bs.push_back(b);
      cs.push_back(256 + n);
      ++n;
    }
  }
  std::vector<std::string> table(256);
  for (std::size_t i = 0; i < bs.size(); ++i) table[static_cast<std::size_t>(bs[i])] = codepoint_utf8(cs[i]);
  return table;
}

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}
// Non-ASCII bytes are treated as letters.
bool is_letter(unsigned char c) {
  return std::isalpha(c) || c >= 0x80;
}
bool is_digit(unsigned char c) {
  return c >= '0' && c <= '9';
}

Eigen::MatrixXf linear_weight(const SafeTensors::Tensor& t, const std::string& name) {
  if (t.shape.size() != 2) fail(ErrorKind::kShape, name + ": expected a 2-D weight");
  Eigen::Map<const RowMajorF> m(t.data.data(), t.shape[0], t.shape[1]);
  return m.transpose();
}

Eigen::RowVectorXf vector_of(const SafeTensors::Tensor& t, const std::string& name) {
  if (t.shape.size() != 1) fail(ErrorKind::kShape, name + ": expected a 1-D tensor");
  return Eigen::Map<const Eigen::RowVectorXf>(t.data.data(), t.shape[0]);
}

Eigen::MatrixXf table_of(const SafeTensors::Tensor& t, const std::string& name) {
  if (t.shape.size() != 2) fail(ErrorKind::kShape, name + ": expected a 2-D table");
  return Eigen::Map<const RowMajorF>(t.data.data(), t.shape[0], t.shape[1]);
}

Eigen::MatrixXf layer_norm(const Eigen::MatrixXf& x, const Eigen::RowVectorXf& gain, const Eigen::RowVectorXf& bias,
                           double eps) {
  Eigen::MatrixXf out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const float mu = x.row(r).mean();
    Eigen::RowVectorXf c = x.row(r).array() - mu;
    const float var = c.squaredNorm() / static_cast<float>(x.cols());
    const float inv = 1.0f / std::sqrt(var + static_cast<float>(eps));
    out.row(r) = (c.array() * inv * gain.array() + bias.array()).matrix();
  }
  return out;
}

}  // namespace

SafeTensors SafeTensors::parse(std::string_view bytes) {
  if (bytes.size() < 8) fail(ErrorKind::kParse, "safetensors: file too short");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (header_len > bytes.size() - 8) fail(ErrorKind::kParse, "safetensors: truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(8, header_len));
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("safetensors: bad header: ") + e.what());
  }
  const std::string_view data = bytes.substr(8 + header_len);
  SafeTensors out;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") continue;
    Tensor t;
    t.shape = info.at("shape").get<std::vector<std::int64_t>>();
    const auto offsets = info.at("data_offsets").get<std::vector<std::size_t>>();
    if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > data.size()) {
      fail(ErrorKind::kParse, "safetensors: bad offsets for " + name);
    }
    std::size_t count = 1;
    for (auto d : t.shape) count *= static_cast<std::size_t>(d);
    const std::string dtype = info.at("dtype").get<std::string>();
    const char* src = data.data() + offsets[0];
    const std::size_t span = offsets[1] - offsets[0];
    t.data.resize(count);
    if (dtype == "F32") {
      if (span != count * 4) fail(ErrorKind::kParse, "safetensors: size mismatch for " + name);
      std::memcpy(t.data.data(), src, span);
    } else if (dtype == "F16" || dtype == "BF16") {
      if (span != count * 2) fail(ErrorKind::kParse, "safetensors: size mismatch for " + name);
      for (std::size_t i = 0; i < count; ++i) {
        std::uint16_t h;
        std::memcpy(&h, src + 2 * i, 2);
        t.data[i] = dtype == "F16" ? half_to_float(h) : bf16_to_float(h);
      }
    } else if (dtype == "I64") {
      // Buffers such as position_ids; values are small integers.
      if (span != count * 8) fail(ErrorKind::kParse, "safetensors: size mismatch for " + name);
      for (std::size_t i = 0; i < count; ++i) {
        std::int64_t v;
        std::memcpy(&v, src + 8 * i, 8);
        t.data[i] = static_cast<float>(v);
      }
    } else {
      fail(ErrorKind::kParse, "safetensors: unsupported dtype " + dtype + " for " + name);
    }
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

SafeTensors SafeTensors::load(const std::filesystem::path& path) {
  return parse(read_file(path));
}

const SafeTensors::Tensor& SafeTensors::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail(ErrorKind::kParse, "checkpoint is missing tensor " + name);
  return it->second;
}

ByteLevelBpe::ByteLevelBpe(std::unordered_map<std::string, int> vocab,
                           std::vector<std::pair<std::string, std::string>> merges)
    : vocab_(std::move(vocab)), byte_to_unicode_(byte_to_unicode_table()) {
  for (std::size_t i = 0; i < merges.size(); ++i) ranks_.emplace(merges[i], static_cast<int>(i));
}

ByteLevelBpe ByteLevelBpe::load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
  std::unordered_map<std::string, int> vocab;
  try {
    const json doc = json::parse(read_file(vocab_json));
    for (const auto& [tok, id] : doc.items()) vocab.emplace(tok, id.get<int>());
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, vocab_json.string() + ": " + e.what());
  }
  std::vector<std::pair<std::string, std::string>> merges;
  const std::string text = read_file(merges_txt);
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    start = end + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.rfind("#version", 0) == 0) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos) fail(ErrorKind::kParse, merges_txt.string() + ": malformed merge '" + line + "'");
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return ByteLevelBpe(std::move(vocab), std::move(merges));
}

std::vector<std::string> ByteLevelBpe::pre_tokenize(std::string_view s) {
  std::vector<std::string> out;
  const std::size_t n = s.size();
  std::size_t i = 0;
  auto run = [&](std::size_t from, auto pred) {
    std::size_t j = from;
    while (j < n && pred(static_cast<unsigned char>(s[j]))) ++j;
    return j;
  };
  auto other = [](unsigned char c) { return !is_space(c) && !is_letter(c) && !is_digit(c); };
  while (i < n) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (c == '\'') {
      bool matched = false;
      for (std::string_view suffix : {"re", "ve", "ll", "s", "t", "m", "d"}) {
        if (s.substr(i + 1, suffix.size()) == suffix) {
          out.emplace_back(s.substr(i, 1 + suffix.size()));
          i += 1 + suffix.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    std::size_t body = i;
    if (c == ' ' && i + 1 < n && !is_space(static_cast<unsigned char>(s[i + 1]))) body = i + 1;
    const auto b = static_cast<unsigned char>(s[body]);
    if (!is_space(b)) {
      std::size_t end;
      if (is_letter(b)) {
        end = run(body, is_letter);
      } else if (is_digit(b)) {
        end = run(body, is_digit);
      } else {
        end = run(body, other);
      }
      out.emplace_back(s.substr(i, end - i));
      i = end;
      continue;
    }
    const std::size_t end = run(i, is_space);
    if (end == n || end - i == 1) {
      out.emplace_back(s.substr(i, end - i));
      i = end;
    } else {
      out.emplace_back(s.substr(i, end - 1 - i));
      i = end - 1;
    }
  }
  return out;
}

std::vector<std::string> ByteLevelBpe::bpe(const std::string& word) const {
  std::vector<std::string> parts;
  for (unsigned char ch : word) parts.push_back(byte_to_unicode_[ch]);
  while (parts.size() > 1) {
    int best = std::numeric_limits<int>::max();
    std::size_t at = 0;
    for (std::size_t k = 0; k + 1 < parts.size(); ++k) {
      auto it = ranks_.find({parts[k], parts[k + 1]});
      if (it != ranks_.end() && it->second < best) {
        best = it->second;
        at = k;
      }
    }
    if (best == std::numeric_limits<int>::max()) break;
    const std::string first = parts[at];
    const std::string second = parts[at + 1];
    std::vector<std::string> merged;
    for (std::size_t k = 0; k < parts.size();) {
      if (k + 1 < parts.size() && parts[k] == first && parts[k + 1] == second) {
        merged.push_back(first + second);
        k += 2;
      } else {
        merged.push_back(parts[k]);
        ++k;
      }
    }
    parts = std::move(merged);
  }
  return parts;
}

int ByteLevelBpe::token_id(const std::string& token) const {
  auto it = vocab_.find(token);
  if (it != vocab_.end()) return it->second;
  auto unk = vocab_.find("<unk>");
  if (unk == vocab_.end()) fail(ErrorKind::kVocabulary, "token '" + token + "' not in vocabulary and no <unk>");
  return unk->second;
}

std::vector<int> ByteLevelBpe::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& word : pre_tokenize(text)) {
    for (const auto& piece : bpe(word)) ids.push_back(token_id(piece));
  }
  return ids;
}

RobertaEncoder RobertaEncoder::load(const std::filesystem::path& dir) {
  if (dir.empty() || !std::filesystem::is_directory(dir)) {
    fail(ErrorKind::kConfiguration, "encoder checkpoint directory '" + dir.string() + "' is unavailable");
  }
  for (const char* f : {"config.json", "model.safetensors", "vocab.json", "merges.txt"}) {
    if (!std::filesystem::exists(dir / f)) {
      fail(ErrorKind::kConfiguration, "encoder checkpoint is missing " + (dir / f).string());
    }
  }
  const json cfg = json::parse(read_file(dir / "config.json"));
  RobertaConfig config;
  config.hidden = cfg.value("hidden_size", config.hidden);
  config.layers = cfg.value("num_hidden_layers", config.layers);
  config.heads = cfg.value("num_attention_heads", config.heads);
  config.intermediate = cfg.value("intermediate_size", config.intermediate);
  config.max_positions = cfg.value("max_position_embeddings", config.max_positions);
  config.pad_token_id = cfg.value("pad_token_id", config.pad_token_id);
  config.bos_token_id = cfg.value("bos_token_id", config.bos_token_id);
  config.eos_token_id = cfg.value("eos_token_id", config.eos_token_id);
  config.layer_norm_eps = cfg.value("layer_norm_eps", config.layer_norm_eps);
  if (cfg.value("hidden_act", std::string("gelu")) != "gelu") {
    fail(ErrorKind::kConfiguration, "only gelu RoBERTa checkpoints are supported");
  }
  if (config.hidden % config.heads != 0) fail(ErrorKind::kConfiguration, "hidden size not divisible by heads");

  RobertaEncoder enc(config, ByteLevelBpe::load(dir / "vocab.json", dir / "merges.txt"));
  const std::string raw = read_file(dir / "model.safetensors");
  const SafeTensors st = SafeTensors::parse(raw);
  const std::string prefix = st.contains("roberta.embeddings.word_embeddings.weight") ? "roberta." : "";
  auto get = [&](const std::string& name) -> const SafeTensors::Tensor& { return st.at(prefix + name); };
  auto norm = [&](const std::string& base) {
    const std::string g = st.contains(prefix + base + ".weight") ? base + ".weight" : base + ".gamma";
    const std::string b = st.contains(prefix + base + ".bias") ? base + ".bias" : base + ".beta";
    return Norm{vector_of(get(g), g), vector_of(get(b), b)};
  };
  auto dense = [&](const std::string& base) {
    return Dense{linear_weight(get(base + ".weight"), base), vector_of(get(base + ".bias"), base)};
  };
  enc.word_embeddings_ = table_of(get("embeddings.word_embeddings.weight"), "word_embeddings");
  enc.position_embeddings_ = table_of(get("embeddings.position_embeddings.weight"), "position_embeddings");
  enc.token_type_embedding_ = table_of(get("embeddings.token_type_embeddings.weight"), "token_type").row(0);
  enc.embedding_norm_ = norm("embeddings.LayerNorm");
  for (int l = 0; l < config.layers; ++l) {
    const std::string base = "encoder.layer." + std::to_string(l);
    Layer layer;
    layer.q = dense(base + ".attention.self.query");
    layer.k = dense(base + ".attention.self.key");
    layer.v = dense(base + ".attention.self.value");
    layer.attn_out = dense(base + ".attention.output.dense");
    layer.attn_norm = norm(base + ".attention.output.LayerNorm");
    layer.up = dense(base + ".intermediate.dense");
    layer.down = dense(base + ".output.dense");
    layer.out_norm = norm(base + ".output.LayerNorm");
    enc.layers_.push_back(std::move(layer));
  }
  enc.fingerprint_ = "roberta-" + hash_hex(raw);
  return enc;
}

std::vector<int> RobertaEncoder::tokenize(std::string_view text) const {
  std::vector<int> body = tokenizer_.encode(text);
  const std::size_t limit = static_cast<std::size_t>(config_.max_positions - config_.pad_token_id - 1 - 2);
  if (body.size() > limit) body.erase(body.begin(), body.end() - static_cast<std::ptrdiff_t>(limit));
  std::vector<int> ids;
  ids.reserve(body.size() + 2);
  ids.push_back(config_.bos_token_id);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(config_.eos_token_id);
  return ids;
}

Eigen::MatrixXf RobertaEncoder::hidden_states(const std::vector<int>& ids) const {
  const auto n = static_cast<Eigen::Index>(ids.size());
  const int h = config_.hidden;
  Eigen::MatrixXf x(n, h);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= word_embeddings_.rows()) fail(ErrorKind::kArgument, "token id out of range");
    const Eigen::Index pos = config_.pad_token_id + 1 + i;
    if (pos >= position_embeddings_.rows()) fail(ErrorKind::kArgument, "sequence longer than the position table");
    x.row(i) = word_embeddings_.row(id) + position_embeddings_.row(pos) + token_type_embedding_;
  }
  x = layer_norm(x, embedding_norm_.gain, embedding_norm_.bias, config_.layer_norm_eps);
  const int heads = config_.heads;
  const int dh = h / heads;
  const float inv = 1.0f / std::sqrt(static_cast<float>(dh));
  auto apply = [](const Eigen::MatrixXf& in, const Dense& d) -> Eigen::MatrixXf {
    Eigen::MatrixXf out = in * d.weight;
    out.rowwise() += d.bias;
    return out;
  };
  for (const Layer& layer : layers_) {
    const Eigen::MatrixXf q = apply(x, layer.q);
    const Eigen::MatrixXf k = apply(x, layer.k);
    const Eigen::MatrixXf v = apply(x, layer.v);
    Eigen::MatrixXf ctx(n, h);
    for (int hd = 0; hd < heads; ++hd) {
      Eigen::MatrixXf s = q.middleCols(hd * dh, dh) * k.middleCols(hd * dh, dh).transpose() * inv;
      for (Eigen::Index r = 0; r < n; ++r) {
        const float m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
      }
      ctx.middleCols(hd * dh, dh) = s * v.middleCols(hd * dh, dh);
    }
    x = layer_norm(apply(ctx, layer.attn_out) + x, layer.attn_norm.gain, layer.attn_norm.bias, config_.layer_norm_eps);
    Eigen::MatrixXf up = apply(x, layer.up);
    up = up.unaryExpr([](float u) { return 0.5f * u * (1.0f + std::erf(u / std::sqrt(2.0f))); });
    x = layer_norm(apply(up, layer.down) + x, layer.out_norm.gain, layer.out_norm.bias, config_.layer_norm_eps);
  }
  return x;
}

nn::Vector RobertaEncoder::embed(std::string_view text) const {
  const Eigen::MatrixXf states = hidden_states(tokenize(text));
  return states.row(0).transpose().cast<double>();
}

}  // namespace udp
