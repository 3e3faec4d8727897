#include <doctest.h>

#include <fstream>
#include <set>

#include <json.hpp>

#include "udp/encoder.hpp"
#include "udp/error.hpp"
#include "udp/persona.hpp"
#include "udp/roberta.hpp"

using namespace udp;

namespace {

std::shared_ptr<TextEncoder> hash_encoder(int dim = 256, std::size_t max_history = 512) {
  EncoderConfig c;
  c.dim = dim;
  c.max_history_chars = max_history;
  return TextEncoder::create(c);
}

const std::filesystem::path kTinyRoberta = std::filesystem::path(UDP_TEST_FIXTURES) / "tiny_roberta";

}  // namespace

TEST_CASE("hash encoder is deterministic, normalized and sized by config") {
  auto enc = hash_encoder(256);
  const auto a = enc->encode_text("I would love to help the children.");
  const auto b = enc->encode_text("I would love to help the children.");
  CHECK(a.vector.size() == 256);
  CHECK(a.vector == b.vector);
  CHECK(a.vector.norm() == doctest::Approx(1.0));
  CHECK(hash_encoder(64)->encode_text("x y z").vector.size() == 64);
  CHECK_THROWS_AS(enc->encode_text(""), Error);
}

TEST_CASE("cache hits return bit-identical vectors to a fresh encoder") {
  auto cached = hash_encoder();
  for (int k = 0; k < 3; ++k) cached->encode_text("repeat me " + std::to_string(k % 2));
  const auto stats = cached->cache_stats();
  CHECK(stats.hits == 1);
  CHECK(stats.misses == 2);
  auto fresh = hash_encoder();
  CHECK(cached->encode_text("repeat me 0").vector == fresh->encode_text("repeat me 0").vector);
}

TEST_CASE("condition pooling is the mean and ignores order and duplication") {
  auto enc = hash_encoder();
  const std::vector<std::string> one{"I am not sure."};
  CHECK((enc->encode_condition(one).vector - enc->encode_text(one[0]).vector).norm() < 1e-15);
  const std::vector<std::string> dup{"I am not sure.", "I am not sure."};
  CHECK((enc->encode_condition(dup).vector - enc->encode_text(dup[0]).vector).norm() < 1e-15);
  const std::vector<std::string> ab{"first reply", "second reply", "third"};
  const std::vector<std::string> ba{"third", "first reply", "second reply"};
  CHECK(enc->encode_condition(ab).vector == enc->encode_condition(ba).vector);
  const nn::Vector mean = (enc->encode_text("first reply").vector + enc->encode_text("second reply").vector +
                           enc->encode_text("third").vector) / 3.0;
  CHECK((enc->encode_condition(ab).vector - mean).norm() < 1e-12);
  CHECK_THROWS_AS(enc->encode_condition(std::span<const std::string>{}), Error);
}

TEST_CASE("all 16 P4G persona descriptions are distinguishable") {
  auto enc = hash_encoder();
  const auto personas = enumerate_personas(Task::kP4G);
  for (std::size_t i = 0; i < personas.size(); ++i) {
    for (std::size_t j = i + 1; j < personas.size(); ++j) {
      const double c = cosine(enc->encode_text(personas[i].description(), SourceKind::kPersona).vector,
                              enc->encode_text(personas[j].description(), SourceKind::kPersona).vector);
      CHECK(c < 1 - 1e-6);
    }
  }
}

TEST_CASE("hash collisions stay under one percent on a 1k corpus") {
  auto enc = hash_encoder();
  const std::vector<std::string> words{"donate", "charity", "children", "money", "help", "maybe", "never", "today",
                                       "sad", "happy", "work", "family", "school", "friend", "tired", "worried"};
  std::set<std::vector<double>> seen;
  int collisions = 0;
  for (int k = 0; k < 1000; ++k) {
    std::string text;
    for (int w = 0, x = k; w < 4; ++w, x /= 16) text += words[(x + w * 7) % 16] + " ";
    text += std::to_string(k);
    const nn::Vector v = enc->encode_text(text).vector;
    if (!seen.insert(std::vector<double>(v.data(), v.data() + v.size())).second) ++collisions;
  }
  CHECK(collisions < 10);
  // One-token edits change the vector.
  CHECK(enc->encode_text("I will donate today").vector != enc->encode_text("I will donate tomorrow").vector);
}

TEST_CASE("history encoding keeps only the most recent characters") {
  auto enc = hash_encoder(256, 20);
  const std::vector<std::string> long_history{std::string(200, 'a'), "the very latest line here"};
  const std::vector<std::string> other_prefix{std::string(300, 'b'), "the very latest line here"};
  CHECK(enc->encode_history(long_history).vector == enc->encode_history(other_prefix).vector);
  CHECK(truncate_front("abcdef", 3) == "def");
  // Never splits a multi-byte character.
  CHECK(truncate_front("x\xC3\xA9y", 2) == "y");
}

TEST_CASE("unknown encoder mode is a configuration error") {
  try {
    parse_encoder_mode("bert");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kConfiguration);
  }
}

TEST_CASE("missing checkpoint directory fails at initialization") {
  EncoderConfig c;
  c.mode = EncoderMode::kCheckpoint;
  c.checkpoint_name = "/nonexistent/roberta";
  CHECK_THROWS_AS(TextEncoder::create(c), Error);
}

TEST_CASE("roberta tokenizer and forward pass match the reference implementation") {
  REQUIRE(std::filesystem::exists(kTinyRoberta / "expected.json"));
  const auto enc = RobertaEncoder::load(kTinyRoberta);
  std::ifstream in(kTinyRoberta / "expected.json");
  const auto expected = nlohmann::json::parse(in);
  REQUIRE(expected.size() >= 5);
  for (const auto& probe : expected) {
    const auto text = probe.at("text").get<std::string>();
    CAPTURE(text);
    CHECK(enc.tokenize(text) == probe.at("ids").get<std::vector<int>>());
    const nn::Vector got = enc.embed(text);
    const auto want = probe.at("embedding").get<std::vector<double>>();
    REQUIRE(got.size() == static_cast<Eigen::Index>(want.size()));
    double err = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < want.size(); ++i) {
      err = std::max(err, std::abs(got[static_cast<Eigen::Index>(i)] - want[i]));
      norm = std::max(norm, std::abs(want[i]));
    }
    CHECK(err <= 1e-4 * std::max(1.0, norm));
  }
}

TEST_CASE("checkpoint mode encoder reports the model width") {
  EncoderConfig c;
  c.mode = EncoderMode::kCheckpoint;
  c.checkpoint_name = kTinyRoberta.string();
  const auto enc = TextEncoder::create(c);
  CHECK(enc->dim() == 32);
  CHECK(enc->encode_text("hello").vector.size() == 32);
}

TEST_CASE("safetensors parser rejects truncated input") {
  CHECK_THROWS_AS(SafeTensors::parse(std::string("\x08\x00\x00\x00\x00\x00\x00\x00{}", 10)), Error);
  CHECK_THROWS_AS(SafeTensors::parse("abc"), Error);
}
