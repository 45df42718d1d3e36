#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace flownav {

using TokenId = std::int32_t;

// Word-level tokenizer over an explicit vocabulary (line number = id).
//
// Text is split on whitespace; a newline becomes the <nl> token and each of
// the characters in kPunctuation is its own token. A word missing from the
// vocabulary is decomposed by greedy longest match into a head piece plus
// "##"-prefixed continuation pieces; if that fails the word maps to <unk>.
//
// Canonical text (single spaces between words, punctuation attached to the
// preceding word, no spaces around newlines) round-trips through
// encode/decode when every word is in vocabulary.
class Tokenizer {
 public:
  static constexpr std::string_view kUnk = "<unk>";
  static constexpr std::string_view kNewline = "<nl>";
  static constexpr std::string_view kPunctuation = ":,.?!;";
  static constexpr std::string_view kContinuation = "##";

  explicit Tokenizer(std::vector<std::string> vocab);
  static Tokenizer load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::optional<TokenId> find(std::string_view token) const;
  TokenId id(std::string_view token) const;  // throws TokenizationError when absent
  const std::string& token(TokenId id) const;

  std::size_t size() const noexcept { return vocab_.size(); }
  TokenId unk_id() const noexcept { return unk_; }
  TokenId newline_id() const noexcept { return newline_; }
  const std::vector<std::string>& vocabulary() const noexcept { return vocab_; }

 private:
  void encode_word(std::string_view word, std::vector<TokenId>& out) const;

  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId unk_ = 0;
  TokenId newline_ = 0;
};

}  // namespace flownav
