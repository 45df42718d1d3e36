#include "flownav/tokenizer.hpp"

#include <fstream>

#include "flownav/errors.hpp"

namespace flownav {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\f' || c == '\v'; }

bool is_punct(char c) { return Tokenizer::kPunctuation.find(c) != std::string_view::npos; }

}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    const auto& tok = vocab_[i];
    if (tok.empty()) throw TokenizationError("empty vocabulary entry at id " + std::to_string(i));
    if (!index_.emplace(tok, static_cast<TokenId>(i)).second) {
      throw TokenizationError("duplicate vocabulary entry '" + tok + "' at id " + std::to_string(i));
    }
  }
  const auto unk = find(kUnk);
  const auto nl = find(kNewline);
  if (!unk || !nl) throw TokenizationError("vocabulary must contain <unk> and <nl>");
  unk_ = *unk;
  newline_ = *nl;
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary file " + path.string());
  std::vector<std::string> vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    vocab.push_back(line);
  }
  return Tokenizer(std::move(vocab));
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (const auto& tok : vocab_) out << tok << '\n';
}

std::optional<TokenId> Tokenizer::find(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Tokenizer::id(std::string_view token) const {
  if (auto found = find(token)) return *found;
  throw TokenizationError("token '" + std::string(token) + "' not in vocabulary");
}

const std::string& Tokenizer::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
    throw TokenizationError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_.size()));
  }
  return vocab_[static_cast<std::size_t>(id)];
}

void Tokenizer::encode_word(std::string_view word, std::vector<TokenId>& out) const {
  if (auto whole = find(word)) {
    out.push_back(*whole);
    return;
  }
  std::vector<TokenId> pieces;
  std::size_t pos = 0;
  while (pos < word.size()) {
    std::optional<TokenId> match;
    std::size_t len = word.size() - pos;
    for (; len > 0; --len) {
      std::string piece = pos == 0 ? std::string(word.substr(0, len))
                                   : std::string(kContinuation) + std::string(word.substr(pos, len));
      if ((match = find(piece))) break;
    }
    if (!match) {
      out.push_back(unk_);
      return;
    }
    pieces.push_back(*match);
    pos += len;
  }
  out.insert(out.end(), pieces.begin(), pieces.end());
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '\n') {
      out.push_back(newline_);
      ++i;
    } else if (is_space(c)) {
      ++i;
    } else if (is_punct(c)) {
      encode_word(text.substr(i, 1), out);
      ++i;
    } else {
      std::size_t j = i;
      while (j < text.size() && text[j] != '\n' && !is_space(text[j]) && !is_punct(text[j])) ++j;
      encode_word(text.substr(i, j - i), out);
      i = j;
    }
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  bool after_newline = true;
  for (const auto id : ids) {
    if (id == newline_) {
      out += '\n';
      after_newline = true;
      continue;
    }
    const auto& tok = token(id);
    if (tok.starts_with(kContinuation) && tok.size() > kContinuation.size()) {
      out += tok.substr(kContinuation.size());
    } else {
      const bool glue = tok.size() == 1 && is_punct(tok[0]);
      if (!after_newline && !glue) out += ' ';
      out += tok;
    }
    after_newline = false;
  }
  return out;
}

}  // namespace flownav
