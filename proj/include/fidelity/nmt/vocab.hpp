#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace fidelity::nmt {

using TokenId = int;

inline constexpr TokenId pad_id = 0;
inline constexpr TokenId unk_id = 1;
inline constexpr TokenId bos_id = 2;
inline constexpr TokenId eos_id = 3;
inline constexpr int reserved_count = 4;

using TokenizedLine = std::vector<std::string>;

// Bidirectional token <-> id map. Ids 0..3 are PAD, UNK, BOS, EOS.
class Vocab {
 public:
  Vocab();

  // Tokens with frequency >= min_freq, most frequent first, ties broken
  // lexicographically.
  static Vocab build(std::span<const TokenizedLine> corpus, int min_freq = 1);

  // `tokens` lists every entry in id order, reserved ones included.
  static Vocab from_tokens(std::vector<std::string> tokens);

  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<TokenId> encode(std::span<const std::string> line) const;

  // FNV-1a over the token list; identifies vocab content in checkpoints.
  std::uint64_t content_hash() const;

 private:
  struct Empty {};
  explicit Vocab(Empty) {}

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace fidelity::nmt
