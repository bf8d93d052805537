#include "fidelity/nmt/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>

namespace fidelity::nmt {

namespace {
const std::vector<std::string> reserved_tokens = {"<pad>", "<unk>", "<s>", "</s>"};
}

Vocab::Vocab() : Vocab(from_tokens(reserved_tokens)) {}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < reserved_count ||
      !std::equal(reserved_tokens.begin(), reserved_tokens.end(), tokens.begin())) {
    throw std::invalid_argument("vocab must start with the reserved tokens <pad> <unk> <s> </s>");
  }
  Vocab v{Empty{}};
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("duplicate vocab entry '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

Vocab Vocab::build(std::span<const TokenizedLine> corpus, int min_freq) {
  if (corpus.empty()) throw std::invalid_argument("cannot build a vocab from an empty corpus");
  std::map<std::string, long> counts;
  for (const auto& line : corpus) {
    for (const auto& tok : line) ++counts[tok];
  }
  for (const auto& r : reserved_tokens) counts.erase(r);

  std::vector<std::pair<std::string, long>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_freq) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens = reserved_tokens;
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return from_tokens(std::move(tokens));
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocab '" + path.string() + "'");
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) tokens.push_back(line);
  return from_tokens(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write vocab '" + path.string() + "'");
  for (const auto& t : tokens_) out << t << '\n';
}

TokenId Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? unk_id : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.contains(std::string(token)); }

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocab of size " +
                            std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::encode(std::span<const std::string> line) const {
  std::vector<TokenId> ids;
  ids.reserve(line.size());
  for (const auto& t : line) ids.push_back(id(t));
  return ids;
}

std::uint64_t Vocab::content_hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& t : tokens_) {
    for (unsigned char c : t) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0x0a;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace fidelity::nmt
