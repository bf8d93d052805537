#pragma once

#include "fidelity/nmt/vocab.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fidelity::nmt {

// x is EOS-terminated; y is BOS-prefixed and EOS-terminated.
struct SentencePair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;

  // Number of prediction steps (target tokens after BOS, EOS included).
  int target_steps() const { return static_cast<int>(target.size()) - 1; }

  // y_1..y_T, i.e. the target without BOS.
  std::span<const TokenId> target_tokens() const {
    return std::span<const TokenId>(target).subspan(1);
  }
};

SentencePair make_sentence_pair(std::span<const TokenId> source_words, std::span<const TokenId> target_words);

struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  std::size_t dropped = 0;  // pairs longer than max_len
};

std::vector<TokenizedLine> read_tokenized(const std::filesystem::path& path);
void write_tokenized(const std::filesystem::path& path, std::span<const TokenizedLine> lines);

// Pairs whose source (with EOS) or target steps exceed max_len are dropped.
ParallelCorpus encode_corpus(std::span<const TokenizedLine> source, std::span<const TokenizedLine> target,
                             const Vocab& source_vocab, const Vocab& target_vocab, int max_len);

ParallelCorpus load_parallel_corpus(const std::filesystem::path& source, const std::filesystem::path& target,
                                    const Vocab& source_vocab, const Vocab& target_vocab, int max_len);

enum class PrefixSource { gold, model_decode };

// Decision point c_t = <x, y_<t>. `prefix` excludes BOS, so t = |prefix| + 1.
struct Context {
  std::size_t sentence_id = 0;
  std::vector<TokenId> source;
  std::vector<TokenId> prefix;
  PrefixSource prefix_source = PrefixSource::gold;

  int timestep() const { return static_cast<int>(prefix.size()) + 1; }
  // BOS followed by the prefix: what the decoder consumes at step t.
  std::vector<TokenId> decoder_inputs() const;
};

Context gold_context(const SentencePair& pair, std::size_t sentence_id, int t);

// Copy-with-noise toy task: the target copies the source, each target token
// independently replaced by a uniformly random word with probability `noise`.
struct ToyTaskConfig {
  int content_words = 46;
  int pairs = 5000;
  int min_length = 1;
  int max_length = 10;
  double noise = 0.05;
  std::uint64_t seed = 1;
};

struct ToyCorpus {
  std::vector<TokenizedLine> source;
  std::vector<TokenizedLine> target;
};

ToyCorpus generate_copy_with_noise(const ToyTaskConfig& config);

}  // namespace fidelity::nmt
