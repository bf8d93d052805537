#include "fidelity/nmt/corpus.hpp"

#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fidelity::nmt {

SentencePair make_sentence_pair(std::span<const TokenId> source_words, std::span<const TokenId> target_words) {
  SentencePair p;
  p.source.assign(source_words.begin(), source_words.end());
  p.source.push_back(eos_id);
  p.target.push_back(bos_id);
  p.target.insert(p.target.end(), target_words.begin(), target_words.end());
  p.target.push_back(eos_id);
  return p;
}

std::vector<TokenizedLine> read_tokenized(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file '" + path.string() + "'");
  std::vector<TokenizedLine> lines;
  for (std::string line; std::getline(in, line);) {
    std::istringstream ss(line);
    TokenizedLine toks;
    for (std::string tok; ss >> tok;) toks.push_back(std::move(tok));
    lines.push_back(std::move(toks));
  }
  return lines;
}

void write_tokenized(const std::filesystem::path& path, std::span<const TokenizedLine> lines) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write corpus file '" + path.string() + "'");
  for (const auto& line : lines) {
    for (std::size_t i = 0; i < line.size(); ++i) out << (i ? " " : "") << line[i];
    out << '\n';
  }
}

ParallelCorpus encode_corpus(std::span<const TokenizedLine> source, std::span<const TokenizedLine> target,
                             const Vocab& source_vocab, const Vocab& target_vocab, int max_len) {
  if (source.size() != target.size()) {
    throw std::invalid_argument("source has " + std::to_string(source.size()) + " lines, target has " +
                                std::to_string(target.size()));
  }
  ParallelCorpus corpus;
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (static_cast<int>(source[i].size()) + 1 > max_len ||
        static_cast<int>(target[i].size()) + 1 > max_len) {
      ++corpus.dropped;
      continue;
    }
    const auto x = source_vocab.encode(source[i]);
    const auto y = target_vocab.encode(target[i]);
    corpus.pairs.push_back(make_sentence_pair(x, y));
  }
  return corpus;
}

ParallelCorpus load_parallel_corpus(const std::filesystem::path& source, const std::filesystem::path& target,
                                    const Vocab& source_vocab, const Vocab& target_vocab, int max_len) {
  const auto src = read_tokenized(source);
  const auto tgt = read_tokenized(target);
  return encode_corpus(src, tgt, source_vocab, target_vocab, max_len);
}

std::vector<TokenId> Context::decoder_inputs() const {
  std::vector<TokenId> in;
  in.reserve(prefix.size() + 1);
  in.push_back(bos_id);
  in.insert(in.end(), prefix.begin(), prefix.end());
  return in;
}

Context gold_context(const SentencePair& pair, std::size_t sentence_id, int t) {
  if (t < 1 || t > pair.target_steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(pair.target_steps()) + "]");
  }
  Context ctx;
  ctx.sentence_id = sentence_id;
  ctx.source = pair.source;
  ctx.prefix.assign(pair.target.begin() + 1, pair.target.begin() + t);
  ctx.prefix_source = PrefixSource::gold;
  return ctx;
}

ToyCorpus generate_copy_with_noise(const ToyTaskConfig& config) {
  if (config.content_words < 1 || config.min_length < 1 || config.max_length < config.min_length) {
    throw std::invalid_argument("invalid toy task configuration");
  }
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<int> word(0, config.content_words - 1);
  std::uniform_int_distribution<int> length(config.min_length, config.max_length);
  std::bernoulli_distribution corrupt(config.noise);
  auto name = [](int w) { return "w" + std::to_string(w); };

  ToyCorpus toy;
  for (int n = 0; n < config.pairs; ++n) {
    const int len = length(rng);
    TokenizedLine src, tgt;
    for (int i = 0; i < len; ++i) {
      const int w = word(rng);
      src.push_back(name(w));
      tgt.push_back(name(corrupt(rng) ? word(rng) : w));
    }
    toy.source.push_back(std::move(src));
    toy.target.push_back(std::move(tgt));
  }
  return toy;
}

}  // namespace fidelity::nmt
