#include "fidelity/analysis/aer.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fidelity::analysis {

AlignmentSet derive_alignment(const rules::RuleDataset& rules) {
  if (rules.meta.k != 1) {
    throw std::invalid_argument("alignments are derived from k = 1 rules, got k = " + std::to_string(rules.meta.k));
  }
  if (rules.meta.scenario == rules::Scenario::real_decode) {
    throw std::invalid_argument("real-decode rules have no gold target positions to align");
  }
  AlignmentSet out;
  for (const auto& r : rules.rules) {
    auto& s = out[r.sentence_id];
    s.target_length = std::max(s.target_length, r.t);
    if (r.source.empty()) continue;
    const Link link{r.source.front().position, r.t};
    s.sure.insert(link);
    s.possible.insert(link);
  }
  return out;
}

namespace {

int span_of(const SentenceAlignment& s) {
  int t = 0;
  for (const auto& l : s.possible) t = std::max(t, l.target);
  for (const auto& l : s.sure) t = std::max(t, l.target);
  return t;
}

}  // namespace

AerResult compute_aer(const AlignmentSet& hypothesis, const AlignmentSet& gold) {
  if (hypothesis.size() != gold.size() ||
      !std::equal(hypothesis.begin(), hypothesis.end(), gold.begin(),
                  [](const auto& a, const auto& b) { return a.first == b.first; })) {
    throw std::invalid_argument("hypothesis and gold alignments cover different sentence ids");
  }
  AerResult r;
  std::size_t a_size = 0, a_sure = 0, a_possible = 0, s_size = 0;
  for (const auto& [sid, hyp] : hypothesis) {
    const auto& ref = gold.at(sid);
    std::set<int> aligned;
    for (const auto& l : ref.possible) aligned.insert(l.target);
    for (const auto& l : ref.sure) aligned.insert(l.target);

    int length = hyp.target_length > 0 ? hyp.target_length : ref.target_length;
    if (length == 0) length = std::max(span_of(hyp), span_of(ref));
    r.target_tokens += static_cast<std::size_t>(length);
    for (int j = 1; j <= length; ++j) r.skipped_targets += aligned.contains(j) ? 0 : 1;

    r.hypothesis_links += hyp.possible.size();
    for (const auto& l : hyp.possible) {
      if (!aligned.contains(l.target)) continue;
      ++a_size;
      a_sure += ref.sure.contains(l) ? 1 : 0;
      a_possible += ref.possible.contains(l) || ref.sure.contains(l) ? 1 : 0;
    }
    s_size += ref.sure.size();
  }
  r.scored_links = a_size;
  if (a_size + s_size == 0) throw std::invalid_argument("AER is undefined: no scored links and no sure links");
  r.aer = 1.0 - static_cast<double>(a_sure + a_possible) / static_cast<double>(a_size + s_size);
  r.skipped_fraction =
      r.target_tokens == 0 ? 0.0 : static_cast<double>(r.skipped_targets) / static_cast<double>(r.target_tokens);
  return r;
}

AlignmentSet parse_alignment(std::istream& in) {
  AlignmentSet out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::size_t sid = 0;
    if (!(fields >> sid)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw std::invalid_argument("alignment line " + std::to_string(line_no) + ": missing sentence id");
    }
    auto& s = out[sid];
    std::string tok;
    while (fields >> tok) {
      const auto sep = tok.find_first_of("-?");
      int i = 0, j = 0;
      try {
        if (sep == std::string::npos) throw std::invalid_argument("no separator");
        std::size_t used_i = 0, used_j = 0;
        i = std::stoi(tok.substr(0, sep), &used_i);
        j = std::stoi(tok.substr(sep + 1), &used_j);
        if (used_i != sep || used_j != tok.size() - sep - 1) throw std::invalid_argument("trailing text");
      } catch (const std::exception&) {
        throw std::invalid_argument("alignment line " + std::to_string(line_no) + ": bad link '" + tok + "'");
      }
      if (i < 1 || j < 1) {
        throw std::invalid_argument("alignment line " + std::to_string(line_no) + ": positions are 1-based");
      }
      const Link link{i, j};
      if (tok[sep] == '-') s.sure.insert(link);
      s.possible.insert(link);
    }
  }
  return out;
}

AlignmentSet read_alignment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open alignment file '" + path.string() + "'");
  return parse_alignment(in);
}

void write_alignment(const std::filesystem::path& path, const AlignmentSet& alignment) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write alignment file '" + path.string() + "'");
  for (const auto& [sid, s] : alignment) {
    for (const auto& l : s.possible) {
      out << sid << ' ' << l.source << (s.sure.contains(l) ? '-' : '?') << l.target << '\n';
    }
  }
}

}  // namespace fidelity::analysis
