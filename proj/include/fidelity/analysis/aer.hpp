#pragma once

#include "fidelity/rules/rules.hpp"

#include <compare>
#include <filesystem>
#include <map>
#include <set>

namespace fidelity::analysis {

// 1-based (source position, target position).
struct Link {
  int source = 0;
  int target = 0;

  friend auto operator<=>(const Link&, const Link&) = default;
};

struct SentenceAlignment {
  std::set<Link> sure;
  std::set<Link> possible;  // always contains `sure`
  int target_length = 0;    // 0 when unknown
};

// Keyed by sentence id.
using AlignmentSet = std::map<std::size_t, SentenceAlignment>;

// One link per decision point: (top-1 source position, t). Only k = 1 rule
// sets from the teacher-forcing or golden scenario are accepted.
AlignmentSet derive_alignment(const rules::RuleDataset& rules);

struct AerResult {
  double aer = 0.0;
  std::size_t hypothesis_links = 0;  // before skipping
  std::size_t scored_links = 0;      // |A| after skipping
  std::size_t target_tokens = 0;
  std::size_t skipped_targets = 0;   // target positions without any gold link
  double skipped_fraction = 0.0;
};

// AER = 1 - (|A∩S| + |A∩P|) / (|A| + |S|), over the whole set. Hypothesis
// links at target positions that gold leaves unaligned are dropped first.
// Both sets must cover the same sentence ids.
AerResult compute_aer(const AlignmentSet& hypothesis, const AlignmentSet& gold);

// Gold file: one or more links per line after the sentence id,
// "sid i-j" for sure and "sid i?j" for possible links.
AlignmentSet parse_alignment(std::istream& in);
AlignmentSet read_alignment(const std::filesystem::path& path);
void write_alignment(const std::filesystem::path& path, const AlignmentSet& alignment);

}  // namespace fidelity::analysis
