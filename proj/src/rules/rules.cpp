#include "fidelity/rules/rules.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <tuple>

namespace fidelity::rules {

using nlohmann::ordered_json;

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::teacher_forcing: return "teacher-forcing";
    case Scenario::real_decode: return "real-decode";
    case Scenario::golden: return "golden";
  }
  return "?";
}

Scenario parse_scenario(std::string_view s) {
  for (Scenario sc : all_scenarios) {
    if (to_string(sc) == s) return sc;
  }
  throw std::invalid_argument("unknown scenario '" + std::string(s) + "'");
}

std::vector<Word> topk_words(const RelevanceVector& rv, Side side, int k, std::span<const TokenId> tokens) {
  if (k < 1) throw std::invalid_argument("k must be at least 1");
  const auto& scores = rv.side(side);
  if (scores.size() != tokens.size()) throw std::invalid_argument("scores and tokens differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  const auto keep = std::min(order.size(), static_cast<std::size_t>(k));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  std::vector<Word> out;
  for (std::size_t i : order) out.push_back({tokens[i], static_cast<int>(i) + 1});
  return out;
}

namespace {

void reject_unsupported(const nmt::NmtModel& model, Method method) {
  if (method == Method::attn && model.kind() == nmt::ModelKind::rnn_search) {
    throw explain::UnsupportedMethod("attention cannot score target-prefix words of an rnn-search model");
  }
}

RuleInstance assemble(const RelevanceVector& rv, std::span<const TokenId> source, std::span<const TokenId> prefix,
                      TokenId label, int k) {
  RuleInstance r;
  r.source = topk_words(rv, Side::source, k, source);
  r.target = prefix.empty() ? std::vector<Word>{} : topk_words(rv, Side::target, k, prefix);
  r.label = label;
  r.sentence_id = rv.sentence_id;
  r.t = rv.t;
  return r;
}

}  // namespace

RuleInstance extract_rule(const nmt::NmtModel& model, Method method, const nmt::Context& ctx, int k) {
  reject_unsupported(model, method);
  const TokenId label = nmt::nmt_forward(model, ctx).argmax();
  const auto rv = explain::relevance(method, model, ctx, label);
  return assemble(rv, ctx.source, ctx.prefix, label, k);
}

ExplainedCorpus explain_corpus(const nmt::NmtModel& model, Method method, std::span<const SentencePair> corpus,
                               Scenario scenario, const ExtractionOptions& options) {
  if (corpus.empty()) throw std::invalid_argument("cannot build rules from an empty corpus");
  reject_unsupported(model, method);
  if (scenario == Scenario::real_decode && options.decode_max_len < 1) {
    throw std::invalid_argument("decode_max_len must be at least 1");
  }
  ExplainedCorpus out;
  out.method = method;
  out.scenario = scenario;
  for (std::size_t n = 0; n < corpus.size(); ++n) {
    const auto& pair = corpus[n];
    explain::SentenceDecisions d;
    d.sentence_id = options.first_sentence_id + n;
    d.source = pair.source;
    std::vector<TokenId> rule_labels;
    if (scenario == Scenario::real_decode) {
      const auto decoded = nmt::greedy_decode(model, pair.source, options.decode_max_len);
      d.inputs.push_back(nmt::bos_id);
      d.inputs.insert(d.inputs.end(), decoded.tokens.begin(), decoded.tokens.end() - 1);
      d.labels = decoded.tokens;
      rule_labels = d.labels;
    } else {
      d.inputs.assign(pair.target.begin(), pair.target.end() - 1);
      const auto seq = nmt::forward_sequence(model, d.source, d.inputs);
      for (int r = 0; r < pair.target_steps(); ++r) d.labels.push_back(seq.argmax(r));
      rule_labels = scenario == Scenario::golden ? std::vector<TokenId>(pair.target.begin() + 1, pair.target.end())
                                                 : d.labels;
    }
    auto ex = explain::explain_sentence(method, model, d);
    out.forward_passes += ex.forward_passes;
    out.backward_passes += ex.backward_passes;
    out.sentences.push_back({d.sentence_id, std::move(d.source), std::move(d.inputs), std::move(rule_labels),
                             std::move(ex.decisions)});
  }
  return out;
}

RuleDataset make_rules(const ExplainedCorpus& explained, int k, std::string model_id, std::string corpus_id) {
  RuleDataset ds;
  ds.meta = {explained.method, k, explained.scenario, std::move(model_id), std::move(corpus_id)};
  for (const auto& s : explained.sentences) {
    for (std::size_t r = 0; r < s.decisions.size(); ++r) {
      const std::span<const TokenId> prefix(s.inputs.data() + 1, r);
      ds.rules.push_back(assemble(s.decisions[r], s.source, prefix, s.labels[r], k));
    }
  }
  return ds;
}

RuleDataset build_rule_dataset(const nmt::NmtModel& model, Method method, std::span<const SentencePair> corpus,
                               Scenario scenario, int k, const ExtractionOptions& options) {
  if (k < 1) throw std::invalid_argument("k must be at least 1");
  return make_rules(explain_corpus(model, method, corpus, scenario, options), k);
}

DensityHistogram density_histogram(const RuleDataset& ds) {
  if (ds.rules.empty()) throw std::invalid_argument("density of an empty rule dataset");
  using Key = std::tuple<std::vector<TokenId>, std::vector<TokenId>, TokenId>;
  std::map<Key, std::size_t> counts;
  auto tokens = [](const std::vector<Word>& words) {
    std::vector<TokenId> t;
    for (const auto& w : words) t.push_back(w.token);
    std::sort(t.begin(), t.end());
    return t;
  };
  for (const auto& r : ds.rules) ++counts[{tokens(r.source), tokens(r.target), r.label}];
  DensityHistogram h;
  h.total = counts.size();
  for (const auto& [key, n] : counts) {
    const std::size_t bin = n <= 1 ? 0 : n <= 10 ? 1 : n <= 100 ? 2 : n <= 1000 ? 3 : 4;
    ++h.bins[bin];
  }
  return h;
}

namespace {

ordered_json words_json(const std::vector<Word>& words) {
  auto a = ordered_json::array();
  for (const auto& w : words) a.push_back({w.token, w.position});
  return a;
}

std::vector<Word> words_from(const ordered_json& a) {
  std::vector<Word> out;
  for (const auto& w : a) out.push_back({w.at(0).get<TokenId>(), w.at(1).get<int>()});
  return out;
}

std::filesystem::path meta_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".meta.json");
}

}  // namespace

void write_rules(const std::filesystem::path& path, const RuleDataset& ds) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write rule file '" + path.string() + "'");
  const auto scenario = to_string(ds.meta.scenario);
  const auto method = explain::to_string(ds.meta.method);
  for (const auto& r : ds.rules) {
    ordered_json j;
    j["sid"] = r.sentence_id;
    j["t"] = r.t;
    j["scenario"] = scenario;
    j["method"] = method;
    j["k"] = ds.meta.k;
    j["src"] = words_json(r.source);
    j["tgt"] = words_json(r.target);
    j["label"] = r.label;
    out << j.dump() << '\n';
  }
  ordered_json meta;
  meta["method"] = method;
  meta["k"] = ds.meta.k;
  meta["scenario"] = scenario;
  meta["model_id"] = ds.meta.model_id;
  meta["corpus_id"] = ds.meta.corpus_id;
  meta["rules"] = ds.rules.size();
  std::ofstream(meta_path(path), std::ios::trunc) << meta.dump(2) << '\n';
}

RuleDataset read_rules(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open rule file '" + path.string() + "'");
  RuleDataset ds;
  bool first = true;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    const RuleMeta meta{explain::parse_method(j.at("method").get<std::string>()), j.at("k").get<int>(),
                        parse_scenario(j.at("scenario").get<std::string>()), {}, {}};
    if (first) {
      ds.meta = meta;
      first = false;
    } else if (!(meta == ds.meta)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": mixed rule metadata");
    }
    RuleInstance r;
    r.sentence_id = j.at("sid").get<std::size_t>();
    r.t = j.at("t").get<int>();
    r.source = words_from(j.at("src"));
    r.target = words_from(j.at("tgt"));
    r.label = j.at("label").get<TokenId>();
    ds.rules.push_back(std::move(r));
  }
  if (std::ifstream side{meta_path(path)}) {
    const auto meta = ordered_json::parse(side);
    ds.meta.method = explain::parse_method(meta.at("method").get<std::string>());
    ds.meta.k = meta.at("k").get<int>();
    ds.meta.scenario = parse_scenario(meta.at("scenario").get<std::string>());
    ds.meta.model_id = meta.value("model_id", "");
    ds.meta.corpus_id = meta.value("corpus_id", "");
  }
  return ds;
}

}  // namespace fidelity::rules
