#include "fidelity/metric/metric.hpp"

#include "fidelity/autodiff/adam.hpp"
#include "fidelity/autodiff/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace fidelity::metric {

double perplexity(std::span<const double> nlls) {
  if (nlls.empty()) throw std::invalid_argument("perplexity of an empty rule set");
  double sum = 0.0;
  for (double v : nlls) sum += v;
  return std::exp(sum / static_cast<double>(nlls.size()));
}

double ppl_on_rules(const ProxyModel& q, const RuleDataset& test_rules) {
  if (test_rules.rules.empty()) throw std::invalid_argument("perplexity of an empty rule set");
  const auto nlls = rule_nlls(q, test_rules.rules);
  return perplexity(nlls);
}

ProxyTrainReport train_proxy(ProxyModel& q, const RuleDataset& train_rules, const ProxyTrainConfig& config) {
  if (train_rules.rules.empty()) throw std::invalid_argument("cannot train a proxy on an empty rule set");
  if (train_rules.meta.k != q.k()) throw std::invalid_argument("rule k differs from the proxy's k");
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train_rules.rules.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_valid = static_cast<std::size_t>(std::lround(config.valid_fraction * static_cast<double>(order.size())));
  if (config.valid_fraction > 0.0 && order.size() > 1) n_valid = std::clamp<std::size_t>(n_valid, 1, order.size() - 1);
  if (order.size() == 1) n_valid = 0;

  std::vector<RuleInstance> valid, train;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_valid ? valid : train).push_back(train_rules.rules[order[i]]);
  const auto& selection = valid.empty() ? train : valid;
  auto valid_ppl = [&] { return perplexity(rule_nlls(q, selection)); };

  std::ofstream log;
  if (!config.log_path.empty()) {
    log.open(config.log_path, std::ios::trunc);
    log << "epoch\ttrain_nll\tvalid_ppl\n";
  }
  ProxyTrainReport report;
  auto record = [&](ProxyEpoch e) {
    report.log.push_back(e);
    if (log) log << e.epoch << '\t' << e.train_nll << '\t' << e.valid_ppl << '\n';
  };

  auto best = q.parameters();
  report.best_valid_ppl = valid_ppl();
  record({0, std::numeric_limits<double>::quiet_NaN(), report.best_valid_ppl});

  ad::Adam<float> adam(q.parameters(), {.learning_rate = config.learning_rate});
  const auto batch = static_cast<std::size_t>(std::max(1, config.batch_size));
  std::vector<const RuleInstance*> rows;
  int stale = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double nll_sum = 0.0;
    for (std::size_t start = 0; start < train.size(); start += batch) {
      rows.clear();
      std::vector<int> labels;
      for (std::size_t i = start; i < std::min(train.size(), start + batch); ++i) {
        rows.push_back(&train[i]);
        labels.push_back(train[i].label);
      }
      Graph g(q.parameters());
      const NodeId picked = g.gather(g.log_softmax(q.build(g, rows)), labels);
      const NodeId loss = g.scale(g.sum(picked), -1.0f / static_cast<float>(rows.size()));
      const float value = g.value(loss)(0, 0);
      if (!std::isfinite(value)) throw ProxyDiverged(epoch);
      nll_sum += static_cast<double>(value) * static_cast<double>(rows.size());
      adam.step(q.parameters(), g.backward(loss));
    }
    const double ppl = valid_ppl();
    if (!std::isfinite(ppl)) throw ProxyDiverged(epoch);
    record({epoch, nll_sum / static_cast<double>(train.size()), ppl});
    if (ppl < report.best_valid_ppl) {
      report.best_valid_ppl = ppl;
      report.best_epoch = epoch;
      best = q.parameters();
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  q.parameters() = std::move(best);
  return report;
}

std::vector<ProxyKind> family_members(std::string_view family) {
  if (family == "Comb" || family == "comb") return {ProxyKind::fn, ProxyKind::rn, ProxyKind::sa};
  return {parse_proxy_kind(family)};
}

nlohmann::ordered_json report_to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["method"] = explain::to_string(r.method);
  j["k"] = r.k;
  j["scenario"] = rules::to_string(r.scenario);
  j["family"] = r.family;
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (const auto& [name, ppl] : r.per_proxy_ppl) per[name] = ppl;
  j["per_proxy_ppl"] = per;
  j["metric_ppl"] = r.metric_ppl;
  j["winner"] = r.winner;
  j["n_train"] = r.n_train;
  j["n_test"] = r.n_test;
  j["seed"] = r.seed;
  return j;
}

MetricReport report_from_json(const nlohmann::ordered_json& j) {
  MetricReport r;
  r.method = explain::parse_method(j.at("method").get<std::string>());
  r.k = j.at("k").get<int>();
  r.scenario = rules::parse_scenario(j.at("scenario").get<std::string>());
  r.family = j.at("family").get<std::string>();
  for (const auto& [name, v] : j.at("per_proxy_ppl").items()) r.per_proxy_ppl[name] = v.get<double>();
  r.metric_ppl = j.at("metric_ppl").get<double>();
  r.winner = j.at("winner").get<std::string>();
  r.n_train = j.at("n_train").get<std::size_t>();
  r.n_test = j.at("n_test").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

FittedFamily fit_family(std::string_view family, const RuleDataset& train_rules, int source_vocab,
                        int target_vocab, const MetricConfig& config) {
  FittedFamily fitted;
  fitted.family = std::string(family);
  fitted.meta = train_rules.meta;
  fitted.n_train = train_rules.rules.size();
  fitted.seed = config.seed;
  for (ProxyKind kind : family_members(family)) {
    // seeded by (seed, kind) only: a Comb member equals the singleton run
    const auto member_seed = config.seed * 1000003ULL + static_cast<std::uint64_t>(kind);
    auto q = std::make_unique<ProxyModel>(kind, train_rules.meta.k, source_vocab, target_vocab, config.dims,
                                          member_seed);
    auto train_cfg = config.train;
    train_cfg.seed = member_seed;
    fitted.training.push_back(train_proxy(*q, train_rules, train_cfg));
    fitted.members.push_back(std::move(q));
  }
  return fitted;
}

std::vector<std::filesystem::path> save_family(const std::filesystem::path& prefix, const FittedFamily& fitted) {
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  std::vector<std::filesystem::path> files;
  for (const auto& q : fitted.members) {
    const ad::Metadata meta{
        {"format", "fidelity-proxy"},
        {"family", fitted.family},
        {"kind", to_string(q->kind())},
        {"k", std::to_string(q->k())},
        {"source_vocab_size", std::to_string(q->source_vocab_size())},
        {"target_vocab_size", std::to_string(q->target_vocab_size())},
        {"embedding", std::to_string(q->dims().embedding)},
        {"hidden", std::to_string(q->dims().hidden)},
        {"fn_hidden", std::to_string(q->dims().fn_hidden)},
        {"method", explain::to_string(fitted.meta.method)},
        {"scenario", rules::to_string(fitted.meta.scenario)},
        {"model_id", fitted.meta.model_id},
        {"corpus_id", fitted.meta.corpus_id},
        {"n_train", std::to_string(fitted.n_train)},
        {"seed", std::to_string(fitted.seed)},
    };
    files.push_back(prefix.string() + "." + to_string(q->kind()) + ".ckpt");
    ad::save_checkpoint(files.back(), q->parameters(), meta);
  }
  return files;
}

FittedFamily load_family(const std::filesystem::path& prefix, std::string_view family) {
  FittedFamily fitted;
  fitted.family = std::string(family);
  for (ProxyKind kind : family_members(family)) {
    const std::filesystem::path path = prefix.string() + "." + to_string(kind) + ".ckpt";
    auto ck = ad::load_checkpoint(path);
    const auto get = [&](const std::string& key) {
      auto it = ck.metadata.find(key);
      if (it == ck.metadata.end()) throw ad::CheckpointError(path.string() + " lacks '" + key + "'");
      return it->second;
    };
    if (get("format") != "fidelity-proxy") throw ad::CheckpointError(path.string() + " is not a proxy checkpoint");
    if (get("kind") != to_string(kind)) throw ad::CheckpointError(path.string() + " holds a different proxy kind");
    rules::RuleMeta meta{explain::parse_method(get("method")), std::stoi(get("k")),
                         rules::parse_scenario(get("scenario")), get("model_id"), get("corpus_id")};
    const auto n_train = static_cast<std::size_t>(std::stoull(get("n_train")));
    const auto seed = static_cast<std::uint64_t>(std::stoull(get("seed")));
    if (fitted.members.empty()) {
      fitted.meta = meta;
      fitted.n_train = n_train;
      fitted.seed = seed;
    } else if (!(meta == fitted.meta) || n_train != fitted.n_train || seed != fitted.seed) {
      throw ad::CheckpointError(path.string() + " was trained on different rules than its family");
    }
    const ProxyDims dims{std::stoi(get("embedding")), std::stoi(get("hidden")), std::stoi(get("fn_hidden"))};
    auto q = std::make_unique<ProxyModel>(kind, meta.k, std::stoi(get("source_vocab_size")),
                                          std::stoi(get("target_vocab_size")), dims, 0);
    ad::assign_parameters(q->parameters(), ck.parameters);
    fitted.members.push_back(std::move(q));
    fitted.training.emplace_back();
  }
  return fitted;
}

MetricReport evaluate_family(const FittedFamily& fitted, const RuleDataset& test_rules) {
  if (test_rules.meta.method != fitted.meta.method || test_rules.meta.k != fitted.meta.k) {
    throw std::invalid_argument("test rules were extracted with a different method or k");
  }
  MetricReport r;
  r.method = test_rules.meta.method;
  r.k = test_rules.meta.k;
  r.scenario = test_rules.meta.scenario;
  r.family = fitted.family;
  r.n_train = fitted.n_train;
  r.n_test = test_rules.rules.size();
  r.seed = fitted.seed;
  r.metric_ppl = std::numeric_limits<double>::infinity();
  for (const auto& q : fitted.members) {
    const double ppl = ppl_on_rules(*q, test_rules);
    r.per_proxy_ppl[to_string(q->kind())] = ppl;
    if (ppl < r.metric_ppl) {
      r.metric_ppl = ppl;
      r.winner = to_string(q->kind());
    }
  }
  return r;
}

MetricReport metric_score(std::string_view family, const RuleDataset& train_rules, const RuleDataset& test_rules,
                          int source_vocab, int target_vocab, const MetricConfig& config) {
  if (train_rules.meta.method != test_rules.meta.method || train_rules.meta.k != test_rules.meta.k ||
      train_rules.meta.scenario != test_rules.meta.scenario) {
    throw std::invalid_argument("train and test rules differ in method, k or scenario");
  }
  const auto fitted = fit_family(family, train_rules, source_vocab, target_vocab, config);
  return evaluate_family(fitted, test_rules);
}

BaselineResult baseline_score(const nmt::NmtModel& model, const RuleDataset& test_rules,
                              std::span<const nmt::SentencePair> corpus, int decode_max_len) {
  if (test_rules.rules.empty()) throw std::invalid_argument("baseline on an empty rule set");
  static const double cap = -std::log(1e-12);
  const bool decoded = test_rules.meta.scenario == rules::Scenario::real_decode;
  std::map<std::size_t, std::vector<TokenId>> decodes;
  BaselineResult out;
  for (const auto& rule : test_rules.rules) {
    if (rule.sentence_id >= corpus.size()) {
      throw std::out_of_range("rule provenance: sentence " + std::to_string(rule.sentence_id) + " not in corpus");
    }
    const auto& pair = corpus[rule.sentence_id];
    nmt::Context ctx;
    ctx.sentence_id = rule.sentence_id;
    ctx.source = pair.source;
    const std::vector<TokenId>* prefix_source = nullptr;
    std::vector<TokenId> gold(pair.target.begin() + 1, pair.target.end());
    if (decoded) {
      auto it = decodes.find(rule.sentence_id);
      if (it == decodes.end()) {
        it = decodes.emplace(rule.sentence_id, nmt::greedy_decode(model, pair.source, decode_max_len).tokens).first;
      }
      prefix_source = &it->second;
      ctx.prefix_source = nmt::PrefixSource::model_decode;
    } else {
      prefix_source = &gold;
    }
    if (rule.t < 1 || static_cast<std::size_t>(rule.t) > prefix_source->size()) {
      throw std::out_of_range("rule provenance: t=" + std::to_string(rule.t) + " outside sentence " +
                              std::to_string(rule.sentence_id));
    }
    ctx.prefix.assign(prefix_source->begin(), prefix_source->begin() + (rule.t - 1));

    nmt::Occlusion mask;
    mask.source.assign(ctx.source.size(), true);
    mask.target.assign(ctx.prefix.size() + 1, true);
    mask.target[0] = false;  // BOS is not a context word
    for (const auto& w : rule.source) {
      const auto i = static_cast<std::size_t>(w.position - 1);
      if (i >= ctx.source.size() || ctx.source[i] != w.token) {
        throw std::invalid_argument("rule provenance does not match the corpus source");
      }
      mask.source[i] = false;
    }
    for (const auto& w : rule.target) {
      const auto j = static_cast<std::size_t>(w.position);
      if (j == 0 || j > ctx.prefix.size() || ctx.prefix[j - 1] != w.token) {
        throw std::invalid_argument("rule provenance does not match the target prefix");
      }
      mask.target[j] = false;
    }
    const auto p = nmt::nmt_forward(model, ctx, &mask);
    out.nlls.push_back(std::min(-static_cast<double>(p.log_dist.at(static_cast<std::size_t>(rule.label))), cap));
  }
  out.ppl = perplexity(out.nlls);
  return out;
}

}  // namespace fidelity::metric
