#include "fidelity/nmt/train.hpp"

#include "fidelity/autodiff/adam.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

namespace fidelity::nmt {
namespace {

// Builds the summed NLL of one sentence; returns the loss node.
NodeId sentence_loss(Graph& g, const NmtModel& model, const SentencePair& pair) {
  const auto inputs = std::span<const TokenId>(pair.target).first(pair.target.size() - 1);
  const auto trace = model.build(g, pair.source, inputs);
  const auto targets = std::span<const TokenId>(pair.target).subspan(1);
  const NodeId picked = g.gather(g.log_softmax(trace.logits), targets);
  return g.scale(g.sum(picked), -1.0f);
}

}  // namespace

double corpus_nll(const NmtModel& model, std::span<const SentencePair> pairs) {
  double nll = 0.0;
  long tokens = 0;
  for (const auto& p : pairs) {
    nll += sentence_nll(model, p);
    tokens += p.target_steps();
  }
  return tokens ? nll / static_cast<double>(tokens) : 0.0;
}

double teacher_forcing_accuracy(const NmtModel& model, std::span<const SentencePair> pairs) {
  long correct = 0, total = 0;
  for (const auto& p : pairs) {
    const auto inputs = std::span<const TokenId>(p.target).first(p.target.size() - 1);
    const auto seq = forward_sequence(model, p.source, inputs);
    for (int t = 0; t < p.target_steps(); ++t) {
      correct += seq.argmax(t) == p.target[static_cast<std::size_t>(t) + 1];
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

TrainReport train_nmt(NmtModel& model, std::span<const SentencePair> corpus, const TrainConfig& config) {
  if (corpus.empty()) throw std::invalid_argument("train_nmt: empty corpus");
  if (config.valid_fraction < 0.0 || config.valid_fraction >= 1.0) {
    throw std::invalid_argument("train_nmt: valid_fraction must be in [0, 1)");
  }
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_valid = static_cast<std::size_t>(std::lround(config.valid_fraction * static_cast<double>(corpus.size())));
  if (config.valid_fraction > 0.0) n_valid = std::clamp<std::size_t>(n_valid, 1, corpus.size() - 1);

  std::vector<SentencePair> valid, train;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_valid ? valid : train).push_back(corpus[order[i]]);
  const auto& selection = valid.empty() ? train : valid;

  TrainReport report;
  report.train_pairs = train.size();
  report.valid_pairs = valid.size();

  std::ofstream log;
  if (!config.log_path.empty()) {
    log.open(config.log_path, std::ios::trunc);
    log << "epoch\ttrain_nll\tvalid_nll\n";
  }
  auto record = [&](EpochLog e) {
    report.log.push_back(e);
    if (log) log << e.epoch << '\t' << e.train_nll << '\t' << e.valid_nll << '\n';
    if (config.verbose) {
      std::cerr << "epoch " << e.epoch << " train_nll " << e.train_nll << " valid_nll " << e.valid_nll << '\n';
    }
  };

  auto best = model.parameters();
  const double initial_valid = corpus_nll(model, selection);
  record({0, corpus_nll(model, train), initial_valid});
  report.best_valid_nll = initial_valid;

  ad::Adam<float> adam(model.parameters(), {.learning_rate = config.learning_rate});
  const auto batch = static_cast<std::size_t>(std::max(1, config.batch_size));
  ad::Gradients<float> accumulated;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double epoch_nll = 0.0;
    long epoch_tokens = 0;
    for (std::size_t start = 0; start < train.size(); start += batch) {
      const std::size_t end = std::min(train.size(), start + batch);
      accumulated.reset(model.parameters());
      long tokens = 0;
      for (std::size_t i = start; i < end; ++i) {
        Graph g(model.parameters());
        const NodeId loss = sentence_loss(g, model, train[i]);
        const float value = g.value(loss)(0, 0);
        if (!std::isfinite(value)) throw TrainingDiverged(epoch);
        epoch_nll += value;
        tokens += train[i].target_steps();
        accumulated.accumulate(g.backward(loss));
      }
      epoch_tokens += tokens;
      accumulated.scale(1.0f / static_cast<float>(tokens));
      adam.step(model.parameters(), accumulated);
    }
    const double valid_nll = corpus_nll(model, selection);
    if (!std::isfinite(valid_nll)) throw TrainingDiverged(epoch);
    record({epoch, epoch_nll / static_cast<double>(epoch_tokens), valid_nll});
    if (valid_nll < report.best_valid_nll) {
      report.best_valid_nll = valid_nll;
      report.best_epoch = epoch;
      best = model.parameters();
    }
  }
  model.parameters() = std::move(best);
  return report;
}

}  // namespace fidelity::nmt
