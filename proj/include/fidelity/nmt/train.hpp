#pragma once

#include "fidelity/nmt/model.hpp"

#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

namespace fidelity::nmt {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;  // sentences per Adam step
  double learning_rate = 1e-3;
  double valid_fraction = 0.1;
  std::uint64_t seed = 1;
  std::filesystem::path log_path;  // optional TSV: epoch, train NLL, valid NLL
  bool verbose = false;
};

struct EpochLog {
  int epoch = 0;
  double train_nll = 0.0;  // per token; epoch 0 is the untrained model
  double valid_nll = 0.0;
};

struct TrainReport {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_valid_nll = 0.0;
  std::size_t train_pairs = 0;
  std::size_t valid_pairs = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(int epoch)
      : std::runtime_error("training diverged (non-finite loss) in epoch " + std::to_string(epoch)),
        epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

// Trains in place by teacher-forced maximum likelihood and leaves the model at
// the epoch with the lowest validation NLL (epoch 0 included).
TrainReport train_nmt(NmtModel& model, std::span<const SentencePair> corpus, const TrainConfig& config);

// Mean per-token NLL under teacher forcing.
double corpus_nll(const NmtModel& model, std::span<const SentencePair> pairs);

// Fraction of target tokens where argmax P(. | c_t) equals the gold token.
double teacher_forcing_accuracy(const NmtModel& model, std::span<const SentencePair> pairs);

}  // namespace fidelity::nmt
