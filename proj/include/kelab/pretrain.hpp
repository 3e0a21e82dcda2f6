#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "kelab/metrics.hpp"
#include "kelab/tiny_lm.hpp"

namespace kelab {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PretrainOptions {
  int epochs = 150;
  double lr = 2e-3;
  int batch_size = 8;
  std::uint64_t seed = 0;
  /// Stop once fact accuracy reaches this value (checked every eval_every epochs).
  std::optional<double> stop_at_accuracy;
  int eval_every = 10;
};

struct PretrainResult {
  std::vector<double> epoch_loss;  // mean per-token cross-entropy
  int epochs_run = 0;
  double fact_accuracy = 0.0;
};

using EpochCallback = std::function<void(int epoch, double loss)>;

/// Next-token cross-entropy over every sequence of `corpus` with Adam on all
/// parameters, then greedy exact-match accuracy on `facts`.
PretrainResult pretrain(TinyLM& model, std::span<const TokenSeq> corpus, std::span<const Probe> facts,
                        const PretrainOptions& options, const EpochCallback& on_epoch = {});

/// Fraction of facts whose greedy answer matches exactly.
double fact_accuracy(const TinyLM& model, std::span<const Probe> facts);

}  // namespace kelab
