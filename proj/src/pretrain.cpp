#include "kelab/pretrain.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "kelab/adam.hpp"

namespace kelab {

double fact_accuracy(const TinyLM& model, std::span<const Probe> facts) {
  const auto rate = exact_match_rate(model, facts);
  return rate ? *rate : 0.0;
}

PretrainResult pretrain(TinyLM& model, std::span<const TokenSeq> corpus, std::span<const Probe> facts,
                        const PretrainOptions& options, const EpochCallback& on_epoch) {
  if (options.epochs < 0 || options.batch_size < 1) {
    throw std::invalid_argument("pretrain: epochs must be >= 0 and batch_size >= 1");
  }
  for (const TokenSeq& seq : corpus) {
    if (seq.size() < 2) {
      throw std::invalid_argument("pretrain: corpus sequences need at least two tokens");
    }
    model.check_tokens(seq);
  }

  PretrainResult result;
  if (options.epochs > 0 && !corpus.empty()) {
    model.set_requires_grad(true);
    std::vector<Tensor*> params = tensors_of(model, select_params(model, ParamSelector::all()));
    AdamState adam(AdamOptions{.lr = options.lr}, params);
    std::mt19937_64 rng(options.seed);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 0; epoch < options.epochs; ++epoch) {
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);
      }
      double loss_sum = 0.0;
      std::size_t token_count = 0;
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
        const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
        std::size_t batch_tokens = 0;
        for (std::size_t b = start; b < stop; ++b) {
          batch_tokens += corpus[order[b]].size() - 1;
        }
        model.zero_grad();
        for (std::size_t b = start; b < stop; ++b) {
          const TokenSeq& seq = corpus[order[b]];
          Tape tape;
          const std::span<const int> input(seq.data(), seq.size() - 1);
          const Var logp = log_softmax_rows(model.forward(tape, input));
          std::vector<Index> rows(input.size()), cols(input.size());
          for (std::size_t p = 0; p < input.size(); ++p) {
            rows[p] = static_cast<Index>(p);
            cols[p] = seq[p + 1];
          }
          const Var nll = scale(sum(pick(logp, rows, cols)), -1.0 / static_cast<double>(batch_tokens));
          loss_sum += nll.item() * static_cast<double>(batch_tokens);
          tape.backward(nll);
        }
        token_count += batch_tokens;
        if (!std::isfinite(loss_sum)) {
          model.set_requires_grad(false);
          throw TrainingDiverged("pretrain: loss became non-finite in epoch " + std::to_string(epoch));
        }
        adam_step(params, adam);
      }
      const double epoch_loss = loss_sum / static_cast<double>(token_count);
      result.epoch_loss.push_back(epoch_loss);
      result.epochs_run = epoch + 1;
      if (on_epoch) {
        on_epoch(epoch, epoch_loss);
      }
      if (options.stop_at_accuracy && options.eval_every > 0 && (epoch + 1) % options.eval_every == 0 &&
          fact_accuracy(model, facts) >= *options.stop_at_accuracy) {
        break;
      }
    }
    model.set_requires_grad(false);
  }
  result.fact_accuracy = fact_accuracy(model, facts);
  return result;
}

}  // namespace kelab
