#pragma once

// Certainty, tick-selection losses and evaluation metrics.
//
// Tick indices are zero-based throughout (tick 0 is the first internal tick).

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ctm/autodiff.hpp"

namespace ctm {

// 1 - H(p) / log C, with entries floored at 1e-12 inside the log.
double certainty(std::span<const double> p);

// Certainty of softmax(logits) for every row of a [.. x C] array.
std::vector<double> certainty_from_logits(const Tensor& logits);

struct TickSelection {
  std::size_t t1 = 0;  // minimum-loss tick
  std::size_t t2 = 0;  // maximum-certainty tick
  double loss = 0.0;   // (L[t1] + L[t2]) / 2
};

// Two-tick selection over per-tick losses and certainties; ties go to the earliest tick.
TickSelection select_ticks(std::span<const double> losses, std::span<const double> certainties);

enum class LossMode { two_tick, final_tick, curriculum, ctc };

std::string to_string(LossMode m);
LossMode loss_mode_from_string(const std::string& s);

// Extra route steps beyond the correctly predicted prefix that the maze loss covers.
inline constexpr std::size_t kCurriculumLookahead = 5;

// Number of leading route positions that contribute to the curriculum loss.
std::size_t curriculum_width(std::size_t correct_prefix, std::size_t positions);

// Length of the leading run where argmax(logits[p]) == target[p]. logits is [P x C].
std::size_t correct_prefix(std::span<const double> logits, std::span<const std::size_t> target,
                           std::size_t classes);

struct LossResult {
  ad::DiffArray loss;            // scalar, batch mean
  Tensor tick_losses;            // [B x T] per-sample per-tick loss
  Tensor certainties;            // [B x T] certainty averaged over positions
  std::vector<std::size_t> t1;   // per sample
  std::vector<std::size_t> t2;   // per sample
};

// Cross-entropy over per-tick logits [B x P x C] against targets [B*P] (row-major).
// two_tick: average of the min-loss and max-certainty ticks per sample.
// final_tick: the last tick only.
// curriculum: per tick, positions past the correct prefix + lookahead are masked,
// then the two-tick selection is applied to the masked losses.
LossResult sequence_loss(std::span<const ad::DiffArray> logits,
                         std::span<const std::size_t> targets, LossMode mode);

// Negative log-likelihood of `label` under per-tick logits [T x V] (CTC, log space).
// Throws std::domain_error when the label cannot be aligned within T ticks.
double ctc_nll(const Tensor& logits, std::span<const std::size_t> label, std::size_t blank);

// Batch-mean CTC loss on logits [B x T x V]; differentiable with respect to logits.
ad::DiffArray ctc_loss(const ad::DiffArray& logits,
                       const std::vector<std::vector<std::size_t>>& labels, std::size_t blank);

// Greedy CTC decoding: per-tick argmax, repeats merged, blanks removed.
// Also returns the tick at which each emitted symbol first appeared.
struct CtcDecoding {
  std::vector<std::size_t> symbols;
  std::vector<std::size_t> ticks;
};
CtcDecoding ctc_greedy_decode(const Tensor& logits, std::size_t blank);

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  double confidence = 0.0;  // mean confidence of members (0 if empty)
  double accuracy = 0.0;    // fraction correct (0 if empty)
  std::size_t count = 0;
};

struct Calibration {
  std::vector<CalibrationBin> bins;
  double ece = 0.0;
};

// Reliability bins from confidences and correctness flags.
Calibration calibration_bins(std::span<const double> confidence, const std::vector<bool>& correct,
                             std::size_t n_bins);

// Calibration at `tick`: predictions are argmax at that tick, confidence is the
// probability of that class averaged over ticks 0..tick.
// probs[t] is [N x C]; labels has N entries.
Calibration calibration_curve(const std::vector<Tensor>& probs, std::span<const std::size_t> labels,
                              std::size_t tick, std::size_t n_bins);

// First tick whose certainty reaches `threshold`; the final tick if none does.
std::size_t adaptive_halt(std::span<const double> certainties, double threshold);

}  // namespace ctm
