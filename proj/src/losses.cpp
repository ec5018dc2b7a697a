#include "ctm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "ctm/model.hpp"

namespace ctm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

// Row-wise log-softmax of a [rows x C] block.
std::vector<double> log_softmax_rows(std::span<const double> x, std::size_t c) {
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < x.size() / c; ++r) {
    const double* row = x.data() + r * c;
    const double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(row[k] - m);
    const double lz = m + std::log(z);
    for (std::size_t k = 0; k < c; ++k) out[r * c + k] = row[k] - lz;
  }
  return out;
}

}  // namespace

double certainty(std::span<const double> p) {
  const std::size_t c = p.size();
  if (c < 2) throw std::invalid_argument("certainty: need at least 2 classes, got " + std::to_string(c));
  double total = 0.0, entropy = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw std::invalid_argument("certainty: negative or NaN probability");
    total += v;
    if (v > 0.0) entropy -= v * std::log(std::max(v, 1e-12));
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("certainty: probabilities sum to " + std::to_string(total));
  }
  return 1.0 - entropy / std::log(static_cast<double>(c));
}

std::vector<double> certainty_from_logits(const Tensor& logits) {
  if (logits.rank() < 1) throw std::invalid_argument("certainty_from_logits: rank-0 input");
  const std::size_t c = logits.shape.back();
  const auto lsm = log_softmax_rows(logits.data, c);
  std::vector<double> out(logits.size() / c);
  std::vector<double> p(c);
  for (std::size_t r = 0; r < out.size(); ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += (p[k] = std::exp(lsm[r * c + k]));
    for (auto& v : p) v /= s;
    out[r] = certainty(p);
  }
  return out;
}

TickSelection select_ticks(std::span<const double> losses, std::span<const double> certainties) {
  if (losses.empty() || losses.size() != certainties.size()) {
    throw std::invalid_argument("select_ticks: need matching non-empty loss and certainty lists");
  }
  TickSelection s;
  for (std::size_t t = 0; t < losses.size(); ++t) {
    if (!std::isfinite(losses[t])) {
      throw NumericError("non-finite loss at tick " + std::to_string(t));
    }
    if (losses[t] < losses[s.t1]) s.t1 = t;
    if (certainties[t] > certainties[s.t2]) s.t2 = t;
  }
  s.loss = 0.5 * (losses[s.t1] + losses[s.t2]);
  return s;
}

std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::two_tick: return "two-tick";
    case LossMode::final_tick: return "final-tick";
    case LossMode::curriculum: return "curriculum";
    case LossMode::ctc: return "ctc";
  }
  return "two-tick";
}

LossMode loss_mode_from_string(const std::string& s) {
  for (auto m : {LossMode::two_tick, LossMode::final_tick, LossMode::curriculum, LossMode::ctc}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown loss mode '" + s +
                              "' (expected two-tick, final-tick, curriculum or ctc)");
}

std::size_t curriculum_width(std::size_t correct_prefix, std::size_t positions) {
  return std::min(correct_prefix + kCurriculumLookahead, positions);
}

std::size_t correct_prefix(std::span<const double> logits, std::span<const std::size_t> target,
                           std::size_t classes) {
  if (logits.size() != target.size() * classes) {
    throw std::invalid_argument("correct_prefix: logits do not match target length");
  }
  std::size_t k = 0;
  for (; k < target.size(); ++k) {
    const double* row = logits.data() + k * classes;
    const auto best = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
    if (best != target[k]) break;
  }
  return k;
}

LossResult sequence_loss(std::span<const ad::DiffArray> logits,
                         std::span<const std::size_t> targets, LossMode mode) {
  if (logits.empty()) throw std::invalid_argument("sequence_loss: no ticks");
  if (mode == LossMode::ctc) throw std::invalid_argument("sequence_loss: use ctc_loss for ctc mode");
  const Shape& s = logits[0].shape();
  if (s.size() != 3) {
    throw std::invalid_argument("sequence_loss: logits must be [B x P x C], got " + shape_string(s));
  }
  const std::size_t b = s[0], p = s[1], c = s[2], ticks = logits.size();
  if (targets.size() != b * p) {
    throw std::invalid_argument("sequence_loss: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(b * p) + " positions");
  }
  for (auto t : targets) {
    if (t >= c) throw std::invalid_argument("sequence_loss: target class " + std::to_string(t) +
                                            " out of range for " + std::to_string(c) + " classes");
  }
  LossResult r;
  r.tick_losses = Tensor({b, ticks});
  r.certainties = Tensor({b, ticks});
  std::vector<ad::DiffArray> columns;
  columns.reserve(ticks);
  for (std::size_t t = 0; t < ticks; ++t) {
    const auto& y = logits[t];
    if (y.shape() != s) throw std::invalid_argument("sequence_loss: tick shapes differ");
    auto nll = ad::neg(ad::pick(ad::reshape(ad::log_softmax(y, -1), {b * p, c}), targets));
    Tensor weights({b, p}, 1.0 / static_cast<double>(p));
    if (mode == LossMode::curriculum) {
      const auto& yv = y.value().data;
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t k = correct_prefix(std::span(yv).subspan(i * p * c, p * c),
                                             targets.subspan(i * p, p), c);
        const std::size_t w = curriculum_width(k, p);
        for (std::size_t j = 0; j < p; ++j) weights[i * p + j] = j < w ? 1.0 / static_cast<double>(w) : 0.0;
      }
    }
    auto per_sample = ad::sum(ad::mul_constant(ad::reshape(nll, {b, p}), weights), -1);
    columns.push_back(ad::reshape(per_sample, {b, 1}));
    const auto cert = certainty_from_logits(y.value());
    for (std::size_t i = 0; i < b; ++i) {
      r.tick_losses[i * ticks + t] = per_sample.value()[i];
      double m = 0.0;
      for (std::size_t j = 0; j < p; ++j) m += cert[i * p + j];
      r.certainties[i * ticks + t] = m / static_cast<double>(p);
    }
  }
  Tensor select({b, ticks}, 0.0);
  r.t1.resize(b);
  r.t2.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (mode == LossMode::final_tick) {
      const double l = r.tick_losses[i * ticks + ticks - 1];
      if (!std::isfinite(l)) throw NumericError("non-finite loss at tick " + std::to_string(ticks - 1));
      r.t1[i] = r.t2[i] = ticks - 1;
    } else {
      auto sel = select_ticks(std::span(r.tick_losses.data).subspan(i * ticks, ticks),
                              std::span(r.certainties.data).subspan(i * ticks, ticks));
      r.t1[i] = sel.t1;
      r.t2[i] = sel.t2;
    }
    select[i * ticks + r.t1[i]] += 0.5 / static_cast<double>(b);
    select[i * ticks + r.t2[i]] += 0.5 / static_cast<double>(b);
  }
  r.loss = ad::sum(ad::mul_constant(ad::concat(columns, -1), select));
  return r;
}

namespace {

struct CtcLattice {
  std::vector<std::size_t> ext;  // blank-augmented label
  std::vector<double> lp;        // [T x V] log-probabilities
  std::vector<double> alpha;     // [T x S']
  std::vector<double> beta;      // [T x S'], excluding the emission at t
  double nll = 0.0;
};

bool can_skip(const std::vector<std::size_t>& ext, std::size_t s, std::size_t blank) {
  return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
}

CtcLattice ctc_lattice(std::span<const double> logits, std::size_t ticks, std::size_t vocab,
                       std::span<const std::size_t> label, std::size_t blank, bool with_beta) {
  if (blank >= vocab) throw std::invalid_argument("ctc: blank id out of range");
  if (ticks == 0) throw std::invalid_argument("ctc: no ticks");
  CtcLattice L;
  L.ext.push_back(blank);
  for (auto c : label) {
    if (c >= vocab || c == blank) {
      throw std::invalid_argument("ctc: label symbol " + std::to_string(c) + " invalid");
    }
    L.ext.push_back(c);
    L.ext.push_back(blank);
  }
  const std::size_t n = L.ext.size();
  L.lp = log_softmax_rows(logits, vocab);
  L.alpha.assign(ticks * n, kNegInf);
  L.alpha[0] = L.lp[blank];
  if (n > 1) L.alpha[1] = L.lp[L.ext[1]];
  for (std::size_t t = 1; t < ticks; ++t) {
    for (std::size_t s = 0; s < n; ++s) {
      double a = L.alpha[(t - 1) * n + s];
      if (s >= 1) a = log_add(a, L.alpha[(t - 1) * n + s - 1]);
      if (can_skip(L.ext, s, blank)) a = log_add(a, L.alpha[(t - 1) * n + s - 2]);
      if (a != kNegInf) L.alpha[t * n + s] = a + L.lp[t * vocab + L.ext[s]];
    }
  }
  double total = L.alpha[(ticks - 1) * n + n - 1];
  if (n > 1) total = log_add(total, L.alpha[(ticks - 1) * n + n - 2]);
  if (total == kNegInf) {
    throw std::domain_error("ctc: label of length " + std::to_string(label.size()) +
                            " cannot be aligned within " + std::to_string(ticks) + " ticks");
  }
  L.nll = -total;
  if (with_beta) {
    L.beta.assign(ticks * n, kNegInf);
    L.beta[(ticks - 1) * n + n - 1] = 0.0;
    if (n > 1) L.beta[(ticks - 1) * n + n - 2] = 0.0;
    for (std::size_t t = ticks - 1; t-- > 0;) {
      for (std::size_t s = 0; s < n; ++s) {
        double b = kNegInf;
        for (std::size_t s2 = s; s2 <= s + 2 && s2 < n; ++s2) {
          if (s2 == s + 2 && !can_skip(L.ext, s2, blank)) continue;
          const double nb = L.beta[(t + 1) * n + s2];
          if (nb != kNegInf) b = log_add(b, nb + L.lp[(t + 1) * vocab + L.ext[s2]]);
        }
        L.beta[t * n + s] = b;
      }
    }
  }
  return L;
}

}  // namespace

double ctc_nll(const Tensor& logits, std::span<const std::size_t> label, std::size_t blank) {
  if (logits.rank() != 2) throw std::invalid_argument("ctc_nll: logits must be [T x V]");
  return ctc_lattice(logits.data, logits.shape[0], logits.shape[1], label, blank, false).nll;
}

ad::DiffArray ctc_loss(const ad::DiffArray& logits,
                       const std::vector<std::vector<std::size_t>>& labels, std::size_t blank) {
  const Shape& s = logits.shape();
  if (s.size() != 3) throw std::invalid_argument("ctc_loss: logits must be [B x T x V], got " + shape_string(s));
  const std::size_t b = s[0], ticks = s[1], vocab = s[2];
  if (labels.size() != b) throw std::invalid_argument("ctc_loss: one label per batch row required");
  const auto& xv = logits.value().data;
  Tensor grad(s, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    auto row = std::span(xv).subspan(i * ticks * vocab, ticks * vocab);
    const CtcLattice L = ctc_lattice(row, ticks, vocab, labels[i], blank, true);
    total += L.nll;
    const std::size_t n = L.ext.size();
    for (std::size_t t = 0; t < ticks; ++t) {
      double* g = grad.data.data() + (i * ticks + t) * vocab;
      for (std::size_t k = 0; k < vocab; ++k) g[k] = std::exp(L.lp[t * vocab + k]);
      for (std::size_t sidx = 0; sidx < n; ++sidx) {
        const double a = L.alpha[t * n + sidx] + L.beta[t * n + sidx];
        if (a != kNegInf) g[L.ext[sidx]] -= std::exp(a + L.nll);
      }
    }
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  for (auto& g : grad.data) g *= inv_b;
  const std::size_t xi = logits.id();
  return logits.tape().push(Tensor::scalar(total * inv_b), {xi},
                            [xi, grad = std::move(grad)](ad::Tape& t, std::size_t self) {
                              const double g = t.grad_of(self).item();
                              Tensor& gx = t.grad_buffer(xi);
                              for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += g * grad[k];
                            });
}

CtcDecoding ctc_greedy_decode(const Tensor& logits, std::size_t blank) {
  if (logits.rank() != 2) throw std::invalid_argument("ctc_greedy_decode: logits must be [T x V]");
  const auto best = ad::argmax(logits, -1);
  CtcDecoding d;
  std::size_t prev = blank;
  for (std::size_t t = 0; t < best.size(); ++t) {
    if (best[t] != blank && best[t] != prev) {
      d.symbols.push_back(best[t]);
      d.ticks.push_back(t);
    }
    prev = best[t];
  }
  return d;
}

Calibration calibration_bins(std::span<const double> confidence, const std::vector<bool>& correct,
                             std::size_t n_bins) {
  if (n_bins < 2) throw std::invalid_argument("calibration: need at least 2 bins");
  if (confidence.empty()) throw std::invalid_argument("calibration: empty evaluation set");
  if (confidence.size() != correct.size()) throw std::invalid_argument("calibration: size mismatch");
  Calibration cal;
  cal.bins.resize(n_bins);
  for (std::size_t k = 0; k < n_bins; ++k) {
    cal.bins[k].lower = static_cast<double>(k) / static_cast<double>(n_bins);
    cal.bins[k].upper = static_cast<double>(k + 1) / static_cast<double>(n_bins);
  }
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const double c = confidence[i];
    auto k = static_cast<std::size_t>(std::floor(c * static_cast<double>(n_bins)));
    k = std::min(k, n_bins - 1);
    cal.bins[k].confidence += c;
    cal.bins[k].accuracy += correct[i] ? 1.0 : 0.0;
    ++cal.bins[k].count;
  }
  const double n = static_cast<double>(confidence.size());
  for (auto& bin : cal.bins) {
    if (bin.count == 0) continue;
    bin.confidence /= static_cast<double>(bin.count);
    bin.accuracy /= static_cast<double>(bin.count);
    cal.ece += static_cast<double>(bin.count) / n * std::abs(bin.confidence - bin.accuracy);
  }
  return cal;
}

Calibration calibration_curve(const std::vector<Tensor>& probs, std::span<const std::size_t> labels,
                              std::size_t tick, std::size_t n_bins) {
  if (tick >= probs.size()) throw std::out_of_range("calibration_curve: tick out of range");
  const Tensor& now = probs[tick];
  if (now.rank() != 2 || now.shape[0] != labels.size()) {
    throw std::invalid_argument("calibration_curve: probabilities must be [N x C] with N labels");
  }
  const std::size_t n = now.shape[0], c = now.shape[1];
  const auto pred = ad::argmax(now, -1);
  std::vector<double> conf(n, 0.0);
  std::vector<bool> correct(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t <= tick; ++t) conf[i] += probs[t][i * c + pred[i]];
    conf[i] /= static_cast<double>(tick + 1);
    correct[i] = pred[i] == labels[i];
  }
  return calibration_bins(conf, correct, n_bins);
}

std::size_t adaptive_halt(std::span<const double> certainties, double threshold) {
  if (certainties.empty()) throw std::invalid_argument("adaptive_halt: empty certainty list");
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw std::invalid_argument("adaptive_halt: threshold must lie in (0, 1], got " +
                                std::to_string(threshold));
  }
  for (std::size_t t = 0; t < certainties.size(); ++t) {
    if (certainties[t] >= threshold) return t;
  }
  return certainties.size() - 1;
}

}  // namespace ctm
