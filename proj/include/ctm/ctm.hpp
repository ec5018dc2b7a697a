#pragma once

#include <cstdint>
#include <optional>

#include "ctm/attention.hpp"
#include "ctm/backbone.hpp"
#include "ctm/config.hpp"
#include "ctm/model.hpp"
#include "ctm/synapse.hpp"
#include "ctm/sync.hpp"

namespace ctm {

// Per-sequence recurrent state threaded through the internal ticks.
struct CtmState {
  ad::DiffArray z;        // [B x D] current post-activations
  ad::DiffArray history;  // [B x D x M] most recent pre-activations, oldest first
  SyncAccumulator out_sync;
  SyncAccumulator action_sync;
  std::size_t tick = 0;
};

// What the model observes each tick: attention memory, or the raw input.
struct Observation {
  std::optional<AttentionMemory> memory;
  std::optional<ad::DiffArray> direct;  // [B x N]
};

struct TickOutput {
  ad::DiffArray logits;                    // [B x P x C]
  std::optional<ad::DiffArray> attention;  // [B x H x L]
  std::optional<ad::DiffArray> sync_out;   // [B x D_out]
};

class CtmModel : public SequenceModel {
 public:
  CtmModel(CtmConfig config, std::uint64_t seed);

  std::string kind() const override;
  std::size_t ticks() const override { return cfg_.ticks; }
  std::size_t out_positions() const override { return cfg_.out_positions; }
  std::size_t out_classes() const override { return cfg_.out_classes; }
  std::size_t analytic_param_count() const override { return param_count(cfg_); }

  static std::size_t param_count(const CtmConfig& cfg);
  // Depth actually used by the synapse model (no-NLM adds two layers).
  static std::size_t effective_synapse_depth(const CtmConfig& cfg);

  const CtmConfig& config() const { return cfg_; }
  const PairSelection& out_pairs() const { return out_pairs_; }
  const PairSelection& action_pairs() const { return action_pairs_; }
  const SynapseNet& synapse() const { return synapse_; }

  CtmState initial_state(ParamBinding& p, std::size_t batch) const;
  Observation observe(ParamBinding& p, const Tensor& inputs) const;

  // One internal tick:
  //  (a) action synchronization from the current z (recursive update)
  //  (b) q = W_in S_action
  //  (c) o = cross attention(q, keys/values)
  //  (d) a = synapse(concat(z, o))
  //  (e) push a into the pre-activation FIFO
  //  (f) z' = NLMs(history)
  //  (g) output synchronization from z'
  //  (h) y = W_out S_out
  TickOutput tick(ParamBinding& p, CtmState& state, const Observation& obs,
                  const ForwardOptions& opts) const;

  ForwardOutput forward(ParamBinding& p, const Tensor& inputs,
                        const ForwardOptions& opts) const override;

  // Push `a` [B x D] into a [B x D x M] FIFO, dropping the oldest column.
  static ad::DiffArray push_history(const ad::DiffArray& history, const ad::DiffArray& a);

 private:
  CtmConfig cfg_;
  PairSelection out_pairs_;
  PairSelection action_pairs_;
  Backbone backbone_;
  CrossAttention attention_;
  SynapseNet synapse_;
  ParamId z_init_ = 0;
  ParamId history_init_ = 0;
  ParamId nlm_w1_ = 0, nlm_b1_ = 0, nlm_w2_ = 0, nlm_b2_ = 0;
  ParamId decay_out_ = 0, decay_action_ = 0;
  Linear out_proj_;
  Linear query_proj_;
};

}  // namespace ctm
