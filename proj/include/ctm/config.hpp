#pragma once

#include <cstddef>
#include <string>

#include "ctm/autodiff.hpp"

namespace ctm {

enum class PairingStrategy { dense, semi_dense, random };

std::string to_string(PairingStrategy s);
PairingStrategy pairing_from_string(const std::string& s);

// Neuron-pair selection for the output and action synchronization sets.
struct PairingConfig {
  PairingStrategy strategy = PairingStrategy::dense;
  // dense: all pairs (i <= j) among J neurons
  std::size_t j_out = 4;
  std::size_t j_action = 4;
  // semi-dense: left neurons from J1, right neurons from J2
  std::size_t j1_out = 4;
  std::size_t j2_out = 4;
  std::size_t j1_action = 4;
  std::size_t j2_action = 4;
  // random: D_out / D_action pairs, the first n_self of each are self-pairs
  std::size_t d_out = 16;
  std::size_t d_action = 16;
  std::size_t n_self = 0;

  std::size_t out_pairs() const;
  std::size_t action_pairs() const;
  // Distinct neurons consumed by the out/action selections (dense, semi-dense).
  std::size_t neurons_required() const;
};

enum class BackboneKind { parity_embed, patch_embed, direct };

std::string to_string(BackboneKind k);
BackboneKind backbone_from_string(const std::string& s);

// Task feature extractor producing attention keys/values (or direct inputs).
struct BackboneConfig {
  BackboneKind kind = BackboneKind::parity_embed;
  std::size_t d_feature = 32;     // key/value feature width
  std::size_t sequence_length = 8;  // parity: tokens
  std::size_t image_size = 9;     // maze: n x n grid
  std::size_t channels = 4;       // maze: one-hot categories per cell
  std::size_t patch_size = 3;     // maze: patch edge length
  std::size_t input_width = 0;    // direct: raw input width

  // Number of key/value locations produced (0 for direct).
  std::size_t locations() const;
};

enum class CtmVariant { standard, no_nlm, no_sync };

std::string to_string(CtmVariant v);
CtmVariant variant_from_string(const std::string& s);

struct CtmConfig {
  std::size_t d_model = 64;       // D, neuron count
  std::size_t ticks = 8;          // T
  std::size_t memory = 4;         // M
  std::size_t synapse_depth = 1;  // k: 1 or even
  std::size_t d_input = 32;       // attention output width
  std::size_t d_hidden = 4;       // NLM hidden width
  std::size_t n_heads = 4;
  PairingConfig pairing;
  double p_dropout = 0.0;
  ad::Activation activation = ad::Activation::silu;
  BackboneConfig backbone;
  std::size_t out_positions = 1;  // P
  std::size_t out_classes = 2;    // C
  CtmVariant variant = CtmVariant::standard;

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  bool uses_attention() const { return backbone.kind != BackboneKind::direct; }
  // Width of o^t fed to the synapse model.
  std::size_t observation_width() const;
  std::size_t out_width() const { return out_positions * out_classes; }
};

}  // namespace ctm
