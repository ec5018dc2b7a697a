#include "ctm/config.hpp"

#include <stdexcept>

namespace ctm {

std::string to_string(PairingStrategy s) {
  switch (s) {
    case PairingStrategy::dense: return "dense";
    case PairingStrategy::semi_dense: return "semi-dense";
    case PairingStrategy::random: return "random";
  }
  return "?";
}

PairingStrategy pairing_from_string(const std::string& s) {
  if (s == "dense") return PairingStrategy::dense;
  if (s == "semi-dense") return PairingStrategy::semi_dense;
  if (s == "random") return PairingStrategy::random;
  throw std::invalid_argument("unknown pairing strategy '" + s + "'");
}

std::size_t PairingConfig::out_pairs() const {
  switch (strategy) {
    case PairingStrategy::dense: return j_out * (j_out + 1) / 2;
    case PairingStrategy::semi_dense: return j1_out * j2_out;
    case PairingStrategy::random: return d_out;
  }
  return 0;
}

std::size_t PairingConfig::action_pairs() const {
  switch (strategy) {
    case PairingStrategy::dense: return j_action * (j_action + 1) / 2;
    case PairingStrategy::semi_dense: return j1_action * j2_action;
    case PairingStrategy::random: return d_action;
  }
  return 0;
}

std::size_t PairingConfig::neurons_required() const {
  switch (strategy) {
    case PairingStrategy::dense: return j_out + j_action;
    case PairingStrategy::semi_dense: return j1_out + j2_out + j1_action + j2_action;
    case PairingStrategy::random: return 1;
  }
  return 0;
}

std::string to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::parity_embed: return "parity-embed";
    case BackboneKind::patch_embed: return "patch-embed";
    case BackboneKind::direct: return "direct";
  }
  return "?";
}

BackboneKind backbone_from_string(const std::string& s) {
  if (s == "parity-embed") return BackboneKind::parity_embed;
  if (s == "patch-embed") return BackboneKind::patch_embed;
  if (s == "direct") return BackboneKind::direct;
  throw std::invalid_argument("unknown backbone '" + s + "'");
}

std::size_t BackboneConfig::locations() const {
  switch (kind) {
    case BackboneKind::parity_embed: return sequence_length;
    case BackboneKind::patch_embed: {
      const std::size_t per_side = (image_size + patch_size - 1) / patch_size;
      return per_side * per_side;
    }
    case BackboneKind::direct: return 0;
  }
  return 0;
}

std::string to_string(CtmVariant v) {
  switch (v) {
    case CtmVariant::standard: return "standard";
    case CtmVariant::no_nlm: return "no-nlm";
    case CtmVariant::no_sync: return "no-sync";
  }
  return "?";
}

CtmVariant variant_from_string(const std::string& s) {
  if (s == "standard") return CtmVariant::standard;
  if (s == "no-nlm") return CtmVariant::no_nlm;
  if (s == "no-sync") return CtmVariant::no_sync;
  throw std::invalid_argument("unknown CTM variant '" + s + "'");
}

std::size_t CtmConfig::observation_width() const {
  return uses_attention() ? d_input : backbone.input_width;
}

void CtmConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("invalid CTM config: " + msg); };
  if (d_model < 1) fail("D must be >= 1");
  if (ticks < 1) fail("T must be >= 1");
  if (memory < 1) fail("M must be >= 1");
  if (synapse_depth != 1 && synapse_depth % 2 != 0) {
    fail("synapse depth k must be 1 or even, got " + std::to_string(synapse_depth));
  }
  if (d_hidden < 1) fail("d_hidden must be >= 1");
  if (out_positions < 1 || out_classes < 1) fail("output shape must be non-empty");
  if (p_dropout < 0.0 || p_dropout >= 1.0) fail("p_dropout must lie in [0, 1)");
  if (uses_attention()) {
    if (n_heads < 1 || d_input % n_heads != 0) {
      fail("n_heads (" + std::to_string(n_heads) + ") must divide d_input (" +
           std::to_string(d_input) + ")");
    }
    if (backbone.d_feature < 1) fail("backbone d_feature must be >= 1");
    if (backbone.locations() < 1) fail("backbone produces no key/value locations");
  } else if (backbone.input_width < 1) {
    fail("direct backbone needs input_width >= 1");
  }
  if (variant == CtmVariant::no_sync) return;
  const auto& p = pairing;
  switch (p.strategy) {
    case PairingStrategy::dense:
      if (p.j_out < 1 || (uses_attention() && p.j_action < 1)) fail("dense pairing needs J >= 1");
      break;
    case PairingStrategy::semi_dense:
      if (p.j1_out < 1 || p.j2_out < 1 ||
          (uses_attention() && (p.j1_action < 1 || p.j2_action < 1))) {
        fail("semi-dense pairing needs J1, J2 >= 1");
      }
      break;
    case PairingStrategy::random:
      if (p.d_out < 1 || (uses_attention() && p.d_action < 1)) fail("random pairing needs D_out, D_action >= 1");
      if (p.n_self > p.d_out || (uses_attention() && p.n_self > p.d_action)) {
        fail("n_self (" + std::to_string(p.n_self) + ") exceeds D_out/D_action");
      }
      if (p.n_self > d_model) fail("n_self exceeds D");
      break;
  }
  if (p.strategy != PairingStrategy::random) {
    std::size_t needed = p.neurons_required();
    if (!uses_attention()) {
      needed = p.strategy == PairingStrategy::dense ? p.j_out : p.j1_out + p.j2_out;
    }
    if (needed > d_model) {
      fail("pairing needs " + std::to_string(needed) + " distinct neurons but D = " +
           std::to_string(d_model));
    }
  }
}

}  // namespace ctm
