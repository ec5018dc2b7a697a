#include "ctm/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace ctm {

Tensor sinusoidal_positions(std::size_t length, std::size_t width) {
  Tensor pe({length, width});
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t c = 0; c < width; ++c) {
      const double rate =
          std::pow(10000.0, -static_cast<double>(c - c % 2) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * rate;
      pe[pos * width + c] = c % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Tensor patchify(const Tensor& images, std::size_t patch) {
  if (images.rank() != 4 || images.shape[1] != images.shape[2]) {
    throw std::invalid_argument("patchify: expected [B x n x n x C], got " +
                                shape_string(images.shape));
  }
  const std::size_t b = images.shape[0], n = images.shape[1], c = images.shape[3];
  const std::size_t side = (n + patch - 1) / patch;
  const std::size_t feat = patch * patch * c;
  Tensor out({b, side * side, feat});
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t py = 0; py < side; ++py)
      for (std::size_t px = 0; px < side; ++px) {
        double* dst = out.data.data() + ((s * side + py) * side + px) * feat;
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx) {
            const std::size_t y = py * patch + dy, x = px * patch + dx;
            double* cell = dst + (dy * patch + dx) * c;
            if (y < n && x < n) {
              const double* src = images.data.data() + ((s * n + y) * n + x) * c;
              for (std::size_t k = 0; k < c; ++k) cell[k] = src[k];
            } else {
              cell[0] = 1.0;
            }
          }
      }
  return out;
}

Backbone::Backbone(ParamStore& store, const std::string& name, const BackboneConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  switch (cfg.kind) {
    case BackboneKind::parity_embed: {
      Tensor table({2, cfg.d_feature});
      for (auto& v : table.data) v = rng.normal(0.0, 1.0);
      embedding_ = store.add(name + ".embedding", std::move(table));
      proj_ = Linear::create(store, name + ".proj", cfg.d_feature, cfg.d_feature, rng);
      norm_ = LayerNorm::create(store, name + ".norm", cfg.d_feature);
      break;
    }
    case BackboneKind::patch_embed: {
      const std::size_t feat = cfg.patch_size * cfg.patch_size * cfg.channels;
      proj_ = Linear::create(store, name + ".proj", feat, cfg.d_feature, rng);
      norm_ = LayerNorm::create(store, name + ".norm", cfg.d_feature);
      break;
    }
    case BackboneKind::direct: break;
  }
}

std::size_t Backbone::param_count(const BackboneConfig& cfg) {
  switch (cfg.kind) {
    case BackboneKind::parity_embed:
      return 2 * cfg.d_feature + Linear::count(cfg.d_feature, cfg.d_feature) +
             LayerNorm::count(cfg.d_feature);
    case BackboneKind::patch_embed:
      return Linear::count(cfg.patch_size * cfg.patch_size * cfg.channels, cfg.d_feature) +
             LayerNorm::count(cfg.d_feature);
    case BackboneKind::direct: return 0;
  }
  return 0;
}

ad::DiffArray Backbone::forward(ParamBinding& p, const Tensor& inputs) const {
  ad::Tape& tape = p.tape();
  switch (cfg_.kind) {
    case BackboneKind::parity_embed: {
      if (inputs.rank() != 2 || inputs.shape[1] != cfg_.sequence_length) {
        throw std::invalid_argument("parity backbone expects [B x " +
                                    std::to_string(cfg_.sequence_length) + "], got " +
                                    shape_string(inputs.shape));
      }
      const std::size_t b = inputs.shape[0], l = inputs.shape[1];
      Tensor onehot({b, l, 2});
      for (std::size_t i = 0; i < b * l; ++i) onehot[i * 2 + (inputs[i] < 0 ? 1 : 0)] = 1.0;
      auto emb = ad::matmul(tape.constant(std::move(onehot)), p(embedding_));
      auto x = ad::add(emb, tape.constant(sinusoidal_positions(l, cfg_.d_feature)));
      return norm_(p, proj_(p, x));
    }
    case BackboneKind::patch_embed: {
      if (inputs.rank() != 4 || inputs.shape[1] != cfg_.image_size ||
          inputs.shape[3] != cfg_.channels) {
        throw std::invalid_argument("patch backbone expects [B x " +
                                    std::to_string(cfg_.image_size) + " x " +
                                    std::to_string(cfg_.image_size) + " x " +
                                    std::to_string(cfg_.channels) + "], got " +
                                    shape_string(inputs.shape));
      }
      return norm_(p, proj_(p, tape.constant(patchify(inputs, cfg_.patch_size))));
    }
    case BackboneKind::direct: {
      if (inputs.rank() != 2 || inputs.shape[1] != cfg_.input_width) {
        throw std::invalid_argument("direct backbone expects [B x " +
                                    std::to_string(cfg_.input_width) + "], got " +
                                    shape_string(inputs.shape));
      }
      return tape.constant(inputs);
    }
  }
  throw std::logic_error("unreachable backbone kind");
}

}  // namespace ctm
