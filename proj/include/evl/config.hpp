// Model hyperparameters. Desk defaults train on one CPU core; the paper-scale
// constructor exists for shape checks only.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace evl {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModelConfig {
  std::int64_t image = 64;          // H = W
  std::int64_t frames = 4;          // T
  std::int64_t patch = 8;           // P
  std::int64_t d_model = 64;        // D
  std::int64_t heads = 4;
  std::int64_t global_layers = 8;   // L
  std::int64_t boot_layers = 4;     // S1, also the tap consumed by grouping
  std::int64_t boot_groups = 16;    // G
  std::int64_t entity_blocks = 2;   // S2
  std::int64_t entity_refine = 2;   // S3
  std::int64_t entities = 4;        // E
  std::int64_t decoder_depth = 2;
  std::int64_t text_layers = 2;
  std::int64_t text_len = 24;       // position table capacity
  double tag_temperature = 1.0;

  std::int64_t grid() const { return image / patch; }
  std::int64_t patches() const { return grid() * grid(); }  // K
  std::int64_t patch_dim() const { return 3 * patch * patch; }
  std::int64_t ffn_hidden() const { return 4 * d_model; }

  void validate() const {
    if (image % patch != 0)
      throw ConfigError("image size " + std::to_string(image) +
                        " not divisible by patch " + std::to_string(patch));
    if (global_layers < boot_layers)
      throw ConfigError("global encoder depth " + std::to_string(global_layers) +
                        " is shallower than the bootstrap stage " +
                        std::to_string(boot_layers));
    if (d_model % heads != 0) throw ConfigError("width not divisible by heads");
    if (frames < 1 || entities < 1 || boot_groups < 1)
      throw ConfigError("degenerate model extents");
  }

  static ModelConfig desk() { return ModelConfig{}; }

  static ModelConfig paper() {
    ModelConfig c;
    c.image = 224;
    c.frames = 4;
    c.patch = 16;
    c.d_model = 512;
    c.heads = 8;
    c.global_layers = 12;
    c.boot_layers = 6;
    c.boot_groups = 64;
    c.entity_blocks = 3;
    c.entity_refine = 3;
    c.entities = 8;
    c.decoder_depth = 3;
    c.text_layers = 12;
    return c;
  }

  // Tiny extents for gradient-oracle work.
  static ModelConfig micro() {
    ModelConfig c;
    c.image = 16;
    c.frames = 2;
    c.patch = 8;
    c.d_model = 8;
    c.heads = 2;
    c.global_layers = 2;
    c.boot_layers = 1;
    c.boot_groups = 3;
    c.entity_blocks = 1;
    c.entity_refine = 1;
    c.entities = 2;
    c.decoder_depth = 1;
    c.text_layers = 1;
    return c;
  }
};

}  // namespace evl
