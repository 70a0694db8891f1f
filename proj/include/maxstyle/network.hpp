#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maxstyle/rng.hpp"
#include "maxstyle/style.hpp"
#include "maxstyle/tensor.hpp"

namespace maxstyle {

enum class Wiring {
  A_encoder_mixstyle,             // style layers in the encoder, no image decoder
  B_dualbranch_encoder_mixstyle,  // style layers in the encoder, image decoder attached
  C_decoder_style_aug,            // style layers in the image decoder, feature-to-input augmentation
};

enum class StyleKind { none, mixstyle, dsu_noise, maxstyle };

struct Ablation {
  bool no_style_noise = false;
  bool no_style_mixing = false;
  bool no_advopt = false;
  bool operator==(const Ablation&) const = default;
};

struct ModelVariant {
  Wiring wiring = Wiring::C_decoder_style_aug;
  StyleKind style_kind = StyleKind::none;
  Ablation ablation;
  bool operator==(const ModelVariant&) const = default;
};

std::string to_string(Wiring w);
std::string to_string(StyleKind k);
Wiring parse_wiring(const std::string& s);
StyleKind parse_style_kind(const std::string& s);

nlohmann::json to_json(const ModelVariant& v);
ModelVariant variant_from_json(const nlohmann::json& j);

struct ModelOptions {
  std::array<std::size_t, 4> widths{16, 32, 64, 64};
  /// Unset: attach the image decoder for wirings B and C only.
  std::optional<bool> reconstruction;
};

struct ConvLayer {
  Tensor weight;  // [Cout, Cin, k, k]
  Tensor bias;    // [Cout]
};

struct ConvBlock {
  ConvLayer first;
  ConvLayer second;
};

struct Decoder {
  std::vector<ConvBlock> blocks;
  ConvLayer head;  // 1x1 projection to classes or image channels
};

/// Number of encoder/decoder blocks and of style layers.
inline constexpr std::size_t kBlocks = 4;
inline constexpr std::size_t kStyleLayers = 3;

struct Model {
  ModelVariant variant;
  ModelOptions options;
  std::size_t in_channels = 1;
  std::size_t classes = 4;

  std::vector<ConvBlock> encoder;
  Decoder seg_decoder;
  std::optional<Decoder> img_decoder;
  /// Block indices after which a style layer fires: first three encoder
  /// blocks for A/B, last three image-decoder blocks for C.
  std::vector<std::size_t> style_layer_sites;

  bool has_image_decoder() const { return img_decoder.has_value(); }
  std::vector<Tensor> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;
  std::vector<std::size_t> style_layer_channels() const;
  void zero_grad();
};

/// Fan-scaled uniform initialisation, deterministic in the rng state.
Model build_model(const ModelVariant& variant, std::size_t in_channels, std::size_t classes, SeededRng& rng,
                  const ModelOptions& options = {});

/// Latent z = E(x), [N, widths[3], H/8, W/8]. The style transform is applied
/// after each of the first three blocks only for wirings A and B.
Tensor encode(const Model& m, const Tensor& x, const StyleParams* style = nullptr);
/// Per-pixel class logits [N, K, H, W].
Tensor decode_seg(const Model& m, const Tensor& z);
/// Reconstruction [N, in_channels, H, W]. Style fires only for wiring C.
Tensor decode_img(const Model& m, const Tensor& z, const StyleParams* style = nullptr);

/// Applies the model's configured style transform to one style layer.
Tensor apply_style(const Model& m, const Tensor& features, const StyleParams& style, std::size_t layer);

struct ForwardResult {
  Tensor p_hat;
  std::optional<Tensor> x_hat;
};

/// A/B: p = D_s(E(x; style)), B also reconstructs from the clean latent.
/// C: x_hat = D_i(E(x); style), then p = D_s(E(x_hat)).
ForwardResult forward_variant(const Model& m, const Tensor& x, const StyleParams* style = nullptr);

/// Disables requires_grad on every model parameter for its lifetime.
class FrozenParameters {
 public:
  explicit FrozenParameters(const Model& m);
  ~FrozenParameters();
  FrozenParameters(const FrozenParameters&) = delete;
  FrozenParameters& operator=(const FrozenParameters&) = delete;

 private:
  std::vector<Tensor> params_;
  std::vector<bool> previous_;
};

struct Checkpoint {
  Model model;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::string config_hash;
};

/// "MSCK" magic, u32 LE header length, JSON header, then one TNS1 record per
/// parameter in Model::parameters() order.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

}  // namespace maxstyle
