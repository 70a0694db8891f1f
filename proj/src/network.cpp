#include "maxstyle/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "maxstyle/errors.hpp"

namespace maxstyle {

namespace {

ConvLayer make_conv(std::size_t cin, std::size_t cout, std::size_t k, SeededRng& rng) {
  const double fan_in = static_cast<double>(cin * k * k);
  const double w_bound = std::sqrt(6.0 / fan_in);
  const double b_bound = 1.0 / std::sqrt(fan_in);
  std::vector<float> w(cout * cin * k * k), b(cout);
  for (auto& v : w) v = static_cast<float>(rng.uniform(-w_bound, w_bound));
  for (auto& v : b) v = static_cast<float>(rng.uniform(-b_bound, b_bound));
  return {Tensor({cout, cin, k, k}, std::move(w), true), Tensor({cout}, std::move(b), true)};
}

ConvBlock make_block(std::size_t cin, std::size_t cout, SeededRng& rng) {
  ConvLayer first = make_conv(cin, cout, 3, rng);
  ConvLayer second = make_conv(cout, cout, 3, rng);
  return {std::move(first), std::move(second)};
}

Tensor run_block(const ConvBlock& b, const Tensor& x) {
  return relu(conv2d(relu(conv2d(x, b.first.weight, b.first.bias, 1)), b.second.weight, b.second.bias, 1));
}

// Decoder block output widths mirror the encoder: widths[3], widths[2], widths[1], widths[0].
Decoder make_decoder(const std::array<std::size_t, 4>& widths, std::size_t out_channels, SeededRng& rng) {
  Decoder d;
  std::size_t cin = widths[3];
  for (std::size_t i = 0; i < kBlocks; ++i) {
    const std::size_t cout = widths[kBlocks - 1 - i];
    d.blocks.push_back(make_block(cin, cout, rng));
    cin = cout;
  }
  d.head = make_conv(cin, out_channels, 1, rng);
  return d;
}

void append(std::vector<Tensor>& out, const ConvLayer& c) {
  out.push_back(c.weight);
  out.push_back(c.bias);
}

void append_names(std::vector<std::string>& out, const std::string& prefix) {
  out.push_back(prefix + ".weight");
  out.push_back(prefix + ".bias");
}

bool style_in_encoder(const Model& m) {
  return m.variant.wiring == Wiring::A_encoder_mixstyle || m.variant.wiring == Wiring::B_dualbranch_encoder_mixstyle;
}

int site_index(const Model& m, std::size_t block) {
  for (std::size_t l = 0; l < m.style_layer_sites.size(); ++l) {
    if (m.style_layer_sites[l] == block) return static_cast<int>(l);
  }
  return -1;
}

}  // namespace

std::string to_string(Wiring w) {
  switch (w) {
    case Wiring::A_encoder_mixstyle:
      return "A_encoder_mixstyle";
    case Wiring::B_dualbranch_encoder_mixstyle:
      return "B_dualbranch_encoder_mixstyle";
    case Wiring::C_decoder_style_aug:
      return "C_decoder_style_aug";
  }
  return "?";
}

std::string to_string(StyleKind k) {
  switch (k) {
    case StyleKind::none:
      return "none";
    case StyleKind::mixstyle:
      return "mixstyle";
    case StyleKind::dsu_noise:
      return "dsu_noise";
    case StyleKind::maxstyle:
      return "maxstyle";
  }
  return "?";
}

Wiring parse_wiring(const std::string& s) {
  for (Wiring w : {Wiring::A_encoder_mixstyle, Wiring::B_dualbranch_encoder_mixstyle, Wiring::C_decoder_style_aug}) {
    if (s == to_string(w) || s == to_string(w).substr(0, 1)) return w;
  }
  throw ConfigurationError("unknown wiring '" + s + "'");
}

StyleKind parse_style_kind(const std::string& s) {
  for (StyleKind k : {StyleKind::none, StyleKind::mixstyle, StyleKind::dsu_noise, StyleKind::maxstyle}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigurationError("unknown style kind '" + s + "'");
}

nlohmann::json to_json(const ModelVariant& v) {
  return {{"wiring", to_string(v.wiring)},
          {"style_kind", to_string(v.style_kind)},
          {"ablation",
           {{"no_style_noise", v.ablation.no_style_noise},
            {"no_style_mixing", v.ablation.no_style_mixing},
            {"no_advopt", v.ablation.no_advopt}}}};
}

ModelVariant variant_from_json(const nlohmann::json& j) {
  ModelVariant v;
  for (const auto& [key, value] : j.items()) {
    if (key == "wiring") {
      v.wiring = parse_wiring(value.get<std::string>());
    } else if (key == "style_kind") {
      v.style_kind = parse_style_kind(value.get<std::string>());
    } else if (key == "ablation") {
      for (const auto& [akey, avalue] : value.items()) {
        if (akey == "no_style_noise") {
          v.ablation.no_style_noise = avalue.get<bool>();
        } else if (akey == "no_style_mixing") {
          v.ablation.no_style_mixing = avalue.get<bool>();
        } else if (akey == "no_advopt") {
          v.ablation.no_advopt = avalue.get<bool>();
        } else {
          throw ConfigurationError("unknown ablation key '" + akey + "'");
        }
      }
    } else {
      throw ConfigurationError("unknown variant key '" + key + "'");
    }
  }
  return v;
}

// ---------------------------------------------------------------------------

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (const auto& b : encoder) {
    append(out, b.first);
    append(out, b.second);
  }
  for (const auto& b : seg_decoder.blocks) {
    append(out, b.first);
    append(out, b.second);
  }
  append(out, seg_decoder.head);
  if (img_decoder) {
    for (const auto& b : img_decoder->blocks) {
      append(out, b.first);
      append(out, b.second);
    }
    append(out, img_decoder->head);
  }
  return out;
}

std::vector<std::string> Model::parameter_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    append_names(out, "encoder." + std::to_string(i) + ".first");
    append_names(out, "encoder." + std::to_string(i) + ".second");
  }
  for (std::size_t i = 0; i < seg_decoder.blocks.size(); ++i) {
    append_names(out, "seg_decoder." + std::to_string(i) + ".first");
    append_names(out, "seg_decoder." + std::to_string(i) + ".second");
  }
  append_names(out, "seg_decoder.head");
  if (img_decoder) {
    for (std::size_t i = 0; i < img_decoder->blocks.size(); ++i) {
      append_names(out, "img_decoder." + std::to_string(i) + ".first");
      append_names(out, "img_decoder." + std::to_string(i) + ".second");
    }
    append_names(out, "img_decoder.head");
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

std::vector<std::size_t> Model::style_layer_channels() const {
  std::vector<std::size_t> out;
  for (std::size_t block : style_layer_sites) {
    if (style_in_encoder(*this)) {
      out.push_back(options.widths[block]);
    } else {
      out.push_back(options.widths[kBlocks - 1 - block]);
    }
  }
  return out;
}

void Model::zero_grad() {
  for (auto& p : parameters()) p.zero_grad();
}

Model build_model(const ModelVariant& variant, std::size_t in_channels, std::size_t classes, SeededRng& rng,
                  const ModelOptions& options) {
  if (classes < 2) throw ValidationError("build_model: need at least 2 classes, got " + std::to_string(classes));
  if (in_channels < 1) throw ValidationError("build_model: need at least one input channel");
  for (std::size_t w : options.widths) {
    if (w == 0) throw ValidationError("build_model: zero channel width");
  }
  const bool wants_decoder = options.reconstruction.value_or(variant.wiring != Wiring::A_encoder_mixstyle);
  if (variant.wiring == Wiring::A_encoder_mixstyle && wants_decoder) {
    throw ConfigurationError("build_model: wiring A has no image decoder; reconstruction was requested");
  }
  if (variant.wiring != Wiring::A_encoder_mixstyle && !wants_decoder) {
    throw ConfigurationError("build_model: wirings B and C require the image decoder");
  }
  if (variant.wiring != Wiring::C_decoder_style_aug &&
      (variant.style_kind == StyleKind::maxstyle || variant.style_kind == StyleKind::dsu_noise)) {
    throw ConfigurationError("build_model: " + to_string(variant.style_kind) +
                             " is a decoder-side augmentation and needs wiring C");
  }

  Model m;
  m.variant = variant;
  m.options = options;
  m.options.reconstruction = wants_decoder;
  m.in_channels = in_channels;
  m.classes = classes;

  std::size_t cin = in_channels;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    m.encoder.push_back(make_block(cin, options.widths[i], rng));
    cin = options.widths[i];
  }
  m.seg_decoder = make_decoder(options.widths, classes, rng);
  if (wants_decoder) m.img_decoder = make_decoder(options.widths, in_channels, rng);

  if (style_in_encoder(m)) {
    m.style_layer_sites = {0, 1, 2};
  } else {
    m.style_layer_sites = {1, 2, 3};
  }
  return m;
}

Tensor apply_style(const Model& m, const Tensor& features, const StyleParams& style, std::size_t layer) {
  switch (m.variant.style_kind) {
    case StyleKind::none:
      return features;
    case StyleKind::mixstyle:
      return mixstyle_transform(features, style, layer);
    case StyleKind::dsu_noise:
    case StyleKind::maxstyle:
      if (!style.gate.at(layer)) return features;
      return maxstyle_transform(features, style, estimate_style_noise_scale(features), layer);
  }
  return features;
}

Tensor encode(const Model& m, const Tensor& x, const StyleParams* style) {
  if (x.rank() != 4) throw DimensionError("encode: expected [N,C,H,W], got " + shape_str(x.shape()));
  if (x.dim(1) != m.in_channels) {
    throw DimensionError("encode: input axis 1 = " + std::to_string(x.dim(1)) + ", model expects " +
                         std::to_string(m.in_channels));
  }
  if (x.dim(2) % 8 || x.dim(3) % 8) {
    throw DimensionError("encode: axes 2,3 (H,W) must be divisible by 8, got " + shape_str(x.shape()));
  }
  const bool styled = style != nullptr && style_in_encoder(m) && m.variant.style_kind != StyleKind::none;
  Tensor h = x;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    h = run_block(m.encoder[i], h);
    if (styled) {
      const int l = site_index(m, i);
      if (l >= 0) h = apply_style(m, h, *style, static_cast<std::size_t>(l));
    }
    if (i + 1 < kBlocks) h = avgpool2x(h);
  }
  return h;
}

namespace {

Tensor run_decoder(const Model& m, const Decoder& d, const Tensor& z, const StyleParams* style) {
  if (z.rank() != 4 || z.dim(1) != m.options.widths[3]) {
    throw DimensionError("decode: latent must be [N," + std::to_string(m.options.widths[3]) + ",h,w], got " +
                         shape_str(z.shape()));
  }
  Tensor h = z;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    h = run_block(d.blocks[i], h);
    if (style) {
      const int l = site_index(m, i);
      if (l >= 0) h = apply_style(m, h, *style, static_cast<std::size_t>(l));
    }
    if (i + 1 < kBlocks) h = upsample_nearest2x(h);
  }
  return conv2d(h, d.head.weight, d.head.bias, 0);
}

}  // namespace

Tensor decode_seg(const Model& m, const Tensor& z) { return run_decoder(m, m.seg_decoder, z, nullptr); }

Tensor decode_img(const Model& m, const Tensor& z, const StyleParams* style) {
  if (!m.img_decoder) throw ConfigurationError("decode_img: model has no image decoder");
  const bool styled = style != nullptr && m.variant.wiring == Wiring::C_decoder_style_aug &&
                      m.variant.style_kind != StyleKind::none;
  return run_decoder(m, *m.img_decoder, z, styled ? style : nullptr);
}

ForwardResult forward_variant(const Model& m, const Tensor& x, const StyleParams* style) {
  ForwardResult r;
  switch (m.variant.wiring) {
    case Wiring::A_encoder_mixstyle:
      r.p_hat = decode_seg(m, encode(m, x, style));
      break;
    case Wiring::B_dualbranch_encoder_mixstyle: {
      const Tensor z_styled = encode(m, x, style);
      r.p_hat = decode_seg(m, z_styled);
      r.x_hat = decode_img(m, style ? encode(m, x) : z_styled);
      break;
    }
    case Wiring::C_decoder_style_aug: {
      const Tensor x_hat = decode_img(m, encode(m, x), style);
      r.p_hat = decode_seg(m, encode(m, x_hat));
      r.x_hat = x_hat;
      break;
    }
  }
  return r;
}

FrozenParameters::FrozenParameters(const Model& m) : params_(m.parameters()) {
  for (auto& p : params_) {
    previous_.push_back(p.requires_grad());
    p.set_requires_grad(false);
  }
}

FrozenParameters::~FrozenParameters() {
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(previous_[i]);
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const Model& m = ckpt.model;
  const auto params = m.parameters();
  const auto names = m.parameter_names();
  nlohmann::json header;
  header["format"] = "maxstyle-checkpoint-1";
  header["variant"] = to_json(m.variant);
  header["in_channels"] = m.in_channels;
  header["classes"] = m.classes;
  header["widths"] = m.options.widths;
  header["reconstruction"] = m.has_image_decoder();
  header["seed"] = ckpt.seed;
  header["epoch"] = ckpt.epoch;
  header["config_hash"] = ckpt.config_hash;
  nlohmann::json plist = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) plist.push_back({{"name", names[i]}, {"shape", params[i].shape()}});
  header["parameters"] = plist;
  const std::string text = header.dump();

  std::ostringstream out(std::ios::binary);
  out.write("MSCK", 4);
  const auto len = static_cast<std::uint32_t>(text.size());
  const char lenbytes[4] = {static_cast<char>(len & 0xff), static_cast<char>((len >> 8) & 0xff),
                            static_cast<char>((len >> 16) & 0xff), static_cast<char>((len >> 24) & 0xff)};
  out.write(lenbytes, 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) write_tns(out, p);
  return out.str();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "MSCK", 4) != 0) throw IoError("checkpoint: bad magic");
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t len = static_cast<std::uint32_t>(u[4]) | (static_cast<std::uint32_t>(u[5]) << 8) |
                            (static_cast<std::uint32_t>(u[6]) << 16) | (static_cast<std::uint32_t>(u[7]) << 24);
  if (bytes.size() < 8 + static_cast<std::size_t>(len)) throw IoError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }

  ModelOptions options;
  options.widths = header.at("widths").get<std::array<std::size_t, 4>>();
  options.reconstruction = header.at("reconstruction").get<bool>();
  SeededRng scratch(0);
  Checkpoint ckpt{build_model(variant_from_json(header.at("variant")), header.at("in_channels").get<std::size_t>(),
                              header.at("classes").get<std::size_t>(), scratch, options),
                  header.at("seed").get<std::uint64_t>(), header.at("epoch").get<std::size_t>(),
                  header.at("config_hash").get<std::string>()};

  std::istringstream in(bytes.substr(8 + len), std::ios::binary);
  auto params = ckpt.model.parameters();
  const auto& plist = header.at("parameters");
  if (plist.size() != params.size()) throw IoError("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor t = read_tns(in);
    if (t.shape() != params[i].shape()) {
      throw IoError("checkpoint: parameter " + plist[i].at("name").get<std::string>() + " has shape " +
                    shape_str(t.shape()) + ", expected " + shape_str(params[i].shape()));
    }
    std::copy(t.data().begin(), t.data().end(), params[i].mutable_data().begin());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace maxstyle
