#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "maxstyle/errors.hpp"
#include "maxstyle/network.hpp"
#include "support.hpp"

using namespace maxstyle;

namespace {

const ModelVariant kC{Wiring::C_decoder_style_aug, StyleKind::maxstyle, {}};
const ModelVariant kA{Wiring::A_encoder_mixstyle, StyleKind::mixstyle, {}};
const ModelVariant kB{Wiring::B_dualbranch_encoder_mixstyle, StyleKind::mixstyle, {}};

ModelOptions small() {
  ModelOptions o;
  o.widths = {4, 8, 8, 8};
  return o;
}

Model make(const ModelVariant& v, std::uint64_t seed, const ModelOptions& o = small()) {
  SeededRng rng(seed);
  return build_model(v, 1, 4, rng, o);
}

bool same_params(const Model& a, const Model& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].shape() != pb[i].shape() || !test::bitwise_equal(pa[i].data(), pb[i].data())) return false;
  }
  return true;
}

Tensor images(std::uint64_t seed, std::size_t n = 3) {
  SeededRng rng(seed);
  return test::random_tensor(rng, {n, 1, 16, 16}, 0.0, 1.0);
}

}  // namespace

TEST(BuildModel, SameSeedSameParameters) {
  EXPECT_TRUE(same_params(make(kC, 3), make(kC, 3)));
  EXPECT_FALSE(same_params(make(kC, 3), make(kC, 4)));
}

TEST(BuildModel, ImageDecoderPresence) {
  EXPECT_FALSE(make(kA, 1).has_image_decoder());
  EXPECT_TRUE(make(kB, 1).has_image_decoder());
  EXPECT_TRUE(make(kC, 1).has_image_decoder());
}

TEST(BuildModel, DefaultParameterCount) {
  // Per block: 3x3 cin->cout and 3x3 cout->cout with biases. Encoder
  // 1-16-32-64-64 = 2480 + 13888 + 55424 + 73856 = 145648; each decoder
  // 64-64-64-32-16 = 73856 + 73856 + 27712 + 6944 = 182368; 1x1 heads
  // 16*4+4 = 68 (segmentation) and 16*1+1 = 17 (image).
  EXPECT_EQ(make(kC, 1, ModelOptions{}).parameter_count(), 145648u + 2 * 182368u + 68u + 17u);
  EXPECT_EQ(make(kA, 1, ModelOptions{}).parameter_count(), 145648u + 182368u + 68u);
}

TEST(BuildModel, StyleSitesAndChannels) {
  const Model c = make(kC, 1), a = make(kA, 1);
  EXPECT_EQ(c.style_layer_sites, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(c.style_layer_channels(), (std::vector<std::size_t>{8, 8, 4}));
  EXPECT_EQ(a.style_layer_sites, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(a.style_layer_channels(), (std::vector<std::size_t>{4, 8, 8}));
  EXPECT_EQ(c.parameters().size(), c.parameter_names().size());
}

TEST(BuildModel, RejectsInconsistentOptions) {
  SeededRng rng(1);
  ModelOptions o = small();
  o.reconstruction = true;
  EXPECT_THROW(build_model(kA, 1, 4, rng, o), ConfigurationError);
  o.reconstruction = false;
  EXPECT_THROW(build_model(kC, 1, 4, rng, o), ConfigurationError);
  EXPECT_THROW(build_model(kC, 1, 1, rng, small()), ValidationError);
}

TEST(Encode, DeterministicAndShaped) {
  const Model m = make(kC, 2);
  const Tensor x = images(1);
  const Tensor z1 = encode(m, x), z2 = encode(m, x);
  EXPECT_EQ(z1.shape(), (Shape{3, 8, 2, 2}));
  EXPECT_TRUE(test::bitwise_equal(z1.data(), z2.data()));
}

TEST(Encode, WiringCIgnoresStyle) {
  const Model m = make(kC, 2);
  const Tensor x = images(2);
  SeededRng rng(3);
  const StyleParams p = sample_style_params(rng, 3, m.style_layer_channels(), 1.0);
  EXPECT_TRUE(test::bitwise_equal(encode(m, x, &p).data(), encode(m, x).data()));
}

TEST(Encode, GatesOffEqualsUnstyled) {
  const Model m = make(kA, 2);
  const Tensor x = images(3);
  SeededRng rng(4);
  const StyleParams off = sample_style_params(rng, 3, m.style_layer_channels(), 0.0);
  EXPECT_LE(test::max_abs_diff(encode(m, x, &off).data(), encode(m, x).data()), 1e-6);
  const StyleParams on = sample_style_params(rng, 3, m.style_layer_channels(), 1.0);
  EXPECT_GT(test::max_abs_diff(encode(m, x, &on).data(), encode(m, x).data()), 1e-6);
}

TEST(Encode, ShapeErrors) {
  const Model m = make(kC, 2);
  EXPECT_THROW(encode(m, Tensor::zeros({1, 1, 12, 16})), DimensionError);
  EXPECT_THROW(encode(m, Tensor::zeros({1, 2, 16, 16})), DimensionError);
  EXPECT_THROW(encode(m, Tensor::zeros({1, 16, 16})), DimensionError);
  EXPECT_THROW(decode_seg(m, Tensor::zeros({1, 3, 2, 2})), DimensionError);
  EXPECT_THROW(decode_img(make(kA, 2), Tensor::zeros({1, 8, 2, 2})), ConfigurationError);
}

TEST(DecodeSeg, DeterministicFullResolutionFinite) {
  const Model m = make(kC, 5, ModelOptions{});
  const Tensor z = encode(m, images(5, 2));
  const Tensor a = decode_seg(m, z), b = decode_seg(m, z);
  EXPECT_EQ(a.shape(), (Shape{2, 4, 16, 16}));
  EXPECT_TRUE(test::bitwise_equal(a.data(), b.data()));

  SeededRng rng(6);
  for (int draw = 0; draw < 100; ++draw) {
    const Tensor zr = test::random_tensor(rng, {1, 64, 1, 1}, -2.0, 2.0);
    const Tensor logits = decode_seg(m, zr);
    for (float v : logits.data()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(DecodeImg, GateAndSelfStyleReductions) {
  const Model m = make(kC, 7);
  const Tensor z = encode(m, images(7));
  const Tensor plain = decode_img(m, z);
  EXPECT_EQ(plain.shape(), (Shape{3, 1, 16, 16}));

  SeededRng rng(8);
  const StyleParams off = sample_style_params(rng, 3, m.style_layer_channels(), 0.0);
  EXPECT_TRUE(test::bitwise_equal(decode_img(m, z, &off).data(), plain.data()));

  StyleParams self = sample_style_params(rng, 3, m.style_layer_channels(), 1.0);
  for (float& v : self.lambda_mix.mutable_data()) v = 1.0f;
  for (auto& t : self.eps_gamma) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
  for (auto& t : self.eps_beta) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
  std::iota(self.donor.begin(), self.donor.end(), std::size_t{0});
  EXPECT_LE(test::max_abs_diff(decode_img(m, z, &self).data(), plain.data()), 1e-4);
}

TEST(ForwardVariant, WiringContracts) {
  const Tensor x = images(9);
  const Model c = make(kC, 9);
  const ForwardResult rc = forward_variant(c, x);
  ASSERT_TRUE(rc.x_hat.has_value());
  EXPECT_TRUE(test::bitwise_equal(rc.p_hat.data(), decode_seg(c, encode(c, *rc.x_hat)).data()));
  EXPECT_TRUE(test::bitwise_equal(rc.x_hat->data(), decode_img(c, encode(c, x)).data()));

  const ForwardResult ra = forward_variant(make(kA, 9), x);
  EXPECT_FALSE(ra.x_hat.has_value());
  EXPECT_EQ(ra.p_hat.shape(), (Shape{3, 4, 16, 16}));
}

TEST(ForwardVariant, BReconstructsFromCleanLatentDeterministically) {
  const Tensor x = images(10);
  const Model b = make(kB, 10);
  SeededRng r1(11), r2(11);
  const StyleParams p1 = sample_style_params(r1, 3, b.style_layer_channels(), 1.0);
  const StyleParams p2 = sample_style_params(r2, 3, b.style_layer_channels(), 1.0);
  const ForwardResult a = forward_variant(b, x, &p1), c = forward_variant(b, x, &p2);
  EXPECT_TRUE(test::bitwise_equal(a.p_hat.data(), c.p_hat.data()));
  EXPECT_TRUE(test::bitwise_equal(a.x_hat->data(), c.x_hat->data()));
  EXPECT_TRUE(test::bitwise_equal(a.x_hat->data(), decode_img(b, encode(b, x)).data()));
}

TEST(FrozenParameters, RestoresFlags) {
  const Model m = make(kC, 12);
  for (const Tensor& p : m.parameters()) ASSERT_TRUE(p.requires_grad());
  {
    FrozenParameters frozen(m);
    for (const Tensor& p : m.parameters()) EXPECT_FALSE(p.requires_grad());
  }
  for (const Tensor& p : m.parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(Checkpoint, RoundTrip) {
  Checkpoint ck{make(kC, 13), 13, 4, "abc123"};
  const std::string bytes = serialize_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 4), "MSCK");
  const Checkpoint back = deserialize_checkpoint(bytes);
  EXPECT_TRUE(same_params(ck.model, back.model));
  EXPECT_EQ(back.model.variant, ck.model.variant);
  EXPECT_EQ(back.model.options.widths, ck.model.options.widths);
  EXPECT_EQ(back.seed, 13u);
  EXPECT_EQ(back.epoch, 4u);
  EXPECT_EQ(back.config_hash, "abc123");
  EXPECT_EQ(serialize_checkpoint(back), bytes);

  const auto path = std::filesystem::temp_directory_path() / "maxstyle_test_ckpt.ckpt";
  save_checkpoint(path, ck);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path)), bytes);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptBytes) {
  const std::string bytes = serialize_checkpoint({make(kC, 14), 0, 0, ""});
  EXPECT_THROW(deserialize_checkpoint("XXXX" + bytes.substr(4)), IoError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 6)), IoError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 10)), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), IoError);
}

TEST(Variant, StringAndJsonRoundTrip) {
  for (Wiring w : {Wiring::A_encoder_mixstyle, Wiring::B_dualbranch_encoder_mixstyle, Wiring::C_decoder_style_aug})
    EXPECT_EQ(parse_wiring(to_string(w)), w);
  for (StyleKind k : {StyleKind::none, StyleKind::mixstyle, StyleKind::dsu_noise, StyleKind::maxstyle})
    EXPECT_EQ(parse_style_kind(to_string(k)), k);
  const ModelVariant v{Wiring::C_decoder_style_aug, StyleKind::maxstyle, {true, false, true}};
  EXPECT_EQ(variant_from_json(to_json(v)), v);
  EXPECT_THROW(parse_wiring("D"), ConfigurationError);
  nlohmann::json j = to_json(v);
  j["extra"] = 1;
  EXPECT_THROW(variant_from_json(j), ConfigurationError);
}
