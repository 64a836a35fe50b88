#include "gama/encoder.hpp"
#include "gama/errors.hpp"
#include "gama/model.hpp"
#include "../reference.hpp"
#include "../support.hpp"

#include <doctest.h>

#include <utility>

using namespace gama;
using gama::testing::random_matrix;
using gama::testing::zero;
namespace ref = gama::reference;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.depth = 3;
  c.dim = 8;
  c.heads = 2;
  c.ffn_mult = 2;
  c.patch_dim = 6;
  c.max_tokens = 10;
  c.mid_j = 1;
  c.mid_k = 2;
  c.tag_vocab = {"dog", "rain", "car"};
  return c;
}

ref::M embedded(const AstEncoder& enc, const ref::M& patches, const ParamStore& store) {
  ref::M x = ref::linear(patches, enc.patch_embed());
  x += ref::of(store.at("enc.pos_embed")).topRows(patches.rows());
  return x;
}

ref::M oracle_layer(const AstEncoder::Block& b, const ref::M& x) {
  const ref::M h = ref::layer_norm(x, b.ln1);
  const ref::M a = x + ref::attention(h, h, b.attn);
  return a + ref::ffn(ref::layer_norm(a, b.ln2), b.ffn);
}

// Reorders the heads of one attention layer; the output must not change.
void permute_heads(MultiHeadAttention& a, const std::vector<std::size_t>& perm) {
  const std::size_t dh = a.q.out_dim() / a.heads;
  auto rows = [&](Tensor& t) {
    const Matrix old = t.value();
    for (std::size_t h = 0; h < a.heads; ++h) {
      for (std::size_t r = 0; r < dh; ++r) {
        for (std::size_t c = 0; c < old.cols(); ++c) t.mutable_value()(h * dh + r, c) = old(perm[h] * dh + r, c);
      }
    }
  };
  auto bias = [&](Tensor& t) {
    const Matrix old = t.value();
    for (std::size_t h = 0; h < a.heads; ++h) {
      for (std::size_t r = 0; r < dh; ++r) t.mutable_value()(0, h * dh + r) = old(0, perm[h] * dh + r);
    }
  };
  for (Linear* l : {&a.q, &a.k, &a.v}) {
    rows(l->weight);
    bias(l->bias);
  }
  const Matrix old = a.o.weight.value();
  for (std::size_t r = 0; r < old.rows(); ++r) {
    for (std::size_t h = 0; h < a.heads; ++h) {
      for (std::size_t c = 0; c < dh; ++c) a.o.weight.mutable_value()(r, h * dh + c) = old(r, perm[h] * dh + c);
    }
  }
}

}  // namespace

TEST_CASE("encoder matches a plain re-implementation layer by layer") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    ParamStore store;
    const AstEncoder enc = AstEncoder::create(store, "enc", small_config(), rng);
    const Matrix patches = random_matrix(7, 6, rng);
    const LayerFeatureBundle b = enc.encode(Tensor::constant(patches));
    REQUIRE(b.per_layer.size() == 3);
    ref::M x = embedded(enc, patches.eigen(), store);
    auto& blocks = const_cast<AstEncoder&>(enc).blocks();
    for (std::size_t l = 0; l < 3; ++l) {
      x = oracle_layer(blocks[l], x);
      CHECK((b.layer(l + 1).value().eigen() - x).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("zeroed blocks pass the embedded input through every layer") {
  Rng rng(3);
  ParamStore store;
  AstEncoder enc = AstEncoder::create(store, "enc", small_config(), rng);
  for (auto& b : enc.blocks()) {
    for (Tensor* t : {&b.ln1.gain, &b.ln1.bias, &b.ln2.gain, &b.ln2.bias, &b.attn.o.weight, &b.attn.o.bias,
                      &b.ffn.fc2.weight, &b.ffn.fc2.bias}) {
      zero(*t);
    }
  }
  const Matrix patches = random_matrix(5, 6, rng);
  const LayerFeatureBundle b = enc.encode(Tensor::constant(patches));
  const ref::M x = embedded(enc, patches.eigen(), store);
  for (std::size_t l = 1; l <= 3; ++l) CHECK(b.layer(l).value().eigen() == x);
}

TEST_CASE("bundle shapes and populated layers") {
  Rng rng(4);
  ParamStore store;
  const AstEncoder enc = AstEncoder::create(store, "enc", small_config(), rng);
  for (std::size_t t : {1u, 4u, 10u}) {
    const LayerFeatureBundle b = enc.encode(Tensor::constant(random_matrix(t, 6, rng)));
    CHECK(b.last_index == 3);
    CHECK(b.j == 1);
    CHECK(b.k == 2);
    for (std::size_t l = 1; l <= 3; ++l) {
      CHECK(b.layer(l).rows() == t);
      CHECK(b.layer(l).cols() == 8);
    }
    CHECK_THROWS_AS(b.layer(0), ValidationError);
    CHECK_THROWS_AS(b.layer(4), ValidationError);
  }
  CHECK_THROWS_AS(enc.encode(Tensor::constant(Matrix(0, 6))), ValidationError);
  CHECK_THROWS_AS(enc.encode(Tensor::constant(random_matrix(11, 6, rng))), ValidationError);
  CHECK_THROWS_AS(enc.encode(Tensor::constant(random_matrix(3, 5, rng))), ShapeError);
}

TEST_CASE("desk encoder exposes layers 4, 8 and 12") {
  const ModelConfig cfg = ModelConfig::desk();
  Rng rng(5);
  ParamStore store;
  const AstEncoder enc = AstEncoder::create(store, "enc", cfg.encoder, rng);
  NoGradGuard ng;
  const LayerFeatureBundle b = enc.encode(Tensor::constant(random_matrix(12, cfg.encoder.patch_dim, rng)));
  CHECK(b.j == 4);
  CHECK(b.k == 8);
  CHECK(b.last_index == 12);
  for (std::size_t l : {4u, 8u, 12u}) CHECK(b.layer(l).rows() == 12);
  CHECK(b.last().value() == b.layer(12).value());
}

TEST_CASE("permuting attention heads leaves the output unchanged") {
  Rng rng(6);
  ParamStore store;
  AstEncoder enc = AstEncoder::create(store, "enc", small_config(), rng);
  const Matrix patches = random_matrix(6, 6, rng);
  const Matrix before = enc.encode(Tensor::constant(patches)).last().value();
  for (auto& b : enc.blocks()) permute_heads(b.attn, {1, 0});
  const Matrix after = enc.encode(Tensor::constant(patches)).last().value();
  CHECK(before.max_abs_diff(after) < 1e-12);
}

TEST_CASE("select_tags examples") {
  const std::vector<std::string> vocab = {"a", "b", "c"};
  CHECK(select_tags(Matrix{{0.0, 0.0, 0.0}}, vocab, 5, 0.6).empty());

  const auto one = select_tags(Matrix{{-10.0, 10.0, -10.0}}, vocab, 5, 0.5);
  REQUIRE(one.size() == 1);
  CHECK(one[0].label == "b");
  CHECK(one[0].score == doctest::Approx(1.0).epsilon(1e-4));
  CHECK_FALSE(one[0].span.has_value());

  const auto top2 = select_tags(Matrix{{2.0, 1.0, 0.9}}, vocab, 2, 0.5);
  REQUIRE(top2.size() == 2);
  CHECK(top2[0].label == "a");
  CHECK(top2[1].label == "b");
  CHECK(top2[0].score > top2[1].score);

  const auto tied = select_tags(Matrix{{1.0, 3.0, 3.0}}, vocab, 3, 0.5);
  REQUIRE(tied.size() == 3);
  CHECK(tied[0].label == "b");
  CHECK(tied[1].label == "c");
  CHECK(tied[2].label == "a");

  CHECK(select_tags(Matrix{{1.0, 1.0, 1.0}}, vocab, 0, 0.5).empty());
  CHECK_THROWS_AS(select_tags(Matrix{{1.0}}, {}, 1, 0.5), ConfigError);
  CHECK_THROWS_AS(select_tags(Matrix{{1.0, 2.0}}, vocab, 1, 0.5), ShapeError);
}

TEST_CASE("classify_tags respects top_k and threshold") {
  Rng rng(8);
  ParamStore store;
  const AstEncoder enc = AstEncoder::create(store, "enc", small_config(), rng);
  const LayerFeatureBundle b = enc.encode(Tensor::constant(random_matrix(4, 6, rng)));
  const Tensor logits = enc.tag_logits(b.last());
  CHECK(logits.rows() == 1);
  CHECK(logits.cols() == 3);
  const auto all = enc.classify_tags(b.last(), 3, 0.0);
  CHECK(all.size() == 3);
  for (std::size_t i = 1; i < all.size(); ++i) CHECK(all[i - 1].score >= all[i].score);
  CHECK(enc.classify_tags(b.last(), 1, 0.0).size() == 1);
  CHECK(enc.classify_tags(b.last(), 3, 1.0).empty());

  EncoderConfig c = small_config();
  c.tag_vocab.clear();
  ParamStore s2;
  const AstEncoder bare = AstEncoder::create(s2, "enc", c, rng);
  const Tensor last = bare.encode(Tensor::constant(random_matrix(2, 6, rng))).last();
  CHECK_THROWS_AS(bare.classify_tags(last), ConfigError);
  CHECK_THROWS_AS(bare.tag_logits(last), ConfigError);
}

TEST_CASE("encoder config validation") {
  EncoderConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.depth = 2;  // needs depth >= k + 1
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.aggregation = false;
  CHECK_NOTHROW(c.validate());
  c = small_config();
  c.mid_j = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.mid_j = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  Rng rng(1);
  ParamStore store;
  CHECK_THROWS_AS(AstEncoder::create(store, "enc", c, rng), ConfigError);
}
