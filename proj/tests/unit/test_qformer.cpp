#include "gama/errors.hpp"
#include "gama/optim.hpp"
#include "gama/qformer.hpp"
#include "gama/tokenizer.hpp"
#include "../support.hpp"

#include <doctest.h>

#include <cmath>
#include <map>

using namespace gama;
using gama::testing::random_matrix;
using gama::testing::zero;

namespace {

constexpr std::size_t kAudioDim = 6;

QFormerConfig small_config() {
  QFormerConfig c;
  c.num_queries = 4;
  c.dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.ffn_mult = 2;
  c.audio_dim = kAudioDim;
  c.max_text = 32;
  return c;
}

struct Fixture {
  Rng rng;
  ParamStore store;
  AudioQFormer qf;
  explicit Fixture(std::uint64_t seed, QFormerConfig cfg = small_config())
      : rng(seed), qf(AudioQFormer::create(store, "qf", cfg, rng)) {}
  Tensor audio(std::size_t rows) { return Tensor::constant(random_matrix(rows, kAudioDim, rng)); }
};

const std::vector<int> kCaption = {100, 111, 103, 32, 98, 97, 114, 107};

}  // namespace

TEST_CASE("query output has Q rows for any audio length") {
  Fixture f(1);
  for (std::size_t t : {1u, 7u, 100u}) {
    const Tensor out = f.qf.query_output(f.audio(t));
    CHECK(out.rows() == 4);
    CHECK(out.cols() == 8);
  }
  QFormerConfig desk;
  desk.audio_dim = kAudioDim;
  Fixture d(2, desk);
  NoGradGuard ng;
  CHECK(d.qf.query_output(d.audio(100)).rows() == 32);
}

TEST_CASE("cross-attention sits on every n-th layer only") {
  QFormerConfig c = small_config();
  c.depth = 5;
  c.cross_attention_freq = 2;
  Fixture f(3, c);
  for (std::size_t l = 0; l < 5; ++l) CHECK(f.qf.has_cross_attention(l) == (l % 2 == 0));
}

TEST_CASE("zero cross-attention value projections sever the audio path") {
  Fixture f(4);
  for (auto& layer : f.qf.layers()) {
    if (layer.cross_attn) zero(layer.cross_attn->v.weight);
  }
  const Matrix a = f.qf.query_output(f.audio(5)).value();
  const Matrix b = f.qf.query_output(f.audio(9)).value();
  CHECK(a == b);
}

TEST_CASE("unimodal mask keeps queries blind to text") {
  Fixture f(5);
  const Tensor audio = f.audio(6);
  const Matrix alone = f.qf.query_output(audio).value();
  const QFormerOutput joint = f.qf.forward(audio, std::span<const int>(kCaption), MaskMode::unimodal);
  CHECK(alone.max_abs_diff(joint.query_out.value()) < 1e-12);
  REQUIRE(joint.text_out.has_value());
  CHECK(joint.text_out->rows() == kCaption.size());
}

TEST_CASE("mask layouts") {
  const Matrix bi = qformer_mask(2, 2, MaskMode::bidirectional);
  CHECK(bi == Matrix(4, 4));
  const Matrix uni = qformer_mask(2, 2, MaskMode::unimodal);
  const Matrix mc = qformer_mask(2, 2, MaskMode::multimodal_causal);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      const bool qi = i < 2, qj = j < 2;
      CHECK((uni(i, j) == 0.0) == (qi == qj));
      const bool allowed = qi ? qj : (qj || j <= i);
      CHECK((mc(i, j) == 0.0) == allowed);
    }
  }
}

TEST_CASE("modes that read text require it") {
  Fixture f(6);
  const Tensor audio = f.audio(3);
  CHECK_THROWS_AS(f.qf.forward(audio, std::nullopt, MaskMode::bidirectional), ContractError);
  CHECK_THROWS_AS(f.qf.forward(audio, std::nullopt, MaskMode::multimodal_causal), ContractError);
  CHECK_THROWS_AS(f.qf.forward(audio, std::span<const int>(), MaskMode::bidirectional), ContractError);
  CHECK_NOTHROW(f.qf.forward(audio, std::nullopt, MaskMode::unimodal));
  CHECK_THROWS_AS(f.qf.forward(Tensor::constant(random_matrix(3, 5, f.rng)), std::nullopt, MaskMode::unimodal),
                  ShapeError);
  CHECK_THROWS_AS(f.qf.forward(Tensor::constant(Matrix(0, kAudioDim)), std::nullopt, MaskMode::unimodal),
                  ValidationError);
}

TEST_CASE("ATC examples") {
  const Tensor tau = Tensor::constant(Matrix{{0.07}});
  Fixture f(7);
  const Tensor q = f.qf.query_output(f.audio(4));
  const Tensor t = f.qf.text_embedding(kCaption);
  CHECK(atc_loss({q}, {t}, tau).item() == 0.0);

  const Real tiny = atc_loss_from_similarity(Tensor::constant(Matrix{{1.0, 0.0}, {0.0, 1.0}}),
                                             Tensor::constant(Matrix{{0.01}}))
                        .item();
  CHECK(tiny >= 0.0);
  CHECK(tiny < 1e-40);

  const Real flat =
      atc_loss_from_similarity(Tensor::constant(Matrix{{0.3, 0.3}, {0.3, 0.3}}), tau).item();
  CHECK(flat == doctest::Approx(std::log(2.0)).epsilon(1e-14));

  CHECK_THROWS_AS(atc_loss({q}, {}, tau), ValidationError);
  CHECK_THROWS_AS(atc_loss({q}, {Tensor::constant(Matrix(1, 8))}, tau), ValidationError);
  CHECK_THROWS_AS(atc_loss_from_similarity(Tensor::constant(Matrix(2, 3)), tau), ShapeError);
}

TEST_CASE("ATC is invariant to rescaling the embeddings") {
  // Scaling by 3.7 rounds every input, so the normalised vectors can differ in
  // the last bit; the loss must agree to within a few ulps.
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const Tensor tau = Tensor::constant(Matrix{{0.07}});
    std::vector<Tensor> qs, ts, qs_scaled, ts_scaled;
    for (int i = 0; i < 3; ++i) {
      const Matrix q = random_matrix(4, 8, rng), t = random_matrix(1, 8, rng);
      qs.push_back(Tensor::constant(q));
      ts.push_back(Tensor::constant(t));
      Matrix q2 = q, t2 = t;
      q2.eigen() *= 3.7;
      t2.eigen() *= 3.7;
      qs_scaled.push_back(Tensor::constant(q2));
      ts_scaled.push_back(Tensor::constant(t2));
    }
    const Real base = atc_loss(qs, ts, tau).item();
    const Real scaled = atc_loss(qs_scaled, ts_scaled, tau).item();
    CHECK(std::abs(base - scaled) <= 1e-14 * base);
  }
}

TEST_CASE("ATM examples") {
  CHECK(atm_loss(Tensor::constant(Matrix{{0.0}}), true).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(atm_loss(Tensor::constant(Matrix{{0.0}}), false).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(atm_loss(Tensor::constant(Matrix{{10.0}}), true).item() < 5e-5);
  CHECK(atm_loss(Tensor::constant(Matrix{{std::log(3.0)}}), true).item() ==
        doctest::Approx(-std::log(0.75)).epsilon(1e-14));
  Fixture f(9);
  const Tensor logit = f.qf.atm_logit(f.audio(3), kCaption);
  CHECK(logit.rows() == 1);
  CHECK(logit.cols() == 1);
}

TEST_CASE("AGTG examples") {
  Fixture f(10);
  const Tensor audio = f.audio(5);
  SUBCASE("uniform logits give ln V") {
    zero(f.store.at("qf.lm_head.weight"));
    zero(f.store.at("qf.lm_head.bias"));
    for (std::size_t len : {1u, 3u, 8u}) {
      const std::vector<int> cap(kCaption.begin(), kCaption.begin() + static_cast<long>(len));
      CHECK(agtg_loss(f.qf, audio, cap).item() == doctest::Approx(std::log(261.0)).epsilon(1e-13));
      CHECK(agtg_token_losses(f.qf, audio, cap).size() == len + 1);
    }
  }
  SUBCASE("saturated correct logit drives the token loss to zero") {
    zero(f.store.at("qf.lm_head.weight"));
    Tensor bias = f.store.at("qf.lm_head.bias");
    zero(bias);
    const std::vector<int> cap = {42};
    bias.mutable_value()(0, 42) = 40.0;
    const auto losses = agtg_token_losses(f.qf, audio, cap);
    REQUIRE(losses.size() == 2);
    CHECK(losses[0] < 1e-15);
  }
  SUBCASE("targets end in EOS") {
    const Tensor logits = f.qf.agtg_logits(audio, kCaption);
    std::vector<int> targets(kCaption);
    targets.push_back(tok::kEos);
    CHECK(agtg_loss(f.qf, audio, kCaption).item() == doctest::Approx(cross_entropy(logits, targets).item()).epsilon(1e-15));
  }
  CHECK_THROWS_AS(agtg_loss(f.qf, audio, {}), ValidationError);
  CHECK_THROWS_AS(agtg_token_losses(f.qf, audio, {}), ValidationError);
}

TEST_CASE("AGTG is causal: perturbing token t leaves earlier rows untouched") {
  Fixture f(11);
  const Tensor audio = f.audio(4);
  const Matrix base = f.qf.agtg_logits(audio, kCaption).value();
  const auto base_losses = agtg_token_losses(f.qf, audio, kCaption);
  for (std::size_t t = 0; t < kCaption.size(); ++t) {
    std::vector<int> pert(kCaption);
    pert[t] = (pert[t] + 57) % 256;
    const Matrix logits = f.qf.agtg_logits(audio, pert).value();
    const auto losses = agtg_token_losses(f.qf, audio, pert);
    // Row r reads [DEC, c_1..c_r]; caption index t sits at input row t + 1.
    for (std::size_t r = 0; r <= t; ++r) {
      CHECK(logits.eigen().row(r) == base.eigen().row(r));
    }
    for (std::size_t r = 0; r < t; ++r) CHECK(losses[r] == base_losses[r]);
    CHECK((logits.eigen().row(t + 1) - base.eigen().row(t + 1)).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("stage-two loss covers exactly the caption tokens") {
  Fixture f(12);
  DecoderConfig dc;
  dc.dim = 8;
  dc.depth = 1;
  dc.heads = 2;
  dc.ffn_mult = 2;
  dc.max_len = 64;
  dc.lora = false;
  const Decoder dec = Decoder::create(f.store, "dec", dc, f.rng);
  const Linear proj = Linear::create(f.store, "proj", 8, 8, f.rng);
  const Tensor audio = f.audio(5);

  for (std::size_t len : {1u, 2u, 8u}) {
    const std::vector<int> cap(kCaption.begin(), kCaption.begin() + static_cast<long>(len));
    const Tensor prefix = proj(f.qf.query_output(audio));
    std::vector<Tensor> parts{prefix};
    parts.push_back(dec.embed(cap));
    const Matrix logits = dec.logits(concat_rows(parts)).value();
    // Rows Q-1 .. Q+L-2 predict the caption; appending c_L cannot change them.
    Real expect = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t row = 4 - 1 + i;
      const Real m = logits.eigen().row(row).maxCoeff();
      const Real lse = m + std::log((logits.eigen().row(row).array() - m).exp().sum());
      expect += lse - logits(row, static_cast<std::size_t>(cap[i]));
    }
    expect /= static_cast<Real>(len);
    CHECK(stage2_lm_loss(f.qf, proj, dec, audio, cap).item() == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK_THROWS_AS(stage2_lm_loss(f.qf, proj, dec, audio, {}), ValidationError);

  SUBCASE("uniform decoder head gives ln V") {
    zero(f.store.at("dec.lm_head.weight"));
    zero(f.store.at("dec.lm_head.bias"));
    CHECK(stage2_lm_loss(f.qf, proj, dec, audio, kCaption).item() ==
          doctest::Approx(std::log(261.0)).epsilon(1e-13));
  }
  SUBCASE("gradient reaches the query tokens and matches central differences") {
    f.store.set_trainable_if([](const std::string& n) { return n == "qf.queries"; });
    auto loss = [&] { return stage2_lm_loss(f.qf, proj, dec, audio, kCaption); };
    const GradientMap g = backward(loss(), f.store);
    REQUIRE(g.size() == 1);
    CHECK(g[0].second.eigen().cwiseAbs().maxCoeff() > 1e-6);
    f.store.zero_grad();
    const GradCheckReport rep = grad_check(loss, f.store);
    CHECK(rep.passed);
  }
}

TEST_CASE("stage-one losses are non-negative and differentiable") {
  Fixture f(13);
  std::vector<QFormerPairSample> batch;
  for (int i = 0; i < 3; ++i) {
    batch.push_back({f.audio(3 + i), std::vector<int>(kCaption.begin(), kCaption.begin() + 3 + i)});
  }
  Rng neg(1);
  const Stage1Losses l = qformer_stage1_loss(f.qf, batch, neg);
  CHECK(l.atc.item() >= 0.0);
  CHECK(l.atm.item() >= 0.0);
  CHECK(l.agtg.item() >= 0.0);
  CHECK(l.total.item() == doctest::Approx(l.atc.item() + l.atm.item() + l.agtg.item()).epsilon(1e-15));

  Rng single(1);
  const Stage1Losses one = qformer_stage1_loss(f.qf, {batch[0]}, single);
  CHECK(one.atc.item() == 0.0);
  CHECK_THROWS_AS(qformer_stage1_loss(f.qf, {}, single), ValidationError);

  f.store.set_trainable_if([](const std::string& n) {
    return n == "qf.queries" || n == "qf.temperature" || n == "qf.itm_head.weight";
  });
  auto loss = [&] {
    Rng r(5);
    return qformer_stage1_loss(f.qf, batch, r).total;
  };
  const GradCheckReport rep = grad_check(loss, f.store);
  CHECK(rep.passed);
}

TEST_CASE("caption sampling frequencies") {
  CaptionSet always{"orig", {"a", "b"}, 1.0};
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) CHECK(sample_training_caption(always, rng) == "orig");

  CaptionSet one{"orig", {"r"}, 0.4};
  std::size_t rewrites = 0;
  for (int i = 0; i < 10000; ++i) rewrites += sample_training_caption(one, rng) == "r";
  CHECK(std::abs(rewrites / 10000.0 - 0.6) <= 0.02);

  CaptionSet four{"orig", {"a", "b", "c", "d"}, 0.4};
  std::map<std::string, std::size_t> counts;
  for (int i = 0; i < 10000; ++i) ++counts[sample_training_caption(four, rng)];
  CHECK(std::abs(counts["orig"] / 10000.0 - 0.4) <= 0.02);
  for (const char* r : {"a", "b", "c", "d"}) CHECK(std::abs(counts[r] / 10000.0 - 0.15) <= 0.02);

  CHECK(sample_training_caption(CaptionSet{"orig", {}, 1.0}, rng) == "orig");
  CHECK_THROWS_AS(sample_training_caption(CaptionSet{"orig", {}, 0.4}, rng), ValidationError);
  CHECK_THROWS_AS(sample_training_caption(CaptionSet{"orig", {"a"}, 1.5}, rng), ValidationError);
  CHECK_THROWS_AS(sample_training_caption(CaptionSet{"orig", {"a"}, -0.1}, rng), ValidationError);
}

TEST_CASE("q-former config validation") {
  QFormerConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.num_queries = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.cross_attention_freq = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.temperature = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.depth = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
