#include "doctest.h"

#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "epiguide/error.hpp"
#include "epiguide/minimodel.hpp"
#include "epiguide/viz.hpp"
#include "gradcheck.hpp"

using namespace epiguide;

namespace {

Matrix random_features(std::mt19937_64& rng, int rows, int cols) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = nd(rng);
  return m;
}

RerankerParams perturbed(const ModelConfig& c, std::uint64_t seed, double sd = 0.3) {
  RerankerParams p = RerankerParams::initialize(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sd);
  for (auto& t : p.tensors())
    for (double& v : t.values()) v += nd(rng);
  return p;
}

}  // namespace

TEST_CASE("ModelConfig validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = ModelConfig{};
  c.epe_enabled = true;
  c.num_freqs = 6;  // 36 > 32
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK_NOTHROW(ModelConfig::full_scale().validate());
  CHECK(ModelConfig::full_scale().heads == 4);
  CHECK(ModelConfig::full_scale().layers == 6);
}

TEST_CASE("frequency_encode") {
  const auto z = frequency_encode({0.0, 0.0}, 4, 32);
  for (int k = 0; k < 16; ++k) CHECK(z[k] == (k % 2 == 0 ? 0.0 : 1.0));
  for (int k = 16; k < 32; ++k) CHECK(z[k] == 0.0);
  CHECK_THROWS_AS(frequency_encode({0.1, 0.2}, 9, 32), Error);

  std::vector<std::vector<double>> codes;
  for (int i = 0; i < 49; ++i) {
    const auto e = frequency_encode({(i % 7 + 0.5) / 7.0, (i / 7 + 0.5) / 7.0}, 4, 32);
    for (double v : e) CHECK((v >= -1.0 && v <= 1.0));
    codes.push_back(e);
  }
  double gap = 1e9;
  for (int a = 0; a < 49; ++a)
    for (int b = a + 1; b < 49; ++b) {
      double d = 0.0;
      for (int k = 0; k < 32; ++k) d += (codes[a][k] - codes[b][k]) * (codes[a][k] - codes[b][k]);
      gap = std::min(gap, std::sqrt(d));
    }
  CHECK(gap > 1e-3);
}

TEST_CASE("assemble_tokens") {
  ModelConfig c;
  std::mt19937_64 rng(1);
  const auto p = perturbed(c, 2);
  const Matrix f1 = random_features(rng, 49, 32), f2 = random_features(rng, 49, 32);
  const auto seq = assemble_tokens(f1, f2, p);
  CHECK(seq.tokens.rows() == 100);
  CHECK(c.tokens() == 100);

  SUBCASE("zero features, zero beta, no positional code") {
    ModelConfig z = c;
    z.num_freqs = 0;
    RerankerParams q = perturbed(z, 3);
    for (double& v : q.global(RerankerParams::Beta1).values()) v = 0.0;
    for (double& v : q.global(RerankerParams::Beta2).values()) v = 0.0;
    const auto t = assemble_tokens(Matrix(49, 32), Matrix(49, 32), q);
    const TokenLayout layout{49};
    for (int k = 0; k < 32; ++k) {
      CHECK(t.tokens(layout.cls(), k) == q.global(RerankerParams::Cls)(0, k));
      CHECK(t.tokens(layout.sep(), k) == q.global(RerankerParams::Sep)(0, k));
    }
    for (int i = 0; i < 49; ++i)
      for (int k = 0; k < 32; ++k) {
        CHECK(t.tokens(layout.first1() + i, k) == 0.0);
        CHECK(t.tokens(layout.first2() + i, k) == 0.0);
      }
  }

  SUBCASE("swapping the images swaps blocks and beta") {
    RerankerParams q = p;
    std::swap(q.global(RerankerParams::Beta1), q.global(RerankerParams::Beta2));
    const auto swapped = assemble_tokens(f2, f1, q);
    const TokenLayout layout{49};
    for (int i = 0; i < 49; ++i)
      for (int k = 0; k < 32; ++k) {
        CHECK(swapped.tokens(layout.first1() + i, k) == seq.tokens(layout.first2() + i, k));
        CHECK(swapped.tokens(layout.first2() + i, k) == seq.tokens(layout.first1() + i, k));
      }
  }

  CHECK_THROWS_AS(assemble_tokens(Matrix(48, 32), f2, p), Error);
  ModelConfig e = c;
  e.epe_enabled = true;
  CHECK_THROWS_AS(assemble_tokens(f1, f2, RerankerParams::initialize(e)), Error);
}

TEST_CASE("forward with zero weights") {
  ModelConfig c;
  RerankerParams p = RerankerParams::zeros(c);
  p.global(RerankerParams::HeadBias)(0, 0) = 0.37;
  std::mt19937_64 rng(4);
  const auto r = forward(p, assemble_tokens(random_features(rng, 49, 32), random_features(rng, 49, 32), p));
  CHECK(r.match_logit == 0.37);
  for (const auto& m : r.maps.a12)
    for (double v : m.values()) CHECK(v == 0.0);
  for (const auto& m : r.maps.a21)
    for (double v : m.values()) CHECK(v == 0.0);
}

TEST_CASE("forward: permuting image-2 tokens permutes the maps") {
  ModelConfig c;
  const auto p = perturbed(c, 5);
  std::mt19937_64 rng(6);
  const auto seq = assemble_tokens(random_features(rng, 49, 32), random_features(rng, 49, 32), p);
  std::vector<int> perm(49);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  TokenSequence moved = seq;
  const TokenLayout layout{49};
  for (int i = 0; i < 49; ++i)
    for (int k = 0; k < 32; ++k) moved.tokens(layout.first2() + i, k) = seq.tokens(layout.first2() + perm[i], k);
  const auto a = forward(p, seq), b = forward(p, moved);
  double worst = 0.0;
  for (int h = 0; h < c.heads; ++h)
    for (int i = 0; i < 49; ++i)
      for (int j = 0; j < 49; ++j) {
        worst = std::max(worst, std::abs(b.maps.a12[h](i, j) - a.maps.a12[h](i, perm[j])));
        worst = std::max(worst, std::abs(b.maps.a21[h](j, i) - a.maps.a21[h](perm[j], i)));
      }
  CHECK(worst < 1e-12);
  CHECK(std::abs(a.match_logit - b.match_logit) < 1e-12);
}

TEST_CASE("forward: maps render as a 7x7 grid of 7x7 patches") {
  ModelConfig c;
  const auto p = perturbed(c, 7);
  std::mt19937_64 rng(8);
  const auto r = forward(p, assemble_tokens(random_features(rng, 49, 32), random_features(rng, 49, 32), p));
  CHECK(r.maps.a12.size() == 2);
  CHECK(r.maps.a12[0].rows() == 49);
  CHECK(r.maps.a12[0].cols() == 49);
  const auto img = render_cell_map(r.maps.a12[0], 7);
  CHECK(img.width == 55);
  CHECK(img.height == 55);
}

TEST_CASE("score_pair equals forward().match_logit") {
  ModelConfig c;
  const auto p = perturbed(c, 9);
  std::mt19937_64 rng(10);
  const auto seq = assemble_tokens(random_features(rng, 49, 32), random_features(rng, 49, 32), p);
  CHECK(score_pair(p, seq) == forward(p, seq).match_logit);
}

TEST_CASE("backward: lambda 0 on a zero model only reaches the head") {
  ModelConfig c;
  c.loss_variant = LossVariant::Epi;
  c.lambda_epi = 0.0;
  RerankerParams p = RerankerParams::zeros(c);
  std::mt19937_64 rng(11);
  const auto fw = forward(p, assemble_tokens(random_features(rng, 49, 32), random_features(rng, 49, 32), p));
  const GridSpec g(7, 224, 224);
  const auto guide = rasterize_guide(random_rank2_matrix(3), g, g);
  const auto loss = pair_loss(c, fw, 1, &guide);
  CHECK(loss.attention_applied);
  CHECK(loss.grads.d_a12.empty());
  const auto grad = backward(p, fw.cache, loss.grads);
  const std::size_t head_bias = c.layers * RerankerParams::kLayerSlots + RerankerParams::HeadBias;
  const std::size_t head_weight = c.layers * RerankerParams::kLayerSlots + RerankerParams::HeadWeight;
  for (std::size_t t = 0; t < grad.params.tensors().size(); ++t) {
    if (t == head_bias || t == head_weight) continue;
    for (double v : grad.params.tensors()[t].values()) CHECK(v == 0.0);
  }
  CHECK(grad.params.tensors()[head_bias](0, 0) == -0.5);
}

TEST_CASE("backward: doubling lambda doubles the attention gradient") {
  ModelConfig c;
  c.loss_variant = LossVariant::Epi;
  const auto p = perturbed(c, 12);
  std::mt19937_64 rng(13);
  const auto fw = forward(p, assemble_tokens(random_features(rng, 49, 32), random_features(rng, 49, 32), p));
  const GridSpec g(7, 224, 224);
  const auto guide = rasterize_guide(random_rank2_matrix(4), g, g);
  auto attention_grad = [&](double lambda) {
    ModelConfig cl = c;
    cl.lambda_epi = lambda;
    auto loss = pair_loss(cl, fw, 1, &guide);
    loss.grads.d_logit = 0.0;
    return backward(p, fw.cache, loss.grads);
  };
  const auto one = attention_grad(0.5), two = attention_grad(1.0);
  for (std::size_t t = 0; t < one.params.tensors().size(); ++t)
    for (std::size_t k = 0; k < one.params.tensors()[t].size(); ++k)
      CHECK(two.params.tensors()[t].values()[k] == 2.0 * one.params.tensors()[t].values()[k]);
}

TEST_CASE("backward matches finite differences (s=3, m=8, 2 heads, 2 layers)") {
  for (auto v : {LossVariant::Epi, LossVariant::MaxEpi}) {
    const auto r = gradcheck::full_model(v, 21);
    CHECK(r.worst_param < 1e-4);
    CHECK(r.worst_token < 1e-4);
  }
}

TEST_CASE("pair_loss skips the attention term without a guide") {
  ModelConfig c;
  c.loss_variant = LossVariant::Epi;
  const auto p = perturbed(c, 14);
  std::mt19937_64 rng(15);
  const auto fw = forward(p, assemble_tokens(random_features(rng, 49, 32), random_features(rng, 49, 32), p));
  const auto loss = pair_loss(c, fw, 0, nullptr);
  CHECK_FALSE(loss.attention_applied);
  CHECK(loss.total == loss.match_bce);
}

TEST_CASE("epipolar positional encoding") {
  ModelConfig c;
  c.epe_enabled = true;
  const auto p = perturbed(c, 16);
  std::mt19937_64 rng(17);
  const Matrix f1 = random_features(rng, 49, 32), f2 = random_features(rng, 49, 32);
  EpeInput in{random_rank2_matrix(8), std::nullopt, std::nullopt, GridSpec(7, 224, 224), GridSpec(7, 224, 224), 99};
  const auto angles = epipolar_angles(in);
  CHECK(angles.size() == 98);
  for (double a : angles) CHECK((a > -std::numbers::pi - 1e-12 && a <= std::numbers::pi + 1e-12));
  const auto with = assemble_tokens(f1, f2, p, in);
  ModelConfig plain = c;
  plain.epe_enabled = false;
  RerankerParams q = p;
  q.mutable_config() = plain;
  const auto without = assemble_tokens(f1, f2, q);
  // Only dims [4F, 6F) carry the angle code.
  const TokenLayout layout{49};
  for (int i = 0; i < 49; ++i)
    for (int k = 0; k < 32; ++k) {
      const double d = with.tokens(layout.first1() + i, k) - without.tokens(layout.first1() + i, k);
      if (k < 16 || k >= 24) CHECK(d == 0.0);
    }
  CHECK(assemble_tokens(f1, f2, p, in).tokens == with.tokens);
}
