#include "doctest.h"

#include "epiguide/error.hpp"
#include "epiguide/pipeline.hpp"
#include "epiguide/synthgen.hpp"
#include "epiguide/training.hpp"

using namespace epiguide;

namespace {

Dataset small_dataset(std::uint64_t seed, bool pseudo = false) {
  BenchmarkOptions o;
  o.n_instances = 12;
  o.n_categories = 3;
  o.pseudo_geometry = pseudo;
  return dataset_from_benchmark(generate_benchmark(seed, o));
}

Schedule short_schedule() {
  Schedule s;
  s.epochs_phase1 = 1;
  s.epochs_phase2 = 1;
  return s;
}

}  // namespace

TEST_CASE("train is deterministic") {
  const Dataset d = small_dataset(1);
  ModelConfig c;
  c.seed = 5;
  c.loss_variant = LossVariant::Epi;
  TrainingSet a(d.train, d.grid), b(d.train, d.grid);
  const auto ra = train(a, c, short_schedule());
  const auto rb = train(b, c, short_schedule());
  CHECK(ra.params == rb.params);
  REQUIRE(ra.log.size() == 2);
  CHECK(ra.log[1].attention_loss > 0.0);
  CHECK(ra.log[0].attention_loss == 0.0);  // phase 1 trains the match head only
}

TEST_CASE("loss none and lambda 0 follow the same trajectory") {
  const Dataset d = small_dataset(2);
  ModelConfig none;
  none.seed = 3;
  ModelConfig zero = none;
  zero.loss_variant = LossVariant::Epi;
  zero.lambda_epi = 0.0;
  TrainingSet a(d.train, d.grid), b(d.train, d.grid);
  const auto ra = train(a, none, short_schedule());
  const auto rb = train(b, zero, short_schedule());
  CHECK(ra.params.tensors() == rb.params.tensors());
}

TEST_CASE("phases can run in separate calls") {
  const Dataset d = small_dataset(3);
  ModelConfig c;
  c.seed = 9;
  c.loss_variant = LossVariant::MaxEpi;
  TrainingSet set(d.train, d.grid);
  const auto whole = train(set, c, short_schedule());
  Schedule p1 = short_schedule();
  p1.epochs_phase2 = 0;
  Schedule p2 = short_schedule();
  p2.epochs_phase1 = 0;
  p2.first_epoch = 1;
  const auto first = train(set, c, p1);
  const auto second = train(set, c, p2, &first.params);
  CHECK(second.params == whole.params);
}

TEST_CASE("init with another architecture is rejected") {
  const Dataset d = small_dataset(4);
  ModelConfig c;
  ModelConfig other = c;
  other.layers = 1;
  const auto init = RerankerParams::initialize(other);
  TrainingSet set(d.train, d.grid);
  CHECK_THROWS_AS(train(set, c, short_schedule(), &init), Error);
}

TEST_CASE("match BCE falls on the default benchmark") {
  BenchmarkOptions o;
  const Dataset d = dataset_from_benchmark(generate_benchmark(7, o));
  ModelConfig c;
  c.seed = 7;
  Schedule s;
  s.epochs_phase2 = 0;
  TrainingSet set(d.train, d.grid);
  const auto r = train(set, c, s);
  REQUIRE(r.log.size() == static_cast<std::size_t>(s.epochs_phase1));
  for (const auto& l : r.log) MESSAGE("epoch " << l.epoch << " match BCE " << l.match_bce);
  CHECK(r.log.back().match_bce < r.log.front().match_bce);
}

TEST_CASE("TrainingSet geometry") {
  SUBCASE("poses give exact guides") {
    const Dataset d = small_dataset(5);
    TrainingSet set(d.train, d.grid);
    const auto& g = set.geometry(0, 1);
    CHECK(g.from_pose);
    REQUIRE(g.guide);
    CHECK(g.f->matrix() == relative_fundamental(*d.train[0].view, *d.train[1].view).matrix());
    // Reverse lookup is the transpose.
    const auto& r = set.geometry(1, 0);
    CHECK((r.f->matrix() - g.f->transposed().matrix()).norm() < 1e-15);
  }
  SUBCASE("pseudo-geometry goes through the gate") {
    const Dataset d = small_dataset(6, true);
    for (const auto& img : d.train) CHECK_FALSE(img.view);
    TrainingSet set(d.train, d.grid);
    int with_guide = 0;
    for (int b = 1; b < 5; ++b) {
      const auto& g = set.geometry(0, b);
      CHECK_FALSE(g.from_pose);
      with_guide += g.guide.has_value();
      if (g.unreliable) CHECK_FALSE(g.guide);
    }
    CHECK(with_guide > 0);
  }
  SUBCASE("random rank-2 F for non-matches") {
    const Dataset d = small_dataset(7);
    TrainingSet set(d.train, d.grid);
    int other = 0;
    while (d.train[other].instance_id == d.train[0].instance_id) ++other;
    const auto e1 = set.epe_input(0, other, false);
    const auto e2 = set.epe_input(0, other, false);
    CHECK(e1.f == e2.f);
    CHECK_FALSE(e1.view1);
    CHECK(rank_ratio(e1.f.matrix()) < 1e-12);
  }
}

TEST_CASE("attention mass helper") {
  const Dataset d = small_dataset(8);
  TrainingSet set(d.test, d.grid);
  const auto pairs = matching_pairs(d.test);
  const auto mass = attention_mass_on_pairs(RerankerParams::initialize(ModelConfig{}), set, pairs);
  CHECK(mass.rows > 0);
  // Near-uniform attention at initialization.
  CHECK(mass.concentration() == doctest::Approx(1.0).epsilon(0.1));
}
