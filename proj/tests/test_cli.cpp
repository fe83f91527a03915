#include "doctest.h"

#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "cli.hpp"
#include "epiguide/checkpoint.hpp"
#include "epiguide/dataio.hpp"
#include "epiguide/pipeline.hpp"
#include "epiguide/viz.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "scratch_dir.hpp"

using namespace epiguide;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// The report's first line holds the headline metrics.
json first_line(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line;
  std::getline(in, line);
  return json::parse(line);
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  return files;
}

const std::vector<std::string> kTinyTrain = {"--epochs-phase1", "1", "--epochs-phase2", "1",
                                             "--config", "m=32,heads=2,layers=1,mlp=32"};

Run gen(const ScratchDir& d, std::vector<std::string> extra = {}) {
  std::vector<std::string> args = {"--seed", "1", "--out-dir", d.path().string(), "gen", "--instances", "4"};
  args.insert(args.end(), extra.begin(), extra.end());
  return invoke(args);
}

Run train(const ScratchDir& data, const fs::path& out, std::vector<std::string> extra) {
  std::vector<std::string> args = {"--seed", "3", "--out-dir", out.string(), "train",
                                   "--manifest", (data / "manifest.jsonl").string()};
  args.insert(args.end(), kTinyTrain.begin(), kTinyTrain.end());
  args.insert(args.end(), extra.begin(), extra.end());
  return invoke(args);
}

Correspondences project_pairs(std::uint64_t seed, int n) {
  std::mt19937_64 rng(seed);
  const auto views = oracle::random_view_pair(rng);
  Correspondences c;
  for (const Vec3& p : oracle::covisible_points(views, n, rng)) {
    const Vec2 a = views.v1.project(p), b = views.v2.project(p);
    c.push_back({a.x(), a.y(), b.x(), b.y()});
  }
  return c;
}

}  // namespace

TEST_CASE("cli: usage errors") {
  CHECK(invoke({"gen", "--instances", "4"}).code == cli::kUsage);  // no seed
  CHECK(invoke({"--seed", "1", "gen", "--bogus"}).code == cli::kUsage);
  CHECK(invoke({}).code == cli::kUsage);
  const auto r = invoke({"--seed", "1", "train", "--manifest", "/no/such/manifest.jsonl"});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("/no/such/manifest.jsonl") != std::string::npos);
}

TEST_CASE("cli gen") {
  ScratchDir a("gen_a"), b("gen_b");
  const auto r = gen(a, {"--views", "5"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["images"] == 20);
  CHECK(j["train_images"] == 10);
  CHECK(j["test_images"] == 10);

  const auto records = load_manifest(a / "manifest.jsonl");
  std::set<int> train, test;
  for (const auto& rec : records) (rec.split == "train" ? train : test).insert(rec.instance_id);
  CHECK(train.size() == 2);
  CHECK(test.size() == 2);
  for (int i : train) CHECK_FALSE(test.contains(i));

  REQUIRE(gen(b, {"--views", "5"}).code == 0);
  CHECK(tree(a.path()) == tree(b.path()));
}

TEST_CASE("cli train / eval / viz") {
  ScratchDir data("pipe_data"), out("pipe_out");
  REQUIRE(gen(data).code == 0);
  const auto none = out / "none", epi0 = out / "epi0", epi = out / "epi", again = out / "again";

  REQUIRE(train(data, none, {"--loss", "none"}).code == 0);
  REQUIRE(train(data, epi0, {"--loss", "epi", "--lambda", "0"}).code == 0);
  REQUIRE(train(data, epi, {"--loss", "epi", "--lambda", "1"}).code == 0);
  REQUIRE(train(data, again, {"--loss", "epi", "--lambda", "1"}).code == 0);

  SUBCASE("none and epi with lambda 0 give identical checkpoints") {
    CHECK(slurp(none / "checkpoint.epga") == slurp(epi0 / "checkpoint.epga"));
    CHECK(slurp(none / "checkpoint.epga") != slurp(epi / "checkpoint.epga"));
  }
  SUBCASE("training is reproducible") {
    CHECK(tree(epi) == tree(again));
    std::istringstream log(slurp(epi / "train_log.jsonl"));
    int lines = 0;
    for (std::string l; std::getline(log, l); ++lines) CHECK(json::parse(l).contains("match_bce"));
    CHECK(lines == 2);
  }
  SUBCASE("eval report keys, determinism, library parity") {
    const std::string manifest = (data / "manifest.jsonl").string();
    const std::string ckpt = (epi / "checkpoint.epga").string();
    const auto e1 = invoke({"--out-dir", (out / "e1").string(), "eval", "--manifest", manifest, "--checkpoint", ckpt,
                         "--overlap-bins", "3"});
    const auto e2 = invoke({"--out-dir", (out / "e2").string(), "eval", "--manifest", manifest, "--checkpoint", ckpt,
                         "--overlap-bins", "3"});
    REQUIRE(e1.code == 0);
    CHECK(tree(out / "e1") == tree(out / "e2"));
    const auto report = first_line(out / "e1" / "eval_report.jsonl");
    for (const char* key : {"R@1", "R@10", "R@50", "mAP"}) CHECK(report.contains(key));
    CHECK(fs::exists(out / "e1" / "pr_curves.csv"));

    const Dataset d = load_dataset(manifest);
    const auto index = build_index(d.test, d.overlaps);
    const auto params = load_checkpoint(ckpt);
    const auto scorer = make_scorer(params, index, d);
    EvalOptions o;
    o.overlap_bins = 3;
    CHECK(evaluate(index, &scorer, o).to_json() == slurp(out / "e1" / "eval_report.jsonl"));
  }
  SUBCASE("constant model leaves the global ranking alone") {
    ModelConfig c = load_checkpoint(epi / "checkpoint.epga").config();
    save_checkpoint(out / "zero.epga", RerankerParams::zeros(c));
    const std::string manifest = (data / "manifest.jsonl").string();
    REQUIRE(invoke({"--out-dir", (out / "g").string(), "eval", "--manifest", manifest}).code == 0);
    REQUIRE(invoke({"--out-dir", (out / "z").string(), "eval", "--manifest", manifest, "--checkpoint",
                 (out / "zero.epga").string()})
                .code == 0);
    const auto g = first_line(out / "g" / "eval_report.jsonl");
    const auto z = first_line(out / "z" / "eval_report.jsonl");
    for (const char* key : {"R@1", "R@10", "R@50", "mAP"}) CHECK(g[key] == z[key]);
  }
  SUBCASE("viz writes 55x55 maps matching the library renderer") {
    const auto records = load_manifest(data / "manifest.jsonl");
    const int a = records[0].image_id, b = records[1].image_id;
    const auto r = invoke({"--out-dir", (out / "v").string(), "viz", "--manifest", (data / "manifest.jsonl").string(),
                        "--checkpoint", (epi / "checkpoint.epga").string(), "--pair", std::to_string(a),
                        std::to_string(b), "--head", "0"});
    REQUIRE(r.code == 0);
    const auto j = json::parse(r.out);
    const std::string pgm = slurp(j["attention"].get<std::string>());
    CHECK(pgm.rfind("P2\n55 55\n255\n", 0) == 0);
    CHECK(slurp(j["guide"].get<std::string>()).rfind("P2\n55 55\n255\n", 0) == 0);

    // Reference: recompute head 0 through the library and render it.
    const Dataset d = load_dataset(data / "manifest.jsonl");
    std::vector<TrainingImage> all = d.train;
    all.insert(all.end(), d.test.begin(), d.test.end());
    const TrainingImage* ia = nullptr;
    const TrainingImage* ib = nullptr;
    for (const auto& img : all) {
      if (img.image_id == a) ia = &img;
      if (img.image_id == b) ib = &img;
    }
    REQUIRE((ia && ib));
    const auto params = load_checkpoint(epi / "checkpoint.epga");
    const auto fwd = forward(params, assemble_tokens(ia->features, ib->features, params, std::nullopt));
    CHECK(pgm == to_pgm(render_cell_map(fwd.maps.a12[0], 7)));
    CHECK(j["match_logit"].get<double>() == fwd.match_logit);

    CHECK(invoke({"--out-dir", (out / "v").string(), "viz", "--manifest", (data / "manifest.jsonl").string(),
               "--checkpoint", (epi / "checkpoint.epga").string(), "--pair", std::to_string(a), "--head", "0"})
              .code == cli::kUsage);
  }
}

TEST_CASE("cli estimate-f") {
  ScratchDir dir("estf");
  write_text(dir / "few.json", correspondences_json(project_pairs(1, 15)));
  write_text(dir / "clean.json", correspondences_json(project_pairs(2, 80)));

  const auto few = invoke({"--seed", "1", "estimate-f", "--correspondences", (dir / "few.json").string()});
  CHECK(few.code == cli::kUnreliable);
  CHECK(json::parse(few.out)["reliable"] == false);

  const auto clean = invoke({"--seed", "1", "estimate-f", "--correspondences", (dir / "clean.json").string()});
  REQUIRE(clean.code == cli::kOk);
  const auto j = json::parse(clean.out);
  CHECK(j["reliable"] == true);
  CHECK(j["inliers"] == 80);
  CHECK(j["mean_inlier_sampson"].get<double>() < 1e-12);
  CHECK(invoke({"--seed", "1", "estimate-f", "--correspondences", (dir / "clean.json").string()}).out == clean.out);

  CHECK(invoke({"estimate-f", "--correspondences", (dir / "missing.json").string()}).code == cli::kUsage);
}
