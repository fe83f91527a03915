#include "cli.hpp"

#include <omp.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "epiguide/checkpoint.hpp"
#include "epiguide/dataio.hpp"
#include "epiguide/error.hpp"
#include "epiguide/pipeline.hpp"
#include "epiguide/robustf.hpp"
#include "epiguide/synthgen.hpp"
#include "epiguide/training.hpp"
#include "epiguide/viz.hpp"

namespace fs = std::filesystem;

namespace epiguide::cli {
namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  int threads = 0;  // 0: OpenMP default

  fs::path out() const {
    if (const char* env = std::getenv("EPIGUIDE_OUT"); env && *env) return env;
    return out_dir;
  }
};

struct GenFlags {
  int instances = 200;
  int categories = 20;
  int views = 5;
  int landmarks = 24;
  double noise = RenderOptions{}.noise_sigma;
  double split = 0.5;
  bool pseudo = false;
};

struct TrainFlags {
  std::string manifest;
  std::string loss = "none";
  double lambda = 1.0;
  Schedule schedule;
  bool epe = false;
  std::string config;
  int image_size = 224;
};

struct EvalFlags {
  std::string manifest;
  std::string checkpoint;
  int k_rerank = 10;
  std::string recall_ks = "1,10,50";
  int overlap_bins = 0;
  int image_size = 224;
};

struct VizFlags {
  std::string manifest;
  std::string checkpoint;
  std::vector<int> pair;
  std::string head = "mean";
  int image_size = 224;
};

struct EstimateFlags {
  std::string correspondences;
  int iters = RansacOptions{}.iterations;
  double threshold = RansacOptions{}.threshold_px2;
};

// Usage problems found after parsing (bad values, missing inputs).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonFiniteActivation:
    case ErrorCode::DegenerateBaseline:
    case ErrorCode::DegenerateConfiguration:
    case ErrorCode::ZeroDenominator:
    case ErrorCode::NoModelFound:
      return kNumeric;
    default:
      return kUsage;
  }
}

std::vector<int> parse_int_list(const std::string& text, const char* flag) {
  std::vector<int> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": not an integer list: " + text);
    }
  }
  if (values.empty()) throw UsageError(std::string(flag) + ": empty list");
  return values;
}

// "s=7,m=32,heads=2,layers=2" (any subset; also mlp and freqs).
void apply_config(const std::string& text, ModelConfig& config) {
  if (text.empty()) return;
  std::stringstream ss(text);
  std::string item;
  const std::map<std::string, int ModelConfig::*> keys{
      {"s", &ModelConfig::s},         {"m", &ModelConfig::m},
      {"heads", &ModelConfig::heads}, {"layers", &ModelConfig::layers},
      {"mlp", &ModelConfig::mlp_width}, {"freqs", &ModelConfig::num_freqs}};
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    const auto key = item.substr(0, eq);
    const auto it = keys.find(key);
    if (eq == std::string::npos || it == keys.end()) {
      throw UsageError("--config: expected key=value with key in s,m,heads,layers,mlp,freqs; got '" + item + "'");
    }
    try {
      config.*(it->second) = std::stoi(item.substr(eq + 1));
    } catch (const std::exception&) {
      throw UsageError("--config: bad value in '" + item + "'");
    }
  }
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string(what) + " is required");
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " not found: " + path);
}

int cmd_gen(const Globals& g, const GenFlags& f, std::ostream& out) {
  BenchmarkOptions options;
  options.n_instances = f.instances;
  options.n_categories = f.categories;
  options.views_per_instance = f.views;
  options.n_landmarks = f.landmarks;
  options.render.noise_sigma = f.noise;
  options.split_fraction = f.split;
  options.pseudo_geometry = f.pseudo;
  const Benchmark bench = generate_benchmark(*g.seed, options);
  write_benchmark(g.out(), bench);
  int train = 0;
  for (const auto& img : bench.images) train += img.train;
  nlohmann::ordered_json j{{"manifest", (g.out() / "manifest.jsonl").string()},
                           {"images", bench.images.size()},
                           {"train_images", train},
                           {"test_images", static_cast<int>(bench.images.size()) - train}};
  out << j.dump() << "\n";
  return kOk;
}

int cmd_train(const Globals& g, const TrainFlags& f, std::ostream& out) {
  require_file(f.manifest, "--manifest");
  const Dataset data = load_dataset(f.manifest, f.image_size);
  ModelConfig config;
  config.s = data.grid.s;
  config.m = data.train.empty() ? config.m : static_cast<int>(data.train.front().features.cols());
  apply_config(f.config, config);
  try {
    config.loss_variant = parse_loss_variant(f.loss);
  } catch (const Error&) {
    throw UsageError("--loss must be one of none, epi, max-epi");
  }
  config.lambda_epi = f.lambda;
  config.epe_enabled = f.epe;
  config.seed = *g.seed;
  config.validate();
  if (config.s != data.grid.s) {
    throw UsageError("--config s=" + std::to_string(config.s) + " but the features have s=" +
                     std::to_string(data.grid.s));
  }

  // Training stays single-threaded whatever --threads says.
  omp_set_num_threads(1);
  TrainingSet set(data.train, data.grid);
  const fs::path dir = g.out();
  fs::create_directories(dir);
  std::string log_text;
  const auto result = train(set, config, f.schedule, nullptr, [&](const EpochLog& log) {
    log_text += log.to_json() + "\n";
  });
  write_text(dir / "train_log.jsonl", log_text);
  save_checkpoint(dir / "checkpoint.epga", result.params);
  out << nlohmann::ordered_json{{"checkpoint", (dir / "checkpoint.epga").string()},
                                {"log", (dir / "train_log.jsonl").string()},
                                {"epochs", result.log.size()},
                                {"unreliable_pairs", set.unreliable_pairs()}}
             .dump()
      << "\n";
  return kOk;
}

int cmd_eval(const Globals& g, const EvalFlags& f, std::ostream& out) {
  require_file(f.manifest, "--manifest");
  if (!f.checkpoint.empty()) require_file(f.checkpoint, "--checkpoint");
  if (f.k_rerank < 0) throw UsageError("--k-rerank must be >= 0");
  if (f.overlap_bins < 0) throw UsageError("--overlap-bins must be >= 0");
  if (g.threads > 0) omp_set_num_threads(g.threads);

  const Dataset data = load_dataset(f.manifest, f.image_size);
  const RetrievalIndex index = build_index(data.test, data.overlaps);
  EvalOptions options;
  options.k_rerank = f.k_rerank;
  options.recall_ks = parse_int_list(f.recall_ks, "--recall-ks");
  options.overlap_bins = f.overlap_bins;

  std::optional<RerankerParams> params;
  std::optional<PairScorer> scorer;
  if (!f.checkpoint.empty()) {
    params = load_checkpoint(f.checkpoint);
    scorer = make_scorer(*params, index, data);
  }
  const EvalReport report = evaluate(index, scorer ? &*scorer : nullptr, options);
  const fs::path dir = g.out();
  fs::create_directories(dir);
  write_text(dir / "eval_report.jsonl", report.to_json());
  write_text(dir / "pr_curves.csv", report.pr_csv());
  out << report.to_json();
  return kOk;
}

int cmd_viz(const Globals& g, const VizFlags& f, std::ostream& out) {
  require_file(f.manifest, "--manifest");
  require_file(f.checkpoint, "--checkpoint");
  if (f.pair.size() != 2) throw UsageError("--pair takes two image ids");
  const Dataset data = load_dataset(f.manifest, f.image_size);
  const RerankerParams params = load_checkpoint(f.checkpoint);
  const int s = params.config().s;
  if (s != data.grid.s) throw UsageError("checkpoint s does not match the features");

  std::vector<TrainingImage> images = data.train;
  images.insert(images.end(), data.test.begin(), data.test.end());
  std::map<int, int> position;
  for (std::size_t i = 0; i < images.size(); ++i) position[images[i].image_id] = static_cast<int>(i);
  for (int id : f.pair) {
    if (!position.contains(id)) throw UsageError("--pair: unknown image id " + std::to_string(id));
  }
  const int a = position[f.pair[0]], b = position[f.pair[1]];
  TrainingSet set(images, data.grid);
  const bool same = images[a].instance_id == images[b].instance_id;

  std::optional<EpeInput> epe;
  if (params.config().epe_enabled) epe = set.epe_input(a, b, same);
  const auto result = forward(params, assemble_tokens(images[a].features, images[b].features, params, epe));
  const auto& maps = result.maps.a12;
  Matrix map;
  if (f.head == "mean") {
    map = Matrix(maps.front().rows(), maps.front().cols());
    for (const auto& m : maps) {
      for (std::size_t i = 0; i < m.size(); ++i) map.values()[i] += m.values()[i] / maps.size();
    }
  } else {
    int h = -1;
    try {
      std::size_t used = 0;
      h = std::stoi(f.head, &used);
      if (used != f.head.size()) h = -1;
    } catch (const std::exception&) {
    }
    if (h < 0 || h >= static_cast<int>(maps.size())) {
      throw UsageError("--head must be 'mean' or an index below " + std::to_string(maps.size()));
    }
    map = maps[h];
  }

  const fs::path dir = g.out();
  fs::create_directories(dir);
  const std::string stem = std::to_string(f.pair[0]) + "_" + std::to_string(f.pair[1]);
  nlohmann::ordered_json j;
  j["attention"] = (dir / ("attention_" + stem + ".pgm")).string();
  write_pgm(j["attention"].get<std::string>(), render_cell_map(map, s));
  // Ground-truth guide only from real poses.
  if (images[a].view && images[b].view) {
    const auto guide = rasterize_guide(relative_fundamental(*images[a].view, *images[b].view),
                                       data.grid, data.grid);
    j["guide"] = (dir / ("guide_" + stem + ".pgm")).string();
    write_pgm(j["guide"].get<std::string>(), render_guide(guide, Direction::OneToTwo));
  } else {
    j["guide"] = nullptr;
  }
  j["match_logit"] = result.match_logit;
  out << j.dump() << "\n";
  return kOk;
}

int cmd_estimate_f(const Globals& g, const EstimateFlags& f, std::ostream& out) {
  require_file(f.correspondences, "--correspondences");
  if (f.iters < 1) throw UsageError("--iters must be >= 1");
  if (!(f.threshold > 0.0)) throw UsageError("--threshold must be > 0");
  const Correspondences pairs = read_correspondences(f.correspondences);
  RansacOptions options{f.iters, f.threshold, g.seed.value_or(0)};

  nlohmann::ordered_json j;
  j["matches"] = pairs.size();
  bool reliable = false;
  try {
    const RobustEstimate est = ransac_fundamental(pairs, options);
    std::vector<double> flat;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) flat.push_back(est.f.matrix()(r, c));
    double sampson = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (est.inlier_mask[i]) sampson += sampson_error(est.f, pairs[i]);
    }
    j["F"] = flat;
    j["inliers"] = est.inlier_count;
    j["mean_inlier_sampson"] = est.inlier_count ? sampson / est.inlier_count : 0.0;
    reliable = est.reliable;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::InsufficientPoints && e.code() != ErrorCode::NoModelFound &&
        e.code() != ErrorCode::DegenerateConfiguration) {
      throw;
    }
    // Too few or degenerate matches: no geometry, which the gate treats as unreliable.
    j["F"] = nullptr;
    j["inliers"] = 0;
    j["mean_inlier_sampson"] = nullptr;
    j["error"] = std::string(to_string(e.code()));
  }
  j["reliable"] = reliable;
  out << j.dump() << "\n";
  return reliable ? kOk : kUnreliable;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Epipolar-guided reranking toolkit on synthetic multi-view benchmarks", "epiguide"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Run seed (required by gen and train)");
  app.add_option("--out-dir", g.out_dir, "Output directory (EPIGUIDE_OUT overrides)");
  app.add_option("--threads", g.threads, "Evaluation threads (0 = OpenMP default)")->check(CLI::NonNegativeNumber);

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic benchmark");
  gen_cmd->add_option("--instances", gen.instances)->check(CLI::PositiveNumber);
  gen_cmd->add_option("--categories", gen.categories)->check(CLI::PositiveNumber);
  gen_cmd->add_option("--views", gen.views)->check(CLI::PositiveNumber);
  gen_cmd->add_option("--landmarks", gen.landmarks)->check(CLI::PositiveNumber);
  gen_cmd->add_option("--noise", gen.noise)->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--split", gen.split, "Train fraction of instances")->check(CLI::Range(0.0, 1.0));
  gen_cmd->add_flag("--pseudo-geometry", gen.pseudo, "Drop poses, emit noisy correspondences");

  TrainFlags tr;
  auto* train_cmd = app.add_subcommand("train", "Train the reranker");
  train_cmd->add_option("--manifest", tr.manifest)->required();
  train_cmd->add_option("--loss", tr.loss, "none | epi | max-epi");
  train_cmd->add_option("--lambda", tr.lambda)->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--epochs-phase1", tr.schedule.epochs_phase1)->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--epochs-phase2", tr.schedule.epochs_phase2)->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--lr-phase1", tr.schedule.lr_phase1)->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr-phase2", tr.schedule.lr_phase2)->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch-size", tr.schedule.batch_size)->check(CLI::PositiveNumber);
  train_cmd->add_flag("--epe", tr.epe, "Epipolar positional encoding");
  train_cmd->add_option("--config", tr.config, "Architecture, e.g. s=7,m=32,heads=2,layers=2");
  train_cmd->add_option("--image-size", tr.image_size, "Pixel size when the manifest has no poses")
      ->check(CLI::PositiveNumber);

  EvalFlags ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate retrieval on the test split");
  eval_cmd->add_option("--manifest", ev.manifest)->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Reranker; omit for global-only ranking");
  eval_cmd->add_option("--k-rerank", ev.k_rerank);
  eval_cmd->add_option("--recall-ks", ev.recall_ks);
  eval_cmd->add_option("--overlap-bins", ev.overlap_bins);
  eval_cmd->add_option("--image-size", ev.image_size)->check(CLI::PositiveNumber);

  VizFlags vz;
  auto* viz_cmd = app.add_subcommand("viz", "Render last-layer cross-attention for a pair");
  viz_cmd->add_option("--manifest", vz.manifest)->required();
  viz_cmd->add_option("--checkpoint", vz.checkpoint)->required();
  viz_cmd->add_option("--pair", vz.pair, "Two image ids")->required()->expected(2);
  viz_cmd->add_option("--head", vz.head, "Head index or 'mean'");
  viz_cmd->add_option("--image-size", vz.image_size)->check(CLI::PositiveNumber);

  EstimateFlags es;
  auto* est_cmd = app.add_subcommand("estimate-f", "Robust fundamental matrix with the reliability gate");
  est_cmd->add_option("--correspondences", es.correspondences)->required();
  est_cmd->add_option("--iters", es.iters);
  est_cmd->add_option("--threshold", es.threshold, "Sampson inlier threshold, px^2");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "epiguide: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if ((gen_cmd->parsed() || train_cmd->parsed()) && !g.seed) throw UsageError("--seed is required");
    if (gen_cmd->parsed()) return cmd_gen(g, gen, out);
    if (train_cmd->parsed()) return cmd_train(g, tr, out);
    if (eval_cmd->parsed()) return cmd_eval(g, ev, out);
    if (viz_cmd->parsed()) return cmd_viz(g, vz, out);
    return cmd_estimate_f(g, es, out);
  } catch (const UsageError& e) {
    err << "epiguide: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    err << "epiguide: " << to_string(e.code()) << ": " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    err << "epiguide: " << e.what() << "\n";
    return kUsage;
  }
}

}  // namespace epiguide::cli
