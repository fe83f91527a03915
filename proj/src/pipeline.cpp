#include "epiguide/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <memory>
#include <mutex>
#include <sstream>
#include <tuple>

#include "json.hpp"

#include "epiguide/dataio.hpp"
#include "epiguide/error.hpp"

namespace epiguide {

Dataset dataset_from_benchmark(const Benchmark& bench) {
  Dataset d;
  d.grid = bench.grid;
  for (const auto& img : bench.images) {
    TrainingImage t{img.image_id, img.instance_id, img.category_id, img.features, std::nullopt,
                    img.correspondences};
    if (!bench.options.pseudo_geometry) t.view = img.view;
    (img.train ? d.train : d.test).push_back(std::move(t));
    d.overlaps[img.image_id] = img.overlaps;
  }
  return d;
}

Dataset load_dataset(const std::filesystem::path& manifest, int image_size) {
  const auto records = load_manifest(manifest);
  const auto dir = manifest.parent_path();
  Dataset d;
  std::optional<int> s;
  for (const auto& r : records) {
    const Tensor t = read_tensor(dir / r.feature_path);
    if (t.dims.size() != 2) {
      throw Error(ErrorCode::SchemaViolation, "features of image " + std::to_string(r.image_id) + " are not 2-D");
    }
    TrainingImage img{r.image_id, r.instance_id, r.category_id, t.to_matrix(), r.pose, {}};
    const int cells = img.features.rows();
    int side = 1;
    while (side * side < cells) ++side;
    if (side * side != cells || (s && *s != side)) {
      throw Error(ErrorCode::ShapeMismatch, "image " + std::to_string(r.image_id) + " has " +
                                                std::to_string(cells) + " cells; expected a common s^2");
    }
    s = side;
    if (r.correspondences_path) img.correspondences = read_pair_correspondences(dir / *r.correspondences_path);
    if (r.overlaps) d.overlaps[r.image_id] = *r.overlaps;
    if (r.pose) d.grid = GridSpec(side, r.pose->width(), r.pose->height());
    (r.split == "train" ? d.train : d.test).push_back(std::move(img));
  }
  if (s && d.grid.s != *s) d.grid = GridSpec(*s, image_size, image_size);
  if (!s) d.grid = GridSpec(7, image_size, image_size);
  return d;
}

RetrievalIndex build_index(const std::vector<TrainingImage>& images,
                           const std::map<int, std::map<int, double>>& overlaps) {
  RetrievalIndex index;
  for (const auto& img : images) {
    IndexEntry e{img.image_id, img.instance_id, global_descriptor(img.features), img.features, {}};
    if (auto it = overlaps.find(img.image_id); it != overlaps.end()) e.overlaps = it->second;
    index.add(std::move(e));
  }
  return index;
}

namespace {

std::vector<TrainingImage> without_poses(std::vector<TrainingImage> images) {
  for (auto& img : images) img.view.reset();
  return images;
}

}  // namespace

EpeScorer::EpeScorer(const RerankerParams& params, const std::vector<TrainingImage>& images,
                     GridSpec grid, RansacOptions ransac)
    : params_(params), set_(without_poses(images), grid, ransac) {
  for (std::size_t i = 0; i < set_.images().size(); ++i) position_[set_.images()[i].image_id] = static_cast<int>(i);
}

double EpeScorer::operator()(int query_id, int candidate_id) {
  const auto qa = position_.find(query_id), cb = position_.find(candidate_id);
  if (qa == position_.end() || cb == position_.end()) {
    throw Error(ErrorCode::UnknownQuery, "pair (" + std::to_string(query_id) + ", " +
                                             std::to_string(candidate_id) + ") not in the scorer's images");
  }
  const auto& imgs = set_.images();
  const EpeInput epe = set_.epe_input(qa->second, cb->second, true);
  return score_pair(params_, assemble_tokens(imgs[qa->second].features, imgs[cb->second].features, params_, epe));
}

PairScorer make_scorer(const RerankerParams& params, const RetrievalIndex& index, const Dataset& data) {
  if (!params.config().epe_enabled) return model_scorer(params, index);
  // The geometry cache is not thread-safe; serialize lookups.
  auto scorer = std::make_shared<EpeScorer>(params, data.test, data.grid);
  auto lock = std::make_shared<std::mutex>();
  return [scorer, lock](int q, int c) {
    std::lock_guard<std::mutex> guard(*lock);
    return (*scorer)(q, c);
  };
}

EvalReport evaluate(const RetrievalIndex& index, const PairScorer* scorer, const EvalOptions& options) {
  EvalReport report;
  const auto ids = index.ids();
  report.rankings = rank_all(index, ids);
  if (scorer && options.k_rerank > 0) report.rankings = rerank_all(report.rankings, options.k_rerank, *scorer);
  report.truth = instance_ground_truth(index);
  for (int k : options.recall_ks) report.recall[k] = recall_at_k(report.rankings, report.truth, k);
  report.mean_ap = mean_average_precision(report.rankings, report.truth);
  if (options.overlap_bins > 0) {
    const auto per_query = query_overlaps(index, report.truth);
    double low = 0.0, high = 1.0;
    if (options.overlap_range) {
      std::tie(low, high) = *options.overlap_range;
    } else if (!per_query.empty()) {
      // Bounds of the observed scores; a degenerate spread falls back to [0, 1].
      auto [lo, hi] = std::minmax_element(per_query.begin(), per_query.end(),
                                          [](const auto& a, const auto& b) { return a.second < b.second; });
      if (lo->second < hi->second) std::tie(low, high) = std::pair{lo->second, hi->second};
    }
    report.breakdown =
        overlap_breakdown(report.rankings, report.truth, per_query, options.overlap_bins, low, high);
  }
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json metrics;
  metrics["block"] = "retrieval";
  metrics["queries"] = rankings.size();
  for (const auto& [k, r] : recall) metrics["R@" + std::to_string(k)] = r;
  metrics["mAP"] = mean_ap;
  std::string out = metrics.dump() + "\n";
  if (breakdown) {
    nlohmann::ordered_json b;
    b["block"] = "overlap_breakdown";
    b["excluded"] = breakdown->excluded;
    b["bins"] = nlohmann::ordered_json::array();
    for (const auto& bin : breakdown->bins) {
      b["bins"].push_back({{"low", bin.low}, {"high", bin.high}, {"count", bin.count}, {"R@1", bin.recall_at_1}});
    }
    out += b.dump() + "\n";
  }
  return out;
}

namespace {

// Shortest text that parses back to the same double.
std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string EvalReport::pr_csv() const {
  std::ostringstream out;
  out << "query_id,rank,precision,recall\n";
  for (const auto& r : rankings) {
    const auto it = truth.find(r.query_id);
    if (it == truth.end() || it->second.empty()) continue;
    for (const auto& p : pr_curve(r, it->second)) {
      out << r.query_id << ',' << p.rank << ',' << shortest(p.precision) << ',' << shortest(p.recall) << '\n';
    }
  }
  return out.str();
}

std::vector<std::pair<int, int>> matching_pairs(const std::vector<TrainingImage>& images) {
  std::vector<std::pair<int, int>> out;
  for (int a = 0; a < static_cast<int>(images.size()); ++a) {
    for (int b = 0; b < static_cast<int>(images.size()); ++b) {
      if (a != b && images[a].instance_id == images[b].instance_id) out.emplace_back(a, b);
    }
  }
  return out;
}

}  // namespace epiguide
