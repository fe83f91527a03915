#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "epiguide/evalkit.hpp"
#include "epiguide/synthgen.hpp"
#include "epiguide/training.hpp"

namespace epiguide {

// Train/test images of one benchmark, in manifest order.
struct Dataset {
  GridSpec grid;
  std::vector<TrainingImage> train;
  std::vector<TrainingImage> test;
  std::map<int, std::map<int, double>> overlaps;  // image id -> partner id -> score
};

Dataset dataset_from_benchmark(const Benchmark& bench);
// Features go through f32 exactly as in the in-memory path. Without poses the
// pixel grid is image_size square.
Dataset load_dataset(const std::filesystem::path& manifest, int image_size = 224);

RetrievalIndex build_index(const std::vector<TrainingImage>& images,
                           const std::map<int, std::map<int, double>>& overlaps);

// Reranker scorer that feeds the positional encoding. Poses are never read:
// a pair gets pseudo-geometry from its correspondences when the gate accepts
// it, and a random rank-2 matrix otherwise.
class EpeScorer {
 public:
  EpeScorer(const RerankerParams& params, const std::vector<TrainingImage>& images, GridSpec grid,
            RansacOptions ransac = {});
  double operator()(int query_id, int candidate_id);

 private:
  const RerankerParams& params_;
  TrainingSet set_;
  std::map<int, int> position_;
};

struct EvalOptions {
  int k_rerank = 10;
  std::vector<int> recall_ks{1, 10, 50};
  int overlap_bins = 0;  // 0 disables the breakdown
  // Bin range; unset means the min and max of the observed per-query scores.
  std::optional<std::pair<double, double>> overlap_range;
};

struct EvalReport {
  std::map<int, double> recall;  // K -> R@K
  double mean_ap = 0.0;
  std::optional<OverlapBreakdown> breakdown;
  std::vector<RankedList> rankings;
  GroundTruth truth;

  std::string to_json() const;  // one JSON object per line: metrics, then the breakdown
  std::string pr_csv() const;   // query_id,rank,precision,recall
};

// Global ranking of every indexed image against the rest, optionally reranked.
EvalReport evaluate(const RetrievalIndex& index, const PairScorer* scorer, const EvalOptions& options);

// Reranking scorer for `params` over the test images (EPE-aware when enabled).
PairScorer make_scorer(const RerankerParams& params, const RetrievalIndex& index,
                       const Dataset& data);

// Same-instance ordered pairs (index positions) of a set of images.
std::vector<std::pair<int, int>> matching_pairs(const std::vector<TrainingImage>& images);

}  // namespace epiguide
