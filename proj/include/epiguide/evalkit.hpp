#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "epiguide/matrix.hpp"
#include "epiguide/minimodel.hpp"

namespace epiguide {

// Arithmetic mean of the s^2 local features.
std::vector<double> global_descriptor(const Matrix& features);

struct IndexEntry {
  int image_id = 0;
  int instance_id = 0;
  std::vector<double> global;
  std::optional<Matrix> features;       // needed for reranking
  std::map<int, double> overlaps;       // optional per-pair overlap scores
};

class RetrievalIndex {
 public:
  // Throws InvalidArgument on a duplicate id or non-finite descriptor.
  void add(IndexEntry entry);
  const IndexEntry& at(int image_id) const;
  bool contains(int image_id) const { return by_id_.contains(image_id); }
  const std::vector<IndexEntry>& entries() const { return entries_; }
  std::vector<int> ids() const;

 private:
  std::vector<IndexEntry> entries_;
  std::map<int, std::size_t> by_id_;
};

struct RankedEntry {
  int image_id;
  double score;
  bool operator==(const RankedEntry&) const = default;
};

struct RankedList {
  int query_id = 0;
  std::vector<RankedEntry> entries;  // score descending, ties by ascending id
  bool operator==(const RankedList&) const = default;
};

// Cosine similarity against every other image in the index.
RankedList rank_by_global(const RetrievalIndex& index, int query_id);
// One list per query, computed in parallel and returned in query order.
std::vector<RankedList> rank_all(const RetrievalIndex& index, const std::vector<int>& queries);
std::vector<RankedList> rank_all_serial(const RetrievalIndex& index, const std::vector<int>& queries);

// Score for (query, candidate); larger means more likely the same object.
using PairScorer = std::function<double(int query_id, int candidate_id)>;

// Reorders the first min(k, size) entries by scorer output (ties keep their input order),
// replacing their scores; the tail keeps its order and scores.
RankedList rerank_topk(const RankedList& ranked, int k, const PairScorer& scorer);
// Scorer backed by the reranker's match logit on the indexed features.
PairScorer model_scorer(const RerankerParams& params, const RetrievalIndex& index);
std::vector<RankedList> rerank_all(const std::vector<RankedList>& ranked, int k,
                                   const PairScorer& scorer);

// query id -> ids counted as correct
using GroundTruth = std::map<int, std::set<int>>;

// Positives of a query are the other images of its instance.
GroundTruth instance_ground_truth(const RetrievalIndex& index);

double recall_at_k(const std::vector<RankedList>& rankings, const GroundTruth& truth, int k);
double average_precision(const RankedList& ranking, const std::set<int>& positives);
double mean_average_precision(const std::vector<RankedList>& rankings, const GroundTruth& truth);

struct PrPoint {
  int rank;
  double precision;
  double recall;
};
// One point per retrieved positive.
std::vector<PrPoint> pr_curve(const RankedList& ranking, const std::set<int>& positives);

struct OverlapBin {
  double low = 0.0;
  double high = 0.0;
  int count = 0;
  double recall_at_1 = 0.0;
};

struct OverlapBreakdown {
  std::vector<OverlapBin> bins;
  int excluded = 0;  // queries whose overlap falls outside [low, high]
};

// Per-query overlap = mean over its positives; bins are half-open except the last.
OverlapBreakdown overlap_breakdown(const std::vector<RankedList>& rankings, const GroundTruth& truth,
                                   const std::map<int, double>& query_overlap, int bins,
                                   double low, double high);
std::map<int, double> query_overlaps(const RetrievalIndex& index, const GroundTruth& truth);
int overlap_bin(double value, int bins, double low, double high);  // -1 when outside

}  // namespace epiguide
