#include "epiguide/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "epiguide/error.hpp"

namespace epiguide {

namespace {

bool ranks_before(const RankedEntry& a, const RankedEntry& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.image_id < b.image_id;
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double cosine(const std::vector<double>& a, double na, const std::vector<double>& b, double nb) {
  if (na == 0.0 || nb == 0.0) return 0.0;
  double dot = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
  return dot / (na * nb);
}

RankedList rank_one(const RetrievalIndex& index, const std::vector<double>& norms, int query_id) {
  if (!index.contains(query_id)) {
    throw Error(ErrorCode::UnknownQuery, "query " + std::to_string(query_id) + " not in index");
  }
  const IndexEntry& q = index.at(query_id);
  const double nq = norm(q.global);
  RankedList out{query_id, {}};
  const auto& entries = index.entries();
  out.entries.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].image_id == query_id) continue;
    out.entries.push_back({entries[i].image_id, cosine(q.global, nq, entries[i].global, norms[i])});
  }
  std::sort(out.entries.begin(), out.entries.end(), ranks_before);
  return out;
}

std::vector<double> entry_norms(const RetrievalIndex& index) {
  std::vector<double> norms;
  for (const auto& e : index.entries()) norms.push_back(norm(e.global));
  return norms;
}

bool hit_in_top(const RankedList& r, const std::set<int>& positives, int k) {
  const int n = std::min<int>(k, static_cast<int>(r.entries.size()));
  for (int i = 0; i < n; ++i) {
    if (positives.contains(r.entries[i].image_id)) return true;
  }
  return false;
}

const std::set<int>& positives_of(const GroundTruth& truth, int query) {
  static const std::set<int> kEmpty;
  const auto it = truth.find(query);
  return it == truth.end() ? kEmpty : it->second;
}

}  // namespace

std::vector<double> global_descriptor(const Matrix& features) {
  if (features.rows() < 1) throw Error(ErrorCode::InvalidArgument, "empty feature grid");
  std::vector<double> g(features.cols(), 0.0);
  for (int i = 0; i < features.rows(); ++i) {
    for (int k = 0; k < features.cols(); ++k) g[k] += features(i, k);
  }
  for (double& v : g) v /= features.rows();
  return g;
}

void RetrievalIndex::add(IndexEntry entry) {
  if (by_id_.contains(entry.image_id)) {
    throw Error(ErrorCode::InvalidArgument, "duplicate image id " + std::to_string(entry.image_id));
  }
  if (!std::all_of(entry.global.begin(), entry.global.end(), [](double v) { return std::isfinite(v); })) {
    throw Error(ErrorCode::InvalidArgument, "non-finite global descriptor");
  }
  by_id_[entry.image_id] = entries_.size();
  entries_.push_back(std::move(entry));
}

const IndexEntry& RetrievalIndex::at(int image_id) const {
  const auto it = by_id_.find(image_id);
  if (it == by_id_.end()) {
    throw Error(ErrorCode::UnknownQuery, "image " + std::to_string(image_id) + " not in index");
  }
  return entries_[it->second];
}

std::vector<int> RetrievalIndex::ids() const {
  std::vector<int> ids;
  for (const auto& [id, _] : by_id_) ids.push_back(id);
  return ids;
}

RankedList rank_by_global(const RetrievalIndex& index, int query_id) {
  return rank_one(index, entry_norms(index), query_id);
}

std::vector<RankedList> rank_all(const RetrievalIndex& index, const std::vector<int>& queries) {
  for (int q : queries) {
    if (!index.contains(q)) throw Error(ErrorCode::UnknownQuery, "query " + std::to_string(q) + " not in index");
  }
  const auto norms = entry_norms(index);
  std::vector<RankedList> out(queries.size());
  const int n = static_cast<int>(queries.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (int i = 0; i < n; ++i) out[i] = rank_one(index, norms, queries[i]);
  return out;
}

std::vector<RankedList> rank_all_serial(const RetrievalIndex& index, const std::vector<int>& queries) {
  std::vector<RankedList> out;
  for (int q : queries) out.push_back(rank_by_global(index, q));
  return out;
}

RankedList rerank_topk(const RankedList& ranked, int k, const PairScorer& scorer) {
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
  RankedList out = ranked;
  const auto head = static_cast<std::ptrdiff_t>(std::min<std::size_t>(k, out.entries.size()));
  for (auto it = out.entries.begin(); it != out.entries.begin() + head; ++it) {
    it->score = scorer(ranked.query_id, it->image_id);
  }
  // Equal model scores keep the incoming order, which already breaks its own
  // ties by id; a constant scorer therefore changes nothing.
  std::stable_sort(out.entries.begin(), out.entries.begin() + head,
                   [](const RankedEntry& a, const RankedEntry& b) { return a.score > b.score; });
  return out;
}

PairScorer model_scorer(const RerankerParams& params, const RetrievalIndex& index) {
  return [&params, &index](int query, int candidate) {
    const IndexEntry& a = index.at(query);
    const IndexEntry& b = index.at(candidate);
    if (!a.features || !b.features) {
      throw Error(ErrorCode::MissingFeatures, "no local features for pair (" + std::to_string(query) +
                                                  ", " + std::to_string(candidate) + ")");
    }
    return score_pair(params, assemble_tokens(*a.features, *b.features, params));
  };
}

std::vector<RankedList> rerank_all(const std::vector<RankedList>& ranked, int k,
                                   const PairScorer& scorer) {
  std::vector<RankedList> out(ranked.size());
  const int n = static_cast<int>(ranked.size());
  // Exceptions cannot cross the parallel region; capture the first one.
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 4)
  for (int i = 0; i < n; ++i) {
    try {
      out[i] = rerank_topk(ranked[i], k, scorer);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

GroundTruth instance_ground_truth(const RetrievalIndex& index) {
  std::map<int, std::vector<int>> by_instance;
  for (const auto& e : index.entries()) by_instance[e.instance_id].push_back(e.image_id);
  GroundTruth truth;
  for (const auto& e : index.entries()) {
    auto& pos = truth[e.image_id];
    for (int id : by_instance[e.instance_id]) {
      if (id != e.image_id) pos.insert(id);
    }
  }
  return truth;
}

double recall_at_k(const std::vector<RankedList>& rankings, const GroundTruth& truth, int k) {
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
  if (rankings.empty()) throw Error(ErrorCode::EmptyQuerySet, "no queries");
  int hits = 0;
  for (const auto& r : rankings) hits += hit_in_top(r, positives_of(truth, r.query_id), k);
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

double average_precision(const RankedList& ranking, const std::set<int>& positives) {
  if (positives.empty()) {
    throw Error(ErrorCode::NoPositives, "query " + std::to_string(ranking.query_id) + " has no positives");
  }
  double sum = 0.0;
  int found = 0;
  for (std::size_t r = 0; r < ranking.entries.size(); ++r) {
    if (positives.contains(ranking.entries[r].image_id)) {
      ++found;
      sum += static_cast<double>(found) / static_cast<double>(r + 1);
    }
  }
  return sum / static_cast<double>(positives.size());
}

double mean_average_precision(const std::vector<RankedList>& rankings, const GroundTruth& truth) {
  if (rankings.empty()) throw Error(ErrorCode::EmptyQuerySet, "no queries");
  double sum = 0.0;
  for (const auto& r : rankings) sum += average_precision(r, positives_of(truth, r.query_id));
  return sum / static_cast<double>(rankings.size());
}

std::vector<PrPoint> pr_curve(const RankedList& ranking, const std::set<int>& positives) {
  std::vector<PrPoint> out;
  int found = 0;
  for (std::size_t r = 0; r < ranking.entries.size() && found < static_cast<int>(positives.size()); ++r) {
    if (positives.contains(ranking.entries[r].image_id)) {
      ++found;
      out.push_back({static_cast<int>(r + 1), static_cast<double>(found) / static_cast<double>(r + 1),
                     static_cast<double>(found) / static_cast<double>(positives.size())});
    }
  }
  return out;
}

int overlap_bin(double value, int bins, double low, double high) {
  if (!(value >= low && value <= high)) return -1;
  if (value == high) return bins - 1;
  const double width = (high - low) / bins;
  int k = std::min(bins - 1, static_cast<int>(std::floor((value - low) / width)));
  // The division can land one bin off; settle it against the reported edges.
  if (k > 0 && value < low + k * width) --k;
  if (k + 1 < bins && value >= low + (k + 1) * width) ++k;
  return k;
}

OverlapBreakdown overlap_breakdown(const std::vector<RankedList>& rankings, const GroundTruth& truth,
                                   const std::map<int, double>& query_overlap, int bins,
                                   double low, double high) {
  if (bins < 1) throw Error(ErrorCode::InvalidArgument, "bins must be >= 1");
  if (!(low < high)) throw Error(ErrorCode::InvalidArgument, "overlap range must satisfy low < high");
  OverlapBreakdown out;
  const double width = (high - low) / bins;
  std::vector<int> hits(bins, 0);
  for (int b = 0; b < bins; ++b) out.bins.push_back({low + b * width, low + (b + 1) * width, 0, 0.0});
  for (const auto& r : rankings) {
    const auto it = query_overlap.find(r.query_id);
    const int b = it == query_overlap.end() ? -1 : overlap_bin(it->second, bins, low, high);
    if (b < 0) {
      ++out.excluded;
      continue;
    }
    ++out.bins[b].count;
    hits[b] += hit_in_top(r, positives_of(truth, r.query_id), 1);
  }
  for (int b = 0; b < bins; ++b) {
    if (out.bins[b].count) out.bins[b].recall_at_1 = static_cast<double>(hits[b]) / out.bins[b].count;
  }
  return out;
}

std::map<int, double> query_overlaps(const RetrievalIndex& index, const GroundTruth& truth) {
  std::map<int, double> out;
  for (const auto& e : index.entries()) {
    const auto& pos = positives_of(truth, e.image_id);
    double sum = 0.0;
    int n = 0;
    for (int p : pos) {
      const auto it = e.overlaps.find(p);
      if (it == e.overlaps.end()) continue;
      sum += it->second;
      ++n;
    }
    if (n) out[e.image_id] = sum / n;
  }
  return out;
}

}  // namespace epiguide
