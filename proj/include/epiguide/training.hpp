#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "epiguide/guides.hpp"
#include "epiguide/minimodel.hpp"
#include "epiguide/robustf.hpp"

namespace epiguide {

struct TrainingImage {
  int image_id = 0;
  int instance_id = 0;
  int category_id = 0;
  Matrix features;
  std::optional<CameraView> view;
  // Correspondences to same-instance partners, keyed by partner image id
  // (this image is image 1). Used only when poses are missing.
  std::map<int, Correspondences> correspondences;
};

struct PairGeometry {
  std::optional<FundamentalMatrix> f;
  std::optional<EpipolarGuide> guide;
  bool from_pose = false;
  bool unreliable = false;  // pseudo-geometry rejected by the reliability gate
};

// Images plus lazily computed pair geometry. Ground-truth poses take
// priority; otherwise the pair's correspondences go through RANSAC and the
// reliability gate, and gated-out pairs get no guide.
class TrainingSet {
 public:
  TrainingSet(std::vector<TrainingImage> images, GridSpec grid, RansacOptions ransac = {});

  const std::vector<TrainingImage>& images() const { return images_; }
  const GridSpec& grid() const { return grid_; }
  // Index positions (not ids) of the two images.
  const PairGeometry& geometry(int a, int b);
  // Geometry for the positional encoding; a random rank-2 matrix for
  // non-matching pairs or pairs without usable geometry.
  EpeInput epe_input(int a, int b, bool match);

  int unreliable_pairs() const;

 private:
  std::vector<TrainingImage> images_;
  GridSpec grid_;
  RansacOptions ransac_;
  std::map<std::pair<int, int>, PairGeometry> cache_;
};

struct Schedule {
  int epochs_phase1 = 6;   // match loss only
  int epochs_phase2 = 10;  // match loss + lambda * attention loss
  double lr_phase1 = 2e-3;
  double lr_phase2 = 5e-3;
  int batch_size = 2;
  // Share of negatives drawn from the anchor's category, per phase. Phase 1
  // starts on easy negatives; with hard ones from the start the match head
  // sits at chance for tens of thousands of pairs.
  double hard_negatives_phase1 = 0.0;
  double hard_negatives_phase2 = 0.5;
  int first_epoch = 0;                   // global epoch index of the first epoch run here
};

struct EpochLog {
  int phase = 1;
  int epoch = 0;  // global index
  long pairs = 0;
  long guided_pairs = 0;
  double match_bce = 0.0;       // mean over pairs
  double attention_loss = 0.0;  // mean over guided pairs
  AttentionMass mass;           // last-layer attention inside guides, guided pairs

  std::string to_json() const;
};

struct TrainResult {
  RerankerParams params;
  std::vector<EpochLog> log;
};

// Deterministic given config.seed: fixed initialization, per-epoch pair
// sampling seeded by (seed, global epoch), fixed iteration order. Adam state
// restarts at each phase, so running the phases in separate calls (passing
// the phase-1 parameters as `init` and advancing first_epoch) gives the same
// parameters as one call.
TrainResult train(TrainingSet& data, const ModelConfig& config, const Schedule& schedule,
                  const RerankerParams* init = nullptr,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

// Last-layer attention mass inside the guides of the given same-instance
// pairs (index positions); pairs without a guide are skipped.
AttentionMass attention_mass_on_pairs(const RerankerParams& params, TrainingSet& data,
                                      const std::vector<std::pair<int, int>>& pairs);

}  // namespace epiguide
