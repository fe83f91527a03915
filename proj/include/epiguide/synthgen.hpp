#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include "epiguide/geometry.hpp"
#include "epiguide/guides.hpp"
#include "epiguide/matrix.hpp"
#include "epiguide/robustf.hpp"

namespace epiguide {

// Relative magnitudes of the three descriptor components.
struct DescriptorScales {
  double category = 0.5;
  double instance = 0.05;
  double landmark = 0.5;
  std::uint64_t category_salt = 0x5eed;  // category means depend only on (salt, category_id)
};

struct Landmark {
  Vec3 position;  // inside the unit ball; its outward direction doubles as the surface normal
  std::vector<double> descriptor;
};

struct SyntheticScene {
  int instance_id = 0;
  int category_id = 0;
  std::vector<Landmark> landmarks;
};

SyntheticScene generate_scene(std::uint64_t seed, int n_landmarks, int m, int category_id,
                              const DescriptorScales& scales = {});

struct RenderOptions {
  int n_views = 5;
  double radius = 3.0;
  double elevation_jitter_deg = 5.0;
  double azimuth_jitter_deg = 3.0;
  double noise_sigma = 0.1;
};

struct SyntheticView {
  CameraView view;
  Matrix features;                 // s^2 x m, values representable in f32
  std::vector<int> landmark_cell;  // -1 when the landmark is not visible
};

// A landmark is visible when it projects inside the image and faces the camera.
bool landmark_visible(const CameraView& view, const Vec3& position);

// Cameras on a circle around the origin at 360/n_views degree spacing, with
// seeded azimuth and elevation jitter, all looking at the origin.
std::vector<SyntheticView> render_views(const SyntheticScene& scene, const RenderOptions& options,
                                        const GridSpec& grid, std::uint64_t seed);

// Co-visible landmarks over landmarks visible in either view (1 for a view with itself).
double overlap_score(const SyntheticView& a, const SyntheticView& b);

struct BenchmarkOptions {
  int n_instances = 200;
  int n_categories = 20;
  int views_per_instance = 5;
  int n_landmarks = 24;
  int m = 32;
  int s = 7;
  int image_size = 224;
  double split_fraction = 0.5;
  RenderOptions render;
  DescriptorScales scales;
  // Drop poses and emit noisy pairwise correspondences instead.
  bool pseudo_geometry = false;
  int surface_points = 400;
  double match_noise_px = 0.5;
  double outlier_fraction = 0.3;
};

struct BenchmarkImage {
  int image_id = 0;
  int instance_id = 0;
  int category_id = 0;
  bool train = true;
  CameraView view;
  Matrix features;
  std::map<int, double> overlaps;  // same-instance views, self included
  std::map<int, Correspondences> correspondences;  // pseudo-geometry mode only
};

struct Benchmark {
  BenchmarkOptions options;
  GridSpec grid;
  std::vector<BenchmarkImage> images;
};

Benchmark generate_benchmark(std::uint64_t seed, const BenchmarkOptions& options);

// Writes manifest.jsonl plus features/<id>.ept (and corr/<id>.json in
// pseudo-geometry mode) under `dir`.
void write_benchmark(const std::filesystem::path& dir, const Benchmark& benchmark);

}  // namespace epiguide
