#include "epiguide/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "epiguide/dataio.hpp"
#include "epiguide/error.hpp"
#include "epiguide/seeding.hpp"

namespace epiguide {

namespace {

double as_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::vector<double> normal_vector(std::mt19937_64& rng, int m, double scale) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(m);
  for (double& x : v) x = normal(rng);
  return v;
}

Vec3 uniform_in_ball(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (;;) {
    const Vec3 p(u(rng), u(rng), u(rng));
    if (p.squaredNorm() <= 1.0 && p.squaredNorm() > 1e-12) return p;
  }
}

Vec3 uniform_on_sphere(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    const Vec3 p(normal(rng), normal(rng), normal(rng));
    if (p.norm() > 1e-9) return p.normalized();
  }
}

Mat3 intrinsics_for(int width, int height, double radius) {
  // The unit ball subtends asin(1 / radius); leave 15% margin around it.
  const double half = std::asin(1.0 / radius);
  const double f = 0.5 * std::min(width, height) / (1.15 * std::tan(half));
  Mat3 k;
  k << f, 0.0, 0.5 * width,
       0.0, f, 0.5 * height,
       0.0, 0.0, 1.0;
  return k;
}

Correspondences pair_matches(const std::vector<Vec3>& surface, const CameraView& a,
                             const CameraView& b, const BenchmarkOptions& opt,
                             std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, opt.match_noise_px);
  Correspondences out;
  for (const Vec3& p : surface) {
    if (!landmark_visible(a, p) || !landmark_visible(b, p)) continue;
    const Vec2 pa = a.project(p), pb = b.project(p);
    out.push_back({pa.x() + noise(rng), pa.y() + noise(rng), pb.x() + noise(rng), pb.y() + noise(rng)});
  }
  const auto n_out = static_cast<std::size_t>(
      std::llround(out.size() * opt.outlier_fraction / (1.0 - opt.outlier_fraction)));
  std::uniform_real_distribution<double> ux(0.0, a.width()), uy(0.0, a.height());
  for (std::size_t i = 0; i < n_out; ++i) {
    const double x1 = ux(rng), y1 = uy(rng), x2 = ux(rng), y2 = uy(rng);
    out.push_back({x1, y1, x2, y2});
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace

SyntheticScene generate_scene(std::uint64_t seed, int n_landmarks, int m, int category_id,
                              const DescriptorScales& scales) {
  if (n_landmarks < 1) throw Error(ErrorCode::InvalidArgument, "need at least one landmark");
  if (m < 1) throw Error(ErrorCode::InvalidArgument, "descriptor width must be positive");
  std::mt19937_64 cat_rng(mix_seed(scales.category_salt, static_cast<std::uint64_t>(category_id)));
  const std::vector<double> category = normal_vector(cat_rng, m, scales.category);

  std::mt19937_64 rng(seed);
  const std::vector<double> instance = normal_vector(rng, m, scales.instance);
  SyntheticScene scene;
  scene.category_id = category_id;
  scene.landmarks.reserve(n_landmarks);
  for (int i = 0; i < n_landmarks; ++i) {
    Landmark lm;
    lm.position = uniform_in_ball(rng);
    lm.descriptor = normal_vector(rng, m, scales.landmark);
    for (int k = 0; k < m; ++k) lm.descriptor[k] += category[k] + instance[k];
    scene.landmarks.push_back(std::move(lm));
  }
  return scene;
}

bool landmark_visible(const CameraView& view, const Vec3& position) {
  if (view.depth(position) <= 0.0) return false;
  if (position.dot(view.center() - position) <= 0.0) return false;
  return view.in_image(view.project(position));
}

std::vector<SyntheticView> render_views(const SyntheticScene& scene, const RenderOptions& opt,
                                        const GridSpec& grid, std::uint64_t seed) {
  if (opt.n_views < 2) throw Error(ErrorCode::InvalidArgument, "need at least two views");
  if (!(opt.radius > 1.0)) throw Error(ErrorCode::InvalidArgument, "camera radius must exceed 1");
  if (scene.landmarks.empty()) throw Error(ErrorCode::InvalidArgument, "scene has no landmarks");
  const int m = static_cast<int>(scene.landmarks.front().descriptor.size());
  const double deg = std::numbers::pi / 180.0;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> start(0.0, 360.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const Mat3 k = intrinsics_for(grid.width, grid.height, opt.radius);
  const double base = start(rng);

  std::vector<SyntheticView> views;
  views.reserve(opt.n_views);
  for (int v = 0; v < opt.n_views; ++v) {
    const double az = (base + v * 360.0 / opt.n_views + opt.azimuth_jitter_deg * unit(rng)) * deg;
    const double el = opt.elevation_jitter_deg * unit(rng) * deg;
    const Vec3 eye = opt.radius * Vec3(std::cos(el) * std::cos(az), std::sin(el),
                                       std::cos(el) * std::sin(az));
    CameraView cam = CameraView::look_at(eye, Vec3::Zero(), Vec3::UnitY(), k, grid.width, grid.height);

    Matrix features(grid.cells(), m);
    for (double& x : features.values()) x = opt.noise_sigma * noise(rng);
    std::vector<int> cells(scene.landmarks.size(), -1);
    for (std::size_t i = 0; i < scene.landmarks.size(); ++i) {
      const Landmark& lm = scene.landmarks[i];
      if (!landmark_visible(cam, lm.position)) continue;
      const int cell = grid.cell_of(cam.project(lm.position));
      cells[i] = cell;
      for (int c = 0; c < m; ++c) features(cell, c) = lm.descriptor[c] + opt.noise_sigma * noise(rng);
    }
    for (double& x : features.values()) x = as_f32(x);
    views.push_back({std::move(cam), std::move(features), std::move(cells)});
  }
  return views;
}

double overlap_score(const SyntheticView& a, const SyntheticView& b) {
  if (&a == &b) return 1.0;
  int both = 0, either = 0;
  for (std::size_t i = 0; i < a.landmark_cell.size(); ++i) {
    const bool va = a.landmark_cell[i] >= 0, vb = b.landmark_cell[i] >= 0;
    both += va && vb;
    either += va || vb;
  }
  return either ? static_cast<double>(both) / either : 0.0;
}

Benchmark generate_benchmark(std::uint64_t seed, const BenchmarkOptions& opt) {
  if (opt.n_instances < 2) throw Error(ErrorCode::InvalidArgument, "need at least two instances");
  if (opt.n_categories < 1) throw Error(ErrorCode::InvalidArgument, "need at least one category");
  if (!(opt.split_fraction > 0.0 && opt.split_fraction < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "split fraction must lie in (0, 1)");
  }
  Benchmark bench{opt, GridSpec(opt.s, opt.image_size, opt.image_size), {}};

  // Instance-level split: a seeded permutation, first part to train.
  std::vector<int> order(opt.n_instances);
  for (int i = 0; i < opt.n_instances; ++i) order[i] = i;
  std::mt19937_64 split_rng(mix_seed(seed, 1));
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_train = static_cast<int>(std::llround(opt.split_fraction * opt.n_instances));
  std::vector<bool> is_train(opt.n_instances, false);
  for (int i = 0; i < n_train; ++i) is_train[order[i]] = true;

  RenderOptions render = opt.render;
  render.n_views = opt.views_per_instance;
  DescriptorScales scales = opt.scales;
  scales.category_salt = mix_seed(scales.category_salt, seed);

  for (int inst = 0; inst < opt.n_instances; ++inst) {
    const std::uint64_t inst_seed = mix_seed(seed, 1000 + static_cast<std::uint64_t>(inst));
    const int category = inst % opt.n_categories;
    SyntheticScene scene = generate_scene(mix_seed(inst_seed, 0), opt.n_landmarks, opt.m, category, scales);
    scene.instance_id = inst;
    const auto views = render_views(scene, render, bench.grid, mix_seed(inst_seed, 1));

    std::vector<Vec3> surface;
    std::mt19937_64 corr_rng(mix_seed(inst_seed, 2));
    if (opt.pseudo_geometry) {
      for (int i = 0; i < opt.surface_points; ++i) surface.push_back(uniform_on_sphere(corr_rng));
    }

    const int first_id = inst * opt.views_per_instance;
    for (int v = 0; v < opt.views_per_instance; ++v) {
      BenchmarkImage img{first_id + v, inst, category, is_train[inst], views[v].view,
                         views[v].features, {}, {}};
      for (int w = 0; w < opt.views_per_instance; ++w) {
        img.overlaps[first_id + w] = v == w ? 1.0 : overlap_score(views[v], views[w]);
        if (opt.pseudo_geometry && v != w) {
          img.correspondences[first_id + w] = pair_matches(surface, views[v].view, views[w].view, opt, corr_rng);
        }
      }
      bench.images.push_back(std::move(img));
    }
  }
  return bench;
}

void write_benchmark(const std::filesystem::path& dir, const Benchmark& bench) {
  std::vector<ManifestRecord> records;
  records.reserve(bench.images.size());
  for (const auto& img : bench.images) {
    ManifestRecord r;
    r.image_id = img.image_id;
    r.instance_id = img.instance_id;
    r.category_id = img.category_id;
    r.split = img.train ? "train" : "test";
    r.feature_path = "features/" + std::to_string(img.image_id) + ".ept";
    write_tensor(dir / r.feature_path, Tensor::from_matrix(img.features));
    if (bench.options.pseudo_geometry) {
      r.correspondences_path = "corr/" + std::to_string(img.image_id) + ".json";
      write_text(dir / *r.correspondences_path, pair_correspondences_json(img.correspondences));
    } else {
      r.pose = img.view;
    }
    r.overlaps = img.overlaps;
    records.push_back(std::move(r));
  }
  write_manifest(dir / "manifest.jsonl", records);
}

}  // namespace epiguide
