#include "epiguide/training.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "json.hpp"

#include "epiguide/error.hpp"
#include "epiguide/seeding.hpp"

namespace epiguide {

namespace {

class Adam {
 public:
  explicit Adam(const RerankerParams& like, double lr) : lr_(lr) {
    for (const auto& t : like.tensors()) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  void step(RerankerParams& params, const RerankerParams& grad, double grad_scale) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, t_);
    const double c2 = 1.0 - std::pow(kBeta2, t_);
    auto& tensors = params.tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      double* p = tensors[i].data();
      const double* g = grad.tensors()[i].data();
      for (std::size_t k = 0; k < tensors[i].size(); ++k) {
        const double gk = g[k] * grad_scale;
        m_[i][k] = kBeta1 * m_[i][k] + (1.0 - kBeta1) * gk;
        v_[i][k] = kBeta2 * v_[i][k] + (1.0 - kBeta2) * gk * gk;
        p[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + kEps);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  double lr_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

void accumulate(RerankerParams& acc, const RerankerParams& g) {
  for (std::size_t i = 0; i < acc.tensors().size(); ++i) {
    double* a = acc.tensors()[i].data();
    const double* b = g.tensors()[i].data();
    for (std::size_t k = 0; k < acc.tensors()[i].size(); ++k) a[k] += b[k];
  }
}

struct Pair {
  int a, b, label;
};

std::vector<Pair> sample_epoch(const std::vector<TrainingImage>& images, double hard_fraction,
                               std::uint64_t seed, int epoch) {
  const int n = static_cast<int>(images.size());
  std::map<int, std::vector<int>> by_instance, by_category;
  for (int i = 0; i < n; ++i) {
    by_instance[images[i].instance_id].push_back(i);
    by_category[images[i].category_id].push_back(i);
  }
  std::mt19937_64 rng(mix_seed(seed, 0x7a11 + static_cast<std::uint64_t>(epoch)));
  std::vector<int> anchors(n);
  for (int i = 0; i < n; ++i) anchors[i] = i;
  std::shuffle(anchors.begin(), anchors.end(), rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<Pair> pairs;
  for (int a : anchors) {
    const auto& same = by_instance[images[a].instance_id];
    if (same.size() > 1) {
      std::uniform_int_distribution<std::size_t> pick(0, same.size() - 2);
      std::size_t k = pick(rng);
      if (same[k] == a) k = same.size() - 1;
      pairs.push_back({a, same[k], 1});
    }
    std::vector<int> hard;
    for (int c : by_category[images[a].category_id]) {
      if (images[c].instance_id != images[a].instance_id) hard.push_back(c);
    }
    int neg = -1;
    if (!hard.empty() && unit(rng) < hard_fraction) {
      neg = hard[std::uniform_int_distribution<std::size_t>(0, hard.size() - 1)(rng)];
    } else if (static_cast<int>(same.size()) < n) {
      std::uniform_int_distribution<int> any(0, n - 1);
      do {
        neg = any(rng);
      } while (images[neg].instance_id == images[a].instance_id);
    }
    if (neg >= 0) pairs.push_back({a, neg, 0});
  }
  return pairs;
}

}  // namespace

TrainingSet::TrainingSet(std::vector<TrainingImage> images, GridSpec grid, RansacOptions ransac)
    : images_(std::move(images)), grid_(grid), ransac_(ransac) {}

const PairGeometry& TrainingSet::geometry(int a, int b) {
  const auto key = std::make_pair(a, b);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  PairGeometry g;
  const TrainingImage& ia = images_.at(a);
  const TrainingImage& ib = images_.at(b);
  try {
    if (ia.view && ib.view) {
      g.f = relative_fundamental(*ia.view, *ib.view);
      g.from_pose = true;
    } else {
      std::optional<Correspondences> corr;
      bool reversed = false;
      if (auto it = ia.correspondences.find(ib.image_id); it != ia.correspondences.end()) {
        corr = it->second;
      } else if (auto jt = ib.correspondences.find(ia.image_id); jt != ib.correspondences.end()) {
        corr = jt->second;
        reversed = true;
      }
      if (corr) {
        if (corr->size() < 8) {
          g.unreliable = true;
        } else {
          const RobustEstimate est = ransac_fundamental(*corr, ransac_);
          if (est.reliable) {
            g.f = reversed ? est.f.transposed() : est.f;
          } else {
            g.unreliable = true;
          }
        }
      }
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Io) throw;
    g.f.reset();
    g.unreliable = !g.from_pose;
  }
  if (g.f) g.guide = rasterize_guide(*g.f, grid_, grid_);
  return cache_.emplace(key, std::move(g)).first->second;
}

EpeInput TrainingSet::epe_input(int a, int b, bool match) {
  const std::uint64_t pair_seed =
      mix_seed(static_cast<std::uint64_t>(images_.at(a).image_id),
               static_cast<std::uint64_t>(images_.at(b).image_id));
  if (match) {
    const PairGeometry& g = geometry(a, b);
    if (g.f) {
      EpeInput in{*g.f, std::nullopt, std::nullopt, grid_, grid_, pair_seed};
      if (g.from_pose) {
        in.view1 = images_[a].view;
        in.view2 = images_[b].view;
      }
      return in;
    }
  }
  return {random_rank2_matrix(pair_seed), std::nullopt, std::nullopt, grid_, grid_, pair_seed};
}

int TrainingSet::unreliable_pairs() const {
  return static_cast<int>(std::count_if(cache_.begin(), cache_.end(),
                                        [](const auto& kv) { return kv.second.unreliable; }));
}

std::string EpochLog::to_json() const {
  nlohmann::ordered_json j;
  j["phase"] = phase;
  j["epoch"] = epoch;
  j["pairs"] = pairs;
  j["guided_pairs"] = guided_pairs;
  j["match_bce"] = match_bce;
  j["attention_loss"] = attention_loss;
  j["attention_in_guide"] = mass.mean_in_guide();
  j["guide_fraction"] = mass.mean_fraction();
  j["concentration"] = mass.concentration();
  return j.dump();
}

TrainResult train(TrainingSet& data, const ModelConfig& config, const Schedule& schedule,
                  const RerankerParams* init, const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (schedule.batch_size < 1) throw Error(ErrorCode::InvalidArgument, "batch size must be >= 1");
  TrainResult result{init ? *init : RerankerParams::initialize(config), {}};
  if (init) {
    // Keep the architecture from the checkpoint, take the training settings from `config`.
    ModelConfig& c = result.params.mutable_config();
    if (c.s != config.s || c.m != config.m || c.heads != config.heads || c.layers != config.layers ||
        c.mlp_width != config.mlp_width || c.num_freqs != config.num_freqs ||
        c.epe_enabled != config.epe_enabled) {
      throw Error(ErrorCode::ShapeMismatch, "initial parameters do not match the model config");
    }
    c = config;
  }
  RerankerParams& params = result.params;
  const auto& images = data.images();

  int epoch = schedule.first_epoch;
  for (int phase = 1; phase <= 2; ++phase) {
    const int epochs = phase == 1 ? schedule.epochs_phase1 : schedule.epochs_phase2;
    const double lr = phase == 1 ? schedule.lr_phase1 : schedule.lr_phase2;
    const bool attention_on = phase == 2 && config.loss_variant != LossVariant::None;
    const double hard =
        phase == 1 ? schedule.hard_negatives_phase1 : schedule.hard_negatives_phase2;
    Adam adam(params, lr);
    for (int e = 0; e < epochs; ++e, ++epoch) {
      const auto pairs = sample_epoch(images, hard, config.seed, epoch);
      EpochLog log;
      log.phase = phase;
      log.epoch = epoch;
      RerankerParams grad_acc = RerankerParams::zeros(config);
      int in_batch = 0;
      for (std::size_t step = 0; step < pairs.size(); ++step) {
        const Pair& p = pairs[step];
        const EpipolarGuide* guide = nullptr;
        if (p.label == 1) {
          const PairGeometry& g = data.geometry(p.a, p.b);
          if (g.guide) guide = &*g.guide;
        }
        std::optional<EpeInput> epe;
        if (config.epe_enabled) epe = data.epe_input(p.a, p.b, p.label == 1);
        try {
          const TokenSequence tokens =
              assemble_tokens(images[p.a].features, images[p.b].features, params, epe);
          const ForwardResult fwd = forward(params, tokens);
          const PairLoss loss = pair_loss(config, fwd, p.label, attention_on ? guide : nullptr);
          const Gradients grads = backward(params, fwd.cache, loss.grads);
          accumulate(grad_acc, grads.params);
          log.match_bce += loss.match_bce;
          if (guide) {
            ++log.guided_pairs;
            log.attention_loss += loss.attention;
            accumulate_attention_mass(fwd.cache, *guide, log.mass);
          }
        } catch (const Error& err) {
          if (err.code() != ErrorCode::NonFiniteActivation) throw;
          throw Error(ErrorCode::NonFiniteActivation, std::string(err.what()) + " at epoch " +
                                                          std::to_string(epoch) + ", step " +
                                                          std::to_string(step));
        }
        ++log.pairs;
        if (++in_batch == schedule.batch_size || step + 1 == pairs.size()) {
          adam.step(params, grad_acc, 1.0 / in_batch);
          for (auto& t : grad_acc.tensors()) std::fill(t.values().begin(), t.values().end(), 0.0);
          in_batch = 0;
        }
      }
      if (!params.all_finite()) {
        throw Error(ErrorCode::NonFiniteActivation, "parameters diverged at epoch " + std::to_string(epoch));
      }
      if (log.pairs) log.match_bce /= static_cast<double>(log.pairs);
      if (log.guided_pairs) log.attention_loss /= static_cast<double>(log.guided_pairs);
      if (on_epoch) on_epoch(log);
      result.log.push_back(log);
    }
  }
  return result;
}

AttentionMass attention_mass_on_pairs(const RerankerParams& params, TrainingSet& data,
                                      const std::vector<std::pair<int, int>>& pairs) {
  AttentionMass mass;
  const auto& images = data.images();
  for (const auto& [a, b] : pairs) {
    const PairGeometry& g = data.geometry(a, b);
    if (!g.guide) continue;
    std::optional<EpeInput> epe;
    if (params.config().epe_enabled) epe = data.epe_input(a, b, true);
    const ForwardResult fwd = forward(params, assemble_tokens(images[a].features, images[b].features, params, epe));
    accumulate_attention_mass(fwd.cache, *g.guide, mass);
  }
  return mass;
}

}  // namespace epiguide
