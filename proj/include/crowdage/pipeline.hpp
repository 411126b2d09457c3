#pragma once
// Training loop: optional detector pre-training phase, then the age phase in
// frozen-detector or end-to-end mode, with Adam and a step-decay schedule.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdage/augment.hpp"
#include "crowdage/evaluation.hpp"
#include "crowdage/loss_weights.hpp"
#include "crowdage/model.hpp"
#include "crowdage/nn.hpp"
#include "crowdage/synth_data.hpp"

namespace crowdage {

enum class TrainMode { frozen_detector, end_to_end };

inline std::string to_string(TrainMode m) { return m == TrainMode::frozen_detector ? "frozen_detector" : "end_to_end"; }
inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "frozen_detector") return TrainMode::frozen_detector;
  if (s == "end_to_end") return TrainMode::end_to_end;
  throw std::invalid_argument("unknown train mode: " + s);
}

struct LrSchedule {
  double initial = 1e-4;
  std::vector<int> milestones;
  double gamma = 0.1;

  double at(int epoch) const {
    double lr = initial;
    for (int m : milestones)
      if (epoch >= m) lr *= gamma;
    return lr;
  }
  void validate() const {
    if (!(initial > 0)) throw std::invalid_argument("lr.initial must be > 0");
    if (!(gamma > 0)) throw std::invalid_argument("lr.gamma must be > 0");
    if (!std::is_sorted(milestones.begin(), milestones.end()))
      throw std::invalid_argument("lr.milestones must be ascending");
  }
  bool operator==(const LrSchedule&) const = default;
};

struct TrainConfig {
  TrainMode mode = TrainMode::frozen_detector;
  int k_train = 0;  // 0: 9 with tiling, else 1
  int k_eval = 20;
  double conf_threshold = 0.2;
  int batch_size = 4;
  int epochs = 10;
  LrSchedule lr;
  int detector_epochs = 0;
  LrSchedule detector_lr;
  bool tiling = false;
  TilingConfig tiling_config;
  AugmentToggles augment;
  LossWeights weights;
  std::uint64_t seed = 0;

  int effective_k_train() const { return k_train > 0 ? k_train : (tiling ? 9 : 1); }
  int total_epochs() const { return detector_epochs + epochs; }

  void validate() const {
    if (k_train < 0) throw std::invalid_argument("k_train must be >= 1 (or 0 for the default)");
    if (k_eval < 1) throw std::invalid_argument("k_eval must be >= 1");
    if (!(conf_threshold > 0 && conf_threshold < 1)) throw std::invalid_argument("conf_threshold must be in (0,1)");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (epochs < 0 || detector_epochs < 0) throw std::invalid_argument("epoch counts must be >= 0");
    lr.validate();
    detector_lr.validate();
    tiling_config.validate();
    weights.validate();
  }
  bool operator==(const TrainConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<float>> m, v;
  bool operator==(const AdamState&) const = default;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

inline void adam_step(nn::ParamStore<float>& store, const nn::Grads<float>& grads, AdamState& st, double lr) {
  if (st.m.size() != store.size()) {
    st.m.assign(store.size(), {});
    st.v.assign(store.size(), {});
    for (std::size_t i = 0; i < store.size(); ++i) {
      st.m[i].assign(store[i].value.size(), 0.f);
      st.v[i].assign(store[i].value.size(), 0.f);
    }
  }
  ++st.step;
  const double c1 = 1 - std::pow(kAdamBeta1, static_cast<double>(st.step));
  const double c2 = 1 - std::pow(kAdamBeta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& w = store[i].value;
    auto& m = st.m[i];
    auto& v = st.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = static_cast<float>(kAdamBeta1 * m[j] + (1 - kAdamBeta1) * g[j]);
      v[j] = static_cast<float>(kAdamBeta2 * v[j] + (1 - kAdamBeta2) * g[j] * g[j]);
      w[j] -= static_cast<float>(lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + kAdamEps));
    }
  }
}

// ---------------------------------------------------------------------------
// Training data stream
// ---------------------------------------------------------------------------

struct TrainingData {
  std::vector<const DatasetManifest*> labelled;  // age/gender datasets
  const DatasetManifest* detection_only = nullptr;
};

/// Produces augmented training scenes. With tiling, each scene is a grid of
/// 1, 4 or 9 cells filled from up to `max_distinct_sources` sampled scenes,
/// and is swapped for a detection-only scene with the configured probability.
class TrainingStream {
 public:
  TrainingStream(const TrainingData& data, const TrainConfig& cfg, int canvas_side)
      : data_(data), cfg_(cfg), canvas_(canvas_side), sampler_(data.labelled, cfg.seed ^ 0x5a5a5a5aULL) {}

  Scene next(std::mt19937_64& rng) {
    Scene s;
    if (cfg_.tiling) {
      const auto& counts = cfg_.tiling_config.allowed_tile_counts;
      const int n = counts[std::uniform_int_distribution<std::size_t>(0, counts.size() - 1)(rng)];
      const int distinct = std::min(n, cfg_.tiling_config.max_distinct_sources);
      std::vector<Scene> sources;
      for (int i = 0; i < distinct; ++i) sources.push_back(sampler_.next_scene());
      s = tile_scenes(sources, n, canvas_, rng, cfg_.tiling_config);
      if (data_.detection_only)
        s = mix_detection_only(std::move(s), *data_.detection_only, cfg_.tiling_config.detection_only_mix, rng);
    } else {
      s = sampler_.next_scene();
    }
    return default_augment(s, rng, cfg_.augment);
  }

  std::size_t epoch_length() const { return sampler_.epoch_length(); }
  WeightedSampler& sampler() { return sampler_; }
  const WeightedSampler& sampler() const { return sampler_; }

 private:
  TrainingData data_;
  TrainConfig cfg_;
  int canvas_;
  WeightedSampler sampler_;
};

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::string phase;  // "detector" or "age"
  int epoch = 0;      // global epoch index
  double lr = 0;
  double l_det = 0, l_age = 0, l_gen = 0, l_total = 0;  // means over steps
  int steps = 0;
  std::optional<EvalReport> val;
};

struct TrainerState {
  int epoch = 0;  // next global epoch to run
  AdamState det_adam, age_adam;
  std::string rng;
  std::string sampler_rng;
};

inline std::string rng_to_string(const std::mt19937_64& r) {
  std::ostringstream os;
  os << r;
  return os.str();
}
inline void rng_from_string(std::mt19937_64& r, const std::string& s) {
  std::istringstream is(s);
  is >> r;
  if (!is) throw std::runtime_error("invalid rng state");
}

class Trainer {
 public:
  using EpochCallback = std::function<void(const EpochRecord&)>;

  Trainer(Model<float>& model, TrainConfig cfg, TrainingData data)
      : model_(model), cfg_(std::move(cfg)), stream_(data, cfg_, model.config.image_side), rng_(cfg_.seed) {
    cfg_.validate();
    if (data.labelled.empty()) throw std::invalid_argument("Trainer: no labelled datasets");
    for (const auto* m : data.labelled)
      for (const auto& s : m->scenes)
        if (s.width() != model.config.image_side || s.height() != model.config.image_side)
          throw std::invalid_argument("Trainer: scene size does not match the model's image_side");
  }

  const TrainConfig& config() const { return cfg_; }
  int epoch() const { return epoch_; }
  bool done() const { return epoch_ >= cfg_.total_epochs(); }
  bool in_detector_phase(int e) const { return e < cfg_.detector_epochs; }

  double lr_at(int e) const {
    return in_detector_phase(e) ? cfg_.detector_lr.at(e) : cfg_.lr.at(e - cfg_.detector_epochs);
  }

  TrainerState state() const {
    return {epoch_, det_adam_, age_adam_, rng_to_string(rng_), stream_.sampler().rng_state()};
  }
  void restore(const TrainerState& s) {
    epoch_ = s.epoch;
    det_adam_ = s.det_adam;
    age_adam_ = s.age_adam;
    rng_from_string(rng_, s.rng);
    stream_.sampler().set_rng_state(s.sampler_rng);
  }

  EpochRecord run_epoch() {
    if (done()) throw std::logic_error("Trainer: schedule already complete");
    const int e = epoch_;
    const bool det_phase = in_detector_phase(e);
    const bool frozen = cfg_.mode == TrainMode::frozen_detector;
    BatchOptions opt;
    opt.training = true;
    if (det_phase) {
      opt.k = 1;
      opt.objective = Objective::detection_only;
      opt.train_detector = true;
      opt.train_age = false;
    } else {
      opt.k = cfg_.effective_k_train();
      opt.objective = frozen ? Objective::age_only : Objective::full;
      opt.train_detector = !frozen;
      opt.train_age = true;
    }
    EpochRecord rec;
    rec.phase = det_phase ? "detector" : "age";
    rec.epoch = e;
    rec.lr = lr_at(e);
    const int steps =
        static_cast<int>((stream_.epoch_length() + cfg_.batch_size - 1) / static_cast<std::size_t>(cfg_.batch_size));
    for (int step = 0; step < steps; ++step) {
      std::vector<Scene> batch;
      for (int b = 0; b < cfg_.batch_size; ++b) batch.push_back(stream_.next(rng_));
      std::vector<const Scene*> ptrs;
      for (const auto& s : batch) ptrs.push_back(&s);
      auto g = build_batch(model_, std::span<const Scene* const>(ptrs), opt, cfg_.weights, rng_);
      const double total = g.objective.value()[0];
      if (!std::isfinite(total)) {
        std::ostringstream os;
        os << "non-finite loss at epoch " << e << " step " << step << " (seed " << cfg_.seed
           << ", L_det=" << g.l_det.value()[0] << ", L_age=" << g.l_age.value()[0] << ", L_gen=" << g.l_gen.value()[0]
           << ")";
        throw std::runtime_error(os.str());
      }
      ag::backward(g.objective);
      if (opt.train_detector) {
        auto grads = nn::zero_grads(model_.det_params);
        g.det_p.collect(grads);
        adam_step(model_.det_params, grads, det_adam_, rec.lr);
      }
      if (opt.train_age) {
        auto grads = nn::zero_grads(model_.age_params);
        g.age_p.collect(grads);
        adam_step(model_.age_params, grads, age_adam_, rec.lr);
      }
      rec.l_det += g.l_det.value()[0];
      rec.l_age += g.l_age.value()[0];
      rec.l_gen += g.l_gen.value()[0];
      rec.l_total += total;
    }
    rec.steps = steps;
    if (steps > 0) {
      rec.l_det /= steps;
      rec.l_age /= steps;
      rec.l_gen /= steps;
      rec.l_total /= steps;
    }
    ++epoch_;
    return rec;
  }

  /// Runs the remaining schedule. `validation`, when given, is evaluated
  /// after every `eval_every`-th epoch and at the end.
  std::vector<EpochRecord> run(const EpochCallback& on_epoch = {}, const DatasetManifest* validation = nullptr,
                               int eval_every = 0, const EvalOptions& eval_opt = {}) {
    std::vector<EpochRecord> log;
    while (!done()) {
      auto rec = run_epoch();
      const bool last = done();
      if (validation && !in_detector_phase(rec.epoch) && (last || (eval_every > 0 && (rec.epoch + 1) % eval_every == 0)))
        rec.val = evaluate(model_, *validation, eval_opt);
      if (on_epoch) on_epoch(rec);
      log.push_back(std::move(rec));
    }
    return log;
  }

 private:
  Model<float>& model_;
  TrainConfig cfg_;
  TrainingStream stream_;
  std::mt19937_64 rng_;
  int epoch_ = 0;
  AdamState det_adam_, age_adam_;
};

}  // namespace crowdage
