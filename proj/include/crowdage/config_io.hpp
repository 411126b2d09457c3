#pragma once
// JSON (de)serialization of model/training/run configuration. Readers reject
// unknown keys and report the offending field path.

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdage/model.hpp"
#include "crowdage/pipeline.hpp"

namespace crowdage {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError(where + (where.empty() ? "" : ".") + k + ": unknown key");
  }
}

/// Reads j[key] into `out` when present.
template <class T>
void read_field(const json& j, const std::string& where, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + (where.empty() ? "" : ".") + key + ": " + e.what());
  }
}

inline std::string join(const std::string& where, const char* key) {
  return where.empty() ? std::string(key) : where + "." + key;
}

}  // namespace detail

// --- model ------------------------------------------------------------------

inline json to_json(const ModelConfig& c) {
  return {{"detector",
           {{"input_side", c.detector.input_side},
            {"widths", c.detector.widths},
            {"branch_channels", c.detector.branch_channels},
            {"head_channels", c.detector.head_channels}}},
          {"age",
           {{"crop_w", c.age.crop_w},
            {"crop_h", c.age.crop_h},
            {"stem_width", c.age.stem_width},
            {"stem_stride", c.age.stem_stride},
            {"stage_widths", c.age.stage_widths},
            {"stage_blocks", c.age.stage_blocks},
            {"stage_strides", c.age.stage_strides},
            {"head_channels", c.age.head_channels},
            {"dropout", c.age.dropout},
            {"intermediate_connection", c.age.intermediate_connection},
            {"fusion_channels", c.age.fusion_channels}}},
          {"image_side", c.image_side},
          {"top_margin", c.top_margin},
          {"other_margin", c.other_margin}};
}

/// Overlays the keys present in `j` onto `c`.
inline void apply_json(ModelConfig& c, const json& j, const std::string& where = "model") {
  using detail::read_field;
  detail::check_keys(j, where, {"detector", "age", "image_side", "top_margin", "other_margin"});
  if (j.contains("detector")) {
    const auto& d = j["detector"];
    const auto w = detail::join(where, "detector");
    detail::check_keys(d, w, {"input_side", "widths", "branch_channels", "head_channels"});
    read_field(d, w, "input_side", c.detector.input_side);
    read_field(d, w, "widths", c.detector.widths);
    read_field(d, w, "branch_channels", c.detector.branch_channels);
    read_field(d, w, "head_channels", c.detector.head_channels);
  }
  if (j.contains("age")) {
    const auto& a = j["age"];
    const auto w = detail::join(where, "age");
    detail::check_keys(a, w,
                       {"crop_w", "crop_h", "stem_width", "stem_stride", "stage_widths", "stage_blocks",
                        "stage_strides", "head_channels", "dropout", "intermediate_connection", "fusion_channels"});
    read_field(a, w, "crop_w", c.age.crop_w);
    read_field(a, w, "crop_h", c.age.crop_h);
    read_field(a, w, "stem_width", c.age.stem_width);
    read_field(a, w, "stem_stride", c.age.stem_stride);
    read_field(a, w, "stage_widths", c.age.stage_widths);
    read_field(a, w, "stage_blocks", c.age.stage_blocks);
    read_field(a, w, "stage_strides", c.age.stage_strides);
    read_field(a, w, "head_channels", c.age.head_channels);
    read_field(a, w, "dropout", c.age.dropout);
    read_field(a, w, "intermediate_connection", c.age.intermediate_connection);
    read_field(a, w, "fusion_channels", c.age.fusion_channels);
  }
  read_field(j, where, "image_side", c.image_side);
  read_field(j, where, "top_margin", c.top_margin);
  read_field(j, where, "other_margin", c.other_margin);
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  apply_json(c, j);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return c;
}

// --- training ---------------------------------------------------------------

inline json to_json(const LrSchedule& s) {
  return {{"initial", s.initial}, {"milestones", s.milestones}, {"gamma", s.gamma}};
}

inline void apply_json(LrSchedule& s, const json& j, const std::string& where) {
  detail::check_keys(j, where, {"initial", "milestones", "gamma"});
  detail::read_field(j, where, "initial", s.initial);
  detail::read_field(j, where, "milestones", s.milestones);
  detail::read_field(j, where, "gamma", s.gamma);
}

inline json to_json(const TrainConfig& c) {
  const auto& a = c.augment;
  const auto& w = c.weights;
  return {{"mode", to_string(c.mode)},
          {"k_train", c.k_train},
          {"k_eval", c.k_eval},
          {"conf_threshold", c.conf_threshold},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"lr", to_json(c.lr)},
          {"detector_epochs", c.detector_epochs},
          {"detector_lr", to_json(c.detector_lr)},
          {"tiling", c.tiling},
          {"tiling_config",
           {{"allowed_tile_counts", c.tiling_config.allowed_tile_counts},
            {"max_distinct_sources", c.tiling_config.max_distinct_sources},
            {"detection_only_mix", c.tiling_config.detection_only_mix}}},
          {"augment",
           {{"flip", a.flip},
            {"scale", a.scale},
            {"crop", a.crop},
            {"rotate", a.rotate},
            {"color", a.color},
            {"blur", a.blur},
            {"scale_min", a.scale_min},
            {"scale_max", a.scale_max},
            {"crop_fraction", a.crop_fraction},
            {"max_rotation_deg", a.max_rotation_deg},
            {"brightness", a.brightness},
            {"contrast", a.contrast},
            {"blur_probability", a.blur_probability}}},
          {"weights",
           {{"lambda_size", w.lambda_size},
            {"lambda_off", w.lambda_off},
            {"lambda_mean", w.lambda_mean},
            {"lambda_var", w.lambda_var},
            {"lambda_ce", w.lambda_ce},
            {"lambda_gen", w.lambda_gen},
            {"th_iou", w.th_iou}}},
          {"seed", c.seed}};
}

inline void apply_json(TrainConfig& c, const json& j, const std::string& where = "train") {
  using detail::join;
  using detail::read_field;
  detail::check_keys(j, where,
                     {"mode", "k_train", "k_eval", "conf_threshold", "batch_size", "epochs", "lr", "detector_epochs",
                      "detector_lr", "tiling", "tiling_config", "augment", "weights", "seed"});
  if (j.contains("mode")) {
    try {
      c.mode = train_mode_from_string(j["mode"].get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(join(where, "mode") + ": " + e.what());
    }
  }
  read_field(j, where, "k_train", c.k_train);
  read_field(j, where, "k_eval", c.k_eval);
  read_field(j, where, "conf_threshold", c.conf_threshold);
  read_field(j, where, "batch_size", c.batch_size);
  read_field(j, where, "epochs", c.epochs);
  if (j.contains("lr")) apply_json(c.lr, j["lr"], join(where, "lr"));
  read_field(j, where, "detector_epochs", c.detector_epochs);
  if (j.contains("detector_lr")) apply_json(c.detector_lr, j["detector_lr"], join(where, "detector_lr"));
  read_field(j, where, "tiling", c.tiling);
  if (j.contains("tiling_config")) {
    const auto w = join(where, "tiling_config");
    const auto& t = j["tiling_config"];
    detail::check_keys(t, w, {"allowed_tile_counts", "max_distinct_sources", "detection_only_mix"});
    read_field(t, w, "allowed_tile_counts", c.tiling_config.allowed_tile_counts);
    read_field(t, w, "max_distinct_sources", c.tiling_config.max_distinct_sources);
    read_field(t, w, "detection_only_mix", c.tiling_config.detection_only_mix);
  }
  if (j.contains("augment")) {
    const auto w = join(where, "augment");
    const auto& t = j["augment"];
    auto& a = c.augment;
    detail::check_keys(t, w,
                       {"flip", "scale", "crop", "rotate", "color", "blur", "scale_min", "scale_max", "crop_fraction",
                        "max_rotation_deg", "brightness", "contrast", "blur_probability"});
    read_field(t, w, "flip", a.flip);
    read_field(t, w, "scale", a.scale);
    read_field(t, w, "crop", a.crop);
    read_field(t, w, "rotate", a.rotate);
    read_field(t, w, "color", a.color);
    read_field(t, w, "blur", a.blur);
    read_field(t, w, "scale_min", a.scale_min);
    read_field(t, w, "scale_max", a.scale_max);
    read_field(t, w, "crop_fraction", a.crop_fraction);
    read_field(t, w, "max_rotation_deg", a.max_rotation_deg);
    read_field(t, w, "brightness", a.brightness);
    read_field(t, w, "contrast", a.contrast);
    read_field(t, w, "blur_probability", a.blur_probability);
  }
  if (j.contains("weights")) {
    const auto w = join(where, "weights");
    const auto& t = j["weights"];
    auto& l = c.weights;
    detail::check_keys(t, w,
                       {"lambda_size", "lambda_off", "lambda_mean", "lambda_var", "lambda_ce", "lambda_gen", "th_iou"});
    read_field(t, w, "lambda_size", l.lambda_size);
    read_field(t, w, "lambda_off", l.lambda_off);
    read_field(t, w, "lambda_mean", l.lambda_mean);
    read_field(t, w, "lambda_var", l.lambda_var);
    read_field(t, w, "lambda_ce", l.lambda_ce);
    read_field(t, w, "lambda_gen", l.lambda_gen);
    read_field(t, w, "th_iou", l.th_iou);
  }
  read_field(j, where, "seed", c.seed);
}

// --- run --------------------------------------------------------------------

struct DatasetRef {
  std::string path;
  double weight = 0;  // <= 0: proportional to scene count
  bool operator==(const DatasetRef&) const = default;
};

/// Everything a training run needs: preset + overrides, the training
/// schedule, dataset manifests and the output directory.
struct RunConfig {
  std::string preset = "desk";
  json model_overrides = json::object();
  TrainConfig train;
  std::vector<DatasetRef> datasets;
  std::string detection_only;  // optional manifest of unlabelled multi-face scenes
  std::string validation;      // optional manifest evaluated during training
  int eval_every = 0;
  std::string out_dir;

  ModelConfig model() const {
    ModelConfig c = preset_by_name(preset);
    apply_json(c, model_overrides);
    return c;
  }

  /// Field-level checks, including that referenced paths exist.
  void validate() const {
    try {
      model().validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(std::string("model: ") + e.what());
    }
    try {
      train.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("train: ") + e.what());
    }
    if (datasets.empty()) throw ConfigError("datasets: at least one labelled dataset is required");
    for (std::size_t i = 0; i < datasets.size(); ++i)
      if (!std::filesystem::is_directory(datasets[i].path))
        throw ConfigError("datasets[" + std::to_string(i) + "].path: not found: " + datasets[i].path);
    if (!detection_only.empty() && !std::filesystem::is_directory(detection_only))
      throw ConfigError("detection_only: not found: " + detection_only);
    if (!validation.empty() && !std::filesystem::is_directory(validation))
      throw ConfigError("validation: not found: " + validation);
    if (eval_every < 0) throw ConfigError("eval_every: must be >= 0");
    if (out_dir.empty()) throw ConfigError("out_dir: required");
  }
};

inline json to_json(const RunConfig& r) {
  json ds = json::array();
  for (const auto& d : r.datasets) ds.push_back({{"path", d.path}, {"weight", d.weight}});
  return {{"preset", r.preset},     {"model", r.model_overrides},       {"train", to_json(r.train)},
          {"datasets", ds},         {"detection_only", r.detection_only}, {"validation", r.validation},
          {"eval_every", r.eval_every}, {"out_dir", r.out_dir}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig r;
  detail::check_keys(j, "",
                     {"preset", "model", "train", "datasets", "detection_only", "validation", "eval_every", "out_dir"});
  detail::read_field(j, "", "preset", r.preset);
  if (r.preset != "desk" && r.preset != "paper") throw ConfigError("preset: must be 'desk' or 'paper'");
  if (j.contains("model")) {
    ModelConfig probe = preset_by_name(r.preset);
    apply_json(probe, j["model"]);  // key check
    r.model_overrides = j["model"];
  }
  if (j.contains("train")) apply_json(r.train, j["train"]);
  if (j.contains("datasets")) {
    if (!j["datasets"].is_array()) throw ConfigError("datasets: expected an array");
    for (std::size_t i = 0; i < j["datasets"].size(); ++i) {
      const auto& d = j["datasets"][i];
      const std::string w = "datasets[" + std::to_string(i) + "]";
      DatasetRef ref;
      if (d.is_string()) {
        ref.path = d.get<std::string>();
      } else {
        detail::check_keys(d, w, {"path", "weight"});
        detail::read_field(d, w, "path", ref.path);
        detail::read_field(d, w, "weight", ref.weight);
      }
      r.datasets.push_back(ref);
    }
  }
  detail::read_field(j, "", "detection_only", r.detection_only);
  detail::read_field(j, "", "validation", r.validation);
  detail::read_field(j, "", "eval_every", r.eval_every);
  detail::read_field(j, "", "out_dir", r.out_dir);
  return r;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

// --- reports ----------------------------------------------------------------

inline json to_json(const EvalReport& r) {
  json groups = json::array();
  for (int g = 0; g < kNumAgeGroups; ++g) {
    const auto& s = r.per_group[g];
    groups.push_back({{"group", kAgeGroupNames[g]},
                      {"count", s.count},
                      {"age_accuracy", s.age_accuracy},
                      {"one_off_accuracy", s.one_off_accuracy},
                      {"gender_accuracy", s.gender_accuracy}});
  }
  return {{"mae", r.mae},
          {"group_accuracy", r.group_accuracy},
          {"one_off_accuracy", r.one_off_accuracy},
          {"gender_accuracy", r.gender_accuracy},
          {"recall", r.recall},
          {"precision", r.precision},
          {"n_scenes", r.n_scenes},
          {"n_faces", r.n_faces},
          {"n_detections", r.n_detections},
          {"n_matched", r.n_matched},
          {"n_age", r.n_age},
          {"n_gender", r.n_gender},
          {"per_group", groups}};
}

inline json to_json(const EpochRecord& e) {
  json j = {{"phase", e.phase}, {"epoch", e.epoch}, {"lr", e.lr},         {"L_det", e.l_det},
            {"L_age", e.l_age}, {"L_gen", e.l_gen}, {"L", e.l_total}, {"steps", e.steps}};
  if (e.val) j["val"] = to_json(*e.val);
  return j;
}

}  // namespace crowdage
