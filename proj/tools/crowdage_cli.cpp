// crowdage: synth | train | eval | infer
//
// Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
// Relative output paths are resolved against $CROWDAGE_OUTPUT_ROOT when set.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "crowdage/checkpoint.hpp"
#include "crowdage/config_io.hpp"
#include "crowdage/evaluation.hpp"
#include "crowdage/io.hpp"
#include "crowdage/pipeline.hpp"
#include "crowdage/synth_data.hpp"

namespace fs = std::filesystem;
using namespace crowdage;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path output_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("CROWDAGE_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
  }
  return path;
}

void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw UsageError(dir.string() + " is not empty (use --force to overwrite)");
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

std::pair<int, int> parse_face_range(const std::string& s) {
  const auto dash = s.find('-');
  try {
    if (dash == std::string::npos) {
      const int n = std::stoi(s);
      return {n, n};
    }
    return {std::stoi(s.substr(0, dash)), std::stoi(s.substr(dash + 1))};
  } catch (const std::exception&) {
    throw UsageError("--faces: expected N or MIN-MAX, got '" + s + "'");
  }
}

// --- synth ------------------------------------------------------------------

struct SynthArgs {
  int n = 0;
  std::string faces = "1";
  std::uint64_t seed = 0;
  std::string out;
  int side = 256;
  double scale_min = 0.3, scale_max = 0.5;
  std::string name = "synthetic";
  bool no_age = false, no_gender = false;
  double weight = 0;
  bool force = false;
};

int cmd_synth(const SynthArgs& a) {
  const auto [fmin, fmax] = parse_face_range(a.faces);
  if (a.n < 1) throw UsageError("--n must be >= 1");
  if (fmin < 0 || fmax < fmin) throw UsageError("--faces: invalid range");
  SynthDatasetSpec spec;
  spec.name = a.name;
  spec.n_scenes = a.n;
  spec.min_faces = fmin;
  spec.max_faces = fmax;
  spec.image_side = a.side;
  spec.face_scale = {a.scale_min, a.scale_max};
  spec.label_age = !a.no_age;
  spec.label_gender = !a.no_gender;
  spec.seed = a.seed;
  const fs::path dir = output_path(a.out);
  prepare_out_dir(dir, a.force);
  DatasetManifest m = generate_dataset(spec);
  m.weight = a.weight;
  write_manifest(dir, m,
                 {{"seed", a.seed},
                  {"faces_per_scene", {fmin, fmax}},
                  {"face_scale", {a.scale_min, a.scale_max}},
                  {"labels", {{"age", spec.label_age}, {"gender", spec.label_gender}}}});
  std::size_t faces = 0;
  for (const auto& s : m.scenes) faces += s.faces.size();
  std::cout << "wrote " << m.scenes.size() << " scenes (" << faces << " faces) to " << dir.string() << "\n";
  return 0;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string mode, preset, out, resume;
  std::optional<bool> tiling, connection;
  std::optional<int> epochs, detector_epochs, k_train, batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  int checkpoint_every = 10;
  bool force = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc;
  try {
    rc = load_run_config(a.config);
    if (!a.mode.empty()) rc.train.mode = train_mode_from_string(a.mode);
    if (!a.preset.empty()) rc.preset = a.preset;
    if (!a.out.empty()) rc.out_dir = a.out;
    if (a.tiling) rc.train.tiling = *a.tiling;
    if (a.connection) rc.model_overrides["age"]["intermediate_connection"] = *a.connection;
    if (a.epochs) rc.train.epochs = *a.epochs;
    if (a.detector_epochs) rc.train.detector_epochs = *a.detector_epochs;
    if (a.k_train) rc.train.k_train = *a.k_train;
    if (a.batch_size) rc.train.batch_size = *a.batch_size;
    if (a.lr) rc.train.lr.initial = *a.lr;
    if (a.seed) rc.train.seed = *a.seed;
    rc.validate();
  } catch (const ConfigError& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
  const fs::path dir = output_path(rc.out_dir);
  if (a.resume.empty()) prepare_out_dir(dir, a.force);
  else fs::create_directories(dir);

  std::vector<DatasetManifest> labelled;
  for (const auto& d : rc.datasets) {
    labelled.push_back(read_manifest(d.path));
    if (d.weight > 0) labelled.back().weight = d.weight;
  }
  std::optional<DatasetManifest> det_only, validation;
  if (!rc.detection_only.empty()) {
    det_only = read_manifest(rc.detection_only);
    for (auto& s : det_only->scenes) s = strip_labels(std::move(s));
  }
  if (!rc.validation.empty()) validation = read_manifest(rc.validation);

  Model<float> model = Model<float>::build(rc.model(), rc.train.seed);
  TrainingData data;
  for (const auto& m : labelled) data.labelled.push_back(&m);
  data.detection_only = det_only ? &*det_only : nullptr;
  Trainer trainer(model, rc.train, data);
  if (!a.resume.empty()) {
    Checkpoint ck = load_checkpoint(a.resume);
    if (!(ck.model.config == model.config)) throw UsageError("--resume: checkpoint model config differs from the run");
    if (!ck.state) throw UsageError("--resume: checkpoint has no trainer state");
    model.det_params = ck.model.det_params;
    model.age_params = ck.model.age_params;
    trainer.restore(*ck.state);
  }

  std::ofstream(dir / "config.json") << to_json(rc).dump(2) << "\n";
  std::ofstream log(dir / "metrics.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
  fs::create_directories(dir / "checkpoints");
  EvalOptions eo;
  eo.k = rc.train.k_eval;
  eo.conf_threshold = rc.train.conf_threshold;
  trainer.run(
      [&](const EpochRecord& rec) {
        log << to_json(rec).dump() << "\n";
        log.flush();
        std::cout << rec.phase << " epoch " << rec.epoch << " lr " << rec.lr << " L " << rec.l_total << " (det "
                  << rec.l_det << ", age " << rec.l_age << ", gen " << rec.l_gen << ")";
        if (rec.val) std::cout << " val mae " << rec.val->mae << " recall " << rec.val->recall;
        std::cout << "\n";
        const auto st = trainer.state();
        const bool last = trainer.done();
        if (last || (a.checkpoint_every > 0 && (rec.epoch + 1) % a.checkpoint_every == 0)) {
          std::ostringstream name;
          name << "epoch_" << std::setw(4) << std::setfill('0') << rec.epoch + 1 << ".ckpt";
          save_checkpoint(dir / "checkpoints" / name.str(), model, &trainer.config(), &st);
        }
        if (last) save_checkpoint(dir / "final.ckpt", model, &trainer.config(), &st);
      },
      validation ? &*validation : nullptr, rc.eval_every, eo);
  std::cout << "final checkpoint: " << (dir / "final.ckpt").string() << "\n";
  return 0;
}

// --- eval -------------------------------------------------------------------

void print_table(const EvalReport& r) {
  auto pct = [](double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
  };
  std::cout << "\n" << std::left << std::setw(10) << "group" << std::right << std::setw(8) << "faces" << std::setw(10)
            << "age %" << std::setw(10) << "1-off %" << std::setw(10) << "gender %" << "\n";
  for (int g = 0; g < kNumAgeGroups; ++g) {
    const auto& s = r.per_group[g];
    std::cout << std::left << std::setw(10) << kAgeGroupNames[g] << std::right << std::setw(8) << s.count
              << std::setw(10) << pct(s.age_accuracy) << std::setw(10) << pct(s.one_off_accuracy) << std::setw(10)
              << pct(s.gender_accuracy) << "\n";
  }
  std::cout << std::left << std::setw(10) << "all" << std::right << std::setw(8) << r.n_age << std::setw(10)
            << pct(r.group_accuracy) << std::setw(10) << pct(r.one_off_accuracy) << std::setw(10)
            << pct(r.gender_accuracy) << "\n\n";
  std::cout << "MAE " << pct(r.mae) << " years over " << r.n_age << " faces; detection recall " << pct(100 * r.recall)
            << "%, precision " << pct(100 * r.precision) << "% at IOU 0.5\n";
}

struct EvalArgs {
  std::string checkpoint, manifest, json_out;
  int k = 20;
  double conf = 0.2;
  bool largest = false;
};

int cmd_eval(const EvalArgs& a) {
  if (a.k < 1) throw UsageError("-k must be >= 1");
  if (!(a.conf > 0 && a.conf < 1)) throw UsageError("--conf must be in (0,1)");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const DatasetManifest m = read_manifest(a.manifest);
  EvalOptions eo;
  eo.k = a.k;
  eo.conf_threshold = a.conf;
  eo.largest_face = a.largest;
  EvalReport r;
  try {
    r = evaluate(ck.model, m, eo);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  json j = to_json(r);
  j["protocol"] = {{"k", a.k}, {"conf", a.conf}, {"largest_face", a.largest}};
  std::cout << j.dump() << "\n";
  if (!a.json_out.empty()) std::ofstream(output_path(a.json_out)) << j.dump(2) << "\n";
  print_table(r);
  return 0;
}

// --- infer ------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint, image;
  int k = 20;
  double conf = 0.2;
};

int cmd_infer(const InferArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Image img = read_png(a.image);
  const int side = ck.model.config.image_side;
  const bool resize = img.width != side || img.height != side;
  const double sx = static_cast<double>(img.width) / side, sy = static_cast<double>(img.height) / side;
  for (const auto& f : infer_faces(ck.model, resize ? resize_bilinear(img, side, side) : img, a.k, a.conf)) {
    const BBox b = resize ? scale_box(f.detection.box, sx, sy) : f.detection.box;
    std::cout << json{{"box", {b.x1, b.y1, b.x2, b.y2}},
                      {"confidence", f.detection.confidence},
                      {"age", f.expected_age},
                      {"gender", std::string(to_string(f.gender.argmax()))}}
                     .dump()
              << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-model multi-person age and gender estimation"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene manifest");
  synth->add_option("-n,--n", sa.n, "Number of scenes")->required();
  synth->add_option("--faces", sa.faces, "Faces per scene: N or MIN-MAX")->capture_default_str();
  synth->add_option("--seed", sa.seed, "Generator seed")->capture_default_str();
  synth->add_option("-o,--out", sa.out, "Output directory")->required();
  synth->add_option("--side", sa.side, "Image side in pixels")->capture_default_str();
  synth->add_option("--scale-min", sa.scale_min, "Smallest face height / image side")->capture_default_str();
  synth->add_option("--scale-max", sa.scale_max, "Largest face height / image side")->capture_default_str();
  synth->add_option("--name", sa.name, "Dataset name")->capture_default_str();
  synth->add_option("--weight", sa.weight, "Sampling weight recorded in the manifest");
  synth->add_flag("--no-age", sa.no_age, "Omit age labels");
  synth->add_flag("--no-gender", sa.no_gender, "Omit gender labels");
  synth->add_flag("--force", sa.force, "Overwrite a non-empty output directory");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train from a JSON run config");
  train->add_option("config", ta.config, "Run config (JSON)")->required();
  train->add_option("--mode", ta.mode, "frozen_detector | end_to_end");
  train->add_option("--preset", ta.preset, "desk | paper");
  train->add_option("-o,--out", ta.out, "Output directory");
  train->add_option("--tiling", ta.tiling, "Enable tiling augmentation (true/false)");
  train->add_option("--connection", ta.connection, "Intermediate feature connection (true/false)");
  train->add_option("--epochs", ta.epochs, "Age-phase epochs");
  train->add_option("--detector-epochs", ta.detector_epochs, "Detector pre-training epochs");
  train->add_option("--k-train", ta.k_train, "Regions per image during training (default 9 with tiling, else 1)");
  train->add_option("--batch-size", ta.batch_size, "Scenes per step");
  train->add_option("--lr", ta.lr, "Initial learning rate of the age phase");
  train->add_option("--seed", ta.seed, "Training seed");
  train->add_option("--resume", ta.resume, "Resume from a checkpoint with trainer state");
  train->add_option("--checkpoint-every", ta.checkpoint_every, "Epochs between checkpoints")->capture_default_str();
  train->add_flag("--force", ta.force, "Overwrite a non-empty output directory");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  eval->add_option("checkpoint", ea.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("manifest", ea.manifest, "Manifest directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("-k", ea.k, "Regions per image")->capture_default_str();
  eval->add_option("--conf", ea.conf, "Confidence threshold")->capture_default_str();
  eval->add_flag("--largest-face", ea.largest, "Single-face protocol: score the largest detection only");
  eval->add_option("--json", ea.json_out, "Also write the report to this file");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Detect faces and estimate age/gender in one image");
  infer->add_option("checkpoint", ia.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  infer->add_option("image", ia.image, "PNG image")->required();
  infer->add_option("-k", ia.k, "Regions per image")->capture_default_str();
  infer->add_option("--conf", ia.conf, "Confidence threshold")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*infer) return cmd_infer(ia);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
