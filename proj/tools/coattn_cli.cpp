// coattn: dataset generation, training, inference, evaluation and gradient
// checks from the command line.
//
// Exit codes: 0 ok, 1 unexpected error, 2 configuration, 3 divergence,
// 4 checkpoint, 5 data mismatch.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "coattn/coattn.hpp"

namespace fs = std::filesystem;
using namespace coattn;

namespace {

enum Exit { kOk = 0, kUnexpected = 1, kConfig = 2, kDivergence = 3, kCheckpoint = 4, kDataMismatch = 5 };

struct DataMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Settings go to stderr so that stdout stays machine-readable.
void print_settings(const std::string& command, const std::string& body) {
  std::cerr << "# coattn " << command << " settings\n";
  std::istringstream is(body);
  for (std::string line; std::getline(is, line);) std::cerr << "#   " << line << "\n";
}

/// A dataset root holding train/ is read as its train split.
fs::path split_dir(const fs::path& dir, const char* preferred) {
  if (fs::exists(dir / "manifest.jsonl")) return dir;
  if (fs::exists(dir / preferred / "manifest.jsonl")) return dir / preferred;
  throw DataMismatch("no manifest.jsonl in " + dir.string() + " or " + (dir / preferred).string());
}

Dataset load_split(const fs::path& dir, const char* preferred) {
  try {
    return read_dataset(split_dir(dir, preferred));
  } catch (const ParseError& e) {
    throw DataMismatch(e.what());
  }
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  std::string spec;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int gen_data(const GenDataArgs& a) {
  DatasetSpec spec = a.spec.empty() ? DatasetSpec{} : load_dataset_spec(a.spec);
  if (a.seed_set) spec.seed = a.seed;
  spec.validate();
  print_settings("gen-data", describe(spec) + "out = " + a.out + "\n");
  const GeneratedDataset ds = generate(spec);
  write_dataset(ds.train, fs::path(a.out) / "train");
  write_dataset(ds.test, fs::path(a.out) / "test");
  std::cout << "train " << ds.train.samples.size() << "\ntest " << ds.test.samples.size() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data, config, out, loss, resume;
};

/// Keeps the CSV rows for epochs before `next_epoch` when resuming.
void prepare_metrics(const fs::path& path, std::size_t next_epoch) {
  std::vector<std::string> keep{metrics_csv_header()};
  if (next_epoch > 0 && fs::exists(path)) {
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line) && keep.size() <= next_epoch) keep.push_back(line);
  }
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : keep) os << l << "\n";
}

int train_cmd(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  if (!a.loss.empty()) cfg.terms = parse_loss_arm(a.loss);
  cfg.validate();
  print_settings("train", describe(cfg) + "data = " + a.data + "\nout = " + a.out +
                              "\nresume = " + (a.resume.empty() ? "(none)" : a.resume) + "\n");
  const Dataset data = load_split(a.data, "train");
  TrainState state = a.resume.empty() ? initial_state(data, cfg) : load_train_state(a.resume);
  if (!a.resume.empty() && state.params.num_classes() != data.num_classes()) {
    throw DataMismatch("checkpoint has " + std::to_string(state.params.num_classes()) + " classes, dataset " +
                       std::to_string(data.num_classes()));
  }
  fs::create_directories(a.out);
  const fs::path metrics = fs::path(a.out) / "metrics.csv";
  prepare_metrics(metrics, state.next_epoch);
  std::ofstream csv(metrics, std::ios::app);
  TrainHooks hooks;
  hooks.checkpoint_dir = a.out;
  hooks.on_epoch = [&](const EpochMetrics& m) {
    csv << metrics_csv_row(m) << "\n";
    csv.flush();
    std::cerr << "epoch " << m.epoch << " loss " << m.loss_total << " f1 " << m.f1 << "\n";
  };
  train_from(data, cfg, std::move(state), hooks);
  std::cout << (fs::path(a.out) / "final.ckpt").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  std::string data, config, out;
};

int ablate_cmd(const AblateArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  print_settings("ablate", describe(cfg) + "arms = basic, basic+coatt, full\ndata = " + a.data + "\nout = " + a.out + "\n");
  const Dataset data = load_split(a.data, "train");
  for (const char* arm : {"basic", "basic+coatt", "full"}) {
    cfg.terms = parse_loss_arm(arm);
    const fs::path dir = fs::path(a.out) / arm;
    fs::create_directories(dir);
    std::ofstream csv(dir / "metrics.csv");
    csv << metrics_csv_header() << "\n";
    TrainHooks hooks;
    hooks.checkpoint_dir = dir.string();
    hooks.on_epoch = [&](const EpochMetrics& m) {
      csv << metrics_csv_row(m) << "\n";
      std::cerr << arm << " epoch " << m.epoch << " loss " << m.loss_total << " f1 " << m.f1 << "\n";
    };
    train(data, cfg, hooks);
    std::cout << (dir / "final.ckpt").string() << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string data, ckpt, out, pool, strategy = "multi";
  std::size_t related = 3;
  double theta = 0.2;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

int infer_cmd(const InferArgs& a) {
  InferConfig cfg;
  cfg.strategy = parse_strategy(a.strategy);
  cfg.related = a.related;
  cfg.theta = a.theta;
  cfg.seed = a.seed;
  cfg.validate();
  std::ostringstream s;
  s << "strategy = " << strategy_name(cfg.strategy) << "\nR = " << cfg.related << "\ntheta = " << cfg.theta
    << "\nseed = " << cfg.seed << "\njobs = " << a.jobs << "\ndata = " << a.data << "\npool = "
    << (a.pool.empty() ? a.data : a.pool) << "\nckpt = " << a.ckpt << "\nout = " << a.out << "\n";
  print_settings("infer", s.str());

  const ModelParams params = load_checkpoint(a.ckpt);
  const Dataset data = load_split(a.data, "train");
  const Dataset pool = a.pool.empty() ? data : load_split(a.pool, "train");
  for (const Dataset* d : {&data, &pool}) {
    if (d->num_classes() != params.num_classes()) {
      throw DataMismatch("checkpoint has " + std::to_string(params.num_classes()) + " classes, dataset " +
                         std::to_string(d->num_classes()));
    }
  }
  const auto results = infer_all(params, data.samples, pool.samples, cfg, a.jobs);

  const fs::path maps_dir = fs::path(a.out) / "maps", masks_dir = fs::path(a.out) / "masks";
  fs::create_directories(maps_dir);
  fs::create_directories(masks_dir);
  std::ofstream log(fs::path(a.out) / "inference.jsonl", std::ios::binary);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const ImageSample& q = data.samples[i];
    const auto& r = results[i];
    for (int k : q.labels.class_ids()) {
      const Tensor up = upsample_bilinear(channel(r.map.maps, static_cast<std::size_t>(k - 1)), q.height(), q.width());
      write_pgm((maps_dir / (q.id + "_class" + std::to_string(k) + ".pgm")).string(), map_to_gray(up));
    }
    write_pgm((masks_dir / (q.id + ".pgm")).string(), to_gray(r.mask));
    nlohmann::ordered_json rec;
    rec["id"] = q.id;
    rec["related"] = r.map.related_ids;
    log << rec.dump() << "\n";
  }
  std::cout << results.size() << " images\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, classes;
};

int eval_cmd(const EvalArgs& a) {
  print_settings("eval", "pred = " + a.pred + "\ngt = " + a.gt + "\nclasses = " +
                             (a.classes.empty() ? "(from gt)" : a.classes) + "\nignore = 255\n");
  const Dataset gt = load_split(a.gt, "test");
  const std::vector<std::string> names =
      a.classes.empty() ? gt.class_names : read_classes(fs::path(a.classes));
  if (names.size() != gt.num_classes()) throw DataMismatch("class list does not match the ground truth");

  fs::path pred_dir = a.pred;
  if (fs::is_directory(pred_dir / "masks")) pred_dir /= "masks";
  if (!fs::is_directory(pred_dir)) throw DataMismatch("no prediction directory " + pred_dir.string());
  std::set<std::string> pred_ids, gt_ids;
  for (const auto& e : fs::directory_iterator(pred_dir))
    if (e.path().extension() == ".pgm") pred_ids.insert(e.path().stem().string());
  for (const auto& s : gt.samples) gt_ids.insert(s.id);
  if (pred_ids != gt_ids) {
    std::vector<std::string> only_pred, only_gt;
    std::set_difference(pred_ids.begin(), pred_ids.end(), gt_ids.begin(), gt_ids.end(), std::back_inserter(only_pred));
    std::set_difference(gt_ids.begin(), gt_ids.end(), pred_ids.begin(), pred_ids.end(), std::back_inserter(only_gt));
    throw DataMismatch("prediction and ground-truth ids differ (" + std::to_string(only_pred.size()) +
                       " only in prediction, " + std::to_string(only_gt.size()) + " only in ground truth)");
  }

  ConfusionAccumulator acc(gt.num_classes());
  for (const auto& s : gt.samples) {
    if (!s.has_mask) throw DataMismatch("ground truth " + s.id + " has no mask");
    Mask pred;
    try {
      pred = to_mask(read_pgm((pred_dir / (s.id + ".pgm")).string()));
      acc.add(pred, s.mask);
    } catch (const ParseError& e) {
      throw DataMismatch(e.what());
    } catch (const DimensionError& e) {
      throw DataMismatch(s.id + ": " + e.what());
    } catch (const ContractError& e) {
      throw DataMismatch(s.id + ": " + e.what());
    }
  }
  nlohmann::ordered_json report = miou_report(miou(acc), names);
  report["images"] = gt.samples.size();
  std::cout << report.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

int gradcheck_cmd(std::uint64_t seed, double tolerance) {
  std::ostringstream s;
  s << "seed = " << seed << "\neps = 1e-5\ntolerance = " << tolerance << "\n";
  print_settings("gradcheck", s.str());
  bool ok = true;
  for (const auto& r : run_gradcheck(seed)) {
    const bool pass = r.max_rel_error < tolerance;
    ok = ok && pass;
    std::cout << r.op << " " << std::scientific << std::setprecision(3) << r.max_rel_error << " "
              << (pass ? "ok" : "FAIL") << "\n";
  }
  return ok ? kOk : kUnexpected;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Co-attention classifier for weakly supervised segmentation on synthetic shapes"};
  app.require_subcommand(1, 1);

  GenDataArgs gd;
  auto* c_gen = app.add_subcommand("gen-data", "Generate the synthetic dataset (train/ and test/ splits)");
  c_gen->add_option("--out", gd.out, "Output directory")->required();
  c_gen->add_option("--spec", gd.spec, "Dataset spec file (key = value)");
  auto* gen_seed = c_gen->add_option("--seed", gd.seed, "Override the spec seed");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train on image pairs");
  c_train->add_option("--data", tr.data, "Dataset split (or root containing train/)")->required();
  c_train->add_option("--config", tr.config, "Training config file (key = value)");
  c_train->add_option("--out", tr.out, "Output directory for checkpoints and metrics.csv")->required();
  c_train->add_option("--loss", tr.loss, "basic | basic+coatt | full (overrides the config toggles)");
  c_train->add_option("--resume", tr.resume, "Resume from a checkpoint written by train");

  AblateArgs ab;
  auto* c_ablate = app.add_subcommand("ablate", "Train the basic, basic+coatt and full arms with one seed");
  c_ablate->add_option("--data", ab.data, "Dataset split (or root containing train/)")->required();
  c_ablate->add_option("--config", ab.config, "Training config file");
  c_ablate->add_option("--out", ab.out, "Output directory; one subdirectory per arm")->required();

  InferArgs in;
  auto* c_infer = app.add_subcommand("infer", "Localization maps and pseudo masks");
  c_infer->add_option("--data", in.data, "Images to label (split directory)")->required();
  c_infer->add_option("--ckpt", in.ckpt, "Model checkpoint")->required();
  c_infer->add_option("--out", in.out, "Output directory")->required();
  c_infer->add_option("--strategy", in.strategy, "single | multi")->capture_default_str();
  c_infer->add_option("--R", in.related, "Related images per class (multi)")->capture_default_str();
  c_infer->add_option("--theta", in.theta, "Background threshold in [0, 1)")->capture_default_str();
  c_infer->add_option("--seed", in.seed, "Related-image sampling seed")->capture_default_str();
  c_infer->add_option("--jobs", in.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  c_infer->add_option("--pool", in.pool, "Split to draw related images from (default: --data)");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "mIoU of pseudo masks against ground truth (JSON on stdout)");
  c_eval->add_option("--pred", ev.pred, "Directory of <id>.pgm masks (or an infer output directory)")->required();
  c_eval->add_option("--gt", ev.gt, "Ground-truth split directory")->required();
  c_eval->add_option("--classes", ev.classes, "classes.json (default: the one in --gt)");

  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of every op and the full loss");
  c_gc->add_option("--seed", gc_seed, "Seed for the random inputs")->capture_default_str();
  c_gc->add_option("--tolerance", gc_tol, "Maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    gd.seed_set = gen_seed->count() > 0;
    if (*c_gen) return gen_data(gd);
    if (*c_train) return train_cmd(tr);
    if (*c_ablate) return ablate_cmd(ab);
    if (*c_infer) return infer_cmd(in);
    if (*c_eval) return eval_cmd(ev);
    if (*c_gc) return gradcheck_cmd(gc_seed, gc_tol);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const DataMismatch& e) {
    std::cerr << "data mismatch: " << e.what() << "\n";
    return kDataMismatch;
  } catch (const SamplingError& e) {
    std::cerr << "data mismatch: " << e.what() << "\n";
    return kDataMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUnexpected;
  }
  return kUnexpected;
}
