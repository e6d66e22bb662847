// trajflow: train, sample, denoise, verify and evaluate trajectory models.
//
// Exit codes: 0 ok, 1 property failure or failed run, 2 config error,
// 3 missing artifact, 4 invalid request, 5 missing optional component.

#include "trajflow/data_metrics.hpp"
#include "trajflow/io.hpp"
#include "trajflow/model.hpp"
#include "trajflow/sampling.hpp"
#include "trajflow/verify.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

using namespace trajflow;
namespace fs = std::filesystem;

namespace {

enum Exit : int { kOk = 0, kFailed = 1, kConfig = 2, kMissing = 3, kInvalid = 4, kOptional = 5 };

struct Failure : std::runtime_error {
  Failure(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
  int code;
};

// Seeds derived from the run seed.
std::uint64_t data_seed(std::uint64_t seed) { return seed + 1; }
std::uint64_t batch_seed(std::uint64_t seed) { return seed + 2; }

Dataset build_dataset(const DatasetSpec& spec, std::uint64_t seed, const std::string& where) {
  Rng rng(data_seed(seed));
  try {
    return make_dataset(spec, rng);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

ConditionSpec condition_of(const Dataset& d) {
  if (d.classes() == 0) return {};
  return {ConditionKind::label, d.classes(), 0};
}

struct Run {
  Config cfg;
  std::uint64_t seed = 0;
  fs::path out;
  DatasetSpec spec;
  Dataset data;
  std::string started = utc_now();
};

Run open_run(const std::string& config_path, const std::string& out_override, bool need_data = true) {
  Run r;
  r.cfg = Config::load(config_path);
  r.seed = r.cfg.integer("run.seed", 0);
  r.out = out_override.empty() ? fs::path(r.cfg.str("run.out", "runs/" + fs::path(config_path).stem().string()))
                               : fs::path(out_override);
  r.cfg.erase("run.out");  // the snapshot should not depend on where it was written
  if (need_data || r.cfg.has("data.name")) {
    r.spec = read_dataset_spec(r.cfg);
    r.data = build_dataset(r.spec, r.seed, r.cfg.where("data.name"));
  }
  return r;
}

TrainConfig train_config(const Run& r) {
  TrainConfig tc = read_train_config(r.cfg);
  tc.seed = r.seed;
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.cfg.where("train.iterations") + ": " + e.what());
  }
  return tc;
}

template <class F>
auto config_checked(const Config& cfg, const std::string& key, F&& make) {
  try {
    return make();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(cfg.where(key) + ": " + e.what());
  }
}

void finish(const Run& r, const std::string& command, const std::string& checkpoint_bytes,
            std::vector<std::string> files) {
  RunManifest m;
  m.command = command;
  m.seed = r.seed;
  m.config = r.cfg.canonical();
  if (!checkpoint_bytes.empty()) m.checkpoint_hash = blob_hash(checkpoint_bytes);
  m.files = std::move(files);
  m.started = r.started;
  m.finished = utc_now();
  m.write(r.out);
}

std::string save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  auto bytes = ck.encode();
  std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  return bytes;
}

bool report_every(std::size_t step, std::size_t total) {
  const std::size_t every = std::max<std::size_t>(1, total / 10);
  return (step + 1) % every == 0 || step + 1 == total;
}

Checkpoint load_checkpoint(const std::string& path, const std::string& kind) {
  Checkpoint ck = Checkpoint::load(path);
  if (checkpoint_kind(ck) != kind)
    throw Failure(kInvalid, "'" + path + "' holds a " + checkpoint_kind(ck) + " checkpoint, expected " + kind);
  return ck;
}

Condition labels_for(const ConditionSpec& spec, std::size_t n, int label) {
  if (spec.kind != ConditionKind::label) return Condition::none(n);
  std::vector<int> l(n);
  for (std::size_t i = 0; i < n; ++i) l[i] = label >= 0 ? label : static_cast<int>(i % spec.classes);
  return Condition::from_labels(std::move(l));
}

NtmConfig ntm_config_for(const Run& r) {
  NtmConfig n = read_ntm_config(r.cfg);
  if (!r.cfg.has("transporter.positions")) {
    n.transporter.positions = r.data.dim() / n.transporter.channels;
  }
  if (n.transporter.dim() != r.data.dim())
    throw ConfigError(r.cfg.where("transporter.positions") + ": positions x channels = " +
                      std::to_string(n.transporter.dim()) + " but dataset '" + r.data.name() + "' has dimension " +
                      std::to_string(r.data.dim()));
  n.predictor.dim = n.transporter.dim();
  n.predictor.condition = condition_of(r.data);
  return n;
}

// ---------------------------------------------------------------------------

int cmd_pretrain_fm(const std::string& config, const std::string& out) {
  Run r = open_run(config, out);
  FlowMatchConfig fc = read_fm_config(r.cfg);
  fc.dim = r.data.dim();
  fc.condition = condition_of(r.data);
  TrainConfig tc = train_config(r);
  r.cfg.reject_unused();

  fs::create_directories(r.out);
  FlowMatchModel model = FlowMatchModel::make(fc, r.seed);
  FmTrainState state = make_fm_train_state(model, tc);
  Rng batches(batch_seed(r.seed));
  CsvWriter csv(r.out / "metrics.csv", {"step", "loss", "lr", "wall_ms"});
  double last = 0.0;
  for (std::size_t i = 0; i < tc.iterations; ++i) {
    Batch b = r.data.sample(tc.batch, batches);
    FmMetrics m = fm_train_step(model, state, b.x, b.condition(), tc);
    csv.row({static_cast<double>(m.step), m.loss, m.lr, m.wall_ms});
    last = m.loss;
    if (report_every(i, tc.iterations)) std::printf("step %zu loss %.6f\n", m.step, m.loss);
  }
  const auto bytes = save_checkpoint(fm_checkpoint(model, {r.spec, r.seed}), r.out / "checkpoint.bin");
  finish(r, "pretrain-fm", bytes, {"checkpoint.bin", "metrics.csv"});
  std::printf("final loss %.17g\nwrote %s\n", last, (r.out / "checkpoint.bin").c_str());
  return kOk;
}

int train_loop(Run& r, NtmModel& model, const TrainConfig& tc, const std::string& command, bool with_drift) {
  fs::create_directories(r.out);
  TrainState state = make_train_state(model, tc);
  Rng batches(batch_seed(r.seed));
  std::vector<std::string> header{"step", "nll", "aux", "total", "lambda", "grad_norm", "wall_ms"};
  if (with_drift) header.push_back("mu_drift");
  CsvWriter csv(r.out / "metrics.csv", header);
  double last = 0.0;
  for (std::size_t i = 0; i < tc.iterations; ++i) {
    Batch b = r.data.sample(tc.batch, batches);
    TrainMetrics m = train_step(model, state, b.x, b.condition(), tc);
    std::vector<double> row{static_cast<double>(m.step), m.nll, m.aux, m.total, m.lambda, m.grad_norm, m.wall_ms};
    if (with_drift) row.push_back(m.mu_drift);
    csv.row(row);
    last = m.total;
    if (report_every(i, tc.iterations)) std::printf("step %zu nll %.6f total %.6f\n", m.step, m.nll, m.total);
  }
  const auto bytes = save_checkpoint(ntm_checkpoint(model, {r.spec, r.seed}), r.out / "checkpoint.bin");
  finish(r, command, bytes, {"checkpoint.bin", "metrics.csv"});
  std::printf("final loss %.17g\nwrote %s\n", last, (r.out / "checkpoint.bin").c_str());
  return kOk;
}

int cmd_train(const std::string& config, const std::string& out) {
  Run r = open_run(config, out);
  NtmConfig n = ntm_config_for(r);
  TrainConfig tc = train_config(r);
  r.cfg.reject_unused();
  NtmModel model = config_checked(r.cfg, "ntm.steps", [&] { return NtmModel::make(n, r.seed); });
  return train_loop(r, model, tc, "train", false);
}

int cmd_finetune(const std::string& config, const std::string& fm_path, const std::string& out) {
  Run r = open_run(config, out);
  NtmConfig n = ntm_config_for(r);
  TrainConfig tc = train_config(r);
  r.cfg.reject_unused();
  const Checkpoint fm_ck = load_checkpoint(fm_path, "fm");
  FlowMatchModel fm = load_fm(fm_ck);
  if (fm.config().dim != r.data.dim())
    throw Failure(kInvalid, "flow-matching checkpoint has dimension " + std::to_string(fm.config().dim) +
                                ", dataset has " + std::to_string(r.data.dim()));
  r.cfg.set("finetune.fm_checkpoint_hash", blob_hash(fm_ck.encode()));
  NtmModel model = config_checked(r.cfg, "ntm.steps", [&] { return finetune_init(fm, n, r.seed); });
  return train_loop(r, model, tc, "finetune", true);
}

struct SampleArgs {
  std::string checkpoint, denoiser, out, denoise = "none";
  std::size_t n = 1000, steps = 4;
  double w = 0.0;
  std::uint64_t seed = 0;
  int label = -1;
  bool trajectory = false;
};

int cmd_sample(const SampleArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint, "ntm");
  const NtmModel model = load_ntm(ck);
  if (!model.allows(a.steps)) {
    std::string allowed;
    for (auto T : model.config().steps) allowed += (allowed.empty() ? "" : ",") + std::to_string(T);
    throw Failure(kInvalid, "--steps " + std::to_string(a.steps) + " is not in the model's step set {" + allowed + "}");
  }
  if (!(a.w >= 0.0)) throw Failure(kInvalid, "--cfg-w must be >= 0");
  std::optional<Denoiser> den;
  if (a.denoise == "learned") {
    if (a.denoiser.empty())
      throw Failure(kOptional, "--denoise learned needs a denoiser checkpoint: train one with "
                               "`trajflow distill-denoiser` and pass it with --denoiser PATH");
    den = load_denoiser(load_checkpoint(a.denoiser, "denoiser"));
    if (den->config().dim() != model.config().dim()) throw Failure(kInvalid, "denoiser dimension does not match the model");
  }

  Run r;
  r.seed = a.seed;
  r.out = a.out;
  r.cfg.set("sample.checkpoint_hash", blob_hash(ck.encode()));
  r.cfg.set("sample.n", std::to_string(a.n));
  r.cfg.set("sample.steps", std::to_string(a.steps));
  r.cfg.set("sample.cfg_w", format_number(a.w));
  r.cfg.set("sample.denoise", a.denoise);
  r.cfg.set("sample.label", std::to_string(a.label));
  r.cfg.set("sample.seed", std::to_string(a.seed));
  if (den) r.cfg.set("sample.denoiser_hash", blob_hash(Checkpoint::load(a.denoiser).encode()));
  fs::create_directories(r.out);

  const auto& cond = model.config().predictor.condition;
  if (a.label >= 0 && (cond.kind != ConditionKind::label || static_cast<std::size_t>(a.label) >= cond.classes))
    throw Failure(kInvalid, "--label " + std::to_string(a.label) + " is not a class of this model");
  const Condition y = labels_for(cond, a.n, a.label);
  std::optional<std::vector<int>> label_col;
  if (cond.kind == ConditionKind::label) label_col = y.labels;

  const auto D = static_cast<Eigen::Index>(model.config().dim());
  RowMatrix x(0, D);
  std::vector<RowMatrix> levels;
  if (a.n > 0) {
    Rng rng(a.seed);
    SampleRequest req{y, a.w, a.steps, a.trajectory || a.denoise == "score", !den || a.trajectory};
    SampleResult res = sample(model, req, rng);
    x = res.x;
    if (a.denoise == "score") x = score_denoise(model, res.trajectory, y).x0;
    if (den) x = den->apply(res.u_levels[0], y);
    if (a.trajectory) levels = res.trajectory.levels;
  }
  std::vector<std::string> files{"samples.csv"};
  write_matrix_csv(r.out / "samples.csv", x, label_col);
  if (a.trajectory) {
    if (levels.empty()) levels.assign(a.steps + 1, RowMatrix(0, D));
    write_trajectory_csv(r.out / "trajectory.csv", levels);
    files.push_back("trajectory.csv");
  }
  if (D == 2) {
    write_density_ppm(r.out / "density.ppm", x);
    files.push_back("density.ppm");
  }
  finish(r, "sample", "", files);
  std::printf("wrote %zu samples to %s\n", a.n, (r.out / "samples.csv").c_str());
  return kOk;
}

int cmd_distill(const std::string& checkpoint, const std::string& config, const std::string& out) {
  Run r = open_run(config, out, false);
  const Checkpoint ck = load_checkpoint(checkpoint, "ntm");
  const NtmModel model = load_ntm(ck);
  if (!r.cfg.has("data.name")) {
    const RunInfo info = checkpoint_run_info(ck);
    r.spec = info.data;
    r.data = build_dataset(r.spec, info.seed, checkpoint);
  }
  r.cfg.set("distill.checkpoint_hash", blob_hash(ck.encode()));
  DenoiserConfig dc = read_denoiser_config(r.cfg);
  dc.positions = model.config().transporter.positions;
  dc.channels = model.config().transporter.channels;
  dc.condition = model.config().predictor.condition;
  TrainConfig tc = train_config(r);
  const std::size_t steps = r.cfg.integer("distill.steps", model.config().steps.front());
  DenoiseOptions opts;
  opts.clip_percentile = r.cfg.real("distill.clip_percentile", opts.clip_percentile);
  if (r.cfg.str("distill.covariance", "joint") == "diagonal") opts.covariance = CovarianceMode::diagonal;
  r.cfg.reject_unused();
  if (!model.allows(steps)) throw ConfigError(r.cfg.where("distill.steps") + ": step count not allowed by the model");
  if (r.data.dim() != model.config().dim()) throw Failure(kInvalid, "dataset dimension does not match the model");

  fs::create_directories(r.out);
  Denoiser d = config_checked(r.cfg, "denoiser.layers", [&] { return Denoiser::make(dc, r.seed); });
  DenoiserState state{AdamW(d.params(), tc.optim), 0};
  Rng batches(batch_seed(r.seed));
  CsvWriter csv(r.out / "metrics.csv", {"step", "loss", "lr", "wall_ms"});
  double last = 0.0;
  for (std::size_t i = 0; i < tc.iterations; ++i) {
    const auto start = std::chrono::steady_clock::now();
    Batch b = r.data.sample(tc.batch, batches);
    DenoiserBatch db = make_denoiser_batch(model, b.x, b.condition(), steps, opts, batches);
    const double lr = learning_rate(tc.optim, i, tc.iterations);
    last = denoiser_train_step(d, state, db, lr);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    csv.row({static_cast<double>(i), last, lr, ms});
    if (report_every(i, tc.iterations)) std::printf("step %zu loss %.6g\n", i, last);
  }
  const auto bytes = save_checkpoint(denoiser_checkpoint(d, {r.spec, r.seed}), r.out / "denoiser.bin");
  finish(r, "distill-denoiser", bytes, {"denoiser.bin", "metrics.csv"});
  std::printf("final loss %.17g\nwrote %s\n", last, (r.out / "denoiser.bin").c_str());
  return kOk;
}

int cmd_verify(const std::string& suite) {
  if (suite != "all" && std::find(suite_names().begin(), suite_names().end(), suite) == suite_names().end())
    throw Failure(kInvalid, "unknown suite '" + suite + "'");
  const Report report = run_suite(suite);
  std::cout << format_report(report);
  const bool ok = all_passed(report);
  std::cout << (ok ? "all checks passed\n" : "some checks FAILED\n");
  return ok ? kOk : kFailed;
}

struct EvalArgs {
  std::string checkpoint, dataset, out;
  std::vector<std::size_t> steps{4};
  std::size_t n = 2000;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint, "ntm");
  const NtmModel model = load_ntm(ck);
  const RunInfo info = checkpoint_run_info(ck);
  DatasetSpec spec = info.data;
  if (!a.dataset.empty()) spec.name = a.dataset;
  const Dataset data = build_dataset(spec, info.seed, "--dataset");
  if (data.dim() != model.config().dim()) throw Failure(kInvalid, "dataset dimension does not match the model");
  for (auto T : a.steps)
    if (!model.allows(T)) throw Failure(kInvalid, "T = " + std::to_string(T) + " is not in the model's step set");
  if (a.n < 2) throw Failure(kInvalid, "--n must be at least 2");

  Run r;
  r.seed = a.seed;
  r.out = a.out;
  r.cfg.set("eval.checkpoint_hash", blob_hash(ck.encode()));
  r.cfg.set("eval.dataset", spec.name);
  r.cfg.set("eval.n", std::to_string(a.n));
  std::string steps;
  for (auto T : a.steps) steps += (steps.empty() ? "" : ",") + std::to_string(T);
  r.cfg.set("eval.steps", steps);
  fs::create_directories(r.out);

  Rng held_rng(a.seed);
  const Batch held = data.sample(a.n, held_rng);
  const Condition y = held.condition();
  const double D = static_cast<double>(model.config().dim());
  CsvWriter csv(r.out / "eval.csv", {"T", "energy_distance", "heldout_nll", "wall_ms_per_sample"});
  std::printf("%4s  %16s  %16s  %18s\n", "T", "energy_distance", "heldout_nll", "wall_ms_per_sample");
  for (auto T : a.steps) {
    Rng rng(a.seed + T);
    SampleRequest req{y, 0.0, T, false};
    const auto start = std::chrono::steady_clock::now();
    const RowMatrix x = sample(model, req, rng).x;
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    const double ed = energy_distance(x, held.x);
    Trajectory tr = sample_trajectory(held.x, model.sampling_schedule(T), rng);
    const double nll = model.nll(tr, y).per_element.vector().mean() / D;
    const double per = ms / static_cast<double>(a.n);
    csv.row({static_cast<double>(T), ed, nll, per});
    std::printf("%4zu  %16.6f  %16.6f  %18.4f\n", T, ed, nll, per);
  }
  finish(r, "eval", "", {"eval.csv"});
  return kOk;
}

int cmd_dataset(const std::string& name, std::size_t n, std::uint64_t seed, const std::string& out) {
  DatasetSpec spec;
  spec.name = name;
  const Dataset data = build_dataset(spec, seed, "--name");
  Run r;
  r.seed = seed;
  r.out = out;
  r.cfg.set("data.name", name);
  r.cfg.set("data.n", std::to_string(n));
  fs::create_directories(r.out);
  Rng rng(seed);
  const Batch b = data.sample(n, rng);
  std::optional<std::vector<int>> labels;
  if (data.classes() > 0) labels = b.labels;
  write_matrix_csv(r.out / "data.csv", b.x, labels);
  finish(r, "dataset", "", {"data.csv"});
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Normalizing trajectory models: training, sampling, denoising and verification."};
  app.require_subcommand(1);

  std::string config, out, fm_path;
  auto* pre = app.add_subcommand("pretrain-fm", "Train the flow-matching backbone");
  pre->add_option("config", config, "Config file")->required();
  pre->add_option("--out", out, "Output directory (default: run.out)");

  auto* train = app.add_subcommand("train", "Train a trajectory model from scratch");
  train->add_option("config", config, "Config file")->required();
  train->add_option("--out", out, "Output directory (default: run.out)");

  auto* ft = app.add_subcommand("finetune", "Initialize from a flow-matching checkpoint and train");
  ft->add_option("config", config, "Config file")->required();
  ft->add_option("--fm-checkpoint", fm_path, "Flow-matching checkpoint")->required();
  ft->add_option("--out", out, "Output directory (default: run.out)");

  SampleArgs sa;
  auto* smp = app.add_subcommand("sample", "Draw samples from a trained model");
  smp->add_option("--checkpoint", sa.checkpoint, "Model checkpoint")->required();
  smp->add_option("--n", sa.n, "Number of samples")->capture_default_str();
  smp->add_option("--steps", sa.steps, "Trajectory steps T")->capture_default_str();
  smp->add_option("--cfg-w", sa.w, "Guidance weight")->capture_default_str();
  smp->add_option("--denoise", sa.denoise, "Final-level denoising")
      ->check(CLI::IsMember({"none", "score", "learned"}))
      ->capture_default_str();
  smp->add_option("--denoiser", sa.denoiser, "Denoiser checkpoint for --denoise learned");
  smp->add_option("--label", sa.label, "Class label for every sample (default: cycle through classes)");
  smp->add_option("--seed", sa.seed, "Random seed")->capture_default_str();
  smp->add_flag("--trajectory", sa.trajectory, "Also write trajectory.csv");
  smp->add_option("--out", sa.out, "Output directory")->required();

  std::string checkpoint;
  auto* dist = app.add_subcommand("distill-denoiser", "Distill score denoising into a one-pass network");
  dist->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  dist->add_option("config", config, "Config file")->required();
  dist->add_option("--out", out, "Output directory (default: run.out)");

  std::string suite = "all";
  auto* ver = app.add_subcommand("verify", "Run property suites");
  ver->add_option("--suite", suite, "schedule | flow | gradients | oracle | all")->capture_default_str();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Energy distance and held-out NLL per step count");
  ev->add_option("--checkpoint", ea.checkpoint, "Model checkpoint")->required();
  ev->add_option("--dataset", ea.dataset, "Dataset name (default: the training dataset)");
  ev->add_option("--steps", ea.steps, "Step counts, comma separated")->delimiter(',');
  ev->add_option("--n", ea.n, "Samples and held-out points")->capture_default_str();
  ev->add_option("--seed", ea.seed, "Random seed")->capture_default_str();
  ev->add_option("--out", ea.out, "Output directory")->required();

  std::string data_name;
  std::size_t data_n = 1000;
  std::uint64_t data_seed_arg = 0;
  auto* ds = app.add_subcommand("dataset", "Export a synthetic dataset to CSV");
  ds->add_option("--name", data_name, "Dataset name")->required();
  ds->add_option("--n", data_n, "Number of points")->capture_default_str();
  ds->add_option("--seed", data_seed_arg, "Random seed")->capture_default_str();
  ds->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    configure_threads();
    if (*pre) return cmd_pretrain_fm(config, out);
    if (*train) return cmd_train(config, out);
    if (*ft) return cmd_finetune(config, fm_path, out);
    if (*smp) return cmd_sample(sa);
    if (*dist) return cmd_distill(checkpoint, config, out);
    if (*ver) return cmd_verify(suite);
    if (*ev) return cmd_eval(ea);
    if (*ds) return cmd_dataset(data_name, data_n, data_seed_arg, out);
  } catch (const Failure& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return kMissing;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return kFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailed;
  }
  return kOk;
}
