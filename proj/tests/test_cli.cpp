#include <doctest.h>

#include "cli_harness.hpp"
#include "trajflow/io.hpp"

#include <unistd.h>

using namespace trajflow;
using namespace testing;

namespace {

// One pipeline run shared by the cases below.
struct Pipeline {
  fs::path dir;
  std::map<std::string, CliResult> runs;

  Pipeline() {
    dir = fs::temp_directory_path() / ("trajflow_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    copy_fixtures(dir);
    spit(dir / "ft0.cfg", "include = ft.cfg\n[train]\niterations = 0\n");
    for (const char* suffix : {"", "_again"}) {
      const std::string s = suffix;
      call("fm" + s, "pretrain-fm fm.cfg --out fm" + s);
      call("ntm" + s, "train ntm.cfg --out ntm" + s);
      call("ft" + s, "finetune ft.cfg --fm-checkpoint fm/checkpoint.bin --out ft" + s);
      call("sample" + s, "sample --checkpoint ntm/checkpoint.bin --n 64 --steps 4 --cfg-w 1.5 --seed 9 --trajectory --out sample" + s);
      call("score" + s, "sample --checkpoint ntm/checkpoint.bin --n 32 --steps 2 --denoise score --seed 4 --out score" + s);
      call("distill" + s, "distill-denoiser --checkpoint ntm/checkpoint.bin den.cfg --out den" + s);
      call("learned" + s, "sample --checkpoint ntm/checkpoint.bin --n 32 --denoise learned --denoiser den/denoiser.bin --out learned" + s);
      call("eval" + s, "eval --checkpoint ntm/checkpoint.bin --steps 2,4 --n 100 --seed 2 --out eval" + s);
      call("dataset" + s, "dataset --name rings --n 50 --seed 8 --out data" + s);
    }
    call("ft0", "finetune ft0.cfg --fm-checkpoint fm/checkpoint.bin --out ft0");
    call("empty", "sample --checkpoint ntm/checkpoint.bin --n 0 --out empty");
  }
  ~Pipeline() { fs::remove_all(dir); }

  void call(const std::string& name, const std::string& args) { runs[name] = run_cli(TRAJFLOW_CLI, dir, args); }
  CliResult cli(const std::string& args) const { return run_cli(TRAJFLOW_CLI, dir, args); }
};

const Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("every command succeeds and writes a manifest") {
  const auto& p = pipeline();
  const std::map<std::string, std::string> dirs{{"fm", "fm"},         {"ntm", "ntm"},   {"ft", "ft"},
                                                {"sample", "sample"}, {"score", "score"}, {"distill", "den"},
                                                {"learned", "learned"}, {"eval", "eval"}, {"dataset", "data"},
                                                {"ft0", "ft0"},       {"empty", "empty"}};
  for (const auto& [run, dir] : dirs) {
    CAPTURE(run);
    const auto& r = p.runs.at(run);
    CAPTURE(r.err);
    CHECK(r.code == 0);
    CHECK(fs::exists(p.dir / dir / "manifest.txt"));
  }
  const std::string manifest = slurp(p.dir / "sample" / "manifest.txt");
  CHECK(manifest.find("command = sample") != std::string::npos);
  CHECK(manifest.find("seed = 9") != std::string::npos);
  CHECK(manifest.find("files = samples.csv trajectory.csv density.ppm") != std::string::npos);
  CHECK(manifest.find("checkpoint_hash = ") != std::string::npos);
}

TEST_CASE("metrics and artifact headers") {
  const auto& p = pipeline();
  CHECK(read_csv(p.dir / "fm" / "metrics.csv").header == std::vector<std::string>{"step", "loss", "lr", "wall_ms"});
  CHECK(read_csv(p.dir / "ntm" / "metrics.csv").header ==
        std::vector<std::string>{"step", "nll", "aux", "total", "lambda", "grad_norm", "wall_ms"});
  CHECK(read_csv(p.dir / "ft" / "metrics.csv").header ==
        std::vector<std::string>{"step", "nll", "aux", "total", "lambda", "grad_norm", "wall_ms", "mu_drift"});
  CHECK(read_csv(p.dir / "den" / "metrics.csv").header == std::vector<std::string>{"step", "loss", "lr", "wall_ms"});
  CHECK(read_csv(p.dir / "eval" / "eval.csv").header ==
        std::vector<std::string>{"T", "energy_distance", "heldout_nll", "wall_ms_per_sample"});
  CHECK(read_csv(p.dir / "fm" / "metrics.csv").rows.size() == 30);
  CHECK(read_csv(p.dir / "eval" / "eval.csv").rows.size() == 2);

  const Csv s = read_csv(p.dir / "sample" / "samples.csv");
  CHECK(s.header == std::vector<std::string>{"x0", "x1", "label"});
  CHECK(s.rows.size() == 64);
  const Csv tr = read_csv(p.dir / "sample" / "trajectory.csv");
  CHECK(tr.header == std::vector<std::string>{"level", "sample", "x0", "x1"});
  CHECK(tr.rows.size() == 5 * 64);
  const std::string ppm = slurp(p.dir / "sample" / "density.ppm");
  CHECK(ppm.rfind("P6\n", 0) == 0);
  CHECK(read_csv(p.dir / "data" / "data.csv").rows.size() == 50);
}

TEST_CASE("zero samples give a header-only CSV") {
  CHECK(slurp(pipeline().dir / "empty" / "samples.csv") == "x0,x1,label\n");
}

TEST_CASE("same seed reproduces every artifact") {
  const auto& p = pipeline();
  for (const char* dir : {"fm", "ntm", "ft", "sample", "score", "den", "learned", "eval", "data"}) {
    CAPTURE(dir);
    CHECK(differing_files(p.dir / dir, p.dir / (std::string(dir) + "_again")).empty());
  }
  CHECK(slurp(p.dir / "fm" / "checkpoint.bin") == slurp(p.dir / "fm_again" / "checkpoint.bin"));
  auto final_line = [](const std::string& out) {
    const auto at = out.find("final loss");
    return out.substr(at, out.find('\n', at) - at);
  };
  CHECK(final_line(p.runs.at("fm").out) == final_line(p.runs.at("fm_again").out));
  CHECK(final_line(p.runs.at("ntm").out) == final_line(p.runs.at("ntm_again").out));
}

TEST_CASE("finetune lambda column follows the cosine schedule") {
  const Csv m = read_csv(pipeline().dir / "ft" / "metrics.csv");
  REQUIRE(m.rows.size() == 25);
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    CAPTURE(i);
    CHECK(m.value(i, "lambda") == aux_weight(2.5, static_cast<std::size_t>(m.value(i, "step")), 25));
    CHECK(m.value(i, "mu_drift") >= 0.0);
  }
  CHECK(m.value(0, "lambda") == 2.5);
  const Csv plain = read_csv(pipeline().dir / "ntm" / "metrics.csv");
  for (std::size_t i = 0; i < plain.rows.size(); ++i) CHECK(plain.value(i, "lambda") == 0.0);
}

TEST_CASE("untrained finetune samples match the flow-matching posterior sampler") {
  const auto& p = pipeline();
  const auto r = p.cli("sample --checkpoint ft0/checkpoint.bin --n 40 --steps 4 --seed 21 --out ft0_sample");
  REQUIRE(r.code == 0);
  const Csv s = read_csv(p.dir / "ft0_sample" / "samples.csv");

  const FlowMatchModel fm = load_fm(Checkpoint::load(p.dir / "fm" / "checkpoint.bin"));
  const NtmModel ntm = load_ntm(Checkpoint::load(p.dir / "ft0" / "checkpoint.bin"));
  Rng rng(21);
  std::vector<RowMatrix> noises;
  for (int k = 0; k <= 4; ++k) noises.push_back(standard_normal(40, 2, rng));
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) labels.push_back(i % 2);
  const RowMatrix ref = fm_posterior_sample(fm, ntm.sampling_schedule(4), Condition::from_labels(labels), noises);
  REQUIRE(s.rows.size() == 40);
  for (Eigen::Index i = 0; i < 40; ++i) {
    CHECK(s.value(static_cast<std::size_t>(i), "x0") == ref(i, 0));
    CHECK(s.value(static_cast<std::size_t>(i), "x1") == ref(i, 1));
  }
}

TEST_CASE("config errors exit 2 and point at the problem") {
  const auto& p = pipeline();
  spit(p.dir / "nodata.cfg", "[run]\nseed = 1\n[train]\niterations = 1\n");
  auto r = p.cli("train nodata.cfg --out x");
  CHECK(r.code == 2);
  CHECK(r.err.find("data.name") != std::string::npos);

  spit(p.dir / "typo.cfg", "include = ntm.cfg\n[train]\nbatchsize = 3\n");
  r = p.cli("train typo.cfg --out x");
  CHECK(r.code == 2);
  CHECK(r.err.find("typo.cfg:3") != std::string::npos);
  CHECK(r.err.find("train.batchsize") != std::string::npos);

  r = p.cli("train no_such.cfg --out x");
  CHECK(r.code == 2);
}

TEST_CASE("missing artifacts exit 3") {
  const auto r = pipeline().cli("sample --checkpoint nowhere.bin --out x");
  CHECK(r.code == 3);
  CHECK(r.err.find("nowhere.bin") != std::string::npos);
}

TEST_CASE("invalid requests exit 4") {
  const auto& p = pipeline();
  CHECK(p.cli("sample --checkpoint ntm/checkpoint.bin --steps 3 --out x").code == 4);
  CHECK(p.cli("sample --checkpoint fm/checkpoint.bin --out x").code == 4);
  CHECK(p.cli("sample --checkpoint ntm/checkpoint.bin --label 5 --out x").code == 4);
  CHECK(p.cli("eval --checkpoint ntm/checkpoint.bin --steps 8 --out x").code == 4);
  CHECK(p.cli("verify --suite nope").code == 4);
}

TEST_CASE("learned denoising without a denoiser exits 5 with a remedy") {
  const auto r = pipeline().cli("sample --checkpoint ntm/checkpoint.bin --denoise learned --out x");
  CHECK(r.code == 5);
  CHECK(r.err.find("distill-denoiser") != std::string::npos);
}

TEST_CASE("verify runs only the requested suite") {
  const auto r = pipeline().cli("verify --suite schedule");
  CHECK(r.code == 0);
  CHECK(r.out.find("schedule") != std::string::npos);
  CHECK(r.out.find("flow") == std::string::npos);
  CHECK(r.out.find("all checks passed") != std::string::npos);
}
