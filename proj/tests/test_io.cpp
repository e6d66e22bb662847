#include <doctest.h>

#include "trajflow/io.hpp"

#include <cmath>
#include <limits>

using namespace trajflow;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("trajflow_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

std::string error_of(auto&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

void perturb(ParamStore& store, Rng& rng) {
  std::normal_distribution<double> n(0.0, 0.1);
  for (std::size_t i = 0; i < store.size(); ++i)
    for (auto& v : store.value(i)) v += n(rng);
}

}  // namespace

TEST_CASE("config sections, comments and overrides") {
  auto c = Config::parse(
      "# header\n"
      "[train]\n"
      "batch = 64   # trailing\n"
      "lr=0.001\n"
      "\n"
      "[data]\r\n"
      "name = two_moons\n"
      "[train]\n"
      "batch = 128\n",
      "a.cfg");
  CHECK(c.integer("train.batch") == 128);
  CHECK(c.real("train.lr") == 0.001);
  CHECK(c.str("data.name") == "two_moons");
  CHECK(c.real("train.missing", 2.5) == 2.5);
  CHECK(c.where("train.batch") == "a.cfg:9");
  c.reject_unused();

  CHECK(Config::parse("[a]\nx = 1, 2 ,8\n").integers("a.x") == std::vector<std::size_t>{1, 2, 8});
  CHECK(Config::parse("[a]\nx = yes\n").flag("a.x"));
}

TEST_CASE("config errors carry line numbers") {
  CHECK(error_of([] { Config::parse("[a]\nx = 1\nbroken line\n", "f.cfg"); }) ==
        "f.cfg:3: expected 'key = value', got 'broken line'");
  CHECK(error_of([] { Config::parse("x = 1\n", "f.cfg"); }).starts_with("f.cfg:1:"));
  CHECK(error_of([] { Config::parse("[a\n", "f.cfg"); }).starts_with("f.cfg:1:"));
  CHECK(error_of([] { Config::parse("[a]\n\nn = ten\n", "f.cfg").integer("a.n"); }) ==
        "f.cfg:3: 'a.n' expects a non-negative integer, got 'ten'");
  CHECK(error_of([] { Config::parse("[a]\nn = 1\n", "f.cfg").str("data.name"); }).find("'data.name'") !=
        std::string::npos);
  CHECK(error_of([] {
          auto c = Config::parse("[a]\nn = 1\nm = 2\n", "f.cfg");
          c.integer("a.n");
          c.reject_unused();
        }) == "f.cfg:3: unknown key 'a.m'");
  CHECK_THROWS_AS(Config::parse("[a]\nk = -1\n").integer("a.k"), ConfigError);
  CHECK_THROWS_AS(read_train_config(Config::parse("[train]\nmode = sideways\n")), ConfigError);
}

TEST_CASE("config include") {
  TempDir dir;
  fs::create_directories(dir.path / "presets");
  spit(dir.path / "presets" / "small.cfg", "[transporter]\nhidden = 16\nblocks = 3\n");
  spit(dir.path / "run.cfg", "include = presets/small.cfg\n[transporter]\nhidden = 32\n");
  auto c = Config::load(dir.path / "run.cfg");
  CHECK(c.integer("transporter.hidden") == 32);
  CHECK(c.integer("transporter.blocks") == 3);
  CHECK(c.where("transporter.blocks") == (dir.path / "presets" / "small.cfg").string() + ":3");

  spit(dir.path / "loop.cfg", "include = loop.cfg\n");
  CHECK(error_of([&] { Config::load(dir.path / "loop.cfg"); }).find("include cycle") != std::string::npos);
  spit(dir.path / "dangling.cfg", "[a]\nx = 1\ninclude = nope.cfg\n");
  CHECK(error_of([&] { Config::load(dir.path / "dangling.cfg"); }).starts_with((dir.path / "dangling.cfg").string() + ":3:"));
  CHECK_THROWS_AS(Config::load(dir.path / "absent.cfg"), ConfigError);
}

TEST_CASE("structured sections round trip through text") {
  NtmConfig n;
  n.steps = {2, 4, 8};
  n.predictor_kind = PredictorKind::linear_gaussian;
  n.transporter.arch = TransporterArch::attention;
  n.transporter.skip_threshold = 0.95;
  n.predictor.condition = {ConditionKind::label, 5, 0};
  n.sample_t_min = 0.013;
  TrainConfig t;
  t.mode = TrainMode::pairwise;
  t.optim.lr = 1.2345678901234567e-4;
  DatasetSpec d;
  d.name = "rings";
  d.noise = -1.0;

  Config c;
  write_ntm_config(c, n);
  write_train_config(c, t);
  write_dataset_spec(c, d);
  auto back = Config::parse(c.canonical());
  auto n2 = read_ntm_config(back);
  auto t2 = read_train_config(back);
  auto d2 = read_dataset_spec(back);
  back.reject_unused();
  CHECK(n2.steps == n.steps);
  CHECK(n2.predictor_kind == n.predictor_kind);
  CHECK(n2.transporter.arch == n.transporter.arch);
  CHECK(n2.transporter.skip_threshold == n.transporter.skip_threshold);
  CHECK(n2.predictor.condition.kind == ConditionKind::label);
  CHECK(n2.predictor.condition.classes == 5);
  CHECK(n2.sample_t_min == n.sample_t_min);
  CHECK(t2.mode == TrainMode::pairwise);
  CHECK(t2.optim.lr == t.optim.lr);
  CHECK(d2.name == "rings");
  CHECK(d2.noise == -1.0);
  CHECK(Config::parse(back.canonical()).canonical() == back.canonical());
}

TEST_CASE("checkpoint bytes round trip exactly") {
  Checkpoint ck;
  ck.config = "[model]\nkind = test\n";
  Eigen::VectorXd odd(6);
  odd << 0.1, -0.0, std::numeric_limits<double>::infinity(), std::numeric_limits<double>::denorm_min(),
      std::numeric_limits<double>::quiet_NaN(), -1e308;
  ck.tensors.push_back({"a.weight", {2, 3}, odd});
  ck.tensors.push_back({"scalar", {}, Eigen::VectorXd::Constant(1, 3.0)});
  const auto bytes = ck.encode();
  CHECK(bytes.starts_with("TRAJFLOW"));
  auto back = Checkpoint::decode(bytes);
  CHECK(back.config == ck.config);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].shape == Shape{2, 3});
  CHECK(std::memcmp(back.tensors[0].values.data(), odd.data(), sizeof(double) * 6) == 0);
  CHECK(back.encode() == bytes);

  CHECK_THROWS_AS(Checkpoint::decode(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(Checkpoint::decode("NOTAFILE" + bytes.substr(8)), CheckpointError);
  CHECK_THROWS_AS(Checkpoint::decode(bytes + "x"), CheckpointError);
  std::string future = bytes;
  future[8] = 9;
  CHECK(error_of([&] { Checkpoint::decode(future); }) == "unsupported checkpoint version 9");
  CHECK_THROWS_AS(Checkpoint::load("/nonexistent/ck.bin"), CheckpointError);

  // Little-endian on disk regardless of host order.
  Checkpoint one{"", {{"x", {1}, Eigen::VectorXd::Constant(1, 1.0)}}};
  const auto b1 = one.encode();
  CHECK(b1.substr(b1.size() - 8) == std::string("\0\0\0\0\0\0\xf0\x3f", 8));
}

TEST_CASE("model checkpoints reload to identical models") {
  TempDir dir;
  RunInfo info{DatasetSpec{}, 42};
  Rng rng(1);

  FlowMatchConfig fc;
  fc.hidden = 16;
  fc.layers = 2;
  fc.embed = 8;
  fc.condition = {ConditionKind::label, 2, 0};
  auto fm = FlowMatchModel::make(fc, 3);
  perturb(fm.params(), rng);
  fm_checkpoint(fm, info).save(dir.path / "fm.bin");
  auto fm2 = load_fm(Checkpoint::load(dir.path / "fm.bin"));
  RowMatrix x = standard_normal(5, 2, rng);
  Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(5, 0.1, 0.9);
  auto y = Condition::from_labels({0, 1, 0, 1, -1});
  CHECK(fm2.velocity(x, t, y) == fm.velocity(x, t, y));
  CHECK(checkpoint_kind(Checkpoint::load(dir.path / "fm.bin")) == "fm");
  CHECK(checkpoint_run_info(Checkpoint::load(dir.path / "fm.bin")).seed == 42);
  CHECK_THROWS_AS(load_ntm(Checkpoint::load(dir.path / "fm.bin")), CheckpointError);

  NtmConfig nc;
  nc.transporter.hidden = 16;
  nc.transporter.embed = 8;
  nc.predictor.hidden = 16;
  nc.predictor.layers = 2;
  nc.predictor.embed = 8;
  nc.steps = {2, 4};
  auto ntm = NtmModel::make(nc, 4);
  perturb(ntm.params(), rng);
  auto ntm_ck = ntm_checkpoint(ntm, info);
  auto ntm2 = load_ntm(Checkpoint::decode(ntm_ck.encode()));
  CHECK(ntm_checkpoint(ntm2, info).encode() == ntm_ck.encode());
  SampleRequest req;
  req.y = Condition::none(6);
  Rng r1(9), r2(9);
  CHECK(sample(ntm2, req, r1).x == sample(ntm, req, r2).x);

  auto ft = finetune_init(fm, nc, 5);
  perturb(ft.params(), rng);
  auto ft2 = load_ntm(Checkpoint::decode(ntm_checkpoint(ft, info).encode()));
  REQUIRE(ft2.reference());
  CHECK(ft2.reference()->velocity(x, t, y) == fm.velocity(x, t, y));
  CHECK(ntm_checkpoint(ft2, info).encode() == ntm_checkpoint(ft, info).encode());

  DenoiserConfig dc;
  dc.hidden = 8;
  auto den = Denoiser::make(dc, 6);
  perturb(den.params(), rng);
  auto den2 = load_denoiser(Checkpoint::decode(denoiser_checkpoint(den, info).encode()));
  CHECK(den2.apply(x, Condition::none(5)) == den.apply(x, Condition::none(5)));

  // A checkpoint whose tensors do not fit the stored architecture is rejected.
  auto broken = ntm_ck;
  broken.tensors[0].shape.push_back(1);
  broken.tensors[0].values.conservativeResize(broken.tensors[0].values.size());
  CHECK_THROWS_AS(load_ntm(broken), CheckpointError);
}

TEST_CASE("csv and ppm artifacts") {
  TempDir dir;
  write_matrix_csv(dir.path / "empty.csv", RowMatrix(0, 2));
  CHECK(slurp(dir.path / "empty.csv") == "x0,x1\n");

  RowMatrix x(2, 2);
  x << 0.1, -2.5, 1e-20, 3;
  write_matrix_csv(dir.path / "x.csv", x, std::vector<int>{1, 0});
  CHECK(slurp(dir.path / "x.csv") == "x0,x1,label\n0.1,-2.5,1\n1e-20,3,0\n");

  write_trajectory_csv(dir.path / "t.csv", {x, x * 2.0});
  CHECK(slurp(dir.path / "t.csv") == "level,sample,x0,x1\n0,0,0.1,-2.5\n0,1,1e-20,3\n1,0,0.2,-5\n1,1,2e-20,6\n");

  CsvWriter csv(dir.path / "m.csv", {"a", "b"});
  CHECK_THROWS_AS(csv.row({1.0}), std::invalid_argument);
  CHECK(format_number(0.30000000000000004) == "0.30000000000000004");
  CHECK(format_number(1234567.0) == "1234567");

  Rng rng(2);
  RowMatrix pts = standard_normal(500, 2, rng);
  write_density_ppm(dir.path / "d.ppm", pts, 32);
  const auto img = slurp(dir.path / "d.ppm");
  CHECK(img.starts_with("P6\n32 32\n255\n"));
  CHECK(img.size() == std::string("P6\n32 32\n255\n").size() + 32 * 32 * 3);
  write_density_ppm(dir.path / "d2.ppm", pts, 32);
  CHECK(slurp(dir.path / "d2.ppm") == img);
  CHECK_THROWS_AS(write_density_ppm(dir.path / "bad.ppm", standard_normal(3, 1, rng)), std::invalid_argument);
}

TEST_CASE("hashes and manifest") {
  CHECK(content_hash("") == "cbf29ce484222325");
  CHECK(content_hash("a") == "af63dc4c8601ec8c");
  CHECK(blob_hash("a") == content_hash(std::string("blob 1\0a", 8)));

  TempDir dir;
  RunManifest m{"train", 7, "[run]\nseed = 7\n", blob_hash("xyz"), {"checkpoint.bin", "metrics.csv"}, "s", "f"};
  m.write(dir.path);
  const auto text = slurp(dir.path / "manifest.txt");
  CHECK(text.find("run_id = " + content_hash(m.config).substr(0, 8) + "-7\n") != std::string::npos);
  CHECK(text.find("config_hash = " + content_hash(m.config) + "\n") != std::string::npos);
  CHECK(text.find("seed = 7\n") != std::string::npos);
  CHECK(text.find("files = checkpoint.bin metrics.csv\n") != std::string::npos);
  CHECK(text.ends_with("--- config ---\n[run]\nseed = 7\n"));
}

TEST_CASE("thread cap from the environment") {
  ::setenv("TRAJFLOW_THREADS", "1", 1);
  CHECK(configure_threads() == 1);
  ::setenv("TRAJFLOW_THREADS", "zero", 1);
  CHECK_THROWS_AS(configure_threads(), ConfigError);
  ::unsetenv("TRAJFLOW_THREADS");
  CHECK(configure_threads() >= 1);
}
