#include "trajflow/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdlib>
#include <ctime>
#include <sstream>

namespace trajflow {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool valid_name(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-';
  });
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

Config Config::parse(std::string_view text, const std::string& origin) {
  Config c;
  c.origin_ = origin;
  std::vector<std::string> stack{origin};
  c.parse_into(text, origin, std::filesystem::current_path(), stack);
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::runtime_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  Config c;
  c.origin_ = path.string();
  std::vector<std::string> stack{std::filesystem::weakly_canonical(path).string()};
  c.parse_into(text, path.string(), path.parent_path(), stack);
  return c;
}

void Config::parse_into(std::string_view text, const std::string& origin, const std::filesystem::path& dir,
                        std::vector<std::string>& stack) {
  std::string section;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + msg);
  };
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') fail("expected ']' to close the section header");
      const auto name = trim(line.substr(1, line.size() - 2));
      if (!valid_name(name)) fail("invalid section name '" + std::string(name) + "'");
      section = name;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail("expected 'key = value', got '" + std::string(line) + "'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (!valid_name(key)) fail("invalid key '" + std::string(key) + "'");

    if (key == "include") {
      const auto path = dir / std::string(value);
      const auto id = std::filesystem::weakly_canonical(path).string();
      if (std::find(stack.begin(), stack.end(), id) != stack.end()) fail("include cycle through '" + std::string(value) + "'");
      std::string inner;
      try {
        inner = read_file(path);
      } catch (const std::runtime_error& e) {
        fail(std::string("include: ") + e.what());
      }
      stack.push_back(id);
      parse_into(inner, path.string(), path.parent_path(), stack);
      stack.pop_back();
      continue;
    }
    if (section.empty()) fail("key '" + std::string(key) + "' appears before any [section]");
    entries_[section + "." + std::string(key)] = Entry{std::string(value), origin, lineno};
  }
}

void Config::set(const std::string& key, std::string value) {
  entries_[key] = Entry{std::move(value), origin_, 0, true};
}

const Config::Entry& Config::require(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError(origin_ + ": missing required key '" + key + "'");
  it->second.used = true;
  return it->second;
}

std::string Config::where(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end() || it->second.line == 0) return origin_;
  return it->second.origin + ":" + std::to_string(it->second.line);
}

void Config::bad_value(const std::string& key, const char* expected) const {
  throw ConfigError(where(key) + ": '" + key + "' expects " + expected + ", got '" + entries_.at(key).value + "'");
}

std::string Config::str(const std::string& key, std::optional<std::string> fallback) const {
  if (!has(key) && fallback) return *fallback;
  return require(key).value;
}

double Config::real(const std::string& key, std::optional<double> fallback) const {
  if (!has(key) && fallback) return *fallback;
  double v = 0.0;
  if (!parse_number(require(key).value, v)) bad_value(key, "a number");
  return v;
}

std::uint64_t Config::integer(const std::string& key, std::optional<std::uint64_t> fallback) const {
  if (!has(key) && fallback) return *fallback;
  std::uint64_t v = 0;
  if (!parse_number(require(key).value, v)) bad_value(key, "a non-negative integer");
  return v;
}

bool Config::flag(const std::string& key, std::optional<bool> fallback) const {
  if (!has(key) && fallback) return *fallback;
  const auto& v = require(key).value;
  if (v == "true" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "no" || v == "0") return false;
  bad_value(key, "true or false");
}

std::vector<std::size_t> Config::integers(const std::string& key, std::optional<std::vector<std::size_t>> fallback) const {
  if (!has(key) && fallback) return *fallback;
  std::string_view rest = require(key).value;
  std::vector<std::size_t> out;
  while (true) {
    const auto comma = rest.find(',');
    std::size_t v = 0;
    if (!parse_number(trim(rest.substr(0, comma)), v)) bad_value(key, "a comma-separated list of integers");
    out.push_back(v);
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  return out;
}

void Config::reject_unused() const {
  for (const auto& [key, e] : entries_)
    if (!e.used) throw ConfigError(where(key) + ": unknown key '" + key + "'");
}

std::string Config::canonical() const {
  std::string out, section;
  for (const auto& [key, e] : entries_) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      if (!out.empty()) out += '\n';
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + e.value + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Struct <-> section mapping

namespace {

template <class E>
using Names = std::vector<std::pair<const char*, E>>;

const Names<ConditionKind> kConditionKinds{{"none", ConditionKind::none}, {"label", ConditionKind::label}, {"vector", ConditionKind::vector}};
const Names<TransporterArch> kArchs{{"made", TransporterArch::made}, {"attention", TransporterArch::attention}};
const Names<PredictorKind> kPredictorKinds{{"mlp", PredictorKind::mlp}, {"posterior", PredictorKind::posterior}, {"linear_gaussian", PredictorKind::linear_gaussian}};
const Names<TrainMode> kModes{{"end-to-end", TrainMode::end_to_end}, {"pair-wise", TrainMode::pairwise}};

struct Reader {
  const Config& c;
  std::string section;

  std::string key(const char* k) const { return section + "." + k; }
  void operator()(const char* k, bool& v) const { v = c.flag(key(k), v); }
  void operator()(const char* k, double& v) const { v = c.real(key(k), v); }
  void operator()(const char* k, std::string& v) const { v = c.str(key(k), v); }
  void operator()(const char* k, std::vector<std::size_t>& v) const { v = c.integers(key(k), v); }
  template <std::unsigned_integral U>
  void operator()(const char* k, U& v) const { v = static_cast<U>(c.integer(key(k), v)); }
  template <class E>
  void choice(const char* k, E& v, const Names<E>& names) const {
    if (!c.has(key(k))) return;
    const auto s = c.str(key(k));
    for (const auto& [n, e] : names)
      if (s == n) { v = e; return; }
    std::string options;
    for (const auto& [n, e] : names) options += (options.empty() ? "" : "|") + std::string(n);
    throw ConfigError(c.where(key(k)) + ": '" + key(k) + "' expects one of " + options + ", got '" + s + "'");
  }
};

struct Writer {
  Config& c;
  std::string section;

  std::string key(const char* k) const { return section + "." + k; }
  void operator()(const char* k, bool v) const { c.set(key(k), v ? "true" : "false"); }
  void operator()(const char* k, double v) const { c.set(key(k), format_number(v)); }
  void operator()(const char* k, const std::string& v) const { c.set(key(k), v); }
  void operator()(const char* k, const std::vector<std::size_t>& v) const {
    std::string s;
    for (auto x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
    c.set(key(k), s);
  }
  template <std::unsigned_integral U>
  void operator()(const char* k, U v) const { c.set(key(k), std::to_string(v)); }
  template <class E>
  void choice(const char* k, E v, const Names<E>& names) const {
    for (const auto& [n, e] : names)
      if (v == e) c.set(key(k), n);
  }
};

template <class V>
void condition_fields(V& v, ConditionSpec& c) {
  v.choice("condition", c.kind, kConditionKinds);
  v("classes", c.classes);
  v("condition_dim", c.dim);
}

template <class V>
void dataset_fields(V& v, DatasetSpec& d) {
  v("name", d.name);
  v("mean", d.mean);
  v("stddev", d.stddev);
  v("components", d.components);
  v("noise", d.noise);
  v("standardize", d.standardize);
}

template <class V>
void fm_fields(V& v, FlowMatchConfig& f) {
  v("dim", f.dim);
  v("hidden", f.hidden);
  v("layers", f.layers);
  v("embed", f.embed);
  condition_fields(v, f.condition);
}

template <class V>
void transporter_fields(V& v, TransporterConfig& t) {
  v("positions", t.positions);
  v("channels", t.channels);
  v("blocks", t.blocks);
  v("hidden", t.hidden);
  v("layers", t.layers);
  v("embed", t.embed);
  v("condition_on_steps", t.condition_on_steps);
  v("skip_threshold", t.skip_threshold);
  v.choice("arch", t.arch, kArchs);
}

template <class V>
void predictor_fields(V& v, PredictorConfig& p) {
  v("dim", p.dim);
  v("hidden", p.hidden);
  v("layers", p.layers);
  v("embed", p.embed);
  v("condition_on_steps", p.condition_on_steps);
  condition_fields(v, p.condition);
}

template <class V>
void ntm_fields(V& v, NtmConfig& n) {
  v.choice("predictor_kind", n.predictor_kind, kPredictorKinds);
  v("steps", n.steps);
  v("sample_t_min", n.sample_t_min);
  v("shift", n.shift);
  v("shift_seq_len", n.shift_seq_len);
  v("gaussian_mean", n.gaussian_mean);
  v("gaussian_variance", n.gaussian_variance);
}

template <class V>
void train_fields(V& v, TrainConfig& t) {
  v.choice("mode", t.mode, kModes);
  v("batch", t.batch);
  v("iterations", t.iterations);
  v("cfg_dropout", t.cfg_dropout);
  v("lambda0", t.lambda0);
  v("t_min_lo", t.t_min_lo);
  v("t_min_hi", t.t_min_hi);
  v("lr", t.optim.lr);
  v("min_lr", t.optim.min_lr);
  v("warmup", t.optim.warmup);
  v("beta1", t.optim.beta1);
  v("beta2", t.optim.beta2);
  v("eps", t.optim.eps);
  v("weight_decay", t.optim.weight_decay);
  v("clip_norm", t.optim.clip_norm);
}

template <class V>
void denoiser_fields(V& v, DenoiserConfig& d) {
  v("positions", d.positions);
  v("channels", d.channels);
  v("hidden", d.hidden);
  v("layers", d.layers);
  condition_fields(v, d.condition);
}

}  // namespace

DatasetSpec read_dataset_spec(const Config& c) {
  DatasetSpec d;
  d.name = c.str("data.name");  // required
  Reader r{c, "data"};
  dataset_fields(r, d);
  return d;
}

void write_dataset_spec(Config& c, const DatasetSpec& d) {
  DatasetSpec copy = d;
  Writer w{c, "data"};
  dataset_fields(w, copy);
}

FlowMatchConfig read_fm_config(const Config& c, const std::string& section) {
  FlowMatchConfig f;
  Reader r{c, section};
  fm_fields(r, f);
  return f;
}

void write_fm_config(Config& c, const FlowMatchConfig& f, const std::string& section) {
  FlowMatchConfig copy = f;
  Writer w{c, section};
  fm_fields(w, copy);
}

NtmConfig read_ntm_config(const Config& c) {
  NtmConfig n;
  Reader rn{c, "ntm"}, rt{c, "transporter"}, rp{c, "predictor"};
  ntm_fields(rn, n);
  transporter_fields(rt, n.transporter);
  predictor_fields(rp, n.predictor);
  return n;
}

void write_ntm_config(Config& c, const NtmConfig& n) {
  NtmConfig copy = n;
  Writer wn{c, "ntm"}, wt{c, "transporter"}, wp{c, "predictor"};
  ntm_fields(wn, copy);
  transporter_fields(wt, copy.transporter);
  predictor_fields(wp, copy.predictor);
}

TrainConfig read_train_config(const Config& c) {
  TrainConfig t;
  Reader r{c, "train"};
  train_fields(r, t);
  return t;
}

void write_train_config(Config& c, const TrainConfig& t) {
  TrainConfig copy = t;
  Writer w{c, "train"};
  train_fields(w, copy);
}

DenoiserConfig read_denoiser_config(const Config& c) {
  DenoiserConfig d;
  Reader r{c, "denoiser"};
  denoiser_fields(r, d);
  return d;
}

void write_denoiser_config(Config& c, const DenoiserConfig& d) {
  DenoiserConfig copy = d;
  Writer w{c, "denoiser"};
  denoiser_fields(w, copy);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kMagic = "TRAJFLOW";

template <std::unsigned_integral U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <std::unsigned_integral U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint is truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void add_params(Checkpoint& ck, const ParamStore& store, const std::string& prefix = "") {
  for (std::size_t i = 0; i < store.size(); ++i) ck.tensors.push_back({prefix + store.name(i), store.shape(i), store.value(i)});
}

void restore_params(ParamStore& store, const Checkpoint& ck, const std::string& prefix = "") {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const NamedTensor* t = ck.find(prefix + store.name(i));
    if (!t) throw CheckpointError("checkpoint lacks tensor '" + prefix + store.name(i) + "'");
    if (t->shape != store.shape(i))
      throw CheckpointError("tensor '" + t->name + "' has shape " + shape_string(t->shape) + ", model expects " +
                            shape_string(store.shape(i)));
    store.value(i) = t->values;
  }
}

Config checkpoint_config(const std::string& kind, const RunInfo& info) {
  Config c;
  c.set("model.kind", kind);
  c.set("run.seed", std::to_string(info.seed));
  write_dataset_spec(c, info.data);
  return c;
}

Config parse_checkpoint_config(const Checkpoint& ck, const std::string& kind) {
  Config c = Config::parse(ck.config, "<checkpoint>");
  const auto found = c.str("model.kind");
  if (found != kind) throw CheckpointError("expected a " + kind + " checkpoint, found " + found);
  return c;
}

}  // namespace

std::string Checkpoint::encode() const {
  std::string out(kMagic);
  put(out, version);
  put(out, static_cast<std::uint64_t>(config.size()));
  out += config;
  put(out, static_cast<std::uint64_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (static_cast<std::size_t>(t.values.size()) != shape_size(t.shape))
      throw CheckpointError("tensor '" + t.name + "' does not match its shape");
    put(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put(out, static_cast<std::uint64_t>(d));
    for (double v : t.values) put(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint Checkpoint::decode(std::string_view bytes) {
  ByteReader r(bytes);
  if (bytes.size() < kMagic.size() || r.take(kMagic.size()) != kMagic) throw CheckpointError("not a trajflow checkpoint");
  if (const auto v = r.get<std::uint32_t>(); v != version)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(v));
  Checkpoint ck;
  ck.config = std::string(r.take(r.get<std::uint64_t>()));
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = std::string(r.take(r.get<std::uint32_t>()));
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.get<std::uint64_t>());
    t.values.resize(static_cast<Eigen::Index>(shape_size(t.shape)));
    for (auto& v : t.values) v = std::bit_cast<double>(r.get<std::uint64_t>());
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last tensor");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  const auto bytes = encode();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw CheckpointError("checkpoint '" + path.string() + "' not found");
  return decode(read_file(path));
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

Checkpoint fm_checkpoint(const FlowMatchModel& m, const RunInfo& info) {
  Config c = checkpoint_config("fm", info);
  write_fm_config(c, m.config());
  Checkpoint ck{c.canonical(), {}};
  add_params(ck, m.params());
  return ck;
}

Checkpoint ntm_checkpoint(const NtmModel& m, const RunInfo& info) {
  Config c = checkpoint_config("ntm", info);
  write_ntm_config(c, m.config());
  c.set("model.finetuned", m.reference() ? "true" : "false");
  if (m.reference()) write_fm_config(c, m.reference()->config(), "reference");
  Checkpoint ck{c.canonical(), {}};
  add_params(ck, m.params());
  if (m.reference()) add_params(ck, m.reference()->params(), "reference/");
  return ck;
}

Checkpoint denoiser_checkpoint(const Denoiser& d, const RunInfo& info) {
  Config c = checkpoint_config("denoiser", info);
  write_denoiser_config(c, d.config());
  Checkpoint ck{c.canonical(), {}};
  add_params(ck, d.params());
  return ck;
}

std::string checkpoint_kind(const Checkpoint& c) { return Config::parse(c.config, "<checkpoint>").str("model.kind"); }

RunInfo checkpoint_run_info(const Checkpoint& ck) {
  Config c = Config::parse(ck.config, "<checkpoint>");
  return {read_dataset_spec(c), c.integer("run.seed")};
}

FlowMatchModel load_fm(const Checkpoint& ck) {
  Config c = parse_checkpoint_config(ck, "fm");
  FlowMatchModel m = FlowMatchModel::make(read_fm_config(c), 0);
  restore_params(m.params(), ck);
  return m;
}

NtmModel load_ntm(const Checkpoint& ck) {
  Config c = parse_checkpoint_config(ck, "ntm");
  const NtmConfig cfg = read_ntm_config(c);
  if (c.flag("model.finetuned")) {
    FlowMatchModel fm = FlowMatchModel::make(read_fm_config(c, "reference"), 0);
    restore_params(fm.params(), ck, "reference/");
    NtmModel m = finetune_init(fm, cfg, 0);
    restore_params(m.params(), ck);
    return m;
  }
  NtmModel m = NtmModel::make(cfg, 0);
  restore_params(m.params(), ck);
  return m;
}

Denoiser load_denoiser(const Checkpoint& ck) {
  Config c = parse_checkpoint_config(ck, "denoiser");
  Denoiser d = Denoiser::make(read_denoiser_config(c), 0);
  restore_params(d.params(), ck);
  return d;
}

// ---------------------------------------------------------------------------
// Artifacts

std::string content_hash(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string blob_hash(std::string_view bytes) {
  std::string framed = "blob " + std::to_string(bytes.size());
  framed.push_back('\0');
  framed.append(bytes);
  return content_hash(framed);
}

std::string format_number(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

CsvWriter::CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
    : out_(path, std::ios::binary), width_(header.size()) {
  if (!out_) throw std::runtime_error("cannot write '" + path.string() + "'");
  for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
  out_ << '\n';
}

void CsvWriter::row(const std::vector<double>& values) {
  if (values.size() != width_) throw std::invalid_argument("csv: row width does not match the header");
  for (std::size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << format_number(values[i]);
  out_ << '\n';
}

void write_matrix_csv(const std::filesystem::path& path, const RowMatrix& x,
                      const std::optional<std::vector<int>>& labels) {
  std::vector<std::string> header;
  for (Eigen::Index j = 0; j < x.cols(); ++j) header.push_back("x" + std::to_string(j));
  const bool labeled = labels.has_value();
  if (labeled) header.push_back("label");
  CsvWriter csv(path, header);
  std::vector<double> row(header.size());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) row[static_cast<std::size_t>(j)] = x(i, j);
    if (labeled) row.back() = labels->at(static_cast<std::size_t>(i));
    csv.row(row);
  }
}

void write_trajectory_csv(const std::filesystem::path& path, const std::vector<RowMatrix>& levels) {
  const Eigen::Index d = levels.empty() ? 0 : levels[0].cols();
  std::vector<std::string> header{"level", "sample"};
  for (Eigen::Index j = 0; j < d; ++j) header.push_back("x" + std::to_string(j));
  CsvWriter csv(path, header);
  std::vector<double> row(header.size());
  for (std::size_t k = 0; k < levels.size(); ++k)
    for (Eigen::Index i = 0; i < levels[k].rows(); ++i) {
      row[0] = static_cast<double>(k);
      row[1] = static_cast<double>(i);
      for (Eigen::Index j = 0; j < d; ++j) row[static_cast<std::size_t>(j) + 2] = levels[k](i, j);
      csv.row(row);
    }
}

void write_density_ppm(const std::filesystem::path& path, const RowMatrix& xy, std::size_t size, double extent) {
  if (xy.cols() != 2) throw std::invalid_argument("density heatmap needs 2-D samples");
  const auto n = static_cast<Eigen::Index>(size);
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < xy.rows(); ++i) {
    const double fx = (xy(i, 0) + extent) / (2 * extent), fy = (xy(i, 1) + extent) / (2 * extent);
    if (!(fx >= 0 && fx < 1 && fy >= 0 && fy < 1)) continue;
    const auto col = static_cast<Eigen::Index>(fx * static_cast<double>(size));
    const auto row = n - 1 - static_cast<Eigen::Index>(fy * static_cast<double>(size));
    counts(row, col) += 1.0;
  }
  const double top = std::log1p(counts.maxCoeff());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "P6\n" << size << ' ' << size << "\n255\n";
  auto byte = [](double v) { return static_cast<char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); };
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < n; ++c) {
      const double v = top > 0 ? std::log1p(counts(r, c)) / top : 0.0;
      const char px[3] = {byte(1.5 * v), byte(v * v), byte(v < 0.5 ? 0.8 * v : 0.8 * (1 - v) + 0.4 * v)};
      out.write(px, 3);
    }
}

std::string RunManifest::run_id() const { return config_hash().substr(0, 8) + "-" + std::to_string(seed); }

void RunManifest::write(const std::filesystem::path& dir) const {
  std::ofstream out(dir / "manifest.txt", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest in '" + dir.string() + "'");
  out << "run_id = " << run_id() << '\n'
      << "command = " << command << '\n'
      << "seed = " << seed << '\n'
      << "config_hash = " << config_hash() << '\n';
  if (!checkpoint_hash.empty()) out << "checkpoint_hash = " << checkpoint_hash << '\n';
  out << "files =";
  for (const auto& f : files) out << ' ' << f;
  out << '\n' << "started = " << started << '\n' << "finished = " << finished << '\n' << "--- config ---\n" << config;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

int configure_threads() {
  const char* env = std::getenv("TRAJFLOW_THREADS");
  if (!env || !*env) return Eigen::nbThreads();
  int n = 0;
  if (!parse_number(std::string_view(env), n) || n < 1)
    throw ConfigError("TRAJFLOW_THREADS must be a positive integer, got '" + std::string(env) + "'");
  Eigen::setNbThreads(n);
  return n;
}

}  // namespace trajflow
