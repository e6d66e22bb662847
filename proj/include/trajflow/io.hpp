#pragma once

// Config files, binary checkpoints, CSV / PPM artifacts and run manifests.

#include "trajflow/data_metrics.hpp"
#include "trajflow/model.hpp"
#include "trajflow/sampling.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace trajflow {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sectioned `key = value` text. Keys are addressed as "section.key".
///
///   # comment
///   include = presets/small.cfg   (path relative to the including file)
///   [train]
///   batch = 128
///
/// Later assignments override earlier ones, including those pulled in by
/// `include`. Every read marks the key as used; `reject_unused` reports the
/// first key nobody read, with its file and line.
class Config {
 public:
  static Config parse(std::string_view text, const std::string& origin = "<string>");
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  /// Values set in code count as used.
  void set(const std::string& key, std::string value);
  void erase(const std::string& key) { entries_.erase(key); }

  std::string str(const std::string& key, std::optional<std::string> fallback = {}) const;
  double real(const std::string& key, std::optional<double> fallback = {}) const;
  std::uint64_t integer(const std::string& key, std::optional<std::uint64_t> fallback = {}) const;
  bool flag(const std::string& key, std::optional<bool> fallback = {}) const;
  std::vector<std::size_t> integers(const std::string& key, std::optional<std::vector<std::size_t>> fallback = {}) const;

  /// "file:line" of a key, or the file alone for keys set in code.
  std::string where(const std::string& key) const;
  void reject_unused() const;
  /// Sorted, comment-free text; parse(canonical()) reproduces the same entries.
  std::string canonical() const;

 private:
  struct Entry {
    std::string value;
    std::string origin;
    std::size_t line = 0;
    mutable bool used = false;
  };
  const Entry& require(const std::string& key) const;
  [[noreturn]] void bad_value(const std::string& key, const char* expected) const;
  void parse_into(std::string_view text, const std::string& origin, const std::filesystem::path& dir,
                  std::vector<std::string>& stack);

  std::map<std::string, Entry> entries_;
  std::string origin_ = "<string>";
};

// Structured sections. Readers fill every field from `section.key`, keeping
// the struct's default when a key is absent; writers emit every field.
DatasetSpec read_dataset_spec(const Config& c);
void write_dataset_spec(Config& c, const DatasetSpec& d);
FlowMatchConfig read_fm_config(const Config& c, const std::string& section = "fm");
void write_fm_config(Config& c, const FlowMatchConfig& f, const std::string& section = "fm");
NtmConfig read_ntm_config(const Config& c);
void write_ntm_config(Config& c, const NtmConfig& n);
TrainConfig read_train_config(const Config& c);
void write_train_config(Config& c, const TrainConfig& t);
DenoiserConfig read_denoiser_config(const Config& c);
void write_denoiser_config(Config& c, const DenoiserConfig& d);

// ---------------------------------------------------------------------------
// Checkpoints

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  Eigen::VectorXd values;
};

/// Binary layout, little-endian throughout:
///   "TRAJFLOW" | u32 version | u64 n + config text | u64 count |
///   count x (u32 n + name | u32 rank | u64 dims[rank] | f64 values[])
struct Checkpoint {
  static constexpr std::uint32_t version = 1;
  std::string config;
  std::vector<NamedTensor> tensors;

  std::string encode() const;
  static Checkpoint decode(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
  const NamedTensor* find(const std::string& name) const;
};

/// Data and run metadata carried alongside a model.
struct RunInfo {
  DatasetSpec data;
  std::uint64_t seed = 0;
};

Checkpoint fm_checkpoint(const FlowMatchModel& m, const RunInfo& info);
Checkpoint ntm_checkpoint(const NtmModel& m, const RunInfo& info);
Checkpoint denoiser_checkpoint(const Denoiser& d, const RunInfo& info);

/// "fm", "ntm" or "denoiser".
std::string checkpoint_kind(const Checkpoint& c);
RunInfo checkpoint_run_info(const Checkpoint& c);
FlowMatchModel load_fm(const Checkpoint& c);
NtmModel load_ntm(const Checkpoint& c);
Denoiser load_denoiser(const Checkpoint& c);

// ---------------------------------------------------------------------------
// Artifacts

/// 64-bit FNV-1a, hex encoded.
std::string content_hash(std::string_view bytes);
/// Hash of "blob <size>\0" followed by the bytes, as git frames objects.
std::string blob_hash(std::string_view bytes);

std::string format_number(double v);

/// Comma-separated, '.' decimals, LF line endings, shortest round-trip digits.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);
  void row(const std::vector<double>& values);

 private:
  std::ofstream out_;
  std::size_t width_;
};

/// Columns x0, x1, ... plus a label column whenever `labels` is given.
void write_matrix_csv(const std::filesystem::path& path, const RowMatrix& x,
                      const std::optional<std::vector<int>>& labels = std::nullopt);
/// Long format: level, sample, x0, x1, ...
void write_trajectory_csv(const std::filesystem::path& path, const std::vector<RowMatrix>& levels);

/// Binary PPM (P6) of a 2-D histogram over [-extent, extent]^2, log-scaled.
void write_density_ppm(const std::filesystem::path& path, const RowMatrix& xy, std::size_t size = 128,
                       double extent = 3.0);

struct RunManifest {
  std::string command;
  std::uint64_t seed = 0;
  std::string config;  // canonical snapshot
  std::string checkpoint_hash;
  std::vector<std::string> files;
  std::string started, finished;

  std::string run_id() const;
  std::string config_hash() const { return content_hash(config); }
  void write(const std::filesystem::path& dir) const;
};

/// UTC wall-clock time, ISO 8601.
std::string utc_now();

/// Reads TRAJFLOW_THREADS and caps Eigen's worker count; returns the cap.
int configure_threads();

}  // namespace trajflow
