#include "trajflow/schedule.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

namespace trajflow {

TimeSchedule::TimeSchedule(std::vector<double> times) : times_(std::move(times)) {
  if (times_.size() < 2) throw std::invalid_argument("schedule: needs at least two times");
  if (times_.back() != 1.0) throw std::invalid_argument("schedule: last time must be exactly 1");
  if (!(times_.front() >= 0.0)) throw std::invalid_argument("schedule: t_min must be >= 0");
  for (std::size_t k = 1; k < times_.size(); ++k)
    if (!(times_[k] > times_[k - 1]))
      throw std::invalid_argument("schedule: times must be strictly increasing");
}

TimeSchedule TimeSchedule::with_t_min(double t_min) const {
  auto t = times_;
  t.front() = t_min;
  return TimeSchedule(std::move(t));
}

std::string TimeSchedule::to_string() const {
  // Shortest round-trip representation of each entry.
  std::string out;
  char buf[32];
  for (std::size_t k = 0; k < times_.size(); ++k) {
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, times_[k]);
    if (k) out += ',';
    out.append(buf, end);
  }
  return out;
}

TimeSchedule TimeSchedule::parse(const std::string& line) {
  std::vector<double> t;
  std::size_t pos = 0;
  while (pos <= line.size()) {
    std::size_t next = line.find(',', pos);
    if (next == std::string::npos) next = line.size();
    std::string field = line.substr(pos, next - pos);
    const auto b = field.find_first_not_of(" \t\r\n");
    const auto e = field.find_last_not_of(" \t\r\n");
    if (b == std::string::npos) throw std::invalid_argument("schedule: empty field in '" + line + "'");
    field = field.substr(b, e - b + 1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc() || ptr != field.data() + field.size())
      throw std::invalid_argument("schedule: cannot parse '" + field + "'");
    t.push_back(v);
    pos = next + 1;
  }
  return TimeSchedule(std::move(t));
}

TimeSchedule build_schedule(std::size_t step_count, double t_min) {
  if (step_count < 1) throw std::invalid_argument("build_schedule: step_count must be >= 1");
  const double first = 1.0 / static_cast<double>(step_count);
  if (!(t_min >= 0.0) || !(t_min < first))
    throw std::invalid_argument("build_schedule: t_min must lie in [0, 1/T)");
  std::vector<double> t(step_count + 1);
  t[0] = t_min;
  for (std::size_t k = 1; k < step_count; ++k)
    t[k] = static_cast<double>(k) / static_cast<double>(step_count);
  t[step_count] = 1.0;
  return TimeSchedule(std::move(t));
}

double shift_mu(std::size_t seq_len) {
  if (seq_len < 1) throw std::invalid_argument("shift: seq_len must be >= 1");
  return 0.5 + 0.65 * (static_cast<double>(seq_len) - 256.0) / (4096.0 - 256.0);
}

double shift_time(double sigma, double mu) {
  if (!(sigma > 0.0) || !(sigma <= 1.0)) throw std::invalid_argument("shift: time must be in (0, 1]");
  if (sigma == 1.0) return 1.0;
  const double em = std::exp(mu);
  return em / (em + 1.0 / sigma - 1.0);
}

TimeSchedule apply_shift(const TimeSchedule& schedule, std::size_t seq_len) {
  const double mu = shift_mu(seq_len);
  auto t = schedule.times();
  for (std::size_t k = 1; k < t.size(); ++k) t[k] = shift_time(t[k], mu);
  if (t[1] <= t[0]) throw std::invalid_argument("apply_shift: shifted grid falls below t_min");
  return TimeSchedule(std::move(t));
}

Tensor forward_transition(const Tensor& x_s, double s, double t, const Tensor& noise) {
  if (x_s.shape() != noise.shape())
    throw std::invalid_argument("forward_transition: noise shape " + shape_string(noise.shape()) +
                                " != state shape " + shape_string(x_s.shape()));
  const auto c = forward_coeffs(s, t);
  return add(scale(x_s, c.alpha), scale(noise, c.sigma));
}

TimeSchedule Trajectory::schedule(std::size_t b) const {
  const auto r = static_cast<Eigen::Index>(b);
  std::vector<double> t(static_cast<std::size_t>(times.cols()));
  for (Eigen::Index k = 0; k < times.cols(); ++k) t[static_cast<std::size_t>(k)] = times(r, k);
  return TimeSchedule(std::move(t));
}

Eigen::MatrixXd schedule_rows(const TimeSchedule& schedule, std::size_t batch) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(schedule.levels()));
  for (std::size_t k = 0; k < schedule.levels(); ++k) m.col(static_cast<Eigen::Index>(k)).setConstant(schedule[k]);
  return m;
}

Trajectory sample_trajectory_from_anchor(const RowMatrix& anchor, const Eigen::MatrixXd& times,
                                         Rng& rng) {
  if (times.rows() != anchor.rows()) throw std::invalid_argument("sample_trajectory: row mismatch");
  Trajectory tr;
  tr.times = times;
  tr.levels.push_back(anchor);
  for (Eigen::Index k = 1; k < times.cols(); ++k) {
    RowMatrix eps = standard_normal(anchor.rows(), anchor.cols(), rng);
    RowMatrix next(anchor.rows(), anchor.cols());
    for (Eigen::Index b = 0; b < anchor.rows(); ++b) {
      const auto c = forward_coeffs(times(b, k - 1), times(b, k));
      next.row(b) = c.alpha * tr.levels.back().row(b) + c.sigma * eps.row(b);
    }
    tr.levels.push_back(std::move(next));
  }
  return tr;
}

Trajectory sample_trajectory(const RowMatrix& x0, const Eigen::MatrixXd& times, Rng& rng) {
  if (times.rows() != x0.rows()) throw std::invalid_argument("sample_trajectory: row mismatch");
  RowMatrix eps = standard_normal(x0.rows(), x0.cols(), rng);
  RowMatrix anchor(x0.rows(), x0.cols());
  for (Eigen::Index b = 0; b < x0.rows(); ++b) {
    const double t0 = times(b, 0);
    anchor.row(b) = (1.0 - t0) * x0.row(b) + t0 * eps.row(b);
  }
  return sample_trajectory_from_anchor(anchor, times, rng);
}

Trajectory sample_trajectory(const RowMatrix& x0, const TimeSchedule& schedule, Rng& rng) {
  return sample_trajectory(x0, schedule_rows(schedule, static_cast<std::size_t>(x0.rows())), rng);
}

}  // namespace trajflow
