#include "trajflow/flow.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace trajflow {

namespace {

Tensor column(const Eigen::VectorXd& v) {
  return Tensor::constant({static_cast<std::size_t>(v.size()), 1}, v);
}

// Leading extent as rows, everything else as columns.
Tensor as_rows(const Tensor& x) {
  if (x.dim() == 2) return x;
  const std::size_t r = x.extent(0);
  return reshape(x, {r, x.size() / r});
}

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

Tensor positive_scale(const Tensor& raw) { return exp(clamp(raw, -kLogScaleBound, kLogScaleBound)); }

AffineForward affine_forward(const Tensor& x, const CouplingParams& p) {
  if (x.shape() != p.mu.shape() || x.shape() != p.sigma.shape())
    throw std::invalid_argument("affine_forward: shape mismatch " + shape_string(x.shape()));
  if ((p.sigma.vector().array() <= 0.0).any())
    throw std::logic_error("affine_forward: nonpositive scale");
  Tensor z = div(sub(x, p.mu), p.sigma);
  Tensor logdet = neg(sum_last(as_rows(log(p.sigma))));
  return {z, logdet};
}

Tensor affine_inverse(const Tensor& z, const CouplingParams& p) {
  if (z.shape() != p.mu.shape() || z.shape() != p.sigma.shape())
    throw std::invalid_argument("affine_inverse: shape mismatch " + shape_string(z.shape()));
  if ((p.sigma.vector().array() <= 0.0).any())
    throw std::logic_error("affine_inverse: nonpositive scale");
  return add(mul(z, p.sigma), p.mu);
}

RowTimes RowTimes::select(const std::vector<std::size_t>& rows) const {
  RowTimes out;
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.t.resize(n);
  out.s.resize(s.size() ? n : 0);
  out.steps.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]);
    out.t[i] = t[r];
    if (s.size()) out.s[i] = s[r];
    out.steps[i] = steps[r];
  }
  return out;
}

RowTimes RowTimes::concat(const RowTimes& a, const RowTimes& b) {
  RowTimes out;
  out.t.resize(a.t.size() + b.t.size());
  out.t << a.t, b.t;
  if (a.s.size() && b.s.size()) {
    out.s.resize(a.s.size() + b.s.size());
    out.s << a.s, b.s;
  }
  out.steps.resize(a.steps.size() + b.steps.size());
  out.steps << a.steps, b.steps;
  return out;
}

// ---------------------------------------------------------------------------
// Transporter

namespace {

// x / sqrt(mean(x^2) + eps) over the last axis of a [rows, width] tensor.
Tensor rms_normalize(const Tensor& x) {
  const double width = static_cast<double>(x.cols());
  Tensor ms = add_scalar(scale(sum_last(square(x)), 1.0 / width), 1e-6);
  return div(x, reshape(exp(scale(log(ms), 0.5)), {x.rows(), 1}));
}

RowMatrix flip_positions(std::size_t positions, std::size_t channels) {
  const auto d = static_cast<Eigen::Index>(positions * channels);
  RowMatrix m = RowMatrix::Zero(d, d);
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t c = 0; c < channels; ++c)
      m(static_cast<Eigen::Index>(p * channels + c),
        static_cast<Eigen::Index>((positions - 1 - p) * channels + c)) = 1.0;
  return m;
}

}  // namespace

Transporter Transporter::make(ParamStore& store, const std::string& name, const TransporterConfig& cfg,
                              Rng& rng) {
  if (cfg.positions < 1 || cfg.channels < 1 || cfg.layers < 1)
    throw std::invalid_argument("transporter: empty geometry");
  Transporter tr;
  tr.cfg_ = cfg;
  const std::size_t d = cfg.dim(), h = cfg.hidden, P = cfg.positions, C = cfg.channels;
  for (std::size_t i = 0; i < d; ++i) tr.degree_.push_back(i / C);

  for (std::size_t bi = 0; bi < cfg.blocks; ++bi) {
    const std::string bn = name + ".block" + std::to_string(bi);
    TransporterBlock b;
    b.order = (bi % 2 == 0) ? ScanOrder::forward : ScanOrder::reversed;
    b.time_proj = Linear::make(store, bn + ".time", cfg.embed, h, rng);
    if (cfg.condition_on_steps) b.steps_proj = Linear::make(store, bn + ".steps", cfg.embed, h, rng);

    if (cfg.arch == TransporterArch::made) {
      auto unit_degree = [&](std::size_t unit) {
        const std::size_t p = unit / C;
        return b.order == ScanOrder::forward ? p : P - 1 - p;
      };
      std::vector<std::size_t> hidden_degree(h);
      for (std::size_t k = 0; k < h; ++k) hidden_degree[k] = k % P;
      for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::size_t in = (l == 0) ? d : h;
        MaskedLinear ml{Linear::make(store, bn + ".l" + std::to_string(l), in, h, rng),
                        RowMatrix::Zero(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(h))};
        for (std::size_t i = 0; i < in; ++i)
          for (std::size_t k = 0; k < h; ++k) {
            const bool on = (l == 0) ? unit_degree(i) < hidden_degree[k]
                                     : hidden_degree[i] <= hidden_degree[k];
            ml.mask(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = on ? 1.0 : 0.0;
          }
        b.layers.push_back(std::move(ml));
      }
      b.head = {Linear::make(store, bn + ".head", h, 2 * d, rng, /*zero_init=*/true),
                RowMatrix::Zero(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(2 * d))};
      for (std::size_t k = 0; k < h; ++k)
        for (std::size_t o = 0; o < 2 * d; ++o)
          b.head.mask(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(o)) =
              hidden_degree[k] <= unit_degree(o % d) ? 1.0 : 0.0;
    } else {
      b.token_in = Linear::make(store, bn + ".token_in", C, h, rng);
      b.query = Linear::make(store, bn + ".query", h, h, rng);
      b.key = Linear::make(store, bn + ".key", h, h, rng);
      b.value = Linear::make(store, bn + ".value", h, h, rng);
      b.mlp_in = Linear::make(store, bn + ".mlp_in", h, h, rng);
      b.mlp_out = Linear::make(store, bn + ".mlp_out", h, h, rng);
      b.token_head = Linear::make(store, bn + ".head", h, 2 * C, rng, /*zero_init=*/true);
      RowMatrix st = standard_normal(1, static_cast<Eigen::Index>(h), rng) * 0.1;
      b.start_token = store.add(bn + ".start", {h}, Eigen::Map<Eigen::VectorXd>(st.data(), st.size()));
      RowMatrix pe = standard_normal(static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(h), rng) * 0.1;
      b.pos_embed = store.add(bn + ".pos", {P, h}, Eigen::Map<Eigen::VectorXd>(pe.data(), pe.size()));
    }
    tr.blocks_.push_back(std::move(b));
  }
  return tr;
}

Transporter::TimeFeatures Transporter::time_features(const RowTimes& times) const {
  TimeFeatures f;
  f.t = Tensor::from_matrix(sinusoidal_embedding(times.t, cfg_.embed));
  if (cfg_.condition_on_steps) f.steps = Tensor::from_matrix(sinusoidal_embedding(times.steps, cfg_.embed, 1.0));
  return f;
}

Tensor Transporter::conditioning(Binder& p, const TransporterBlock& b, const TimeFeatures& f) const {
  Tensor c = b.time_proj(p, f.t);
  if (b.steps_proj) c = add(c, (*b.steps_proj)(p, f.steps));
  return c;
}

Tensor Transporter::keep_mask(const RowTimes& times) const {
  if ((times.t.array() < cfg_.skip_threshold).all()) return {};
  Eigen::VectorXd keep = (times.t.array() < cfg_.skip_threshold).cast<double>();
  return column(keep);
}

CouplingParams Transporter::block_params(Binder& p, std::size_t bi, const Tensor& x, const Tensor& cond,
                                         const RowTimes& times) const {
  const TransporterBlock& b = blocks_.at(bi);
  const std::size_t d = cfg_.dim(), P = cfg_.positions, C = cfg_.channels, h = cfg_.hidden;
  const std::size_t rows = x.rows();
  Tensor mu, raw;
  if (cfg_.arch == TransporterArch::made) {
    Tensor a = gelu(add(b.layers[0](p, x), cond));
    for (std::size_t l = 1; l < b.layers.size(); ++l) a = gelu(b.layers[l](p, a));
    Tensor out = b.head(p, a);
    mu = slice_cols(out, 0, d);
    raw = slice_cols(out, d, d);
  } else {
    const bool flip = b.order == ScanOrder::reversed;
    Tensor perm = flip ? Tensor::from_matrix(flip_positions(P, C)) : Tensor();
    Tensor xs = flip ? matmul(x, perm) : x;
    Tensor tok = b.token_in(p, reshape(xs, {rows * P, C}));
    // Shift right by one position so token n only sees positions < n.
    tok = reshape(tok, {rows, P * h});
    Tensor start = broadcast_to(p(b.start_token), {rows, h});
    tok = (P > 1) ? concat_cols({start, slice_cols(tok, 0, (P - 1) * h)}) : start;
    std::vector<std::size_t> owner(rows * P);
    for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = i / P;
    tok = add(reshape(tok, {rows * P, h}), gather_rows(cond, owner));
    Tensor seq = add(reshape(tok, {rows, P, h}), p(b.pos_embed));
    Tensor flat = reshape(seq, {rows * P, h});
    Tensor q = reshape(b.query(p, flat), {rows, P, h});
    Tensor k = reshape(b.key(p, flat), {rows, P, h});
    Tensor v = reshape(b.value(p, flat), {rows, P, h});
    Tensor scores = scale(batch_matmul(q, transpose_last(k)), 1.0 / std::sqrt(static_cast<double>(h)));
    RowMatrix causal = RowMatrix::Zero(static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(P));
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t j = 0; j <= i; ++j) causal(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
    Tensor att = batch_matmul(masked_softmax(scores, causal), v);
    Tensor hs = add(flat, reshape(att, {rows * P, h}));
    hs = add(hs, b.mlp_out(p, gelu(b.mlp_in(p, hs))));
    Tensor out = b.token_head(p, rms_normalize(hs));  // [rows * P, 2C]
    mu = reshape(slice_cols(out, 0, C), {rows, d});
    raw = reshape(slice_cols(out, C, C), {rows, d});
    if (flip) {
      mu = matmul(mu, perm);
      raw = matmul(raw, perm);
    }
  }
  if (Tensor keep = keep_mask(times); keep.defined()) {
    mu = mul(mu, keep);
    raw = mul(raw, keep);
  }
  return {mu, positive_scale(raw)};
}

Transporter::Output Transporter::block_forward(Binder& p, std::size_t block, const Tensor& x,
                                               const RowTimes& times) const {
  return block_forward(p, block, x, times, time_features(times));
}

Transporter::Output Transporter::block_forward(Binder& p, std::size_t block, const Tensor& x,
                                               const RowTimes& times, const TimeFeatures& f) const {
  if (x.cols() != cfg_.dim() || x.rows() != times.rows())
    throw std::invalid_argument("transporter: input " + shape_string(x.shape()) + " does not match geometry");
  Tensor x2 = as_rows(x);
  auto params = block_params(p, block, x2, conditioning(p, blocks_.at(block), f), times);
  auto a = affine_forward(x2, params);
  return {a.z, a.logdet};
}

Transporter::Output Transporter::forward(Binder& p, const Tensor& x, const RowTimes& times) const {
  Tensor u = as_rows(x);
  Tensor logdet = Tensor::constant({u.rows()}, 0.0);
  const TimeFeatures f = time_features(times);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    auto o = block_forward(p, b, u, times, f);
    u = o.u;
    logdet = add(logdet, o.logdet);
  }
  if (x.dim() != 2) u = reshape(u, x.shape());
  return {u, logdet};
}

RowMatrix Transporter::block_inverse(Binder& p, std::size_t block, const RowMatrix& u,
                                     const RowTimes& times, std::size_t* network_evals) const {
  return block_inverse(p, block, u, times, time_features(times), network_evals);
}

RowMatrix Transporter::block_inverse(Binder& p, std::size_t block, const RowMatrix& u, const RowTimes& times,
                                     const TimeFeatures& f, std::size_t* network_evals) const {
  const TransporterBlock& b = blocks_.at(block);
  const std::size_t P = cfg_.positions, C = cfg_.channels;
  const Tensor cond = conditioning(p, b, f);
  RowMatrix x = RowMatrix::Zero(u.rows(), u.cols());
  for (std::size_t step = 0; step < P; ++step) {
    const std::size_t pos = b.order == ScanOrder::forward ? step : P - 1 - step;
    auto params = block_params(p, block, Tensor::from_matrix(x), cond, times);
    if (network_evals) ++*network_evals;
    auto mu = params.mu.matrix();
    auto sigma = params.sigma.matrix();
    const auto c0 = static_cast<Eigen::Index>(pos * C);
    const auto nc = static_cast<Eigen::Index>(C);
    x.middleCols(c0, nc) = u.middleCols(c0, nc).cwiseProduct(sigma.middleCols(c0, nc)) + mu.middleCols(c0, nc);
  }
  return x;
}

RowMatrix Transporter::inverse(Binder& p, const RowMatrix& u, const RowTimes& times,
                               std::size_t* network_evals) const {
  RowMatrix x = u;
  const TimeFeatures f = time_features(times);
  for (std::size_t b = blocks_.size(); b-- > 0;) x = block_inverse(p, b, x, times, f, network_evals);
  return x;
}

// ---------------------------------------------------------------------------
// Predictors

MlpPredictor MlpPredictor::make(ParamStore& store, const std::string& name, const PredictorConfig& cfg,
                                Rng& rng) {
  MlpPredictor m;
  m.cfg = cfg;
  m.net = ConditionedMlp::make(store, name + ".net", cfg.dim, cfg.hidden, cfg.layers, 2 * cfg.dim, rng,
                               /*zero_head=*/true);
  m.t_proj = Linear::make(store, name + ".t", cfg.embed, cfg.hidden, rng);
  m.s_proj = Linear::make(store, name + ".s", cfg.embed, cfg.hidden, rng);
  if (cfg.condition_on_steps) m.steps_proj = Linear::make(store, name + ".steps", cfg.embed, cfg.hidden, rng);
  m.cond = ConditionEmbedding::make(store, name + ".cond", cfg.condition, cfg.hidden, rng);
  return m;
}

CouplingParams MlpPredictor::params(Binder& p, const Tensor& u_t, const RowTimes& times,
                                    const Condition& y) const {
  Tensor c = add(t_proj(p, Tensor::from_matrix(sinusoidal_embedding(times.t, cfg.embed))),
                 s_proj(p, Tensor::from_matrix(sinusoidal_embedding(times.s, cfg.embed))));
  if (steps_proj)
    c = add(c, (*steps_proj)(p, Tensor::from_matrix(sinusoidal_embedding(times.steps, cfg.embed, 1.0))));
  if (Tensor e = cond(p, y); e.defined()) c = add(c, e);
  Tensor out = net(p, u_t, c).out;
  return {slice_cols(out, 0, cfg.dim), positive_scale(slice_cols(out, cfg.dim, cfg.dim))};
}

VelocityNet VelocityNet::make(ParamStore& store, const std::string& name, std::size_t dim,
                              std::size_t hidden, std::size_t layers, std::size_t embed,
                              ConditionSpec condition, Rng& rng) {
  VelocityNet v;
  v.dim = dim;
  v.embed = embed;
  v.net = ConditionedMlp::make(store, name + ".net", dim, hidden, layers, dim, rng, /*zero_head=*/true);
  v.t_proj = Linear::make(store, name + ".t", embed, hidden, rng);
  v.cond = ConditionEmbedding::make(store, name + ".cond", condition, hidden, rng);
  return v;
}

ConditionedMlp::Output VelocityNet::operator()(Binder& p, const Tensor& x, const Eigen::VectorXd& t,
                                               const Condition& y) const {
  Tensor c = t_proj(p, Tensor::from_matrix(sinusoidal_embedding(t, embed)));
  if (Tensor e = cond(p, y); e.defined()) c = add(c, e);
  return net(p, x, c);
}

RowPosterior row_posterior(const RowTimes& times) {
  const auto n = times.t.size();
  Eigen::VectorXd a(n), b(n), c(n);
  const double floor = std::exp(-kLogScaleBound);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto pc = posterior_coeffs(times.t[i], times.s[i]);
    a[i] = pc.a;
    b[i] = pc.b;
    c[i] = std::max(pc.c, floor);
  }
  return {column(a), column(b), column(c), column(times.t)};
}

Tensor posterior_mean(const Tensor& u_t, const Tensor& v, const RowPosterior& post) {
  Tensor x0_hat = sub(u_t, mul(v, post.t));
  return add(mul(u_t, post.a), mul(x0_hat, post.b));
}

CouplingParams PosteriorPredictor::params(Binder& p, const Tensor& u_t, const RowTimes& times,
                                          const Condition& y) const {
  return params(p, u_t, times, y, nullptr);
}

CouplingParams PosteriorPredictor::params(Binder& p, const Tensor& u_t, const RowTimes& times,
                                          const Condition& y, Tensor* delta) const {
  auto out = backbone(p, u_t, times.t, y);
  RowPosterior post = row_posterior(times);
  Tensor d = proj_out(p, out.features);
  if (delta) *delta = d;
  Tensor mu = posterior_mean(u_t, out.out, post);
  Tensor sigma = mul(positive_scale(d), post.c);
  return {mu, sigma};
}

CouplingParams LinearGaussianPredictor::params(const Tensor& u_t, const RowTimes& times) const {
  const auto n = times.t.size();
  Eigen::VectorXd gain(n), offset(n), sd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = times.t[i], s = times.s[i];
    if (!(s < t)) throw std::invalid_argument("predictor: need s < t");
    const double mean_s = (1.0 - s) * mean, mean_t = (1.0 - t) * mean;
    const double var_s = (1.0 - s) * (1.0 - s) * variance + s * s;
    const double var_t = (1.0 - t) * (1.0 - t) * variance + t * t;
    const double cov = (1.0 - s) * (1.0 - t) * variance + trajectory_cov_entry(s, t);
    gain[i] = cov / var_t;
    offset[i] = mean_s - gain[i] * mean_t;
    sd[i] = std::sqrt(std::max(var_s - cov * cov / var_t, 0.0));
  }
  Tensor mu = add(mul(u_t, column(gain)), column(offset));
  Tensor sigma = broadcast_to(column(sd), u_t.shape());
  return {mu, sigma};
}

CouplingParams predictor_params(const Predictor& predictor, Binder& p, const Tensor& u_t,
                                const RowTimes& times, const Condition& y) {
  if (times.s.size() != times.t.size()) throw std::invalid_argument("predictor: missing target times");
  for (Eigen::Index i = 0; i < times.t.size(); ++i)
    if (!(times.s[i] < times.t[i])) throw std::invalid_argument("predictor: need s < t");
  return std::visit(
      [&](const auto& pr) -> CouplingParams {
        using T = std::decay_t<decltype(pr)>;
        if constexpr (std::is_same_v<T, LinearGaussianPredictor>)
          return pr.params(u_t, times);
        else
          return pr.params(p, u_t, times, y);
      },
      predictor);
}

// ---------------------------------------------------------------------------
// Likelihood assembly

FactorTerms factor_terms(const Transporter& transporter, const Predictor& predictor, Binder& p,
                         const Tensor& x_s, const Tensor& x_t, const RowTimes& times,
                         const Condition& y) {
  const std::size_t n = x_s.rows();
  const double d = static_cast<double>(x_s.cols());
  if (x_t.shape() != x_s.shape() || times.rows() != n)
    throw std::invalid_argument("factor_terms: mismatched inputs");
  RowTimes tr_times;
  tr_times.t.resize(static_cast<Eigen::Index>(2 * n));
  tr_times.t << times.s, times.t;
  tr_times.steps.resize(static_cast<Eigen::Index>(2 * n));
  tr_times.steps << times.steps, times.steps;
  auto tr = transporter.forward(p, concat_rows({x_s, x_t}), tr_times);
  Tensor u_s = slice_rows(tr.u, 0, n);
  Tensor u_t = slice_rows(tr.u, n, n);
  Tensor ld_s = slice_rows(tr.logdet, 0, n);

  FactorTerms f;
  f.params = predictor_params(predictor, p, u_t, times, y);
  auto af = affine_forward(u_s, f.params);
  f.half_sq_norm = scale(sum_last(square(af.z)), 0.5);
  f.predictor_logsig = neg(af.logdet);
  f.transporter_logsig = neg(ld_s);
  f.nll = add_scalar(add(add(f.half_sq_norm, f.predictor_logsig), f.transporter_logsig), d * kHalfLog2Pi);
  f.u_s = u_s;
  f.u_t = u_t;
  return f;
}

RowTimes stacked_pair_times(const Eigen::MatrixXd& times) {
  const auto B = times.rows(), T = times.cols() - 1;
  RowTimes rt;
  rt.t.resize(T * B);
  rt.s.resize(T * B);
  rt.steps = Eigen::VectorXd::Constant(T * B, static_cast<double>(T));
  for (Eigen::Index k = 0; k < T; ++k)
    for (Eigen::Index b = 0; b < B; ++b) {
      rt.s[k * B + b] = times(b, k);
      rt.t[k * B + b] = times(b, k + 1);
    }
  return rt;
}

TrajectoryNll trajectory_nll(const Transporter& transporter, const Predictor& predictor, Binder& p,
                             const std::vector<Tensor>& levels, const Eigen::MatrixXd& times,
                             const Condition& y) {
  if (levels.size() < 2 || static_cast<std::size_t>(times.cols()) != levels.size())
    throw std::invalid_argument("trajectory_nll: levels do not match the schedule");
  const std::size_t T = levels.size() - 1;
  const std::size_t B = levels[0].rows();
  const double d = static_cast<double>(levels[0].cols());
  for (const auto& l : levels)
    if (l.rows() != B || l.cols() != levels[0].cols() || static_cast<std::size_t>(times.rows()) != B)
      throw std::invalid_argument("trajectory_nll: inconsistent level shapes");

  std::vector<Tensor> lower(levels.begin(), levels.end() - 1), upper(levels.begin() + 1, levels.end());
  RowTimes rt = stacked_pair_times(times);
  std::vector<std::size_t> owner(T * B);
  for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = i % B;
  auto f = factor_terms(transporter, predictor, p, concat_rows(lower), concat_rows(upper), rt, y.select(owner));

  TrajectoryNll out;
  out.conditional = sum_rows(reshape(f.nll, {T, B}));
  out.prior = add_scalar(scale(sum_last(square(levels[T])), 0.5), d * kHalfLog2Pi);
  out.per_element = add(out.conditional, out.prior);
  out.total = sum(out.per_element);
  auto to_bt = [&](const Tensor& v) {
    RowMatrix m(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(T));
    for (std::size_t k = 0; k < T; ++k)
      for (std::size_t b = 0; b < B; ++b)
        m(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k)) = v[k * B + b];
    return m;
  };
  out.factor_nll = to_bt(f.nll);
  out.half_sq_norm = to_bt(f.half_sq_norm);
  out.predictor_logsig = to_bt(f.predictor_logsig);
  out.transporter_logsig = to_bt(f.transporter_logsig);
  out.factors = std::move(f);
  return out;
}

}  // namespace trajflow
