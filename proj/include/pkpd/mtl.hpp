#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pkpd/basis.hpp"
#include "pkpd/pd.hpp"

namespace pkpd {

enum class TransformKind { softplus_t, logistic_t, identity_t };

// Clamped strictly inside the open constraint sets so that extreme
// unconstrained coordinates (optimizer excursions, leapfrog proposals)
// still decode to valid parameters instead of saturating to 0 or 1 in
// double precision.  The derivative is already ~0 out there.
inline double transform_forward(TransformKind k, double v) {
  switch (k) {
    case TransformKind::softplus_t: return std::max(softplus(v), 1e-300);
    case TransformKind::logistic_t:
      return std::clamp(sigmoid(v), 1e-300, 1.0 - 1.1e-16);
    default: return v;
  }
}

inline double transform_deriv(TransformKind k, double v) {
  switch (k) {
    case TransformKind::softplus_t: return sigmoid(v);
    case TransformKind::logistic_t: {
      const double s = sigmoid(v);
      return s * (1.0 - s);
    }
    default: return 1.0;
  }
}

inline double transform_inverse(TransformKind k, double c) {
  switch (k) {
    case TransformKind::softplus_t: return inv_softplus(c);
    case TransformKind::logistic_t: return logit(c);
    default: return c;
  }
}

// Coordinate layout of the flat parameter vector. Per channel j the block is
//   [beta1, beta2, beta3, theta_1..theta_L (, alpha)]
// with softplus keeping beta1/theta positive and a logistic keeping beta2 in
// (0,1). alpha sits inside the block only when it is part of the shared
// subspace; otherwise it lives in a separate per-task vector.
struct TransformSpec {
  int d = 0, L = 0;
  bool alpha_in = false;
  std::vector<TransformKind> kinds;

  static TransformSpec standard(int d, int L, bool alpha_in) {
    if (d < 1 || L < 1) throw std::invalid_argument("TransformSpec: d, L must be >= 1");
    TransformSpec spec;
    spec.d = d;
    spec.L = L;
    spec.alpha_in = alpha_in;
    for (int j = 0; j < d; ++j) {
      spec.kinds.push_back(TransformKind::softplus_t);  // beta1
      spec.kinds.push_back(TransformKind::logistic_t);  // beta2
      spec.kinds.push_back(TransformKind::identity_t);  // beta3
      for (int r = 0; r < L; ++r) spec.kinds.push_back(TransformKind::softplus_t);
      if (alpha_in) spec.kinds.push_back(TransformKind::identity_t);
    }
    return spec;
  }

  int dim() const { return static_cast<int>(kinds.size()); }
  int block() const { return 3 + L + (alpha_in ? 1 : 0); }

  Eigen::VectorXd forward(const Eigen::VectorXd& v) const {
    if (v.size() != dim()) throw std::invalid_argument("TransformSpec: size mismatch");
    Eigen::VectorXd c(v.size());
    for (Eigen::Index m = 0; m < v.size(); ++m)
      c[m] = transform_forward(kinds[m], v[m]);
    return c;
  }

  Eigen::VectorXd deriv(const Eigen::VectorXd& v) const {
    if (v.size() != dim()) throw std::invalid_argument("TransformSpec: size mismatch");
    Eigen::VectorXd g(v.size());
    for (Eigen::Index m = 0; m < v.size(); ++m) g[m] = transform_deriv(kinds[m], v[m]);
    return g;
  }

  Eigen::VectorXd inverse(const Eigen::VectorXd& c) const {
    if (c.size() != dim()) throw std::invalid_argument("TransformSpec: size mismatch");
    Eigen::VectorXd v(c.size());
    for (Eigen::Index m = 0; m < c.size(); ++m)
      v[m] = transform_inverse(kinds[m], c[m]);
    return v;
  }

  // Constrained flat vector -> structured parameters. alpha_free supplies the
  // baselines when they are outside the subspace.
  PdParams unpack(const Eigen::VectorXd& c, const Eigen::VectorXd& alpha_free) const {
    if (c.size() != dim()) throw std::invalid_argument("unpack: size mismatch");
    if (!alpha_in && alpha_free.size() != d)
      throw std::invalid_argument("unpack: alpha vector required");
    PdParams p;
    p.beta1.resize(d);
    p.beta2.resize(d);
    p.beta3.resize(d);
    p.alpha.resize(d);
    p.theta.resize(d, L);
    const int blk = block();
    for (int j = 0; j < d; ++j) {
      const int base = j * blk;
      p.beta1[j] = c[base];
      p.beta2[j] = c[base + 1];
      p.beta3[j] = c[base + 2];
      for (int r = 0; r < L; ++r) p.theta(j, r) = c[base + 3 + r];
      p.alpha[j] = alpha_in ? c[base + 3 + L] : alpha_free[j];
    }
    return p;
  }

  Eigen::VectorXd pack(const PdParams& p) const {
    Eigen::VectorXd c(dim());
    const int blk = block();
    for (int j = 0; j < d; ++j) {
      const int base = j * blk;
      c[base] = p.beta1[j];
      c[base + 1] = p.beta2[j];
      c[base + 2] = p.beta3[j];
      for (int r = 0; r < L; ++r) c[base + 3 + r] = p.theta(j, r);
      if (alpha_in) c[base + 3 + L] = p.alpha[j];
    }
    return c;
  }

  // Gradient w.r.t. the constrained flat vector; alpha derivatives go into
  // alpha_grad when the baselines are outside the subspace.
  Eigen::VectorXd pack_grad(const PdGrad& g, Eigen::VectorXd* alpha_grad = nullptr) const {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(dim());
    const int blk = block();
    if (!alpha_in && alpha_grad) *alpha_grad = g.alpha;
    for (int j = 0; j < d; ++j) {
      const int base = j * blk;
      c[base] = g.beta1[j];
      c[base + 1] = g.beta2[j];
      c[base + 2] = g.beta3[j];
      for (int r = 0; r < L; ++r) c[base + 3 + r] = g.theta(j, r);
      if (alpha_in) c[base + 3 + L] = g.alpha[j];
    }
    return c;
  }
};

enum class AlphaMode { free_per_task, in_subspace };

// Affine rescaling of raw task descriptors to roughly unit codes.
struct CovariateStandardization {
  std::vector<std::string> names;
  Eigen::VectorXd center, scale;

  bool empty() const { return center.size() == 0; }

  Eigen::VectorXd apply(const Eigen::VectorXd& raw) const {
    if (raw.size() != center.size())
      throw std::invalid_argument("CovariateStandardization: size mismatch");
    return (raw - center).cwiseQuotient(scale);
  }
};

inline CovariateStandardization standardize_covariates(const std::vector<Task>& tasks) {
  CovariateStandardization out;
  if (tasks.empty() || tasks.front().covariates.size() == 0) return out;
  const Eigen::Index q = tasks.front().covariates.size();
  out.names = tasks.front().covariate_names;
  out.center = Eigen::VectorXd::Zero(q);
  out.scale = Eigen::VectorXd::Ones(q);
  Eigen::VectorXd sumsq = Eigen::VectorXd::Zero(q);
  for (const Task& t : tasks) {
    if (t.covariates.size() != q)
      throw std::invalid_argument("standardize_covariates: ragged descriptors");
    out.center += t.covariates;
  }
  out.center /= static_cast<double>(tasks.size());
  for (const Task& t : tasks)
    sumsq += (t.covariates - out.center).array().square().matrix();
  for (Eigen::Index m = 0; m < q; ++m) {
    const double sd = std::sqrt(sumsq[m] / tasks.size());
    out.scale[m] = sd > 1e-12 ? sd : 1.0;
  }
  return out;
}

inline Eigen::VectorXd task_descriptor_codes(const CovariateStandardization& std_,
                                             const Task& task) {
  return std_.apply(task.covariates);
}

// Shared low-rank model: latent z in R^k maps through Psi to the flat
// unconstrained parameter vector, then through the coordinate transforms.
struct MtlModel {
  int k = 0, d = 0, L = 0;
  AlphaMode alpha_mode = AlphaMode::free_per_task;
  Eigen::MatrixXd Psi;      // p x k
  BasisConfig basis;
  Eigen::VectorXd tau;      // observation precisions, size 1 or d
  double alpha_prior_sd = 100.0;
  CovariateStandardization cov_std;

  TransformSpec spec() const {
    return TransformSpec::standard(d, L, alpha_mode == AlphaMode::in_subspace);
  }

  int p() const { return d * (3 + L + (alpha_mode == AlphaMode::in_subspace ? 1 : 0)); }

  void validate() const {
    if (k < 1 || d < 1 || L < 1) throw std::invalid_argument("MtlModel: bad dimensions");
    if (Psi.rows() != p() || Psi.cols() != k)
      throw std::invalid_argument("MtlModel: Psi shape mismatch");
    basis.validate();
    if (basis.L != L) throw std::invalid_argument("MtlModel: basis size mismatch");
    detail::check_tau(tau, d);
    if (!(alpha_prior_sd > 0))
      throw std::invalid_argument("MtlModel: alpha_prior_sd must be > 0");
  }
};

// Structured parameters for one task. alpha is required when baselines are
// per-task, forbidden when they live inside the subspace.
inline PdParams decode(const MtlModel& model, const Eigen::VectorXd& z,
                       const Eigen::VectorXd& alpha = {}) {
  if (z.size() != model.k) throw std::invalid_argument("decode: z size mismatch");
  const bool ain = model.alpha_mode == AlphaMode::in_subspace;
  if (ain && alpha.size() != 0)
    throw std::invalid_argument("decode: alpha is part of the subspace");
  if (!ain && alpha.size() != model.d)
    throw std::invalid_argument("decode: alpha size mismatch");
  const TransformSpec spec = model.spec();
  return spec.unpack(spec.forward(model.Psi * z), alpha);
}

struct JointGrad {
  Eigen::MatrixXd dPsi;    // p x k
  Eigen::MatrixXd dZ;      // k x N
  Eigen::MatrixXd dAlpha;  // d x N, zero-size when alpha is in the subspace
  Eigen::VectorXd dtau;    // matches model.tau
};

namespace detail {

constexpr double kLog2Pi = 1.8378770664093454836;

inline double gaussian_logpdf_iso(const Eigen::VectorXd& x, double sd) {
  const double n = static_cast<double>(x.size());
  return -0.5 * x.squaredNorm() / (sd * sd) - n * (0.5 * kLog2Pi + std::log(sd));
}

}  // namespace detail

// Joint posterior density of (Psi, Z, Alpha) given all tasks, up to the flat
// prior on Psi: sum of task likelihoods, standard-normal prior on each z, and
// a wide normal prior on free baselines.
inline double joint_log_density(const MtlModel& model, const std::vector<Task>& tasks,
                                const Eigen::MatrixXd& Z, const Eigen::MatrixXd& Alpha,
                                const SimulateOptions& opts = {}) {
  model.validate();
  const bool ain = model.alpha_mode == AlphaMode::in_subspace;
  const Eigen::Index N = static_cast<Eigen::Index>(tasks.size());
  if (Z.rows() != model.k || Z.cols() != N)
    throw std::invalid_argument("joint_log_density: Z shape mismatch");
  if (!ain && (Alpha.rows() != model.d || Alpha.cols() != N))
    throw std::invalid_argument("joint_log_density: Alpha shape mismatch");
  double total = 0.0;
  for (Eigen::Index i = 0; i < N; ++i) {
    const Eigen::VectorXd alpha_i = ain ? Eigen::VectorXd() : Alpha.col(i).eval();
    const PdParams params = decode(model, Z.col(i), alpha_i);
    total += log_likelihood(params, model.basis, tasks[i], model.tau, opts);
    total += detail::gaussian_logpdf_iso(Z.col(i), 1.0);
    if (!ain) total += detail::gaussian_logpdf_iso(Alpha.col(i), model.alpha_prior_sd);
  }
  return total;
}

inline double grad_joint(const MtlModel& model, const std::vector<Task>& tasks,
                         const Eigen::MatrixXd& Z, const Eigen::MatrixXd& Alpha,
                         JointGrad& grad, const SimulateOptions& opts = {}) {
  model.validate();
  const bool ain = model.alpha_mode == AlphaMode::in_subspace;
  const Eigen::Index N = static_cast<Eigen::Index>(tasks.size());
  if (Z.rows() != model.k || Z.cols() != N)
    throw std::invalid_argument("grad_joint: Z shape mismatch");
  if (!ain && (Alpha.rows() != model.d || Alpha.cols() != N))
    throw std::invalid_argument("grad_joint: Alpha shape mismatch");

  const TransformSpec spec = model.spec();
  grad.dPsi = Eigen::MatrixXd::Zero(model.p(), model.k);
  grad.dZ = Eigen::MatrixXd::Zero(model.k, N);
  grad.dAlpha = ain ? Eigen::MatrixXd() : Eigen::MatrixXd::Zero(model.d, N);
  grad.dtau = Eigen::VectorXd::Zero(model.tau.size());

  double total = 0.0;
  PdGrad pg;
  for (Eigen::Index i = 0; i < N; ++i) {
    const Eigen::VectorXd alpha_i = ain ? Eigen::VectorXd() : Alpha.col(i).eval();
    const Eigen::VectorXd v = model.Psi * Z.col(i);
    const PdParams params = spec.unpack(spec.forward(v), alpha_i);
    total += grad_log_likelihood(params, model.basis, tasks[i], model.tau, pg, opts);
    total += detail::gaussian_logpdf_iso(Z.col(i), 1.0);

    Eigen::VectorXd alpha_grad;
    Eigen::VectorXd dc = spec.pack_grad(pg, &alpha_grad);
    const Eigen::VectorXd dv = dc.cwiseProduct(spec.deriv(v));
    grad.dPsi.noalias() += dv * Z.col(i).transpose();
    grad.dZ.col(i) = model.Psi.transpose() * dv - Z.col(i);
    if (!ain) {
      total += detail::gaussian_logpdf_iso(Alpha.col(i), model.alpha_prior_sd);
      grad.dAlpha.col(i) =
          alpha_grad - Alpha.col(i) / (model.alpha_prior_sd * model.alpha_prior_sd);
    }
    if (model.tau.size() == 1)
      grad.dtau[0] += pg.tau.sum();
    else
      grad.dtau += pg.tau;
  }
  return total;
}

}  // namespace pkpd
