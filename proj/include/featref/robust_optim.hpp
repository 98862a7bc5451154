#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "featref/errors.hpp"
#include "featref/parallel.hpp"

namespace featref {

// ---------------------------------------------------------------------------
// Robust loss on the squared residual norm s.

enum class LossKind { Trivial, Cauchy };

struct RobustLoss {
  LossKind kind = LossKind::Trivial;
  double scale = 1.0;

  static RobustLoss trivial() { return RobustLoss{LossKind::Trivial, 1.0}; }
  static RobustLoss cauchy(double scale) {
    if (!(scale > 0.0)) fail(ErrorCode::InvalidArgument, "Cauchy scale must be positive");
    return RobustLoss{LossKind::Cauchy, scale};
  }
};

inline constexpr double kDefaultCauchyScale = 0.25;

struct LossValue {
  double rho = 0.0;
  double d_rho = 1.0;   // rho'(s)
  double dd_rho = 0.0;  // rho''(s)
};

inline LossValue loss_evaluate(const RobustLoss& loss, double s) {
  if (loss.kind == LossKind::Trivial) return LossValue{s, 1.0, 0.0};
  const double c2 = loss.scale * loss.scale;
  const double inv = 1.0 / (1.0 + s / c2);
  return LossValue{c2 * std::log1p(s / c2), inv, -inv * inv / c2};
}

// ---------------------------------------------------------------------------
// Robust mean by iteratively reweighted least squares:
//   argmin_mu sum_f rho(|f - mu|^2)

struct RobustMeanResult {
  Eigen::VectorXd mean;
  int iterations = 0;
  std::vector<double> objective_trace;  // objective at the initial and each updated estimate
};

inline double robust_mean_objective(const std::vector<Eigen::VectorXd>& features,
                                    const Eigen::VectorXd& mu, const RobustLoss& loss) {
  double total = 0.0;
  for (const auto& f : features) total += loss_evaluate(loss, (f - mu).squaredNorm()).rho;
  return total;
}

// Sums are accumulated relative to the first feature so identical inputs are
// reproduced exactly. Iteration also stops if rounding makes the objective rise.
inline RobustMeanResult robust_mean(const std::vector<Eigen::VectorXd>& features, const RobustLoss& loss,
                                    int max_iterations = 20, double tolerance = 1e-6) {
  if (features.empty()) fail(ErrorCode::EmptyInput, "robust mean of an empty set");
  const Eigen::VectorXd& base = features.front();
  RobustMeanResult out;
  Eigen::VectorXd offset = Eigen::VectorXd::Zero(base.size());
  for (const auto& f : features) offset += f - base;
  out.mean = base + offset / static_cast<double>(features.size());
  out.objective_trace.push_back(robust_mean_objective(features, out.mean, loss));
  for (int it = 0; it < max_iterations; ++it) {
    Eigen::VectorXd num = Eigen::VectorXd::Zero(base.size());
    double den = 0.0;
    for (const auto& f : features) {
      const double w = loss_evaluate(loss, (f - out.mean).squaredNorm()).d_rho;
      num += w * (f - base);
      den += w;
    }
    const Eigen::VectorXd next = base + num / den;
    const double objective = robust_mean_objective(features, next, loss);
    out.iterations = it + 1;
    if (objective > out.objective_trace.back()) break;
    const double change = (next - out.mean).norm();
    out.mean = next;
    out.objective_trace.push_back(objective);
    if (change < tolerance) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Block-structured normal equations and their Schur-complement solve.

struct BlockSystem {
  std::vector<int> camera_dims;
  std::vector<int> point_dims;
  Eigen::MatrixXd camera_hessian;  // sum(camera_dims) squared
  Eigen::VectorXd camera_rhs;
  std::vector<Eigen::MatrixXd> point_hessians;
  std::vector<Eigen::VectorXd> point_rhs;
  // Per point: (camera index, H_cp block of size camera_dim x point_dim).
  std::vector<std::vector<std::pair<int, Eigen::MatrixXd>>> coupling;

  std::vector<int> camera_offsets() const {
    std::vector<int> off(camera_dims.size() + 1, 0);
    for (std::size_t i = 0; i < camera_dims.size(); ++i) off[i + 1] = off[i] + camera_dims[i];
    return off;
  }
};

struct BlockUpdate {
  Eigen::VectorXd camera;
  std::vector<Eigen::VectorXd> points;
  std::vector<int> regularized_points;
};

namespace detail {

// Inverse of a small SPD block; adds a diagonal regularizer when the block is
// rank deficient.
inline Eigen::MatrixXd invert_point_block(const Eigen::MatrixXd& H, double regularization, bool& regularized) {
  regularized = false;
  Eigen::LLT<Eigen::MatrixXd> llt(H);
  if (llt.info() == Eigen::Success && std::isfinite(llt.matrixLLT().diagonal().prod()) &&
      llt.matrixLLT().diagonal().minCoeff() > 1e-150) {
    return llt.solve(Eigen::MatrixXd::Identity(H.rows(), H.cols()));
  }
  const double scale = std::max(1.0, H.diagonal().cwiseAbs().maxCoeff());
  const double reg = std::max(regularization, 1e-12) * scale;
  Eigen::MatrixXd damped = H;
  damped.diagonal().array() += reg;
  Eigen::LLT<Eigen::MatrixXd> retry(damped);
  if (retry.info() != Eigen::Success)
    fail(ErrorCode::SingularPointBlock, "point block is singular after regularization");
  regularized = true;
  return retry.solve(Eigen::MatrixXd::Identity(H.rows(), H.cols()));
}

}  // namespace detail

// Solves [Hcc Hcp; Hpc Hpp] [dc; dp] = [gc; gp] by eliminating the points.
inline BlockUpdate schur_solve(const BlockSystem& sys, double point_regularization = 0.0) {
  const std::vector<int> off = sys.camera_offsets();
  const int nc = off.back();
  const std::size_t np = sys.point_dims.size();
  Eigen::MatrixXd S = sys.camera_hessian;
  Eigen::VectorXd rhs = sys.camera_rhs;
  std::vector<Eigen::MatrixXd> inv(np);
  BlockUpdate out;
  for (std::size_t p = 0; p < np; ++p) {
    bool regularized = false;
    inv[p] = detail::invert_point_block(sys.point_hessians[p], point_regularization, regularized);
    if (regularized) out.regularized_points.push_back(static_cast<int>(p));
    const auto& couplings = sys.coupling[p];
    std::vector<Eigen::MatrixXd> W(couplings.size());  // H_cp * Hpp^-1
    for (std::size_t a = 0; a < couplings.size(); ++a) W[a] = couplings[a].second * inv[p];
    for (std::size_t a = 0; a < couplings.size(); ++a) {
      const int ca = couplings[a].first;
      rhs.segment(off[ca], sys.camera_dims[ca]) -= W[a] * sys.point_rhs[p];
      for (std::size_t b = 0; b < couplings.size(); ++b) {
        const int cb = couplings[b].first;
        S.block(off[ca], off[cb], sys.camera_dims[ca], sys.camera_dims[cb]) -=
            W[a] * couplings[b].second.transpose();
      }
    }
  }
  out.camera = Eigen::VectorXd::Zero(nc);
  if (nc > 0) {
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) fail(ErrorCode::NumericalFailure, "reduced camera system is not SPD");
    out.camera = llt.solve(rhs);
    if (!out.camera.allFinite()) fail(ErrorCode::NumericalFailure, "reduced camera solve is not finite");
  }
  out.points.resize(np);
  for (std::size_t p = 0; p < np; ++p) {
    Eigen::VectorXd r = sys.point_rhs[p];
    for (const auto& [c, Hcp] : sys.coupling[p]) r -= Hcp.transpose() * out.camera.segment(off[c], sys.camera_dims[c]);
    out.points[p] = inv[p] * r;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinear least-squares problem description.

enum class BlockRole { Generic, Camera, Point };
enum class EvalStatus { Ok, Invalid };

// Jacobians are row-major residual_dim x tangent_dim; entries may be null when
// not requested. An empty span means no Jacobians are wanted.
using ResidualFunction = std::function<EvalStatus(std::span<const double* const> params, double* residuals,
                                                  std::span<double* const> jacobians)>;
using PlusFunction = std::function<void(const double* x, const double* delta, double* out)>;

// RejectStep: a candidate with any invalid residual is rejected.
// Deactivate: residuals that become invalid on an accepted step are dropped for
// the rest of the run; residuals invalid at the start are dropped immediately.
enum class InvalidPolicy { RejectStep, Deactivate };

struct ParameterBlock {
  std::vector<double> values;
  int tangent_dim = 0;
  BlockRole role = BlockRole::Generic;
  bool constant = false;
  std::vector<int> fixed_coordinates;  // tangent coordinates held fixed
  PlusFunction plus;                   // empty means x + delta
};

struct ResidualBlock {
  std::vector<int> blocks;
  int dim = 0;
  RobustLoss loss;
  double weight = 1.0;  // multiplies the loss value
  ResidualFunction fn;
};

class LMProblem {
 public:
  int add_parameter_block(std::vector<double> values, BlockRole role = BlockRole::Generic,
                          int tangent_dim = -1, PlusFunction plus = {}) {
    ParameterBlock b;
    b.tangent_dim = tangent_dim < 0 ? static_cast<int>(values.size()) : tangent_dim;
    b.values = std::move(values);
    b.role = role;
    b.plus = std::move(plus);
    if (b.tangent_dim <= 0) fail(ErrorCode::InvalidArgument, "parameter block needs a positive dimension");
    if (!b.plus && b.tangent_dim != static_cast<int>(b.values.size()))
      fail(ErrorCode::InvalidArgument, "tangent dimension differs from size without a plus operation");
    blocks_.push_back(std::move(b));
    return static_cast<int>(blocks_.size()) - 1;
  }

  void set_constant(int block, bool constant = true) { blocks_.at(static_cast<std::size_t>(block)).constant = constant; }
  void set_fixed_coordinates(int block, std::vector<int> coords) {
    for (int c : coords)
      if (c < 0 || c >= blocks_.at(static_cast<std::size_t>(block)).tangent_dim)
        fail(ErrorCode::InvalidArgument, "fixed coordinate out of range");
    blocks_.at(static_cast<std::size_t>(block)).fixed_coordinates = std::move(coords);
  }

  int add_residual_block(std::vector<int> blocks, int dim, const RobustLoss& loss, ResidualFunction fn,
                         double weight = 1.0) {
    for (int b : blocks)
      if (b < 0 || b >= static_cast<int>(blocks_.size()))
        fail(ErrorCode::InvalidArgument, "residual references an unknown parameter block");
    if (dim <= 0) fail(ErrorCode::InvalidArgument, "residual dimension must be positive");
    if (!(weight >= 0.0)) fail(ErrorCode::InvalidArgument, "residual weight must be non-negative");
    residuals_.push_back(ResidualBlock{std::move(blocks), dim, loss, weight, std::move(fn)});
    return static_cast<int>(residuals_.size()) - 1;
  }

  void set_invalid_policy(InvalidPolicy policy) { policy_ = policy; }
  InvalidPolicy invalid_policy() const { return policy_; }

  std::size_t num_parameter_blocks() const { return blocks_.size(); }
  std::size_t num_residual_blocks() const { return residuals_.size(); }
  const ParameterBlock& parameter_block(int b) const { return blocks_.at(static_cast<std::size_t>(b)); }
  ParameterBlock& parameter_block(int b) { return blocks_.at(static_cast<std::size_t>(b)); }
  const ResidualBlock& residual_block(int r) const { return residuals_.at(static_cast<std::size_t>(r)); }
  const std::vector<double>& values(int b) const { return parameter_block(b).values; }
  void set_values(int b, std::vector<double> v) { parameter_block(b).values = std::move(v); }

  bool has_free_blocks() const {
    return std::any_of(blocks_.begin(), blocks_.end(), [](const ParameterBlock& b) { return !b.constant; });
  }

  // A Schur partition exists when every residual touches at most one free point block.
  bool schur_applicable() const {
    bool any_point = false;
    for (const auto& b : blocks_) any_point |= (b.role == BlockRole::Point && !b.constant);
    if (!any_point) return false;
    for (const auto& r : residuals_) {
      int points = 0;
      for (int b : r.blocks) points += (blocks_[static_cast<std::size_t>(b)].role == BlockRole::Point &&
                                        !blocks_[static_cast<std::size_t>(b)].constant);
      if (points > 1) return false;
    }
    return true;
  }

  // Half the weighted robust cost over residuals that evaluate successfully.
  double total_cost() const;

 private:
  std::vector<ParameterBlock> blocks_;
  std::vector<ResidualBlock> residuals_;
  InvalidPolicy policy_ = InvalidPolicy::RejectStep;
};

struct LMOptions {
  int max_iterations = 100;
  double parameter_tolerance = 1e-4;
  double initial_damping = 1e-4;
  double damping_increase = 10.0;
  double damping_decrease = 10.0;
  int embedded_point_iterations = 10;
  bool use_schur = true;
  int num_threads = 1;
};

enum class Termination { Converged, MaxIterations, Stalled, NoFreeParameters };

constexpr std::string_view to_string(Termination t) {
  switch (t) {
    case Termination::Converged: return "converged";
    case Termination::MaxIterations: return "max_iterations";
    case Termination::Stalled: return "stalled";
    case Termination::NoFreeParameters: return "no_free_parameters";
  }
  return "unknown";
}

struct Deactivation {
  std::size_t residual = 0;
  int iteration = 0;
};

struct LMSummary {
  Termination termination = Termination::MaxIterations;
  int iterations = 0;
  int accepted_steps = 0;
  bool used_schur = false;
  std::vector<double> cost_trace;            // initial cost, then every accepted step
  std::vector<std::size_t> active_residuals;  // matches cost_trace
  std::vector<Deactivation> deactivated;

  double initial_cost() const { return cost_trace.empty() ? 0.0 : cost_trace.front(); }
  double final_cost() const { return cost_trace.empty() ? 0.0 : cost_trace.back(); }
};

namespace detail {

inline constexpr double kMinDiagonal = 1e-6;
inline constexpr double kMaxDiagonal = 1e32;
inline constexpr double kFailureDamping = 1e8;
inline constexpr double kStallDamping = 1e16;

struct ResidualEval {
  EvalStatus status = EvalStatus::Invalid;
  std::vector<double> r;
  std::vector<std::vector<double>> jac;  // per referenced block, empty if constant
  double cost = 0.0;                     // 0.5 * weight * rho(|r|^2)
};

inline bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Views the parameter state through per-block value pointers so candidate
// states can be evaluated without copying unchanged blocks.
inline ResidualEval evaluate_residual(const LMProblem& problem, int r, const std::vector<const double*>& state,
                                      bool jacobians) {
  const ResidualBlock& rb = problem.residual_block(r);
  ResidualEval ev;
  ev.r.assign(static_cast<std::size_t>(rb.dim), 0.0);
  std::vector<const double*> params;
  params.reserve(rb.blocks.size());
  for (int b : rb.blocks) params.push_back(state[static_cast<std::size_t>(b)]);
  std::vector<double*> jptr;
  if (jacobians) {
    ev.jac.resize(rb.blocks.size());
    for (std::size_t k = 0; k < rb.blocks.size(); ++k) {
      const ParameterBlock& pb = problem.parameter_block(rb.blocks[k]);
      if (pb.constant) {
        jptr.push_back(nullptr);
        continue;
      }
      ev.jac[k].assign(static_cast<std::size_t>(rb.dim * pb.tangent_dim), 0.0);
      jptr.push_back(ev.jac[k].data());
    }
  }
  ev.status = rb.fn(params, ev.r.data(), jptr);
  if (ev.status == EvalStatus::Ok && !all_finite(ev.r)) ev.status = EvalStatus::Invalid;
  if (ev.status == EvalStatus::Ok) {
    double s = 0.0;
    for (double x : ev.r) s += x * x;
    ev.cost = 0.5 * rb.weight * loss_evaluate(rb.loss, s).rho;
    for (const auto& j : ev.jac)
      if (!all_finite(j)) ev.status = EvalStatus::Invalid;
  }
  return ev;
}

// Robust (Triggs) correction followed by weighting; returns scaled residual
// and Jacobians so that the Gauss-Newton model matches the robust cost.
inline void corrected(const ResidualBlock& rb, ResidualEval& ev) {
  const int dim = rb.dim;
  double s = 0.0;
  for (double x : ev.r) s += x * x;
  const LossValue lv = loss_evaluate(rb.loss, s);
  const double sqrt_rho1 = std::sqrt(std::max(lv.d_rho, 0.0));
  double residual_scaling = sqrt_rho1;
  double alpha_sq_norm = 0.0;
  if (s > 0.0 && lv.dd_rho > 0.0 && lv.d_rho > 0.0) {
    const double D = 1.0 + 2.0 * s * lv.dd_rho / lv.d_rho;
    const double alpha = 1.0 - std::sqrt(D);
    residual_scaling = sqrt_rho1 / (1.0 - alpha);
    alpha_sq_norm = alpha / s;
  }
  const double sw = std::sqrt(rb.weight);
  for (auto& j : ev.jac) {
    if (j.empty()) continue;
    const int cols = static_cast<int>(j.size()) / dim;
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> J(j.data(), dim, cols);
    Eigen::Map<const Eigen::VectorXd> r(ev.r.data(), dim);
    if (alpha_sq_norm != 0.0) J -= alpha_sq_norm * r * (r.transpose() * J);
    J *= sqrt_rho1 * sw;
  }
  for (double& x : ev.r) x *= residual_scaling * sw;
}

class Solver {
 public:
  Solver(LMProblem& problem, const LMOptions& opts) : problem_(problem), opts_(opts) {
    const std::size_t nb = problem_.num_parameter_blocks();
    active_.assign(problem_.num_residual_blocks(), true);
    residuals_of_block_.assign(nb, {});
    for (std::size_t r = 0; r < problem_.num_residual_blocks(); ++r)
      for (int b : problem_.residual_block(static_cast<int>(r)).blocks)
        residuals_of_block_[static_cast<std::size_t>(b)].push_back(r);
    use_schur_ = opts_.use_schur && problem_.schur_applicable();
    camera_index_.assign(nb, -1);
    point_index_.assign(nb, -1);
    dense_offset_.assign(nb, -1);
    int dense = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      const ParameterBlock& pb = problem_.parameter_block(static_cast<int>(b));
      if (pb.constant) continue;
      dense_offset_[b] = dense;
      dense += pb.tangent_dim;
      if (use_schur_ && pb.role == BlockRole::Point) {
        point_index_[b] = static_cast<int>(point_blocks_.size());
        point_blocks_.push_back(static_cast<int>(b));
      } else {
        camera_index_[b] = static_cast<int>(camera_blocks_.size());
        camera_blocks_.push_back(static_cast<int>(b));
      }
    }
    dense_dim_ = dense;
  }

  LMSummary run() {
    LMSummary summary;
    summary.used_schur = use_schur_;
    std::vector<const double*> state = current_state();
    std::vector<ResidualEval> evals = evaluate_all(state, true);
    for (std::size_t r = 0; r < evals.size(); ++r) {
      if (evals[r].status == EvalStatus::Ok) continue;
      if (problem_.invalid_policy() == InvalidPolicy::RejectStep)
        fail(ErrorCode::InvalidArgument, "residual " + std::to_string(r) + " is invalid at the initial parameters");
      active_[r] = false;
      summary.deactivated.push_back(Deactivation{r, 0});
    }
    double cost = active_cost(evals);
    summary.cost_trace.push_back(cost);
    summary.active_residuals.push_back(num_active());
    if (!problem_.has_free_blocks()) {
      summary.termination = Termination::NoFreeParameters;
      return summary;
    }
    const bool embed = use_schur_ && !camera_blocks_.empty() && !point_blocks_.empty() &&
                       opts_.embedded_point_iterations > 0;
    double lambda = opts_.initial_damping;
    summary.termination = Termination::MaxIterations;
    for (int iter = 1; iter <= opts_.max_iterations; ++iter) {
      summary.iterations = iter;
      std::vector<Eigen::VectorXd> step = compute_step(evals, lambda);
      double max_change = 0.0;
      for (const auto& s : step)
        if (s.size() > 0) max_change = std::max(max_change, s.cwiseAbs().maxCoeff());
      const bool converged = max_change < opts_.parameter_tolerance;
      std::vector<std::vector<double>> candidate = apply_step(step);
      std::vector<const double*> cand_state = state_from(candidate);
      std::vector<ResidualEval> cand = evaluate_all(cand_state, true);

      bool reject = false;
      std::vector<std::size_t> newly_invalid;
      for (std::size_t r = 0; r < cand.size(); ++r) {
        if (!active_[r] || cand[r].status == EvalStatus::Ok) continue;
        if (problem_.invalid_policy() == InvalidPolicy::RejectStep) reject = true;
        newly_invalid.push_back(r);
      }
      double cand_cost = 0.0, ref_cost = 0.0;
      for (std::size_t r = 0; r < cand.size(); ++r) {
        if (!active_[r] || cand[r].status != EvalStatus::Ok) continue;
        cand_cost += cand[r].cost;
        ref_cost += evals[r].cost;
      }
      if (!reject && std::isfinite(cand_cost) && cand_cost < ref_cost) {
        for (std::size_t r : newly_invalid) {
          active_[r] = false;
          summary.deactivated.push_back(Deactivation{r, iter});
        }
        commit(candidate);
        state = current_state();
        evals = std::move(cand);
        cost = cand_cost;
        lambda = std::max(lambda / opts_.damping_decrease, 1e-16);
        if (embed) {
          embedded_point_iterations(evals);
          state = current_state();
          evals = evaluate_all(state, true);
          for (std::size_t r = 0; r < evals.size(); ++r)
            if (active_[r] && evals[r].status != EvalStatus::Ok) {
              active_[r] = false;
              summary.deactivated.push_back(Deactivation{r, iter});
            }
          cost = std::min(cost, active_cost(evals));
        }
        ++summary.accepted_steps;
        summary.cost_trace.push_back(cost);
        summary.active_residuals.push_back(num_active());
        if (converged) {
          summary.termination = Termination::Converged;
          break;
        }
      } else if (converged) {
        // The final tiny step is applied only when it lowers the cost.
        summary.termination = Termination::Converged;
        break;
      } else {
        lambda *= opts_.damping_increase;
        if (lambda > kStallDamping) {
          summary.termination = Termination::Stalled;
          break;
        }
      }
    }
    return summary;
  }

  // Re-minimizes every point block with the cameras held fixed. Each inner
  // step is accepted only if it lowers that point's cost.
  void embedded_point_iterations(std::vector<ResidualEval>& evals) {
    const std::vector<const double*> state = current_state();
    std::vector<std::vector<double>> refreshed(point_blocks_.size());
    parallel_for(point_blocks_.size(), opts_.num_threads, [&](std::size_t p) {
      refreshed[p] = refine_point(point_blocks_[p], state, evals);
    });
    for (std::size_t p = 0; p < point_blocks_.size(); ++p)
      problem_.parameter_block(point_blocks_[p]).values = std::move(refreshed[p]);
  }

 private:
  std::vector<const double*> current_state() const {
    std::vector<const double*> s(problem_.num_parameter_blocks());
    for (std::size_t b = 0; b < s.size(); ++b) s[b] = problem_.parameter_block(static_cast<int>(b)).values.data();
    return s;
  }

  std::vector<const double*> state_from(const std::vector<std::vector<double>>& values) const {
    std::vector<const double*> s = current_state();
    for (std::size_t b = 0; b < s.size(); ++b)
      if (!values[b].empty()) s[b] = values[b].data();
    return s;
  }

  std::vector<ResidualEval> evaluate_all(const std::vector<const double*>& state, bool jacobians) const {
    std::vector<ResidualEval> out(problem_.num_residual_blocks());
    parallel_for(out.size(), opts_.num_threads, [&](std::size_t r) {
      if (!active_[r]) return;
      out[r] = evaluate_residual(problem_, static_cast<int>(r), state, jacobians);
    });
    return out;
  }

  double active_cost(const std::vector<ResidualEval>& evals) const {
    double c = 0.0;
    for (std::size_t r = 0; r < evals.size(); ++r)
      if (active_[r] && evals[r].status == EvalStatus::Ok) c += evals[r].cost;
    return c;
  }

  std::size_t num_active() const { return static_cast<std::size_t>(std::count(active_.begin(), active_.end(), true)); }

  bool is_fixed_coordinate(int block, int coord) const {
    const auto& f = problem_.parameter_block(block).fixed_coordinates;
    return std::find(f.begin(), f.end(), coord) != f.end();
  }

  // Corrected Jacobian for (residual, k-th block) as a dim x tangent matrix.
  Eigen::MatrixXd jacobian(const ResidualEval& ev, int r, std::size_t k) const {
    const ResidualBlock& rb = problem_.residual_block(r);
    const int b = rb.blocks[k];
    const int cols = problem_.parameter_block(b).tangent_dim;
    Eigen::MatrixXd J = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        ev.jac[k].data(), rb.dim, cols);
    for (int c = 0; c < cols; ++c)
      if (is_fixed_coordinate(b, c)) J.col(c).setZero();
    return J;
  }

  static void damp(Eigen::Ref<Eigen::MatrixXd> H, double lambda) {
    for (Eigen::Index i = 0; i < H.rows(); ++i)
      H(i, i) += lambda * std::clamp(H(i, i), kMinDiagonal, kMaxDiagonal);
  }

  std::vector<Eigen::VectorXd> compute_step(const std::vector<ResidualEval>& evals, double& lambda) const {
    std::vector<ResidualEval> scaled(evals.size());
    for (std::size_t r = 0; r < evals.size(); ++r) {
      if (!active_[r] || evals[r].status != EvalStatus::Ok) continue;
      scaled[r] = evals[r];
      corrected(problem_.residual_block(static_cast<int>(r)), scaled[r]);
    }
    for (;;) {
      try {
        return use_schur_ ? schur_step(scaled, lambda) : dense_step(scaled, lambda);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NumericalFailure && e.code() != ErrorCode::SingularPointBlock) throw;
        if (lambda >= kFailureDamping)
          fail(ErrorCode::NumericalFailure, "damped normal equations are singular");
        lambda *= opts_.damping_increase;
      }
    }
  }

  std::vector<Eigen::VectorXd> dense_step(const std::vector<ResidualEval>& scaled, double lambda) const {
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(dense_dim_, dense_dim_);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(dense_dim_);
    for (std::size_t r = 0; r < scaled.size(); ++r) {
      if (!active_[r] || scaled[r].status != EvalStatus::Ok) continue;
      const ResidualBlock& rb = problem_.residual_block(static_cast<int>(r));
      Eigen::Map<const Eigen::VectorXd> res(scaled[r].r.data(), rb.dim);
      std::vector<Eigen::MatrixXd> J(rb.blocks.size());
      for (std::size_t k = 0; k < rb.blocks.size(); ++k)
        if (!scaled[r].jac[k].empty()) J[k] = jacobian(scaled[r], static_cast<int>(r), k);
      for (std::size_t a = 0; a < rb.blocks.size(); ++a) {
        if (J[a].size() == 0) continue;
        const int oa = dense_offset_[static_cast<std::size_t>(rb.blocks[a])];
        g.segment(oa, J[a].cols()) -= J[a].transpose() * res;
        for (std::size_t b = 0; b < rb.blocks.size(); ++b) {
          if (J[b].size() == 0) continue;
          const int ob = dense_offset_[static_cast<std::size_t>(rb.blocks[b])];
          H.block(oa, ob, J[a].cols(), J[b].cols()) += J[a].transpose() * J[b];
        }
      }
    }
    damp(H, lambda);
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() != Eigen::Success) fail(ErrorCode::NumericalFailure, "normal equations not SPD");
    const Eigen::VectorXd delta = llt.solve(g);
    if (!delta.allFinite()) fail(ErrorCode::NumericalFailure, "non-finite step");
    std::vector<Eigen::VectorXd> step(problem_.num_parameter_blocks());
    for (std::size_t b = 0; b < step.size(); ++b)
      if (dense_offset_[b] >= 0)
        step[b] = delta.segment(dense_offset_[b], problem_.parameter_block(static_cast<int>(b)).tangent_dim);
    return step;
  }

  std::vector<Eigen::VectorXd> schur_step(const std::vector<ResidualEval>& scaled, double lambda) const {
    BlockSystem sys;
    for (int b : camera_blocks_) sys.camera_dims.push_back(problem_.parameter_block(b).tangent_dim);
    for (int b : point_blocks_) sys.point_dims.push_back(problem_.parameter_block(b).tangent_dim);
    const std::vector<int> off = sys.camera_offsets();
    sys.camera_hessian = Eigen::MatrixXd::Zero(off.back(), off.back());
    sys.camera_rhs = Eigen::VectorXd::Zero(off.back());
    sys.point_hessians.resize(point_blocks_.size());
    sys.point_rhs.resize(point_blocks_.size());
    sys.coupling.resize(point_blocks_.size());
    for (std::size_t p = 0; p < point_blocks_.size(); ++p) {
      sys.point_hessians[p] = Eigen::MatrixXd::Zero(sys.point_dims[p], sys.point_dims[p]);
      sys.point_rhs[p] = Eigen::VectorXd::Zero(sys.point_dims[p]);
    }
    // (point, camera) -> slot in coupling[point]
    std::vector<std::vector<int>> slot(point_blocks_.size());
    for (std::size_t r = 0; r < scaled.size(); ++r) {
      if (!active_[r] || scaled[r].status != EvalStatus::Ok) continue;
      const ResidualBlock& rb = problem_.residual_block(static_cast<int>(r));
      Eigen::Map<const Eigen::VectorXd> res(scaled[r].r.data(), rb.dim);
      int point = -1;
      Eigen::MatrixXd Jp;
      std::vector<std::pair<int, Eigen::MatrixXd>> cams;
      for (std::size_t k = 0; k < rb.blocks.size(); ++k) {
        if (scaled[r].jac[k].empty()) continue;
        const auto b = static_cast<std::size_t>(rb.blocks[k]);
        if (point_index_[b] >= 0) {
          point = point_index_[b];
          Jp = jacobian(scaled[r], static_cast<int>(r), k);
        } else {
          cams.emplace_back(camera_index_[b], jacobian(scaled[r], static_cast<int>(r), k));
        }
      }
      for (const auto& [ca, Ja] : cams) {
        sys.camera_rhs.segment(off[ca], Ja.cols()) -= Ja.transpose() * res;
        for (const auto& [cb, Jb] : cams)
          sys.camera_hessian.block(off[ca], off[cb], Ja.cols(), Jb.cols()) += Ja.transpose() * Jb;
      }
      if (point < 0) continue;
      const auto p = static_cast<std::size_t>(point);
      sys.point_hessians[p] += Jp.transpose() * Jp;
      sys.point_rhs[p] -= Jp.transpose() * res;
      for (const auto& [ca, Ja] : cams) {
        if (slot[p].empty()) slot[p].assign(camera_blocks_.size(), -1);
        int& s = slot[p][static_cast<std::size_t>(ca)];
        if (s < 0) {
          s = static_cast<int>(sys.coupling[p].size());
          sys.coupling[p].emplace_back(ca, Eigen::MatrixXd::Zero(Ja.cols(), Jp.cols()));
        }
        sys.coupling[p][static_cast<std::size_t>(s)].second += Ja.transpose() * Jp;
      }
    }
    damp(sys.camera_hessian, lambda);
    for (auto& H : sys.point_hessians) damp(H, lambda);
    const BlockUpdate upd = schur_solve(sys, lambda);
    std::vector<Eigen::VectorXd> step(problem_.num_parameter_blocks());
    for (std::size_t c = 0; c < camera_blocks_.size(); ++c)
      step[static_cast<std::size_t>(camera_blocks_[c])] = upd.camera.segment(off[c], sys.camera_dims[c]);
    for (std::size_t p = 0; p < point_blocks_.size(); ++p)
      step[static_cast<std::size_t>(point_blocks_[p])] = upd.points[p];
    return step;
  }

  std::vector<double> plus(int b, const double* x, const Eigen::VectorXd& delta) const {
    const ParameterBlock& pb = problem_.parameter_block(b);
    Eigen::VectorXd d = delta;
    for (int c : pb.fixed_coordinates) d(c) = 0.0;
    std::vector<double> out(pb.values.size());
    if (pb.plus) {
      pb.plus(x, d.data(), out.data());
    } else {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + d(static_cast<Eigen::Index>(i));
    }
    return out;
  }

  std::vector<std::vector<double>> apply_step(const std::vector<Eigen::VectorXd>& step) const {
    std::vector<std::vector<double>> out(problem_.num_parameter_blocks());
    for (std::size_t b = 0; b < out.size(); ++b)
      if (step[b].size() > 0)
        out[b] = plus(static_cast<int>(b), problem_.parameter_block(static_cast<int>(b)).values.data(), step[b]);
    return out;
  }

  void commit(std::vector<std::vector<double>>& values) {
    for (std::size_t b = 0; b < values.size(); ++b)
      if (!values[b].empty()) problem_.parameter_block(static_cast<int>(b)).values = std::move(values[b]);
  }

  std::vector<double> refine_point(int block, const std::vector<const double*>& base_state,
                                   const std::vector<ResidualEval>& evals) const {
    const ParameterBlock& pb = problem_.parameter_block(block);
    std::vector<double> x = pb.values;
    std::vector<std::size_t> rs;
    for (std::size_t r : residuals_of_block_[static_cast<std::size_t>(block)])
      if (active_[r] && evals[r].status == EvalStatus::Ok) rs.push_back(r);
    if (rs.empty()) return x;
    std::vector<ResidualEval> local;
    double cost = 0.0;
    for (std::size_t r : rs) {
      local.push_back(evals[r]);
      cost += evals[r].cost;
    }
    std::vector<const double*> state = base_state;
    double lambda = opts_.initial_damping;
    const int dim = pb.tangent_dim;
    for (int it = 0; it < opts_.embedded_point_iterations; ++it) {
      Eigen::MatrixXd H = Eigen::MatrixXd::Zero(dim, dim);
      Eigen::VectorXd g = Eigen::VectorXd::Zero(dim);
      for (std::size_t i = 0; i < rs.size(); ++i) {
        ResidualEval sc = local[i];
        const int r = static_cast<int>(rs[i]);
        const ResidualBlock& rb = problem_.residual_block(r);
        corrected(rb, sc);
        const auto k = static_cast<std::size_t>(
            std::find(rb.blocks.begin(), rb.blocks.end(), block) - rb.blocks.begin());
        const Eigen::MatrixXd J = jacobian(sc, r, k);
        H += J.transpose() * J;
        g -= J.transpose() * Eigen::Map<const Eigen::VectorXd>(sc.r.data(), rb.dim);
      }
      damp(H, lambda);
      Eigen::LLT<Eigen::MatrixXd> llt(H);
      if (llt.info() != Eigen::Success) break;
      const Eigen::VectorXd delta = llt.solve(g);
      if (!delta.allFinite() || delta.cwiseAbs().maxCoeff() < opts_.parameter_tolerance) break;
      std::vector<double> cand = plus(block, x.data(), delta);
      state[static_cast<std::size_t>(block)] = cand.data();
      std::vector<ResidualEval> cand_evals;
      double cand_cost = 0.0;
      bool ok = true;
      for (std::size_t r : rs) {
        cand_evals.push_back(evaluate_residual(problem_, static_cast<int>(r), state, true));
        ok &= cand_evals.back().status == EvalStatus::Ok;
        cand_cost += cand_evals.back().cost;
      }
      if (ok && cand_cost < cost) {
        x = std::move(cand);
        local = std::move(cand_evals);
        cost = cand_cost;
        lambda = std::max(lambda / opts_.damping_decrease, 1e-16);
      } else {
        lambda *= opts_.damping_increase;
        if (lambda > kStallDamping) break;
      }
      state[static_cast<std::size_t>(block)] = x.data();
    }
    return x;
  }

  LMProblem& problem_;
  LMOptions opts_;
  std::vector<bool> active_;
  std::vector<std::vector<std::size_t>> residuals_of_block_;
  bool use_schur_ = false;
  std::vector<int> camera_blocks_, point_blocks_;
  std::vector<int> camera_index_, point_index_, dense_offset_;
  int dense_dim_ = 0;
};

}  // namespace detail

inline double LMProblem::total_cost() const {
  std::vector<const double*> state(blocks_.size());
  for (std::size_t b = 0; b < blocks_.size(); ++b) state[b] = blocks_[b].values.data();
  double c = 0.0;
  for (std::size_t r = 0; r < residuals_.size(); ++r) {
    const auto ev = detail::evaluate_residual(*this, static_cast<int>(r), state, false);
    if (ev.status == EvalStatus::Ok) c += ev.cost;
  }
  return c;
}

// Levenberg-Marquardt with multiplicative damping on the Hessian diagonal.
// Parameter values are updated in place.
inline LMSummary lm_solve(LMProblem& problem, const LMOptions& opts) {
  if (opts.max_iterations < 0 || !(opts.parameter_tolerance > 0.0) || !(opts.initial_damping > 0.0) ||
      !(opts.damping_increase > 1.0) || !(opts.damping_decrease > 1.0))
    fail(ErrorCode::InvalidArgument, "invalid solver options");
  detail::Solver solver(problem, opts);
  return solver.run();
}

// Runs only the per-point inner refinement on the current state. Returns the
// total cost before and after.
inline std::pair<double, double> embedded_point_iterations(LMProblem& problem, const LMOptions& opts) {
  if (!problem.schur_applicable())
    fail(ErrorCode::InvalidArgument, "embedded point iterations need a camera/point partition");
  const double before = problem.total_cost();
  LMOptions o = opts;
  o.use_schur = true;
  detail::Solver solver(problem, o);
  std::vector<const double*> state(problem.num_parameter_blocks());
  for (std::size_t b = 0; b < state.size(); ++b) state[b] = problem.values(static_cast<int>(b)).data();
  std::vector<detail::ResidualEval> evals(problem.num_residual_blocks());
  for (std::size_t r = 0; r < evals.size(); ++r)
    evals[r] = detail::evaluate_residual(problem, static_cast<int>(r), state, true);
  solver.embedded_point_iterations(evals);
  return {before, problem.total_cost()};
}

}  // namespace featref
