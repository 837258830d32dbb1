#include "peermarket/qp.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

namespace peermarket::qp {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

const char* to_string(SolveStatus status) {
  switch (status) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::max_iter: return "max_iter";
    case SolveStatus::infeasible: return "infeasible";
  }
  return "?";
}

double KktResiduals::max_violation() const {
  return std::max({primal_eq, stationarity, complementarity});
}

void QpProblem::validate() const {
  auto sized = [&](const std::vector<double>& v, const char* name) {
    if (!v.empty() && static_cast<int>(v.size()) != num_vars)
      throw QpError(std::string("QpProblem: ") + name + " size mismatch");
  };
  if (num_vars < 0) throw QpError("QpProblem: negative num_vars");
  sized(quad, "quad");
  sized(linear, "linear");
  sized(abs_fee, "abs_fee");
  sized(lower, "lower");
  sized(upper, "upper");
  for (double q : quad) {
    if (std::isnan(q) || q < 0.0)
      throw QpError("QpProblem: quadratic weights must be >= 0");
  }
  for (double w : abs_fee) {
    if (std::isnan(w) || w < 0.0)
      throw QpError("QpProblem: absolute-value fee weights must be >= 0");
  }
  for (double l : linear) {
    if (!std::isfinite(l)) throw QpError("QpProblem: non-finite linear term");
  }
  for (int i = 0; i < static_cast<int>(lower.size()); ++i) {
    if (std::isnan(lower[i]) || std::isnan(upper[i]) || lower[i] > upper[i])
      throw QpError("QpProblem: box requires lower <= upper");
  }
  for (const EqualityRow& row : equalities) {
    if (row.cols.size() != row.coeffs.size())
      throw QpError("QpProblem: equality row cols/coeffs size mismatch");
    bool any = false;
    for (std::size_t k = 0; k < row.cols.size(); ++k) {
      if (row.cols[k] < 0 || row.cols[k] >= num_vars)
        throw QpError("QpProblem: equality column out of range");
      if (row.coeffs[k] != 0.0) any = true;
    }
    if (!any) throw QpError("QpProblem: equality row has no nonzero");
    if (!std::isfinite(row.rhs))
      throw QpError("QpProblem: non-finite equality rhs");
  }
}

namespace {

double coeff_or(const std::vector<double>& v, int i, double fallback) {
  return v.empty() ? fallback : v[i];
}

double objective_at(const QpProblem& p, const std::vector<double>& x) {
  double obj = p.constant;
  for (int i = 0; i < p.num_vars; ++i) {
    const double xi = x[i];
    obj += coeff_or(p.quad, i, 0.0) * xi * xi +
           coeff_or(p.linear, i, 0.0) * xi +
           coeff_or(p.abs_fee, i, 0.0) * std::abs(xi);
  }
  return obj;
}

/// A^T * duals accumulated per variable.
std::vector<double> transpose_apply(const QpProblem& p,
                                    const std::vector<double>& duals) {
  std::vector<double> at(p.num_vars, 0.0);
  for (std::size_t r = 0; r < p.equalities.size(); ++r) {
    const EqualityRow& row = p.equalities[r];
    for (std::size_t k = 0; k < row.cols.size(); ++k)
      at[row.cols[k]] += row.coeffs[k] * duals[r];
  }
  return at;
}

}  // namespace

KktResiduals check_kkt(const QpProblem& problem, const std::vector<double>& x,
                       const std::vector<double>& duals) {
  problem.validate();
  if (static_cast<int>(x.size()) != problem.num_vars)
    throw QpError("DimensionMismatch: candidate x size");
  if (duals.size() != problem.equalities.size())
    throw QpError("DimensionMismatch: dual vector size");

  KktResiduals res;
  for (const EqualityRow& row : problem.equalities) {
    double lhs = -row.rhs;
    for (std::size_t k = 0; k < row.cols.size(); ++k)
      lhs += row.coeffs[k] * x[row.cols[k]];
    res.primal_eq = std::max(res.primal_eq, std::abs(lhs));
  }

  const std::vector<double> at = transpose_apply(problem, duals);
  for (int i = 0; i < problem.num_vars; ++i) {
    const double xi = x[i];
    const double lo = coeff_or(problem.lower, i, -kInf);
    const double hi = coeff_or(problem.upper, i, kInf);
    const double w = coeff_or(problem.abs_fee, i, 0.0);

    res.primal_eq = std::max({res.primal_eq, lo - xi, xi - hi});

    // Smooth part of the projected gradient.
    const double theta =
        2.0 * coeff_or(problem.quad, i, 0.0) * xi +
        coeff_or(problem.linear, i, 0.0) - at[i];

    // Allowed subgradient interval for the |x| fee at this point.
    const double eps_x = 1e-9 * (1.0 + std::abs(xi));
    double flo = 0.0, fhi = 0.0;
    if (w > 0.0) {
      if (xi > eps_x) flo = fhi = w;
      else if (xi < -eps_x) flo = fhi = -w;
      else { flo = -w; fhi = w; }
    }

    // Normal cone of the box widens the interval at active bounds.
    const bool at_lo =
        std::isfinite(lo) && xi - lo <= 1e-9 * (1.0 + std::abs(lo));
    const bool at_hi =
        std::isfinite(hi) && hi - xi <= 1e-9 * (1.0 + std::abs(hi));

    // Stationarity: -theta must lie in [flo, fhi] + normal cone.
    double stat = 0.0;
    const double target = -theta;
    if (target < flo && !at_lo) stat = flo - target;
    else if (target > fhi && !at_hi) stat = target - fhi;
    res.stationarity = std::max(res.stationarity, stat);

    // Complementarity of the implied box multipliers.
    const double tau = theta + std::clamp(-theta, flo, fhi);
    if (std::isfinite(lo))
      res.complementarity =
          std::max(res.complementarity, std::max(tau, 0.0) * (xi - lo));
    if (std::isfinite(hi))
      res.complementarity =
          std::max(res.complementarity, std::max(-tau, 0.0) * (hi - xi));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Operator-splitting solver.
//
// Splits f(x) = separable objective + box indicator from the affine set
// {A z = d}: alternating proximal updates on the separable part (closed-form
// shrinkage handles the |x| fees) and an exact projection on the equalities
// through a cached Cholesky factor of A A^T. Equality duals come out of the
// projection step.
// ---------------------------------------------------------------------------

struct StructuredSolver::Impl {
  QpProblem prob;
  SolveOptions opts;

  int n = 0, m = 0;
  Eigen::LLT<Eigen::MatrixXd> gram_llt;
  Eigen::VectorXd d;

  // Iteration state, persisted for warm starts.
  Eigen::VectorXd x, z, u, zprev, work_m, nu;
  double rho = 1.0;
  bool have_warm = false;

  explicit Impl(QpProblem problem, SolveOptions options)
      : prob(std::move(problem)), opts(options) {
    prob.validate();
    n = prob.num_vars;
    m = static_cast<int>(prob.equalities.size());
    if (prob.quad.empty()) prob.quad.assign(n, 0.0);
    if (prob.linear.empty()) prob.linear.assign(n, 0.0);
    if (prob.abs_fee.empty()) prob.abs_fee.assign(n, 0.0);
    if (prob.lower.empty()) prob.lower.assign(n, -kInf);
    if (prob.upper.empty()) prob.upper.assign(n, kInf);

    d.resize(m);
    for (int r = 0; r < m; ++r) d[r] = prob.equalities[r].rhs;

    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(m, m);
    for (int r = 0; r < m; ++r) {
      const EqualityRow& a = prob.equalities[r];
      for (int s = r; s < m; ++s) {
        const EqualityRow& b = prob.equalities[s];
        double dot = 0.0;
        for (std::size_t i = 0; i < a.cols.size(); ++i)
          for (std::size_t j = 0; j < b.cols.size(); ++j)
            if (a.cols[i] == b.cols[j]) dot += a.coeffs[i] * b.coeffs[j];
        gram(r, s) = dot;
        gram(s, r) = dot;
      }
    }
    double jitter = 0.0;
    for (int attempt = 0; attempt < 12; ++attempt) {
      Eigen::MatrixXd g = gram;
      if (jitter > 0.0) g.diagonal().array() += jitter;
      gram_llt.compute(g);
      if (gram_llt.info() == Eigen::Success) break;
      jitter = jitter == 0.0 ? 1e-12 * (1.0 + gram.trace() / std::max(m, 1))
                             : jitter * 100.0;
    }
    if (m > 0 && gram_llt.info() != Eigen::Success)
      throw QpError("QpProblem: equality rows are numerically dependent");

    x.setZero(n);
    z.setZero(n);
    u.setZero(n);
    zprev.setZero(n);
    work_m.setZero(m);
    nu.setZero(m);
    rho = opts.step_param;
  }

  void apply_A(const Eigen::VectorXd& v, Eigen::VectorXd& out) const {
    for (int r = 0; r < m; ++r) {
      const EqualityRow& row = prob.equalities[r];
      double acc = 0.0;
      for (std::size_t k = 0; k < row.cols.size(); ++k)
        acc += row.coeffs[k] * v[row.cols[k]];
      out[r] = acc;
    }
  }

  void subtract_At(const Eigen::VectorXd& mult, Eigen::VectorXd& target) const {
    for (int r = 0; r < m; ++r) {
      const EqualityRow& row = prob.equalities[r];
      const double mr = mult[r];
      if (mr == 0.0) continue;
      for (std::size_t k = 0; k < row.cols.size(); ++k)
        target[row.cols[k]] -= row.coeffs[k] * mr;
    }
  }

  double prox_scalar(int i, double v) const {
    const double den = 2.0 * prob.quad[i] + rho;
    const double num = rho * v - prob.linear[i];
    const double w = prob.abs_fee[i];
    double xi;
    if (w == 0.0) {
      xi = num / den;
    } else if (num > w) {
      xi = (num - w) / den;
    } else if (num < -w) {
      xi = (num + w) / den;
    } else {
      xi = 0.0;
    }
    return std::clamp(xi, prob.lower[i], prob.upper[i]);
  }

  void iterate_once(double alpha) {
    for (int i = 0; i < n; ++i) x[i] = prox_scalar(i, z[i] - u[i]);
    zprev = z;
    for (int i = 0; i < n; ++i)
      z[i] = alpha * x[i] + (1.0 - alpha) * zprev[i] + u[i];
    if (m > 0) {
      apply_A(z, work_m);
      work_m -= d;
      nu = gram_llt.solve(work_m);
      u = z;              // holds xh + u_old
      subtract_At(nu, z);
      u -= z;             // u = (xh + u_old) - z_new = A^T nu
    } else {
      u.setZero();
    }
    primal_res = (x - z).lpNorm<Eigen::Infinity>();
    dual_res = rho * (z - zprev).lpNorm<Eigen::Infinity>();
  }

  void adapt_rho() {
    if (primal_res > 10.0 * dual_res && rho < 1e8) {
      rho *= 2.0;
      u *= 0.5;
    } else if (dual_res > 10.0 * primal_res && rho > 1e-8) {
      rho *= 0.5;
      u *= 2.0;
    }
  }

  double primal_res = 0.0, dual_res = 0.0;
  int iter = 0;

  QpSolution run() {
    QpSolution sol;
    if (n == 0) {
      sol.status = SolveStatus::optimal;
      sol.objective_value = prob.constant;
      sol.duals.assign(m, 0.0);
      return sol;
    }
    if (!have_warm) {
      for (int i = 0; i < n; ++i)
        z[i] = std::clamp(0.0, prob.lower[i], prob.upper[i]);
      u.setZero();
      rho = opts.step_param;
    }
    have_warm = true;

    const double alpha = opts.over_relaxation;
    double tol_inner = 0.5 * opts.tol;
    int tighten_left = 6;

    primal_res = kInf;
    dual_res = kInf;
    iter = 0;
    bool converged = false;
    bool infeasible = false;

    // Stagnation bookkeeping for the infeasibility heuristic.
    double window_min = kInf;
    std::vector<double> window_mins;
    std::vector<double> u_norms;
    int stagnant_hits = 0;

    while (iter < opts.max_iter) {
      ++iter;
      iterate_once(alpha);
      window_min = std::min(window_min, primal_res);

      if (primal_res <= tol_inner && dual_res <= tol_inner) {
        converged = true;
        break;
      }
      if (opts.adaptive_step && iter % 50 == 0) adapt_rho();

      if (iter % 100 == 0) {
        window_mins.push_back(window_min);
        u_norms.push_back(rho * u.lpNorm<Eigen::Infinity>());
        window_min = kInf;
        const std::size_t j = window_mins.size();
        if (j >= 10) {
          const double pm_new = window_mins[j - 1];
          const double pm_old = window_mins[j - 6];
          const double du = u_norms[j - 1] - u_norms[j - 6];
          const bool stagnant = pm_new > 0.995 * pm_old &&
                                pm_new > std::max(1e3 * opts.tol, 1e-10) &&
                                dual_res <= 1e-3 * pm_new &&
                                du >= 10.0 * pm_new;
          stagnant_hits = stagnant ? stagnant_hits + 1 : 0;
          if (stagnant_hits >= 2) {
            infeasible = true;
            break;
          }
        }
      }
    }

    auto finish = [&](SolveStatus status) {
      sol.x.assign(x.data(), x.data() + n);
      sol.duals.resize(m);
      for (int r = 0; r < m; ++r) sol.duals[r] = -rho * nu[r];
      sol.iterations = iter;
      sol.kkt_residuals = check_kkt(prob, sol.x, sol.duals);
      sol.objective_value = objective_at(prob, sol.x);
      sol.status = status;
    };

    if (infeasible) {
      finish(SolveStatus::infeasible);
      return sol;
    }

    finish(converged ? SolveStatus::optimal : SolveStatus::max_iter);

    // Inner residuals can pass while the true KKT residuals still exceed
    // the target; tighten and continue before giving up.
    while (converged && !sol.kkt_residuals.within(opts.tol) &&
           tighten_left > 0 && iter < opts.max_iter) {
      --tighten_left;
      tol_inner *= 0.25;
      converged = false;
      while (iter < opts.max_iter) {
        ++iter;
        iterate_once(alpha);
        if (primal_res <= tol_inner && dual_res <= tol_inner) {
          converged = true;
          break;
        }
      }
      finish(converged ? SolveStatus::optimal : SolveStatus::max_iter);
    }

    const bool want_polish =
        opts.polish == SolveOptions::Polish::always ||
        (opts.polish == SolveOptions::Polish::on_demand &&
         !sol.kkt_residuals.within(opts.tol));
    if (want_polish) {
      polish(sol);
      if (!sol.polished && iter < opts.max_iter) {
        // The iterate's activity structure is still ambiguous; run the
        // splitting tighter and try once more from a cleaner point.
        const double tol_tight = std::max(1e-4 * opts.tol, 1e-12);
        while (iter < opts.max_iter) {
          ++iter;
          iterate_once(alpha);
          if (primal_res <= tol_tight && dual_res <= tol_tight) break;
          if (opts.adaptive_step && iter % 50 == 0) adapt_rho();
        }
        finish(sol.status);
        polish(sol);
      }
    }

    if (sol.status != SolveStatus::infeasible) {
      sol.status = sol.kkt_residuals.within(opts.tol) ? SolveStatus::optimal
                                                      : SolveStatus::max_iter;
    }
    return sol;
  }

  /** Active-set refinement seeded by the splitting iterate: fix variables at
   *  bounds/kinks, solve the reduced KKT system exactly, then move wrongly
   *  classified variables between the free and fixed sets until the guess is
   *  self-consistent. The result is adopted only when its KKT residuals beat
   *  the iterate's, so a failed guess can never make the solution worse.
   */
  void polish(QpSolution& sol) {
    enum class Cls { free, at_lo, at_hi, at_kink };
    std::vector<Cls> cls(n);
    std::vector<double> sigma(n, 1.0);  // fee sign of free variables

    for (int i = 0; i < n; ++i) {
      const double xi = sol.x[i];
      const double eps = 1e-7 * (1.0 + std::abs(xi));
      if (std::isfinite(prob.lower[i]) && xi - prob.lower[i] <= eps) {
        cls[i] = Cls::at_lo;
      } else if (std::isfinite(prob.upper[i]) && prob.upper[i] - xi <= eps) {
        cls[i] = Cls::at_hi;
      } else if (prob.abs_fee[i] > 0.0 && std::abs(xi) <= eps) {
        cls[i] = Cls::at_kink;
      } else {
        cls[i] = Cls::free;
        sigma[i] = xi >= 0.0 ? 1.0 : -1.0;
      }
    }

    std::vector<double> x_pol(n), duals_pol(m), at(n);
    std::vector<int> free_idx, pos_in_free(n);
    std::vector<int> flips(n, 0);  // anti-cycling: freeze after 3 moves
    constexpr int kMaxPasses = 10;
    for (int pass = 0; pass < kMaxPasses; ++pass) {
      free_idx.clear();
      std::fill(pos_in_free.begin(), pos_in_free.end(), -1);
      for (int i = 0; i < n; ++i) {
        if (cls[i] == Cls::free) {
          pos_in_free[i] = static_cast<int>(free_idx.size());
          free_idx.push_back(i);
        }
      }
      const int nf = static_cast<int>(free_idx.size());
      const int dim = nf + m;
      if (dim == 0) return;

      auto fixed_value = [&](int i) {
        switch (cls[i]) {
          case Cls::at_lo: return prob.lower[i];
          case Cls::at_hi: return prob.upper[i];
          default: return 0.0;  // kink
        }
      };

      Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(dim, dim);
      Eigen::VectorXd rhs(dim);
      for (int k = 0; k < nf; ++k) {
        const int i = free_idx[k];
        kkt(k, k) = 2.0 * prob.quad[i];
        rhs[k] = -(prob.linear[i] + sigma[i] * prob.abs_fee[i]);
      }
      for (int r = 0; r < m; ++r) {
        const EqualityRow& row = prob.equalities[r];
        double b = row.rhs;
        for (std::size_t t = 0; t < row.cols.size(); ++t) {
          const int i = row.cols[t];
          if (pos_in_free[i] >= 0) {
            kkt(nf + r, pos_in_free[i]) = row.coeffs[t];
            kkt(pos_in_free[i], nf + r) = row.coeffs[t];
          } else {
            b -= row.coeffs[t] * fixed_value(i);
          }
        }
        rhs[nf + r] = b;
      }

      // Rank-revealing least-squares solve: flat directions (zero-quad
      // variables with tied routings) make the KKT matrix singular, and a
      // wrong active-set guess can even make it inconsistent. The minimum-
      // norm least-squares solution stays bounded in both cases.
      Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(kkt);
      Eigen::VectorXd y = cod.solve(rhs);
      if (!y.allFinite()) return;

      for (int i = 0; i < n; ++i) x_pol[i] = fixed_value(i);
      for (int k = 0; k < nf; ++k) x_pol[free_idx[k]] = y[k];
      for (int r = 0; r < m; ++r) duals_pol[r] = -y[nf + r];

      // Reclassify against the polished point.
      std::fill(at.begin(), at.end(), 0.0);
      for (int r = 0; r < m; ++r) {
        const EqualityRow& row = prob.equalities[r];
        for (std::size_t t = 0; t < row.cols.size(); ++t)
          at[row.cols[t]] += row.coeffs[t] * duals_pol[r];
      }
      bool changed = false;
      for (int i = 0; i < n; ++i) {
        if (flips[i] >= 3) continue;
        const double w = prob.abs_fee[i];
        const double margin = 1e-9 * (1.0 + std::abs(x_pol[i]));
        if (cls[i] == Cls::free) {
          if (x_pol[i] < prob.lower[i] - margin) {
            cls[i] = Cls::at_lo;
            ++flips[i];
            changed = true;
          } else if (x_pol[i] > prob.upper[i] + margin) {
            cls[i] = Cls::at_hi;
            ++flips[i];
            changed = true;
          } else if (w > 0.0 && sigma[i] * x_pol[i] < -margin) {
            cls[i] = Cls::at_kink;
            ++flips[i];
            changed = true;
          }
          continue;
        }
        // Fixed variable: release it when the implied multiplier has the
        // wrong sign (the bound/kink is not actually active).
        const double theta =
            2.0 * prob.quad[i] * x_pol[i] + prob.linear[i] - at[i];
        const double tol_rel = 1e-9 * (1.0 + std::abs(theta));
        const bool kink_like =
            cls[i] == Cls::at_kink ||
            (w > 0.0 && fixed_value(i) == 0.0 && cls[i] != Cls::free);
        double allowed_lo = 0.0, allowed_hi = 0.0;
        if (kink_like) {
          allowed_lo = -w;
          allowed_hi = w;
        }
        if (cls[i] == Cls::at_lo) allowed_lo = -kInf;
        if (cls[i] == Cls::at_hi) allowed_hi = kInf;
        const double target = -theta;
        if (target > allowed_hi + tol_rel) {
          cls[i] = Cls::free;  // wants to grow
          sigma[i] = 1.0;
          ++flips[i];
          changed = true;
        } else if (target < allowed_lo - tol_rel) {
          cls[i] = Cls::free;  // wants to shrink
          sigma[i] = -1.0;
          ++flips[i];
          changed = true;
        }
      }
      if (changed && pass + 1 < kMaxPasses) continue;

      for (int i = 0; i < n; ++i)
        x_pol[i] = std::clamp(x_pol[i], prob.lower[i], prob.upper[i]);
      KktResiduals kkt_pol;
      try {
        kkt_pol = check_kkt(prob, x_pol, duals_pol);
      } catch (const QpError&) {
        return;
      }
      if (kkt_pol.max_violation() <= sol.kkt_residuals.max_violation()) {
        sol.x = x_pol;
        sol.duals = duals_pol;
        sol.kkt_residuals = kkt_pol;
        sol.objective_value = objective_at(prob, sol.x);
        sol.polished = true;
      }
      return;
    }
  }
};

StructuredSolver::StructuredSolver(QpProblem problem, SolveOptions opts)
    : impl_(std::make_unique<Impl>(std::move(problem), opts)) {}
StructuredSolver::~StructuredSolver() = default;
StructuredSolver::StructuredSolver(StructuredSolver&&) noexcept = default;
StructuredSolver& StructuredSolver::operator=(StructuredSolver&&) noexcept =
    default;

void StructuredSolver::set_quad(int var, double value) {
  impl_->prob.quad.at(var) = value;
}
void StructuredSolver::set_linear(int var, double value) {
  impl_->prob.linear.at(var) = value;
}
void StructuredSolver::set_abs_fee(int var, double value) {
  impl_->prob.abs_fee.at(var) = value;
}
void StructuredSolver::set_bounds(int var, double lo, double hi) {
  impl_->prob.lower.at(var) = lo;
  impl_->prob.upper.at(var) = hi;
}
void StructuredSolver::set_rhs(int row, double value) {
  impl_->prob.equalities.at(row).rhs = value;
  impl_->d[row] = value;
}
void StructuredSolver::set_constant(double value) {
  impl_->prob.constant = value;
}

const QpProblem& StructuredSolver::problem() const { return impl_->prob; }
SolveOptions& StructuredSolver::options() { return impl_->opts; }

QpSolution StructuredSolver::solve() { return impl_->run(); }

void StructuredSolver::reset_warm_start() { impl_->have_warm = false; }

QpSolution solve(const QpProblem& problem, const SolveOptions& opts) {
  StructuredSolver solver(problem, opts);
  return solver.solve();
}

}  // namespace peermarket::qp
