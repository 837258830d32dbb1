#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace peermarket::qp {

/// Raised for structurally invalid problems or mismatched dimensions.
class QpError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// One sparse equality row: sum_k coeffs[k] * x[cols[k]] == rhs.
struct EqualityRow {
  std::vector<int> cols;
  std::vector<double> coeffs;
  double rhs = 0.0;
};

/** Convex separable QP with linear equality coupling and box constraints:
 *
 *   minimize   sum_i  quad[i]*x_i^2 + linear[i]*x_i + abs_fee[i]*|x_i|
 *              + constant
 *   subject to A x = d   (rows of `equalities`)
 *              lower <= x <= upper  (either side may be infinite)
 *
 * quad and abs_fee must be non-negative. Empty vectors mean all-zero
 * coefficients (and unbounded boxes for lower/upper).
 */
struct QpProblem {
  int num_vars = 0;
  std::vector<double> quad;
  std::vector<double> linear;
  std::vector<double> abs_fee;
  std::vector<EqualityRow> equalities;
  std::vector<double> lower;
  std::vector<double> upper;
  double constant = 0.0;

  /// Throws QpError when invariants are violated.
  void validate() const;
};

enum class SolveStatus { optimal, max_iter, infeasible };

const char* to_string(SolveStatus status);

/// Max-norm KKT violations of a candidate point.
struct KktResiduals {
  double primal_eq = 0.0;       ///< equality rows and box violations
  double stationarity = 0.0;    ///< subgradient distance, incl. |x| kinks
  double complementarity = 0.0; ///< implied bound multiplier * slack

  double max_violation() const;
  bool within(double tol) const { return max_violation() <= tol; }
};

struct SolveOptions {
  double tol = 1e-6;        ///< max-norm target for all KKT residuals
  int max_iter = 50000;
  double step_param = 1.0;  ///< initial splitting penalty rho
  bool adaptive_step = true;       ///< residual balancing on rho
  double over_relaxation = 1.6;    ///< 1.0 disables
  enum class Polish { never, on_demand, always };
  Polish polish = Polish::on_demand;
};

struct QpSolution {
  std::vector<double> x;
  std::vector<double> duals;  ///< one per equality row
  double objective_value = 0.0;
  SolveStatus status = SolveStatus::max_iter;
  KktResiduals kkt_residuals;
  int iterations = 0;
  bool polished = false;
};

/// Solve a problem from scratch. Pure and reentrant.
QpSolution solve(const QpProblem& problem, const SolveOptions& opts = {});

/// KKT residual report for an arbitrary candidate point. Throws QpError on
/// dimension mismatch. Independent of the solve path.
KktResiduals check_kkt(const QpProblem& problem, const std::vector<double>& x,
                       const std::vector<double>& duals);

/** Reusable solver for a fixed constraint structure.
 *
 * The equality matrix (sparsity and coefficients) is factorized once at
 * construction; objective coefficients, boxes, and right-hand sides may
 * change between solves. Successive solves warm-start from the previous
 * point unless reset.
 */
class StructuredSolver {
 public:
  StructuredSolver(QpProblem problem, SolveOptions opts = {});
  ~StructuredSolver();
  StructuredSolver(StructuredSolver&&) noexcept;
  StructuredSolver& operator=(StructuredSolver&&) noexcept;

  void set_quad(int var, double value);
  void set_linear(int var, double value);
  void set_abs_fee(int var, double value);
  void set_bounds(int var, double lo, double hi);
  void set_rhs(int row, double value);
  void set_constant(double value);

  const QpProblem& problem() const;
  SolveOptions& options();

  QpSolution solve();
  void reset_warm_start();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace peermarket::qp
