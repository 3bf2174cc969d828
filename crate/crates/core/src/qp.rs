//! Dense primal active-set solver for strictly convex quadratic programs
//!
//! ```text
//! minimize    1/2 z' H z + f' z
//! subject to  G z <= g
//!             lower <= z <= upper
//! ```
//!
//! Box bounds and general rows share one working set. A starting point that
//! violates a row is first projected onto the feasible set with a dual
//! (Goldfarb-Idnani type) active-set pass on `1/2 ||z - z0||^2`. That pass
//! keeps its active normals linearly independent, hands them to the primal
//! phase as the initial working set, and certifies infeasibility when a
//! violated row is a non-negative combination of active rows.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hessian is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("lower bound {lower} exceeds upper bound {upper} for variable {index}")]
    InvalidBounds {
        index: usize,
        lower: f64,
        upper: f64,
    },
    #[error("problem data contains non-finite values")]
    NonFinite,
}

/// Dense QP data. Box bounds may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadProgram {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_bound: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QuadProgram {
    /// Unconstrained problem; add constraints with the builder methods.
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_bound: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_inequalities(mut self, matrix: DMatrix<f64>, bound: DVector<f64>) -> Self {
        self.ineq_matrix = matrix;
        self.ineq_bound = bound;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn num_variables(&self) -> usize {
        self.gradient.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.ineq_bound.len()
    }

    /// `1/2 z' H z + f' z`.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.gradient.dot(z)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_variables();
        let m = self.num_inequalities();
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return Err(QpError::Dimension(format!(
                "hessian is {}x{}, expected {n}x{n}",
                self.hessian.nrows(),
                self.hessian.ncols()
            )));
        }
        if self.ineq_matrix.nrows() != m || (m > 0 && self.ineq_matrix.ncols() != n) {
            return Err(QpError::Dimension(format!(
                "inequality matrix is {}x{}, expected {m}x{n}",
                self.ineq_matrix.nrows(),
                self.ineq_matrix.ncols()
            )));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(QpError::Dimension(format!(
                "bounds have lengths {} and {}, expected {n}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        if self
            .hessian
            .iter()
            .chain(self.gradient.iter())
            .chain(self.ineq_matrix.iter())
            .chain(self.ineq_bound.iter())
            .any(|v| !v.is_finite())
            || self
                .lower
                .iter()
                .chain(self.upper.iter())
                .any(|v| v.is_nan())
        {
            return Err(QpError::NonFinite);
        }
        let scale = self.hessian.amax().max(1.0);
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(QpError::NotSymmetric(asym));
        }
        for i in 0..n {
            if self.lower[i] > self.upper[i] {
                return Err(QpError::InvalidBounds {
                    index: i,
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers of the rows `G z <= g`.
    pub multipliers: DVector<f64>,
    pub lower_multipliers: DVector<f64>,
    pub upper_multipliers: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

/// Individual first-order optimality residuals, all in infinity norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(problem: &QuadProgram, solution: &QpSolution) -> KktResiduals {
    let z = &solution.z;
    let lam = &solution.multipliers;
    let mu_lo = &solution.lower_multipliers;
    let mu_up = &solution.upper_multipliers;

    let mut grad = &problem.hessian * z + &problem.gradient;
    if problem.num_inequalities() > 0 {
        grad += problem.ineq_matrix.transpose() * lam;
    }
    grad += mu_up - mu_lo;
    let stationarity = grad.amax();

    let mut primal = 0.0f64;
    let mut complementarity = 0.0f64;
    if problem.num_inequalities() > 0 {
        let slack = &problem.ineq_bound - &problem.ineq_matrix * z;
        for i in 0..slack.len() {
            primal = primal.max(-slack[i]);
            complementarity = complementarity.max((lam[i] * slack[i]).abs());
        }
    }
    for j in 0..z.len() {
        if problem.lower[j].is_finite() {
            let s = z[j] - problem.lower[j];
            primal = primal.max(-s);
            complementarity = complementarity.max((mu_lo[j] * s).abs());
        }
        if problem.upper[j].is_finite() {
            let s = problem.upper[j] - z[j];
            primal = primal.max(-s);
            complementarity = complementarity.max((mu_up[j] * s).abs());
        }
    }
    let dual = lam
        .iter()
        .chain(mu_lo.iter())
        .chain(mu_up.iter())
        .fold(0.0f64, |acc, &v| acc.max(-v));

    KktResiduals {
        stationarity,
        primal,
        dual,
        complementarity,
    }
}

/// Largest of the stationarity, primal, dual and complementarity residuals.
pub fn check_kkt(problem: &QuadProgram, solution: &QpSolution) -> f64 {
    kkt_residuals(problem, solution).max()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Origin {
    Row(usize),
    Lower(usize),
    Upper(usize),
}

/// All constraints of the working problem as `a' z <= b`.
struct ConstraintSet {
    normals: DMatrix<f64>,
    bounds: Vec<f64>,
    origin: Vec<Origin>,
}

impl ConstraintSet {
    fn build(problem: &QuadProgram) -> Self {
        let n = problem.num_variables();
        let mut rows: Vec<(Vec<(usize, f64)>, f64, Origin)> = Vec::new();
        for i in 0..problem.num_inequalities() {
            let entries = (0..n).map(|j| (j, problem.ineq_matrix[(i, j)])).collect();
            rows.push((entries, problem.ineq_bound[i], Origin::Row(i)));
        }
        for j in 0..n {
            if problem.lower[j].is_finite() {
                rows.push((vec![(j, -1.0)], -problem.lower[j], Origin::Lower(j)));
            }
            if problem.upper[j].is_finite() {
                rows.push((vec![(j, 1.0)], problem.upper[j], Origin::Upper(j)));
            }
        }
        let mut normals = DMatrix::zeros(rows.len(), n);
        let mut bounds = Vec::with_capacity(rows.len());
        let mut origin = Vec::with_capacity(rows.len());
        for (i, (entries, b, o)) in rows.into_iter().enumerate() {
            for (j, v) in entries {
                normals[(i, j)] = v;
            }
            bounds.push(b);
            origin.push(o);
        }
        Self {
            normals,
            bounds,
            origin,
        }
    }

    /// `a_i' z - b_i`, positive when row `i` is violated.
    fn violation(&self, i: usize, z: &DVector<f64>) -> f64 {
        self.normals.row(i).dot(&z.transpose()) - self.bounds[i]
    }

    /// Rounding allowance for row `i` at `z`.
    fn rounding(&self, i: usize, z: &DVector<f64>) -> f64 {
        let a = self.normals.row(i);
        1e-13 * (1.0 + self.bounds[i].abs() + a.amax() * z.amax())
    }

    fn len(&self) -> usize {
        self.bounds.len()
    }
}

struct ActiveSetOutcome {
    z: DVector<f64>,
    working: Vec<usize>,
    multipliers: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Minimizer of the equality-constrained subproblem on the working set,
/// returned as the step `p` and the working-set multipliers.
fn working_set_step(
    chol: &Cholesky<f64, Dyn>,
    cons: &ConstraintSet,
    working: &[usize],
    grad: &DVector<f64>,
) -> Option<(DVector<f64>, Vec<f64>)> {
    let p_free = -chol.solve(grad);
    if working.is_empty() {
        return Some((p_free, Vec::new()));
    }
    let n = grad.len();
    let w = working.len();
    let mut a_w = DMatrix::zeros(w, n);
    for (r, &i) in working.iter().enumerate() {
        a_w.set_row(r, &cons.normals.row(i));
    }
    let y = chol.solve(&a_w.transpose());
    let schur = &a_w * &y;
    let rhs = &a_w * &p_free;
    let lam = match Cholesky::new(schur.clone()) {
        Some(c) => c.solve(&rhs),
        None => schur.lu().solve(&rhs)?,
    };
    let p = p_free - y * &lam;
    Some((p, lam.iter().copied().collect()))
}

fn run_active_set(
    hessian: &DMatrix<f64>,
    gradient: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
    cons: &ConstraintSet,
    mut z: DVector<f64>,
    mut working: Vec<usize>,
    max_iter: usize,
    iterations_used: usize,
) -> ActiveSetOutcome {
    let objective = |z: &DVector<f64>| 0.5 * z.dot(&(hessian * z)) + gradient.dot(z);
    let mut iterations = iterations_used;
    let mut at_subspace_min = false;
    let mut last_obj = objective(&z);
    let mut in_working = vec![false; cons.len()];
    for &i in &working {
        in_working[i] = true;
    }

    while iterations < max_iter {
        iterations += 1;
        let grad = hessian * &z + gradient;
        let Some((p, lam)) = working_set_step(chol, cons, &working, &grad) else {
            break;
        };
        let z_scale = 1.0 + z.amax();
        if at_subspace_min || p.amax() <= 1e-14 * z_scale {
            let dual_tol = 1e-12 * (1.0 + grad.amax());
            let most_negative = lam
                .iter()
                .enumerate()
                .filter(|(_, &l)| l < -dual_tol)
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k);
            match most_negative {
                None => {
                    return ActiveSetOutcome {
                        z,
                        working,
                        multipliers: lam,
                        iterations,
                        converged: true,
                    }
                }
                Some(k) => {
                    in_working[working[k]] = false;
                    working.remove(k);
                    at_subspace_min = false;
                    continue;
                }
            }
        }

        // ratio test over constraints outside the working set
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..cons.len() {
            if in_working[i] {
                continue;
            }
            let a = cons.normals.row(i);
            let ap = a.dot(&p.transpose());
            if ap <= 1e-10 * a.amax() * p.amax() {
                continue;
            }
            let slack = (cons.bounds[i] - a.dot(&z.transpose())).max(0.0);
            let ratio = slack / ap;
            if ratio < alpha {
                alpha = ratio;
                blocking = Some(i);
            }
        }
        z += alpha * &p;
        let obj = objective(&z);
        if obj > last_obj + 1e-9 * (1.0 + last_obj.abs()) {
            eprintln!(
                "working {:?} blocking {:?} alpha {alpha:e} at_min {at_subspace_min}",
                working, blocking
            );
            eprintln!("p {:?}", p.as_slice());
            eprintln!("grad {:?}", grad.as_slice());
            eprintln!(
                "grad.p {:e}  pHp {:e}",
                grad.dot(&p),
                p.dot(&(hessian * &p))
            );
            eprintln!("lam {:?}", lam);
            for &i in &working {
                eprintln!(
                    "row {i} origin {:?} a.p {:e}",
                    cons.origin[i],
                    cons.normals.row(i).dot(&p.transpose())
                );
            }
        }
        debug_assert!(
            obj <= last_obj + 1e-9 * (1.0 + last_obj.abs()),
            "active-set objective increased: {last_obj} -> {obj}"
        );
        last_obj = obj;
        match blocking {
            Some(i) => {
                working.push(i);
                in_working[i] = true;
                at_subspace_min = false;
            }
            None => at_subspace_min = true,
        }
    }
    let grad = hessian * &z + gradient;
    let multipliers = working_set_step(chol, cons, &working, &grad)
        .map(|(_, lam)| lam)
        .unwrap_or_else(|| vec![0.0; working.len()]);
    ActiveSetOutcome {
        z,
        working,
        multipliers,
        iterations,
        converged: false,
    }
}

enum Projection {
    Feasible {
        z: DVector<f64>,
        active: Vec<usize>,
        iterations: usize,
    },
    Infeasible {
        z: DVector<f64>,
        iterations: usize,
    },
    IterationLimit {
        z: DVector<f64>,
        iterations: usize,
    },
}

/// Dual active-set projection of `z0` onto `{z : a_i' z <= b_i}`.
///
/// Each outer pass picks the most violated row and moves along the part of
/// its normal orthogonal to the active normals, dropping active rows whose
/// multipliers would turn negative on the way.
fn project_feasible(cons: &ConstraintSet, z0: DVector<f64>, max_iter: usize) -> Projection {
    let n = z0.len();
    let mut z = z0;
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let mut iterations = 0;

    loop {
        let most_violated = (0..cons.len())
            .filter(|&i| !active.contains(&i))
            .map(|i| (i, cons.violation(i, &z)))
            .filter(|&(i, v)| v > cons.rounding(i, &z))
            .max_by(|a, b| {
                let sa = a.1 / cons.normals.row(a.0).norm();
                let sb = b.1 / cons.normals.row(b.0).norm();
                sa.total_cmp(&sb)
            });
        let Some((p, _)) = most_violated else {
            return Projection::Feasible {
                z,
                active,
                iterations,
            };
        };
        let a_p: DVector<f64> = cons.normals.row(p).transpose();
        let mut mult_p = 0.0;

        loop {
            if iterations >= max_iter {
                return Projection::IterationLimit { z, iterations };
            }
            iterations += 1;
            // split a_p into its component in span(active normals) and the rest
            let (dir, r) = if active.is_empty() {
                (a_p.clone(), DVector::zeros(0))
            } else {
                let mut a_w = DMatrix::zeros(active.len(), n);
                for (k, &i) in active.iter().enumerate() {
                    a_w.set_row(k, &cons.normals.row(i));
                }
                let gram = &a_w * a_w.transpose();
                let rhs = &a_w * &a_p;
                let r = match Cholesky::new(gram.clone()) {
                    Some(c) => c.solve(&rhs),
                    None => match gram.lu().solve(&rhs) {
                        Some(r) => r,
                        None => return Projection::IterationLimit { z, iterations },
                    },
                };
                (&a_p - a_w.transpose() * &r, r)
            };
            let dependent = dir.norm() <= 1e-12 * a_p.norm();

            // raising the multiplier of p by t moves z by -t dir and the
            // active multipliers by -t r
            let mut partial = f64::INFINITY;
            let mut drop = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 0.0 {
                    let t = mult[k] / rk;
                    if t < partial {
                        partial = t;
                        drop = Some(k);
                    }
                }
            }
            let full = if dependent {
                f64::INFINITY
            } else {
                cons.violation(p, &z).max(0.0) / dir.norm_squared()
            };
            if partial.is_infinite() && full.is_infinite() {
                return Projection::Infeasible { z, iterations };
            }
            let t = partial.min(full);
            if !dependent {
                z -= t * &dir;
            }
            for (k, &rk) in r.iter().enumerate() {
                mult[k] = (mult[k] - t * rk).max(0.0);
            }
            mult_p += t;
            if full <= partial {
                active.push(p);
                mult.push(mult_p);
                break;
            }
            let k = drop.expect("finite partial step has a blocking multiplier");
            active.remove(k);
            mult.remove(k);
        }
    }
}

/// Solves a strictly convex QP.
///
/// `warm_start` only affects the starting point: it is clipped into the box
/// and projected onto the feasible set.
pub fn solve_qp(
    problem: &QuadProgram,
    warm_start: Option<&DVector<f64>>,
    settings: &QpSettings,
) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let n = problem.num_variables();
    let chol_h = Cholesky::new(problem.hessian.clone()).ok_or(QpError::NotPositiveDefinite)?;

    let mut z0 = match warm_start {
        Some(w) if w.len() == n => w.clone(),
        Some(w) => {
            return Err(QpError::Dimension(format!(
                "warm start has length {}, expected {n}",
                w.len()
            )))
        }
        None => DVector::zeros(n),
    };
    for j in 0..n {
        z0[j] = z0[j].clamp(problem.lower[j], problem.upper[j]);
    }
    let cons = ConstraintSet::build(problem);
    let (start, start_working, mut iterations, infeasible) =
        match project_feasible(&cons, z0, settings.max_iter) {
            Projection::Feasible {
                z,
                active,
                iterations,
            } => (z, active, iterations, false),
            Projection::Infeasible { z, iterations } => (z, Vec::new(), iterations, true),
            Projection::IterationLimit { z, iterations } => (z, Vec::new(), iterations, false),
        };

    let mut converged = false;
    let mut z = start;
    let mut working_mult: Vec<(usize, f64)> = Vec::new();
    if !infeasible && iterations < settings.max_iter {
        let out = run_active_set(
            &problem.hessian,
            &problem.gradient,
            &chol_h,
            &cons,
            z,
            start_working,
            settings.max_iter,
            iterations,
        );
        iterations = out.iterations;
        converged = out.converged;
        z = out.z;
        working_mult = out.working.iter().copied().zip(out.multipliers).collect();
    }

    let m = problem.num_inequalities();
    let mut multipliers = DVector::zeros(m);
    let mut lower_multipliers = DVector::zeros(n);
    let mut upper_multipliers = DVector::zeros(n);
    for (i, lam) in working_mult {
        match cons.origin[i] {
            Origin::Row(r) => multipliers[r] = lam,
            Origin::Lower(j) => lower_multipliers[j] = lam,
            Origin::Upper(j) => upper_multipliers[j] = lam,
        }
    }
    let mut solution = QpSolution {
        objective: problem.objective(&z),
        z,
        multipliers,
        lower_multipliers,
        upper_multipliers,
        status: QpStatus::Optimal,
        iterations,
        kkt_residual: 0.0,
    };
    solution.kkt_residual = check_kkt(problem, &solution);
    solution.status = if infeasible {
        QpStatus::Infeasible
    } else if !converged || solution.kkt_residual > settings.tol {
        QpStatus::IterationLimit
    } else {
        QpStatus::Optimal
    };
    Ok(solution)
}
