//! Trajectory-level calibration of the polynomial operators.
//!
//! Minimizes `sum_i sum_j |s~_j^i - s_j^i|^2` over the entries of `A`, `H`,
//! `B`, where `s~` follows the explicit Euler recursion
//! `s~_{j+1} = s~_j + dt * theta(s~_j, u_j)` from the data's initial state.
//! Gradients come from the discrete adjoint of that recursion; the optimizer
//! is L-BFGS with Armijo backtracking.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};

use crate::deim::DeimOperators;
use crate::fom::Control;
use crate::opinf::{input_vector, sym_kron, sym_kron_jacobian_product, RomOperators};
use crate::{Error, Result};

/// `A s + H sym_kron(s) + B u + f_deim(s, R)`
pub fn theta(ops: &RomOperators, deim: Option<&DeimOperators>, s: &DVector<f64>, u: &Control) -> Result<DVector<f64>> {
    let mut out = &ops.a * s;
    if ops.h.ncols() > 0 {
        out += &ops.h * sym_kron(s);
    }
    if ops.b.ncols() > 0 {
        out += &ops.b * input_vector(u);
    }
    if let Some(d) = deim {
        out += d.reduced_arrhenius(s, u.heat_load)?;
    }
    Ok(out)
}

/// `d theta / d s`
pub fn theta_jacobian(
    ops: &RomOperators,
    deim: Option<&DeimOperators>,
    s: &DVector<f64>,
    u: &Control,
) -> Result<DMatrix<f64>> {
    let mut jac = ops.a.clone();
    if ops.h.ncols() > 0 {
        jac += sym_kron_jacobian_product(&ops.h, s);
    }
    if let Some(d) = deim {
        jac += d.reduced_arrhenius_jacobian(s, u.heat_load)?;
    }
    Ok(jac)
}

/// Explicit Euler rollout; returns the r x (k+1) trajectory `s~_0 .. s~_k`.
/// `controls[j]` drives the step from `j` to `j + 1`.
pub fn forward_rollout(
    ops: &RomOperators,
    deim: Option<&DeimOperators>,
    s0: &DVector<f64>,
    controls: &[Control],
    dt: f64,
    k: usize,
) -> Result<DMatrix<f64>> {
    let r = ops.r();
    if s0.len() != r {
        return Err(Error::Dimension(format!(
            "initial state has length {}, operators are rank {r}",
            s0.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    if controls.len() < k {
        return Err(Error::Dimension(format!("{} controls for {k} steps", controls.len())));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    let mut out = DMatrix::zeros(r, k + 1);
    out.set_column(0, s0);
    let mut s = s0.clone();
    for j in 0..k {
        let f = theta(ops, deim, &s, &controls[j]).map_err(|e| step_error(j + 1, e))?;
        s.axpy(dt, &f, 1.0);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "reduced state became non-finite at step {}",
                j + 1
            )));
        }
        out.set_column(j + 1, &s);
    }
    Ok(out)
}

fn step_error(step: usize, e: Error) -> Error {
    match e {
        Error::Domain(m) => Error::Domain(format!("step {step}: {m}")),
        other => other,
    }
}

/// Reduced data for calibration: one r x (k_i + 1) matrix per trajectory with
/// aligned controls.
#[derive(Debug)]
pub struct CalibrationProblem {
    pub trajectories: Vec<DMatrix<f64>>,
    pub controls: Vec<Vec<Control>>,
    pub dt: f64,
    pub deim: Option<DeimOperators>,
    pub include_quadratic: bool,
    pub include_input: bool,
    /// Keep `A` symmetric (iterate and gradient projected).
    pub symmetric_a: bool,
    forward_sweeps: AtomicUsize,
    backward_sweeps: AtomicUsize,
}

impl CalibrationProblem {
    pub fn new(
        trajectories: Vec<DMatrix<f64>>,
        controls: Vec<Vec<Control>>,
        dt: f64,
        deim: Option<DeimOperators>,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Config("calibration needs at least one trajectory".into()));
        }
        if trajectories.len() != controls.len() {
            return Err(Error::Dimension("trajectory and control counts differ".into()));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let r = trajectories[0].nrows();
        for (i, (t, c)) in trajectories.iter().zip(&controls).enumerate() {
            if t.nrows() != r {
                return Err(Error::Dimension(format!(
                    "trajectory {i} has {} rows, expected {r}",
                    t.nrows()
                )));
            }
            if t.ncols() < 2 {
                return Err(Error::Config(format!("trajectory {i} has fewer than two states")));
            }
            if c.len() != t.ncols() {
                return Err(Error::Dimension(format!(
                    "trajectory {i}: {} states but {} controls",
                    t.ncols(),
                    c.len()
                )));
            }
        }
        if let Some(d) = &deim {
            if d.rank() != r {
                return Err(Error::Dimension(format!(
                    "DEIM rank {} differs from state rank {r}",
                    d.rank()
                )));
            }
        }
        Ok(Self {
            trajectories,
            controls,
            dt,
            deim,
            include_quadratic: true,
            include_input: true,
            symmetric_a: false,
            forward_sweeps: AtomicUsize::new(0),
            backward_sweeps: AtomicUsize::new(0),
        })
    }

    pub fn with_terms(mut self, include_quadratic: bool, include_input: bool) -> Self {
        self.include_quadratic = include_quadratic;
        self.include_input = include_input;
        self
    }

    pub fn rank(&self) -> usize {
        self.trajectories[0].nrows()
    }

    /// (forward, backward) sweeps performed so far.
    pub fn sweep_counts(&self) -> (usize, usize) {
        (
            self.forward_sweeps.load(Ordering::Relaxed),
            self.backward_sweeps.load(Ordering::Relaxed),
        )
    }

    pub fn reset_counters(&self) {
        self.forward_sweeps.store(0, Ordering::Relaxed);
        self.backward_sweeps.store(0, Ordering::Relaxed);
    }

    /// 1.0 for optimized parameters, 0.0 for blocks switched off.
    pub fn free_mask(&self, ops: &RomOperators) -> DVector<f64> {
        let (na, nh) = (ops.a.len(), ops.h.len());
        DVector::from_fn(ops.num_params(), |i, _| {
            let on = if i < na {
                true
            } else if i < na + nh {
                self.include_quadratic
            } else {
                self.include_input
            };
            if on {
                1.0
            } else {
                0.0
            }
        })
    }

    fn check_ops(&self, ops: &RomOperators) -> Result<()> {
        ops.validate()?;
        if ops.r() != self.rank() {
            return Err(Error::Dimension(format!(
                "operators are rank {}, data rank {}",
                ops.r(),
                self.rank()
            )));
        }
        Ok(())
    }

    fn rollout(&self, ops: &RomOperators, i: usize) -> Result<DMatrix<f64>> {
        self.forward_sweeps.fetch_add(1, Ordering::Relaxed);
        let data = &self.trajectories[i];
        forward_rollout(
            ops,
            self.deim.as_ref(),
            &data.column(0).into_owned(),
            &self.controls[i],
            self.dt,
            data.ncols() - 1,
        )
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("trajectory {i}: {m}")),
            Error::Domain(m) => Error::Domain(format!("trajectory {i}: {m}")),
            other => other,
        })
    }

    /// Objective value, or the first rollout failure.
    pub fn try_objective(&self, ops: &RomOperators) -> Result<f64> {
        self.check_ops(ops)?;
        let mut total = 0.0;
        for i in 0..self.trajectories.len() {
            let sim = self.rollout(ops, i)?;
            total += (sim - &self.trajectories[i]).norm_squared();
        }
        Ok(total)
    }
}

/// Sum of squared trajectory mismatches; `+inf` (with a logged diagnostic)
/// when a rollout fails.
pub fn objective(ops: &RomOperators, problem: &CalibrationProblem) -> f64 {
    match problem.try_objective(ops) {
        Ok(v) => v,
        Err(e) => {
            warn!("objective evaluation failed: {e}");
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub objective: f64,
    /// Same shapes as the operators.
    pub grad: RomOperators,
}

/// Discrete adjoint gradient with respect to every entry of `A`, `H`, `B`.
/// One forward and one backward sweep per trajectory.
pub fn adjoint_gradient(ops: &RomOperators, problem: &CalibrationProblem) -> Result<Gradient> {
    problem.check_ops(ops)?;
    let r = ops.r();
    let dt = problem.dt;
    let deim = problem.deim.as_ref();
    let mut grad = RomOperators {
        a: DMatrix::zeros(r, r),
        h: DMatrix::zeros(r, ops.h.ncols()),
        b: DMatrix::zeros(r, ops.b.ncols()),
    };
    let mut total = 0.0;
    for i in 0..problem.trajectories.len() {
        let sim = problem.rollout(ops, i)?;
        problem.backward_sweeps.fetch_add(1, Ordering::Relaxed);
        let data = &problem.trajectories[i];
        let controls = &problem.controls[i];
        let k = data.ncols() - 1;
        let diff = &sim - data;
        total += diff.norm_squared();
        let mut mu: DVector<f64> = diff.column(k) * 2.0;
        for j in (0..k).rev() {
            let s = sim.column(j).into_owned();
            let u = &controls[j];
            let w = &mu * dt;
            grad.a.ger(1.0, &w, &s, 1.0);
            if grad.h.ncols() > 0 {
                grad.h.ger(1.0, &w, &sym_kron(&s), 1.0);
            }
            if grad.b.ncols() > 0 {
                grad.b.ger(1.0, &w, &input_vector(u), 1.0);
            }
            if j > 0 {
                let jac = theta_jacobian(ops, deim, &s, u)?;
                let back = &mu + jac.tr_mul(&mu) * dt;
                mu = back + diff.column(j) * 2.0;
            }
        }
    }
    Ok(Gradient { objective: total, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Relative to the initial gradient norm.
    pub gradient_tolerance: f64,
    /// Trial step of the very first iteration, in parameter-norm units.
    pub initial_step: f64,
    pub line_search_shrink: f64,
    pub line_search_max_backtracks: usize,
    pub history_size: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Recompute the Gauss-Newton preconditioner every this many
    /// iterations; 0 uses the scaled identity instead.
    pub gauss_newton_refresh: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            initial_step: 1e-3,
            line_search_shrink: 0.5,
            line_search_max_backtracks: 40,
            history_size: 10,
            armijo: 1e-4,
            gauss_newton_refresh: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.max_iterations > 0
            && self.gradient_tolerance > 0.0
            && self.initial_step > 0.0
            && self.line_search_max_backtracks > 0
            && self.history_size > 0;
        if !positive {
            return Err(Error::Config("optimizer settings must all be positive".into()));
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err(Error::Config(format!(
                "line search shrink factor must lie in (0, 1), got {}",
                self.line_search_shrink
            )));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::Config(format!(
                "Armijo constant must lie in (0, 1), got {}",
                self.armijo
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    /// Accepted step multiplier; 0 for the initial point.
    pub step_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    pub final_gradient_norm: f64,
    pub termination: Termination,
}

impl ConvergenceReport {
    pub fn objective_history(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.objective).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,objective,gradient_norm,step_length\n");
        for h in &self.history {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e}",
                h.iteration, h.objective, h.gradient_norm, h.step_length
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn symmetrize_a(v: &mut DVector<f64>, r: usize) {
    for i in 0..r {
        for j in i + 1..r {
            let m = 0.5 * (v[i * r + j] + v[j * r + i]);
            v[i * r + j] = m;
            v[j * r + i] = m;
        }
    }
}

/// Projected gradient in parameter order.
fn flat_gradient(problem: &CalibrationProblem, g: &Gradient, mask: &DVector<f64>) -> DVector<f64> {
    let mut v = g.grad.to_params().component_mul(mask);
    if problem.symmetric_a {
        symmetrize_a(&mut v, problem.rank());
    }
    v
}

/// L-BFGS two-loop recursion: returns `-H g`. The initial inverse Hessian
/// is `precond` when given, else `(s.y / y.y) I`.
fn lbfgs_direction(
    g: &DVector<f64>,
    memory: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
    precond: Option<&DMatrix<f64>>,
) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    match (precond, memory.back()) {
        (Some(m), _) => q = m * q,
        (None, Some((s, y, _))) => q *= s.dot(y) / y.dot(y),
        (None, None) => {}
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

/// Inverse of the Gauss-Newton matrix `2 sum_j S_j^T S_j` over the free
/// parameters, where `S_j = d s~_j / d params` comes from a forward
/// sensitivity sweep. Fixed parameters get zero rows and columns.
fn gauss_newton_preconditioner(
    ops: &RomOperators,
    problem: &CalibrationProblem,
    mask: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let r = ops.r();
    let (q, p) = (ops.q(), ops.p());
    let free: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] != 0.0).collect();
    // parameter -> (row of theta, feature index in [s; kron(s); u])
    let target: Vec<(usize, usize)> = free
        .iter()
        .map(|&k| {
            if k < r * r {
                (k / r, k % r)
            } else if k < r * r + r * q {
                let k = k - r * r;
                (k / q, r + k % q)
            } else {
                let k = k - r * r - r * q;
                (k / p, r + q + k % p)
            }
        })
        .collect();
    let nf = free.len();
    let mut gn = DMatrix::<f64>::zeros(nf, nf);
    let dt = problem.dt;
    for i in 0..problem.trajectories.len() {
        let sim = problem.rollout(ops, i)?;
        let controls = &problem.controls[i];
        let mut sens = DMatrix::<f64>::zeros(r, nf);
        for j in 0..sim.ncols() - 1 {
            let s = sim.column(j).into_owned();
            let u = &controls[j];
            let mut features = s.clone().resize_vertically(r + q + p, 0.0);
            features.rows_mut(r, q).copy_from(&sym_kron(&s));
            features.rows_mut(r + q, p).copy_from(&input_vector(u).rows(0, p));
            let jac = theta_jacobian(ops, problem.deim.as_ref(), &s, u)?;
            let mut step = &jac * &sens;
            for (c, &(row, f)) in target.iter().enumerate() {
                step[(row, c)] += features[f];
            }
            sens += step * dt;
            gn.gemm_tr(2.0, &sens, &sens, 1.0);
        }
    }
    let scale = gn.diagonal().max().max(f64::MIN_POSITIVE);
    let mut damping = 1e-12 * scale;
    let inv = loop {
        let damped = &gn + DMatrix::identity(nf, nf) * damping;
        if let Some(ch) = damped.cholesky() {
            break ch.inverse();
        }
        damping *= 100.0;
        if damping > scale {
            return Err(Error::Numeric("Gauss-Newton matrix is not positive definite".into()));
        }
    };
    let mut full = DMatrix::zeros(mask.len(), mask.len());
    for (a, &ia) in free.iter().enumerate() {
        for (b, &ib) in free.iter().enumerate() {
            full[(ia, ib)] = inv[(a, b)];
        }
    }
    Ok(full)
}

/// Starts from `initial` and descends the trajectory objective. Every
/// accepted iterate satisfies the Armijo condition, so the objective history
/// is non-increasing.
pub fn calibrate(
    initial: &RomOperators,
    problem: &CalibrationProblem,
    opt: &OptimizerConfig,
) -> Result<(RomOperators, ConvergenceReport)> {
    opt.validate()?;
    problem.check_ops(initial)?;
    let r = problem.rank();
    let mask = problem.free_mask(initial);
    let mut x = initial.to_params().component_mul(&mask);
    if problem.symmetric_a {
        symmetrize_a(&mut x, r);
    }
    let mut ops = initial.with_params(&x);
    let first = adjoint_gradient(&ops, problem).map_err(|e| {
        Error::Numeric(format!(
            "initial operators give a non-finite objective ({e}); increase the Tikhonov lambda of the inference stage"
        ))
    })?;
    let mut f = first.objective;
    if !f.is_finite() {
        return Err(Error::Numeric(
            "initial objective is not finite; increase the Tikhonov lambda of the inference stage".into(),
        ));
    }
    let mut g = flat_gradient(problem, &first, &mask);
    let g0 = g.norm();
    let mut history = vec![IterationRecord {
        iteration: 0,
        objective: f,
        gradient_norm: g0,
        step_length: 0.0,
    }];
    let mut memory: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let tol = opt.gradient_tolerance * g0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    let mut precond: Option<DMatrix<f64>> = None;
    info!("calibration start: objective {f:.6e}, gradient norm {g0:.6e}");
    if g0 == 0.0 || f == 0.0 {
        termination = Termination::GradientTolerance;
    }
    while termination == Termination::MaxIterations && iterations < opt.max_iterations {
        if opt.gauss_newton_refresh > 0 && (precond.is_none() || iterations % opt.gauss_newton_refresh == 0) {
            precond = Some(gauss_newton_preconditioner(&ops, problem, &mask)?);
        }
        let mut d = lbfgs_direction(&g, &memory, precond.as_ref());
        if problem.symmetric_a {
            symmetrize_a(&mut d, r);
        }
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            debug!("iteration {iterations}: not a descent direction, resetting memory");
            memory.clear();
            d = -g.clone();
            slope = g.dot(&d);
        }
        let mut alpha = if memory.is_empty() && precond.is_none() {
            (opt.initial_step * (1.0 + x.norm()) / d.norm()).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..opt.line_search_max_backtracks {
            let trial = &x + &d * alpha;
            let trial_ops = initial.with_params(&trial);
            if let Ok(tg) = adjoint_gradient(&trial_ops, problem) {
                if tg.objective.is_finite() && tg.objective <= f + opt.armijo * alpha * slope {
                    accepted = Some((trial, trial_ops, tg));
                    break;
                }
            }
            alpha *= opt.line_search_shrink;
        }
        let Some((x_new, ops_new, g_new)) = accepted else {
            if memory.is_empty() && precond.is_none() {
                termination = Termination::LineSearchFailure;
                break;
            }
            precond = None;
            debug!("iteration {iterations}: line search failed, retrying along the gradient");
            memory.clear();
            continue;
        };
        iterations += 1;
        let grad_new = flat_gradient(problem, &g_new, &mask);
        let s = &x_new - &x;
        let y = &grad_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if memory.len() == opt.history_size {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        ops = ops_new;
        f = g_new.objective;
        g = grad_new;
        let gn = g.norm();
        history.push(IterationRecord {
            iteration: iterations,
            objective: f,
            gradient_norm: gn,
            step_length: alpha,
        });
        if iterations % 100 == 0 {
            debug!("iteration {iterations}: objective {f:.6e}, gradient norm {gn:.3e}");
        }
        if gn <= tol || f == 0.0 {
            termination = Termination::GradientTolerance;
        }
    }
    let final_gradient_norm = g.norm();
    info!(
        "calibration end after {iterations} iterations ({termination:?}): objective {f:.6e}, gradient norm {final_gradient_norm:.3e}"
    );
    Ok((
        ops,
        ConvergenceReport {
            iterations,
            history,
            final_gradient_norm,
            termination,
        },
    ))
}
