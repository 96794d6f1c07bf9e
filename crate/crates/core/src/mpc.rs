//! Receding-horizon control on a lifted linear model.
//!
//! The latent states over the horizon are eliminated through the dynamics,
//! leaving a dense box-constrained QP in the stacked inputs
//! `û = (û_t, …, û_{t+H})`:
//!
//! ```text
//! Σ_{k=0..H} (z_k - r_k)ᵀ Q (z_k - r_k) + û_kᵀ R û_k  =  ½ ûᵀ P û + qᵀ û + c
//! ```
//!
//! which [`solve_box_qp`] minimizes by accelerated projected gradient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{NormalizationStats, PRESSURE_MAX, PRESSURE_MIN};
use crate::error::{Error, Result};
use crate::linalg::{dot, power_iteration, symmetric_eigenvalues, Cholesky, Matrix};
use crate::math;
use crate::plant::Plant;
use crate::{Control, State, CONTROL_DIM, STATE_DIM};

/// A model the controller can plan with: a lifting of normalized states and
/// linear latent dynamics `z' = A z + B u`.
pub trait LiftedModel {
    fn latent_dim(&self) -> usize;
    /// Lifts a normalized state.
    fn lift(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Maps a latent state back to a normalized state.
    fn unlift(&self, z: &[f64]) -> Result<Vec<f64>>;
    fn state_matrix(&self) -> &Matrix;
    fn input_matrix(&self) -> &Matrix;
    fn stats(&self) -> &NormalizationStats;
}

impl LiftedModel for crate::koopman::KoopmanModel {
    fn latent_dim(&self) -> usize {
        crate::koopman::KoopmanModel::latent_dim(self)
    }

    fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encode(x)
    }

    fn unlift(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decode(z)
    }

    fn state_matrix(&self) -> &Matrix {
        self.a()
    }

    fn input_matrix(&self) -> &Matrix {
        self.b()
    }

    fn stats(&self) -> &NormalizationStats {
        crate::koopman::KoopmanModel::stats(self)
    }
}

impl<M: LiftedModel + ?Sized> LiftedModel for &M {
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }
    fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).lift(x)
    }
    fn unlift(&self, z: &[f64]) -> Result<Vec<f64>> {
        (**self).unlift(z)
    }
    fn state_matrix(&self) -> &Matrix {
        (**self).state_matrix()
    }
    fn input_matrix(&self) -> &Matrix {
        (**self).input_matrix()
    }
    fn stats(&self) -> &NormalizationStats {
        (**self).stats()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Latent deviation weight, n × n.
    pub q: Matrix,
    /// Input weight, 9 × 9.
    pub r: Matrix,
    /// Input bounds in normalized units.
    pub u_min: Control,
    pub u_max: Control,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
}

impl MpcConfig {
    /// `Q = q_weight · I`, `R = r_weight · I`, bounds converted from the
    /// physical pressure range with `stats`.
    pub fn diagonal(
        latent_dim: usize,
        horizon: usize,
        q_weight: f64,
        r_weight: f64,
        stats: &NormalizationStats,
    ) -> Self {
        MpcConfig {
            horizon,
            q: Matrix::identity(latent_dim).scaled(q_weight),
            r: Matrix::identity(CONTROL_DIM).scaled(r_weight),
            u_min: stats.normalize_control(&[PRESSURE_MIN; CONTROL_DIM]),
            u_max: stats.normalize_control(&[PRESSURE_MAX; CONTROL_DIM]),
            solver_tol: 1e-6,
            solver_max_iters: 5000,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.q.rows()
    }

    pub fn validate(&self) -> Result<()> {
        check_psd("Q", &self.q)?;
        check_psd("R", &self.r)?;
        Error::check_dim("R rows", CONTROL_DIM, self.r.rows())?;
        if self.u_min.iter().zip(&self.u_max).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidConfig("input bounds need u_min < u_max elementwise".into()));
        }
        if !(self.solver_tol > 0.0) || self.solver_max_iters == 0 {
            return Err(Error::InvalidConfig("solver tolerance and iteration limit must be positive".into()));
        }
        Ok(())
    }
}

/// Latent weight `q·CᵀC + q·ε·I`, where `C` is the least-squares linear
/// readout from latent to normalized state over `states` (normalized). The
/// cost then penalizes the part of the latent error that shows up in the tip
/// position; `ε` keeps the weight strictly positive definite.
pub fn readout_weight<M: LiftedModel + ?Sized>(model: &M, states: &[State], q: f64, eps: f64) -> Result<Matrix> {
    let n = model.latent_dim();
    if states.len() < n {
        return Err(Error::InvalidArgument(format!(
            "readout fit needs at least {n} states, got {}",
            states.len()
        )));
    }
    if !(q >= 0.0) || !(eps >= 0.0) {
        return Err(Error::InvalidConfig("readout weight scales must be non-negative".into()));
    }
    let mut zz = Matrix::zeros(n, n);
    let mut zx = Matrix::zeros(n, STATE_DIM);
    for x in states {
        let z = model.lift(x)?;
        for i in 0..n {
            for j in 0..n {
                zz.set(i, j, zz.get(i, j) + z[i] * z[j]);
            }
            for j in 0..STATE_DIM {
                zx.set(i, j, zx.get(i, j) + z[i] * x[j]);
            }
        }
    }
    let scale = zz.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        zz.set(i, i, zz.get(i, i) + 1e-12 * scale);
    }
    let chol = Cholesky::new(&zz).ok_or_else(|| Error::FitFailed("latent Gram matrix is not positive definite".into()))?;
    let mut c = Matrix::zeros(STATE_DIM, n);
    for j in 0..STATE_DIM {
        let col: Vec<f64> = (0..n).map(|i| zx.get(i, j)).collect();
        for (i, w) in chol.solve(&col).into_iter().enumerate() {
            c.set(j, i, w);
        }
    }
    let mut w = c.transpose().matmul(&c)?.scaled(q);
    for i in 0..n {
        w.set(i, i, w.get(i, i) + q * eps);
        for j in 0..i {
            let v = 0.5 * (w.get(i, j) + w.get(j, i));
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("readout weight"));
    }
    Ok(w)
}

fn check_psd(name: &str, m: &Matrix) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(Error::InvalidConfig(format!("{name} must be square")));
    }
    if !m.is_finite() || m.max_asymmetry() > 1e-12 {
        return Err(Error::InvalidConfig(format!("{name} must be finite and symmetric")));
    }
    let lowest = symmetric_eigenvalues(m)?.first().copied().unwrap_or(0.0);
    if lowest < -1e-10 {
        return Err(Error::InvalidConfig(format!(
            "{name} is not positive semi-definite (eigenvalue {lowest:e})"
        )));
    }
    Ok(())
}

/// `½ uᵀ P u + qᵀ u + c` subject to `lower ≤ u ≤ upper`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondensedQp {
    pub hessian: Matrix,
    pub gradient: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub constant: f64,
}

impl CondensedQp {
    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, u: &[f64]) -> f64 {
        let pu = self.hessian.matvec(u).expect("qp dimension");
        0.5 * dot(u, &pu) + dot(&self.gradient, u) + self.constant
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        Error::check_dim("qp hessian rows", n, self.hessian.rows())?;
        Error::check_dim("qp hessian cols", n, self.hessian.cols())?;
        Error::check_dim("qp lower bounds", n, self.lower.len())?;
        Error::check_dim("qp upper bounds", n, self.upper.len())?;
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument("qp lower bound exceeds upper bound".into()));
        }
        if !self.hessian.is_finite() || self.gradient.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("qp data"));
        }
        Ok(())
    }

    fn project(&self, u: &mut [f64]) {
        for ((v, lo), hi) in u.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

/// Eliminates the latent states of the horizon problem. `z_ref` holds the
/// H+1 latent references for k = 0..H.
pub fn build_condensed_qp(
    a: &Matrix,
    b: &Matrix,
    z_t: &[f64],
    z_ref: &[Vec<f64>],
    config: &MpcConfig,
) -> Result<CondensedQp> {
    let n = a.rows();
    let m = b.cols();
    let h = config.horizon;
    Error::check_dim("latent operator", n, a.cols())?;
    Error::check_dim("control matrix rows", n, b.rows())?;
    Error::check_dim("control dimension", CONTROL_DIM, m)?;
    Error::check_dim("Q dimension", n, config.q.rows())?;
    Error::check_dim("R dimension", m, config.r.rows())?;
    Error::check_dim("current latent state", n, z_t.len())?;
    Error::check_dim("reference length", h + 1, z_ref.len())?;
    for r in z_ref {
        Error::check_dim("reference latent state", n, r.len())?;
    }

    // Free response e_k = A^k z_t - r_k and impulse blocks M_d = A^d B.
    let mut free = Vec::with_capacity(h + 1);
    let mut zk = z_t.to_vec();
    for k in 0..=h {
        if k > 0 {
            zk = a.matvec(&zk)?;
        }
        free.push(zk.iter().zip(&z_ref[k]).map(|(x, r)| x - r).collect::<Vec<f64>>());
    }
    let mut impulse = Vec::with_capacity(h);
    if h > 0 {
        impulse.push(b.clone());
        for d in 1..h {
            let next = a.matmul(&impulse[d - 1])?;
            impulse.push(next);
        }
    }
    // Q M_d, reused across block products.
    let q_impulse: Vec<Matrix> = impulse.iter().map(|md| config.q.matmul(md)).collect::<Result<_>>()?;

    let dim = m * (h + 1);
    let mut hess = Matrix::zeros(dim, dim);
    let mut grad = vec![0.0; dim];

    // z_k depends on û_j for j < k through M_{k-1-j}.
    // P_ij = 2 Σ_{k > max(i,j)} M_{k-1-i}ᵀ Q M_{k-1-j} + 2 R δ_ij
    for i in 0..h {
        for j in i..h {
            let mut blk = Matrix::zeros(m, m);
            for k in (j + 1)..=h {
                let mi = &impulse[k - 1 - i];
                let qmj = &q_impulse[k - 1 - j];
                // blk += miᵀ qmj
                for r in 0..m {
                    for c in 0..m {
                        let mut s = 0.0;
                        for row in 0..n {
                            s += mi.get(row, r) * qmj.get(row, c);
                        }
                        blk.set(r, c, blk.get(r, c) + s);
                    }
                }
            }
            for r in 0..m {
                for c in 0..m {
                    let v = 2.0 * blk.get(r, c);
                    hess.set(i * m + r, j * m + c, v);
                    hess.set(j * m + c, i * m + r, v);
                }
            }
        }
    }
    for blk in 0..=h {
        for r in 0..m {
            for c in 0..m {
                let idx = (blk * m + r, blk * m + c);
                hess.set(idx.0, idx.1, hess.get(idx.0, idx.1) + 2.0 * config.r.get(r, c));
            }
        }
    }
    // q_j = 2 Σ_{k > j} M_{k-1-j}ᵀ Q e_k
    for j in 0..h {
        for k in (j + 1)..=h {
            let g = q_impulse[k - 1 - j].transpose_matvec(&free[k])?;
            for (dst, v) in grad[j * m..(j + 1) * m].iter_mut().zip(&g) {
                *dst += 2.0 * v;
            }
        }
    }
    let mut constant = 0.0;
    for e in &free {
        constant += dot(e, &config.q.matvec(e)?);
    }

    let mut lower = Vec::with_capacity(dim);
    let mut upper = Vec::with_capacity(dim);
    for _ in 0..=h {
        lower.extend_from_slice(&config.u_min);
        upper.extend_from_slice(&config.u_max);
    }
    // Exact symmetry for the solver.
    for i in 0..dim {
        for j in i + 1..dim {
            let v = 0.5 * (hess.get(i, j) + hess.get(j, i));
            hess.set(i, j, v);
            hess.set(j, i, v);
        }
    }
    Ok(CondensedQp {
        hessian: hess,
        gradient: grad,
        lower,
        upper,
        constant,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    pub u_star: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub first_input: Control,
}

/// Norm of the unit-step gradient mapping `u - Π(u - ∇f(u))`; zero exactly
/// at a minimizer.
fn projected_gradient_norm(qp: &CondensedQp, u: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..u.len() {
        let p = (u[i] - g[i]).clamp(qp.lower[i], qp.upper[i]);
        s += (u[i] - p) * (u[i] - p);
    }
    math::sqrt(s)
}

/// Projected gradient with Nesterov momentum and function-value restart,
/// step `1/L` with `L` from 50 power iterations. Returns the best iterate;
/// `converged` is false when the iteration limit fired first.
pub fn solve_box_qp(qp: &CondensedQp, tol: f64, max_iters: usize, warm_start: Option<&[f64]>) -> Result<MpcSolution> {
    qp.validate()?;
    let n = qp.dim();
    let mut x: Vec<f64> = match warm_start {
        Some(w) => {
            Error::check_dim("warm start", n, w.len())?;
            w.to_vec()
        }
        None => qp.lower.iter().zip(&qp.upper).map(|(l, u)| 0.5 * (l + u)).collect(),
    };
    qp.project(&mut x);

    let grad_at = |u: &[f64], out: &mut Vec<f64>| {
        out.clear();
        out.extend_from_slice(&qp.gradient);
        qp.hessian.matvec_acc(u, out);
    };
    let obj_from_grad = |u: &[f64], g: &[f64]| {
        // ½uᵀPu + qᵀu + c = ½ uᵀ(Pu + q) + ½ qᵀu + c
        0.5 * dot(u, g) + 0.5 * dot(&qp.gradient, u) + qp.constant
    };

    let mut gx = Vec::with_capacity(n);
    grad_at(&x, &mut gx);
    let mut fx = obj_from_grad(&x, &gx);
    let finish = |x: Vec<f64>, fx: f64, iterations: usize, converged: bool| {
        let mut first = [0.0; CONTROL_DIM];
        let k = CONTROL_DIM.min(x.len());
        first[..k].copy_from_slice(&x[..k]);
        MpcSolution {
            u_star: x,
            objective_value: fx,
            iterations,
            converged,
            first_input: first,
        }
    };
    if n == 0 || projected_gradient_norm(qp, &x, &gx) < tol {
        return Ok(finish(x, fx, 0, true));
    }

    let lip = power_iteration(&qp.hessian, 50);
    if !(lip > 0.0) || !lip.is_finite() {
        // P = 0 (or numerically so): the problem is linear over the box.
        let mut u = x.clone();
        for i in 0..n {
            if qp.gradient[i] > 0.0 {
                u[i] = qp.lower[i];
            } else if qp.gradient[i] < 0.0 {
                u[i] = qp.upper[i];
            }
        }
        grad_at(&u, &mut gx);
        let fu = obj_from_grad(&u, &gx);
        return Ok(if fu <= fx { finish(u, fu, 1, true) } else { finish(x, fx, 1, true) });
    }
    let mut lip = lip;
    let mut step = 1.0 / lip;
    // True while y == x, i.e. the next candidate is a plain projected step.
    let mut plain = true;

    let mut y = x.clone();
    let mut gy = gx.clone();
    let mut t = 1.0f64;
    let mut cand = vec![0.0; n];
    let mut gc = Vec::with_capacity(n);
    for it in 1..=max_iters {
        for i in 0..n {
            cand[i] = (y[i] - step * gy[i]).clamp(qp.lower[i], qp.upper[i]);
        }
        grad_at(&cand, &mut gc);
        // Curvature along the step d = cand - y: dᵀ P d = dᵀ (∇f(cand) - ∇f(y)).
        let mut dd = 0.0;
        let mut dpd = 0.0;
        for i in 0..n {
            let d = cand[i] - y[i];
            dd += d * d;
            dpd += d * (gc[i] - gy[i]);
        }
        // Gradient rounding bounds how negative a PSD curvature can look.
        let noise = 1e-12 * math::sqrt(dd) * (math::norm(&gc) + math::norm(&gy) + lip * (math::norm(&cand) + math::norm(&y)));
        if dpd < -1e-6 * lip * dd - noise {
            return Err(Error::NotPsd { curvature: dpd / dd });
        }
        let fc = obj_from_grad(&cand, &gc);
        if fc > fx {
            // Restart: drop momentum and take a plain step from the best point.
            // A plain step that still ascends means L was underestimated.
            if plain {
                lip *= 2.0;
                step = 1.0 / lip;
            }
            plain = true;
            t = 1.0;
            y.copy_from_slice(&x);
            gy.clone_from(&gx);
            if it == max_iters {
                break;
            }
            continue;
        }
        let t_next = 0.5 * (1.0 + math::sqrt(1.0 + 4.0 * t * t));
        let beta = (t - 1.0) / t_next;
        for i in 0..n {
            y[i] = cand[i] + beta * (cand[i] - x[i]);
        }
        if beta != 0.0 {
            grad_at(&y, &mut gy);
        } else {
            gy.clone_from(&gc);
        }
        plain = beta == 0.0;
        x.copy_from_slice(&cand);
        gx.clone_from(&gc);
        fx = fc;
        t = t_next;
        if projected_gradient_norm(qp, &x, &gx) < tol {
            return Ok(finish(x, fx, it, true));
        }
    }
    Ok(finish(x, fx, max_iters, false))
}

/// Raw first input (kPa) and solver diagnostics for one control tick.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcStep {
    pub input_kpa: Control,
    pub solution: MpcSolution,
}

/// One receding-horizon step: normalize and lift the measured state and the
/// H+1 reference states, solve the condensed QP, denormalize the first input.
pub fn mpc_step<M: LiftedModel + ?Sized>(
    model: &M,
    x_t: &State,
    x_ref: &[State],
    config: &MpcConfig,
    warm_start: Option<&[f64]>,
) -> Result<MpcStep> {
    Error::check_dim("reference length", config.horizon + 1, x_ref.len())?;
    let stats = model.stats();
    let z_t = model.lift(&stats.normalize_state(x_t))?;
    let z_ref = x_ref
        .iter()
        .map(|r| model.lift(&stats.normalize_state(r)))
        .collect::<Result<Vec<_>>>()?;
    let qp = build_condensed_qp(model.state_matrix(), model.input_matrix(), &z_t, &z_ref, config)?;
    let solution = solve_box_qp(&qp, config.solver_tol, config.solver_max_iters, warm_start)?;
    let mut input_kpa = stats.denormalize_control(&solution.first_input);
    for v in &mut input_kpa {
        *v = v.clamp(PRESSURE_MIN, PRESSURE_MAX);
    }
    Ok(MpcStep { input_kpa, solution })
}

/// A model plus its MPC configuration and warm-start memory.
#[derive(Clone, Debug)]
pub struct MpcController<M> {
    pub model: M,
    pub config: MpcConfig,
    warm: Option<Vec<f64>>,
}

impl<M: LiftedModel> MpcController<M> {
    pub fn new(model: M, config: MpcConfig) -> Result<Self> {
        config.validate()?;
        if config.latent_dim() != model.latent_dim() {
            return Err(Error::InvalidConfig(format!(
                "Q is {}×{} but the model's latent dimension is {}",
                config.q.rows(),
                config.q.cols(),
                model.latent_dim()
            )));
        }
        Ok(MpcController {
            model,
            config,
            warm: None,
        })
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Solves one tick. The next call warm-starts from this solution shifted
    /// by one block with the last block repeated.
    pub fn step(&mut self, x_t: &State, x_ref: &[State]) -> Result<MpcStep> {
        let out = mpc_step(&self.model, x_t, x_ref, &self.config, self.warm.as_deref())?;
        let u = &out.solution.u_star;
        let mut shifted = Vec::with_capacity(u.len());
        shifted.extend_from_slice(&u[CONTROL_DIM.min(u.len())..]);
        shifted.extend_from_slice(&u[u.len().saturating_sub(CONTROL_DIM)..]);
        self.warm = Some(shifted);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingRow {
    pub t: f64,
    pub state: State,
    pub reference: State,
    pub input: Control,
    pub objective: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackingLog {
    pub rows: Vec<TrackingRow>,
}

impl TrackingLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Closed loop over `reference` (one target per tick, `dt` apart): observe,
/// plan, apply the first input for one tick. The lookahead is padded with the
/// final target. On plant failure the partial log is returned with the error.
pub fn run_tracking<M: LiftedModel, P: Plant + ?Sized>(
    controller: &mut MpcController<M>,
    plant: &mut P,
    reference: &[State],
    dt: f64,
    seed: u64,
) -> core::result::Result<TrackingLog, (TrackingLog, Error)> {
    let mut log = TrackingLog::default();
    if reference.is_empty() {
        return Ok(log);
    }
    controller.reset();
    let mut x = match plant.reset(seed) {
        Ok(x) => x,
        Err(e) => return Err((log, e)),
    };
    let h = controller.config.horizon;
    let last = reference[reference.len() - 1];
    for (k, target) in reference.iter().enumerate() {
        let window: Vec<State> = (0..=h).map(|j| reference.get(k + j).copied().unwrap_or(last)).collect();
        let step = match controller.step(&x, &window) {
            Ok(s) => s,
            Err(e) => return Err((log, e)),
        };
        log.rows.push(TrackingRow {
            t: k as f64 * dt,
            state: x,
            reference: *target,
            input: step.input_kpa,
            objective: step.solution.objective_value,
            converged: step.solution.converged,
        });
        x = match plant.step(&step.input_kpa) {
            Ok(x) => x,
            Err(e) => return Err((log, e)),
        };
    }
    Ok(log)
}

/// Per-step Euclidean tip error of a log, mm.
pub fn tracking_errors(log: &TrackingLog) -> Vec<f64> {
    log.rows
        .iter()
        .map(|r| {
            let d: [f64; STATE_DIM] = core::array::from_fn(|i| r.state[i] - r.reference[i]);
            math::norm(&d)
        })
        .collect()
}
