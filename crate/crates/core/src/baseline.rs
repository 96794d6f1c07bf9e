//! Fixed-dictionary Koopman baseline: radial-basis lifting fitted by
//! least squares (EDMD), planned with the same MPC as the learned model.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{EpisodeDataset, NormalizationStats, Split};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Cholesky, MatRef, Matrix};
use crate::math;
use crate::mpc::{LiftedModel, MpcConfig, MpcController};
use crate::{Control, State, CONTROL_DIM, STATE_DIM};

/// Tikhonov damping added to the normalized Gram matrix.
pub const EDMD_DAMPING: f64 = 1e-8;

/// Gaussian features around fixed centers, appended to the state.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RbfLifting {
    centers: Vec<State>,
    width: f64,
}

impl RbfLifting {
    pub fn new(centers: Vec<State>, width: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidConfig("RBF lifting needs at least one center".into()));
        }
        if !(width > 0.0) || !width.is_finite() {
            return Err(Error::InvalidConfig(format!("RBF width must be positive, got {width}")));
        }
        if centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("RBF centers"));
        }
        Ok(RbfLifting { centers, width })
    }

    /// `n` centers drawn uniformly from the box `[lo, hi]`, width set to the
    /// median pairwise center distance.
    pub fn sample(n: usize, lo: &State, hi: &State, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("RBF lifting needs at least one center".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<State> = (0..n)
            .map(|_| core::array::from_fn(|i| if hi[i] > lo[i] { rng.random_range(lo[i]..hi[i]) } else { lo[i] }))
            .collect();
        let width = median_pairwise_distance(&centers).unwrap_or(1.0);
        let width = if width > 0.0 { width } else { 1.0 };
        RbfLifting::new(centers, width)
    }

    pub fn centers(&self) -> &[State] {
        &self.centers
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn num_features(&self) -> usize {
        self.centers.len()
    }
}

/// Median of all `n(n-1)/2` center distances; `None` for fewer than two.
pub fn median_pairwise_distance(points: &[State]) -> Option<f64> {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let diff: State = core::array::from_fn(|k| points[i][k] - points[j][k]);
            d.push(math::norm(&diff));
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    Some(if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) })
}

/// `ψ(x) = [x; exp(-‖x - c_j‖² / (2γ²))]`.
pub fn rbf_lift(x: &[f64], lifting: &RbfLifting) -> Vec<f64> {
    let mut out = Vec::with_capacity(STATE_DIM + lifting.centers.len());
    out.extend_from_slice(x);
    let denom = 2.0 * lifting.width * lifting.width;
    for c in &lifting.centers {
        let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        out.push(math::exp(-d2 / denom));
    }
    out
}

/// Dictionary used by [`edmd_fit`].
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Lifting {
    /// `ψ(x) = x`.
    Identity,
    Rbf(RbfLifting),
}

impl Lifting {
    pub fn dim(&self) -> usize {
        match self {
            Lifting::Identity => STATE_DIM,
            Lifting::Rbf(r) => STATE_DIM + r.num_features(),
        }
    }

    pub fn lift(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Lifting::Identity => x.to_vec(),
            Lifting::Rbf(r) => rbf_lift(x, r),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdmdModel {
    pub lifting: Lifting,
    a: Matrix,
    b: Matrix,
    stats: NormalizationStats,
}

impl EdmdModel {
    pub fn from_parts(lifting: Lifting, a: Matrix, b: Matrix, stats: NormalizationStats) -> Result<Self> {
        let n = lifting.dim();
        Error::check_dim("EDMD A rows", n, a.rows())?;
        Error::check_dim("EDMD A cols", n, a.cols())?;
        Error::check_dim("EDMD B rows", n, b.rows())?;
        Error::check_dim("EDMD B cols", CONTROL_DIM, b.cols())?;
        stats.validate()?;
        Ok(EdmdModel { lifting, a, b, stats })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    /// Sum of squared one-step residuals `‖ψ(x') - Aψ(x) - Bu‖²` over
    /// normalized samples.
    pub fn residual(&self, samples: &[(State, Control, State)]) -> f64 {
        residual_with(&self.lifting, &self.a, &self.b, samples)
    }
}

pub fn residual_with(lifting: &Lifting, a: &Matrix, b: &Matrix, samples: &[(State, Control, State)]) -> f64 {
    let mut total = 0.0;
    for (x, u, xn) in samples {
        let target = lifting.lift(xn);
        let mut pred = a.matvec(&lifting.lift(x)).expect("EDMD dimensions");
        b.matvec_acc(u, &mut pred);
        total += target.iter().zip(&pred).map(|(t, p)| (t - p) * (t - p)).sum::<f64>();
    }
    total
}

/// Least-squares `[A B]` for `ψ(x') ≈ Aψ(x) + Bu` over already-normalized
/// samples, from the damped normal equations `(ΦᵀΦ/N + δI) W = ΦᵀΨ'/N`.
pub fn fit_operator(lifting: &Lifting, samples: &[(State, Control, State)]) -> Result<(Matrix, Matrix)> {
    let n = lifting.dim();
    let d = n + CONTROL_DIM;
    if samples.len() < d {
        return Err(Error::FitFailed(format!(
            "{} transitions cannot determine a {d}-column regression",
            samples.len()
        )));
    }
    let rows = samples.len();
    let mut phi = Matrix::zeros(rows, d);
    let mut psi_next = Matrix::zeros(rows, n);
    for (r, (x, u, xn)) in samples.iter().enumerate() {
        let row = phi.row_mut(r);
        row[..n].copy_from_slice(&lifting.lift(x));
        row[n..].copy_from_slice(u);
        psi_next.row_mut(r).copy_from_slice(&lifting.lift(xn));
    }
    if !phi.is_finite() || !psi_next.is_finite() {
        return Err(Error::NonFinite("EDMD regression data"));
    }
    let scale = 1.0 / rows as f64;
    let mut gram = Matrix::zeros(d, d);
    gemm(scale, MatRef::new(&phi).t(), MatRef::new(&phi), 0.0, &mut gram)?;
    let mut cross = Matrix::zeros(d, n);
    gemm(scale, MatRef::new(&phi).t(), MatRef::new(&psi_next), 0.0, &mut cross)?;
    for i in 0..d {
        gram.set(i, i, gram.get(i, i) + EDMD_DAMPING);
    }
    // Symmetrize against gemm rounding.
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (gram.get(i, j) + gram.get(j, i));
            gram.set(i, j, v);
            gram.set(j, i, v);
        }
    }
    let chol = Cholesky::new(&gram).ok_or_else(|| Error::FitFailed("Gram matrix is singular after damping".into()))?;
    let mut a = Matrix::zeros(n, n);
    let mut b = Matrix::zeros(n, CONTROL_DIM);
    let mut col = vec![0.0; d];
    for k in 0..n {
        for (i, c) in col.iter_mut().enumerate() {
            *c = cross.get(i, k);
        }
        let w = chol.solve(&col);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::FitFailed("non-finite regression coefficients".into()));
        }
        a.row_mut(k).copy_from_slice(&w[..n]);
        b.row_mut(k).copy_from_slice(&w[n..]);
    }
    Ok((a, b))
}

/// Normalized `(x, u, x')` triples of one split.
pub fn normalized_samples(dataset: &EpisodeDataset, split: Split, stats: &NormalizationStats) -> Vec<(State, Control, State)> {
    dataset
        .tuples_in(split)
        .map(|t| {
            (
                stats.normalize_state(&t.state),
                stats.normalize_control(&t.control),
                stats.normalize_state(&t.next_state),
            )
        })
        .collect()
}

/// Fits the operator on the train split of `dataset`.
pub fn edmd_fit(dataset: &EpisodeDataset, lifting: Lifting, stats: &NormalizationStats) -> Result<EdmdModel> {
    let samples = normalized_samples(dataset, Split::Train, stats);
    let (a, b) = fit_operator(&lifting, &samples)?;
    EdmdModel::from_parts(lifting, a, b, stats.clone())
}

/// Bounding box of the normalized train-split states.
pub fn normalized_state_box(dataset: &EpisodeDataset, stats: &NormalizationStats) -> Option<(State, State)> {
    let mut lo = [f64::INFINITY; STATE_DIM];
    let mut hi = [f64::NEG_INFINITY; STATE_DIM];
    let mut any = false;
    for t in dataset.tuples_in(Split::Train) {
        for x in [t.state, t.next_state] {
            let z = stats.normalize_state(&x);
            for i in 0..STATE_DIM {
                lo[i] = lo[i].min(z[i]);
                hi[i] = hi[i].max(z[i]);
            }
            any = true;
        }
    }
    any.then_some((lo, hi))
}

impl LiftedModel for EdmdModel {
    fn latent_dim(&self) -> usize {
        self.lifting.dim()
    }

    fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("EDMD lift input", STATE_DIM, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("EDMD lift input"));
        }
        Ok(self.lifting.lift(x))
    }

    /// Projection onto the passthrough state block.
    fn unlift(&self, z: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("EDMD latent state", self.lifting.dim(), z.len())?;
        Ok(z[..STATE_DIM].to_vec())
    }

    fn state_matrix(&self) -> &Matrix {
        &self.a
    }

    fn input_matrix(&self) -> &Matrix {
        &self.b
    }

    fn stats(&self) -> &NormalizationStats {
        &self.stats
    }
}

/// `q` on the state block, zero on the dictionary features.
pub fn state_block_weight(latent_dim: usize, q: f64) -> Matrix {
    Matrix::from_fn(latent_dim, latent_dim, |i, j| if i == j && i < STATE_DIM { q } else { 0.0 })
}

/// Wraps the fitted model in an MPC controller; `config.q` must match the
/// lifted dimension.
pub fn kmpc_controller(model: EdmdModel, config: MpcConfig) -> Result<MpcController<EdmdModel>> {
    let n = model.lifting.dim();
    if config.q.rows() != n || config.q.cols() != n {
        return Err(Error::InvalidConfig(format!(
            "K-MPC state weight is {}×{} but the lifted dimension is {n}",
            config.q.rows(),
            config.q.cols()
        )));
    }
    MpcController::new(model, config)
}
