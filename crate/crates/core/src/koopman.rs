//! Deep Koopman model: a learned lifting `z = φ(x)`, its inverse, and linear
//! latent dynamics `z' = A z + B u`, trained end to end.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{NormalizationStats, Window};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef, Matrix};
use crate::nn::{Activation, AdamConfig, AdamState, DenseLayer, Mlp, MlpGrad, Parameters};
use crate::{Control, CONTROL_DIM, STATE_DIM};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Architecture {
    /// Widths from state to latent, e.g. `[3, 128, 256, 12]`.
    pub encoder_widths: Vec<usize>,
    /// Widths from latent to state, e.g. `[12, 128, 256, 3]`.
    pub decoder_widths: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            encoder_widths: vec![STATE_DIM, 128, 256, 12],
            decoder_widths: vec![12, 128, 256, STATE_DIM],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanModel {
    encoder: Mlp,
    decoder: Mlp,
    a: DenseLayer,
    b: DenseLayer,
    stats: NormalizationStats,
}

impl KoopmanModel {
    /// Glorot-initialized encoder and decoder, `A = I`, `B = 0`.
    pub fn new(arch: &Architecture, stats: NormalizationStats, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::glorot(&arch.encoder_widths, Activation::Relu, Activation::Identity, &mut rng)?;
        let decoder = Mlp::glorot(&arch.decoder_widths, Activation::Relu, Activation::Identity, &mut rng)?;
        let n = encoder.output_dim();
        Self::from_parts(encoder, decoder, Matrix::identity(n), Matrix::zeros(n, CONTROL_DIM), stats)
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, a: Matrix, b: Matrix, stats: NormalizationStats) -> Result<Self> {
        let model = KoopmanModel {
            encoder,
            decoder,
            a: DenseLayer::linear(a),
            b: DenseLayer::linear(b),
            stats,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.encoder.output_dim();
        Error::check_dim("encoder input", STATE_DIM, self.encoder.input_dim())?;
        Error::check_dim("decoder input", n, self.decoder.input_dim())?;
        Error::check_dim("decoder output", STATE_DIM, self.decoder.output_dim())?;
        Error::check_dim("latent operator rows", n, self.a.out_dim())?;
        Error::check_dim("latent operator cols", n, self.a.in_dim())?;
        Error::check_dim("control matrix rows", n, self.b.out_dim())?;
        Error::check_dim("control matrix cols", CONTROL_DIM, self.b.in_dim())?;
        if !self.a.is_linear() || !self.b.is_linear() {
            return Err(Error::InvalidArgument(
                "latent operator and control matrix must be bias-free identity layers".into(),
            ));
        }
        self.stats.validate()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn a(&self) -> &Matrix {
        self.a.weights()
    }

    pub fn b(&self) -> &Matrix {
        self.b.weights()
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    /// `φ(x)` for a normalized state.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("encode input", STATE_DIM, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encode input"));
        }
        self.encoder.forward(x)
    }

    /// `φ⁻¹(z)`, normalized units.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("decode input", self.latent_dim(), z.len())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decode input"));
        }
        self.decoder.forward(z)
    }

    /// `A z + B u`.
    pub fn latent_step(&self, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        latent_step(self.a(), self.b(), z, u)
    }

    /// Iterates [`latent_step`](Self::latent_step) over `controls`.
    pub fn rollout(&self, z0: &[f64], controls: &[Control]) -> Result<Vec<f64>> {
        rollout(self.a(), self.b(), z0, controls)
    }

    /// Decoded open-loop prediction of the state after `controls`, all normalized.
    pub fn predict(&self, x0: &[f64], controls: &[Control]) -> Result<Vec<f64>> {
        let z = self.rollout(&self.encode(x0)?, controls)?;
        self.decode(&z)
    }
}

pub fn latent_step(a: &Matrix, b: &Matrix, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim("latent state", a.cols(), z.len())?;
    Error::check_dim("control", b.cols(), u.len())?;
    Error::check_dim("control matrix rows", a.rows(), b.rows())?;
    let mut out = vec![0.0; a.rows()];
    a.matvec_acc(z, &mut out);
    b.matvec_acc(u, &mut out);
    Ok(out)
}

pub fn rollout(a: &Matrix, b: &Matrix, z0: &[f64], controls: &[Control]) -> Result<Vec<f64>> {
    if controls.is_empty() {
        return Err(Error::InvalidArgument("rollout needs at least one control".into()));
    }
    let mut z = z0.to_vec();
    for u in controls {
        z = latent_step(a, b, &z, u)?;
    }
    Ok(z)
}

impl Parameters for KoopmanModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.tensors();
        v.extend(self.decoder.tensors());
        v.push(self.a.weights().as_slice());
        v.push(self.b.weights().as_slice());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.decoder.tensors_mut());
        v.push(self.a.weights_mut().as_mut_slice());
        v.push(self.b.weights_mut().as_mut_slice());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanGrad {
    pub encoder: MlpGrad,
    pub decoder: MlpGrad,
    pub a: Matrix,
    pub b: Matrix,
}

impl Parameters for KoopmanGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.tensors();
        v.extend(self.decoder.tensors());
        v.push(self.a.as_slice());
        v.push(self.b.as_slice());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.decoder.tensors_mut());
        v.push(self.a.as_mut_slice());
        v.push(self.b.as_mut_slice());
        v
    }
}

/// Weights of the reconstruction, prediction, linear-dynamics and L2 terms.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    pub recon: f64,
    pub pred: f64,
    pub linear: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            pred: 1.0,
            linear: 1.0,
            reg: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.recon, self.pred, self.linear, self.reg];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if self.recon == 0.0 && self.pred == 0.0 && self.linear == 0.0 {
            return Err(Error::InvalidConfig(
                "at least one of the reconstruction, prediction and linear weights must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// How the prediction loss uses the window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PredMode {
    /// Only the state `horizon` steps ahead.
    #[default]
    Terminal,
    /// Sum over every step `1..=horizon`.
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    /// Prediction-loss horizon `m`, steps.
    pub horizon: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    /// Shuffle seed. Not read from config files; drivers derive it from their run seed.
    #[cfg_attr(feature = "serde", serde(skip))]
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub pred_mode: PredMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            horizon: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 200,
            patience: 20,
            seed: 42,
            loss_weights: LossWeights::default(),
            pred_mode: PredMode::Terminal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("horizon and batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        self.loss_weights.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub recon: f64,
    pub linear: f64,
    pub pred: f64,
    pub reg: f64,
    pub total: f64,
}

/// The loss terms of a batch of windows, each a batch mean except `reg`.
pub fn loss_components(
    model: &KoopmanModel,
    windows: &[Window],
    horizon: usize,
    weights: &LossWeights,
    mode: PredMode,
) -> Result<LossBreakdown> {
    Ok(evaluate(model, windows, horizon, weights, mode, false)?.0)
}

/// Loss terms and the gradient of the weighted total with respect to every
/// parameter of the encoder, decoder, `A` and `B`.
pub fn loss_and_gradient(
    model: &KoopmanModel,
    windows: &[Window],
    horizon: usize,
    weights: &LossWeights,
    mode: PredMode,
) -> Result<(LossBreakdown, KoopmanGrad)> {
    let (loss, grad) = evaluate(model, windows, horizon, weights, mode, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn evaluate(
    model: &KoopmanModel,
    windows: &[Window],
    m: usize,
    w: &LossWeights,
    mode: PredMode,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<KoopmanGrad>)> {
    if m == 0 {
        return Err(Error::InvalidArgument("prediction horizon must be at least 1".into()));
    }
    if windows.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for win in windows {
        if win.states.len() < m + 1 || win.controls.len() < m {
            return Err(Error::InvalidArgument(alloc::format!(
                "window with {} states is shorter than horizon + 1 = {}",
                win.states.len(),
                m + 1
            )));
        }
    }
    let nb = windows.len();
    let n = model.latent_dim();
    let inv = 1.0 / nb as f64;

    // Which states get encoded: x_0, x_1 and x_m, or every x_0..x_m.
    let encoded: Vec<usize> = match mode {
        PredMode::Terminal if m == 1 => vec![0, 1],
        PredMode::Terminal => vec![0, 1, m],
        PredMode::Sum => (0..=m).collect(),
    };
    let slot = |j: usize| encoded.iter().position(|&k| k == j).expect("encoded index");

    let mut x_all = Matrix::zeros(encoded.len() * nb, STATE_DIM);
    for (s, &j) in encoded.iter().enumerate() {
        for (bi, win) in windows.iter().enumerate() {
            x_all.row_mut(s * nb + bi).copy_from_slice(&win.states[j]);
        }
    }
    let controls: Vec<Matrix> = (0..m)
        .map(|j| Matrix::from_fn(nb, CONTROL_DIM, |bi, c| windows[bi].controls[j][c]))
        .collect();

    let (e_all, enc_cache) = model.encoder.forward_cached(&x_all)?;
    let block = |s: usize| Matrix::from_fn(nb, n, |r, c| e_all.get(s * nb + r, c));
    let e0 = block(0);

    // Reconstruction.
    let (x_hat, dec_cache) = model.decoder.forward_cached(&e0)?;
    let mut recon_res = Matrix::zeros(nb, STATE_DIM); // x - φ⁻¹(φ(x))
    for bi in 0..nb {
        for c in 0..STATE_DIM {
            recon_res.set(bi, c, windows[bi].states[0][c] - x_hat.get(bi, c));
        }
    }
    let recon = recon_res.frobenius_sq() * inv;

    // Latent rollout in row form: Z_{j+1} = Z_j Aᵀ + U_j Bᵀ.
    let mut z = Vec::with_capacity(m + 1);
    z.push(e0.clone());
    for u in &controls {
        let mut next = Matrix::zeros(nb, n);
        gemm(1.0, MatRef::new(&z[z.len() - 1]), MatRef::new(model.a()).t(), 0.0, &mut next)?;
        gemm(1.0, MatRef::new(u), MatRef::new(model.b()).t(), 1.0, &mut next)?;
        z.push(next);
    }

    // Linear one-step residual φ(x_1) - (A φ(x_0) + B u_0).
    let e1 = block(slot(1));
    let lin_res = sub(&e1, &z[1]);
    let linear = lin_res.frobenius_sq() * inv;

    // Prediction residuals φ(x_j) - z_j.
    let pred_steps: Vec<usize> = match mode {
        PredMode::Terminal => vec![m],
        PredMode::Sum => (1..=m).collect(),
    };
    let pred_res: Vec<Matrix> = pred_steps.iter().map(|&j| sub(&block(slot(j)), &z[j])).collect();
    let pred = pred_res.iter().map(Matrix::frobenius_sq).sum::<f64>() * inv;

    let reg = model.encoder.weight_sq_sum()
        + model.decoder.weight_sq_sum()
        + model.a().frobenius_sq()
        + model.b().frobenius_sq();
    let total = w.recon * recon + w.pred * pred + w.linear * linear + w.reg * reg;
    let loss = LossBreakdown {
        recon,
        linear,
        pred,
        reg,
        total,
    };
    if !want_grad {
        return Ok((loss, None));
    }

    // dL/dφ(x_j) for each encoded block.
    let mut d_e = Matrix::zeros(encoded.len() * nb, n);
    let mut add_block = |s: usize, g: &Matrix, scale: f64| {
        for r in 0..nb {
            for (dst, src) in d_e.row_mut(s * nb + r).iter_mut().zip(g.row(r)) {
                *dst += scale * src;
            }
        }
    };
    let mut d_a = model.a().scaled(2.0 * w.reg);
    let mut d_b = model.b().scaled(2.0 * w.reg);

    // Reconstruction through the decoder.
    let up_dec = recon_res.scaled(-2.0 * w.recon * inv);
    let (mut dec_grad, d_e0_dec) = model.decoder.backward(&dec_cache, &up_dec)?;
    add_block(0, &d_e0_dec, 1.0);

    // Linear term: residual depends on φ(x_1) (+) and z_1 = A φ(x_0) + B u_0 (-).
    let g_lin = lin_res.scaled(2.0 * w.linear * inv);
    add_block(slot(1), &g_lin, 1.0);
    gemm(-1.0, MatRef::new(&g_lin).t(), MatRef::new(&z[0]), 1.0, &mut d_a)?;
    gemm(-1.0, MatRef::new(&g_lin).t(), MatRef::new(&controls[0]), 1.0, &mut d_b)?;
    let mut g_z0 = Matrix::zeros(nb, n);
    gemm(-1.0, MatRef::new(&g_lin), MatRef::new(model.a()), 0.0, &mut g_z0)?;
    add_block(0, &g_z0, 1.0);

    // Prediction term: adjoint pass back through the rollout.
    let mut adj = Matrix::zeros(nb, n);
    for j in (1..=m).rev() {
        if let Some(p) = pred_steps.iter().position(|&k| k == j) {
            let g = pred_res[p].scaled(2.0 * w.pred * inv);
            add_block(slot(j), &g, 1.0);
            for (a, gi) in adj.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a -= gi;
            }
        }
        // adj = dL/dz_j; z_j = z_{j-1} Aᵀ + u_{j-1} Bᵀ
        gemm(1.0, MatRef::new(&adj).t(), MatRef::new(&z[j - 1]), 1.0, &mut d_a)?;
        gemm(1.0, MatRef::new(&adj).t(), MatRef::new(&controls[j - 1]), 1.0, &mut d_b)?;
        let mut prev = Matrix::zeros(nb, n);
        gemm(1.0, MatRef::new(&adj), MatRef::new(model.a()), 0.0, &mut prev)?;
        adj = prev;
    }
    add_block(0, &adj, 1.0);

    let (mut enc_grad, _) = model.encoder.backward(&enc_cache, &d_e)?;
    add_weight_decay(&mut enc_grad, &model.encoder, w.reg);
    add_weight_decay(&mut dec_grad, &model.decoder, w.reg);

    Ok((
        loss,
        Some(KoopmanGrad {
            encoder: enc_grad,
            decoder: dec_grad,
            a: d_a,
            b: d_b,
        }),
    ))
}

fn sub(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn add_weight_decay(grad: &mut MlpGrad, net: &Mlp, reg: f64) {
    if reg == 0.0 {
        return;
    }
    for (g, l) in grad.layers.iter_mut().zip(net.layers()) {
        for (gi, wi) in g.weights.as_mut_slice().iter_mut().zip(l.weights().as_slice()) {
            *gi += 2.0 * reg * wi;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_total: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss (or the
    /// last epoch when there is no validation data).
    pub model: KoopmanModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

const EVAL_CHUNK: usize = 512;

/// Mean loss over many windows, evaluated in chunks.
pub fn mean_loss(
    model: &KoopmanModel,
    windows: &[Window],
    horizon: usize,
    weights: &LossWeights,
    mode: PredMode,
) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for chunk in windows.chunks(EVAL_CHUNK) {
        let l = loss_components(model, chunk, horizon, weights, mode)?;
        let f = chunk.len() as f64 / windows.len() as f64;
        acc.recon += f * l.recon;
        acc.linear += f * l.linear;
        acc.pred += f * l.pred;
        acc.reg = l.reg;
    }
    acc.total = weights.recon * acc.recon + weights.pred * acc.pred + weights.linear * acc.linear + weights.reg * acc.reg;
    Ok(acc)
}

/// Joint Adam training of encoder, decoder, `A` and `B` on the weighted loss.
/// Windows are reshuffled every epoch from `config.seed`; the run is fully
/// deterministic.
pub fn train(
    model: KoopmanModel,
    train_windows: &[Window],
    val_windows: &[Window],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.epochs > 0 && train_windows.is_empty() {
        return Err(Error::InvalidArgument("no training windows".into()));
    }
    let mut model = model;
    let mut adam = AdamState::for_params(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &model,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, KoopmanModel)> = None;
    let mut stopped_early = false;
    let mut batch: Vec<Window> = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train_windows[i].clone()));
            let (loss, grad) = loss_and_gradient(&model, &batch, config.horizon, &config.loss_weights, config.pred_mode)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            let grads = grad.tensors();
            let mut params = model.tensors_mut();
            adam.step(&mut params, &grads).map_err(|_| Error::Diverged { epoch, batch: bi })?;
            let f = idx.len() as f64 / train_windows.len() as f64;
            acc.recon += f * loss.recon;
            acc.linear += f * loss.linear;
            acc.pred += f * loss.pred;
            acc.reg += f * loss.reg;
            acc.total += f * loss.total;
        }

        let val_total = if val_windows.is_empty() {
            None
        } else {
            let v = mean_loss(&model, val_windows, config.horizon, &config.loss_weights, config.pred_mode)?.total;
            if !v.is_finite() {
                return Err(Error::Diverged { epoch, batch: 0 });
            }
            Some(v)
        };
        history.push(EpochRecord {
            epoch,
            train: acc,
            val_total,
        });

        if let Some(v) = val_total {
            match &best {
                Some((b, _, _)) if v >= *b => {}
                _ => best = Some((v, epoch, model.clone())),
            }
            let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
            if epoch - best_epoch >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(match best {
        Some((_, e, m)) => TrainOutcome {
            model: m,
            history,
            best_epoch: Some(e),
            stopped_early,
        },
        None => TrainOutcome {
            model,
            history,
            best_epoch: None,
            stopped_early,
        },
    })
}
