//! Simulated three-segment pneumatic soft arm.
//!
//! Each segment is a constant-curvature arc bent by three bellows at 0°,
//! 120° and 240°. Chamber pressures follow the commanded pressures through a
//! first-order lag; the arm is observed only through its tip position.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{PRESSURE_MAX, PRESSURE_MIN};
use crate::error::{Error, Result};
use crate::math;
use crate::{Control, State, CONTROL_DIM};

pub const NUM_SEGMENTS: usize = 3;

/// Below this bend angle the arc displacement uses its series expansion.
const SMALL_ANGLE: f64 = 1e-6;

/// A resettable discrete-time system observed through a 3-D state.
pub trait Plant {
    /// Returns the initial observation. `seed` drives any stochastic parts.
    fn reset(&mut self, seed: u64) -> Result<State>;
    /// Applies `u` for one tick and returns the new observation.
    fn step(&mut self, u: &Control) -> Result<State>;
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PlantConfig {
    /// Segment lengths base to tip, mm.
    pub segment_lengths: [f64; NUM_SEGMENTS],
    /// Curvature per unit pressure for each segment, rad/(mm·kPa).
    pub curvature_gains: [f64; NUM_SEGMENTS],
    /// Chamber pressure lag time constant, s.
    pub lag_time_constant: f64,
    /// Control tick, s.
    pub tick: f64,
    /// Curvature softening coefficient (dimensionless).
    pub softening: f64,
    /// Per-axis Gaussian observation noise, mm.
    pub noise_sigma: f64,
    /// Noise seed used by [`reset`]. Not read from config files.
    #[cfg_attr(feature = "serde", serde(skip))]
    pub seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            segment_lengths: [170.0, 150.0, 130.0],
            curvature_gains: [1.1e-4, 1.4e-4, 1.8e-4],
            lag_time_constant: 0.25,
            tick: 0.05,
            softening: 0.08,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self
            .segment_lengths
            .iter()
            .chain(&self.curvature_gains)
            .chain([&self.lag_time_constant, &self.tick])
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive {
            return Err(Error::InvalidConfig(
                "plant lengths, gains, lag time constant and tick must be positive".into(),
            ));
        }
        if !(self.softening >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("plant softening and noise must be non-negative".into()));
        }
        if self.tick >= self.lag_time_constant {
            return Err(Error::InvalidConfig(
                "plant tick must be shorter than the lag time constant".into(),
            ));
        }
        Ok(())
    }

    pub fn total_length(&self) -> f64 {
        self.segment_lengths.iter().sum()
    }
}

/// Curvature vector (1/mm) of segment `segment` for its three chamber pressures.
pub fn segment_curvature(pressures: &[f64; 3], config: &PlantConfig, segment: usize) -> [f64; 2] {
    let gain = config.curvature_gains[segment];
    let (mut kx, mut ky) = (0.0, 0.0);
    for (j, &p) in pressures.iter().enumerate() {
        let psi = 2.0 * PI * j as f64 / 3.0;
        kx += p * math::cos(psi);
        ky += p * math::sin(psi);
    }
    kx *= gain;
    ky *= gain;
    let bend = math::hypot(kx, ky) * config.segment_lengths[segment];
    let soften = 1.0 + config.softening * bend * bend;
    [kx / soften, ky / soften]
}

pub fn curvatures(pressures: &Control, config: &PlantConfig) -> [[f64; 2]; NUM_SEGMENTS] {
    core::array::from_fn(|i| {
        let q = [pressures[3 * i], pressures[3 * i + 1], pressures[3 * i + 2]];
        segment_curvature(&q, config, i)
    })
}

type Rot = [[f64; 3]; 3];

fn mat_mul(a: &Rot, b: &Rot) -> Rot {
    core::array::from_fn(|i| core::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn mat_vec(a: &Rot, v: &[f64; 3]) -> [f64; 3] {
    core::array::from_fn(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn rot_z(a: f64) -> Rot {
    let (s, c) = (math::sin(a), math::cos(a));
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rot_y(a: f64) -> Rot {
    let (s, c) = (math::sin(a), math::cos(a));
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// Tip position of a chain of constant-curvature segments starting at the
/// origin pointing along +z. `curvatures[i]` and `lengths[i]` describe
/// segment `i`; extra entries of the longer slice are ignored.
pub fn pcc_tip(curvatures: &[[f64; 2]], lengths: &[f64]) -> State {
    let mut rot: Rot = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut pos = [0.0; 3];
    for (kappa, &len) in curvatures.iter().zip(lengths) {
        let k = math::hypot(kappa[0], kappa[1]);
        let theta = k * len;
        let phi = math::atan2(kappa[1], kappa[0]);
        let (radial, axial) = if theta < SMALL_ANGLE {
            let t2 = theta * theta;
            (len * theta * (0.5 - t2 / 24.0), len * (1.0 - t2 / 6.0))
        } else {
            // 1 - cos θ = 2 sin²(θ/2) avoids cancellation near the switch.
            let h = math::sin(0.5 * theta);
            (len / theta * 2.0 * h * h, len / theta * math::sin(theta))
        };
        let local = [radial * math::cos(phi), radial * math::sin(phi), axial];
        let d = mat_vec(&rot, &local);
        for i in 0..3 {
            pos[i] += d[i];
        }
        let seg = mat_mul(&mat_mul(&rot_z(phi), &rot_y(theta)), &rot_z(-phi));
        rot = mat_mul(&rot, &seg);
    }
    pos
}

/// Tip position of the configured arm for the given segment curvatures.
pub fn pcc_forward_kinematics(curvatures: &[[f64; 2]; NUM_SEGMENTS], config: &PlantConfig) -> State {
    pcc_tip(curvatures, &config.segment_lengths)
}

/// Noise-free tip position at steady pressures.
pub fn static_tip(pressures: &Control, config: &PlantConfig) -> State {
    pcc_forward_kinematics(&curvatures(pressures, config), config)
}

#[derive(Clone, Debug)]
pub struct PlantState {
    /// Lagged chamber pressures, kPa.
    pub pressures: Control,
    pub tick_count: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for PlantState {
    fn eq(&self, other: &Self) -> bool {
        self.pressures == other.pressures && self.tick_count == other.tick_count && self.rng == other.rng
    }
}

/// Deflated arm, tick zero, noise generator seeded from the config.
pub fn reset(config: &PlantConfig) -> PlantState {
    reset_with_seed(config.seed)
}

pub fn reset_with_seed(seed: u64) -> PlantState {
    PlantState {
        pressures: [0.0; CONTROL_DIM],
        tick_count: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
    }
}

/// Current observation without advancing time.
pub fn observe(state: &mut PlantState, config: &PlantConfig) -> State {
    let mut tip = static_tip(&state.pressures, config);
    if config.noise_sigma > 0.0 {
        for v in &mut tip {
            *v += config.noise_sigma * standard_normal(&mut state.rng);
        }
    }
    tip
}

/// Advances one tick under commanded pressures `u` (clamped to [0, 40]).
pub fn plant_step(state: &mut PlantState, u: &Control, config: &PlantConfig) -> Result<State> {
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("plant input"));
    }
    let alpha = config.tick / config.lag_time_constant;
    for (q, &cmd) in state.pressures.iter_mut().zip(u) {
        let cmd = cmd.clamp(PRESSURE_MIN, PRESSURE_MAX);
        *q += alpha * (cmd - *q);
    }
    state.tick_count += 1;
    Ok(observe(state, config))
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1] keeps the log finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * PI * u2)
}

/// The simulated arm as a [`Plant`].
#[derive(Clone, Debug)]
pub struct SoftArm {
    pub config: PlantConfig,
    pub state: PlantState,
}

impl SoftArm {
    pub fn new(config: PlantConfig) -> Result<Self> {
        config.validate()?;
        let state = reset(&config);
        Ok(SoftArm { config, state })
    }
}

impl Plant for SoftArm {
    fn reset(&mut self, seed: u64) -> Result<State> {
        self.state = reset_with_seed(seed);
        Ok(observe(&mut self.state, &self.config))
    }

    fn step(&mut self, u: &Control) -> Result<State> {
        plant_step(&mut self.state, u, &self.config)
    }
}

/// Static inverse kinematics: pressures in [0, 40]⁹ whose tip is closest to
/// `target`, by projected damped least squares with a finite-difference
/// Jacobian. Returns the pressures and the remaining distance, mm.
pub fn static_inverse(config: &PlantConfig, target: &State, initial: &Control) -> (Control, f64) {
    let mut q = *initial;
    for v in &mut q {
        *v = v.clamp(PRESSURE_MIN, PRESSURE_MAX);
    }
    let resid = |q: &Control| {
        let t = static_tip(q, config);
        [target[0] - t[0], target[1] - t[1], target[2] - t[2]]
    };
    let mut r = resid(&q);
    let mut err = math::norm(&r);
    let mut damping = 1e-2;
    for _ in 0..200 {
        if err < 1e-6 {
            break;
        }
        let h = 1e-4;
        let mut jac = [[0.0; CONTROL_DIM]; 3];
        let base = static_tip(&q, config);
        for j in 0..CONTROL_DIM {
            let mut qp = q;
            // one-sided step that stays inside the box
            let step = if qp[j] + h <= PRESSURE_MAX { h } else { -h };
            qp[j] += step;
            let t = static_tip(&qp, config);
            for i in 0..3 {
                jac[i][j] = (t[i] - base[i]) / step;
            }
        }
        // Δq = Jᵀ (J Jᵀ + μ I)⁻¹ r, restricted to channels not pinned at a bound
        let mut improved = false;
        for _ in 0..20 {
            let free: Vec<usize> = (0..CONTROL_DIM)
                .filter(|&j| {
                    let g: f64 = (0..3).map(|i| jac[i][j] * r[i]).sum();
                    !((q[j] <= PRESSURE_MIN && g < 0.0) || (q[j] >= PRESSURE_MAX && g > 0.0))
                })
                .collect();
            let mut jjt = crate::linalg::Matrix::zeros(3, 3);
            for a in 0..3 {
                for b in 0..3 {
                    let s: f64 = free.iter().map(|&j| jac[a][j] * jac[b][j]).sum();
                    jjt.set(a, b, s + if a == b { damping } else { 0.0 });
                }
            }
            let Some(y) = crate::linalg::lu_solve(&jjt, &r) else {
                damping *= 10.0;
                continue;
            };
            let mut cand = q;
            for &j in &free {
                let dq: f64 = (0..3).map(|i| jac[i][j] * y[i]).sum();
                cand[j] = (cand[j] + dq).clamp(PRESSURE_MIN, PRESSURE_MAX);
            }
            let rc = resid(&cand);
            let ec = math::norm(&rc);
            if ec < err {
                q = cand;
                r = rc;
                err = ec;
                damping = (damping * 0.3).max(1e-9);
                improved = true;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (q, err)
}

/// Whether `target` lies within `tol` mm of some steady pose, trying a few
/// deterministic starting pressures.
pub fn is_reachable(config: &PlantConfig, target: &State, tol: f64) -> bool {
    reach_distance(config, target) <= tol
}

/// Distance from `target` to the closest steady pose found.
pub fn reach_distance(config: &PlantConfig, target: &State) -> f64 {
    if math::norm(target) > config.total_length() + 1e-9 {
        return math::norm(target) - config.total_length();
    }
    let mut starts: Vec<Control> = Vec::new();
    starts.push([20.0; CONTROL_DIM]);
    starts.push([5.0; CONTROL_DIM]);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..6 {
        starts.push(core::array::from_fn(|_| rng.random_range(PRESSURE_MIN..=PRESSURE_MAX)));
    }
    let mut best = f64::INFINITY;
    for s in &starts {
        let (_, e) = static_inverse(config, target, s);
        best = best.min(e);
        if best < 1e-3 {
            break;
        }
    }
    best
}
