//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. The end-to-end criteria train the full default
//! model, so this target is excluded from the default test run:
//!
//!     cargo test --release -p koopctl --test acceptance
//!     cargo test --release -p koopctl --test acceptance -- 3 5   # a subset

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dkmpc_core::baseline::{edmd_fit, Lifting};
use dkmpc_core::data::{
    collect_random_episodes, denormalize, extract_windows, fit_stats_over, normalize, split_dataset, EpisodeDataset,
    NormalizationStats, Split, Window,
};
use dkmpc_core::koopman::{
    latent_step, loss_and_gradient, loss_components, mean_loss, train, Architecture, KoopmanModel, LossWeights, PredMode,
    TrainConfig,
};
use dkmpc_core::linalg::{Cholesky, Matrix};
use dkmpc_core::mpc::{build_condensed_qp, solve_box_qp, CondensedQp, MpcConfig};
use dkmpc_core::nn::{finite_diff_check, FdOptions, ForwardCache, Parameters};
use dkmpc_core::plant::{pcc_forward_kinematics, Plant, PlantConfig, SoftArm, NUM_SEGMENTS};
use dkmpc_core::tasks::{Task, TrackingReport};
use dkmpc_core::{Control, Result, State, CONTROL_DIM};
use koopctl::checkpoint::Checkpoint;
use koopctl::io;
use koopctl::pipeline::{run_all, Comparison, Controller, RunPaths};
use koopctl::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(took: Duration, limit_s: f64) -> bool {
    took.as_secs_f64() < limit_s
}

// ---------------------------------------------------------------- 1

/// Smallest |pre-activation| of any ReLU unit the loss evaluates on `windows`:
/// encoder on every state, decoder on every encoding and every rolled-out latent.
fn kink_margin(model: &KoopmanModel, windows: &[Window]) -> f64 {
    let states: Vec<State> = windows.iter().flat_map(|w| w.states.iter().copied()).collect();
    let x = Matrix::from_fn(states.len(), 3, |i, j| states[i][j]);
    let (z, enc_cache) = model.encoder().forward_cached(&x).unwrap();
    let mut margin = enc_cache.min_abs_relu_preactivation(model.encoder());

    let mut latents: Vec<Vec<f64>> = (0..z.rows()).map(|i| z.row(i).to_vec()).collect();
    for w in windows {
        let mut zk = model.encode(&w.states[0]).unwrap();
        for u in &w.controls {
            zk = latent_step(model.a(), model.b(), &zk, u).unwrap();
            latents.push(zk.clone());
        }
    }
    let n = model.latent_dim();
    let zm = Matrix::from_fn(latents.len(), n, |i, j| latents[i][j]);
    let (_, dec_cache): (_, ForwardCache) = model.decoder().forward_cached(&zm).unwrap();
    margin = margin.min(dec_cache.min_abs_relu_preactivation(model.decoder()));
    margin
}

fn gradient_check() -> Outcome {
    const SEEDS: usize = 20;
    const MARGIN: f64 = 2e-4;
    let arch = Architecture {
        encoder_widths: vec![3, 8, 8, 4],
        decoder_widths: vec![4, 8, 8, 3],
    };
    let weights = LossWeights {
        reg: 1e-3,
        ..LossWeights::default()
    };
    let opts = FdOptions::default();
    let start = Instant::now();
    let (mut checked, mut skipped, mut worst, mut params) = (0, 0, 0.0f64, 0);
    let mut seed = 0u64;
    while checked < SEEDS && seed < 1000 {
        seed += 1;
        let mut arm = SoftArm::new(PlantConfig::default()).unwrap();
        let ds = collect_random_episodes(&mut arm, 2, 20, seed, 2).unwrap();
        let stats = fit_stats_over(ds.tuples()).unwrap();
        let windows = extract_windows(&ds, Split::Train, 3, &stats).unwrap();
        let batch: Vec<Window> = windows.iter().step_by(9).take(4).cloned().collect();
        let mut model = KoopmanModel::new(&arch, stats, seed).unwrap();
        // Move A and B away from their identity / zero start.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_tensors = model.tensors().len();
        for (k, t) in model.tensors_mut().into_iter().enumerate() {
            if k >= n_tensors - 2 {
                t.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
            }
        }
        if kink_margin(&model, &batch) < MARGIN {
            skipped += 1;
            continue;
        }
        for mode in [PredMode::Terminal, PredMode::Sum] {
            let (_, grad) = loss_and_gradient(&model, &batch, 3, &weights, mode).unwrap();
            let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|t| t.to_vec()).collect();
            let r = finite_diff_check(
                &model,
                |m| loss_components(m, &batch, 3, &weights, mode).unwrap().total,
                &analytic,
                &opts,
            );
            worst = worst.max(r.max_rel_error);
            params = r.checked;
        }
        checked += 1;
    }
    let took = start.elapsed();
    outcome(
        checked == SEEDS && worst < opts.tolerance && within(took, 60.0),
        format!(
            "{checked} seeds x 2 loss modes x {params} parameters, worst rel. error {worst:.2e} (< 1e-4), \
             {skipped} seeds skipped near a ReLU kink, {:.1} s (< 60 s)",
            took.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

/// `x' = A x + B u_n` with `u_n = u / 20 - 1`, so the [0, 40] kPa inputs map
/// onto [-1, 1]. Each episode starts from a random state in [-1, 1]^3.
struct LinearPlant {
    a: Matrix,
    b: Matrix,
    x: Vec<f64>,
}

impl Plant for LinearPlant {
    fn reset(&mut self, seed: u64) -> Result<State> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        self.x = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok([self.x[0], self.x[1], self.x[2]])
    }

    fn step(&mut self, u: &Control) -> Result<State> {
        let un: Vec<f64> = u.iter().map(|v| v / 20.0 - 1.0).collect();
        let ax = self.a.matvec(&self.x)?;
        let bu = self.b.matvec(&un)?;
        self.x = ax.iter().zip(&bu).map(|(p, q)| p + q).collect();
        Ok([self.x[0], self.x[1], self.x[2]])
    }
}

fn spectral_radius(a: &Matrix) -> f64 {
    let m = nalgebra::DMatrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j));
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn linear_recovery() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let g = Matrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    let a0 = g.scaled(0.9 / spectral_radius(&g));
    let b0 = Matrix::from_fn(3, CONTROL_DIM, |_, _| rng.random_range(-0.2..0.2));
    let rho = spectral_radius(&a0);
    let mut plant = LinearPlant {
        a: a0.clone(),
        b: b0.clone(),
        x: vec![0.0; 3],
    };
    let ds = collect_random_episodes(&mut plant, 50, 100, 42, 1).unwrap();
    let n_tuples = ds.tuples().count();

    // (a) In units where normalization is the identity on the state and
    // u / 20 - 1 on the input, the fitted operator is A0, B0 itself.
    let unit = NormalizationStats::new([-1.0; 3], [1.0; 3], [0.0; CONTROL_DIM], [40.0; CONTROL_DIM]).unwrap();
    let fit = edmd_fit(&ds, Lifting::Identity, &unit).unwrap();
    let err_a = max_abs_diff(fit.a(), &a0).max(max_abs_diff(fit.b(), &b0));

    // (b) Deep Koopman with the default architecture and training settings.
    let ds = split_dataset(&ds, [0.8, 0.1, 0.1], 42).unwrap();
    let stats = fit_stats_over(ds.tuples_in(Split::Train)).unwrap();
    let tc = TrainConfig {
        seed: 42,
        ..TrainConfig::default()
    };
    let tw = extract_windows(&ds, Split::Train, tc.horizon, &stats).unwrap();
    let vw = extract_windows(&ds, Split::Val, tc.horizon, &stats).unwrap();
    let test = extract_windows(&ds, Split::Test, tc.horizon, &stats).unwrap();
    let model = KoopmanModel::new(&Architecture::default(), stats, 42).unwrap();
    let initial = mean_loss(&model, &tw, tc.horizon, &tc.loss_weights, tc.pred_mode).unwrap().total;
    let out = train(model, &tw, &vw, &tc).unwrap();
    let last = out.history.last().map_or(initial, |h| h.train.total);
    let (mut se, mut count) = (0.0, 0.0);
    for w in &test {
        let p = out.model.predict(&w.states[0], &w.controls).unwrap();
        for i in 0..3 {
            se += (p[i] - w.states[tc.horizon][i]).powi(2);
            count += 1.0;
        }
    }
    let rmse = (se / count).sqrt();
    let took = start.elapsed();
    outcome(
        err_a < 1e-6 && rmse < 1e-2 && out.history.len() <= 200 && within(took, 600.0),
        format!(
            "rho(A0) = {rho:.6}, {n_tuples} transitions; (a) EDMD max |error| {err_a:.2e} (< 1e-6); \
             (b) 5-step test RMSE {rmse:.2e} (< 1e-2) after {} epochs, train loss {last:.2e} / initial {initial:.2e}; \
             {:.0} s (< 600 s)",
            out.history.len(),
            took.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn random_qp(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> CondensedQp {
    let g = Matrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
    let h = g.matmul(&g.transpose()).unwrap();
    let hessian = Matrix::from_fn(n, n, |i, j| 0.5 * (h.get(i, j) + h.get(j, i)));
    let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..0.0)).collect();
    let upper: Vec<f64> = lower.iter().map(|l| l + rng.random_range(0.1..3.0)).collect();
    CondensedQp {
        hessian,
        gradient: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        lower,
        upper,
        constant: rng.random_range(-1.0..1.0),
    }
}

/// Minimum over all 3^n (lower, upper, free) patterns. For each free set the
/// free block is factored once and every bound pattern of the rest solved
/// against it; patterns whose stationary point leaves the box are dropped.
fn enumeration_oracle(qp: &CondensedQp) -> f64 {
    let n = qp.dim();
    let mut best = f64::INFINITY;
    for free_mask in 0u32..(1 << n) {
        let free: Vec<usize> = (0..n).filter(|i| free_mask >> i & 1 == 1).collect();
        let fixed: Vec<usize> = (0..n).filter(|i| free_mask >> i & 1 == 0).collect();
        let chol = if free.is_empty() {
            None
        } else {
            let m = Matrix::from_fn(free.len(), free.len(), |a, b| qp.hessian.get(free[a], free[b]));
            match Cholesky::new(&m) {
                Some(c) => Some(c),
                // A singular free block has no isolated stationary point;
                // some minimizer then lies on a smaller face.
                None => continue,
            }
        };
        for bound_mask in 0u32..(1 << fixed.len()) {
            let mut u = vec![0.0; n];
            for (k, &i) in fixed.iter().enumerate() {
                u[i] = if bound_mask >> k & 1 == 1 { qp.upper[i] } else { qp.lower[i] };
            }
            if let Some(c) = &chol {
                let rhs: Vec<f64> = free
                    .iter()
                    .map(|&i| -(qp.gradient[i] + fixed.iter().map(|&j| qp.hessian.get(i, j) * u[j]).sum::<f64>()))
                    .collect();
                let sol = c.solve(&rhs);
                if free.iter().zip(&sol).any(|(&i, &v)| v < qp.lower[i] - 1e-12 || v > qp.upper[i] + 1e-12) {
                    continue;
                }
                for (&i, v) in free.iter().zip(sol) {
                    u[i] = v.clamp(qp.lower[i], qp.upper[i]);
                }
            }
            best = best.min(qp.objective(&u));
        }
    }
    best
}

fn qp_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut feasible, mut max_dim) = (0.0f64, true, 0);
    for k in 0..200 {
        let n = 1 + k % 12;
        let rank = rng.random_range(1..=n);
        let qp = random_qp(n, rank, &mut rng);
        let sol = solve_box_qp(&qp, 1e-10, 1_000_000, None).unwrap();
        worst = worst.max((sol.objective_value - enumeration_oracle(&qp)).abs());
        feasible &= (0..n).all(|i| sol.u_star[i] >= qp.lower[i] && sol.u_star[i] <= qp.upper[i]);
        max_dim = max_dim.max(n);
    }
    let took = start.elapsed();
    outcome(
        worst < 1e-6 && feasible && within(took, 60.0),
        format!(
            "200 QPs, dim 1..={max_dim}, max |objective - oracle| {worst:.2e} (< 1e-6), all feasible: {feasible}, {:.1} s (< 60 s)",
            took.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn quad(x: &[f64], m: &Matrix) -> f64 {
    x.iter().zip(m.matvec(x).unwrap()).map(|(a, b)| a * b).sum()
}

fn condensation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let n = 1 + k % 12;
        let h = k % 6;
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-0.4..0.4));
        let b = Matrix::from_fn(n, CONTROL_DIM, |_, _| rng.random_range(-0.5..0.5));
        let gq = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let gr = Matrix::from_fn(CONTROL_DIM, CONTROL_DIM, |_, _| rng.random_range(-0.3..0.3));
        let config = MpcConfig {
            horizon: h,
            q: gq.matmul(&gq.transpose()).unwrap(),
            r: gr.matmul(&gr.transpose()).unwrap(),
            u_min: [-1.0; CONTROL_DIM],
            u_max: [1.0; CONTROL_DIM],
            solver_tol: 1e-8,
            solver_max_iters: 100,
        };
        let z0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let refs: Vec<Vec<f64>> = (0..=h).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let u: Vec<f64> = (0..CONTROL_DIM * (h + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let qp = build_condensed_qp(&a, &b, &z0, &refs, &config).unwrap();

        let mut z = z0.clone();
        let mut cost = 0.0;
        for k in 0..=h {
            let e: Vec<f64> = z.iter().zip(&refs[k]).map(|(a, b)| a - b).collect();
            let uk = &u[k * CONTROL_DIM..(k + 1) * CONTROL_DIM];
            cost += quad(&e, &config.q) + quad(uk, &config.r);
            z = latent_step(&a, &b, &z, uk).unwrap();
        }
        worst = worst.max((qp.objective(&u) - cost).abs());
    }
    outcome(worst < 1e-9, format!("100 instances, H 0..=5, n 1..=12, max |condensed - rollout| {worst:.2e} (< 1e-9)"))
}

// ---------------------------------------------------------------- 5

type Rot = [[f64; 3]; 3];

fn mul(a: &Rot, b: &Rot) -> Rot {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn axis_angle(axis: [f64; 3], angle: f64) -> Rot {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Moving-frame integration, 1000 substeps per segment (half rotation,
/// advance along the tangent, half rotation).
fn frame_oracle(curv: &[[f64; 2]; NUM_SEGMENTS], lengths: &[f64; NUM_SEGMENTS]) -> State {
    const SUBSTEPS: usize = 1000;
    let eye: Rot = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut r = eye;
    let mut p = [0.0; 3];
    for (k, &len) in curv.iter().zip(lengths) {
        let ds = len / SUBSTEPS as f64;
        let norm = k[0].hypot(k[1]);
        let half = if norm > 0.0 {
            axis_angle([-k[1] / norm, k[0] / norm, 0.0], 0.5 * norm * ds)
        } else {
            eye
        };
        for _ in 0..SUBSTEPS {
            r = mul(&r, &half);
            for i in 0..3 {
                p[i] += r[i][2] * ds;
            }
            r = mul(&r, &half);
        }
    }
    p
}

fn kinematics() -> Outcome {
    let cfg = PlantConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let curv: [[f64; 2]; NUM_SEGMENTS] =
            std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-0.012..0.012)));
        let tip = pcc_forward_kinematics(&curv, &cfg);
        let oracle = frame_oracle(&curv, &cfg.segment_lengths);
        worst = worst.max((0..3).map(|i| (tip[i] - oracle[i]).powi(2)).sum::<f64>().sqrt());
    }
    let straight = pcc_forward_kinematics(&[[0.0; 2]; NUM_SEGMENTS], &cfg);
    outcome(
        worst < 0.01 && straight == [0.0, 0.0, 450.0],
        format!("100 curvature sets, max distance to oracle {worst:.2e} mm (< 0.01), straight arm {straight:?}"),
    )
}

// ---------------------------------------------------------------- 6 to 10

struct PipelineRun {
    config: RunConfig,
    comparison: Comparison,
    took: Duration,
}

fn acceptance_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance")
}

fn pipeline(run_id: &str) -> std::result::Result<PipelineRun, String> {
    let config = RunConfig {
        seed: 42,
        output_dir: acceptance_dir(),
        run_id: Some(run_id.into()),
        ..RunConfig::default()
    };
    let dir = config.run_dir();
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
    }
    let start = Instant::now();
    let comparison = run_all(&config).map_err(|e| e.to_string())?;
    Ok(PipelineRun {
        config,
        comparison,
        took: start.elapsed(),
    })
}

fn avg(run: &PipelineRun, c: Controller, task: Task) -> f64 {
    run.comparison.find(c, task).map_or(f64::NAN, |r| r.avg_error)
}

fn circle_comparison(run: &PipelineRun) -> Outcome {
    let dk = avg(run, Controller::Dk, Task::O);
    let rbf = avg(run, Controller::Rbf, Task::O);
    let limit = 0.1 * run.config.tasks.circle_radius;
    outcome(
        dk < 0.5 * rbf && dk < limit && within(run.took, 1800.0),
        format!(
            "O: DK-MPC {dk:.3} mm, K-MPC {rbf:.3} mm, ratio {:.3} (< 0.5), DK-MPC < {limit} mm; pipeline {:.0} s (< 1800 s)",
            dk / rbf,
            run.took.as_secs_f64()
        ),
    )
}

fn letter_ordering(run: &PipelineRun) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for task in [Task::T, Task::H, Task::U] {
        let (dk, rbf) = (avg(run, Controller::Dk, task), avg(run, Controller::Rbf, task));
        pass &= dk <= rbf;
        parts.push(format!("{}: DK-MPC {dk:.3} vs K-MPC {rbf:.3} mm", task.label()));
    }
    outcome(pass, format!("{} (DK-MPC <= K-MPC on each)", parts.join(", ")))
}

fn square_dwell(run: &PipelineRun) -> Outcome {
    let path = RunPaths::new(&run.config).report(Controller::Dk, Task::Square);
    match io::read_json::<TrackingReport>(&path) {
        Ok(r) => {
            let worst = r.dwell_end_errors.iter().copied().fold(0.0, f64::max);
            let ends: Vec<String> = r.dwell_end_errors.iter().map(|e| format!("{e:.2}")).collect();
            outcome(
                r.dwell_end_errors.len() == 5 && worst < 10.0,
                format!("DK-MPC dwell-end errors [{}] mm, max {worst:.2} (< 10)", ends.join(", ")),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn artifact_names() -> Vec<String> {
    let mut names = vec!["dataset.csv".to_string(), "losses.csv".into(), "comparison.json".into(), "comparison.txt".into()];
    for c in Controller::ALL {
        names.push(format!("checkpoint_{c}.bin"));
        for task in Task::ALL {
            names.push(format!("track_{c}_{}.csv", task.label()));
            names.push(format!("report_{c}_{}.json", task.label()));
        }
    }
    names
}

fn determinism(first: &PipelineRun) -> Outcome {
    let second = match pipeline("second") {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("second run failed: {e}")),
    };
    let (a, b) = (RunPaths::new(&first.config).dir, RunPaths::new(&second.config).dir);
    let names = artifact_names();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| match (std::fs::read(a.join(n)), std::fs::read(b.join(n))) {
            (Ok(x), Ok(y)) => x != y,
            _ => true,
        })
        .collect();
    outcome(
        differing.is_empty(),
        format!("{} artifacts compared byte for byte, differing: {differing:?}", names.len()),
    )
}

fn round_trips(first: &PipelineRun) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_norm = 0.0f64;
    for _ in 0..100_000 {
        let lo: f64 = rng.random_range(-500.0..500.0);
        let hi = lo + rng.random_range(1e-3..1e3);
        let v: f64 = rng.random_range(-1e3..1e3);
        let scale = f64::max(v.abs(), f64::max(lo.abs(), hi.abs())).max(1.0);
        worst_norm = worst_norm.max((denormalize(normalize(v, lo, hi), lo, hi) - v).abs() / scale);
    }

    let paths = RunPaths::new(&first.config);
    let mut failures = Vec::new();
    for c in Controller::ALL {
        let p = paths.checkpoint(c);
        let ok = match (std::fs::read(&p), Checkpoint::load(&p)) {
            (Ok(bytes), Ok(ckpt)) => ckpt.to_bytes() == bytes && Checkpoint::from_bytes(&bytes).ok() == Some(ckpt),
            _ => false,
        };
        if !ok {
            failures.push(p.display().to_string());
        }
    }
    let dataset_ok = match (io::read_dataset(&paths.dataset()), std::fs::read(paths.dataset())) {
        (Ok(ds), Ok(bytes)) => io::dataset_csv(&ds) == bytes && ds == collected(&first.config),
        _ => false,
    };
    if !dataset_ok {
        failures.push("dataset.csv".into());
    }
    for c in Controller::ALL {
        let p = paths.track(c, Task::O);
        let ok = match (io::read_tracking_log(&p), std::fs::read(&p)) {
            (Ok(log), Ok(bytes)) => io::tracking_csv(&log) == bytes,
            _ => false,
        };
        if !ok {
            failures.push(p.display().to_string());
        }
    }
    outcome(
        worst_norm <= 1e-12 && failures.is_empty(),
        format!(
            "normalize/denormalize max rel. error {worst_norm:.2e} (<= 1e-12); checkpoints bit-exact, CSVs value-exact; failures: {failures:?}"
        ),
    )
}

fn collected(config: &RunConfig) -> EpisodeDataset {
    koopctl::pipeline::collect(config).expect("collection succeeded in the pipeline run")
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(usize, &str, Outcome, Duration)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(n) {
            let t = Instant::now();
            let o = f();
            let took = t.elapsed();
            println!("criterion {n:>2} {} {name}: {} [{:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, took.as_secs_f64());
            results.push((n, name, o, took));
        }
    };

    run(1, "gradient correctness", &mut gradient_check);
    run(2, "exact linear system recovery", &mut linear_recovery);
    run(3, "QP solver vs enumeration oracle", &mut qp_oracle);
    run(4, "condensation exactness", &mut condensation);
    run(5, "kinematics oracle", &mut kinematics);

    if (6..=10).any(wanted) {
        let t = Instant::now();
        match pipeline("first") {
            Ok(first) => {
                println!("pipeline: {:.0} s\n{}", t.elapsed().as_secs_f64(), first.comparison.to_table().trim_end());
                run(6, "circle tracking, DK-MPC vs K-MPC", &mut || circle_comparison(&first));
                run(7, "letter tasks ordering", &mut || letter_ordering(&first));
                run(8, "square targets dwell-end error", &mut || square_dwell(&first));
                run(9, "determinism", &mut || determinism(&first));
                run(10, "normalization and round-trips", &mut || round_trips(&first));
            }
            Err(e) => {
                for (n, name) in [(6, "circle"), (7, "letters"), (8, "square"), (9, "determinism"), (10, "round-trips")] {
                    run(n, name, &mut || outcome(false, format!("pipeline failed: {e}")));
                }
            }
        }
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" (criteria {failed:?})") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
