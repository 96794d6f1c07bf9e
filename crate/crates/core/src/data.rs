//! Transition datasets: random-actuation collection, min-max scaling to
//! [-1, 1], episode-level splits and training windows.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::plant::Plant;
use crate::{Control, State, CONTROL_DIM, STATE_DIM};

/// Pressure range of every channel, kPa.
pub const PRESSURE_MIN: f64 = 0.0;
pub const PRESSURE_MAX: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TransitionTuple {
    pub episode: usize,
    pub step: usize,
    pub state: State,
    pub control: Control,
    pub next_state: State,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: usize,
    pub split: Split,
    pub tuples: Vec<TransitionTuple>,
}

impl Episode {
    /// The state sequence x_0 .. x_T of the episode.
    pub fn states(&self) -> Vec<State> {
        let mut out: Vec<State> = self.tuples.iter().map(|t| t.state).collect();
        if let Some(last) = self.tuples.last() {
            out.push(last.next_state);
        }
        out
    }
}

/// Ordered episodes. Freshly collected or loaded episodes are tagged
/// [`Split::Train`] until [`split_dataset`] assigns them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeDataset {
    pub episodes: Vec<Episode>,
}

impl EpisodeDataset {
    pub fn num_tuples(&self) -> usize {
        self.episodes.iter().map(|e| e.tuples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_tuples() == 0
    }

    pub fn tuples(&self) -> impl Iterator<Item = &TransitionTuple> {
        self.episodes.iter().flat_map(|e| e.tuples.iter())
    }

    pub fn episodes_in(&self, split: Split) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(move |e| e.split == split)
    }

    pub fn tuples_in(&self, split: Split) -> impl Iterator<Item = &TransitionTuple> {
        self.episodes_in(split).flat_map(|e| e.tuples.iter())
    }

    /// Within every episode, each tuple's `next_state` is the following
    /// tuple's `state`.
    pub fn is_chained(&self) -> bool {
        self.episodes.iter().all(|e| {
            e.tuples
                .windows(2)
                .all(|w| w[0].next_state == w[1].state && w[1].step == w[0].step + 1)
        })
    }
}

/// Per-feature bounds for scaling to [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormalizationStats {
    pub state_min: State,
    pub state_max: State,
    pub control_min: Control,
    pub control_max: Control,
}

impl NormalizationStats {
    pub fn new(state_min: State, state_max: State, control_min: Control, control_max: Control) -> Result<Self> {
        let s = NormalizationStats {
            state_min,
            state_max,
            control_min,
            control_max,
        };
        s.validate()?;
        Ok(s)
    }

    /// Feature `i` is state dimension `i` for `i < 3`, else control `i - 3`.
    pub fn feature_bounds(&self, i: usize) -> (f64, f64) {
        if i < STATE_DIM {
            (self.state_min[i], self.state_max[i])
        } else {
            (self.control_min[i - STATE_DIM], self.control_max[i - STATE_DIM])
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..STATE_DIM + CONTROL_DIM {
            let (lo, hi) = self.feature_bounds(i);
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::NonFinite("normalization stats"));
            }
            if !(hi > lo) {
                return Err(Error::DegenerateFeature { index: i, value: lo });
            }
        }
        Ok(())
    }

    pub fn normalize_state(&self, x: &State) -> State {
        core::array::from_fn(|i| normalize(x[i], self.state_min[i], self.state_max[i]))
    }

    pub fn denormalize_state(&self, x: &State) -> State {
        core::array::from_fn(|i| denormalize(x[i], self.state_min[i], self.state_max[i]))
    }

    pub fn normalize_control(&self, u: &Control) -> Control {
        core::array::from_fn(|i| normalize(u[i], self.control_min[i], self.control_max[i]))
    }

    pub fn denormalize_control(&self, u: &Control) -> Control {
        core::array::from_fn(|i| denormalize(u[i], self.control_min[i], self.control_max[i]))
    }
}

/// `2 (v - min) / (max - min) - 1`. Values outside [min, max] extrapolate.
#[inline]
pub fn normalize(value: f64, min: f64, max: f64) -> f64 {
    2.0 * ((value - min) / (max - min)) - 1.0
}

/// Inverse of [`normalize`].
#[inline]
pub fn denormalize(value: f64, min: f64, max: f64) -> f64 {
    (value + 1.0) * 0.5 * (max - min) + min
}

/// Min/max of every feature over the training split. States include both
/// `state` and `next_state` of each tuple.
pub fn fit_stats(dataset: &EpisodeDataset) -> Result<NormalizationStats> {
    fit_stats_over(dataset.tuples_in(Split::Train))
}

pub fn fit_stats_over<'a>(tuples: impl IntoIterator<Item = &'a TransitionTuple>) -> Result<NormalizationStats> {
    let mut s_min = [f64::INFINITY; STATE_DIM];
    let mut s_max = [f64::NEG_INFINITY; STATE_DIM];
    let mut c_min = [f64::INFINITY; CONTROL_DIM];
    let mut c_max = [f64::NEG_INFINITY; CONTROL_DIM];
    let mut any = false;
    for t in tuples {
        any = true;
        for x in [&t.state, &t.next_state] {
            for i in 0..STATE_DIM {
                s_min[i] = s_min[i].min(x[i]);
                s_max[i] = s_max[i].max(x[i]);
            }
        }
        for i in 0..CONTROL_DIM {
            c_min[i] = c_min[i].min(t.control[i]);
            c_max[i] = c_max[i].max(t.control[i]);
        }
    }
    if !any {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    NormalizationStats::new(s_min, s_max, c_min, c_max)
}

/// Runs `n_episodes` episodes of random actuation: every `hold_steps` ticks
/// a fresh pressure vector is drawn uniformly from [0, 40]⁹ and held.
/// Episode `e` uses seed `seed + e` for both the inputs and the plant reset.
pub fn collect_random_episodes<P: Plant + ?Sized>(
    plant: &mut P,
    n_episodes: usize,
    steps_per_episode: usize,
    seed: u64,
    hold_steps: usize,
) -> Result<EpisodeDataset> {
    if hold_steps == 0 {
        return Err(Error::InvalidArgument("hold_steps must be at least 1".into()));
    }
    let mut episodes = Vec::with_capacity(n_episodes);
    for id in 0..n_episodes {
        let ep_seed = seed.wrapping_add(id as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
        let mut x = plant.reset(ep_seed).map_err(|e| wrap_plant(e, id, 0))?;
        let mut u = [0.0; CONTROL_DIM];
        let mut tuples = Vec::with_capacity(steps_per_episode);
        for step in 0..steps_per_episode {
            if step % hold_steps == 0 {
                for v in &mut u {
                    *v = rng.random_range(PRESSURE_MIN..=PRESSURE_MAX);
                }
            }
            let next = plant.step(&u).map_err(|e| wrap_plant(e, id, step))?;
            tuples.push(TransitionTuple {
                episode: id,
                step,
                state: x,
                control: u,
                next_state: next,
            });
            x = next;
        }
        episodes.push(Episode {
            id,
            split: Split::Train,
            tuples,
        });
    }
    Ok(EpisodeDataset { episodes })
}

fn wrap_plant(e: Error, episode: usize, step: usize) -> Error {
    Error::Plant {
        episode,
        step,
        source: alloc::boxed::Box::new(e),
    }
}

/// Shuffles episodes with `seed` and tags them train/val/test by `ratios`.
/// Episode order in the returned dataset is unchanged; only tags move.
pub fn split_dataset(dataset: &EpisodeDataset, ratios: [f64; 3], seed: u64) -> Result<EpisodeDataset> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let n = dataset.episodes.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 episodes to split three ways, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut n_val = libm::round(n as f64 * ratios[1]).max(1.0) as usize;
    let mut n_test = libm::round(n as f64 * ratios[2]).max(1.0) as usize;
    while n_val + n_test > n - 1 {
        if n_val >= n_test && n_val > 1 {
            n_val -= 1;
        } else if n_test > 1 {
            n_test -= 1;
        } else {
            break;
        }
    }
    let n_train = n - n_val - n_test;

    let mut out = dataset.clone();
    for (rank, &idx) in order.iter().enumerate() {
        out.episodes[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// A normalized training window: `horizon + 1` consecutive states and the
/// `horizon` controls between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub states: Vec<State>,
    pub controls: Vec<Control>,
}

impl Window {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// All stride-1 windows of length `horizon + 1` inside episodes of `split`,
/// normalized with `stats`. Windows never cross episode boundaries.
pub fn extract_windows(
    dataset: &EpisodeDataset,
    split: Split,
    horizon: usize,
    stats: &NormalizationStats,
) -> Result<Vec<Window>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("window horizon must be at least 1".into()));
    }
    let mut out = Vec::new();
    for ep in dataset.episodes_in(split) {
        let states: Vec<State> = ep.states().iter().map(|x| stats.normalize_state(x)).collect();
        let controls: Vec<Control> = ep.tuples.iter().map(|t| stats.normalize_control(&t.control)).collect();
        if controls.len() < horizon {
            continue;
        }
        for k in 0..=controls.len() - horizon {
            out.push(Window {
                states: states[k..=k + horizon].to_vec(),
                controls: controls[k..k + horizon].to_vec(),
            });
        }
    }
    Ok(out)
}
