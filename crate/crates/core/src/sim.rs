//! Forward simulation with recorded (or replayable) noise.

use std::io::Write;

use rayon::prelude::*;

use crate::config::{EstimatorConfig, PhiAvgMode, StorageMode};
use crate::error::{Error, Result};
use crate::model::{ensure_dim, ensure_discrete, Model};
use crate::noise::NoiseStream;

/// Any state component beyond this magnitude counts as a blow-up.
pub const BLOW_UP_THRESHOLD: f64 = 1e8;

/// One realized orbit `x_0..x_N` of a discrete map together with its noise.
#[derive(Debug, Clone)]
pub struct Path {
    dim: usize,
    n_steps: usize,
    seed: u64,
    path_index: usize,
    observable_trace: Vec<f64>,
    storage: PathStorage,
}

#[derive(Debug, Clone)]
pub enum PathStorage {
    /// `states` holds `(N + 1) * dim` values, `noises` holds `N * dim`.
    Full { states: Vec<f64>, noises: Vec<f64> },
    Checkpointed(Checkpoint),
}

/// Sparse record of an orbit: every `stride`-th state plus the noise
/// stream, which regenerates any `b_n` on demand.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stride: usize,
    /// States `x_0, x_stride, x_{2 stride}, ...` for every segment start below `N`.
    pub stored_states: Vec<f64>,
    pub noise: NoiseStream,
}

/// A contiguous stretch `start..=start + len` of states with the noises
/// `b_start..b_{start + len - 1}` driving it.
#[derive(Debug)]
pub struct Segment<'a> {
    pub start: usize,
    pub len: usize,
    states: &'a [f64],
    noises: &'a [f64],
    dim: usize,
}

impl Segment<'_> {
    /// State `x_n` for `start <= n <= start + len`.
    pub fn state(&self, n: usize) -> &[f64] {
        let i = n - self.start;
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// Noise `b_n` for `start <= n < start + len`.
    pub fn noise(&self, n: usize) -> &[f64] {
        let i = n - self.start;
        &self.noises[i * self.dim..(i + 1) * self.dim]
    }

    pub fn steps(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Advances one step `next = f(x) + sigma(x) b`, checking the diffusion
/// sign and the blow-up threshold. `n` is the index of `x`.
pub(crate) fn step<M: Model + ?Sized>(
    model: &M,
    n: usize,
    x: &[f64],
    b: &[f64],
    next: &mut [f64],
) -> Result<()> {
    let sigma = model.diffusion(x);
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::NonPositiveDiffusion {
            step: n,
            member: None,
            value: sigma,
        });
    }
    model.drift(x, next);
    for (o, bi) in next.iter_mut().zip(b) {
        *o += sigma * bi;
    }
    if let Some((i, v)) = next
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.abs() <= BLOW_UP_THRESHOLD))
    {
        return Err(Error::BlowUp {
            step: n + 1,
            member: None,
            detail: format!("component {i} = {v}"),
        });
    }
    Ok(())
}

fn check_initial_state<M: Model + ?Sized>(model: &M) -> Result<()> {
    let x0 = model.initial_state();
    ensure_dim("initial state", model.dim(), x0.len())?;
    if x0.iter().any(|v| !(v.abs() <= BLOW_UP_THRESHOLD)) {
        return Err(Error::BlowUp {
            step: 0,
            member: None,
            detail: "initial state is not finite".into(),
        });
    }
    Ok(())
}

/// Simulates ensemble member `path_index` for `config.n_steps` steps.
pub fn simulate_path<M: Model + ?Sized>(
    model: &M,
    config: &EstimatorConfig,
    path_index: usize,
) -> Result<Path> {
    ensure_discrete(model)?;
    config.validate()?;
    check_initial_state(model)?;
    let m = model.dim();
    let n_steps = config.n_steps;
    let noise = NoiseStream::new(config.seed, path_index as u64, m);
    let mut cursor = noise.cursor();

    let mut trace = Vec::with_capacity(n_steps + 1);
    let storage = match config.storage_mode {
        StorageMode::FullInMemory => {
            let mut states = vec![0.0; (n_steps + 1) * m];
            let mut noises = vec![0.0; n_steps * m];
            states[..m].copy_from_slice(model.initial_state());
            trace.push(model.observable(&states[..m]));
            for n in 0..n_steps {
                let b = &mut noises[n * m..(n + 1) * m];
                cursor.fill(n, b);
                let (done, rest) = states.split_at_mut((n + 1) * m);
                step(model, n, &done[n * m..], b, &mut rest[..m])?;
                trace.push(model.observable(&rest[..m]));
            }
            PathStorage::Full { states, noises }
        }
        StorageMode::CheckpointReplay => {
            let stride = config.checkpoint_stride();
            let mut stored = Vec::with_capacity(n_steps.div_ceil(stride) * m);
            let mut x = model.initial_state().to_vec();
            let mut next = vec![0.0; m];
            let mut b = vec![0.0; m];
            trace.push(model.observable(&x));
            for n in 0..n_steps {
                if n % stride == 0 {
                    stored.extend_from_slice(&x);
                }
                cursor.fill(n, &mut b);
                step(model, n, &x, &b, &mut next)?;
                std::mem::swap(&mut x, &mut next);
                trace.push(model.observable(&x));
            }
            PathStorage::Checkpointed(Checkpoint {
                stride,
                stored_states: stored,
                noise,
            })
        }
    };
    Ok(Path {
        dim: m,
        n_steps,
        seed: config.seed,
        path_index,
        observable_trace: trace,
        storage,
    })
}

/// Runs the orbit of one member without storing it, calling `visit(n, x_n)`
/// for `n = 0..=n_steps`.
pub fn run_forward<M: Model + ?Sized>(
    model: &M,
    seed: u64,
    path_index: usize,
    n_steps: usize,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    ensure_discrete(model)?;
    check_initial_state(model)?;
    let m = model.dim();
    let mut cursor = NoiseStream::new(seed, path_index as u64, m).cursor();
    let mut x = model.initial_state().to_vec();
    let mut next = vec![0.0; m];
    let mut b = vec![0.0; m];
    visit(0, &x);
    for n in 0..n_steps {
        cursor.fill(n, &mut b);
        step(model, n, &x, &b, &mut next)?;
        std::mem::swap(&mut x, &mut next);
        visit(n + 1, &x);
    }
    Ok(())
}

/// Returns `b_n` exactly as used in the forward pass.
pub fn replay_noise(path: &Path, n: usize) -> Result<Vec<f64>> {
    if n >= path.n_steps {
        return Err(Error::OutOfRange {
            index: n,
            len: path.n_steps,
        });
    }
    let m = path.dim;
    Ok(match &path.storage {
        PathStorage::Full { noises, .. } => noises[n * m..(n + 1) * m].to_vec(),
        PathStorage::Checkpointed(cp) => {
            let mut b = vec![0.0; m];
            cp.noise.fill(n, &mut b);
            b
        }
    })
}

impl Path {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> usize {
        self.path_index
    }

    pub fn storage(&self) -> &PathStorage {
        &self.storage
    }

    /// `Phi(x_0), ..., Phi(x_N)`.
    pub fn observable_trace(&self) -> &[f64] {
        &self.observable_trace
    }

    pub fn terminal_observable(&self) -> f64 {
        self.observable_trace[self.n_steps]
    }

    /// Visits the orbit segment by segment, forward or in reverse order.
    ///
    /// In checkpoint mode each segment is re-simulated from its stored
    /// state, so `model` must be the model that produced the path.
    pub fn for_each_segment<M: Model + ?Sized>(
        &self,
        model: &M,
        reverse: bool,
        mut f: impl FnMut(&Segment<'_>) -> Result<()>,
    ) -> Result<()> {
        ensure_dim("model dimension", self.dim, model.dim())?;
        let m = self.dim;
        match &self.storage {
            PathStorage::Full { states, noises } => f(&Segment {
                start: 0,
                len: self.n_steps,
                states,
                noises,
                dim: m,
            }),
            PathStorage::Checkpointed(cp) => {
                let n_segments = self.n_steps.div_ceil(cp.stride);
                let mut states = vec![0.0; (cp.stride + 1) * m];
                let mut noises = vec![0.0; cp.stride * m];
                let mut cursor = cp.noise.cursor();
                let mut visit = |s: usize| -> Result<()> {
                    let start = s * cp.stride;
                    let len = cp.stride.min(self.n_steps - start);
                    states[..m].copy_from_slice(&cp.stored_states[s * m..(s + 1) * m]);
                    for i in 0..len {
                        let b = &mut noises[i * m..(i + 1) * m];
                        cursor.fill(start + i, b);
                        let (done, rest) = states.split_at_mut((i + 1) * m);
                        step(model, start + i, &done[i * m..], b, &mut rest[..m])?;
                    }
                    f(&Segment {
                        start,
                        len,
                        states: &states[..(len + 1) * m],
                        noises: &noises[..len * m],
                        dim: m,
                    })
                };
                if reverse {
                    (0..n_segments).rev().try_for_each(&mut visit)
                } else {
                    (0..n_segments).try_for_each(&mut visit)
                }
            }
        }
    }

    /// All states `x_0..x_N`, flattened; replays segments in checkpoint mode.
    pub fn states<M: Model + ?Sized>(&self, model: &M) -> Result<Vec<f64>> {
        if let PathStorage::Full { states, .. } = &self.storage {
            return Ok(states.clone());
        }
        let n_steps = self.n_steps;
        let mut out = Vec::with_capacity((n_steps + 1) * self.dim);
        self.for_each_segment(model, false, |seg| {
            for n in seg_rows(seg, n_steps) {
                out.extend_from_slice(seg.state(n));
            }
            Ok(())
        })?;
        Ok(out)
    }
}

/// Writes a path as CSV with columns `step, t, x_0..x_{M-1}` and, when
/// `include_noise` is set, `b_0..b_{M-1}` (empty on the final row).
pub fn write_path_csv<M: Model + ?Sized, W: Write>(
    model: &M,
    path: &Path,
    dt: f64,
    include_noise: bool,
    mut out: W,
) -> Result<()> {
    let m = path.dim;
    let mut header = String::from("step,t");
    for i in 0..m {
        header.push_str(&format!(",x_{i}"));
    }
    if include_noise {
        for i in 0..m {
            header.push_str(&format!(",b_{i}"));
        }
    }
    writeln!(out, "{header}")?;
    let n_steps = path.n_steps;
    path.for_each_segment(model, false, |seg| {
        for n in seg_rows(seg, n_steps) {
            let mut row = format!("{n},{}", n as f64 * dt);
            for v in seg.state(n) {
                row.push_str(&format!(",{v}"));
            }
            if include_noise {
                if n < n_steps {
                    for v in seg.noise(n) {
                        row.push_str(&format!(",{v}"));
                    }
                } else {
                    row.push_str(&",".repeat(m));
                }
            }
            writeln!(out, "{row}")?;
        }
        Ok(())
    })
}

/// States of `seg` not repeated by the following segment.
fn seg_rows(seg: &Segment<'_>, n_steps: usize) -> std::ops::Range<usize> {
    let end = seg.start + seg.len;
    seg.start..if end == n_steps { end + 1 } else { end }
}

/// Estimate of `Phi^avg_N = E[Phi(x_N)]` and its standard error, from the
/// ensemble itself or an independent pilot ensemble (see [`PhiAvgMode`]).
pub fn terminal_reference<M: Model + ?Sized>(
    model: &M,
    config: &EstimatorConfig,
) -> Result<(f64, f64)> {
    config.validate()?;
    let k = config.ensemble_size;
    let members = match config.phi_avg {
        PhiAvgMode::SameEnsemble => 0..k,
        PhiAvgMode::Pilot => k..2 * k,
    };
    let n_steps = config.n_steps;
    let values = map_members(members, |j| {
        let mut last = f64::NAN;
        run_forward(model, config.seed, j, n_steps, |n, x| {
            if n == n_steps {
                last = model.observable(x);
            }
        })?;
        Ok(last)
    })?;
    Ok(crate::stats::mean_and_stderr(&values))
}

/// Runs `f` for every member in `members`, in parallel, returning results in
/// index order. The first failing member (by index) determines the error.
pub(crate) fn map_members<T: Send>(
    members: std::ops::Range<usize>,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = members
        .into_par_iter()
        .map(|k| f(k).map_err(|e| e.with_member(k)))
        .collect();
    results.into_iter().collect()
}
