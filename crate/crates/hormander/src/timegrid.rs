//! Uniform time grids, Brownian increment batches and window resampling.
//!
//! Increments are stored lazily: a [`PathBatch`] only records how each entry is
//! produced, and paths are materialized on demand. Entry `cell * d + driver`
//! of a path holds `ΔW^driver` over cell `cell`.

use crate::error::{invalid, Result};
use crate::rng::NoiseKey;
use crate::stats::{Accum, McEstimate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const ALIGN_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub cells: usize,
    pub step: f64,
}

pub fn make_grid(horizon: f64, cells: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, cells)
}

impl TimeGrid {
    pub fn new(horizon: f64, cells: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        if cells == 0 {
            return invalid("cell count must be at least 1");
        }
        Ok(Self { horizon, cells, step: horizon / cells as f64 })
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.cells {
            self.horizon
        } else {
            k as f64 * self.step
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.cells).map(|k| self.node(k)).collect()
    }

    /// Index of the node equal to `t`, if `t` lies on the grid.
    pub fn node_index(&self, t: f64) -> Result<usize> {
        let k = (t / self.step).round();
        if k < 0.0 || k > self.cells as f64 || (k * self.step - t).abs() > ALIGN_TOL * self.horizon.max(1.0) {
            return invalid(format!("time {t} is not a grid node (h = {})", self.step));
        }
        Ok(k as usize)
    }
}

/// The cells covering `(T − δ, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub t: f64,
    pub delta: f64,
    pub first_cell: usize,
    /// Exclusive.
    pub end_cell: usize,
}

impl Window {
    /// `δ = T` is accepted so that whole-interval variants share the code path.
    pub fn new(grid: &TimeGrid, t: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !(t > 0.0) || delta > t * (1.0 + ALIGN_TOL) || t > grid.horizon * (1.0 + ALIGN_TOL) {
            return invalid(format!("need 0 < δ ≤ T ≤ T₀, got T = {t}, δ = {delta}"));
        }
        let end_cell = grid.node_index(t)?;
        let first_cell = grid.node_index(t - delta)?;
        if first_cell >= end_cell {
            return invalid("window covers no cell");
        }
        Ok(Self { t, delta, first_cell, end_cell })
    }

    pub fn cells(&self) -> std::ops::Range<usize> {
        self.first_cell..self.end_cell
    }

    pub fn len(&self) -> usize {
        self.end_cell - self.first_cell
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Window `(t_k, T]` used by the Clark–Ocone integrand at cell `k`.
    pub fn tail_from(&self, k: usize) -> Self {
        Self { t: self.t, delta: self.delta, first_cell: k, end_cell: self.end_cell }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layer {
    first_entry: usize,
    end_entry: usize,
    key: NoiseKey,
    sign: f64,
}

/// A batch of Brownian paths on a grid, materialized on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    pub grid: TimeGrid,
    pub drivers: usize,
    pub n_paths: usize,
    pub seed: u64,
    layers: Vec<Layer>,
}

pub fn sample_increments(grid: TimeGrid, drivers: usize, n_paths: usize, seed: u64) -> Result<PathBatch> {
    PathBatch::new(grid, drivers, n_paths, seed)
}

impl PathBatch {
    pub fn new(grid: TimeGrid, drivers: usize, n_paths: usize, seed: u64) -> Result<Self> {
        if drivers == 0 || n_paths == 0 {
            return invalid("drivers and n_paths must be at least 1");
        }
        Ok(Self { grid, drivers, n_paths, seed, layers: Vec::new() })
    }

    pub fn entries(&self) -> usize {
        self.grid.cells * self.drivers
    }

    pub fn sqrt_h(&self) -> f64 {
        self.grid.step.sqrt()
    }

    /// Writes the increments of path `p` into `out` (length `m·d`).
    pub fn fill_path(&self, p: usize, out: &mut [f64]) {
        let sh = self.sqrt_h();
        NoiseKey::new(self.seed, 0).stream(p as u64).fill(0, out);
        for v in out.iter_mut() {
            *v *= sh;
        }
        for l in &self.layers {
            let seg = &mut out[l.first_entry..l.end_entry];
            l.key.stream(p as u64).fill(l.first_entry, seg);
            for v in seg.iter_mut() {
                *v *= sh * l.sign;
            }
        }
    }

    pub fn path(&self, p: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.entries()];
        self.fill_path(p, &mut v);
        v
    }

    pub fn increment(&self, p: usize, cell: usize, driver: usize) -> f64 {
        self.path(p)[cell * self.drivers + driver]
    }

    pub fn check_window(&self, w: &Window) -> Result<()> {
        if w.end_cell > self.grid.cells {
            return invalid("window extends beyond the grid");
        }
        let t_ok = self.grid.node_index(w.t).map(|k| k == w.end_cell).unwrap_or(false);
        let s_ok = self.grid.node_index(w.t - w.delta).map(|k| k == w.first_cell).unwrap_or(false);
        if !(t_ok && s_ok) {
            return invalid("window is not aligned with the batch grid");
        }
        Ok(())
    }

    /// Fresh draws in the window cells, everything else unchanged.
    pub fn window_resample(&self, w: &Window, inner_seed: u64) -> Result<Self> {
        self.window_resample_rep(w, inner_seed, 1)
    }

    /// As [`window_resample`](Self::window_resample) with an explicit
    /// replication index; replication 0 is reserved for the base draws.
    pub fn window_resample_rep(&self, w: &Window, inner_seed: u64, replication: u64) -> Result<Self> {
        self.check_window(w)?;
        if replication == 0 {
            return invalid("replication 0 is reserved for the base draws");
        }
        let mut out = self.clone();
        out.layers.push(Layer {
            first_entry: w.first_cell * self.drivers,
            end_entry: w.end_cell * self.drivers,
            key: NoiseKey::new(inner_seed, replication),
            sign: 1.0,
        });
        Ok(out)
    }

    pub fn with_paths(&self, n_paths: usize) -> Self {
        Self { n_paths, ..self.clone() }
    }

    /// Distinct replication domain for nested samplers built on this batch.
    fn nested_domain(&self) -> u64 {
        (self.layers.len() as u64 + 1) << 40
    }

    /// Sampler for conditional expectations given the cells before `w`.
    /// Distinct `salt` values give independent inner streams.
    pub fn inner_sampler(&self, w: &Window, antithetic: bool, salt: u64) -> InnerSampler {
        assert!(salt < 1 << 20);
        InnerSampler {
            first_entry: w.first_cell * self.drivers,
            end_entry: w.end_cell * self.drivers,
            seed: self.seed,
            domain: self.nested_domain() | (salt << 20),
            antithetic,
            sqrt_h: self.sqrt_h(),
        }
    }
}

/// Produces window-resampled copies of one outer path.
#[derive(Clone, Copy, Debug)]
pub struct InnerSampler {
    first_entry: usize,
    end_entry: usize,
    seed: u64,
    domain: u64,
    antithetic: bool,
    sqrt_h: f64,
}

impl InnerSampler {
    /// Overwrites the window entries of `dw` with replication `j` of path `p`.
    /// With antithetic pairing, replications `2i` and `2i+1` are mirror images.
    pub fn draw(&self, p: usize, j: usize, dw: &mut [f64]) {
        let (rep, sign) = if self.antithetic { (j / 2, if j % 2 == 1 { -1.0 } else { 1.0 }) } else { (j, 1.0) };
        let key = NoiseKey::new(self.seed, self.domain | (rep as u64 + 1));
        let seg = &mut dw[self.first_entry..self.end_entry];
        key.stream(p as u64).fill(self.first_entry, seg);
        for v in seg.iter_mut() {
            *v *= self.sqrt_h * sign;
        }
    }

    pub fn is_antithetic(&self) -> bool {
        self.antithetic
    }
}

/// How nested conditional expectations are sampled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestedOpts {
    pub n_inner: usize,
    pub antithetic: bool,
}

impl NestedOpts {
    pub fn plain(n_inner: usize) -> Self {
        Self { n_inner, antithetic: false }
    }
    pub fn antithetic(n_inner: usize) -> Self {
        Self { n_inner, antithetic: true }
    }
    pub fn check(&self) -> Result<()> {
        if self.n_inner < 2 {
            return invalid("n_inner must be at least 2");
        }
        if self.antithetic && self.n_inner % 2 == 1 {
            return invalid("antithetic sampling needs an even n_inner");
        }
        Ok(())
    }
}

/// Per-outer-path accumulators of `f` over window-resampled copies.
/// `f` writes `k` outputs. For antithetic sampling the pair averages are
/// accumulated, so the standard error reflects pairs.
pub fn nested_accumulate<F>(batch: &PathBatch, w: &Window, opts: NestedOpts, k: usize, f: F) -> Result<Vec<Vec<Accum>>>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync + Send,
{
    opts.check()?;
    batch.check_window(w)?;
    let sampler = batch.inner_sampler(w, opts.antithetic, 0);
    Ok((0..batch.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut dw = batch.path(p);
            nested_for_path(&sampler, p, &mut dw, opts, k, |dw, out| f(p, dw, out))
        })
        .collect())
}

/// Inner accumulation for one outer path whose increments are in `dw`.
/// The window entries of `dw` are overwritten.
pub fn nested_for_path<F>(sampler: &InnerSampler, p: usize, dw: &mut [f64], opts: NestedOpts, k: usize, f: F) -> Vec<Accum>
where
    F: Fn(&[f64], &mut [f64]),
{
    let mut acc = vec![Accum::default(); k];
    let mut out = vec![0.0; k];
    let mut pair = vec![0.0; k];
    for j in 0..opts.n_inner {
        sampler.draw(p, j, dw);
        f(dw, &mut out);
        if opts.antithetic {
            if j % 2 == 0 {
                pair.copy_from_slice(&out);
                continue;
            }
            for (a, (x, y)) in acc.iter_mut().zip(out.iter().zip(&pair)) {
                a.push(0.5 * (x + y));
            }
        } else {
            for (a, &x) in acc.iter_mut().zip(&out) {
                a.push(x);
            }
        }
    }
    acc
}

/// Per-path Monte Carlo estimate of `E_{T,δ}(F)` for a scalar functional `f`
/// of the increments.
pub fn conditional_expectation<F>(f: F, w: &Window, batch: &PathBatch, n_inner: usize) -> Result<Vec<McEstimate>>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    conditional_expectation_with(f, w, batch, NestedOpts::plain(n_inner))
}

pub fn conditional_expectation_with<F>(f: F, w: &Window, batch: &PathBatch, opts: NestedOpts) -> Result<Vec<McEstimate>>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let acc = nested_accumulate(batch, w, opts, 1, |_, dw, out| out[0] = f(dw))?;
    Ok(acc.iter().map(|a| a[0].estimate(batch.seed)).collect())
}

/// Brownian path values `W_{t_k}` at all nodes for one driver.
pub fn brownian_nodes(dw: &[f64], drivers: usize, driver: usize) -> Vec<f64> {
    let m = dw.len() / drivers;
    let mut w = Vec::with_capacity(m + 1);
    let mut acc = 0.0;
    w.push(0.0);
    for k in 0..m {
        acc += dw[k * drivers + driver];
        w.push(acc);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes() {
        let g = make_grid(1.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(make_grid(1.0, 1).unwrap().nodes(), vec![0.0, 1.0]);
        assert_eq!(make_grid(2.0, 4).unwrap().step, 0.5);
        assert!(make_grid(0.0, 4).is_err());
        assert!(make_grid(1.0, 0).is_err());
        assert!(make_grid(-1.0, 2).is_err());
    }

    #[test]
    fn window_alignment() {
        let g = make_grid(1.0, 8).unwrap();
        let w = Window::new(&g, 1.0, 0.25).unwrap();
        assert_eq!((w.first_cell, w.end_cell), (6, 8));
        assert!(Window::new(&g, 1.0, 0.2).is_err());
        assert!(Window::new(&g, 0.5, 0.75).is_err());
    }

    #[test]
    fn resample_touches_only_window() {
        let g = make_grid(1.0, 8).unwrap();
        let b = sample_increments(g, 2, 5, 11).unwrap();
        let w = Window::new(&g, 0.75, 0.25).unwrap();
        let r = b.window_resample(&w, 11).unwrap();
        for p in 0..5 {
            let (x, y) = (b.path(p), r.path(p));
            for e in 0..16 {
                let inside = (8..12).contains(&e);
                assert_eq!(x[e] == y[e], !inside, "entry {e}");
            }
        }
        let other = make_grid(1.0, 4).unwrap();
        let w2 = Window::new(&other, 0.75, 0.25).unwrap();
        let shifted = Window { first_cell: 5, ..w2 };
        assert!(b.window_resample(&shifted, 1).is_err());
    }

    #[test]
    fn measurable_functional_has_zero_inner_variance() {
        let g = make_grid(1.0, 8).unwrap();
        let b = sample_increments(g, 1, 20, 3).unwrap();
        let w = Window::new(&g, 1.0, 0.25).unwrap();
        let est = conditional_expectation(|dw| dw[..6].iter().sum(), &w, &b, 16).unwrap();
        for (p, e) in est.iter().enumerate() {
            let exact: f64 = b.path(p)[..6].iter().sum();
            assert_eq!(e.mean, exact);
            assert_eq!(e.se, 0.0);
        }
        assert!(conditional_expectation(|dw| dw[0], &w, &b, 1).is_err());
    }
}
