//! Monte Carlo result carriers and small statistical helpers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

/// Paths per deterministic reduction chunk.
pub const CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub level: f64,
    pub count: usize,
    pub seed: u64,
}

impl McEstimate {
    pub fn exact(value: f64) -> Self {
        Self { mean: value, se: 0.0, level: 0.95, count: 1, seed: 0 }
    }

    /// Normal quantile for the stated two-sided level.
    pub fn z(&self) -> f64 {
        use statrs::distribution::Normal;
        let n = Normal::new(0.0, 1.0).unwrap();
        n.inverse_cdf(0.5 + self.level / 2.0)
    }

    pub fn ci(&self) -> (f64, f64) {
        let z = self.z();
        (self.mean - z * self.se, self.mean + z * self.se)
    }

    pub fn within(&self, target: f64, n_se: f64) -> bool {
        (self.mean - target).abs() <= n_se * self.se
    }
}

/// Streaming mean/variance (Welford) with an order-fixed merge.
#[derive(Clone, Copy, Debug, Default)]
pub struct Accum {
    pub n: usize,
    pub mean: f64,
    pub m2: f64,
}

impl Accum {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, o: &Accum) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * (self.n as f64 * o.n as f64) / n as f64;
        self.n = n;
    }

    pub fn var(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn estimate(&self, seed: u64) -> McEstimate {
        let se = if self.n < 2 { 0.0 } else { (self.var() / self.n as f64).sqrt() };
        McEstimate { mean: self.mean, se, level: 0.95, count: self.n, seed }
    }
}

pub fn accum_of(xs: &[f64]) -> Accum {
    let mut a = Accum::default();
    for &x in xs {
        a.push(x);
    }
    a
}

pub fn estimate_of(xs: &[f64], seed: u64) -> McEstimate {
    accum_of(xs).estimate(seed)
}

/// Parallel map over `0..n` returning results in index order.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Accumulates `k` statistics per path with a fixed chunking, so the result is
/// bit-identical for any worker count.
pub fn par_accumulate<F>(n: usize, k: usize, f: F) -> Vec<Accum>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<Vec<Accum>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![Accum::default(); k];
            let mut buf = vec![0.0; k];
            for p in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(p, &mut buf);
                for (a, &x) in acc.iter_mut().zip(&buf) {
                    a.push(x);
                }
            }
            acc
        })
        .collect();
    let mut out = vec![Accum::default(); k];
    for part in &parts {
        for (o, a) in out.iter_mut().zip(part) {
            o.merge(a);
        }
    }
    out
}

/// Binomial proportion with an exact (Clopper–Pearson) interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub hits: usize,
    pub count: usize,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn clopper_pearson(hits: usize, count: usize, level: f64) -> Proportion {
    let alpha = 1.0 - level;
    let (k, n) = (hits as f64, count as f64);
    let lo = if hits == 0 {
        0.0
    } else {
        Beta::new(k, n - k + 1.0).unwrap().inverse_cdf(alpha / 2.0)
    };
    let hi = if hits == count {
        1.0
    } else {
        Beta::new(k + 1.0, n - k).unwrap().inverse_cdf(1.0 - alpha / 2.0)
    };
    Proportion { hits, count, estimate: if count == 0 { 0.0 } else { k / n }, lo, hi }
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of `ln y` against `ln x`; non-positive `y` entries are skipped.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(_, &b)| b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .unzip();
    (lx.len() >= 2).then(|| linear_fit(&lx, &ly).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_merge_matches_direct() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let direct = accum_of(&xs);
        let mut merged = accum_of(&xs[..333]);
        merged.merge(&accum_of(&xs[333..]));
        assert!((direct.mean - merged.mean).abs() < 1e-12);
        assert!((direct.var() - merged.var()).abs() < 1e-10);
    }

    #[test]
    fn clopper_pearson_edges() {
        let p = clopper_pearson(0, 100, 0.95);
        assert_eq!(p.lo, 0.0);
        // one-sided zero-hit bound 1 - (alpha/2)^(1/n)
        assert!((p.hi - (1.0 - 0.025f64.powf(0.01))).abs() < 1e-9);
        let q = clopper_pearson(50, 100, 0.95);
        assert!(q.lo < 0.5 && q.hi > 0.5);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [0.1, 0.2, 0.4];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-1.5)).collect();
        assert!((loglog_slope(&x, &y).unwrap() + 1.5).abs() < 1e-12);
    }
}
