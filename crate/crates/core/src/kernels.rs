//! Gaussian RBF kernels, their convex combinations and bandwidth selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{squared_distance, Matrix};

/// Bandwidth multipliers applied to the median distance for the default
/// multi-kernel.
pub const DEFAULT_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Row cap for the median heuristic's pairwise-distance computation.
pub const MEDIAN_SUBSAMPLE_CAP: usize = 1000;

pub const MEDIAN_SEED: u64 = 0x6d65_6469_616e;

/// A convex combination of Gaussian kernels with bandwidths `σ_l` and
/// weights `β_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelSpec")]
pub struct KernelSpec {
    bandwidths: Vec<f64>,
    betas: Vec<f64>,
}

#[derive(Deserialize)]
struct RawKernelSpec {
    bandwidths: Vec<f64>,
    betas: Vec<f64>,
}

impl TryFrom<RawKernelSpec> for KernelSpec {
    type Error = Error;

    fn try_from(raw: RawKernelSpec) -> Result<Self> {
        KernelSpec::new(raw.bandwidths, raw.betas)
    }
}

impl KernelSpec {
    pub fn new(bandwidths: Vec<f64>, betas: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::Parameter("kernel needs at least one bandwidth".into()));
        }
        if bandwidths.len() != betas.len() {
            return Err(Error::Parameter(format!(
                "{} bandwidths but {} betas",
                bandwidths.len(),
                betas.len()
            )));
        }
        if let Some(s) = bandwidths.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Parameter(format!("bandwidth {s} is not positive")));
        }
        if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(Error::Parameter(format!("beta {b} is negative")));
        }
        let total: f64 = betas.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("betas sum to {total}, not 1")));
        }
        Ok(Self { bandwidths, betas })
    }

    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(vec![sigma], vec![1.0])
    }

    /// Uniformly weighted kernels at `base * m` for each multiplier `m`.
    pub fn multi_scale(base: f64, multipliers: &[f64]) -> Result<Self> {
        let l = multipliers.len();
        Self::new(
            multipliers.iter().map(|m| base * m).collect(),
            vec![1.0 / l as f64; l],
        )
    }

    /// The default five-kernel family centered on the median heuristic of `data`.
    pub fn from_data(data: &Matrix) -> Result<Self> {
        Self::multi_scale(median_heuristic(data)?, &DEFAULT_MULTIPLIERS)
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Kernel value from a precomputed squared distance.
    #[inline]
    pub fn value_sq(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.betas)
            .map(|(s, b)| b * (-d2 / (2.0 * s * s)).exp())
            .sum()
    }

    /// Kernel value for two vectors of equal length. Lengths are not checked.
    #[inline]
    pub fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        self.value_sq(squared_distance(x, y))
    }

    /// Adds `scale · ∂k(x, y)/∂x` into `out`. Lengths are not checked.
    #[inline]
    pub fn accumulate_grad_x(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        if scale == 0.0 {
            return;
        }
        let d2 = squared_distance(x, y);
        let coef: f64 = self
            .bandwidths
            .iter()
            .zip(&self.betas)
            .map(|(s, b)| {
                let s2 = s * s;
                b * (-d2 / (2.0 * s2)).exp() / s2
            })
            .sum();
        let c = scale * coef;
        for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
            *o += c * (yi - xi);
        }
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "kernel arguments of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// `exp(-‖x-y‖² / (2σ²))`
pub fn rbf(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    check_dims(x, y)?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Parameter(format!("bandwidth {sigma} is not positive")));
    }
    Ok((-squared_distance(x, y) / (2.0 * sigma * sigma)).exp())
}

pub fn multi_kernel(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_dims(x, y)?;
    Ok(spec.value(x, y))
}

/// `∂k(x, y)/∂x = Σ_l β_l · k_l(x, y) · (y - x) / σ_l²`
pub fn multi_kernel_grad_x(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<Vec<f64>> {
    check_dims(x, y)?;
    let mut out = vec![0.0; x.len()];
    spec.accumulate_grad_x(x, y, 1.0, &mut out);
    Ok(out)
}

/// Median pairwise Euclidean distance, computed on a seeded subsample of at
/// most [`MEDIAN_SUBSAMPLE_CAP`] rows. A zero median falls back to 1.
pub fn median_heuristic(data: &Matrix) -> Result<f64> {
    median_heuristic_with(data, MEDIAN_SUBSAMPLE_CAP, MEDIAN_SEED)
}

pub fn median_heuristic_with(data: &Matrix, cap: usize, seed: u64) -> Result<f64> {
    let n = data.rows();
    if n < 2 {
        return Err(Error::Data(format!(
            "median heuristic needs at least 2 rows, got {n}"
        )));
    }
    let cap = cap.max(2);
    let rows: Vec<usize> = if n > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };

    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            dists.push(squared_distance(data.row(i), data.row(j)).sqrt());
        }
    }
    let m = median(&mut dists);
    if m.is_finite() && m > 0.0 {
        Ok(m)
    } else {
        Ok(1.0)
    }
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}
