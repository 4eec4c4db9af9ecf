//! Maximum mean discrepancy estimators and their class-reweighted variants.
//!
//! Four estimators are provided:
//!
//! | function | cost | form |
//! |----------|------|------|
//! | [`mmd2_quadratic`] | O(n²) | biased V-statistic of the squared mean-embedding distance |
//! | [`mmd2_linear`] | O(n) | average of [`h_l`] over non-overlapping quad-tuples |
//! | [`wmmd2_quadratic`] | O(n²) | source embedding reweighted by `α_y`, normalized by `Σα` |
//! | [`wmmd2_linear`] | O(n) | average of [`h_lw`] over quad-tuples |
//!
//! The linear estimators pair consecutive rows: tuple `i` uses source rows
//! `2i, 2i+1` and target rows `2i, 2i+1`. Both domains are truncated to the
//! common even count `m = 2⌊min(M, N)/2⌋`. For the weighted linear estimator
//! the class weights are rescaled per call so that the mean of `α_{y_i}` over
//! the `m` source rows used is one; `α ≡ 1` is left untouched.
//!
//! Linear estimates are unbiased and can be negative. Nothing here clamps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::numerics::Matrix;

/// Per-class source priors `w^s`, estimated target priors `ŵ^t` and the
/// auxiliary weights `α` applied to source samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxWeights {
    source_priors: Vec<f64>,
    target_priors: Vec<f64>,
    alphas: Vec<f64>,
}

const PRIOR_TOL: f64 = 1e-9;

fn check_priors(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Parameter(format!("{name} priors must be nonnegative")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PRIOR_TOL {
        return Err(Error::Parameter(format!("{name} priors sum to {total}")));
    }
    Ok(())
}

impl AuxWeights {
    pub fn new(source_priors: Vec<f64>, target_priors: Vec<f64>, alphas: Vec<f64>) -> Result<Self> {
        if source_priors.len() != target_priors.len() || source_priors.len() != alphas.len() {
            return Err(Error::Shape(format!(
                "aux weights over {} / {} / {} classes",
                source_priors.len(),
                target_priors.len(),
                alphas.len()
            )));
        }
        if source_priors.is_empty() {
            return Err(Error::Parameter("aux weights need at least one class".into()));
        }
        check_priors("source", &source_priors)?;
        check_priors("target", &target_priors)?;
        if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Parameter("alphas must be finite and nonnegative".into()));
        }
        Ok(Self {
            source_priors,
            target_priors,
            alphas,
        })
    }

    /// `α ≡ 1`, with the target priors taken equal to the source priors.
    pub fn ones(source_priors: Vec<f64>) -> Result<Self> {
        let c = source_priors.len();
        Self::new(source_priors.clone(), source_priors, vec![1.0; c])
    }

    /// `α_c = (w_c^t + ε) / (w_c^s + ε)`; `ε = 0` gives the plain ratio.
    ///
    /// With `ε = 0`, classes absent from the source get `α_c = 0`, and a
    /// source with no mass at all is rejected.
    pub fn from_priors(source_priors: Vec<f64>, target_priors: Vec<f64>, smoothing: f64) -> Result<Self> {
        if !(smoothing.is_finite() && smoothing >= 0.0) {
            return Err(Error::Parameter(format!("smoothing {smoothing} must be >= 0")));
        }
        if source_priors.iter().all(|w| *w <= 0.0) {
            return Err(Error::DegenerateWeights("all source priors are zero".into()));
        }
        let alphas = source_priors
            .iter()
            .zip(&target_priors)
            .map(|(s, t)| {
                let den = s + smoothing;
                if den > 0.0 {
                    (t + smoothing) / den
                } else {
                    0.0
                }
            })
            .collect();
        Self::new(source_priors, target_priors, alphas)
    }

    pub fn class_count(&self) -> usize {
        self.alphas.len()
    }

    pub fn source_priors(&self) -> &[f64] {
        &self.source_priors
    }

    pub fn target_priors(&self) -> &[f64] {
        &self.target_priors
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, class: usize) -> Result<f64> {
        self.alphas.get(class).copied().ok_or(Error::Index {
            index: class,
            len: self.alphas.len(),
        })
    }

    /// Every `α_c` multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.source_priors.clone(),
            self.target_priors.clone(),
            self.alphas.iter().map(|a| a * factor).collect(),
        )
    }

    /// `α` rescaled so that `Σ_c w_c^s α_c = 1`.
    pub fn normalized_alphas(&self) -> Vec<f64> {
        let mass: f64 = self
            .source_priors
            .iter()
            .zip(&self.alphas)
            .map(|(w, a)| w * a)
            .sum();
        if mass > 0.0 {
            self.alphas.iter().map(|a| a / mass).collect()
        } else {
            self.alphas.clone()
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.alphas.iter().all(|a| *a == 1.0)
    }
}

/// Two source and two target feature vectors, the unit of the linear-time
/// estimators.
#[derive(Debug, Clone, Copy)]
pub struct QuadTuple<'a> {
    pub xs1: &'a [f64],
    pub xs2: &'a [f64],
    pub ys1: Option<usize>,
    pub ys2: Option<usize>,
    pub xt1: &'a [f64],
    pub xt2: &'a [f64],
    pub yt1: Option<usize>,
    pub yt2: Option<usize>,
}

impl<'a> QuadTuple<'a> {
    pub fn unlabeled(xs1: &'a [f64], xs2: &'a [f64], xt1: &'a [f64], xt2: &'a [f64]) -> Self {
        Self {
            xs1,
            xs2,
            ys1: None,
            ys2: None,
            xt1,
            xt2,
            yt1: None,
            yt2: None,
        }
    }

    pub fn labeled(
        xs1: &'a [f64],
        ys1: usize,
        xs2: &'a [f64],
        ys2: usize,
        xt1: &'a [f64],
        xt2: &'a [f64],
    ) -> Self {
        Self {
            ys1: Some(ys1),
            ys2: Some(ys2),
            ..Self::unlabeled(xs1, xs2, xt1, xt2)
        }
    }

    fn check(&self) -> Result<()> {
        let d = self.xs1.len();
        if self.xs2.len() != d || self.xt1.len() != d || self.xt2.len() != d {
            return Err(Error::Shape(format!(
                "quad-tuple dimensions {}, {}, {}, {}",
                d,
                self.xs2.len(),
                self.xt1.len(),
                self.xt2.len()
            )));
        }
        Ok(())
    }

    fn source_alphas(&self, weights: &AuxWeights) -> Result<(f64, f64)> {
        match (self.ys1, self.ys2) {
            (Some(a), Some(b)) => Ok((weights.alpha(a)?, weights.alpha(b)?)),
            _ => Err(Error::Data("quad-tuple is missing source labels".into())),
        }
    }
}

/// Feature gradients of a quad-tuple statistic, one per member.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadGrad {
    pub xs1: Vec<f64>,
    pub xs2: Vec<f64>,
    pub xt1: Vec<f64>,
    pub xt2: Vec<f64>,
}

fn check_same_dim(src: &Matrix, tgt: &Matrix) -> Result<()> {
    if src.cols() != tgt.cols() {
        return Err(Error::Shape(format!(
            "source has {} features, target has {}",
            src.cols(),
            tgt.cols()
        )));
    }
    Ok(())
}

fn check_labels(src: &Matrix, labels: &[usize], weights: &AuxWeights) -> Result<()> {
    if labels.len() != src.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} source rows",
            labels.len(),
            src.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= weights.class_count()) {
        return Err(Error::Index {
            index: bad,
            len: weights.class_count(),
        });
    }
    Ok(())
}

/// Σ_i Σ_j k(a_i, b_j), row-major summation order.
fn kernel_sum(a: &Matrix, b: &Matrix, spec: &KernelSpec) -> f64 {
    let mut total = 0.0;
    for x in a.iter_rows() {
        for y in b.iter_rows() {
            total += spec.value(x, y);
        }
    }
    total
}

/// Biased quadratic-time estimate of MMD².
pub fn mmd2_quadratic(src: &Matrix, tgt: &Matrix, spec: &KernelSpec) -> Result<f64> {
    check_same_dim(src, tgt)?;
    let (m, n) = (src.rows(), tgt.rows());
    if m == 0 || n == 0 {
        return Err(Error::Data("MMD needs at least one sample per domain".into()));
    }
    let (mf, nf) = (m as f64, n as f64);
    let ss = kernel_sum(src, src, spec) / (mf * mf);
    let tt = kernel_sum(tgt, tgt, spec) / (nf * nf);
    let st = kernel_sum(src, tgt, spec) / (mf * nf);
    Ok(ss + tt - 2.0 * st)
}

/// Unbiased quadratic-time U-statistic for MMD² (within-domain diagonal
/// terms excluded). This is the expectation of [`mmd2_linear`] over random
/// orderings of the same samples.
pub fn mmd2_unbiased(src: &Matrix, tgt: &Matrix, spec: &KernelSpec) -> Result<f64> {
    check_same_dim(src, tgt)?;
    let (m, n) = (src.rows(), tgt.rows());
    if m < 2 || n < 2 {
        return Err(Error::Data("unbiased MMD needs at least two samples per domain".into()));
    }
    let off_diag = |a: &Matrix| {
        let mut total = 0.0;
        for i in 0..a.rows() {
            for j in 0..a.rows() {
                if i != j {
                    total += spec.value(a.row(i), a.row(j));
                }
            }
        }
        total
    };
    let (mf, nf) = (m as f64, n as f64);
    let ss = off_diag(src) / (mf * (mf - 1.0));
    let tt = off_diag(tgt) / (nf * (nf - 1.0));
    let st = kernel_sum(src, tgt, spec) / (mf * nf);
    Ok(ss + tt - 2.0 * st)
}

#[inline]
fn h_core(z: &QuadTuple<'_>, a1: f64, a2: f64, spec: &KernelSpec) -> f64 {
    a1 * a2 * spec.value(z.xs1, z.xs2) + spec.value(z.xt1, z.xt2)
        - a1 * spec.value(z.xs1, z.xt2)
        - a2 * spec.value(z.xs2, z.xt1)
}

/// `k(xs1,xs2) + k(xt1,xt2) - k(xs1,xt2) - k(xs2,xt1)`
pub fn h_l(z: &QuadTuple<'_>, spec: &KernelSpec) -> Result<f64> {
    z.check()?;
    Ok(h_core(z, 1.0, 1.0, spec))
}

/// The weighted quad-tuple statistic: source-source term scaled by
/// `α_{ys1}·α_{ys2}`, each cross term by the alpha of its source member.
pub fn h_lw(z: &QuadTuple<'_>, weights: &AuxWeights, spec: &KernelSpec) -> Result<f64> {
    z.check()?;
    let (a1, a2) = z.source_alphas(weights)?;
    Ok(h_core(z, a1, a2, spec))
}

fn h_grad_core(z: &QuadTuple<'_>, a1: f64, a2: f64, spec: &KernelSpec, scale: f64, g: &mut QuadGradMut<'_>) {
    let s12 = scale * a1 * a2;
    spec.accumulate_grad_x(z.xs1, z.xs2, s12, g.xs1);
    spec.accumulate_grad_x(z.xs1, z.xt2, -scale * a1, g.xs1);

    spec.accumulate_grad_x(z.xs2, z.xs1, s12, g.xs2);
    spec.accumulate_grad_x(z.xs2, z.xt1, -scale * a2, g.xs2);

    spec.accumulate_grad_x(z.xt1, z.xt2, scale, g.xt1);
    spec.accumulate_grad_x(z.xt1, z.xs2, -scale * a2, g.xt1);

    spec.accumulate_grad_x(z.xt2, z.xt1, scale, g.xt2);
    spec.accumulate_grad_x(z.xt2, z.xs1, -scale * a1, g.xt2);
}

struct QuadGradMut<'a> {
    xs1: &'a mut [f64],
    xs2: &'a mut [f64],
    xt1: &'a mut [f64],
    xt2: &'a mut [f64],
}

/// Gradients of [`h_lw`] with respect to each of the four feature vectors.
pub fn h_lw_grad(z: &QuadTuple<'_>, weights: &AuxWeights, spec: &KernelSpec) -> Result<QuadGrad> {
    z.check()?;
    let (a1, a2) = z.source_alphas(weights)?;
    let d = z.xs1.len();
    let mut out = QuadGrad {
        xs1: vec![0.0; d],
        xs2: vec![0.0; d],
        xt1: vec![0.0; d],
        xt2: vec![0.0; d],
    };
    h_grad_core(
        z,
        a1,
        a2,
        spec,
        1.0,
        &mut QuadGradMut {
            xs1: &mut out.xs1,
            xs2: &mut out.xs2,
            xt1: &mut out.xt1,
            xt2: &mut out.xt2,
        },
    );
    Ok(out)
}

/// Number of rows per domain the linear estimators use.
pub fn linear_sample_count(m: usize, n: usize) -> Result<usize> {
    let used = m.min(n) / 2 * 2;
    if used < 2 {
        return Err(Error::Data(format!(
            "linear-time MMD needs at least 2 samples per domain, got {m} and {n}"
        )));
    }
    Ok(used)
}

/// Linear-time unbiased MMD² over consecutive non-overlapping pairs.
pub fn mmd2_linear(src: &Matrix, tgt: &Matrix, spec: &KernelSpec) -> Result<f64> {
    check_same_dim(src, tgt)?;
    let m = linear_sample_count(src.rows(), tgt.rows())?;
    let mut total = 0.0;
    for i in (0..m).step_by(2) {
        let z = QuadTuple::unlabeled(src.row(i), src.row(i + 1), tgt.row(i), tgt.row(i + 1));
        total += h_core(&z, 1.0, 1.0, spec);
    }
    Ok(2.0 / m as f64 * total)
}

/// Factor `r` such that the mean of `r·α_{y_i}` over the first `m` labels is 1.
fn batch_alpha_scale(labels: &[usize], m: usize, weights: &AuxWeights) -> Result<f64> {
    if weights.is_uniform() {
        return Ok(1.0);
    }
    let total: f64 = labels[..m].iter().map(|&y| weights.alphas[y]).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateWeights(
            "source alphas in the batch sum to zero".into(),
        ));
    }
    Ok(m as f64 / total)
}

/// Linear-time weighted MMD², with per-call renormalization of `α`.
pub fn wmmd2_linear(
    src: &Matrix,
    src_labels: &[usize],
    tgt: &Matrix,
    weights: &AuxWeights,
    spec: &KernelSpec,
) -> Result<f64> {
    check_same_dim(src, tgt)?;
    check_labels(src, src_labels, weights)?;
    let m = linear_sample_count(src.rows(), tgt.rows())?;
    let r = batch_alpha_scale(src_labels, m, weights)?;
    let mut total = 0.0;
    for i in (0..m).step_by(2) {
        let z = QuadTuple::unlabeled(src.row(i), src.row(i + 1), tgt.row(i), tgt.row(i + 1));
        let a1 = r * weights.alphas[src_labels[i]];
        let a2 = r * weights.alphas[src_labels[i + 1]];
        total += h_core(&z, a1, a2, spec);
    }
    Ok(2.0 / m as f64 * total)
}

/// Value of [`wmmd2_linear`] and its gradients with respect to every source
/// and target row. Rows beyond the common even count get zero gradient.
pub fn wmmd2_linear_with_grad(
    src: &Matrix,
    src_labels: &[usize],
    tgt: &Matrix,
    weights: &AuxWeights,
    spec: &KernelSpec,
) -> Result<(f64, Matrix, Matrix)> {
    check_same_dim(src, tgt)?;
    check_labels(src, src_labels, weights)?;
    let m = linear_sample_count(src.rows(), tgt.rows())?;
    let r = batch_alpha_scale(src_labels, m, weights)?;
    let d = src.cols();
    let scale = 2.0 / m as f64;
    let mut g_src = Matrix::zeros(src.rows(), d);
    let mut g_tgt = Matrix::zeros(tgt.rows(), d);
    let mut total = 0.0;
    for i in (0..m).step_by(2) {
        let z = QuadTuple::unlabeled(src.row(i), src.row(i + 1), tgt.row(i), tgt.row(i + 1));
        let a1 = r * weights.alphas[src_labels[i]];
        let a2 = r * weights.alphas[src_labels[i + 1]];
        total += h_core(&z, a1, a2, spec);

        let (s1, s2) = g_src.as_mut_slice()[i * d..(i + 2) * d].split_at_mut(d);
        let (t1, t2) = g_tgt.as_mut_slice()[i * d..(i + 2) * d].split_at_mut(d);
        h_grad_core(
            &z,
            a1,
            a2,
            spec,
            scale,
            &mut QuadGradMut {
                xs1: s1,
                xs2: s2,
                xt1: t1,
                xt2: t2,
            },
        );
    }
    Ok((scale * total, g_src, g_tgt))
}

/// Quadratic-time weighted MMD²: source embedding
/// `Σ_i α_{y_i} φ(x_i) / Σ_i α_{y_i}` against the plain target mean embedding.
pub fn wmmd2_quadratic(
    src: &Matrix,
    src_labels: &[usize],
    tgt: &Matrix,
    weights: &AuxWeights,
    spec: &KernelSpec,
) -> Result<f64> {
    check_same_dim(src, tgt)?;
    check_labels(src, src_labels, weights)?;
    let (m, n) = (src.rows(), tgt.rows());
    if m == 0 || n == 0 {
        return Err(Error::Data("MMD needs at least one sample per domain".into()));
    }
    let a: Vec<f64> = src_labels.iter().map(|&y| weights.alphas[y]).collect();
    let mass: f64 = a.iter().sum();
    if mass <= 0.0 {
        return Err(Error::DegenerateWeights(
            "source alphas sum to zero".into(),
        ));
    }
    let nf = n as f64;
    // Same loop order as the unweighted estimator, so α ≡ 1 reproduces it bit for bit.
    let mut ss = 0.0;
    for (x, ai) in src.iter_rows().zip(&a) {
        for (y, aj) in src.iter_rows().zip(&a) {
            ss += ai * aj * spec.value(x, y);
        }
    }
    let mut st = 0.0;
    for (x, ai) in src.iter_rows().zip(&a) {
        for y in tgt.iter_rows() {
            st += ai * spec.value(x, y);
        }
    }
    let tt = kernel_sum(tgt, tgt, spec) / (nf * nf);
    Ok(ss / (mass * mass) + tt - 2.0 * (st / (mass * nf)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> KernelSpec {
        KernelSpec::new(vec![0.5, 1.0, 2.0], vec![0.2, 0.5, 0.3]).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, shift: f64) -> Matrix {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
        Matrix::new(r, c, data).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn weights(alphas: Vec<f64>) -> AuxWeights {
        let c = alphas.len();
        AuxWeights::new(vec![1.0 / c as f64; c], vec![1.0 / c as f64; c], alphas).unwrap()
    }

    /// Four kernel evaluations written out longhand.
    fn h_lw_oracle(z: &QuadTuple<'_>, alphas: &[f64], s: &KernelSpec) -> f64 {
        let k = |a: &[f64], b: &[f64]| {
            s.bandwidths()
                .iter()
                .zip(s.betas())
                .map(|(sig, beta)| {
                    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                    beta * (-d2 / (2.0 * sig * sig)).exp()
                })
                .sum::<f64>()
        };
        let a1 = alphas[z.ys1.unwrap()];
        let a2 = alphas[z.ys2.unwrap()];
        a1 * a2 * k(z.xs1, z.xs2) + k(z.xt1, z.xt2) - a1 * k(z.xs1, z.xt2) - a2 * k(z.xs2, z.xt1)
    }

    #[test]
    fn aux_weight_construction() {
        let w = AuxWeights::from_priors(vec![0.5, 0.5], vec![0.75, 0.25], 0.0).unwrap();
        assert_eq!(w.alphas(), &[1.5, 0.5]);
        let w = AuxWeights::from_priors(vec![1.0, 0.0], vec![0.5, 0.5], 0.0).unwrap();
        assert_eq!(w.alphas(), &[0.5, 0.0]);
        assert!(matches!(
            AuxWeights::from_priors(vec![0.0, 0.0], vec![0.5, 0.5], 0.0),
            Err(Error::DegenerateWeights(_))
        ));
        assert!(AuxWeights::new(vec![0.6, 0.6], vec![0.5, 0.5], vec![1.0, 1.0]).is_err());
        assert!(AuxWeights::new(vec![0.5, 0.5], vec![0.5, 0.5], vec![1.0, -1.0]).is_err());
        assert!(AuxWeights::new(vec![0.5, 0.5], vec![1.0], vec![1.0, 1.0]).is_err());

        let w = AuxWeights::new(vec![0.25, 0.75], vec![0.5, 0.5], vec![4.0, 4.0 / 3.0]).unwrap();
        let n = w.normalized_alphas();
        assert_relative_eq!(0.25 * n[0] + 0.75 * n[1], 1.0, max_relative = 1e-15);
    }

    #[test]
    fn quadratic_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 12, 3, 0.0);
        assert!(mmd2_quadratic(&x, &x, &spec()).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn quadratic_single_points() {
        let s = spec();
        let x = Matrix::from_rows(&[[0.3, -0.2]]).unwrap();
        let y = Matrix::from_rows(&[[1.0, 0.4]]).unwrap();
        let k = s.value(x.row(0), y.row(0));
        assert_relative_eq!(mmd2_quadratic(&x, &y, &s).unwrap(), 2.0 - 2.0 * k, max_relative = 1e-14);
    }

    #[test]
    fn quadratic_grows_with_mean_shift() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut gauss = |mean: f64| {
            let rows: Vec<Vec<f64>> = (0..50)
                .map(|_| (0..2).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); mean + z }).collect::<Vec<f64>>())
                .collect();
            Matrix::from_rows(&rows).unwrap()
        };
        let (a, b, c) = (gauss(0.0), gauss(0.0), gauss(3.0));
        let s = KernelSpec::single(1.0).unwrap();
        assert!(mmd2_quadratic(&a, &c, &s).unwrap() > mmd2_quadratic(&a, &b, &s).unwrap());
    }

    #[test]
    fn quadratic_errors() {
        let a = Matrix::zeros(3, 2);
        assert!(matches!(mmd2_quadratic(&a, &Matrix::zeros(3, 3), &spec()), Err(Error::Shape(_))));
        assert!(matches!(mmd2_quadratic(&a, &Matrix::zeros(0, 2), &spec()), Err(Error::Data(_))));
    }

    #[test]
    fn h_l_cases() {
        let s = spec();
        let a = [0.1, 0.2];
        assert_eq!(h_l(&QuadTuple::unlabeled(&a, &a, &a, &a), &s).unwrap(), 0.0);
        let b = [-0.7, 0.9];
        let k = s.value(&a, &b);
        let v = h_l(&QuadTuple::unlabeled(&a, &a, &b, &b), &s).unwrap();
        assert_relative_eq!(v, 2.0 - 2.0 * k, max_relative = 1e-14);
        assert!(v >= 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let v: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 3)).collect();
            let z = QuadTuple::labeled(&v[0], 0, &v[1], 0, &v[2], &v[3]);
            let expected = h_lw_oracle(&z, &[1.0], &s);
            assert_relative_eq!(h_l(&z, &s).unwrap(), expected, max_relative = 1e-12, epsilon = 1e-15);
        }
        let short = [0.0];
        assert!(matches!(h_l(&QuadTuple::unlabeled(&a, &a, &a, &short), &s), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_cases() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 10, 2, 0.0);
        assert_eq!(mmd2_linear(&x, &x, &s).unwrap(), 0.0);

        let src = random_matrix(&mut rng, 4, 2, 0.0);
        let tgt = random_matrix(&mut rng, 4, 2, 0.5);
        let z1 = QuadTuple::unlabeled(src.row(0), src.row(1), tgt.row(0), tgt.row(1));
        let z2 = QuadTuple::unlabeled(src.row(2), src.row(3), tgt.row(2), tgt.row(3));
        let expected = 0.5 * (h_l(&z1, &s).unwrap() + h_l(&z2, &s).unwrap());
        assert_relative_eq!(mmd2_linear(&src, &tgt, &s).unwrap(), expected, max_relative = 1e-14);

        // odd / unequal counts truncate to the common even count
        let tgt5 = random_matrix(&mut rng, 5, 2, 0.5);
        assert_eq!(
            mmd2_linear(&src, &tgt5, &s).unwrap(),
            mmd2_linear(&src, &tgt5.head(4), &s).unwrap()
        );

        let one = Matrix::zeros(1, 2);
        assert!(matches!(mmd2_linear(&one, &one, &s), Err(Error::Data(_))));
    }

    #[test]
    fn h_lw_cases() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let v: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 3)).collect();
            let z = QuadTuple::labeled(&v[0], 0, &v[1], 1, &v[2], &v[3]);
            assert_eq!(h_lw(&z, &weights(vec![1.0, 1.0]), &s).unwrap(), h_l(&z, &s).unwrap());
            assert_eq!(
                h_lw(&z, &weights(vec![0.0, 0.0]), &s).unwrap(),
                s.value(&v[2], &v[3])
            );
            let alphas = vec![rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
            let w = weights(alphas.clone());
            assert_relative_eq!(
                h_lw(&z, &w, &s).unwrap(),
                h_lw_oracle(&z, &alphas, &s),
                max_relative = 1e-12,
                epsilon = 1e-15
            );
        }
        let a = [0.0, 0.0];
        let unlabeled = QuadTuple::unlabeled(&a, &a, &a, &a);
        assert!(matches!(h_lw(&unlabeled, &weights(vec![1.0]), &s), Err(Error::Data(_))));
    }

    #[test]
    fn weighted_linear_cases() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 8, 2, 0.0);
        let labels = vec![0, 1, 1, 0, 1, 1, 0, 0];
        assert_eq!(
            wmmd2_linear(&x, &labels, &x, &weights(vec![1.0, 1.0]), &s).unwrap(),
            0.0
        );

        // 4-sample fixture: alphas already average to 1 over the batch labels
        let src = random_matrix(&mut rng, 4, 2, 0.0);
        let tgt = random_matrix(&mut rng, 4, 2, 0.3);
        let labels = vec![0, 1, 0, 1];
        let alphas = vec![1.5, 0.5];
        let w = weights(alphas.clone());
        let z1 = QuadTuple::labeled(src.row(0), 0, src.row(1), 1, tgt.row(0), tgt.row(1));
        let z2 = QuadTuple::labeled(src.row(2), 0, src.row(3), 1, tgt.row(2), tgt.row(3));
        let expected = 0.5 * (h_lw_oracle(&z1, &alphas, &s) + h_lw_oracle(&z2, &alphas, &s));
        assert_relative_eq!(
            wmmd2_linear(&src, &labels, &tgt, &w, &s).unwrap(),
            expected,
            max_relative = 1e-12
        );

        // per-batch renormalization: scaling alpha changes nothing
        assert_relative_eq!(
            wmmd2_linear(&src, &labels, &tgt, &w.scaled(3.7).unwrap(), &s).unwrap(),
            expected,
            max_relative = 1e-12
        );
        // a batch whose classes carry no weight is degenerate
        let w0 = weights(vec![0.0, 2.0]);
        assert!(matches!(
            wmmd2_linear(&src, &[0, 0, 0, 0], &tgt, &w0, &s),
            Err(Error::DegenerateWeights(_))
        ));
        assert!(matches!(
            wmmd2_linear(&src, &[0, 0, 0, 2], &tgt, &w, &s),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn weighted_quadratic_cases() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = random_matrix(&mut rng, 9, 2, 0.0);
        let tgt = random_matrix(&mut rng, 7, 2, 0.4);
        let labels = vec![0, 1, 1, 0, 1, 0, 0, 1, 1];
        assert_eq!(
            wmmd2_quadratic(&src, &labels, &tgt, &weights(vec![1.0, 1.0]), &s).unwrap(),
            mmd2_quadratic(&src, &tgt, &s).unwrap()
        );
        let single = vec![0; 9];
        let a = wmmd2_quadratic(&src, &single, &tgt, &weights(vec![0.7, 0.0]), &s).unwrap();
        let b = wmmd2_quadratic(&src, &single, &tgt, &weights(vec![2.9, 0.0]), &s).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
        assert!(matches!(
            wmmd2_quadratic(&src, &single, &tgt, &weights(vec![0.0, 1.0]), &s),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn weighted_quadratic_matches_explicit_embedding_oracle() {
        // With a single Gaussian kernel, compare against the longhand
        // expansion over normalized weights.
        let s = KernelSpec::single(0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let src = random_matrix(&mut rng, 6, 2, 0.0);
        let tgt = random_matrix(&mut rng, 5, 2, 0.2);
        let labels = vec![0, 1, 2, 0, 1, 2];
        let alphas = vec![0.4, 1.1, 2.5];
        let total: f64 = labels.iter().map(|&y| alphas[y]).sum();
        let p: Vec<f64> = labels.iter().map(|&y| alphas[y] / total).collect();
        let mut expected = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                expected += p[i] * p[j] * s.value(src.row(i), src.row(j));
            }
            for j in 0..5 {
                expected -= 2.0 * p[i] / 5.0 * s.value(src.row(i), tgt.row(j));
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                expected += s.value(tgt.row(i), tgt.row(j)) / 25.0;
            }
        }
        let w = AuxWeights::new(vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3], alphas).unwrap();
        assert_relative_eq!(
            wmmd2_quadratic(&src, &labels, &tgt, &w, &s).unwrap(),
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn h_lw_grad_cases() {
        let s = spec();
        let a = [0.3, -0.4];
        let z = QuadTuple::labeled(&a, 0, &a, 1, &a, &a);
        let g = h_lw_grad(&z, &weights(vec![1.0, 1.0]), &s).unwrap();
        for v in [&g.xs1, &g.xs2, &g.xt1, &g.xt2] {
            assert!(v.iter().all(|x| *x == 0.0));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 3)).collect();
        let z = QuadTuple::labeled(&v[0], 0, &v[1], 1, &v[2], &v[3]);
        let g = h_lw_grad(&z, &weights(vec![0.0, 1.3]), &s).unwrap();
        assert!(g.xs1.iter().all(|x| *x == 0.0));
        assert!(g.xs2.iter().any(|x| *x != 0.0));
    }

    #[test]
    fn h_lw_grad_matches_finite_differences() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-5;
        for _ in 0..20 {
            let v: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 3)).collect();
            let alphas = vec![rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
            let w = weights(alphas);
            let (y1, y2) = (rng.random_range(0..2), rng.random_range(0..2));
            let eval = |v: &[Vec<f64>]| {
                h_lw(&QuadTuple::labeled(&v[0], y1, &v[1], y2, &v[2], &v[3]), &w, &s).unwrap()
            };
            let g = h_lw_grad(&QuadTuple::labeled(&v[0], y1, &v[1], y2, &v[2], &v[3]), &w, &s).unwrap();
            let grads = [&g.xs1, &g.xs2, &g.xt1, &g.xt2];
            for member in 0..4 {
                for k in 0..3 {
                    let mut vp = v.clone();
                    vp[member][k] += h;
                    let mut vm = v.clone();
                    vm[member][k] -= h;
                    let fd = (eval(&vp) - eval(&vm)) / (2.0 * h);
                    let an = grads[member][k];
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "member {member} coord {k}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn batch_gradient_matches_per_tuple_gradients() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let src = random_matrix(&mut rng, 7, 3, 0.0);
        let tgt = random_matrix(&mut rng, 6, 3, 0.3);
        let labels = vec![0, 1, 1, 0, 1, 0, 0];
        // alphas averaging to one over the six used labels keep r = 1
        let w = weights(vec![1.5, 0.5]);
        let (v, gs, gt) = wmmd2_linear_with_grad(&src, &labels, &tgt, &w, &s).unwrap();
        assert_eq!(v, wmmd2_linear(&src, &labels, &tgt, &w, &s).unwrap());
        assert!(gs.row(6).iter().all(|x| *x == 0.0));
        for i in (0..6).step_by(2) {
            let z = QuadTuple::labeled(src.row(i), labels[i], src.row(i + 1), labels[i + 1], tgt.row(i), tgt.row(i + 1));
            let g = h_lw_grad(&z, &w, &s).unwrap();
            for k in 0..3 {
                assert_relative_eq!(gs.get(i, k), g.xs1[k] / 3.0, max_relative = 1e-12, epsilon = 1e-16);
                assert_relative_eq!(gs.get(i + 1, k), g.xs2[k] / 3.0, max_relative = 1e-12, epsilon = 1e-16);
                assert_relative_eq!(gt.get(i, k), g.xt1[k] / 3.0, max_relative = 1e-12, epsilon = 1e-16);
                assert_relative_eq!(gt.get(i + 1, k), g.xt2[k] / 3.0, max_relative = 1e-12, epsilon = 1e-16);
            }
        }
    }
}
