//! Registration objective: global NCC, soft Dice, the Laplacian-prior KL
//! regularizer and their weighted sum.
//!
//! The slice kernels here back both the plain functions and the tape
//! primitives in [`crate::autodiff`], so values agree bit-exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Field};

/// Smoothing constant of the soft Dice denominator.
pub const DICE_EPS: f64 = 1e-5;

/// Relative variance floor below which NCC is undefined.
const NCC_VARIANCE_FLOOR: f64 = 1e-12;

/// Weights of the total objective and the prior precision scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// NCC weight.
    pub lambda0: f64,
    /// Dice weight.
    pub lambda1: f64,
    /// KL weight.
    pub lambda2: f64,
    /// Scale of the Laplacian prior precision.
    pub lambda_prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: 20.0,
            lambda1: 200.0,
            lambda2: 0.1,
            lambda_prior: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda0, self.lambda1, self.lambda2, self.lambda_prior];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be >= 0: {self:?}")));
        }
        if self.lambda_prior <= 0.0 {
            return Err(Error::NonPositivePrior(self.lambda_prior));
        }
        Ok(())
    }
}

struct NccStats {
    xm: f64,
    ym: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

fn ncc_stats(x: &[f64], y: &[f64]) -> Result<NccStats> {
    if x.len() != y.len() {
        return Err(Error::shape("ncc inputs differ in length"));
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("ncc needs at least two voxels"));
    }
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let a = xi - xm;
        let b = yi - ym;
        saa += a * a;
        sbb += b * b;
        sab += a * b;
        sxx += xi * xi;
        syy += yi * yi;
    }
    if saa <= NCC_VARIANCE_FLOOR * sxx || sbb <= NCC_VARIANCE_FLOOR * syy {
        return Err(Error::ZeroVariance);
    }
    Ok(NccStats {
        xm,
        ym,
        saa,
        sbb,
        sab,
    })
}

pub(crate) fn ncc_forward(x: &[f64], y: &[f64]) -> Result<f64> {
    let s = ncc_stats(x, y)?;
    Ok(1.0 - s.sab / (s.saa.sqrt() * s.sbb.sqrt()))
}

/// Gradients of `g * ncc(x, y)` with respect to `x` and `y`.
pub(crate) fn ncc_backward(x: &[f64], y: &[f64], g: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = ncc_stats(x, y)?;
    let denom = s.saa.sqrt() * s.sbb.sqrt();
    let r = s.sab / denom;
    let gx = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| -g * ((yi - s.ym) / denom - r * (xi - s.xm) / s.saa))
        .collect();
    let gy = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| -g * ((xi - s.xm) / denom - r * (yi - s.ym) / s.sbb))
        .collect();
    Ok((gx, gy))
}

struct DiceTerms {
    spq: f64,
    den: f64,
}

fn dice_terms(p: &[f64], q: &[f64]) -> DiceTerms {
    let (mut spq, mut spp, mut sqq) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(q) {
        spq += a * b;
        spp += a * a;
        sqq += b * b;
    }
    DiceTerms {
        spq,
        den: spp + sqq + DICE_EPS,
    }
}

fn included_count(include: &[bool]) -> Result<usize> {
    let k = include.iter().filter(|&&b| b).count();
    if k == 0 {
        return Err(Error::EmptyInput("soft dice with no included classes"));
    }
    Ok(k)
}

/// Mean over included classes of `1 - 2 Σpq / (Σp² + Σq² + ε)`. Inputs are
/// planar with `include.len()` channels of `n` voxels each.
pub(crate) fn dice_forward(pred: &[f64], target: &[f64], n: usize, include: &[bool]) -> Result<f64> {
    let classes = include.len();
    if pred.len() != classes * n || target.len() != classes * n {
        return Err(Error::shape("soft dice class planes do not match"));
    }
    let k = included_count(include)?;
    let mut total = 0.0;
    for c in 0..classes {
        if !include[c] {
            continue;
        }
        let t = dice_terms(&pred[c * n..(c + 1) * n], &target[c * n..(c + 1) * n]);
        total += 1.0 - 2.0 * t.spq / t.den;
    }
    Ok(total / k as f64)
}

pub(crate) fn dice_backward(
    pred: &[f64],
    target: &[f64],
    n: usize,
    include: &[bool],
    g: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let classes = include.len();
    let k = included_count(include)? as f64;
    let mut gp = vec![0.0; pred.len()];
    let mut gq = vec![0.0; target.len()];
    for c in 0..classes {
        if !include[c] {
            continue;
        }
        let p = &pred[c * n..(c + 1) * n];
        let q = &target[c * n..(c + 1) * n];
        let t = dice_terms(p, q);
        let scale = -g / k;
        for i in 0..n {
            gp[c * n + i] = scale * (2.0 * q[i] / t.den - 4.0 * t.spq * p[i] / (t.den * t.den));
            gq[c * n + i] = scale * (2.0 * p[i] / t.den - 4.0 * t.spq * q[i] / (t.den * t.den));
        }
    }
    Ok((gp, gq))
}

/// Number of lattice neighbors of voxel `c` (2·ndim in the interior).
#[inline]
pub(crate) fn degree(dims: &Dims, c: [usize; 3]) -> usize {
    (0..dims.ndim())
        .map(|a| usize::from(c[a] > 0) + usize::from(c[a] + 1 < dims.size(a)))
        .sum()
}

fn kl_check(mu: &[f64], log_var: &[f64], channels: usize, dims: &Dims, lambda_prior: f64) -> Result<()> {
    if !(lambda_prior > 0.0) {
        return Err(Error::NonPositivePrior(lambda_prior));
    }
    if mu.len() != log_var.len() || mu.len() != channels * dims.len() {
        return Err(Error::shape("kl mean and log-variance shapes differ"));
    }
    if mu.is_empty() {
        return Err(Error::EmptyInput("kl of an empty field"));
    }
    Ok(())
}

/// KL divergence (additive constants dropped) between `N(mu, diag(exp(log_var)))`
/// and the prior `N(0, Λ⁻¹)` with precision `Λ = λ (D − A)` on the lattice graph.
pub(crate) fn kl_forward(
    mu: &[f64],
    log_var: &[f64],
    channels: usize,
    dims: &Dims,
    lambda_prior: f64,
) -> Result<f64> {
    kl_check(mu, log_var, channels, dims, lambda_prior)?;
    let n = dims.len();
    let mut trace = 0.0;
    let mut smooth = 0.0;
    let mut logdet = 0.0;
    for c in 0..channels {
        let m = &mu[c * n..(c + 1) * n];
        let lv = &log_var[c * n..(c + 1) * n];
        for i in 0..n {
            let co = dims.coords(i);
            trace += degree(dims, co) as f64 * lv[i].exp();
            logdet += lv[i];
            for a in 0..dims.ndim() {
                if co[a] + 1 < dims.size(a) {
                    let mut nb = co;
                    nb[a] += 1;
                    let d = m[i] - m[dims.index(nb)];
                    smooth += d * d;
                }
            }
        }
    }
    let total = mu.len() as f64;
    Ok((lambda_prior * trace + lambda_prior * smooth - logdet) / (2.0 * total))
}

pub(crate) fn kl_backward(
    mu: &[f64],
    log_var: &[f64],
    channels: usize,
    dims: &Dims,
    lambda_prior: f64,
    g: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    kl_check(mu, log_var, channels, dims, lambda_prior)?;
    let n = dims.len();
    let s = g / (2.0 * mu.len() as f64);
    let mut gm = vec![0.0; mu.len()];
    let mut gl = vec![0.0; mu.len()];
    for c in 0..channels {
        let m = &mu[c * n..(c + 1) * n];
        for i in 0..n {
            let co = dims.coords(i);
            let deg = degree(dims, co) as f64;
            gl[c * n + i] = s * (lambda_prior * deg * log_var[c * n + i].exp() - 1.0);
            let mut lap = 0.0;
            for a in 0..dims.ndim() {
                for step in [-1isize, 1] {
                    let v = co[a] as isize + step;
                    if v >= 0 && (v as usize) < dims.size(a) {
                        let mut nb = co;
                        nb[a] = v as usize;
                        lap += m[i] - m[dims.index(nb)];
                    }
                }
            }
            gm[c * n + i] = s * lambda_prior * 2.0 * lap;
        }
    }
    Ok((gm, gl))
}

/// `1 − Pearson(x, y)` over all voxels; in `[0, 2]`.
pub fn ncc_loss(x: &impl Field, y: &impl Field) -> Result<f64> {
    if x.dims() != y.dims() || x.channels() != y.channels() {
        return Err(Error::shape("ncc inputs differ in extent"));
    }
    ncc_forward(x.data(), y.data())
}

/// Soft Dice averaged over all classes; one grid per class on each side.
pub fn soft_dice_loss<G: Field>(warped_probs: &[G], target_onehot: &[G]) -> Result<f64> {
    if warped_probs.len() != target_onehot.len() || warped_probs.is_empty() {
        return Err(Error::shape("class counts differ"));
    }
    let dims = *warped_probs[0].dims();
    let n = warped_probs[0].data().len();
    if warped_probs
        .iter()
        .chain(target_onehot)
        .any(|g| g.dims() != &dims || g.data().len() != n)
    {
        return Err(Error::shape("class grids differ in extent"));
    }
    let pred: Vec<f64> = warped_probs.iter().flat_map(|g| g.data().iter().copied()).collect();
    let target: Vec<f64> = target_onehot.iter().flat_map(|g| g.data().iter().copied()).collect();
    dice_forward(&pred, &target, n, &vec![true; warped_probs.len()])
}

/// KL regularizer of one probabilistic velocity field.
pub fn kl_loss<G: Field>(mu: &G, log_var: &G, lambda_prior: f64) -> Result<f64> {
    if mu.dims() != log_var.dims() || mu.channels() != log_var.channels() {
        return Err(Error::shape("kl mean and log-variance shapes differ"));
    }
    kl_forward(mu.data(), log_var.data(), mu.channels(), mu.dims(), lambda_prior)
}

/// Mean of the per-region KL terms.
pub fn combined_regularizer(per_region: &[f64]) -> Result<f64> {
    if per_region.is_empty() {
        return Err(Error::EmptyInput("no regional regularizers"));
    }
    Ok(per_region.iter().sum::<f64>() / per_region.len() as f64)
}

pub fn total_loss(ncc: f64, dice: f64, l_r: f64, w: &LossWeights) -> f64 {
    w.lambda0 * ncc + w.lambda1 * dice + w.lambda2 * l_r
}
