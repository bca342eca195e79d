//! Synthetic cardiac-like image pairs with known regional deformations.
//!
//! Geometry: a blood-pool disk (label 0) inside a myocardial annulus
//! (label 1), a crescent-shaped right ventricle (label 2) hugging the
//! annulus, and background (label 3). In 3D the shapes are extruded along z.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffeo::{compose_regional_fields, integrate_svf, DeformationBundle, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::grid::{warp, Dims, Field, LabelGrid, ScalarGrid, VectorGrid};
use crate::par;
use crate::registration::ImagePair;

pub const LVBP: u8 = 0;
pub const LVM: u8 = 1;
pub const RV: u8 = 2;
pub const BACKGROUND: u8 = 3;
pub const REGION_COUNT: usize = 4;
pub const REGION_NAMES: [&str; 4] = ["LVBP", "LVM", "RV", "background"];

const SUPERSAMPLE: usize = 4;
const BORDER_VOXELS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: Vec<usize>,
    /// mm per axis.
    pub spacing: Vec<f64>,
    /// Radii in voxels, measured in the x-y plane.
    pub lvbp_radius: f64,
    pub lvm_outer_radius: f64,
    pub rv_radius: f64,
    /// x offset of the RV disk centre from the LV centre, voxels.
    pub rv_offset: f64,
    /// Background, LVBP, LVM, RV.
    pub intensity_background: f64,
    pub intensity_lvbp: f64,
    pub intensity_lvm: f64,
    pub intensity_rv: f64,
    /// Max norm of each random regional velocity, voxels.
    pub amplitude: f64,
    /// Box-blur radius in voxels (3 passes).
    pub smoothing: usize,
    pub noise_sigma: f64,
    /// Fractional radial shrink of the LV between moving and fixed; 0 disables.
    pub contraction: f64,
    pub k_steps: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: vec![64, 64],
            spacing: vec![1.5, 1.5],
            lvbp_radius: 8.0,
            lvm_outer_radius: 13.0,
            rv_radius: 12.0,
            rv_offset: 14.0,
            intensity_background: 0.2,
            intensity_lvbp: 0.9,
            intensity_lvm: 0.5,
            intensity_rv: 0.6,
            amplitude: 2.0,
            smoothing: 5,
            noise_sigma: 0.01,
            contraction: 0.2,
            k_steps: DEFAULT_STEPS,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Default 3D geometry: 64×64×16 at 1.5×1.5×3.15 mm.
    pub fn default_3d() -> Self {
        PhantomConfig {
            dims: vec![64, 64, 16],
            spacing: vec![1.5, 1.5, 3.15],
            ..Default::default()
        }
    }

    /// Same geometry rescaled to a square 2D lattice of side `n`.
    pub fn scaled_2d(n: usize) -> Self {
        let s = n as f64 / 64.0;
        let d = PhantomConfig::default();
        PhantomConfig {
            dims: vec![n, n],
            lvbp_radius: d.lvbp_radius * s,
            lvm_outer_radius: d.lvm_outer_radius * s,
            rv_radius: d.rv_radius * s,
            rv_offset: d.rv_offset * s,
            amplitude: d.amplitude * s,
            smoothing: ((d.smoothing as f64 * s).round() as usize).max(1),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.len() != 2 && self.dims.len() != 3 {
            return bad(format!("phantom must be 2D or 3D, got {} axes", self.dims.len()));
        }
        if self.dims.iter().any(|&n| n < 8) {
            return bad("phantom axes need at least 8 voxels".into());
        }
        if self.spacing.len() != self.dims.len() || self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("spacing must be positive, one value per axis".into());
        }
        if !(self.lvbp_radius > 0.0 && self.lvbp_radius < self.lvm_outer_radius) {
            return bad(format!(
                "radii must satisfy 0 < lvbp ({}) < lvm outer ({})",
                self.lvbp_radius, self.lvm_outer_radius
            ));
        }
        if !(self.rv_radius > 0.0) || !self.rv_offset.is_finite() {
            return bad("rv radius must be positive".into());
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return bad(format!("amplitude must be >= 0, got {}", self.amplitude));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..0.5).contains(&self.contraction) {
            return bad(format!("contraction must lie in [0, 0.5), got {}", self.contraction));
        }
        if self.smoothing == 0 || self.k_steps == 0 {
            return bad("smoothing and k_steps must be >= 1".into());
        }
        let min_side = self.dims[0].min(self.dims[1]) as f64;
        if amplitude_bound(self.amplitude, min_side) {
            return bad(format!(
                "amplitude {} too large for a {min_side}-voxel lattice",
                self.amplitude
            ));
        }
        Ok(())
    }

    fn lv_center(&self) -> [f64; 2] {
        let cx = (self.dims[0] as f64 - 1.0) / 2.0 - self.rv_offset * 0.3;
        let cy = (self.dims[1] as f64 - 1.0) / 2.0;
        [cx, cy]
    }

    /// Region at an in-plane point (voxel coordinates).
    fn region_at(&self, x: f64, y: f64) -> u8 {
        let [cx, cy] = self.lv_center();
        let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
        if r < self.lvbp_radius {
            return LVBP;
        }
        if r < self.lvm_outer_radius {
            return LVM;
        }
        let rr = ((x - cx - self.rv_offset).powi(2) + (y - cy).powi(2)).sqrt();
        if rr < self.rv_radius && r >= self.lvm_outer_radius + 1.0 {
            return RV;
        }
        BACKGROUND
    }

    fn intensity(&self, label: u8) -> f64 {
        match label {
            LVBP => self.intensity_lvbp,
            LVM => self.intensity_lvm,
            RV => self.intensity_rv,
            _ => self.intensity_background,
        }
    }
}

fn amplitude_bound(amplitude: f64, side: f64) -> bool {
    amplitude >= side / 4.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub moving: ScalarGrid,
    pub fixed: ScalarGrid,
    pub labels_moving: LabelGrid,
    pub labels_fixed: LabelGrid,
    /// The generating regional displacements and their composition.
    pub ground_truth: DeformationBundle,
}

impl PhantomPair {
    pub fn image_pair(&self) -> ImagePair {
        ImagePair {
            moving: self.moving.clone(),
            fixed: self.fixed.clone(),
            labels_moving: self.labels_moving.clone(),
            labels_fixed: self.labels_fixed.clone(),
        }
    }
}

/// Moving image (anti-aliased by supersampling) and its labels.
fn draw_anatomy(cfg: &PhantomConfig, dims: Dims) -> Result<(ScalarGrid, LabelGrid)> {
    let n2 = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let vals = par::map_indexed(dims.len(), |i| {
        let c = dims.coords(i);
        let label = cfg.region_at(c[0] as f64, c[1] as f64);
        let mut acc = 0.0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let ox = (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                let oy = (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                acc += cfg.intensity(cfg.region_at(c[0] as f64 + ox, c[1] as f64 + oy));
            }
        }
        (acc / n2, label)
    });
    let (img, labels): (Vec<f64>, Vec<u8>) = vals.into_iter().unzip();
    Ok((
        ScalarGrid::new(dims, cfg.spacing.clone(), img)?,
        LabelGrid::new(dims, cfg.spacing.clone(), labels, REGION_COUNT)?,
    ))
}

/// Three passes of a clamped box blur of radius `r` along every axis.
fn box_blur(data: &mut [f64], dims: &Dims, r: usize) {
    let mut tmp = vec![0.0; data.len()];
    for _ in 0..3 {
        for axis in 0..dims.ndim() {
            let n = dims.size(axis) as isize;
            for (i, t) in tmp.iter_mut().enumerate() {
                let c = dims.coords(i);
                let mut acc = 0.0;
                for k in -(r as isize)..=(r as isize) {
                    let mut cc = c;
                    cc[axis] = (c[axis] as isize + k).clamp(0, n - 1) as usize;
                    acc += data[dims.index(cc)];
                }
                *t = acc / (2 * r + 1) as f64;
            }
            data.copy_from_slice(&tmp);
        }
    }
}

/// 0 at the image border, rising linearly to 1 at `BORDER_VOXELS` inside.
fn border_weight(dims: &Dims, c: [usize; 3]) -> f64 {
    (0..dims.ndim())
        .map(|a| {
            let d = c[a].min(dims.size(a) - 1 - c[a]) as f64;
            (d / BORDER_VOXELS).min(1.0)
        })
        .fold(1.0, f64::min)
}

fn random_velocity<R: RngCore>(cfg: &PhantomConfig, dims: Dims, rng: &mut R) -> Result<VectorGrid> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let nd = dims.ndim();
    let mut data = Vec::with_capacity(nd * dims.len());
    for _ in 0..nd {
        let mut ch: Vec<f64> = (0..dims.len()).map(|_| rng.sample(StandardNormal)).collect();
        box_blur(&mut ch, &dims, cfg.smoothing);
        data.extend(ch);
    }
    let mut v = VectorGrid::new(dims, cfg.spacing.clone(), data)?;
    let peak = v.max_norm();
    let scale = if peak > 0.0 { cfg.amplitude / peak } else { 0.0 };
    let len = dims.len();
    let d = v.data_mut();
    for i in 0..len {
        let w = scale * border_weight(&dims, dims.coords(i));
        for a in 0..nd {
            d[a * len + i] *= w;
        }
    }
    Ok(v)
}

/// Radial velocity whose flow pulls fixed-image samples outward, so the
/// LV appears shrunk in the fixed image. Linear in the radius up to just
/// past the myocardium, then decaying exponentially.
fn contraction_velocity(cfg: &PhantomConfig, dims: Dims) -> Result<VectorGrid> {
    let [cx, cy] = cfg.lv_center();
    // exp(s) = 1 / (1 - c) maps the fixed radius r to r / (1 - c) in moving.
    let s = -(1.0 - cfg.contraction).ln();
    let r1 = cfg.lvm_outer_radius + 2.0;
    let decay = r1 / 2.0;
    VectorGrid::from_fn(dims, cfg.spacing.clone(), |c| {
        let (dx, dy) = (c[0] as f64 - cx, c[1] as f64 - cy);
        let r = (dx * dx + dy * dy).sqrt();
        let gain = if r <= r1 { s } else { s * r1 / r * (-(r - r1) / decay).exp() };
        let w = gain * border_weight(&dims, c);
        [w * dx, w * dy, 0.0]
    })
}

/// One moving/fixed pair. The fixed image is the moving image warped by
/// the composition of independently drawn regional fields (selected through
/// the moving labels), plus Gaussian noise.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<PhantomPair> {
    cfg.validate()?;
    let dims = Dims::image(&cfg.dims)?;
    let (moving, labels_moving) = draw_anatomy(cfg, dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let radial = if cfg.contraction > 0.0 {
        Some(contraction_velocity(cfg, dims)?)
    } else {
        None
    };
    let mut sub_fields = Vec::with_capacity(REGION_COUNT);
    for r in 0..REGION_COUNT as u8 {
        let mut v = random_velocity(cfg, dims, &mut rng)?;
        if let (Some(rad), LVBP | LVM) = (&radial, r) {
            for (a, b) in v.data_mut().iter_mut().zip(rad.data()) {
                *a += b;
            }
        }
        sub_fields.push(integrate_svf(&v, cfg.k_steps)?);
    }
    let composed = compose_regional_fields(&sub_fields, &labels_moving)?;
    let mut fixed = warp(&moving, &composed)?;
    if cfg.noise_sigma > 0.0 {
        use rand::Rng;
        use rand_distr::StandardNormal;
        for x in fixed.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *x += cfg.noise_sigma * e;
        }
    }
    let labels_fixed = labels_moving.warp_nearest(&composed)?;
    Ok(PhantomPair {
        moving,
        fixed,
        labels_moving,
        labels_fixed,
        ground_truth: DeformationBundle { sub_fields, composed },
    })
}

/// Seed of pair `index` in a dataset drawn from `base`: the first word of
/// the ChaCha stream `index` keyed by `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

/// `n` pairs with seeds derived from `seed`, generated in parallel.
pub fn phantom_dataset(n: usize, base_cfg: &PhantomConfig, seed: u64) -> Result<Vec<PhantomPair>> {
    if n == 0 {
        return Err(Error::Config("phantom dataset needs n >= 1".into()));
    }
    base_cfg.validate()?;
    let cfgs: Vec<PhantomConfig> = (0..n)
        .map(|i| PhantomConfig {
            seed: derive_seed(seed, i as u64),
            ..base_cfg.clone()
        })
        .collect();
    par::map_jobs(cfgs, |c| generate_phantom(&c)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffeo::{interface_jump, jacobian_determinant};

    fn avg_fg_dice(a: &LabelGrid, b: &LabelGrid) -> f64 {
        let mut s = 0.0;
        for l in [LVBP, LVM, RV] {
            let inter = a
                .data()
                .iter()
                .zip(b.data())
                .filter(|(x, y)| **x == l && **y == l)
                .count() as f64;
            s += 2.0 * inter / (a.count(l) + b.count(l)) as f64;
        }
        s / 3.0
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let cfg = PhantomConfig {
            amplitude: 0.0,
            noise_sigma: 0.0,
            contraction: 0.0,
            ..Default::default()
        };
        let p = generate_phantom(&cfg).unwrap();
        assert_eq!(p.moving, p.fixed);
        assert_eq!(p.labels_moving, p.labels_fixed);
    }

    #[test]
    fn seeded_and_distinct() {
        let cfg = PhantomConfig::default();
        assert_eq!(generate_phantom(&cfg).unwrap(), generate_phantom(&cfg).unwrap());
        let set = phantom_dataset(3, &cfg, 11).unwrap();
        assert_eq!(set, phantom_dataset(3, &cfg, 11).unwrap());
        assert_ne!(set[0].fixed, set[1].fixed);
        assert_ne!(set[1].fixed, set[2].fixed);
        let one = phantom_dataset(1, &cfg, 11).unwrap();
        let direct = generate_phantom(&PhantomConfig {
            seed: derive_seed(11, 0),
            ..cfg
        })
        .unwrap();
        assert_eq!(one[0], direct);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = PhantomConfig {
            lvbp_radius: 20.0,
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&bad), Err(Error::Config(_))));
        let bad = PhantomConfig {
            amplitude: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PhantomConfig {
            noise_sigma: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ground_truth_properties() {
        for seed in 0..10 {
            let p = generate_phantom(&PhantomConfig {
                seed,
                ..Default::default()
            })
            .unwrap();
            for u in &p.ground_truth.sub_fields {
                let j = jacobian_determinant(u).unwrap();
                assert!(j.data().iter().all(|&v| v > 0.0), "seed {seed}");
            }
            let jump = interface_jump(&p.ground_truth.composed, &p.labels_moving).unwrap();
            assert!(jump.max_jump > 0.0);
            let d = avg_fg_dice(&p.labels_moving, &p.labels_fixed);
            assert!((0.4..=0.8).contains(&d), "seed {seed}: pre dice {d}");
        }
    }

    #[test]
    fn histogram_stable_across_seeds() {
        let cfg = PhantomConfig::default();
        let set = phantom_dataset(6, &cfg, 3).unwrap();
        let h0 = set[0].labels_fixed.histogram();
        for p in &set[1..] {
            for (a, b) in p.labels_fixed.histogram().iter().zip(&h0) {
                let rel = (*a as f64 - *b as f64).abs() / *b as f64;
                assert!(rel <= 0.2, "{a} vs {b}");
            }
        }
        for p in &set {
            assert!(p.labels_fixed.histogram().iter().all(|&c| c > 0));
        }
    }

    #[test]
    fn three_d_phantom_generates() {
        let cfg = PhantomConfig {
            dims: vec![32, 32, 8],
            spacing: vec![1.5, 1.5, 3.15],
            ..PhantomConfig::scaled_2d(32)
        };
        let p = generate_phantom(&cfg).unwrap();
        assert_eq!(p.fixed.dims().sizes(), &[32, 32, 8]);
        assert_eq!(p.ground_truth.sub_fields[0].dims().ndim(), 3);
    }
}
