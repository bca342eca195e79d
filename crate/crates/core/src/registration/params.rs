use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffeo::integrate_svf;
use crate::error::{Error, Result};
use crate::grid::{resample_to, Dims, Field, LabelGrid, ScalarGrid, VectorGrid};

/// Mean and log-variance of each regional velocity posterior, stored at
/// half the image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionalSVFParams {
    pub mu: Vec<VectorGrid>,
    pub log_var: Vec<VectorGrid>,
    pub k_steps: usize,
    pub seed: u64,
}

impl RegionalSVFParams {
    /// `fields` posteriors on the half-resolution lattice of `image_dims`,
    /// with zero mean and constant log-variance.
    pub fn init(
        image_dims: Dims,
        spacing: &[f64],
        fields: usize,
        init_log_var: f64,
        k_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        let half = image_dims.halved();
        let half_spacing: Vec<f64> = spacing.iter().map(|s| s * 2.0).collect();
        let nd = half.ndim();
        let mu = (0..fields)
            .map(|_| VectorGrid::zeros(half, half_spacing.clone()))
            .collect::<Result<Vec<_>>>()?;
        let log_var = (0..fields)
            .map(|_| VectorGrid::constant(half, half_spacing.clone(), &vec![init_log_var; nd]))
            .collect::<Result<Vec<_>>>()?;
        Ok(RegionalSVFParams {
            mu,
            log_var,
            k_steps,
            seed,
        })
    }

    pub fn field_count(&self) -> usize {
        self.mu.len()
    }

    pub fn half_dims(&self) -> Dims {
        *self.mu[0].dims()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.is_empty() || self.mu.len() != self.log_var.len() {
            return Err(Error::shape("need matching, non-empty mean and log-variance lists"));
        }
        let d = self.half_dims();
        if self
            .mu
            .iter()
            .chain(&self.log_var)
            .any(|g| g.dims() != &d)
        {
            return Err(Error::shape("regional parameters differ in extent"));
        }
        Ok(())
    }
}

/// Splits `img` into one image per label; voxels outside the region are zero.
pub fn split_by_region(img: &ScalarGrid, labels: &LabelGrid) -> Result<Vec<ScalarGrid>> {
    if img.dims() != labels.dims() {
        return Err(Error::shape("image and labels differ in extent"));
    }
    Ok((0..labels.region_count())
        .map(|r| {
            let data = img
                .data()
                .iter()
                .zip(labels.data())
                .map(|(&v, &l)| if l as usize == r { v } else { 0.0 })
                .collect();
            img.rebuild(*img.dims(), data)
        })
        .collect())
}

/// Standard normal draws, consumed in order from `rng`.
pub(crate) fn draw_noise<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// `z = mu_r + exp(log_var_r / 2) * eps` with `eps ~ N(0, I)` from `rng`;
/// exactly `mu_r` when `deterministic`.
pub fn sample_velocity<R: Rng>(
    params: &RegionalSVFParams,
    region: usize,
    rng: &mut R,
    deterministic: bool,
) -> Result<VectorGrid> {
    let mu = params
        .mu
        .get(region)
        .ok_or_else(|| Error::Config(format!("no parameters for region {region}")))?;
    if deterministic {
        return Ok(mu.clone());
    }
    let lv = &params.log_var[region];
    let eps = draw_noise(rng, mu.data().len());
    let data = mu
        .data()
        .iter()
        .zip(lv.data())
        .zip(&eps)
        .map(|((&m, &l), &e)| m + (l * 0.5).exp() * e)
        .collect();
    Ok(mu.rebuild(*mu.dims(), data))
}

/// Integrates a half-resolution velocity and lifts the displacement to the
/// image lattice, doubling it into full-resolution voxel units.
pub fn decode_field(z: &VectorGrid, k_steps: usize, image_dims: Dims, spacing: &[f64]) -> Result<VectorGrid> {
    if image_dims.halved() != *z.dims() {
        return Err(Error::shape(format!(
            "velocity on {:?} is not the half lattice of {:?}",
            z.dims().sizes(),
            image_dims.sizes()
        )));
    }
    let u_half = integrate_svf(z, k_steps)?;
    let up = resample_to(&u_half, image_dims)?;
    VectorGrid::new(image_dims, spacing.to_vec(), up.data().iter().map(|v| v * 2.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sp() -> Vec<f64> {
        vec![1.0, 1.0]
    }

    #[test]
    fn split_partitions_image() {
        let d = Dims::new(&[3, 2]).unwrap();
        let img = ScalarGrid::new(d, sp(), vec![1.0, -2.0, 3.5, 4.0, 0.25, 6.0]).unwrap();
        let labels = LabelGrid::new(d, sp(), vec![0, 1, 2, 3, 3, 1], 4).unwrap();
        let parts = split_by_region(&img, &labels).unwrap();
        assert_eq!(parts.len(), 4);
        for i in 0..6 {
            let s: f64 = parts.iter().map(|p| p.data()[i]).sum();
            assert_eq!(s, img.data()[i]);
        }
        let all2 = LabelGrid::uniform(d, sp(), 2, 4).unwrap();
        let parts = split_by_region(&img, &all2).unwrap();
        assert_eq!(parts[2], img);
        assert!(parts[0].data().iter().all(|&v| v == 0.0));

        let one = Dims::new(&[1, 1]).unwrap();
        let img = ScalarGrid::new(one, sp(), vec![7.0]).unwrap();
        let lab = LabelGrid::new(one, sp(), vec![2], 4).unwrap();
        let parts = split_by_region(&img, &lab).unwrap();
        let nonzero: Vec<usize> = (0..4).filter(|&r| parts[r].data()[0] != 0.0).collect();
        assert_eq!(nonzero, vec![2]);
    }

    #[test]
    fn sampling_contract() {
        let d = Dims::new(&[8, 8]).unwrap();
        let mut p = RegionalSVFParams::init(d, &sp(), 4, -40.0, 7, 1).unwrap();
        for (k, v) in p.mu[1].data_mut().iter_mut().enumerate() {
            *v = (k as f64 * 0.37).sin();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = sample_velocity(&p, 1, &mut rng, false).unwrap();
        assert!(z.max_deviation(&p.mu[1]) < 1e-8);
        let z = sample_velocity(&p, 1, &mut rng, true).unwrap();
        assert_eq!(z, p.mu[1]);

        for v in p.log_var[0].data_mut() {
            *v = 0.0;
        }
        let a = sample_velocity(&p, 0, &mut ChaCha8Rng::seed_from_u64(9), false).unwrap();
        let b = sample_velocity(&p, 0, &mut ChaCha8Rng::seed_from_u64(9), false).unwrap();
        assert_eq!(a, b);
        assert!(a.max_norm() > 0.1);
    }

    #[test]
    fn decode_zero_and_constant() {
        let d = Dims::new(&[8, 6]).unwrap();
        let half = d.halved();
        let z = VectorGrid::zeros(half, sp()).unwrap();
        let u = decode_field(&z, 7, d, &sp()).unwrap();
        assert_eq!(u.dims(), &d);
        assert!(u.data().iter().all(|&v| v == 0.0));
        let c = VectorGrid::constant(half, sp(), &[0.3, -0.45]).unwrap();
        let u = decode_field(&c, 7, d, &sp()).unwrap();
        let want = VectorGrid::constant(d, sp(), &[0.6, -0.9]).unwrap();
        assert!(u.max_deviation(&want) < 1e-12);
        assert!(decode_field(&c, 7, Dims::new(&[16, 16]).unwrap(), &sp()).is_err());
    }
}
