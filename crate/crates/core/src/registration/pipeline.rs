use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, RegistrationConfig};
use super::params::{draw_noise, RegionalSVFParams};
use crate::autodiff::{Tape, Tensor, Var};
use crate::diffeo::{compose_regional_tape, integrate_svf_tape, DeformationBundle};
use crate::error::{Error, Result};
use crate::grid::{Dims, Field, LabelGrid, ScalarGrid};

/// Moving/fixed images with their segmentations.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub moving: ScalarGrid,
    pub fixed: ScalarGrid,
    pub labels_moving: LabelGrid,
    pub labels_fixed: LabelGrid,
}

impl ImagePair {
    pub fn new(
        moving: ScalarGrid,
        fixed: ScalarGrid,
        labels_moving: LabelGrid,
        labels_fixed: LabelGrid,
    ) -> Result<Self> {
        let d = moving.dims();
        if fixed.dims() != d || labels_moving.dims() != d || labels_fixed.dims() != d {
            return Err(Error::shape("moving, fixed and label grids differ in extent"));
        }
        if labels_moving.region_count() != labels_fixed.region_count() {
            return Err(Error::shape("label grids disagree on the region count"));
        }
        Ok(ImagePair {
            moving,
            fixed,
            labels_moving,
            labels_fixed,
        })
    }

    pub fn dims(&self) -> Dims {
        *self.moving.dims()
    }

    pub fn spacing(&self) -> &[f64] {
        self.moving.spacing()
    }

    pub fn region_count(&self) -> usize {
        self.labels_fixed.region_count()
    }
}

/// Scalar terms of the objective at one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub ncc: f64,
    pub dice: f64,
    pub regularizer: f64,
}

/// Pair data converted once into tape-ready tensors.
pub(crate) struct Prepared {
    pub dims: Dims,
    pub spacing: Vec<f64>,
    pub moving: Tensor,
    pub fixed: Tensor,
    pub onehot_moving: Tensor,
    pub onehot_fixed: Tensor,
    pub labels_fixed: LabelGrid,
    pub include: Arc<[bool]>,
}

impl Prepared {
    pub(crate) fn new(pair: &ImagePair, regions: usize) -> Result<Self> {
        if pair.region_count() != regions {
            return Err(Error::shape(format!(
                "labels use {} regions, configuration expects {regions}",
                pair.region_count()
            )));
        }
        let dims = pair.dims();
        if dims.sizes().iter().any(|&s| s < 2) {
            return Err(Error::shape("registration needs at least 2 voxels per axis"));
        }
        let hist = pair.labels_fixed.histogram();
        let include: Arc<[bool]> = hist.iter().map(|&c| c > 0).collect();
        Ok(Prepared {
            dims,
            spacing: pair.spacing().to_vec(),
            moving: Tensor::from_field(&pair.moving),
            fixed: Tensor::from_field(&pair.fixed),
            onehot_moving: Tensor::new(regions, dims, pair.labels_moving.one_hot())?,
            onehot_fixed: Tensor::new(regions, dims, pair.labels_fixed.one_hot())?,
            labels_fixed: pair.labels_fixed.clone(),
            include,
        })
    }
}

/// Nodes of one recorded forward pass.
pub(crate) struct Recorded {
    pub loss: Var,
    pub ncc: Var,
    pub dice: Var,
    pub regularizer: Var,
    pub sub_fields: Vec<Var>,
    pub composed: Var,
    pub warped: Var,
}

impl Recorded {
    pub(crate) fn components(&self, tape: &Tape) -> LossComponents {
        LossComponents {
            total: tape.value(self.loss).item(),
            ncc: tape.value(self.ncc).item(),
            dice: tape.value(self.dice).item(),
            regularizer: tape.value(self.regularizer).item(),
        }
    }
}

/// Records sampling, integration, upsampling, composition, warping and the
/// weighted objective for velocity posteriors `(mu[r], log_var[r])`.
/// `noise[r]`, when given, is the reparameterization draw of field `r`.
pub(crate) fn record_pipeline(
    tape: &mut Tape,
    prep: &Prepared,
    mu: &[Var],
    log_var: &[Var],
    noise: Option<&[Vec<f64>]>,
    cfg: &RegistrationConfig,
) -> Result<Recorded> {
    if mu.len() != log_var.len() || mu.is_empty() {
        return Err(Error::shape("mismatched posterior parameter lists"));
    }
    let half = prep.dims.halved();
    let mut sub_fields = Vec::with_capacity(mu.len());
    let mut kls = Vec::with_capacity(mu.len());
    for (r, (&m, &lv)) in mu.iter().zip(log_var).enumerate() {
        if tape.value(m).dims() != &half {
            return Err(Error::shape(format!(
                "velocity parameters on {:?}, expected {:?}",
                tape.value(m).dims().sizes(),
                half.sizes()
            )));
        }
        let z = match noise {
            Some(eps) => {
                let proto = tape.value(m);
                let e = tape.constant(Tensor::new(proto.channels(), *proto.dims(), eps[r].clone())?);
                let half_lv = tape.scale(lv, 0.5);
                let sigma = tape.exp(half_lv);
                let spread = tape.mul(sigma, e)?;
                tape.add(m, spread)?
            }
            None => m,
        };
        let u_half = integrate_svf_tape(tape, z, cfg.k_steps)?;
        let up = tape.resample(u_half, prep.dims)?;
        sub_fields.push(tape.scale(up, 2.0));
        kls.push(tape.kl(m, lv, cfg.weights.lambda_prior)?);
    }
    let composed = match cfg.mode {
        Mode::Ddir => compose_regional_tape(tape, &sub_fields, &prep.labels_fixed)?,
        Mode::Baseline => {
            if sub_fields.len() != 1 {
                return Err(Error::shape("baseline mode uses exactly one field"));
            }
            sub_fields[0]
        }
    };
    let moving = tape.constant(prep.moving.clone());
    let fixed = tape.constant(prep.fixed.clone());
    let onehot_m = tape.constant(prep.onehot_moving.clone());
    let onehot_f = tape.constant(prep.onehot_fixed.clone());
    let warped = tape.warp(moving, composed)?;
    let warped_probs = tape.warp(onehot_m, composed)?;
    let ncc = tape.ncc(warped, fixed)?;
    let dice = tape.soft_dice(warped_probs, onehot_f, prep.include.clone())?;

    let mut kl_sum = kls[0];
    for &k in &kls[1..] {
        kl_sum = tape.add(kl_sum, k)?;
    }
    let regularizer = tape.scale(kl_sum, 1.0 / kls.len() as f64);

    let w = &cfg.weights;
    let a = tape.scale(ncc, w.lambda0);
    let b = tape.scale(dice, w.lambda1);
    let c = tape.scale(regularizer, w.lambda2);
    let ab = tape.add(a, b)?;
    let loss = tape.add(ab, c)?;
    Ok(Recorded {
        loss,
        ncc,
        dice,
        regularizer,
        sub_fields,
        composed,
        warped,
    })
}

/// Noise draws for every field, in field order.
pub(crate) fn draw_field_noise(rng: &mut ChaCha8Rng, fields: usize, len: usize) -> Vec<Vec<f64>> {
    (0..fields).map(|_| draw_noise(rng, len)).collect()
}

/// Output of a forward evaluation outside the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub bundle: DeformationBundle,
    pub warped: ScalarGrid,
    /// Linearly warped one-hot moving labels, one grid per region.
    pub warped_probs: Vec<ScalarGrid>,
    pub components: LossComponents,
}

fn check_mode(params: &RegionalSVFParams, cfg: &RegistrationConfig, mode: Mode) -> Result<()> {
    params.validate()?;
    let want = match mode {
        Mode::Ddir => cfg.regions,
        Mode::Baseline => 1,
    };
    if params.field_count() != want {
        return Err(Error::shape(format!(
            "{mode:?} needs {want} fields, parameters hold {}",
            params.field_count()
        )));
    }
    Ok(())
}

pub(crate) fn forward_with_mode(
    params: &RegionalSVFParams,
    pair: &ImagePair,
    cfg: &RegistrationConfig,
    mode: Mode,
) -> Result<ForwardResult> {
    check_mode(params, cfg, mode)?;
    let cfg = RegistrationConfig {
        mode,
        k_steps: params.k_steps,
        ..cfg.clone()
    };
    let prep = Prepared::new(pair, cfg.regions)?;
    let mut tape = Tape::new();
    let mu: Vec<Var> = params.mu.iter().map(|g| tape.constant(Tensor::from_field(g))).collect();
    let lv: Vec<Var> = params
        .log_var
        .iter()
        .map(|g| tape.constant(Tensor::from_field(g)))
        .collect();
    let noise = if cfg.deterministic_inference {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        Some(draw_field_noise(&mut rng, mu.len(), params.mu[0].data().len()))
    };
    let rec = record_pipeline(&mut tape, &prep, &mu, &lv, noise.as_deref(), &cfg)?;
    collect_forward(&tape, &rec, &prep, cfg.regions)
}

pub(crate) fn collect_forward(tape: &Tape, rec: &Recorded, prep: &Prepared, regions: usize) -> Result<ForwardResult> {
    let sp = prep.spacing.clone();
    let sub_fields = rec
        .sub_fields
        .iter()
        .map(|&v| tape.value(v).to_vector_grid(sp.clone()))
        .collect::<Result<Vec<_>>>()?;
    let composed = tape.value(rec.composed).to_vector_grid(sp.clone())?;
    let warped = tape.value(rec.warped).to_scalar_grid(sp.clone())?;
    let warped_probs = (0..regions)
        .map(|r| {
            let probs = crate::grid::warp(&prep_onehot_channel(prep, r, &sp)?, &composed)?;
            Ok(probs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardResult {
        bundle: DeformationBundle {
            sub_fields,
            composed,
        },
        warped,
        warped_probs,
        components: rec.components(tape),
    })
}

fn prep_onehot_channel(prep: &Prepared, r: usize, sp: &[f64]) -> Result<ScalarGrid> {
    ScalarGrid::new(prep.dims, sp.to_vec(), prep.onehot_moving.channel(r).to_vec())
}

/// Evaluates the regional pipeline: one field per region, composed through
/// the fixed-image labels.
pub fn forward_ddir(params: &RegionalSVFParams, pair: &ImagePair, cfg: &RegistrationConfig) -> Result<ForwardResult> {
    forward_with_mode(params, pair, cfg, Mode::Ddir)
}

/// Evaluates the single-field ablation: no regional composition.
pub fn forward_baseline(
    params: &RegionalSVFParams,
    pair: &ImagePair,
    cfg: &RegistrationConfig,
) -> Result<ForwardResult> {
    forward_with_mode(params, pair, cfg, Mode::Baseline)
}

/// Records the full objective on `tape` for caller-owned posterior nodes
/// (one `(mu, log_var)` pair per field) and returns the scalar loss node.
/// `noise[r]` is the reparameterization draw of field `r`, if sampling.
pub fn record_objective(
    tape: &mut Tape,
    pair: &ImagePair,
    mu: &[Var],
    log_var: &[Var],
    noise: Option<&[Vec<f64>]>,
    cfg: &RegistrationConfig,
) -> Result<Var> {
    let prep = Prepared::new(pair, cfg.regions)?;
    Ok(record_pipeline(tape, &prep, mu, log_var, noise, cfg)?.loss)
}
