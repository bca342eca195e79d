use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamParams, AdamState};
use super::config::RegistrationConfig;
use super::params::RegionalSVFParams;
use super::pipeline::{draw_field_noise, forward_with_mode, record_pipeline, ImagePair, LossComponents, Prepared};
use crate::autodiff::{Tape, Tensor, Var};
use crate::diffeo::DeformationBundle;
use crate::error::{Error, Result};
use crate::grid::{LabelGrid, ScalarGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub bundle: DeformationBundle,
    pub warped: ScalarGrid,
    /// Moving labels warped by nearest-neighbor lookup.
    pub warped_labels: LabelGrid,
    /// Objective at every optimizer step, before the update.
    pub loss_trace: Vec<LossComponents>,
    /// Objective of the final decode.
    pub final_loss: LossComponents,
    pub params: RegionalSVFParams,
}

impl RegistrationResult {
    pub fn mean_displacement(&self) -> f64 {
        self.bundle.composed.mean_norm()
    }
}

fn to_tensors(params: &RegionalSVFParams) -> Vec<Tensor> {
    params
        .mu
        .iter()
        .chain(&params.log_var)
        .map(Tensor::from_field)
        .collect()
}

fn write_back(params: &mut RegionalSVFParams, tensors: &[Tensor]) {
    let f = params.field_count();
    for (g, t) in params.mu.iter_mut().chain(params.log_var.iter_mut()).zip(tensors) {
        g.data_mut().copy_from_slice(t.data());
    }
    debug_assert_eq!(tensors.len(), 2 * f);
}

/// Optimizes regional (or single, in baseline mode) velocity posteriors for
/// one pair with Adam, starting from the identity.
pub fn register_direct(pair: &ImagePair, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    let prep = Prepared::new(pair, cfg.regions)?;
    let fields = cfg.field_count();
    let mut params = RegionalSVFParams::init(
        pair.dims(),
        pair.spacing(),
        fields,
        cfg.init_log_var,
        cfg.k_steps,
        cfg.seed,
    )?;
    let mut tensors = to_tensors(&params);
    let half_len = tensors[0].len();
    let hp = AdamParams::with_lr(cfg.learning_rate());
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let noise = cfg
            .sample_during_training
            .then(|| draw_field_noise(&mut rng, fields, half_len));
        let rec = record_pipeline(&mut tape, &prep, &vars[..fields], &vars[fields..], noise.as_deref(), cfg)?;
        let comps = rec.components(&tape);
        trace.push(comps);
        if !comps.total.is_finite() {
            log::error!("non-finite loss at iteration {it}");
            return Err(Error::NonFiniteLoss {
                iteration: it,
                value: comps.total,
            });
        }
        let grads = tape.backward(rec.loss)?;
        let g: Vec<Tensor> = vars
            .iter()
            .zip(&tensors)
            .map(|(&v, t)| grads.get_or_zeros(v, t))
            .collect();
        let mut refs: Vec<&mut Tensor> = tensors.iter_mut().collect();
        adam_step(&mut refs, &g, &mut state, &hp)?;
        if it % 50 == 0 {
            log::debug!(
                "iter {it}: total {:.5} ncc {:.5} dice {:.5} kl {:.5}",
                comps.total,
                comps.ncc,
                comps.dice,
                comps.regularizer
            );
        }
    }
    write_back(&mut params, &tensors);
    if tensors.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFiniteLoss {
            iteration: cfg.iterations,
            value: f64::NAN,
        });
    }

    let out = forward_with_mode(&params, pair, cfg, cfg.mode)?;
    let warped_labels = pair.labels_moving.warp_nearest(&out.bundle.composed)?;
    Ok(RegistrationResult {
        bundle: out.bundle,
        warped: out.warped,
        warped_labels,
        loss_trace: trace,
        final_loss: out.components,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Field};
    use crate::registration::config::Mode;
    use crate::registration::pipeline::{forward_baseline, forward_ddir};

    fn blob_pair(shift: f64) -> ImagePair {
        let d = Dims::new(&[16, 16]).unwrap();
        let sp = vec![1.0, 1.0];
        let img = |s: f64| {
            ScalarGrid::from_fn(d, sp.clone(), |c| {
                let x = c[0] as f64 - 7.5 - s;
                let y = c[1] as f64 - 7.5;
                (-(x * x + y * y) / 12.0).exp() + 0.05 * (c[0] as f64 * 0.3).sin()
            })
            .unwrap()
        };
        let lab = |s: f64| {
            let data = (0..d.len())
                .map(|i| {
                    let c = d.coords(i);
                    let x = c[0] as f64 - 7.5 - s;
                    let y = c[1] as f64 - 7.5;
                    let r = (x * x + y * y).sqrt();
                    if r < 2.5 {
                        0
                    } else if r < 4.0 {
                        1
                    } else if x > 4.0 {
                        2
                    } else {
                        3
                    }
                })
                .collect();
            LabelGrid::new(d, sp.clone(), data, 4).unwrap()
        };
        ImagePair::new(img(0.0), img(shift), lab(0.0), lab(shift)).unwrap()
    }

    #[test]
    fn identity_params_reproduce_moving() {
        let pair = blob_pair(1.0);
        let cfg = RegistrationConfig::default();
        let p = RegionalSVFParams::init(pair.dims(), pair.spacing(), 4, -40.0, 7, 0).unwrap();
        let out = forward_ddir(&p, &pair, &cfg).unwrap();
        assert!(out.bundle.composed.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.warped, pair.moving);
        let ncc = crate::losses::ncc_loss(&pair.moving, &pair.fixed).unwrap();
        assert_eq!(out.components.ncc, ncc);

        let p1 = RegionalSVFParams::init(pair.dims(), pair.spacing(), 1, -40.0, 7, 0).unwrap();
        let out = forward_baseline(&p1, &pair, &cfg).unwrap();
        assert_eq!(out.bundle.sub_fields.len(), 1);
        assert_eq!(out.warped, pair.moving);
        assert!(forward_baseline(&p, &pair, &cfg).is_err());
    }

    #[test]
    fn single_region_ddir_equals_baseline() {
        let d = Dims::new(&[16, 16]).unwrap();
        let sp = vec![1.0, 1.0];
        let m = ScalarGrid::from_fn(d, sp.clone(), |c| ((c[0] * 3 + c[1] * 5) % 7) as f64).unwrap();
        let f = ScalarGrid::from_fn(d, sp.clone(), |c| ((c[0] * 2 + c[1]) % 5) as f64).unwrap();
        let l = LabelGrid::uniform(d, sp.clone(), 0, 1).unwrap();
        let pair = ImagePair::new(m, f, l.clone(), l).unwrap();
        let cfg = RegistrationConfig {
            regions: 1,
            ..Default::default()
        };
        let mut p = RegionalSVFParams::init(d, &sp, 1, -3.0, 7, 5).unwrap();
        for (k, v) in p.mu[0].data_mut().iter_mut().enumerate() {
            *v = 0.4 * (k as f64 * 0.71).sin();
        }
        let a = forward_ddir(&p, &pair, &cfg).unwrap();
        let b = forward_baseline(&p, &pair, &cfg).unwrap();
        assert!(a.bundle.composed.max_deviation(&b.bundle.composed) <= 1e-12);
        assert_eq!(a.components, b.components);
    }

    #[test]
    fn direct_registration_reduces_loss_and_is_deterministic() {
        let pair = blob_pair(1.5);
        let cfg = RegistrationConfig {
            iterations: 40,
            ..Default::default()
        };
        let a = register_direct(&pair, &cfg).unwrap();
        assert_eq!(a.loss_trace.len(), 40);
        assert!(a.final_loss.total < a.loss_trace[0].total);
        assert_eq!(a.bundle.sub_fields.len(), 4);
        let b = register_direct(&pair, &cfg).unwrap();
        assert_eq!(a, b);

        let base = register_direct(
            &pair,
            &RegistrationConfig {
                mode: Mode::Baseline,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(base.bundle.sub_fields.len(), 1);
        assert!(base.final_loss.total < base.loss_trace[0].total);
    }

    #[test]
    fn identical_pair_stays_near_identity() {
        let pair = blob_pair(0.0);
        let cfg = RegistrationConfig {
            iterations: 60,
            ..Default::default()
        };
        let r = register_direct(&pair, &cfg).unwrap();
        assert!(r.mean_displacement() < 0.05, "{}", r.mean_displacement());
    }
}
