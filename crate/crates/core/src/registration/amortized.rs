use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamParams, AdamState};
use super::config::RegistrationConfig;
use super::direct::RegistrationResult;
use super::network::{check_network_dims, record_network, ToyUNetWeights, WeightVars};
use super::params::{split_by_region, RegionalSVFParams};
use super::pipeline::{collect_forward, draw_field_noise, record_pipeline, ImagePair, LossComponents, Prepared};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::par;

/// A pair with its tape-ready tensors and per-region network inputs.
struct Sample {
    prep: Prepared,
    inputs: Vec<Tensor>,
}

impl Sample {
    fn new(pair: &ImagePair, regions: usize) -> Result<Self> {
        check_network_dims(&pair.dims())?;
        let prep = Prepared::new(pair, regions)?;
        let mov = split_by_region(&pair.moving, &pair.labels_moving)?;
        let fix = split_by_region(&pair.fixed, &pair.labels_fixed)?;
        let inputs = mov
            .iter()
            .zip(&fix)
            .map(|(m, f)| {
                let mut data = m.data().to_vec();
                data.extend_from_slice(f.data());
                Tensor::new(2, pair.dims(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sample { prep, inputs })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training objective over the epoch's pairs.
    pub train_loss: f64,
    pub train_ncc: f64,
    pub train_dice: f64,
    pub train_regularizer: f64,
    /// Mean foreground Dice of the held-out pairs after the epoch.
    pub val_avg_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub weights: ToyUNetWeights,
    pub history: Vec<EpochMetrics>,
}

/// Loss and weight gradients for one pair.
fn pair_gradients(
    weights: &ToyUNetWeights,
    sample: &Sample,
    cfg: &RegistrationConfig,
    noise_seed: Option<u64>,
) -> Result<(LossComponents, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let wv = WeightVars::record(&mut tape, weights, true);
    let (mus, lvs) = record_network(&mut tape, &wv, cfg.mode, &sample.inputs)?;
    let noise = noise_seed.map(|s| {
        let len = tape.value(mus[0]).len();
        draw_field_noise(&mut ChaCha8Rng::seed_from_u64(s), mus.len(), len)
    });
    let rec = record_pipeline(&mut tape, &sample.prep, &mus, &lvs, noise.as_deref(), cfg)?;
    let comps = rec.components(&tape);
    let grads = tape.backward(rec.loss)?;
    let g = wv
        .vars
        .iter()
        .zip(weights.named_tensors())
        .map(|(&v, (_, t))| grads.get_or_zeros(v, t))
        .collect();
    Ok((comps, g))
}

fn predict_sample(weights: &ToyUNetWeights, sample: &Sample, cfg: &RegistrationConfig, pair: &ImagePair) -> Result<RegistrationResult> {
    let mut tape = Tape::new();
    let wv = WeightVars::record(&mut tape, weights, false);
    let (mus, lvs) = record_network(&mut tape, &wv, weights.mode, &sample.inputs)?;
    let noise = if cfg.deterministic_inference {
        None
    } else {
        let len = tape.value(mus[0]).len();
        Some(draw_field_noise(&mut ChaCha8Rng::seed_from_u64(cfg.seed), mus.len(), len))
    };
    let run_cfg = RegistrationConfig {
        mode: weights.mode,
        ..cfg.clone()
    };
    let rec = record_pipeline(&mut tape, &sample.prep, &mus, &lvs, noise.as_deref(), &run_cfg)?;
    let out = collect_forward(&tape, &rec, &sample.prep, cfg.regions)?;
    let half_sp: Vec<f64> = pair.spacing().iter().map(|s| s * 2.0).collect();
    let grids = |vs: &[crate::autodiff::Var]| {
        vs.iter()
            .map(|&v| tape.value(v).to_vector_grid(half_sp.clone()))
            .collect::<Result<Vec<_>>>()
    };
    let params = RegionalSVFParams {
        mu: grids(&mus)?,
        log_var: grids(&lvs)?,
        k_steps: cfg.k_steps,
        seed: cfg.seed,
    };
    let warped_labels = pair.labels_moving.warp_nearest(&out.bundle.composed)?;
    Ok(RegistrationResult {
        bundle: out.bundle,
        warped: out.warped,
        warped_labels,
        loss_trace: Vec::new(),
        final_loss: out.components,
        params,
    })
}

/// Registers one pair with trained weights (single forward pass).
pub fn predict_amortized(weights: &ToyUNetWeights, pair: &ImagePair, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    weights.validate()?;
    if weights.regions() != cfg.regions {
        return Err(Error::shape(format!(
            "network has {} channels, configuration expects {} regions",
            weights.regions(),
            cfg.regions
        )));
    }
    let sample = Sample::new(pair, cfg.regions)?;
    predict_sample(weights, &sample, cfg, pair)
}

fn foreground_dice(result: &RegistrationResult, pair: &ImagePair) -> Result<f64> {
    let regions = pair.region_count();
    let fg: Vec<u8> = if regions == 1 { vec![0] } else { (0..regions as u8 - 1).collect() };
    let mut s = 0.0;
    for &l in &fg {
        s += crate::eval::dice_score(&result.warped_labels, &pair.labels_fixed, l)?.value;
    }
    Ok(s / fg.len() as f64)
}

/// Minibatch Adam training of the encoder-decoder on `train`. After every
/// epoch the held-out pairs in `val` are registered and their mean
/// foreground Dice recorded.
pub fn train_amortized(train: &[ImagePair], val: &[ImagePair], cfg: &RegistrationConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::EmptyDataset(format!(
            "amortized training needs at least 2 pairs, got {}",
            train.len()
        )));
    }
    let samples = train
        .iter()
        .map(|p| Sample::new(p, cfg.regions))
        .collect::<Result<Vec<_>>>()?;
    let val_samples = val
        .iter()
        .map(|p| Sample::new(p, cfg.regions))
        .collect::<Result<Vec<_>>>()?;

    let mut weights = ToyUNetWeights::init(cfg.mode, cfg.regions, cfg.base_width, cfg.init_log_var, cfg.seed)?;
    let hp = AdamParams::with_lr(cfg.learning_rate());
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, Option<u64>)> = batch
                .iter()
                .map(|&i| (i, cfg.sample_during_training.then(|| rng.next_u64())))
                .collect();
            let w = &weights;
            let results = par::map_jobs(jobs, |(i, seed)| pair_gradients(w, &samples[i], cfg, seed));
            let mut total: Option<Vec<Tensor>> = None;
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (comps, grads) = r?;
                if !comps.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        iteration: step,
                        value: comps.total,
                    });
                }
                sums[0] += comps.total;
                sums[1] += comps.ncc;
                sums[2] += comps.dice;
                sums[3] += comps.regularizer;
                match &mut total {
                    None => total = Some(grads.into_iter().map(|g| g.with_data(g.data().iter().map(|x| x * scale).collect())).collect()),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y * scale;
                            }
                        }
                    }
                }
            }
            let grads = total.expect("non-empty batch");
            adam_step(&mut weights.tensors_mut(), &grads, &mut state, &hp)?;
            step += 1;
        }
        if !weights.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: step,
                value: f64::NAN,
            });
        }
        let n = samples.len() as f64;
        let val_avg_dice = if val_samples.is_empty() {
            None
        } else {
            let w = &weights;
            let idx: Vec<usize> = (0..val_samples.len()).collect();
            let dice = par::map_jobs(idx, |i| {
                predict_sample(w, &val_samples[i], cfg, &val[i]).and_then(|r| foreground_dice(&r, &val[i]))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            Some(dice.iter().sum::<f64>() / dice.len() as f64)
        };
        let m = EpochMetrics {
            epoch,
            train_loss: sums[0] / n,
            train_ncc: sums[1] / n,
            train_dice: sums[2] / n,
            train_regularizer: sums[3] / n,
            val_avg_dice,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} dice-loss {:.4} val dice {:?}",
            m.train_loss,
            m.train_dice,
            m.val_avg_dice
        );
        history.push(m);
    }
    Ok(TrainedModel { weights, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{phantom_dataset, PhantomConfig};
    use crate::registration::config::{Mode, Regime};

    fn data(n: usize) -> Vec<ImagePair> {
        phantom_dataset(n, &PhantomConfig::scaled_2d(32), 5)
            .unwrap()
            .iter()
            .map(|p| p.image_pair())
            .collect()
    }

    fn cfg(epochs: usize) -> RegistrationConfig {
        RegistrationConfig {
            regime: Regime::Amortized,
            epochs,
            ..Default::default()
        }
    }

    #[test]
    fn smoke_one_epoch() {
        let d = data(3);
        let m = train_amortized(&d[..2], &d[2..], &cfg(1)).unwrap();
        assert!(m.weights.is_finite());
        assert_eq!(m.history.len(), 1);
        assert!(m.history[0].train_loss.is_finite());
        assert!(m.history[0].val_avg_dice.is_some());
        let again = train_amortized(&d[..2], &d[2..], &cfg(1)).unwrap();
        assert_eq!(again, m);

        let r = predict_amortized(&m.weights, &d[2], &cfg(1)).unwrap();
        assert_eq!(r.bundle.sub_fields.len(), 4);
    }

    #[test]
    fn baseline_and_errors() {
        let d = data(2);
        let c = RegistrationConfig {
            mode: Mode::Baseline,
            ..cfg(1)
        };
        let m = train_amortized(&d, &[], &c).unwrap();
        assert_eq!(m.weights.heads.len(), 1);
        assert_eq!(predict_amortized(&m.weights, &d[0], &c).unwrap().bundle.sub_fields.len(), 1);
        assert!(matches!(train_amortized(&d[..1], &[], &cfg(1)), Err(Error::EmptyDataset(_))));
    }
}
