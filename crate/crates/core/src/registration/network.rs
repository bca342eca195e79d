//! Toy 2D encoder-decoder, one per region channel, predicting velocity
//! posteriors at half resolution.
//!
//! Per channel: `enc0` (stride 1) and `enc1..enc4` (stride 2) down to 1/16,
//! then three decoder stages (nearest x2, concat skip, conv) back up to 1/2.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::Mode;
use crate::autodiff::{Tape, Tensor, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::grid::Dims;

pub const KERNEL: usize = 3;
const ENCODER_STAGES: usize = 5;
const DECODER_STAGES: usize = 3;
pub const DOWNSAMPLING: usize = 16;
const HEAD_MU_STD: f64 = 1e-3;
const HEAD_LOGVAR_STD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `cout * cin` channels on a `k x k` lattice.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn zeros(cin: usize, cout: usize) -> Result<Self> {
        Ok(ConvLayer {
            weight: Tensor::zeros(cin * cout, Dims::new(&[KERNEL, KERNEL])?),
            bias: Tensor::zeros(cout, Dims::scalar()),
        })
    }

    fn init(cin: usize, cout: usize, std: f64, bias: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut l = Self::zeros(cin, cout)?;
        for w in l.weight.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *w = std * e;
        }
        l.bias.data_mut().fill(bias);
        Ok(l)
    }

    fn he(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let fan_in = (cin * KERNEL * KERNEL) as f64;
        let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
        Self::init(cin, cout, std, 0.0, rng)
    }

    pub fn cin(&self) -> usize {
        self.weight.channels() / self.cout()
    }

    pub fn cout(&self) -> usize {
        self.bias.channels()
    }
}

/// Mean and log-variance convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub mu: ConvLayer,
    pub log_var: ConvLayer,
}

impl Head {
    fn init(cin: usize, nd: usize, init_log_var: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Head {
            mu: ConvLayer::init(cin, nd, HEAD_MU_STD, 0.0, rng)?,
            log_var: ConvLayer::init(cin, nd, HEAD_LOGVAR_STD, init_log_var, rng)?,
        })
    }
}

/// Encoder-decoder of one region channel: five encoder then three decoder
/// convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetChannel {
    pub layers: Vec<ConvLayer>,
}

impl UNetChannel {
    fn init(width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layers = vec![ConvLayer::he(2, width, rng)?];
        for _ in 1..ENCODER_STAGES {
            layers.push(ConvLayer::he(width, width, rng)?);
        }
        for _ in 0..DECODER_STAGES {
            layers.push(ConvLayer::he(2 * width, width, rng)?);
        }
        Ok(UNetChannel { layers })
    }
}

/// Weights of the amortized model: one encoder-decoder per region and
/// either one head per region (regional mode) or a single head over the
/// concatenated features (baseline).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyUNetWeights {
    pub mode: Mode,
    pub base_width: usize,
    pub channels: Vec<UNetChannel>,
    pub heads: Vec<Head>,
}

impl ToyUNetWeights {
    pub fn init(mode: Mode, regions: usize, base_width: usize, init_log_var: f64, seed: u64) -> Result<Self> {
        if regions == 0 || base_width == 0 {
            return Err(Error::Config("network needs >= 1 region and width >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = (0..regions)
            .map(|_| UNetChannel::init(base_width, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let heads = match mode {
            Mode::Ddir => (0..regions)
                .map(|_| Head::init(base_width, 2, init_log_var, &mut rng))
                .collect::<Result<Vec<_>>>()?,
            Mode::Baseline => vec![Head::init(regions * base_width, 2, init_log_var, &mut rng)?],
        };
        Ok(ToyUNetWeights {
            mode,
            base_width,
            channels,
            heads,
        })
    }

    pub fn regions(&self) -> usize {
        self.channels.len()
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (c, ch) in self.channels.iter().enumerate() {
            for (k, l) in ch.layers.iter().enumerate() {
                out.push((format!("channel{c}_{}_weight", layer_name(k)), &l.weight));
                out.push((format!("channel{c}_{}_bias", layer_name(k)), &l.bias));
            }
        }
        for (h, head) in self.heads.iter().enumerate() {
            out.push((format!("head{h}_mu_weight"), &head.mu.weight));
            out.push((format!("head{h}_mu_bias"), &head.mu.bias));
            out.push((format!("head{h}_logvar_weight"), &head.log_var.weight));
            out.push((format!("head{h}_logvar_bias"), &head.log_var.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for ch in &mut self.channels {
            for l in &mut ch.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        for head in &mut self.heads {
            out.push(&mut head.mu.weight);
            out.push(&mut head.mu.bias);
            out.push(&mut head.log_var.weight);
            out.push(&mut head.log_var.bias);
        }
        out
    }

    pub fn tensor_count(&self) -> usize {
        self.channels.len() * 2 * (ENCODER_STAGES + DECODER_STAGES) + self.heads.len() * 4
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Rebuilds weights of the given layout from tensors in
    /// [`named_tensors`](Self::named_tensors) order.
    pub fn from_tensors(mode: Mode, regions: usize, base_width: usize, tensors: Vec<Tensor>) -> Result<Self> {
        let mut w = Self::init(mode, regions, base_width, 0.0, 0)?;
        if tensors.len() != w.tensor_count() {
            return Err(Error::shape(format!(
                "expected {} weight tensors, got {}",
                w.tensor_count(),
                tensors.len()
            )));
        }
        for (slot, t) in w.tensors_mut().into_iter().zip(tensors) {
            if !slot.same_shape(&t) {
                return Err(Error::shape("weight tensor shape differs from the layout"));
            }
            *slot = t;
        }
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let want_heads = match self.mode {
            Mode::Ddir => self.regions(),
            Mode::Baseline => 1,
        };
        if self.heads.len() != want_heads || self.channels.iter().any(|c| c.layers.len() != ENCODER_STAGES + DECODER_STAGES) {
            return Err(Error::shape("network layout does not match its mode"));
        }
        if !self.is_finite() {
            return Err(Error::shape("network weights contain non-finite values"));
        }
        Ok(())
    }
}

fn layer_name(k: usize) -> String {
    if k < ENCODER_STAGES {
        format!("enc{k}")
    } else {
        format!("dec{}", ENCODER_STAGES + DECODER_STAGES - k)
    }
}

/// Weights registered on a tape, mirroring [`ToyUNetWeights`]'s flat order.
pub(crate) struct WeightVars {
    pub vars: Vec<Var>,
    per_channel: usize,
    regions: usize,
}

impl WeightVars {
    pub(crate) fn record(tape: &mut Tape, w: &ToyUNetWeights, trainable: bool) -> Self {
        let vars = w
            .named_tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        WeightVars {
            vars,
            per_channel: 2 * (ENCODER_STAGES + DECODER_STAGES),
            regions: w.regions(),
        }
    }

    fn layer(&self, channel: usize, k: usize) -> (Var, Var) {
        let base = channel * self.per_channel + 2 * k;
        (self.vars[base], self.vars[base + 1])
    }

    /// `(mu_weight, mu_bias, lv_weight, lv_bias)` of head `h`.
    fn head(&self, h: usize) -> [Var; 4] {
        let base = self.regions * self.per_channel + 4 * h;
        [self.vars[base], self.vars[base + 1], self.vars[base + 2], self.vars[base + 3]]
    }
}

fn conv_act(tape: &mut Tape, x: Var, (w, b): (Var, Var), stride: usize) -> Result<Var> {
    let y = tape.conv2d(x, w, Some(b), stride)?;
    Ok(tape.leaky_relu(y))
}

/// Half-resolution features of one channel for a 2-channel input.
fn channel_features(tape: &mut Tape, wv: &WeightVars, c: usize, input: Var) -> Result<Var> {
    let mut skips = Vec::with_capacity(ENCODER_STAGES);
    let mut x = conv_act(tape, input, wv.layer(c, 0), 1)?;
    skips.push(x);
    for k in 1..ENCODER_STAGES {
        x = conv_act(tape, x, wv.layer(c, k), 2)?;
        skips.push(x);
    }
    for s in 0..DECODER_STAGES {
        let up = tape.upsample2x(x);
        let skip = skips[ENCODER_STAGES - 2 - s];
        let cat = tape.concat(&[up, skip])?;
        x = conv_act(tape, cat, wv.layer(c, ENCODER_STAGES + s), 1)?;
    }
    Ok(x)
}

fn apply_head(tape: &mut Tape, feats: Var, [mw, mb, lw, lb]: [Var; 4]) -> Result<(Var, Var)> {
    let mu = tape.conv2d(feats, mw, Some(mb), 1)?;
    let lv = tape.conv2d(feats, lw, Some(lb), 1)?;
    Ok((mu, lv))
}

/// Lattices the network accepts: 2D, every side a positive multiple of 16.
pub fn check_network_dims(dims: &Dims) -> Result<()> {
    if dims.ndim() != 2 || dims.sizes().iter().any(|&n| n == 0 || n % DOWNSAMPLING != 0) {
        return Err(Error::shape(format!(
            "amortized model needs 2D images with sides divisible by {DOWNSAMPLING}, got {:?}",
            dims.sizes()
        )));
    }
    Ok(())
}

/// Records the network on per-region 2-channel inputs (masked moving and
/// fixed) and returns the posterior `(mu, log_var)` of every output field.
pub(crate) fn record_network(
    tape: &mut Tape,
    wv: &WeightVars,
    mode: Mode,
    inputs: &[Tensor],
) -> Result<(Vec<Var>, Vec<Var>)> {
    if inputs.len() != wv.regions {
        return Err(Error::shape(format!(
            "{} channel inputs for a {}-region network",
            inputs.len(),
            wv.regions
        )));
    }
    let mut feats = Vec::with_capacity(inputs.len());
    for (c, inp) in inputs.iter().enumerate() {
        check_network_dims(inp.dims())?;
        let x = tape.constant(inp.clone());
        feats.push(channel_features(tape, wv, c, x)?);
    }
    let (mut mus, mut lvs) = (Vec::new(), Vec::new());
    match mode {
        Mode::Ddir => {
            for (h, &f) in feats.iter().enumerate() {
                let (m, l) = apply_head(tape, f, wv.head(h))?;
                mus.push(m);
                lvs.push(l);
            }
        }
        Mode::Baseline => {
            let cat = tape.concat(&feats)?;
            let (m, l) = apply_head(tape, cat, wv.head(0))?;
            mus.push(m);
            lvs.push(l);
        }
    }
    Ok((mus, lvs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;

    fn inputs(n: usize, regions: usize) -> Vec<Tensor> {
        let d = Dims::new(&[n, n]).unwrap();
        (0..regions)
            .map(|r| {
                let data = (0..2 * d.len())
                    .map(|i| ((i * (r + 3)) as f64 * 0.37).sin() * 0.5 + 0.5)
                    .collect();
                Tensor::new(2, d, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn shapes_and_layout() {
        for mode in [Mode::Ddir, Mode::Baseline] {
            let w = ToyUNetWeights::init(mode, 4, 4, -10.0, 1).unwrap();
            w.validate().unwrap();
            assert_eq!(w.named_tensors().len(), w.tensor_count());
            let mut tape = Tape::new();
            let wv = WeightVars::record(&mut tape, &w, true);
            let (mu, lv) = record_network(&mut tape, &wv, mode, &inputs(32, 4)).unwrap();
            let fields = if mode == Mode::Ddir { 4 } else { 1 };
            assert_eq!(mu.len(), fields);
            let m = tape.value(mu[0]);
            assert_eq!(m.channels(), 2);
            assert_eq!(m.dims().sizes(), &[16, 16]);
            assert!(tape.value(lv[0]).data().iter().all(|&v| (v + 10.0).abs() < 0.1));
            assert!(m.data().iter().all(|v| v.abs() < 0.1));
        }
        let w = ToyUNetWeights::init(Mode::Ddir, 4, 4, -10.0, 1).unwrap();
        let mut tape = Tape::new();
        let wv = WeightVars::record(&mut tape, &w, true);
        assert!(record_network(&mut tape, &wv, Mode::Ddir, &inputs(24, 4)).is_err());
        assert!(record_network(&mut tape, &wv, Mode::Ddir, &inputs(16, 3)).is_err());
    }

    #[test]
    fn round_trip_through_tensors() {
        let w = ToyUNetWeights::init(Mode::Baseline, 4, 2, -10.0, 9).unwrap();
        let flat: Vec<Tensor> = w.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let back = ToyUNetWeights::from_tensors(Mode::Baseline, 4, 2, flat.clone()).unwrap();
        assert_eq!(back, w);
        assert!(ToyUNetWeights::from_tensors(Mode::Ddir, 4, 2, flat).is_err());
    }

    #[test]
    fn gradient_through_network() {
        let w = ToyUNetWeights::init(Mode::Ddir, 1, 2, -10.0, 4).unwrap();
        let inp = inputs(16, 1);
        // perturb the first decoder conv weight
        let target = w.channels[0].layers[ENCODER_STAGES].weight.clone();
        let f = |tape: &mut Tape, x: Var| -> Result<Var> {
            let mut wv = WeightVars::record(tape, &w, false);
            wv.vars[2 * ENCODER_STAGES] = x;
            let (mu, _) = record_network(tape, &wv, Mode::Ddir, &inp)?;
            let sq = tape.mul(mu[0], mu[0])?;
            Ok(tape.sum(sq))
        };
        let err = finite_diff_check(f, &target, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
