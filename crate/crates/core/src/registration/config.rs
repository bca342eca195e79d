use serde::{Deserialize, Serialize};

use crate::diffeo::DEFAULT_STEPS;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// One velocity field per region, or a single field for the whole image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Ddir,
    Baseline,
}

/// Per-pair optimization or a trained encoder-decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    #[default]
    Direct,
    Amortized,
}

pub const DIRECT_LR: f64 = 1e-2;
pub const AMORTIZED_LR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub mode: Mode,
    pub regime: Regime,
    /// Adam steps per pair in the direct regime.
    pub iterations: usize,
    /// Passes over the training set in the amortized regime.
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate; `None` picks the regime default.
    pub lr: Option<f64>,
    pub weights: LossWeights,
    pub k_steps: usize,
    pub seed: u64,
    /// Use `z = mu` at inference instead of sampling.
    pub deterministic_inference: bool,
    /// Sample `z ~ q(z)` during optimization (reparameterized).
    pub sample_during_training: bool,
    pub init_log_var: f64,
    pub regions: usize,
    /// Feature width of the toy encoder-decoder.
    pub base_width: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            mode: Mode::Ddir,
            regime: Regime::Direct,
            iterations: 300,
            epochs: 200,
            batch_size: 2,
            lr: None,
            weights: LossWeights::default(),
            k_steps: DEFAULT_STEPS,
            seed: 0,
            deterministic_inference: true,
            sample_during_training: true,
            init_log_var: -10.0,
            regions: 4,
            base_width: 8,
        }
    }
}

impl RegistrationConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(match self.regime {
            Regime::Direct => DIRECT_LR,
            Regime::Amortized => AMORTIZED_LR,
        })
    }

    /// Velocity fields optimized per pair: one per region, or one.
    pub fn field_count(&self) -> usize {
        match self.mode {
            Mode::Ddir => self.regions,
            Mode::Baseline => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if self.iterations == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations, epochs and batch size must be >= 1".into()));
        }
        if self.k_steps == 0 {
            return Err(Error::Config("k_steps must be >= 1".into()));
        }
        if self.regions == 0 || self.regions > 255 {
            return Err(Error::Config(format!("invalid region count {}", self.regions)));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be >= 1".into()));
        }
        if !self.init_log_var.is_finite() {
            return Err(Error::Config("init_log_var must be finite".into()));
        }
        Ok(())
    }
}
