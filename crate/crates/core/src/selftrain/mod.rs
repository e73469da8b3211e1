//! Self-training: base training on the labeled set, then per-epoch pseudo
//! labels and pseudo text produced by a frozen snapshot of the previous
//! epoch's model, with the baseline variants.

pub mod artifacts;
pub mod baselines;
pub mod training;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KestError, Result};
use crate::losses::LossWeights;
use crate::model::AdamWConfig;

pub use artifacts::{read_soft_dump, write_history_csv, EpochRecord, HISTORY_COLUMNS};
pub use baselines::{bald_uncertainty, noise_corrupt, selection_score, selection_score_with};
pub use training::{
    batch_loss, batch_loss_value, kernel_loss_fixed, pseudo_label, pseudo_text, run, run_from_base, stratified_sample, train_base, validation_split, BaseOutput, BatchSpec,
    CeSample, KernelDump, LossParts, RunOutput,
};

/// Training variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Soft NAG pseudo text scored by the kernel loss, plus pseudo labels.
    Kest,
    /// As `Kest`, but hard NAG pseudo text trained with cross-entropy.
    KestNoKernel,
    /// Hard AG pseudo text from truncated prompts.
    Pt,
    PtNoise,
    PtNoisePl,
    PtSelectPl,
    Supervised,
}

impl Mode {
    pub const ALL: [Mode; 7] =
        [Mode::Kest, Mode::KestNoKernel, Mode::Pt, Mode::PtNoise, Mode::PtNoisePl, Mode::PtSelectPl, Mode::Supervised];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Kest => "kest",
            Mode::KestNoKernel => "kest_no_kernel",
            Mode::Pt => "pt",
            Mode::PtNoise => "pt_noise",
            Mode::PtNoisePl => "pt_noise_pl",
            Mode::PtSelectPl => "pt_select_pl",
            Mode::Supervised => "supervised",
        }
    }

    pub fn uses_pseudo_labels(self) -> bool {
        matches!(self, Mode::Kest | Mode::KestNoKernel | Mode::PtNoisePl | Mode::PtSelectPl)
    }

    pub fn uses_noise(self) -> bool {
        matches!(self, Mode::PtNoise | Mode::PtNoisePl)
    }

    pub fn is_soft(self) -> bool {
        self == Mode::Kest
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = KestError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| KestError::config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub drop_rate: f64,
    pub mask_rate: f64,
    pub shuffle_k: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { drop_rate: 0.05, mask_rate: 0.05, shuffle_k: 1.1 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("noise.drop_rate", self.drop_rate), ("noise.mask_rate", self.mask_rate)] {
            if !(0.0..1.0).contains(&r) {
                return Err(KestError::config(format!("{name} = {r} outside [0, 1)")));
            }
        }
        if !(self.shuffle_k >= 0.0 && self.shuffle_k.is_finite()) {
            return Err(KestError::config("noise.shuffle_k must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectConfig {
    pub overgen_factor: f64,
    pub mc_passes: usize,
    pub epsilon: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self { overgen_factor: 2.0, mc_passes: 8, epsilon: 1e-5 }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.overgen_factor >= 1.0) {
            return Err(KestError::config("select.overgen_factor must be >= 1"));
        }
        if self.mc_passes < 2 {
            return Err(KestError::config("select.mc_passes must be >= 2"));
        }
        if !(self.epsilon > 0.0) {
            return Err(KestError::config("select.epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct STConfig {
    /// Set per run by the caller; not part of the configuration file.
    #[serde(skip, default = "default_mode")]
    pub mode: Mode,
    pub p_m_base: f64,
    pub p_m_st: f64,
    pub ratio_pt: f64,
    /// Passes over D_l during base training.
    pub base_epochs: usize,
    /// Self-training epochs.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub weights_base: LossWeights,
    pub weights_st: LossWeights,
    pub noise: NoiseConfig,
    pub select: SelectConfig,
    /// Bandwidth bank half-width: `2M + 1` scales.
    pub kernel_m: usize,
    /// Nucleus threshold for hard NAG pseudo text.
    pub nag_top_p: f64,
    /// Share of a labeled item's content kept as the PT prompt.
    pub prompt_fraction: f64,
    /// Test items held out for base checkpoint selection.
    pub validation_size: usize,
    pub optimizer_base: AdamWConfig,
    pub optimizer_st: AdamWConfig,
    /// When false, `wall_clock_s` is written as 0 so reruns are byte-identical.
    pub record_wall_clock: bool,
    /// Set per run by the caller; not part of the configuration file.
    #[serde(skip, default = "default_seed")]
    pub seed: u64,
}

fn default_mode() -> Mode {
    Mode::Kest
}

fn default_seed() -> u64 {
    1
}

impl Default for STConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Kest,
            p_m_base: 0.5,
            p_m_st: 0.7,
            ratio_pt: 1.0,
            base_epochs: 60,
            max_epochs: 5,
            batch_size: 16,
            weights_base: LossWeights::base(),
            weights_st: LossWeights::self_training(),
            noise: NoiseConfig::default(),
            select: SelectConfig::default(),
            kernel_m: 2,
            nag_top_p: 0.9,
            prompt_fraction: 0.25,
            validation_size: 50,
            optimizer_base: AdamWConfig::default(),
            optimizer_st: AdamWConfig::default(),
            record_wall_clock: true,
            seed: 1,
        }
    }
}

impl STConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("selftrain.p_m_base", self.p_m_base), ("selftrain.p_m_st", self.p_m_st)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(KestError::config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.ratio_pt > 0.0 && self.ratio_pt.is_finite()) {
            return Err(KestError::config("selftrain.ratio_pt must be positive"));
        }
        if self.batch_size == 0 {
            return Err(KestError::config("selftrain.batch_size must be positive"));
        }
        if self.base_epochs == 0 {
            return Err(KestError::config("selftrain.base_epochs must be positive"));
        }
        if !(self.nag_top_p > 0.0 && self.nag_top_p <= 1.0) {
            return Err(KestError::config("selftrain.nag_top_p outside (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.prompt_fraction) {
            return Err(KestError::config("selftrain.prompt_fraction outside [0, 1)"));
        }
        for opt in [&self.optimizer_base, &self.optimizer_st] {
            if !(opt.lr > 0.0 && opt.lr.is_finite()) {
                return Err(KestError::config("optimizer lr must be positive"));
            }
        }
        self.weights_base.validate()?;
        self.weights_st.validate()?;
        self.noise.validate()?;
        self.select.validate()
    }
}
