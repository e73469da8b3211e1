//! Frozen models that score generations: an attribute classifier and an
//! unconditional reference LM, both trained on the whole non-test corpus.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{argmax, macro_f1, model_ppl};
use crate::corpus::{DatasetBundle, LabeledExample};
use crate::error::{KestError, Result};
use crate::losses::LossWeights;
use crate::model::{load_checkpoint, save_checkpoint, AdamWConfig, Model, ModelConfig};
use crate::selftrain::{train_base, Mode, STConfig};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Test items used to pick the best epoch; scores use the rest.
    pub validation_size: usize,
    pub seed: u64,
}

impl Default for EvaluatorSettings {
    fn default() -> Self {
        Self { epochs: 8, batch_size: 32, lr: 3e-3, validation_size: 50, seed: 1_000_003 }
    }
}

impl EvaluatorSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(KestError::config("evaluator.epochs and evaluator.batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(KestError::config("evaluator.lr must be positive"));
        }
        Ok(())
    }

    fn st_config(&self, weights: LossWeights, seed: u64) -> STConfig {
        STConfig {
            mode: Mode::Supervised,
            base_epochs: self.epochs,
            batch_size: self.batch_size,
            weights_base: weights,
            validation_size: self.validation_size,
            optimizer_base: AdamWConfig { lr: self.lr, ..AdamWConfig::default() },
            record_wall_clock: false,
            seed,
            ..STConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Quality {
    classifier_test_f1: f64,
    reference_lm_test_ppl: f64,
}

#[derive(Debug, Clone)]
pub struct EvaluatorBundle<T: Scalar> {
    pub classifier: Model<T>,
    /// Single-class generator; every sequence is scored under label 0.
    pub reference_lm: Model<T>,
    pub classifier_test_f1: f64,
    pub reference_lm_test_ppl: f64,
}

impl<T: Scalar> EvaluatorBundle<T> {
    /// Trains both models on `train`, selecting epochs on the head of `test`
    /// and reporting quality on the rest.
    pub fn build(
        train: &[LabeledExample],
        test: &[LabeledExample],
        model_config: &ModelConfig,
        settings: &EvaluatorSettings,
    ) -> Result<Self> {
        settings.validate()?;
        if train.is_empty() || test.len() < 2 {
            return Err(KestError::precondition("evaluators need training data and at least two test items"));
        }
        let cls_data = DatasetBundle::supervised(train.to_vec(), test.to_vec());
        let cls_st = settings.st_config(LossWeights { lambda_c: 1.0, lambda_ag: 0.0, lambda_nag: 0.0 }, settings.seed);
        let classifier = train_base::<T>(&cls_data, model_config, &cls_st, None)?.model;

        let flatten = |xs: &[LabeledExample]| xs.iter().map(|e| LabeledExample { label: 0, ..e.clone() }).collect::<Vec<_>>();
        let lm_data = DatasetBundle::supervised(flatten(train), flatten(test));
        let lm_config = ModelConfig { num_classes: 1, ..model_config.clone() };
        let lm_st = settings.st_config(LossWeights { lambda_c: 0.0, lambda_ag: 1.0, lambda_nag: 0.0 }, settings.seed + 1);
        let reference_lm = train_base::<T>(&lm_data, &lm_config, &lm_st, None)?.model;

        let held = &test[settings.validation_size.min(test.len() / 2)..];
        let predicted = held.iter().map(|e| classifier.forward_cls(&e.tokens).map(|p| argmax(&p))).collect::<Result<Vec<_>>>()?;
        let truth: Vec<usize> = held.iter().map(|e| e.label).collect();
        let classifier_test_f1 = macro_f1(&predicted, &truth, model_config.num_classes);
        let reference_lm_test_ppl = model_ppl(&reference_lm, &flatten(held))?;
        Ok(Self { classifier, reference_lm, classifier_test_f1, reference_lm_test_ppl })
    }

    /// Writes `classifier.ckpt`, `reference_lm.ckpt` and `evaluator.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&self.classifier, &dir.join("classifier.ckpt"))?;
        save_checkpoint(&self.reference_lm, &dir.join("reference_lm.ckpt"))?;
        let q = Quality { classifier_test_f1: self.classifier_test_f1, reference_lm_test_ppl: self.reference_lm_test_ppl };
        std::fs::write(dir.join("evaluator.json"), serde_json::to_string_pretty(&q)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, model_config: &ModelConfig) -> Result<Self> {
        let classifier = load_checkpoint(&dir.join("classifier.ckpt"), Some(model_config))?;
        let lm_config = ModelConfig { num_classes: 1, ..model_config.clone() };
        let reference_lm = load_checkpoint(&dir.join("reference_lm.ckpt"), Some(&lm_config))?;
        let q: Quality = serde_json::from_str(&std::fs::read_to_string(dir.join("evaluator.json"))?)?;
        Ok(Self { classifier, reference_lm, classifier_test_f1: q.classifier_test_f1, reference_lm_test_ppl: q.reference_lm_test_ppl })
    }
}
