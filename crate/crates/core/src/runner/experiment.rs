//! Experiment directories: corpus files, cached evaluators, and one run
//! directory per (seed, mode).

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::corpus::{self, generate_corpus, split_semi_supervised, Corpus, DatasetBundle, LabeledExample};
use crate::error::{KestError, Result};
use crate::evaluation::verify::{verify_kernel_oracle, verify_lemma1, verify_mmd_identity, Precision};
use crate::evaluation::{evaluate, sample_generations, write_metrics_csv, EvaluatorBundle, Generation, MetricsReport, MetricsRow};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::selftrain::{run_from_base, train_base, validation_split, write_history_csv, BaseOutput, EpochRecord, Mode, STConfig};
use crate::tensor::Scalar;

/// Trials for the quick identity checks recorded with every run.
const QUICK_VERIFY_TRIALS: usize = 20;

/// Evaluators always run in single precision; they are scorers, not
/// objects under test.
pub type Evaluators = EvaluatorBundle<f32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierStatus {
    pub lemma1: bool,
    pub mmd_identity: bool,
    pub kernel_oracle: bool,
}

impl VerifierStatus {
    pub fn quick(seed: u64) -> Self {
        Self {
            lemma1: verify_lemma1(seed, QUICK_VERIFY_TRIALS).passed(),
            mmd_identity: verify_mmd_identity(seed, QUICK_VERIFY_TRIALS).passed(),
            kernel_oracle: verify_kernel_oracle(seed, QUICK_VERIFY_TRIALS).passed(),
        }
    }

    pub fn all_passed(&self) -> bool {
        self.lemma1 && self.mmd_identity && self.kernel_oracle
    }
}

/// Forward-pass totals over a whole run, base phase included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTotals {
    pub forward_passes_ag: u64,
    pub forward_passes_nag: u64,
    pub wall_clock_s: f64,
}

/// Everything one (seed, mode) run leaves behind, mirrored to `run_record.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub corpus_hash: String,
    pub mode: Mode,
    pub seed: u64,
    /// Empty for plain runs; `axis=value` inside sweeps.
    pub variant: String,
    pub history: Vec<EpochRecord>,
    pub metrics: MetricsReport,
    pub final_checksum: String,
    pub verifier: VerifierStatus,
    pub timing: TimingTotals,
    /// Measured end-to-end time of the run, evaluation included.
    pub runtime_s: f64,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Generated corpus and its fixed split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub corpus: Corpus,
    pub bundle: DatasetBundle,
    pub model_config: ModelConfig,
}

impl PreparedData {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let corpus = generate_corpus(&config.corpus, config.model.l_max)?;
        let bundle = split_semi_supervised(
            &corpus.examples,
            config.split.labeled_fraction,
            config.split.unlabeled_ratio,
            config.split.seed,
        )?;
        let model_config = config.model.resolve(corpus.vocab.len(), corpus.class_names.len());
        model_config.validate()?;
        Ok(Self { corpus, bundle, model_config })
    }

    /// Test items that were not used for base checkpoint selection.
    pub fn held_out(&self, st: &STConfig) -> &[LabeledExample] {
        &self.bundle.test[validation_split(&self.bundle, st)..]
    }

    /// `vocab.txt` plus `labeled.jsonl`, `unlabeled.jsonl`, `test.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let c = &self.corpus;
        c.vocab.save(&dir.join("vocab.txt"))?;
        corpus::write_labeled(&dir.join("labeled.jsonl"), &self.bundle.labeled, &c.vocab, &c.class_names)?;
        corpus::write_unlabeled(&dir.join("unlabeled.jsonl"), self.bundle.unlabeled.iter().map(|u| &u.tokens), &c.vocab)?;
        corpus::write_labeled(&dir.join("test.jsonl"), &self.bundle.test, &c.vocab, &c.class_names)?;
        Ok(())
    }
}

/// An experiment directory `<root>/<name>-<hash8>`.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub corpus_hash: String,
    pub dir: PathBuf,
    pub data: PreparedData,
}

impl Experiment {
    /// Creates (or reuses) the experiment directory and writes the config
    /// and corpus files.
    pub fn open(config: ExperimentConfig, root: &Path) -> Result<Self> {
        config.validate()?;
        let hash = config.hash()?;
        let corpus_hash = config.corpus_hash()?;
        let dir = root.join(config.run_dir_name()?);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.toml"), format!("# config_hash={hash}\n{}", config.to_toml()?))?;
        let data = PreparedData::new(&config)?;
        data.write(&dir.join("corpus"))?;
        Ok(Self { config, hash, corpus_hash, dir, data })
    }

    /// Finds the experiment that owns `path` (itself or an ancestor with a
    /// `config.toml`).
    pub fn locate(path: &Path) -> Result<Self> {
        let found = path
            .ancestors()
            .find(|p| p.join("config.toml").is_file())
            .ok_or_else(|| KestError::config(format!("{} is not inside an experiment directory", path.display())))?;
        let config = ExperimentConfig::load(&found.join("config.toml"))?;
        let data = PreparedData::new(&config)?;
        Ok(Self { hash: config.hash()?, corpus_hash: config.corpus_hash()?, config, dir: found.to_path_buf(), data })
    }

    pub fn header(&self) -> String {
        format!("config_hash={}", self.hash)
    }

    /// Loads cached evaluators, or trains and caches them.
    pub fn evaluators(&self) -> Result<Evaluators> {
        let dir = self.dir.join("evaluator");
        if dir.join("evaluator.json").is_file() {
            return EvaluatorBundle::load(&dir, &self.data.model_config);
        }
        let train = self.data.bundle.all_training_examples();
        let built = EvaluatorBundle::build(&train, &self.data.bundle.test, &self.data.model_config, &self.config.evaluator)?;
        built.save(&dir)?;
        log::info!(
            "evaluators: classifier F1 {:.3}, reference LM PPL {:.2}",
            built.classifier_test_f1,
            built.reference_lm_test_ppl
        );
        Ok(built)
    }

    pub fn st_config(&self, mode: Mode, seed: u64) -> STConfig {
        STConfig { mode, seed, ..self.config.selftrain.clone() }
    }

    /// Every configured (seed, mode) pair, seeds in parallel. Writes the
    /// experiment-level `metrics.csv`.
    pub fn run_all(&self) -> Result<Vec<RunRecord>> {
        let evaluators = self.evaluators()?;
        let per_seed: Vec<Vec<RunRecord>> = self
            .config
            .seeds
            .par_iter()
            .map(|&seed| self.run_seed(seed, &self.config.modes, &[(String::new(), self.config.selftrain.clone())], &self.dir, &evaluators))
            .collect::<Result<_>>()?;
        let records: Vec<RunRecord> = per_seed.into_iter().flatten().collect();
        self.write_metrics(&self.dir.join("metrics.csv"), &records)?;
        Ok(records)
    }

    pub fn write_metrics(&self, path: &Path, records: &[RunRecord]) -> Result<()> {
        let rows: Vec<MetricsRow> = records
            .iter()
            .map(|r| MetricsRow {
                run: run_name(&r.variant, r.seed, r.mode),
                mode: r.mode.name().to_string(),
                seed: r.seed,
                epoch: "final".into(),
                report: r.metrics.clone(),
            })
            .collect();
        write_metrics_csv(path, &rows, Some(&self.header()))
    }

    /// One base model for `seed`, then every mode under every variant
    /// (label, self-training config). Run directories go under `root`.
    pub fn run_seed(
        &self,
        seed: u64,
        modes: &[Mode],
        variants: &[(String, STConfig)],
        root: &Path,
        evaluators: &Evaluators,
    ) -> Result<Vec<RunRecord>> {
        match self.config.precision {
            Precision::F32 => self.run_seed_as::<f32>(seed, modes, variants, root, evaluators),
            Precision::F64 => self.run_seed_as::<f64>(seed, modes, variants, root, evaluators),
        }
    }

    fn run_seed_as<T: Scalar>(
        &self,
        seed: u64,
        modes: &[Mode],
        variants: &[(String, STConfig)],
        root: &Path,
        evaluators: &Evaluators,
    ) -> Result<Vec<RunRecord>> {
        let seed_dir = root.join(format!("seed{seed}"));
        let base_st = STConfig { mode: Mode::Supervised, seed, ..self.config.selftrain.clone() };
        let started = Instant::now();
        let base = train_base::<T>(&self.data.bundle, &self.data.model_config, &base_st, Some(&seed_dir))?;
        let base_time = started.elapsed().as_secs_f64();
        log::info!("seed {seed}: base model ready (best epoch {}) in {base_time:.1}s", base.best_epoch);
        let verifier = VerifierStatus::quick(seed);
        let mut out = Vec::new();
        for (variant, st) in variants {
            for &mode in modes {
                let dir = variant_dir(&seed_dir, variant).join(mode.name());
                let st = STConfig { mode, seed, ..st.clone() };
                let rec = self.run_mode(&base, base_time, &st, variant, &dir, evaluators, &verifier)?;
                log::info!(
                    "seed {seed} {mode} {variant}: oracle acc {:.3}, self-BLEU {:.3}",
                    rec.metrics.oracle_control_acc,
                    rec.metrics.self_bleu
                );
                out.push(rec);
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_mode<T: Scalar>(
        &self,
        base: &BaseOutput<T>,
        base_time: f64,
        st: &STConfig,
        variant: &str,
        dir: &Path,
        evaluators: &Evaluators,
        verifier: &VerifierStatus,
    ) -> Result<RunRecord> {
        let started = Instant::now();
        std::fs::create_dir_all(dir)?;
        let run = run_from_base(base, &self.data.bundle, st, &self.config.decode, Some(dir))?;
        save_checkpoint(&run.model, &dir.join("final.ckpt"))?;
        write_history_csv(&dir.join("history.csv"), &run.history, Some(&self.header()))?;
        let (metrics, generations) = self.score(&run.model, st, evaluators)?;
        self.write_generations(&dir.join("generations.jsonl"), &generations)?;
        let record = RunRecord {
            config_hash: self.hash.clone(),
            corpus_hash: self.corpus_hash.clone(),
            mode: st.mode,
            seed: st.seed,
            variant: variant.to_string(),
            final_checksum: run.model.checksum(),
            timing: TimingTotals {
                forward_passes_ag: run.history.iter().map(|h| h.forward_passes_ag).sum(),
                forward_passes_nag: run.history.iter().map(|h| h.forward_passes_nag).sum(),
                wall_clock_s: run.history.iter().map(|h| h.wall_clock_s).sum(),
            },
            history: run.history,
            metrics,
            verifier: verifier.clone(),
            runtime_s: base_time + started.elapsed().as_secs_f64(),
        };
        self.write_metrics(&dir.join("metrics.csv"), std::slice::from_ref(&record))?;
        std::fs::write(dir.join("run_record.json"), serde_json::to_string_pretty(&record)?)?;
        Ok(record)
    }

    /// Samples the evaluation set from `model` and computes every metric.
    pub fn score<T: Scalar>(&self, model: &Model<T>, st: &STConfig, evaluators: &Evaluators) -> Result<(MetricsReport, Vec<Generation>)> {
        let held = self.data.held_out(st);
        let generations = sample_generations(model, held, &self.config.eval, &self.config.decode, st.seed)?;
        let metrics = evaluate(model, evaluators, held, &generations, &self.data.corpus.lexicons)?;
        Ok((metrics, generations))
    }

    pub fn write_generations(&self, path: &Path, generations: &[Generation]) -> Result<()> {
        let items: Vec<LabeledExample> =
            generations.iter().enumerate().map(|(id, g)| LabeledExample { id, tokens: g.tokens.clone(), label: g.label }).collect();
        corpus::write_labeled(path, &items, &self.data.corpus.vocab, &self.data.corpus.class_names)
    }

    /// The final model of a run directory.
    pub fn load_run_model<T: Scalar>(&self, run_dir: &Path) -> Result<Model<T>> {
        load_checkpoint(&run_dir.join("final.ckpt"), Some(&self.data.model_config))
    }
}

fn variant_dir(seed_dir: &Path, variant: &str) -> PathBuf {
    if variant.is_empty() {
        seed_dir.to_path_buf()
    } else {
        seed_dir.join(variant)
    }
}

fn run_name(variant: &str, seed: u64, mode: Mode) -> String {
    if variant.is_empty() {
        format!("seed{seed}/{mode}")
    } else {
        format!("seed{seed}/{variant}/{mode}")
    }
}
