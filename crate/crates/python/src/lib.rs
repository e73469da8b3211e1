//! Python bindings: corpus generation, the shared generator/classifier
//! model, decoding, metrics, kernel loss, verifiers and experiment runs.

use std::path::PathBuf;

use kest_core::corpus::{self, CorpusSpec, LabeledExample};
use kest_core::decode::{self, DecodeConfig, MaskVector};
use kest_core::evaluation::{self, verify, Generation};
use kest_core::losses::{self, SoftSequence};
use kest_core::model::{self, Branch, ModelConfig};
use kest_core::rng::{self as krng, tag};
use kest_core::runner::{Experiment, ExperimentConfig};
use kest_core::selftrain;
use kest_core::tokenizer::{self, TokenId, TokenSequence};
use kest_core::{KestError, Mat};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: KestError) -> PyErr {
    match e {
        KestError::Config(_) | KestError::Split { .. } | KestError::Precondition(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Mat<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(Mat::from_rows(&rows))
}

fn rows_of(m: &Mat<f32>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).iter().map(|&v| v as f64).collect()).collect()
}

/// A generated synthetic corpus with its vocabulary and attribute lexicons.
#[pyclass(module = "kest")]
struct Corpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl Corpus {
    #[new]
    #[pyo3(signature = (num_attributes=2, vocab_size=512, length_range=(8, 20), lexicon_strength=0.7, template_count=12, num_examples=1000, seed=7, l_max=48))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        num_attributes: usize,
        vocab_size: usize,
        length_range: (usize, usize),
        lexicon_strength: f64,
        template_count: usize,
        num_examples: usize,
        seed: u64,
        l_max: usize,
    ) -> PyResult<Self> {
        let spec = CorpusSpec { num_attributes, vocab_size, length_range, lexicon_strength, template_count, num_examples, seed };
        Ok(Self { inner: corpus::generate_corpus(&spec, l_max).map_err(to_py)? })
    }

    fn __len__(&self) -> usize {
        self.inner.examples.len()
    }

    #[getter]
    fn l_max(&self) -> usize {
        self.inner.l_max
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    /// Regular tokens in id order (ids start after the special tokens).
    fn vocab(&self) -> Vec<String> {
        self.inner.vocab.regular_tokens().to_vec()
    }

    fn texts(&self) -> PyResult<Vec<String>> {
        self.inner.examples.iter().map(|e| tokenizer::decode(&e.tokens, &self.inner.vocab).map_err(to_py)).collect()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.examples.iter().map(|e| e.label).collect()
    }

    /// Content token ids of every example.
    fn token_ids(&self) -> Vec<Vec<TokenId>> {
        self.inner.examples.iter().map(|e| e.tokens.content().to_vec()).collect()
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenizer::encode(text, &self.inner.vocab, self.inner.l_max).content().to_vec()
    }

    fn decode(&self, ids: Vec<TokenId>) -> PyResult<String> {
        tokenizer::decode(&TokenSequence::from_content(&ids, self.inner.l_max), &self.inner.vocab).map_err(to_py)
    }

    fn lexicon(&self, label: usize) -> PyResult<Vec<TokenId>> {
        if label >= self.inner.lexicons.num_attributes() {
            return Err(PyValueError::new_err(format!("label {label} out of range")));
        }
        Ok(self.inner.lexicons.lexicon(label).to_vec())
    }

    /// Share of `(content ids, label)` pairs whose label's lexicon strictly
    /// dominates the token counts.
    fn oracle_control_acc(&self, texts: Vec<Vec<TokenId>>, labels: Vec<usize>) -> PyResult<f64> {
        if texts.len() != labels.len() {
            return Err(PyValueError::new_err("texts and labels differ in length"));
        }
        let gens: Vec<Generation> = texts
            .iter()
            .zip(labels)
            .map(|(t, label)| Generation { tokens: TokenSequence::from_content(t, self.inner.l_max.max(t.len() + 2)), label })
            .collect();
        Ok(evaluation::oracle_control_acc(&gens, &self.inner.lexicons))
    }

    /// Writes the corpus as `{"text", "label"}` jsonl.
    fn write_jsonl(&self, path: PathBuf) -> PyResult<()> {
        corpus::write_labeled(&path, &self.inner.examples, &self.inner.vocab, &self.inner.class_names).map_err(to_py)
    }
}

/// The shared generator/classifier (single precision).
#[pyclass(module = "kest")]
struct Model {
    inner: model::Model<f32>,
}

impl Model {
    fn sequence(&self, ids: &[TokenId]) -> PyResult<TokenSequence> {
        let l_max = self.inner.config().l_max;
        if ids.len() + 2 > l_max {
            return Err(PyValueError::new_err(format!("{} tokens do not fit L_max {l_max}", ids.len())));
        }
        Ok(TokenSequence::from_content(ids, l_max))
    }
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (vocab_size, num_classes, l_max, d_model=64, n_layers=2, n_heads=4, d_label=16, d_ff=256, cls_hidden=64, dropout_rate=0.1, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        num_classes: usize,
        l_max: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_label: usize,
        d_ff: usize,
        cls_hidden: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig { d_model, n_layers, n_heads, d_label, d_ff, cls_hidden, vocab_size, num_classes, l_max, dropout_rate };
        Ok(Self { inner: model::Model::new(cfg, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: model::load_checkpoint(&path, None).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let text = serde_json::to_string(self.inner.config()).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        json_to_py(py, &text)
    }

    /// Forward passes so far as `(ag, nag, cls)`.
    fn counters(&self) -> (u64, u64, u64) {
        let c = self.inner.counters();
        (c.get(Branch::Ag), c.get(Branch::Nag), c.get(Branch::Cls))
    }

    /// Class probabilities for a content token sequence.
    fn classify(&self, ids: Vec<TokenId>) -> PyResult<Vec<f64>> {
        self.inner.forward_cls(&self.sequence(&ids)?).map_err(to_py)
    }

    /// Causal next-token logits, one row per position of `BOS ids EOS`.
    fn ag_logits(&self, ids: Vec<TokenId>, label: usize) -> PyResult<Vec<Vec<f64>>> {
        let m = self.inner.forward_ag(&self.sequence(&ids)?, label).map_err(to_py)?;
        Ok(rows_of(&m))
    }

    /// Free-running nucleus sampling; returns content token ids.
    #[pyo3(signature = (label, prompt=Vec::new(), top_p=0.9, min_len=4, max_len=32, repetition_penalty=1.0, no_repeat_ngram=4, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        py: Python<'_>,
        label: usize,
        prompt: Vec<TokenId>,
        top_p: f64,
        min_len: usize,
        max_len: usize,
        repetition_penalty: f64,
        no_repeat_ngram: usize,
        seed: u64,
    ) -> PyResult<Vec<TokenId>> {
        let prompt = self.sequence(&prompt)?;
        let cfg = DecodeConfig { top_p, min_len, max_len, repetition_penalty, no_repeat_ngram, seed };
        py.detach(|| {
            let mut r = krng::stream(seed, &[tag::DECODE, label as u64]);
            decode::generate_ag(&self.inner, label, &prompt, &cfg, &mut r).map(|s| s.content().to_vec())
        })
        .map_err(to_py)
    }

    /// One-pass infilling of the masked content positions (`mask[i]` covers
    /// content token `i`). Returns `(content ids, soft rows or None)`.
    #[pyo3(signature = (ids, mask, label, top_p=0.9, soft=false, seed=0))]
    #[allow(clippy::type_complexity)]
    fn infill(
        &self,
        ids: Vec<TokenId>,
        mask: Vec<bool>,
        label: usize,
        top_p: f64,
        soft: bool,
        seed: u64,
    ) -> PyResult<(Vec<TokenId>, Option<Vec<Vec<f64>>>)> {
        let seq = self.sequence(&ids)?;
        if mask.len() != seq.maskable_len() {
            return Err(PyValueError::new_err(format!("mask has {} bits, expected {}", mask.len(), seq.maskable_len())));
        }
        let mut r = krng::stream(seed, &[tag::PSEUDO, label as u64]);
        let item = decode::generate_nag(&self.inner, &seq, &MaskVector::new(mask), label, top_p, &mut r, soft).map_err(to_py)?;
        let soft_rows = item.soft.map(|s| (0..s.length).map(|i| s.matrix.row(i).to_vec()).collect());
        Ok((item.hard_tokens.content().to_vec(), soft_rows))
    }
}

#[pyfunction]
fn sample_mask(length: usize, p_m: f64, seed: u64) -> PyResult<Vec<bool>> {
    if !(0.0..=1.0).contains(&p_m) {
        return Err(PyValueError::new_err("p_m outside [0, 1]"));
    }
    Ok(decode::sample_mask(length, p_m, &mut krng::stream(seed, &[tag::MASK])).bits().to_vec())
}

/// Smallest top-probability set reaching mass `p`, as `(index, renormalized prob)`.
#[pyfunction]
fn nucleus(probs: Vec<f64>, p: f64) -> PyResult<Vec<(usize, f64)>> {
    decode::nucleus(&probs, p).map_err(to_py)
}

#[pyfunction]
fn dist_n(texts: Vec<Vec<TokenId>>, n: usize) -> PyResult<f64> {
    let refs: Vec<&[TokenId]> = texts.iter().map(Vec::as_slice).collect();
    evaluation::dist_n(&refs, n).map_err(to_py)
}

#[pyfunction]
fn self_bleu(texts: Vec<Vec<TokenId>>) -> PyResult<f64> {
    let refs: Vec<&[TokenId]> = texts.iter().map(Vec::as_slice).collect();
    evaluation::self_bleu(&refs).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (hypothesis, references, orders=vec![2, 3, 4]))]
fn sentence_bleu(hypothesis: Vec<TokenId>, references: Vec<Vec<TokenId>>, orders: Vec<usize>) -> f64 {
    let refs: Vec<&[TokenId]> = references.iter().map(Vec::as_slice).collect();
    evaluation::sentence_bleu(&hypothesis, &refs, &orders)
}

#[pyfunction]
fn macro_f1(predicted: Vec<usize>, truth: Vec<usize>, num_classes: usize) -> PyResult<f64> {
    if predicted.len() != truth.len() {
        return Err(PyValueError::new_err("predicted and truth differ in length"));
    }
    Ok(evaluation::macro_f1(&predicted, &truth, num_classes))
}

#[pyfunction]
fn selection_score(confidence: f64, uncertainty: f64) -> f64 {
    selftrain::selection_score(confidence, uncertainty)
}

/// BALD from Monte-Carlo class-probability passes.
#[pyfunction]
fn bald(passes: Vec<Vec<f64>>) -> PyResult<f64> {
    if passes.len() < 2 {
        return Err(PyValueError::new_err("BALD needs at least two passes"));
    }
    Ok(selftrain::baselines::bald_from_passes(&passes))
}

/// Kernel loss between generated and target soft sequences (lists of
/// `L × d` matrices) under a bandwidth bank.
#[pyfunction]
fn kernel_loss(generated: Vec<Vec<Vec<f64>>>, targets: Vec<Vec<Vec<f64>>>, bandwidths: Vec<f64>) -> PyResult<f64> {
    let wrap = |ms: Vec<Vec<Vec<f64>>>| -> PyResult<Vec<SoftSequence>> {
        ms.into_iter()
            .map(|m| {
                let length = m.len();
                Ok(SoftSequence { matrix: matrix(m)?, length })
            })
            .collect()
    };
    let (o, t) = (wrap(generated)?, wrap(targets)?);
    if bandwidths.len().is_multiple_of(2) {
        return Err(PyValueError::new_err("bandwidth bank must have odd length 2M + 1"));
    }
    let cfg = losses::KernelConfig::new((bandwidths.len() - 1) / 2, bandwidths).map_err(to_py)?;
    losses::loss_mmd(&o, &t, &cfg).map_err(to_py)
}

/// Bandwidth bank `2^a · H`, `a = -m..=m`, from the mean cross distance.
#[pyfunction]
fn median_bandwidths(generated: Vec<Vec<Vec<f64>>>, targets: Vec<Vec<Vec<f64>>>, m: usize) -> PyResult<Vec<f64>> {
    let o = generated.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    let t = targets.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    losses::median_bandwidths_raw(&o, &t, m).map_err(to_py)
}

/// Runs the identity verifiers; returns `(all passed, rendered report)`.
#[pyfunction]
#[pyo3(signature = (seed=0, trials=100))]
fn verify_identities(py: Python<'_>, seed: u64, trials: usize) -> (bool, String) {
    py.detach(|| {
        let reports = [verify::verify_lemma1(seed, trials), verify::verify_mmd_identity(seed, trials), verify::verify_kernel_oracle(seed, trials)];
        let text: Vec<String> = reports.iter().map(|r| r.render()).collect();
        (reports.iter().all(|r| r.passed()), text.join("\n"))
    })
}

/// SHA-256 of the canonical form of a configuration file.
#[pyfunction]
fn config_hash(path: PathBuf) -> PyResult<String> {
    ExperimentConfig::load(&path).and_then(|c| c.hash()).map_err(to_py)
}

/// Trains every configured seed and mode; returns the run records as dicts.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_path: PathBuf, out_dir: PathBuf) -> PyResult<Py<PyAny>> {
    let text = py
        .detach(|| -> kest_core::Result<String> {
            let exp = Experiment::open(ExperimentConfig::load(&config_path)?, &out_dir)?;
            Ok(serde_json::to_string(&exp.run_all()?)?)
        })
        .map_err(to_py)?;
    json_to_py(py, &text)
}

/// Label-conditioned perplexity of `model` on `(content ids, label)` pairs.
#[pyfunction]
fn model_ppl(model: &Model, texts: Vec<Vec<TokenId>>, labels: Vec<usize>) -> PyResult<f64> {
    let l_max = model.inner.config().l_max;
    let items: Vec<LabeledExample> = texts
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(id, (t, label))| LabeledExample { id, tokens: TokenSequence::from_content(t, l_max), label })
        .collect();
    evaluation::model_ppl(&model.inner, &items).map_err(to_py)
}

/// Kernel-based self-training for attribute-controllable generation.
#[pymodule]
fn kest(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(nucleus, m)?)?;
    m.add_function(wrap_pyfunction!(dist_n, m)?)?;
    m.add_function(wrap_pyfunction!(self_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(model_ppl, m)?)?;
    m.add_function(wrap_pyfunction!(selection_score, m)?)?;
    m.add_function(wrap_pyfunction!(bald, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_loss, m)?)?;
    m.add_function(wrap_pyfunction!(median_bandwidths, m)?)?;
    m.add_function(wrap_pyfunction!(verify_identities, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("SPECIAL_TOKENS", tokenizer::SPECIAL_TOKENS.to_vec())?;
    m.add("CHECKPOINT_VERSION", model::CHECKPOINT_VERSION)?;
    Ok(())
}
