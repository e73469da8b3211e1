//! Automatic metrics over generated text, the frozen evaluator models and
//! the numerical verifiers.

pub mod evaluator;
pub mod verify;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledExample, Lexicons};
use crate::decode::{generate_ag, DecodeConfig};
use crate::diagnostics::{self, Warning};
use crate::error::{KestError, Result};
use crate::losses::{ag_targets, loss_ag};
use crate::model::Model;
use crate::rng::{self, tag};
use crate::tensor::Scalar;
use crate::tokenizer::{TokenId, TokenSequence};

pub use evaluator::{EvaluatorBundle, EvaluatorSettings};
pub use verify::{Check, VerifyReport};

/// Smoothing floor for zero BLEU precisions.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const SELF_BLEU_ORDERS: [usize; 3] = [2, 3, 4];

/// A generated sequence and the label it was conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: TokenSequence,
    pub label: usize,
}

fn ppl_over<T: Scalar>(model: &Model<T>, items: &[(&TokenSequence, usize)]) -> Result<f64> {
    let per_item: Vec<(f64, usize)> = items
        .par_iter()
        .map(|(tokens, label)| {
            let logits = model.forward_ag(tokens, *label)?;
            let scored = ag_targets(tokens).iter().filter(|t| t.is_some()).count();
            Ok((loss_ag(&logits, tokens), scored))
        })
        .collect::<Result<_>>()?;
    let (nll, count) = per_item.iter().fold((0.0, 0usize), |(a, c), (n, k)| (a + n, c + k));
    if count == 0 {
        return Err(KestError::precondition("no scored tokens"));
    }
    Ok((nll / count as f64).exp())
}

/// `exp(total AG NLL / scored tokens)` on held-out text, conditioned on the
/// true labels.
pub fn model_ppl<T: Scalar>(model: &Model<T>, test: &[LabeledExample]) -> Result<f64> {
    if test.is_empty() {
        return Err(KestError::precondition("model perplexity needs a non-empty test set"));
    }
    let items: Vec<(&TokenSequence, usize)> = test.iter().map(|e| (&e.tokens, e.label)).collect();
    ppl_over(model, &items)
}

/// Perplexity of generations under an unconditional reference LM. Empty
/// generations are excluded and counted.
pub fn output_ppl<T: Scalar>(reference_lm: &Model<T>, generations: &[TokenSequence]) -> Result<f64> {
    if generations.is_empty() {
        return Err(KestError::precondition("output perplexity needs generations"));
    }
    let kept: Vec<(&TokenSequence, usize)> = generations.iter().filter(|g| !g.content().is_empty()).map(|g| (g, 0)).collect();
    let dropped = generations.len() - kept.len();
    if dropped > 0 {
        diagnostics::warn(Warning::DegenerateGeneration, &format!("{dropped} empty generations excluded from output perplexity"));
    }
    if kept.is_empty() {
        return Err(KestError::precondition("every generation is empty"));
    }
    ppl_over(reference_lm, &kept)
}

/// Macro-F1 of `predicted` against `truth` over `num_classes` classes. A
/// class with no true instances scores 0.
pub fn macro_f1(predicted: &[usize], truth: &[usize], num_classes: usize) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    let mut total = 0.0;
    for c in 0..num_classes {
        let tp = predicted.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let pred_c = predicted.iter().filter(|&&p| p == c).count() as f64;
        let true_c = truth.iter().filter(|&&t| t == c).count() as f64;
        if true_c == 0.0 {
            diagnostics::warn(Warning::AbsentClass, &format!("class {c} absent; its F1 counts as 0"));
            continue;
        }
        if tp > 0.0 {
            let precision = tp / pred_c;
            let recall = tp / true_c;
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    total / num_classes as f64
}

/// Macro-F1 of the evaluator's argmax predictions against intended labels.
pub fn control_f1<T: Scalar>(evaluator: &Model<T>, generations: &[Generation]) -> Result<f64> {
    let predicted: Vec<usize> = generations
        .par_iter()
        .map(|g| evaluator.forward_cls(&g.tokens).map(|p| argmax(&p)))
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = generations.iter().map(|g| g.label).collect();
    Ok(macro_f1(&predicted, &truth, evaluator.config().num_classes))
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Distinct n-grams over total n-grams, pooled across `texts`.
pub fn dist_n(texts: &[&[TokenId]], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(KestError::config("n-gram order must be positive"));
    }
    let short = texts.iter().filter(|t| t.len() < n).count();
    if short > 0 {
        diagnostics::warn(Warning::SkippedShortGeneration, &format!("{short} texts shorter than {n} skipped for Dist-{n}"));
    }
    let mut distinct: HashSet<&[TokenId]> = HashSet::new();
    let mut total = 0usize;
    for t in texts.iter().filter(|t| t.len() >= n) {
        for w in t.windows(n) {
            distinct.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        return Err(KestError::precondition(format!("no {n}-grams to score")));
    }
    Ok(distinct.len() as f64 / total as f64)
}

/// Dist-1..4 and their geometric mean.
pub fn dist_summary(texts: &[&[TokenId]]) -> Result<([f64; 4], f64)> {
    let mut d = [0.0; 4];
    for (i, slot) in d.iter_mut().enumerate() {
        *slot = dist_n(texts, i + 1)?;
    }
    let geo = (d.iter().map(|v| v.ln()).sum::<f64>() / 4.0).exp();
    Ok((d, geo))
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU of `hypothesis` against `references` with n-gram orders
/// `orders`, add-ε smoothing of zero precisions and the closest-length
/// brevity penalty.
pub fn sentence_bleu(hypothesis: &[TokenId], references: &[&[TokenId]], orders: &[usize]) -> f64 {
    let c = hypothesis.len();
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for &n in orders {
        let hyp = ngram_counts(hypothesis, n);
        let total: usize = hyp.values().sum();
        let ref_counts: Vec<HashMap<&[TokenId], usize>> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = hyp
            .iter()
            .map(|(g, &k)| k.min(ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
            .sum();
        let p = if total == 0 || clipped == 0 { BLEU_EPSILON } else { clipped as f64 / total as f64 };
        log_sum += p.ln();
    }
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / orders.len() as f64).exp()
}

/// Mean BLEU-{2,3,4} of each text against all the others.
pub fn self_bleu(texts: &[&[TokenId]]) -> Result<f64> {
    if texts.len() < 2 {
        return Err(KestError::precondition("Self-BLEU needs at least two texts"));
    }
    let scores: Vec<f64> = (0..texts.len())
        .into_par_iter()
        .map(|i| {
            let refs: Vec<&[TokenId]> = texts.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, t)| *t).collect();
            sentence_bleu(texts[i], &refs, &SELF_BLEU_ORDERS)
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Share of generations whose lexicon counts are strictly highest for the
/// intended label. Ties, including zero lexicon tokens, count as misses.
pub fn oracle_control_acc(generations: &[Generation], lexicons: &Lexicons) -> f64 {
    if generations.is_empty() {
        return 0.0;
    }
    let hits = generations
        .iter()
        .filter(|g| {
            let counts = lexicons.counts(g.tokens.content());
            let own = counts[g.label];
            counts.iter().enumerate().all(|(l, &c)| l == g.label || c < own)
        })
        .count();
    hits as f64 / generations.len() as f64
}

/// Settings for sampling the evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub samples_per_class: usize,
    /// Share of a test item's content used as the prompt; 0 generates from
    /// BOS alone.
    pub prompt_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples_per_class: 50, prompt_fraction: 0.0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class < 2 {
            return Err(KestError::config("eval.samples_per_class must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.prompt_fraction) {
            return Err(KestError::config("eval.prompt_fraction outside [0, 1)"));
        }
        Ok(())
    }
}

/// `samples_per_class` AG samples per label. With a positive prompt
/// fraction, prompts cycle through the test items of that label.
pub fn sample_generations<T: Scalar>(
    model: &Model<T>,
    prompts: &[LabeledExample],
    eval: &EvalConfig,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<Vec<Generation>> {
    eval.validate()?;
    let l_max = model.config().l_max;
    let k = model.config().num_classes;
    let jobs: Vec<(usize, usize)> = (0..k).flat_map(|l| (0..eval.samples_per_class).map(move |i| (l, i))).collect();
    let by_label: Vec<Vec<&LabeledExample>> = (0..k).map(|l| prompts.iter().filter(|e| e.label == l).collect()).collect();
    jobs.par_iter()
        .map(|&(label, i)| {
            let prompt = if eval.prompt_fraction > 0.0 && !by_label[label].is_empty() {
                let src = by_label[label][i % by_label[label].len()].tokens.content();
                let keep = ((eval.prompt_fraction * src.len() as f64).floor() as usize).min(decode.max_len.saturating_sub(1));
                TokenSequence::from_content(&src[..keep], l_max)
            } else {
                TokenSequence::from_content(&[], l_max)
            };
            let mut r = rng::stream(seed ^ decode.seed, &[tag::EVAL, label as u64, i as u64]);
            Ok(Generation { tokens: generate_ag(model, label, &prompt, decode, &mut r)?, label })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_ppl: f64,
    pub output_ppl: f64,
    pub macro_f1: f64,
    pub dist: f64,
    pub dist_n: [f64; 4],
    pub self_bleu: f64,
    pub oracle_control_acc: f64,
}

pub const METRICS_COLUMNS: [&str; 10] =
    ["model_ppl", "output_ppl", "macro_f1", "dist", "dist_1", "dist_2", "dist_3", "dist_4", "self_bleu", "oracle_control_acc"];

/// Presentation copies scaled by 100.
pub const METRICS_X100_COLUMNS: [&str; 4] = ["macro_f1_x100", "dist_x100", "self_bleu_x100", "oracle_control_acc_x100"];

impl MetricsReport {
    pub fn values(&self) -> [f64; 10] {
        let d = self.dist_n;
        [self.model_ppl, self.output_ppl, self.macro_f1, self.dist, d[0], d[1], d[2], d[3], self.self_bleu, self.oracle_control_acc]
    }

    pub fn x100(&self) -> [f64; 4] {
        [self.macro_f1 * 100.0, self.dist * 100.0, self.self_bleu * 100.0, self.oracle_control_acc * 100.0]
    }

    pub fn check(&self) -> Result<()> {
        let unit = [self.macro_f1, self.dist, self.dist_n[0], self.dist_n[1], self.dist_n[2], self.dist_n[3], self.self_bleu, self.oracle_control_acc];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(KestError::integrity("a unit-interval metric left [0, 1]"));
        }
        if !(self.model_ppl >= 1.0 && self.output_ppl >= 1.0) {
            return Err(KestError::integrity("perplexity below 1"));
        }
        Ok(())
    }
}

/// All metrics for one model.
pub fn evaluate<T: Scalar, E: Scalar>(
    model: &Model<T>,
    evaluators: &EvaluatorBundle<E>,
    held_out: &[LabeledExample],
    generations: &[Generation],
    lexicons: &Lexicons,
) -> Result<MetricsReport> {
    let texts: Vec<&[TokenId]> = generations.iter().map(|g| g.tokens.content()).collect();
    let seqs: Vec<TokenSequence> = generations.iter().map(|g| g.tokens.clone()).collect();
    let (dist_n, dist) = dist_summary(&texts)?;
    let report = MetricsReport {
        model_ppl: model_ppl(model, held_out)?,
        output_ppl: output_ppl(&evaluators.reference_lm, &seqs)?,
        macro_f1: control_f1(&evaluators.classifier, generations)?,
        dist,
        dist_n,
        self_bleu: self_bleu(&texts)?,
        oracle_control_acc: oracle_control_acc(generations, lexicons),
    };
    report.check()?;
    Ok(report)
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run: String,
    pub mode: String,
    pub seed: u64,
    /// Epoch number, or `final`.
    pub epoch: String,
    pub report: MetricsReport,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow], header_comment: Option<&str>) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(c) = header_comment {
        writeln!(file, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    let header: Vec<&str> =
        ["run", "mode", "seed", "epoch"].into_iter().chain(METRICS_COLUMNS).chain(METRICS_X100_COLUMNS).collect();
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.run.clone(), r.mode.clone(), r.seed.to_string(), r.epoch.clone()];
        rec.extend(r.report.values().iter().map(|v| format!("{v:.10}")));
        rec.extend(r.report.x100().iter().map(|v| format!("{v:.4}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_metrics_csv`], skipping `#` comment lines.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| KestError::integrity(format!("bad metrics field {i}")))
        };
        let v: Vec<f64> = (4..14).map(num).collect::<Result<_>>()?;
        out.push(MetricsRow {
            run: rec[0].to_string(),
            mode: rec[1].to_string(),
            seed: rec[2].parse().map_err(|_| KestError::integrity("bad seed in metrics"))?,
            epoch: rec[3].to_string(),
            report: MetricsReport {
                model_ppl: v[0],
                output_ppl: v[1],
                macro_f1: v[2],
                dist: v[3],
                dist_n: [v[4], v[5], v[6], v[7]],
                self_bleu: v[8],
                oracle_control_acc: v[9],
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
