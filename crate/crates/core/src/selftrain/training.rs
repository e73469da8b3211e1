//! Base training, pseudo data production and the self-training epochs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::artifacts::{write_pseudo_labels, write_pseudo_text, EpochRecord};
use super::baselines::{bald_uncertainty, noise_corrupt, selection_score_with};
use super::{Mode, STConfig};
use crate::autograd::{Gradients, Graph, NodeId};
use crate::corpus::{build_training_pool, pseudo_text_count, DatasetBundle, LabeledExample, SourceTag, UnlabeledExample};
use crate::decode::{generate_ag, generate_nag, sample_mask, DecodeConfig, MaskVector, PseudoTextItem};
use crate::diagnostics::{self, Warning};
use crate::error::{KestError, Result};
use crate::losses::{ag_targets, median_bandwidths_raw, nag_targets, LossWeights};
use crate::model::{save_checkpoint, AdamW, Branch, Model, ModelConfig};
use crate::rng::{self, tag, Rng};
use crate::tensor::{Mat, Scalar};
use crate::tokenizer::{TokenId, TokenSequence};

/// One pool entry routed to cross-entropy. `generator = false` keeps only
/// the classification term (soft pseudo text, whose generator terms go
/// through the kernel loss instead).
#[derive(Debug, Clone)]
pub struct CeSample<'a> {
    pub tokens: &'a TokenSequence,
    pub label: usize,
    pub mask: MaskVector,
    pub generator: bool,
}

#[derive(Debug, Clone, Default)]
pub struct BatchSpec<'a> {
    pub samples: Vec<CeSample<'a>>,
    /// Label-homogeneous groups of soft pseudo text, each of size >= 2.
    pub kernel_groups: Vec<Vec<&'a PseudoTextItem>>,
}

/// Inputs and value of one scored kernel term, kept for offline replay.
#[derive(Debug, Clone)]
pub struct KernelDump {
    pub label: usize,
    pub branch: Branch,
    pub generated: Vec<Mat<f64>>,
    pub targets: Vec<Mat<f64>>,
    pub bandwidths: Vec<f64>,
    pub value: f64,
}

/// Batch loss broken into its parts. `ce` and `mmd` are weighted; the
/// unweighted components are batch means (CE) or group sums (kernel).
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub cls_ce: f64,
    pub ag_ce: f64,
    pub nag_ce: f64,
    pub ce: f64,
    pub mmd_ag: f64,
    pub mmd_nag: f64,
    pub mmd: f64,
    pub total: f64,
    pub dumps: Vec<KernelDump>,
}

/// `E[ids]` with the rows at `positions` replaced by `soft`. The hard rows
/// stay differentiable in `E`.
fn splice_soft_rows<T: Scalar>(model: &Model<T>, g: &mut Graph<'_, T>, ids: &[TokenId], soft: NodeId, positions: &[usize]) -> NodeId {
    let e = g.param(model.embedding_id());
    let all: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let full = g.gather(e, &all);
    let at: Vec<usize> = positions.iter().map(|&p| all[p]).collect();
    let old = g.gather(e, &at);
    let old = g.scale(old, T::of(-1.0));
    let diff = g.add(soft, old);
    let delta = g.scatter_rows(Mat::zeros(all.len(), model.config().d_model), diff, positions);
    g.add(full, delta)
}

/// Soft NAG output: model distribution times `E` at masked rows, the
/// embedding of the masked input elsewhere.
pub(crate) fn nag_soft_node<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    item: &PseudoTextItem,
    rng: Option<&mut Rng>,
) -> NodeId {
    let masked = &item.masked_input;
    let out = model.generation_graph(g, Branch::Nag, masked.active(), masked.len(), item.label, rng);
    let positions: Vec<usize> = item.mask.masked_positions().collect();
    if positions.is_empty() {
        let e = g.param(model.embedding_id());
        let all: Vec<usize> = masked.ids().iter().map(|&t| t as usize).collect();
        return g.gather(e, &all);
    }
    let rows = g.gather(out.logits, &positions);
    let probs = g.softmax(rows);
    let e = g.param(model.embedding_id());
    let soft = g.matmul(probs, e);
    splice_soft_rows(model, g, masked.ids(), soft, &positions)
}

/// Soft AG output under teacher forcing on the item's hard tokens: row 0
/// is BOS, row `j` in `1..len` is the prediction made at row `j − 1`.
pub(crate) fn ag_soft_node<T: Scalar>(model: &Model<T>, g: &mut Graph<'_, T>, item: &PseudoTextItem, rng: Option<&mut Rng>) -> NodeId {
    let hard = &item.hard_tokens;
    let len = hard.len();
    let out = model.generation_graph(g, Branch::Ag, hard.active(), len, item.label, rng);
    let rows = g.slice_rows(out.logits, 0, len - 1);
    let probs = g.softmax(rows);
    let e = g.param(model.embedding_id());
    let soft = g.matmul(probs, e);
    let positions: Vec<usize> = (1..len).collect();
    splice_soft_rows(model, g, hard.ids(), soft, &positions)
}

/// Kernel loss of one label group on one branch with the bandwidths held
/// fixed, and its gradient. Used to check gradients against finite
/// differences of the same fixed-bandwidth function.
pub fn kernel_loss_fixed<T: Scalar>(
    model: &Model<T>,
    group: &[&PseudoTextItem],
    branch: Branch,
    bandwidths: &[f64],
) -> Result<(f64, Gradients<T>)> {
    let targets = group
        .iter()
        .map(|it| it.soft.as_ref().map(|s| s.matrix.clone()))
        .collect::<Option<Vec<Mat<f64>>>>()
        .ok_or_else(|| KestError::precondition("pseudo text lacks its soft form"))?;
    if group.len() < 2 {
        return Err(KestError::precondition("kernel groups need at least two items"));
    }
    let mut g = Graph::new(model.params());
    let nodes: Vec<NodeId> = group
        .iter()
        .map(|it| match branch {
            Branch::Ag => ag_soft_node(model, &mut g, it, None),
            _ => nag_soft_node(model, &mut g, it, None),
        })
        .collect();
    let k = g.kernel_loss(&nodes, &targets, bandwidths);
    Ok((g.scalar(k).f64(), g.backward(k)))
}

fn evaluate_batch<T: Scalar>(
    model: &Model<T>,
    batch: &BatchSpec<'_>,
    weights: &LossWeights,
    kernel_m: usize,
    mut dropout: Option<&mut Rng>,
    want_grads: bool,
) -> Result<(LossParts, Option<Gradients<T>>)> {
    let b = batch.samples.len();
    if b == 0 && batch.kernel_groups.is_empty() {
        return Err(KestError::precondition("empty batch"));
    }
    let mut g = Graph::new(model.params());
    let mut terms: Vec<(NodeId, T)> = Vec::new();
    let mut parts = LossParts::default();
    let inv_b = if b > 0 { 1.0 / b as f64 } else { 0.0 };

    for s in &batch.samples {
        let len = s.tokens.len();
        if weights.lambda_c > 0.0 {
            let cls = model.classification_graph(&mut g, s.tokens.active(), len, dropout.as_deref_mut());
            let lc = g.cross_entropy(cls, &[Some(s.label)]);
            parts.cls_ce += g.scalar(lc).f64() * inv_b;
            terms.push((lc, T::of(weights.lambda_c * inv_b)));
        }
        if !s.generator {
            continue;
        }
        if weights.lambda_ag > 0.0 {
            let ag = model.generation_graph(&mut g, Branch::Ag, s.tokens.active(), len, s.label, dropout.as_deref_mut());
            let lag = g.cross_entropy(ag.logits, &ag_targets(s.tokens)[..len]);
            parts.ag_ce += g.scalar(lag).f64() * inv_b;
            terms.push((lag, T::of(weights.lambda_ag * inv_b)));
        }
        if weights.lambda_nag > 0.0 {
            let masked = s.mask.apply(s.tokens)?;
            let nag = model.generation_graph(&mut g, Branch::Nag, masked.active(), len, s.label, dropout.as_deref_mut());
            let lnag = g.cross_entropy(nag.logits, &nag_targets(s.tokens, &s.mask)?[..len]);
            parts.nag_ce += g.scalar(lnag).f64() * inv_b;
            terms.push((lnag, T::of(weights.lambda_nag * inv_b)));
        }
    }
    parts.ce = weights.lambda_c * parts.cls_ce + weights.lambda_ag * parts.ag_ce + weights.lambda_nag * parts.nag_ce;

    for group in &batch.kernel_groups {
        if group.len() < 2 {
            return Err(KestError::precondition("kernel groups need at least two items"));
        }
        let label = group[0].label;
        if group.iter().any(|it| it.label != label) {
            return Err(KestError::precondition("kernel groups must share one label"));
        }
        let targets = group
            .iter()
            .map(|it| it.soft.as_ref().map(|s| s.matrix.clone()))
            .collect::<Option<Vec<Mat<f64>>>>()
            .ok_or_else(|| KestError::precondition("pseudo text in a kernel group lacks its soft form"))?;
        for branch in [Branch::Ag, Branch::Nag] {
            let nodes: Vec<NodeId> = group
                .iter()
                .map(|it| match branch {
                    Branch::Ag => ag_soft_node(model, &mut g, it, dropout.as_deref_mut()),
                    _ => nag_soft_node(model, &mut g, it, dropout.as_deref_mut()),
                })
                .collect();
            let generated: Vec<Mat<f64>> = nodes.iter().map(|&n| g.value(n).cast()).collect();
            let bandwidths = median_bandwidths_raw(&generated, &targets, kernel_m)?;
            let k = g.kernel_loss(&nodes, &targets, &bandwidths);
            let value = g.scalar(k).f64();
            let lambda = if branch == Branch::Ag { weights.lambda_ag } else { weights.lambda_nag };
            terms.push((k, T::of(lambda)));
            if branch == Branch::Ag {
                parts.mmd_ag += value;
            } else {
                parts.mmd_nag += value;
            }
            parts.dumps.push(KernelDump { label, branch, generated, targets: targets.clone(), bandwidths, value });
        }
    }
    parts.mmd = weights.lambda_ag * parts.mmd_ag + weights.lambda_nag * parts.mmd_nag;

    let total = g.weighted_sum(&terms);
    parts.total = g.scalar(total).f64();
    if !parts.total.is_finite() {
        return Err(KestError::Training(format!("non-finite batch loss {}", parts.total)));
    }
    let grads = want_grads.then(|| g.backward(total));
    Ok((parts, grads))
}

/// Loss of one batch without the backward pass.
pub fn batch_loss_value<T: Scalar>(
    model: &Model<T>,
    batch: &BatchSpec<'_>,
    weights: &LossWeights,
    kernel_m: usize,
) -> Result<LossParts> {
    Ok(evaluate_batch(model, batch, weights, kernel_m, None, false)?.0)
}

/// Loss of one batch and its gradients. CE terms are averaged over the
/// batch's samples; each kernel group adds `λ_ag·L_ker(AG) + λ_nag·L_ker(NAG)`.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    batch: &BatchSpec<'_>,
    weights: &LossWeights,
    kernel_m: usize,
    dropout: Option<&mut Rng>,
) -> Result<(LossParts, Gradients<T>)> {
    let (parts, grads) = evaluate_batch(model, batch, weights, kernel_m, dropout, true)?;
    Ok((parts, grads.expect("gradients requested")))
}

fn counters_of<T: Scalar>(models: &[&Model<T>]) -> (u64, u64) {
    models.iter().fold((0, 0), |(a, n), m| (a + m.counters().get(Branch::Ag), n + m.counters().get(Branch::Nag)))
}

/// Labels every unlabeled example with the classifier's argmax.
pub fn pseudo_label<T: Scalar>(model: &Model<T>, unlabeled: &[UnlabeledExample]) -> Result<Vec<LabeledExample>> {
    unlabeled
        .par_iter()
        .map(|ex| {
            let p = model.forward_cls(&ex.tokens)?;
            let label = (0..p.len()).fold(0, |best, k| if p[k] > p[best] { k } else { best });
            Ok(LabeledExample { id: ex.id, tokens: ex.tokens.clone(), label })
        })
        .collect()
}

/// Label-stratified uniform sample of `count` items. Quotas are split
/// evenly over the labels present; a label with fewer items than its quota
/// is sampled with replacement after its items are used once.
pub fn stratified_sample(pool: &[LabeledExample], count: usize, num_classes: usize, rng: &mut Rng) -> Vec<LabeledExample> {
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, ex) in pool.iter().enumerate() {
        by_label[ex.label].push(i);
    }
    let present: Vec<usize> = (0..num_classes).filter(|&k| !by_label[k].is_empty()).collect();
    if present.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(count);
    for (slot, &k) in present.iter().enumerate() {
        let quota = count / present.len() + usize::from(slot < count % present.len());
        let idx = &mut by_label[k];
        idx.shuffle(rng);
        out.extend((0..quota).map(|j| pool[idx[j % idx.len()]].clone()));
    }
    out
}

/// One NAG pass per item: fresh mask at `p_m`, infilling conditioned on the
/// item's label.
pub fn pseudo_text<T: Scalar>(
    model: &Model<T>,
    d_pseudo: &[LabeledExample],
    p_m: f64,
    soft: bool,
    top_p: f64,
    seed: u64,
    epoch: u64,
) -> Result<Vec<PseudoTextItem>> {
    d_pseudo
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut r = rng::stream(seed, &[tag::PSEUDO, epoch, i as u64]);
            let mask = sample_mask(ex.tokens.maskable_len(), p_m, &mut r);
            let mut item = generate_nag(model, &ex.tokens, &mask, ex.label, top_p, &mut r, soft)?;
            item.source_example_id = ex.id;
            Ok(item)
        })
        .collect()
}

fn hard_item(tokens: TokenSequence, label: usize, source: usize) -> PseudoTextItem {
    PseudoTextItem {
        mask: MaskVector::empty(tokens.maskable_len()),
        masked_input: tokens.clone(),
        hard_tokens: tokens,
        soft: None,
        label,
        source_example_id: source,
    }
}

/// Hard AG pseudo text from label-stratified prompts cut from D_l.
fn ag_pseudo_text<T: Scalar>(
    model: &Model<T>,
    labeled: &[LabeledExample],
    count: usize,
    st: &STConfig,
    decode: &DecodeConfig,
    epoch: u64,
) -> Result<Vec<PseudoTextItem>> {
    let k = model.config().num_classes;
    let sources = stratified_sample(labeled, count, k, &mut rng::stream(st.seed, &[tag::PSEUDO, epoch, u64::MAX]));
    let l_max = model.config().l_max;
    sources
        .par_iter()
        .enumerate()
        .map(|(i, src)| {
            let content = src.tokens.content();
            let keep = ((content.len() as f64 * st.prompt_fraction).floor() as usize).min(decode.max_len.saturating_sub(1));
            let prompt = TokenSequence::from_content(&content[..keep], l_max);
            let mut r = rng::stream(st.seed ^ decode.seed, &[tag::DECODE, epoch, i as u64]);
            let tokens = generate_ag(model, src.label, &prompt, decode, &mut r)?;
            Ok(hard_item(tokens, src.label, src.id))
        })
        .collect()
}

/// Keeps the `count` best items by confidence plus inverse BALD
/// uncertainty; ties go to the earlier item.
fn select_pseudo_text<T: Scalar>(
    model: &Model<T>,
    candidates: Vec<PseudoTextItem>,
    count: usize,
    st: &STConfig,
    epoch: u64,
) -> Result<Vec<PseudoTextItem>> {
    let scores = candidates
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let conf = model.forward_cls(&it.hard_tokens)?[it.label];
            let mut r = rng::stream(st.seed, &[tag::BALD, epoch, i as u64]);
            let u = bald_uncertainty(model, &it.hard_tokens, st.select.mc_passes, &mut r)?;
            Ok(selection_score_with(conf, u, st.select.epsilon))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    let mut slots: Vec<Option<PseudoTextItem>> = candidates.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().expect("selected once")).collect())
}

/// Joint loss on a fixed validation set (fixed masks, no dropout).
fn validation_loss<T: Scalar>(model: &Model<T>, val: &[LabeledExample], weights: &LossWeights, p_m: f64, seed: u64) -> Result<f64> {
    let samples: Vec<CeSample<'_>> = val
        .iter()
        .map(|ex| CeSample {
            tokens: &ex.tokens,
            label: ex.label,
            mask: sample_mask(ex.tokens.maskable_len(), p_m, &mut rng::stream(seed, &[tag::MASK, u64::MAX, ex.id as u64])),
            generator: true,
        })
        .collect();
    let mut total = 0.0;
    for chunk in samples.chunks(32) {
        let batch = BatchSpec { samples: chunk.to_vec(), kernel_groups: vec![] };
        total += evaluate_batch(model, &batch, weights, 0, None, false)?.0.total * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn elapsed(st: &STConfig, start: Instant) -> f64 {
    if st.record_wall_clock {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

/// The base model and its training history.
#[derive(Debug, Clone)]
pub struct BaseOutput<T: Scalar> {
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Test items used to pick the base checkpoint; later metrics skip them.
pub fn validation_split(bundle: &DatasetBundle, st: &STConfig) -> usize {
    st.validation_size.min(bundle.test.len() / 2)
}

/// Joint training on D_l only; keeps the epoch with the lowest validation loss.
pub fn train_base<T: Scalar>(
    bundle: &DatasetBundle,
    model_config: &ModelConfig,
    st: &STConfig,
    out_dir: Option<&Path>,
) -> Result<BaseOutput<T>> {
    st.validate()?;
    if bundle.labeled.is_empty() {
        return Err(KestError::precondition("base training needs a non-empty labeled set"));
    }
    let mut model = Model::<T>::new(model_config.clone(), st.seed)?;
    let mut opt = AdamW::new(st.optimizer_base, model.params());
    let val = &bundle.test[..validation_split(bundle, st)];
    let mut best: Option<(f64, Model<T>, usize)> = None;
    let mut history = Vec::new();

    for epoch in 1..=st.base_epochs {
        let start = Instant::now();
        let (ag0, nag0) = counters_of(&[&model]);
        let mut order: Vec<usize> = (0..bundle.labeled.len()).collect();
        order.shuffle(&mut rng::stream(st.seed, &[tag::POOL, 0, epoch as u64]));
        let mut ce_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(st.batch_size).enumerate() {
            let samples = chunk
                .iter()
                .map(|&i| {
                    let ex = &bundle.labeled[i];
                    let mut r = rng::stream(st.seed, &[tag::MASK, 0, epoch as u64, ex.id as u64]);
                    CeSample { tokens: &ex.tokens, label: ex.label, mask: sample_mask(ex.tokens.maskable_len(), st.p_m_base, &mut r), generator: true }
                })
                .collect();
            let batch = BatchSpec { samples, kernel_groups: vec![] };
            let mut dr = rng::stream(st.seed, &[tag::TRAIN, 0, epoch as u64, step as u64]);
            let (parts, grads) = batch_loss(&model, &batch, &st.weights_base, st.kernel_m, Some(&mut dr))
                .map_err(|e| abort(e, "base", epoch))?;
            opt.step(model.params_mut(), &grads);
            ce_sum += parts.ce;
            steps += 1;
        }
        let vloss = if val.is_empty() { None } else { Some(validation_loss(&model, val, &st.weights_base, st.p_m_base, st.seed)?) };
        let (ag1, nag1) = counters_of(&[&model]);
        history.push(EpochRecord {
            epoch,
            mode: "base".into(),
            ce_loss: ce_sum / steps as f64,
            mmd_loss: 0.0,
            pl_accuracy: None,
            wall_clock_s: elapsed(st, start),
            forward_passes_ag: ag1 - ag0,
            forward_passes_nag: nag1 - nag0,
            snapshot_checksum: None,
            model_checksum: model.checksum(),
            embedding_checksum: model.embedding_checksum(),
            pool_sizes: [bundle.labeled.len(), 0, 0],
            dropped_kernel_items: 0,
            validation_loss: vloss,
        });
        let score = vloss.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, model.clone(), epoch));
        }
    }
    let (_, model, best_epoch) = best.expect("at least one epoch");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&model, &dir.join("base.ckpt"))?;
    }
    Ok(BaseOutput { model, history, best_epoch })
}

fn abort(e: KestError, phase: &str, epoch: usize) -> KestError {
    match e {
        KestError::Training(msg) => KestError::Training(format!("{phase} epoch {epoch}: {msg}")),
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput<T: Scalar> {
    pub mode: Mode,
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
    /// Bundle with the last epoch's pseudo labels and pseudo text.
    pub bundle: DatasetBundle,
}

/// Base training followed by the configured self-training variant.
pub fn run<T: Scalar>(
    bundle: &DatasetBundle,
    model_config: &ModelConfig,
    st: &STConfig,
    decode: &DecodeConfig,
    out_dir: Option<&Path>,
) -> Result<RunOutput<T>> {
    let base = train_base::<T>(bundle, model_config, st, out_dir)?;
    run_from_base(&base, bundle, st, decode, out_dir)
}

/// Self-training from an already trained base model.
pub fn run_from_base<T: Scalar>(
    base: &BaseOutput<T>,
    bundle: &DatasetBundle,
    st: &STConfig,
    decode: &DecodeConfig,
    out_dir: Option<&Path>,
) -> Result<RunOutput<T>> {
    st.validate()?;
    let mut history = base.history.clone();
    let mut model = base.model.clone();
    let mut bundle = bundle.clone();
    bundle.pseudo_labeled.clear();
    bundle.pseudo_text.clear();
    if st.mode == Mode::Supervised {
        return Ok(RunOutput { mode: st.mode, model, history, bundle });
    }
    decode.validate(model.config().l_max)?;
    model.set_embedding_frozen(true);
    let mut opt = AdamW::new(st.optimizer_st, model.params());
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    for epoch in 1..=st.max_epochs {
        let record = st_epoch(&mut model, &mut opt, &mut bundle, st, decode, epoch).map_err(|e| abort(e, st.mode.name(), epoch))?;
        if let Some(dir) = out_dir {
            save_checkpoint(&model, &dir.join(format!("epoch{epoch}.ckpt")))?;
            if !bundle.pseudo_labeled.is_empty() {
                write_pseudo_labels(&dir.join(format!("pl_epoch{epoch}.jsonl")), &bundle.pseudo_labeled)?;
            }
            write_pseudo_text(dir, &format!("pt_epoch{epoch}"), &bundle.pseudo_text)?;
        }
        history.push(record);
    }
    Ok(RunOutput { mode: st.mode, model, history, bundle })
}

/// Rebuilds pseudo data from a frozen snapshot, then makes one optimization
/// pass over the pool.
fn st_epoch<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    bundle: &mut DatasetBundle,
    st: &STConfig,
    decode: &DecodeConfig,
    epoch: usize,
) -> Result<EpochRecord> {
    let start = Instant::now();
    let e = epoch as u64;
    let snapshot = model.clone();
    let (ag0, nag0) = counters_of(&[model]);
    let k = model.config().num_classes;
    let count = pseudo_text_count(bundle.labeled.len(), st.ratio_pt);

    bundle.pseudo_labeled = if st.mode.uses_pseudo_labels() { pseudo_label(&snapshot, &bundle.unlabeled)? } else { Vec::new() };
    let pl_accuracy = bundle.pseudo_label_accuracy(&bundle.pseudo_labeled);

    bundle.pseudo_text = match st.mode {
        Mode::Kest | Mode::KestNoKernel => {
            let pool: Vec<LabeledExample> = bundle.labeled.iter().chain(&bundle.pseudo_labeled).cloned().collect();
            let d_pseudo = stratified_sample(&pool, count, k, &mut rng::stream(st.seed, &[tag::PSEUDO, e, u64::MAX - 1]));
            pseudo_text(&snapshot, &d_pseudo, st.p_m_st, st.mode.is_soft(), st.nag_top_p, st.seed, e)?
        }
        Mode::Pt | Mode::PtNoise | Mode::PtNoisePl => {
            let mut items = ag_pseudo_text(&snapshot, &bundle.labeled, count, st, decode, e)?;
            if st.mode.uses_noise() {
                for (i, it) in items.iter_mut().enumerate() {
                    let mut r = rng::stream(st.seed, &[tag::NOISE, e, i as u64]);
                    *it = hard_item(noise_corrupt(&it.hard_tokens, &st.noise, &mut r), it.label, it.source_example_id);
                }
            }
            items
        }
        Mode::PtSelectPl => {
            let over = (count as f64 * st.select.overgen_factor).ceil() as usize;
            let candidates = ag_pseudo_text(&snapshot, &bundle.labeled, over, st, decode, e)?;
            select_pseudo_text(&snapshot, candidates, count, st, e)?
        }
        Mode::Supervised => unreachable!("supervised runs stop after base training"),
    };

    let pool = build_training_pool(bundle, st.seed, e);
    let sizes = [bundle.labeled.len(), bundle.pseudo_labeled.len(), bundle.pseudo_text.len()];
    let mut pending: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let (mut ce_sum, mut mmd_sum, mut steps, mut mmd_steps) = (0.0, 0.0, 0usize, 0usize);

    for (step, chunk) in pool.chunks(st.batch_size).enumerate() {
        let mut samples = Vec::with_capacity(chunk.len());
        for entry in chunk {
            let (tokens, label, id, generator) = match entry.tag {
                SourceTag::Real => {
                    let ex = &bundle.labeled[entry.index];
                    (&ex.tokens, ex.label, ex.id, true)
                }
                SourceTag::PseudoLabel => {
                    let ex = &bundle.pseudo_labeled[entry.index];
                    (&ex.tokens, ex.label, ex.id, true)
                }
                SourceTag::PseudoText => {
                    let it = &bundle.pseudo_text[entry.index];
                    let soft = it.soft.is_some();
                    if soft {
                        pending.entry(it.label).or_default().push(entry.index);
                    }
                    (&it.hard_tokens, it.label, entry.index, !soft)
                }
            };
            let mut r = rng::stream(st.seed, &[tag::MASK, e, entry.tag as u64 + 1, id as u64]);
            samples.push(CeSample { tokens, label, mask: sample_mask(tokens.maskable_len(), st.p_m_st, &mut r), generator });
        }
        let mut kernel_groups = Vec::new();
        for idx in pending.values_mut() {
            if idx.len() >= 2 {
                kernel_groups.push(idx.drain(..).map(|i| &bundle.pseudo_text[i]).collect());
            }
        }
        let batch = BatchSpec { samples, kernel_groups };
        let mut dr = rng::stream(st.seed, &[tag::TRAIN, e, step as u64]);
        let (parts, grads) = batch_loss(model, &batch, &st.weights_st, st.kernel_m, Some(&mut dr))?;
        opt.step(model.params_mut(), &grads);
        ce_sum += parts.ce;
        steps += 1;
        if !batch.kernel_groups.is_empty() {
            mmd_sum += parts.mmd;
            mmd_steps += 1;
        }
    }
    let dropped: usize = pending.values().map(Vec::len).sum();
    if dropped > 0 {
        diagnostics::warn(Warning::DroppedKernelGroup, &format!("{dropped} pseudo-text item(s) left unscored at epoch {epoch}"));
    }
    let (ag1, nag1) = counters_of(&[model]);
    let (sag, snag) = counters_of(&[&snapshot]);
    Ok(EpochRecord {
        epoch,
        mode: st.mode.name().into(),
        ce_loss: ce_sum / steps.max(1) as f64,
        mmd_loss: if mmd_steps > 0 { mmd_sum / mmd_steps as f64 } else { 0.0 },
        pl_accuracy,
        wall_clock_s: elapsed(st, start),
        forward_passes_ag: ag1 - ag0 + sag,
        forward_passes_nag: nag1 - nag0 + snag,
        snapshot_checksum: Some(snapshot.checksum()),
        model_checksum: model.checksum(),
        embedding_checksum: model.embedding_checksum(),
        pool_sizes: sizes,
        dropped_kernel_items: dropped,
        validation_loss: None,
    })
}

#[cfg(test)]
mod tests;
