//! Decoding: nucleus sampling, autoregressive generation, mask sampling and
//! one-pass masked infilling.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::error::{KestError, Result};
use crate::losses::SoftSequence;
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::{softmax_in_place, Mat, Scalar};
use crate::tokenizer::{TokenId, TokenSequence, BOS, EOS, MASK, NUM_SPECIAL, PAD, UNK};

/// Cumulative-mass slack when closing the nucleus, so `0.6 + 0.3` reaches
/// `p = 0.9` despite rounding.
const NUCLEUS_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub top_p: f64,
    /// Minimum content tokens before EOS may be emitted.
    pub min_len: usize,
    /// Maximum content tokens.
    pub max_len: usize,
    pub repetition_penalty: f64,
    pub no_repeat_ngram: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { top_p: 0.9, min_len: 4, max_len: 32, repetition_penalty: 1.0, no_repeat_ngram: 4, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self, l_max: usize) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(KestError::config(format!("decode.top_p {} outside (0, 1]", self.top_p)));
        }
        if self.min_len > self.max_len || self.max_len + 2 > l_max {
            return Err(KestError::config(format!(
                "decode lengths need min_len <= max_len <= L_max - 2 (got {} / {} / {l_max})",
                self.min_len, self.max_len
            )));
        }
        if !(self.repetition_penalty.is_finite() && self.repetition_penalty > 0.0) {
            return Err(KestError::config("decode.repetition_penalty must be positive"));
        }
        Ok(())
    }
}

/// Bernoulli mask over the maskable positions `[1, length − 1)` of a
/// sequence; bit `i` covers position `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskVector {
    bits: Vec<bool>,
}

impl MaskVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn empty(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Sequence positions with a set bit.
    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i + 1)
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        pos >= 1 && self.bits.get(pos - 1).copied().unwrap_or(false)
    }

    /// `0`/`1` characters, one per maskable position.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(KestError::integrity(format!("invalid mask character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    /// Writes MASK at every masked position.
    pub fn apply(&self, original: &TokenSequence) -> Result<TokenSequence> {
        if self.len() != original.maskable_len() {
            return Err(KestError::precondition(format!(
                "mask has {} bits but the sequence has {} maskable positions",
                self.len(),
                original.maskable_len()
            )));
        }
        let mut out = original.clone();
        for pos in self.masked_positions() {
            out.set(pos, MASK);
        }
        Ok(out)
    }
}

/// A pseudo-text example: generated tokens, optional soft representation,
/// the mask that produced it and the conditioning label.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTextItem {
    pub hard_tokens: TokenSequence,
    pub soft: Option<SoftSequence>,
    pub mask: MaskVector,
    pub masked_input: TokenSequence,
    pub label: usize,
    pub source_example_id: usize,
}

impl PseudoTextItem {
    /// An unmodified copy of a labeled example (empty mask, no soft form).
    pub fn identity(ex: &LabeledExample) -> Self {
        Self {
            hard_tokens: ex.tokens.clone(),
            soft: None,
            mask: MaskVector::empty(ex.tokens.maskable_len()),
            masked_input: ex.tokens.clone(),
            label: ex.label,
            source_example_id: ex.id,
        }
    }
}

fn is_regular(id: usize) -> bool {
    id >= NUM_SPECIAL
}

/// Tokens of the top-`p` nucleus with renormalized probabilities, highest
/// first; equal probabilities are ordered by token id.
pub fn nucleus(probs: &[f64], p: f64) -> Result<Vec<(usize, f64)>> {
    if !(p > 0.0) {
        return Err(KestError::config(format!("top-p threshold {p} must be positive")));
    }
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += probs[i];
        if mass >= p - NUCLEUS_SLACK {
            break;
        }
    }
    Ok(kept.into_iter().map(|i| (i, probs[i] / mass)).collect())
}

fn sample_from(nucleus: &[(usize, f64)], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(id, p) in nucleus {
        acc += p;
        if u < acc {
            return id;
        }
    }
    nucleus.last().expect("non-empty nucleus").0
}

/// Softmax, nucleus, renormalize, sample.
pub fn sample_top_p(logits: &[f64], p: f64, rng: &mut Rng) -> Result<usize> {
    if logits.iter().any(|v| v.is_nan()) {
        return Err(KestError::precondition("logits contain NaN"));
    }
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs);
    let n = nucleus(&probs, p)?;
    Ok(sample_from(&n, rng))
}

/// Tokens that would complete an n-gram already present in `history`.
fn banned_by_ngram(history: &[TokenId], n: usize) -> HashSet<TokenId> {
    let mut banned = HashSet::new();
    if n == 0 || history.len() + 1 < n {
        return banned;
    }
    let prefix = &history[history.len() + 1 - n..];
    for w in history.windows(n) {
        if &w[..n - 1] == prefix {
            banned.insert(w[n - 1]);
        }
    }
    banned
}

/// Autoregressive top-p generation from `prompt`'s content tokens. One
/// causal forward pass per sampled token.
pub fn generate_ag<T: Scalar>(
    model: &Model<T>,
    label: usize,
    prompt: &TokenSequence,
    config: &DecodeConfig,
    rng: &mut Rng,
) -> Result<TokenSequence> {
    let l_max = model.config().l_max;
    config.validate(l_max)?;
    let mut content: Vec<TokenId> = prompt.content().to_vec();
    if content.len() >= config.max_len {
        return Err(KestError::precondition(format!(
            "prompt of {} tokens leaves no room under max_len {}",
            content.len(),
            config.max_len
        )));
    }
    while content.len() < config.max_len {
        let mut prefix = Vec::with_capacity(content.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(&content);
        let logits = model.forward_ag_prefix(&prefix, label)?;
        let mut row: Vec<f64> = logits.row(prefix.len() - 1).iter().map(|v| v.f64()).collect();

        if config.repetition_penalty != 1.0 {
            let seen: HashSet<TokenId> = content.iter().copied().collect();
            for t in seen {
                let v = &mut row[t as usize];
                *v = if *v > 0.0 { *v / config.repetition_penalty } else { *v * config.repetition_penalty };
            }
        }
        for special in [PAD, MASK, BOS, UNK] {
            row[special as usize] = f64::NEG_INFINITY;
        }
        if content.len() < config.min_len {
            row[EOS as usize] = f64::NEG_INFINITY;
        }
        for t in banned_by_ngram(&content, config.no_repeat_ngram) {
            row[t as usize] = f64::NEG_INFINITY;
        }
        if row.iter().all(|v| *v == f64::NEG_INFINITY) {
            break;
        }
        let next = sample_top_p(&row, config.top_p, rng)? as TokenId;
        if next == EOS {
            break;
        }
        content.push(next);
    }
    Ok(TokenSequence::from_content(&content, l_max))
}

/// Draws an independent Bernoulli(`p_m`) bit per maskable position. When
/// `p_m > 0` and nothing was drawn, one uniformly chosen position is forced.
pub fn sample_mask(length: usize, p_m: f64, rng: &mut Rng) -> MaskVector {
    assert!((0.0..=1.0).contains(&p_m), "mask probability outside [0, 1]");
    let mut bits: Vec<bool> = (0..length).map(|_| rng.random_bool(p_m)).collect();
    if p_m > 0.0 && length > 0 && !bits.contains(&true) {
        bits[rng.random_range(0..length)] = true;
    }
    MaskVector::new(bits)
}

/// One-pass masked infilling.
///
/// Masked positions are resampled (hard mode, top-`p`) or kept as the full
/// model distribution (soft mode; hard tokens are then the most likely
/// regular token). Unmasked positions are copied unchanged.
pub fn generate_nag<T: Scalar>(
    model: &Model<T>,
    original: &TokenSequence,
    mask: &MaskVector,
    label: usize,
    top_p: f64,
    rng: &mut Rng,
    soft: bool,
) -> Result<PseudoTextItem> {
    let masked = mask.apply(original)?;
    let logits = model.forward_nag(&masked, label)?;
    let v = model.config().vocab_size;
    let l_max = original.l_max();
    let mut hard = original.clone();
    let mut probs = if soft { Some(Mat::<T>::zeros(l_max, v)) } else { None };

    for pos in 0..l_max {
        if mask.is_masked(pos) {
            let mut row: Vec<f64> = logits.row(pos).iter().map(|x| x.f64()).collect();
            if let Some(p) = probs.as_mut() {
                softmax_in_place(&mut row);
                let best = (0..v)
                    .filter(|&i| is_regular(i))
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .expect("regular tokens exist");
                hard.set(pos, best as TokenId);
                for (dst, &src) in p.row_mut(pos).iter_mut().zip(&row) {
                    *dst = T::of(src);
                }
            } else {
                for i in 0..NUM_SPECIAL {
                    row[i] = f64::NEG_INFINITY;
                }
                hard.set(pos, sample_top_p(&row, top_p, rng)? as TokenId);
            }
        } else if let Some(p) = probs.as_mut() {
            p[(pos, original.ids()[pos] as usize)] = T::one();
        }
    }
    let soft = match probs {
        Some(p) => Some(model.soft_embed(&p, original.len())?),
        None => None,
    };
    Ok(PseudoTextItem {
        hard_tokens: hard,
        soft,
        mask: mask.clone(),
        masked_input: masked,
        label,
        source_example_id: usize::MAX,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Branch, ModelConfig};
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn tiny() -> Model<f64> {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_label: 4,
            d_ff: 16,
            cls_hidden: 8,
            vocab_size: 12,
            num_classes: 2,
            l_max: 10,
            dropout_rate: 0.0,
        };
        Model::new(cfg, 5).unwrap()
    }

    #[test]
    fn nucleus_example() {
        let probs = [0.6, 0.3, 0.08, 0.02];
        let n = nucleus(&probs, 0.9).unwrap();
        assert_eq!(n.len(), 2);
        assert_eq!(n[0].0, 0);
        assert!((n[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((n[1].1 - 1.0 / 3.0).abs() < 1e-12);
        let logits: Vec<f64> = probs.iter().map(|p: &f64| p.ln()).collect();
        let mut r = rng(1);
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[sample_top_p(&logits, 0.9, &mut r).unwrap()] += 1;
        }
        assert_eq!(counts[2] + counts[3], 0);
        let f0 = counts[0] as f64 / 1e5;
        // 3σ binomial bound around 2/3.
        assert!((f0 - 2.0 / 3.0).abs() < 3.0 * (2.0 / 9.0 / 1e5f64).sqrt());
    }

    #[test]
    fn full_nucleus_matches_softmax_frequencies() {
        let logits = [0.5, -0.2, 1.0, 0.0, -1.5];
        let mut probs = logits.to_vec();
        softmax_in_place(&mut probs);
        let mut r = rng(2);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sample_top_p(&logits, 1.0, &mut r).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() < 3.0 * sd + 1e-12);
        }
    }

    #[test]
    fn dominant_logit_always_wins_and_bad_p_is_rejected() {
        let logits = [0.0, 80.0, 0.0];
        let mut r = rng(3);
        for _ in 0..1000 {
            assert_eq!(sample_top_p(&logits, 0.9, &mut r).unwrap(), 1);
        }
        assert!(matches!(sample_top_p(&logits, 0.0, &mut r), Err(KestError::Config(_))));
    }

    #[test]
    fn ngram_ban_lists_completions() {
        let history = [5, 6, 7, 5, 6];
        let banned = banned_by_ngram(&history, 3);
        assert_eq!(banned, HashSet::from([7]));
        assert!(banned_by_ngram(&history, 0).is_empty());
    }

    #[test]
    fn mask_sampling_cases() {
        let mut r = rng(4);
        assert_eq!(sample_mask(10, 0.0, &mut r).count(), 0);
        assert_eq!(sample_mask(10, 1.0, &mut r).count(), 10);
        for _ in 0..100 {
            assert!(sample_mask(3, 1e-9, &mut r).count() == 1);
        }
        let total: usize = (0..100).map(|_| sample_mask(100, 0.7, &mut r).count()).sum();
        let frac = total as f64 / 10_000.0;
        assert!((frac - 0.7).abs() <= 0.015, "{frac}");
    }

    #[test]
    fn mask_bit_string_round_trip() {
        let m = MaskVector::new(vec![true, false, true]);
        assert_eq!(m.to_bit_string(), "101");
        assert_eq!(MaskVector::from_bit_string("101").unwrap(), m);
        assert!(MaskVector::from_bit_string("12").is_err());
        assert_eq!(m.masked_positions().collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn ag_generation_boundary_and_determinism() {
        let model = tiny();
        let prompt = TokenSequence::from_content(&[5, 6], 10);
        let cfg = DecodeConfig { min_len: 3, max_len: 3, top_p: 0.9, ..DecodeConfig::default() };
        let before = model.counters().get(Branch::Ag);
        let out = generate_ag(&model, 1, &prompt, &cfg, &mut rng(9)).unwrap();
        assert_eq!(out.content().len(), 3);
        assert_eq!(&out.content()[..2], &[5, 6]);
        assert_eq!(model.counters().get(Branch::Ag) - before, 1);

        let cfg = DecodeConfig { min_len: 0, max_len: 8, ..DecodeConfig::default() };
        let a = generate_ag(&model, 0, &prompt, &cfg, &mut rng(11)).unwrap();
        let b = generate_ag(&model, 0, &prompt, &cfg, &mut rng(11)).unwrap();
        assert_eq!(a, b);
        assert!(a.content().iter().all(|&t| is_regular(t as usize)));
    }

    #[test]
    fn ag_forward_passes_equal_sampling_steps() {
        let model = tiny();
        let prompt = TokenSequence::from_content(&[], 10);
        let cfg = DecodeConfig { min_len: 8, max_len: 8, no_repeat_ngram: 0, ..DecodeConfig::default() };
        let before = model.counters().get(Branch::Ag);
        let out = generate_ag(&model, 0, &prompt, &cfg, &mut rng(1)).unwrap();
        assert_eq!(out.content().len(), 8);
        assert_eq!(model.counters().get(Branch::Ag) - before, 8);
    }

    #[test]
    fn empty_mask_returns_input_and_one_hot_soft_rows() {
        let model = tiny();
        let original = TokenSequence::from_content(&[5, 7, 9], 10);
        let mask = MaskVector::empty(original.maskable_len());
        let before = model.counters().get(Branch::Nag);
        let item = generate_nag(&model, &original, &mask, 0, 0.9, &mut rng(1), true).unwrap();
        assert_eq!(model.counters().get(Branch::Nag) - before, 1);
        assert_eq!(item.hard_tokens, original);
        let soft = item.soft.unwrap();
        for pos in 0..original.len() {
            assert_eq!(soft.matrix.row(pos), model.embedding().row(original.ids()[pos] as usize));
        }
    }

    #[test]
    fn nag_keeps_unmasked_positions_and_counts_one_pass() {
        let model = tiny();
        let original = TokenSequence::from_content(&[5, 6, 7, 8, 9, 10], 10);
        let mut r = rng(2);
        for soft in [false, true] {
            let mask = sample_mask(original.maskable_len(), 0.5, &mut r);
            let before = model.counters().get(Branch::Nag);
            let item = generate_nag(&model, &original, &mask, 1, 0.9, &mut r, soft).unwrap();
            assert_eq!(model.counters().get(Branch::Nag) - before, 1);
            for pos in 0..original.l_max() {
                if !mask.is_masked(pos) {
                    assert_eq!(item.hard_tokens.ids()[pos], original.ids()[pos]);
                }
            }
            assert_eq!(item.soft.is_some(), soft);
            assert_eq!(item.masked_input.ids().iter().filter(|&&t| t == MASK).count(), mask.count());
        }
    }
}
