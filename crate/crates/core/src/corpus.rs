//! Synthetic attribute-labeled corpora and semi-supervised splits.
//!
//! Sentences come from a templated slot grammar. Each template is a fixed
//! sequence of function words and content slots; a content slot is filled
//! from the example's attribute lexicon with probability `lexicon_strength`
//! and from a shared neutral lexicon otherwise. Attribute lexicons are
//! pairwise disjoint, so the joint distribution of text and label is known
//! exactly and control accuracy can be judged without a learned evaluator.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::decode::PseudoTextItem;
use crate::error::{KestError, Result};
use crate::rng::{self, tag};
use crate::tokenizer::{self, TokenId, TokenSequence, Vocabulary, NUM_SPECIAL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_attributes: usize,
    pub vocab_size: usize,
    /// Inclusive content-token length range.
    pub length_range: (usize, usize),
    pub lexicon_strength: f64,
    pub template_count: usize,
    pub num_examples: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_attributes: 2,
            vocab_size: 512,
            length_range: (8, 20),
            lexicon_strength: 0.7,
            template_count: 12,
            num_examples: 1000,
            seed: 7,
        }
    }
}

/// Sizes of the token classes carved out of the regular vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    function: usize,
    lexicon: usize,
    neutral: usize,
}

impl CorpusSpec {
    fn layout(&self) -> Result<Layout> {
        let regular = self.vocab_size.saturating_sub(NUM_SPECIAL);
        let function = (regular / 8).max(4);
        let rest = regular.saturating_sub(function);
        let lexicon = if self.num_attributes == 0 { 0 } else { rest / (2 * self.num_attributes) };
        let neutral = rest.saturating_sub(lexicon * self.num_attributes);
        if lexicon < 2 || neutral < 2 {
            return Err(KestError::config(format!(
                "vocab_size {} cannot hold {} disjoint lexicons plus shared tokens",
                self.vocab_size, self.num_attributes
            )));
        }
        Ok(Layout { function, lexicon, neutral })
    }

    pub fn validate(&self, l_max: usize) -> Result<()> {
        if self.num_attributes < 2 {
            return Err(KestError::config("num_attributes must be at least 2"));
        }
        let (lo, hi) = self.length_range;
        if lo < 4 || lo > hi {
            return Err(KestError::config(format!("invalid length_range ({lo}, {hi}); need 4 <= min <= max")));
        }
        if hi + 2 > l_max {
            return Err(KestError::config(format!(
                "max length {hi} plus BOS/EOS exceeds L_max {l_max}"
            )));
        }
        if !(0.0..=1.0).contains(&self.lexicon_strength) {
            return Err(KestError::config("lexicon_strength must lie in [0, 1]"));
        }
        if self.template_count == 0 {
            return Err(KestError::config("template_count must be positive"));
        }
        self.layout().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: usize,
    pub tokens: TokenSequence,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlabeledExample {
    pub id: usize,
    pub tokens: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Function(TokenId),
    Content,
}

/// Per-attribute disjoint token sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicons {
    sets: Vec<Vec<TokenId>>,
    owner: HashMap<TokenId, usize>,
}

impl Lexicons {
    pub fn new(sets: Vec<Vec<TokenId>>) -> Result<Self> {
        let mut owner = HashMap::new();
        for (label, set) in sets.iter().enumerate() {
            for &t in set {
                if owner.insert(t, label).is_some() {
                    return Err(KestError::integrity(format!("token {t} appears in two lexicons")));
                }
            }
        }
        Ok(Self { sets, owner })
    }

    pub fn num_attributes(&self) -> usize {
        self.sets.len()
    }

    pub fn lexicon(&self, label: usize) -> &[TokenId] {
        &self.sets[label]
    }

    pub fn owner(&self, token: TokenId) -> Option<usize> {
        self.owner.get(&token).copied()
    }

    /// Lexicon-token counts per attribute.
    pub fn counts(&self, tokens: &[TokenId]) -> Vec<usize> {
        let mut counts = vec![0; self.sets.len()];
        for &t in tokens {
            if let Some(l) = self.owner(t) {
                counts[l] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub l_max: usize,
    pub vocab: Vocabulary,
    pub class_names: Vec<String>,
    pub lexicons: Lexicons,
    pub examples: Vec<LabeledExample>,
}

fn function_token(i: usize) -> String {
    format!("w{i:03}")
}

fn neutral_token(i: usize) -> String {
    format!("n{i:03}")
}

fn lexicon_token(label: usize, i: usize) -> String {
    format!("a{label}x{i:03}")
}

pub fn class_name(label: usize) -> String {
    format!("attr{label}")
}

/// Generates a corpus deterministically from `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec, l_max: usize) -> Result<Corpus> {
    spec.validate(l_max)?;
    let layout = spec.layout()?;
    let k = spec.num_attributes;

    let mut names: Vec<String> = (0..layout.function).map(function_token).collect();
    names.extend((0..layout.neutral).map(neutral_token));
    for label in 0..k {
        names.extend((0..layout.lexicon).map(|i| lexicon_token(label, i)));
    }
    let vocab = Vocabulary::from_tokens(&names)?;
    let ids = |f: &dyn Fn(usize) -> String, n: usize| -> Vec<TokenId> {
        (0..n).map(|i| vocab.id(&f(i)).expect("inventory token")).collect()
    };
    let function = ids(&function_token, layout.function);
    let neutral = ids(&neutral_token, layout.neutral);
    let sets: Vec<Vec<TokenId>> =
        (0..k).map(|label| ids(&|i| lexicon_token(label, i), layout.lexicon)).collect();
    let lexicons = Lexicons::new(sets)?;

    let mut rng = rng::stream(spec.seed, &[tag::CORPUS]);
    let (lo, hi) = spec.length_range;
    let templates: Vec<Vec<Slot>> = (0..spec.template_count)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            let mut slots: Vec<Slot> = (0..len)
                .map(|pos| {
                    if pos >= 2 && rng.random_bool(0.4) {
                        Slot::Content
                    } else {
                        Slot::Function(function[rng.random_range(0..function.len())])
                    }
                })
                .collect();
            if !slots.contains(&Slot::Content) {
                let pos = rng.random_range(2..len);
                slots[pos] = Slot::Content;
            }
            slots
        })
        .collect();

    let examples = (0..spec.num_examples)
        .map(|id| {
            let label = rng.random_range(0..k);
            let template = &templates[rng.random_range(0..templates.len())];
            let content: Vec<TokenId> = template
                .iter()
                .map(|slot| match *slot {
                    Slot::Function(t) => t,
                    Slot::Content => {
                        if rng.random_bool(spec.lexicon_strength) {
                            let lex = lexicons.lexicon(label);
                            lex[rng.random_range(0..lex.len())]
                        } else {
                            neutral[rng.random_range(0..neutral.len())]
                        }
                    }
                })
                .collect();
            LabeledExample { id, tokens: TokenSequence::from_content(&content, l_max), label }
        })
        .collect();

    Ok(Corpus {
        spec: spec.clone(),
        l_max,
        vocab,
        class_names: (0..k).map(class_name).collect(),
        lexicons,
        examples,
    })
}

/// Labeled, unlabeled, pseudo and test data for one experiment.
#[derive(Debug, Clone, Default)]
pub struct DatasetBundle {
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<UnlabeledExample>,
    pub pseudo_labeled: Vec<LabeledExample>,
    pub pseudo_text: Vec<PseudoTextItem>,
    pub test: Vec<LabeledExample>,
    hidden_labels: HashMap<usize, usize>,
}

impl DatasetBundle {
    /// A bundle with only labeled training data and a test split.
    pub fn supervised(labeled: Vec<LabeledExample>, test: Vec<LabeledExample>) -> Self {
        Self { labeled, test, ..Self::default() }
    }

    /// D_l plus D_u with its hidden labels restored, for evaluator models
    /// that are trained on the whole non-test corpus.
    pub fn all_training_examples(&self) -> Vec<LabeledExample> {
        let mut out = self.labeled.clone();
        out.extend(self.unlabeled.iter().filter_map(|u| {
            self.hidden_label(u.id).map(|label| LabeledExample { id: u.id, tokens: u.tokens.clone(), label })
        }));
        out
    }

    /// Ground-truth label of an unlabeled example. Diagnostics only; the
    /// training loop never reads this table.
    pub fn hidden_label(&self, id: usize) -> Option<usize> {
        self.hidden_labels.get(&id).copied()
    }

    /// Fraction of `pseudo` whose label matches the hidden ground truth.
    pub fn pseudo_label_accuracy(&self, pseudo: &[LabeledExample]) -> Option<f64> {
        let scored: Vec<bool> = pseudo
            .iter()
            .filter_map(|ex| self.hidden_label(ex.id).map(|truth| truth == ex.label))
            .collect();
        if scored.is_empty() {
            None
        } else {
            Some(scored.iter().filter(|&&ok| ok).count() as f64 / scored.len() as f64)
        }
    }

    /// Checks the size ratios the self-training loop promises to keep.
    pub fn check_ratios(&self, unlabeled_ratio: usize, ratio_pt: f64) -> Result<()> {
        let n_l = self.labeled.len();
        if self.unlabeled.len() != unlabeled_ratio * n_l {
            return Err(KestError::integrity(format!(
                "|D_u| = {} but expected {} x {}",
                self.unlabeled.len(),
                unlabeled_ratio,
                n_l
            )));
        }
        if !self.pseudo_text.is_empty() && self.pseudo_text.len() != pseudo_text_count(n_l, ratio_pt) {
            return Err(KestError::integrity(format!(
                "|D_pt| = {} but expected {}",
                self.pseudo_text.len(),
                pseudo_text_count(n_l, ratio_pt)
            )));
        }
        if !self.pseudo_labeled.is_empty() && self.pseudo_labeled.len() != self.unlabeled.len() {
            return Err(KestError::integrity("D_pl must cover all of D_u"));
        }
        Ok(())
    }
}

/// `ratio_pt × |D_l|`, rounded to the nearest item.
pub fn pseudo_text_count(labeled: usize, ratio_pt: f64) -> usize {
    (ratio_pt * labeled as f64).round() as usize
}

/// Splits a corpus into D_l, D_u (labels stripped) and test.
pub fn split_semi_supervised(
    corpus: &[LabeledExample],
    labeled_fraction: f64,
    unlabeled_ratio: usize,
    seed: u64,
) -> Result<DatasetBundle> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(KestError::config("labeled_fraction must lie in (0, 1]"));
    }
    let n = corpus.len();
    let n_l = ((labeled_fraction * n as f64).round() as usize).max(1);
    let required = n_l + unlabeled_ratio * n_l;
    if required > n {
        return Err(KestError::Split { required, available: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));

    let labeled: Vec<LabeledExample> = order[..n_l].iter().map(|&i| corpus[i].clone()).collect();
    let mut hidden_labels = HashMap::new();
    let unlabeled: Vec<UnlabeledExample> = order[n_l..required]
        .iter()
        .map(|&i| {
            hidden_labels.insert(corpus[i].id, corpus[i].label);
            UnlabeledExample { id: corpus[i].id, tokens: corpus[i].tokens.clone() }
        })
        .collect();
    let test = order[required..].iter().map(|&i| corpus[i].clone()).collect();
    Ok(DatasetBundle { labeled, unlabeled, pseudo_labeled: vec![], pseudo_text: vec![], test, hidden_labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceTag {
    Real,
    PseudoLabel,
    PseudoText,
}

/// One training-pool entry: a tag plus an index into the matching bundle list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolEntry {
    pub tag: SourceTag,
    pub index: usize,
}

/// Concatenates D_l, D_pl and D_pt with source tags, shuffled by `seed`/`epoch`.
pub fn build_training_pool(bundle: &DatasetBundle, seed: u64, epoch: u64) -> Vec<PoolEntry> {
    let mut pool: Vec<PoolEntry> = (0..bundle.labeled.len())
        .map(|index| PoolEntry { tag: SourceTag::Real, index })
        .chain((0..bundle.pseudo_labeled.len()).map(|index| PoolEntry { tag: SourceTag::PseudoLabel, index }))
        .chain((0..bundle.pseudo_text.len()).map(|index| PoolEntry { tag: SourceTag::PseudoText, index }))
        .collect();
    pool.shuffle(&mut rng::stream(seed, &[tag::POOL, epoch]));
    pool
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// Writes `{"text": ..., "label": ...}` lines.
pub fn write_labeled(path: &Path, examples: &[LabeledExample], vocab: &Vocabulary, class_names: &[String]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let rec = Record { text: tokenizer::decode(&ex.tokens, vocab)?, label: Some(class_names[ex.label].clone()) };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `{"text": ...}` lines.
pub fn write_unlabeled<'a>(
    path: &Path,
    sequences: impl IntoIterator<Item = &'a TokenSequence>,
    vocab: &Vocabulary,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for seq in sequences {
        let rec = Record { text: tokenizer::decode(seq, vocab)?, label: None };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads corpus lines as `(text, optional label name)`.
pub fn read_records(path: &Path) -> Result<Vec<(String, Option<String>)>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| KestError::Serde(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push((rec.text, rec.label));
    }
    Ok(out)
}

/// Reads a labeled corpus file back into examples, ids assigned by line order.
pub fn read_labeled(path: &Path, vocab: &Vocabulary, class_names: &[String], l_max: usize) -> Result<Vec<LabeledExample>> {
    read_records(path)?
        .into_iter()
        .enumerate()
        .map(|(id, (text, label))| {
            let name = label.ok_or_else(|| KestError::integrity(format!("record {id} has no label")))?;
            let label = class_names
                .iter()
                .position(|c| *c == name)
                .ok_or_else(|| KestError::integrity(format!("unknown class name {name:?}")))?;
            Ok(LabeledExample { id, tokens: tokenizer::encode(&text, vocab, l_max), label })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CorpusSpec {
        CorpusSpec { num_examples: 400, ..CorpusSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&spec(), 48).unwrap();
        let b = generate_corpus(&spec(), 48).unwrap();
        assert_eq!(a.examples, b.examples);
    }

    #[test]
    fn full_strength_examples_use_only_their_own_lexicon() {
        let s = CorpusSpec { lexicon_strength: 1.0, ..spec() };
        let c = generate_corpus(&s, 48).unwrap();
        for ex in &c.examples {
            let counts = c.lexicons.counts(ex.tokens.content());
            assert!(counts[ex.label] >= 1);
            for (l, &n) in counts.iter().enumerate() {
                if l != ex.label {
                    assert_eq!(n, 0);
                }
            }
        }
    }

    #[test]
    fn label_histogram_is_uniform() {
        let s = CorpusSpec { num_attributes: 4, num_examples: 10_000, ..CorpusSpec::default() };
        let c = generate_corpus(&s, 48).unwrap();
        let mut hist = [0usize; 4];
        for ex in &c.examples {
            hist[ex.label] += 1;
        }
        for h in hist {
            assert!((h as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{hist:?}");
        }
    }

    #[test]
    fn lengths_respect_range_and_mask_token_never_appears() {
        let c = generate_corpus(&spec(), 48).unwrap();
        for ex in &c.examples {
            let n = ex.tokens.content().len();
            assert!((8..=20).contains(&n));
            assert!(!ex.tokens.active().contains(&tokenizer::MASK));
        }
    }

    #[test]
    fn tiny_vocabulary_is_a_configuration_error() {
        let s = CorpusSpec { vocab_size: 12, ..spec() };
        assert!(matches!(generate_corpus(&s, 48), Err(KestError::Config(_))));
    }

    #[test]
    fn split_sizes_follow_the_ratio_rule() {
        let c = generate_corpus(&CorpusSpec { num_examples: 1000, ..spec() }, 48).unwrap();
        let b = split_semi_supervised(&c.examples, 0.03, 30, 1).unwrap();
        assert_eq!(b.labeled.len(), 30);
        assert_eq!(b.unlabeled.len(), 900);
        assert_eq!(b.test.len(), 70);
        b.check_ratios(30, 1.0).unwrap();
        let mut ids: Vec<usize> = b.labeled.iter().map(|e| e.id).collect();
        ids.extend(b.unlabeled.iter().map(|e| e.id));
        ids.extend(b.test.iter().map(|e| e.id));
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 1000);
    }

    #[test]
    fn whole_corpus_labeled_with_zero_ratio() {
        let c = generate_corpus(&spec(), 48).unwrap();
        let b = split_semi_supervised(&c.examples, 1.0, 0, 1).unwrap();
        assert_eq!(b.labeled.len(), 400);
        assert!(b.unlabeled.is_empty());
    }

    #[test]
    fn too_small_corpus_names_counts() {
        let c = generate_corpus(&spec(), 48).unwrap();
        match split_semi_supervised(&c.examples, 0.1, 30, 1) {
            Err(KestError::Split { required, available }) => {
                assert_eq!(required, 40 + 1200);
                assert_eq!(available, 400);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pool_composition_and_determinism() {
        let c = generate_corpus(&CorpusSpec { num_examples: 1000, ..spec() }, 48).unwrap();
        let mut b = split_semi_supervised(&c.examples, 0.03, 30, 1).unwrap();
        let base = build_training_pool(&b, 3, 0);
        assert_eq!(base.len(), 30);
        assert!(base.iter().all(|e| e.tag == SourceTag::Real));

        b.pseudo_labeled = b
            .unlabeled
            .iter()
            .map(|u| LabeledExample { id: u.id, tokens: u.tokens.clone(), label: 0 })
            .collect();
        b.pseudo_text = b.labeled.iter().map(PseudoTextItem::identity).collect();
        let pool = build_training_pool(&b, 3, 1);
        assert_eq!(pool.len(), 960);
        assert_eq!(pool, build_training_pool(&b, 3, 1));
        assert_ne!(pool, build_training_pool(&b, 3, 2));
    }

    #[test]
    fn pseudo_label_accuracy_drops_with_noise() {
        let mut prev = f64::INFINITY;
        for strength in [1.0, 0.7, 0.4, 0.1] {
            let s = CorpusSpec { lexicon_strength: strength, num_examples: 1000, ..spec() };
            let c = generate_corpus(&s, 48).unwrap();
            let b = split_semi_supervised(&c.examples, 0.03, 30, 1).unwrap();
            // Lexicon-majority labeler as the pseudo labeler.
            let pseudo: Vec<LabeledExample> = b
                .unlabeled
                .iter()
                .map(|u| {
                    let counts = c.lexicons.counts(u.tokens.content());
                    let label = (0..counts.len()).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).unwrap();
                    LabeledExample { id: u.id, tokens: u.tokens.clone(), label }
                })
                .collect();
            let acc = b.pseudo_label_accuracy(&pseudo).unwrap();
            assert!(acc <= prev + 1e-12, "accuracy rose to {acc} at strength {strength}");
            prev = acc;
        }
    }

    #[test]
    fn corpus_file_round_trip() {
        let c = generate_corpus(&spec(), 48).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_labeled(&path, &c.examples[..20], &c.vocab, &c.class_names).unwrap();
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.lines().next().unwrap().starts_with("{\"text\":"));
        let back = read_labeled(&path, &c.vocab, &c.class_names, 48).unwrap();
        for (a, b) in back.iter().zip(&c.examples[..20]) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.label, b.label);
        }
        let upath = dir.path().join("unlabeled.jsonl");
        write_unlabeled(&upath, c.examples[..3].iter().map(|e| &e.tokens), &c.vocab).unwrap();
        assert!(read_records(&upath).unwrap().iter().all(|(_, l)| l.is_none()));
    }
}
