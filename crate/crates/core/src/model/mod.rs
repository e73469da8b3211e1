//! Shared multi-task transformer.
//!
//! One set of transformer blocks serves three branches:
//! - autoregressive generation (causal attention, label fused into every block),
//! - masked non-autoregressive infilling (bidirectional attention, label fused),
//! - classification (bidirectional attention, no label, pooled at BOS).
//!
//! The LM head is tied to the token embedding matrix `E`, so output logits
//! are `h · Eᵀ + b` and soft sequences are `P · E` against the same matrix.

mod checkpoint;
mod optim;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use optim::{AdamW, AdamWConfig};

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{KestError, Result};
use crate::losses::SoftSequence;
use crate::rng::{self, tag, Rng};
use crate::tensor::{matmul, softmax_rows, Mat, Scalar};
use crate::tokenizer::{TokenSequence, TokenId, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_label: usize,
    pub d_ff: usize,
    pub cls_hidden: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub l_max: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_label: 16,
            d_ff: 256,
            cls_hidden: 64,
            vocab_size: 512,
            num_classes: 2,
            l_max: 48,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_label", self.d_label),
            ("d_ff", self.d_ff),
            ("cls_hidden", self.cls_hidden),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("l_max", self.l_max),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(KestError::config(format!("model.{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(KestError::config(format!(
                "model.d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(KestError::config("model.dropout_rate must lie in [0, 1)"));
        }
        if self.l_max < 4 {
            return Err(KestError::config("model.l_max must be at least 4"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Ag,
    Nag,
    Cls,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct ParamIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    label_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    lm_bias: ParamId,
    cls_w1: ParamId,
    cls_b1: ParamId,
    cls_w2: ParamId,
    cls_b2: ParamId,
}

impl ParamIds {
    fn resolve(store: &ParamStore<impl Scalar>, n_layers: usize) -> Result<Self> {
        let get = |name: &str| store.find(name).ok_or_else(|| KestError::integrity(format!("missing parameter {name}")));
        let layers = (0..n_layers)
            .map(|l| {
                let p = |s: &str| get(&format!("layer{l}.{s}"));
                Ok(LayerIds {
                    ln1_g: p("ln1.gain")?,
                    ln1_b: p("ln1.bias")?,
                    wq: p("attn.wq")?,
                    bq: p("attn.bq")?,
                    wk: p("attn.wk")?,
                    bk: p("attn.bk")?,
                    wv: p("attn.wv")?,
                    bv: p("attn.bv")?,
                    wo: p("attn.wo")?,
                    bo: p("attn.bo")?,
                    fuse_w: p("fuse.w")?,
                    fuse_b: p("fuse.b")?,
                    ln2_g: p("ln2.gain")?,
                    ln2_b: p("ln2.bias")?,
                    w1: p("ffn.w1")?,
                    b1: p("ffn.b1")?,
                    w2: p("ffn.w2")?,
                    b2: p("ffn.b2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok_emb: get("tok_emb")?,
            pos_emb: get("pos_emb")?,
            label_emb: get("label_emb")?,
            layers,
            lnf_g: get("ln_f.gain")?,
            lnf_b: get("ln_f.bias")?,
            lm_bias: get("lm.bias")?,
            cls_w1: get("cls.w1")?,
            cls_b1: get("cls.b1")?,
            cls_w2: get("cls.w2")?,
            cls_b2: get("cls.b2")?,
        })
    }
}

/// Forward-pass counters per branch.
#[derive(Debug, Default)]
pub struct PassCounters {
    ag: AtomicU64,
    nag: AtomicU64,
    cls: AtomicU64,
}

impl PassCounters {
    fn bump(&self, branch: Branch) {
        let c = match branch {
            Branch::Ag => &self.ag,
            Branch::Nag => &self.nag,
            Branch::Cls => &self.cls,
        };
        c.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self, branch: Branch) -> u64 {
        match branch {
            Branch::Ag => self.ag.load(Ordering::Relaxed),
            Branch::Nag => self.nag.load(Ordering::Relaxed),
            Branch::Cls => self.cls.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.ag.store(0, Ordering::Relaxed);
        self.nag.store(0, Ordering::Relaxed);
        self.cls.store(0, Ordering::Relaxed);
    }
}

/// Dropout source for one forward pass; `None` disables dropout.
pub type DropoutRng<'a> = Option<&'a mut Rng>;

/// Parameters and bookkeeping of the shared generator/classifier.
#[derive(Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: ParamIds,
    counters: PassCounters,
}

impl<T: Scalar> Clone for Model<T> {
    /// Clones parameters; the copy starts with fresh pass counters.
    fn clone(&self) -> Self {
        Self { config: self.config.clone(), params: self.params.clone(), ids: self.ids.clone(), counters: PassCounters::default() }
    }
}

/// Graph outputs of one sequence through a generation branch.
pub struct GenOutput {
    pub logits: NodeId,
    pub hidden: NodeId,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model. Fusion projections start as `[I | 0]`
    /// so the label has no effect until training moves them.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let d = config.d_model;
        let mut store = ParamStore::default();
        let normal = |rows: usize, cols: usize, std: f64, rng: &mut Rng| -> Mat<T> {
            let dist = Normal::new(0.0, std).expect("valid std");
            Mat::from_vec(rows, cols, (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect())
        };
        let ones = |n: usize| Mat::filled(1, n, T::one());
        let zeros = |n: usize| Mat::zeros(1, n);
        let w_std = 0.02;
        let out_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();

        store.add("tok_emb", normal(config.vocab_size, d, 1.0 / (d as f64).sqrt(), &mut rng));
        store.add("pos_emb", normal(config.l_max, d, w_std, &mut rng));
        store.add("label_emb", normal(config.num_classes, config.d_label, 1.0 / (config.d_label as f64).sqrt(), &mut rng));
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            store.add(p("ln1.gain"), ones(d));
            store.add(p("ln1.bias"), zeros(d));
            for w in ["wq", "wk", "wv"] {
                store.add(p(&format!("attn.{w}")), normal(d, d, w_std, &mut rng));
                store.add(p(&format!("attn.b{}", &w[1..])), zeros(d));
            }
            store.add(p("attn.wo"), normal(d, d, out_std, &mut rng));
            store.add(p("attn.bo"), zeros(d));
            let mut fuse = Mat::zeros(d + config.d_label, d);
            for i in 0..d {
                fuse[(i, i)] = T::one();
            }
            store.add(p("fuse.w"), fuse);
            store.add(p("fuse.b"), zeros(d));
            store.add(p("ln2.gain"), ones(d));
            store.add(p("ln2.bias"), zeros(d));
            store.add(p("ffn.w1"), normal(d, config.d_ff, w_std, &mut rng));
            store.add(p("ffn.b1"), zeros(config.d_ff));
            store.add(p("ffn.w2"), normal(config.d_ff, d, out_std, &mut rng));
            store.add(p("ffn.b2"), zeros(d));
        }
        store.add("ln_f.gain", ones(d));
        store.add("ln_f.bias", zeros(d));
        store.add("lm.bias", zeros(config.vocab_size));
        store.add("cls.w1", normal(d, config.cls_hidden, w_std, &mut rng));
        store.add("cls.b1", zeros(config.cls_hidden));
        store.add("cls.w2", normal(config.cls_hidden, config.num_classes, w_std, &mut rng));
        store.add("cls.b2", zeros(config.num_classes));
        Self::from_params(config, store)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let ids = ParamIds::resolve(&params, config.n_layers)?;
        let expect = |id: ParamId, rows: usize, cols: usize| -> Result<()> {
            let shape = params.get(id).shape();
            if shape != (rows, cols) {
                return Err(KestError::integrity(format!(
                    "parameter {} has shape {shape:?}, config expects ({rows}, {cols})",
                    params.name(id)
                )));
            }
            Ok(())
        };
        let d = config.d_model;
        expect(ids.tok_emb, config.vocab_size, d)?;
        expect(ids.pos_emb, config.l_max, d)?;
        expect(ids.label_emb, config.num_classes, config.d_label)?;
        expect(ids.lm_bias, 1, config.vocab_size)?;
        expect(ids.cls_w2, config.cls_hidden, config.num_classes)?;
        for layer in &ids.layers {
            expect(layer.fuse_w, d + config.d_label, d)?;
            expect(layer.w1, d, config.d_ff)?;
        }
        Ok(Self { config, params, ids, counters: PassCounters::default() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn counters(&self) -> &PassCounters {
        &self.counters
    }

    pub fn embedding_id(&self) -> ParamId {
        self.ids.tok_emb
    }

    /// The tied token-embedding matrix `E` (`V × d`).
    pub fn embedding(&self) -> &Mat<T> {
        self.params.get(self.ids.tok_emb)
    }

    pub fn set_embedding_frozen(&mut self, frozen: bool) {
        self.params.set_frozen(self.ids.tok_emb, frozen);
    }

    pub fn is_embedding_frozen(&self) -> bool {
        self.params.is_frozen(self.ids.tok_emb)
    }

    /// Parameters shared by every branch (embeddings, blocks, final norm).
    pub fn shared_parameter_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.config.n_layers {
            for s in ["ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.w2"] {
                names.push(format!("layer{l}.{s}"));
            }
        }
        names.push("ln_f.gain".to_string());
        names.push("ln_f.bias".to_string());
        names
    }

    /// SHA-256 over every parameter's name, shape and `f64` bytes.
    pub fn checksum(&self) -> String {
        params_checksum(&self.params, None)
    }

    /// Checksum of `E` alone.
    pub fn embedding_checksum(&self) -> String {
        params_checksum(&self.params, Some(self.ids.tok_emb))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), ids: self.ids.clone(), counters: PassCounters::default() }
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.l_max() != self.config.l_max {
            return Err(KestError::integrity(format!(
                "sequence L_max {} does not match model L_max {}",
                tokens.l_max(),
                self.config.l_max
            )));
        }
        if let Some(&bad) = tokens.ids().iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(KestError::integrity(format!("token id {bad} outside vocabulary {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.num_classes {
            return Err(KestError::integrity(format!("label {label} outside {} classes", self.config.num_classes)));
        }
        Ok(())
    }

    fn dropout_mask(&self, rows: usize, cols: usize, rng: &mut Rng) -> Mat<T> {
        let p = self.config.dropout_rate;
        let keep = T::of(1.0 / (1.0 - p));
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| if rng.random_bool(p) { T::zero() } else { keep }).collect())
    }

    fn maybe_dropout(&self, g: &mut Graph<'_, T>, x: NodeId, rng: &mut DropoutRng<'_>) -> NodeId {
        match rng {
            Some(r) if self.config.dropout_rate > 0.0 => {
                let (rows, cols) = g.value(x).shape();
                let mask = self.dropout_mask(rows, cols, r);
                g.mul_const(x, mask)
            }
            _ => x,
        }
    }

    /// Label fusion on a graph: `concat(attn_out, label_emb) · W + b`.
    pub fn fuse_label_node(&self, g: &mut Graph<'_, T>, layer: usize, attn_out: NodeId, label: usize) -> NodeId {
        let ids = &self.ids.layers[layer];
        let table = g.param(self.ids.label_emb);
        let emb = g.slice_rows(table, label, 1);
        let rows = g.value(attn_out).rows();
        let rep = g.repeat_rows(emb, rows);
        let cat = g.concat_cols(&[attn_out, rep]);
        let w = g.param(ids.fuse_w);
        let b = g.param(ids.fuse_b);
        let proj = g.matmul(cat, w);
        g.add_row(proj, b)
    }

    /// Label fusion on plain matrices for layer `layer`.
    pub fn fuse_label(&self, layer: usize, attn_out: &Mat<T>, label: usize) -> Result<Mat<T>> {
        self.check_label(label)?;
        if attn_out.cols() != self.config.d_model {
            return Err(KestError::integrity("attention output width does not match d_model"));
        }
        let mut g = Graph::new(&self.params);
        let a = g.constant(attn_out.clone());
        let out = self.fuse_label_node(&mut g, layer, a, label);
        Ok(g.value(out).clone())
    }

    /// Encodes `ids` (all rows computed); keys at positions `>= active` are
    /// never attended in bidirectional mode.
    fn encode(
        &self,
        g: &mut Graph<'_, T>,
        ids: &[TokenId],
        active: usize,
        mode: AttentionMode,
        label: Option<usize>,
        rng: &mut DropoutRng<'_>,
    ) -> NodeId {
        let n = ids.len();
        let cfg = &self.config;
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let emb_table = g.param(self.ids.tok_emb);
        let tok = g.gather(emb_table, &idx);
        let pos_table = g.param(self.ids.pos_emb);
        let pos = g.slice_rows(pos_table, 0, n);
        let mut x = g.add(tok, pos);
        x = self.maybe_dropout(g, x, rng);

        let allowed: Vec<bool> = (0..n)
            .flat_map(|i| {
                (0..n).map(move |j| match mode {
                    AttentionMode::Causal => j <= i,
                    AttentionMode::Bidirectional => j < active,
                })
            })
            .collect();
        let dh = cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());

        for (l, lid) in self.ids.layers.iter().enumerate() {
            let (g1, b1) = (g.param(lid.ln1_g), g.param(lid.ln1_b));
            let h = g.layer_norm(x, g1, b1);
            let proj = |g: &mut Graph<'_, T>, w: ParamId, b: ParamId| {
                let (wn, bn) = (g.param(w), g.param(b));
                let m = g.matmul(h, wn);
                g.add_row(m, bn)
            };
            let q = proj(g, lid.wq, lid.bq);
            let k = proj(g, lid.wk, lid.bk);
            let v = proj(g, lid.wv, lid.bv);
            let heads: Vec<NodeId> = (0..cfg.n_heads)
                .map(|hd| {
                    let qh = g.slice_cols(q, hd * dh, dh);
                    let kh = g.slice_cols(k, hd * dh, dh);
                    let vh = g.slice_cols(v, hd * dh, dh);
                    let scores = g.matmul_bt(qh, kh);
                    let scores = g.scale(scores, scale);
                    let probs = g.masked_softmax(scores, &allowed);
                    g.matmul(probs, vh)
                })
                .collect();
            let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
            let (wo, bo) = (g.param(lid.wo), g.param(lid.bo));
            let attn = g.matmul(ctx, wo);
            let mut attn = g.add_row(attn, bo);
            attn = self.maybe_dropout(g, attn, rng);
            if let Some(label) = label {
                attn = self.fuse_label_node(g, l, attn, label);
            }
            x = g.add(x, attn);

            let (g2, b2) = (g.param(lid.ln2_g), g.param(lid.ln2_b));
            let h2 = g.layer_norm(x, g2, b2);
            let (w1, bb1) = (g.param(lid.w1), g.param(lid.b1));
            let f = g.matmul(h2, w1);
            let f = g.add_row(f, bb1);
            let f = g.gelu(f);
            let (w2, bb2) = (g.param(lid.w2), g.param(lid.b2));
            let f = g.matmul(f, w2);
            let mut f = g.add_row(f, bb2);
            f = self.maybe_dropout(g, f, rng);
            x = g.add(x, f);
        }
        let (gf, bf) = (g.param(self.ids.lnf_g), g.param(self.ids.lnf_b));
        g.layer_norm(x, gf, bf)
    }

    /// Generation branch on a graph. `ids` may be the active span only
    /// (training) or the full padded sequence (inference).
    pub fn generation_graph(
        &self,
        g: &mut Graph<'_, T>,
        branch: Branch,
        ids: &[TokenId],
        active: usize,
        label: usize,
        mut rng: DropoutRng<'_>,
    ) -> GenOutput {
        let mode = match branch {
            Branch::Ag => AttentionMode::Causal,
            Branch::Nag => AttentionMode::Bidirectional,
            Branch::Cls => panic!("classification is not a generation branch"),
        };
        self.counters.bump(branch);
        let hidden = self.encode(g, ids, active, mode, Some(label), &mut rng);
        let e = g.param(self.ids.tok_emb);
        let logits = g.matmul_bt(hidden, e);
        let bias = g.param(self.ids.lm_bias);
        let logits = g.add_row(logits, bias);
        GenOutput { logits, hidden }
    }

    /// Classification logits (`1 × K`) on a graph.
    pub fn classification_graph(&self, g: &mut Graph<'_, T>, ids: &[TokenId], active: usize, mut rng: DropoutRng<'_>) -> NodeId {
        self.counters.bump(Branch::Cls);
        let hidden = self.encode(g, ids, active, AttentionMode::Bidirectional, None, &mut rng);
        let pooled = g.slice_rows(hidden, 0, 1);
        let (w1, b1) = (g.param(self.ids.cls_w1), g.param(self.ids.cls_b1));
        let h = g.matmul(pooled, w1);
        let h = g.add_row(h, b1);
        let h = g.tanh(h);
        let (w2, b2) = (g.param(self.ids.cls_w2), g.param(self.ids.cls_b2));
        let o = g.matmul(h, w2);
        g.add_row(o, b2)
    }

    /// Causal logits (`L_max × V`); row `j` sees tokens `0..=j` only.
    pub fn forward_ag(&self, tokens: &TokenSequence, label: usize) -> Result<Mat<T>> {
        self.check_tokens(tokens)?;
        self.check_label(label)?;
        let mut g = Graph::new(&self.params);
        let out = self.generation_graph(&mut g, Branch::Ag, tokens.ids(), tokens.len(), label, None);
        Ok(g.value(out.logits).clone())
    }

    /// Causal logits over a prefix only (`prefix.len() × V`).
    pub fn forward_ag_prefix(&self, prefix: &[TokenId], label: usize) -> Result<Mat<T>> {
        self.check_label(label)?;
        if prefix.is_empty() || prefix.len() > self.config.l_max {
            return Err(KestError::integrity("prefix length outside [1, L_max]"));
        }
        let mut g = Graph::new(&self.params);
        let out = self.generation_graph(&mut g, Branch::Ag, prefix, prefix.len(), label, None);
        Ok(g.value(out.logits).clone())
    }

    /// Bidirectional logits (`L_max × V`) for every position in one pass.
    pub fn forward_nag(&self, masked: &TokenSequence, label: usize) -> Result<Mat<T>> {
        self.check_tokens(masked)?;
        self.check_label(label)?;
        let mut g = Graph::new(&self.params);
        let out = self.generation_graph(&mut g, Branch::Nag, masked.ids(), masked.len(), label, None);
        Ok(g.value(out.logits).clone())
    }

    /// Class probabilities from the BOS-pooled bidirectional encoding.
    pub fn forward_cls(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        self.forward_cls_with(tokens, None)
    }

    /// As [`Model::forward_cls`], with dropout active when `rng` is given.
    pub fn forward_cls_with(&self, tokens: &TokenSequence, rng: DropoutRng<'_>) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let mut g = Graph::new(&self.params);
        let logits = self.classification_graph(&mut g, tokens.active(), tokens.len(), rng);
        let probs = softmax_rows(g.value(logits));
        Ok(probs.row(0).iter().map(|v| v.f64()).collect())
    }

    /// `P × E` for a row-stochastic `P` (`L_max × V`).
    pub fn soft_embed(&self, probabilities: &Mat<T>, length: usize) -> Result<SoftSequence> {
        if probabilities.cols() != self.config.vocab_size {
            return Err(KestError::precondition("probability rows must span the vocabulary"));
        }
        let tol = (T::epsilon().f64() * 100.0).max(1e-6);
        for r in 0..probabilities.rows() {
            let row = probabilities.row(r);
            let total: f64 = row.iter().map(|v| v.f64()).sum();
            if (total - 1.0).abs() > tol || row.iter().any(|v| v.f64() < 0.0) {
                return Err(KestError::precondition(format!("row {r} is not stochastic (sum {total})")));
            }
        }
        Ok(SoftSequence { matrix: matmul(probabilities, self.embedding()).cast(), length })
    }

    /// Hard embedding rows `E[ids]` with PAD rows after `length`.
    pub fn hard_embed(&self, tokens: &TokenSequence) -> Mat<T> {
        let idx: Vec<usize> = tokens.ids().iter().map(|&t| t as usize).collect();
        self.embedding().select_rows(&idx)
    }

    /// Row of `E` for the PAD token.
    pub fn pad_embedding(&self) -> &[T] {
        self.embedding().row(PAD as usize)
    }
}

fn params_checksum<T: Scalar>(params: &ParamStore<T>, only: Option<ParamId>) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for id in params.ids() {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let m = params.get(id);
        hasher.update(params.name(id).as_bytes());
        hasher.update((m.rows() as u64).to_le_bytes());
        hasher.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            hasher.update(v.f64().to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
