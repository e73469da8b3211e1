use super::*;
use crate::corpus::{generate_corpus, split_semi_supervised, CorpusSpec};
use crate::losses::{loss_ag, loss_cls, loss_joint, loss_mmd, loss_nag, SoftSequence};
use crate::tensor::softmax_rows;
use crate::tokenizer::MASK;

const L_MAX: usize = 12;

fn bundle() -> DatasetBundle {
    let spec = CorpusSpec {
        num_attributes: 2,
        vocab_size: 48,
        length_range: (4, 8),
        num_examples: 140,
        seed: 3,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec, L_MAX).unwrap();
    split_semi_supervised(&corpus.examples, 0.06, 10, 5).unwrap()
}

fn model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_label: 4,
        d_ff: 32,
        cls_hidden: 8,
        vocab_size: 48,
        num_classes: 2,
        l_max: L_MAX,
        dropout_rate: 0.0,
    }
}

fn st(mode: Mode) -> STConfig {
    let mut c = STConfig {
        mode,
        base_epochs: 3,
        max_epochs: 2,
        batch_size: 8,
        validation_size: 10,
        record_wall_clock: false,
        ..STConfig::default()
    };
    c.optimizer_base.lr = 3e-3;
    c.optimizer_st.lr = 1e-3;
    c
}

fn decode() -> DecodeConfig {
    DecodeConfig { min_len: 2, max_len: 8, ..DecodeConfig::default() }
}

fn model() -> Model<f64> {
    Model::new(model_config(), 11).unwrap()
}

#[test]
fn pseudo_labels_cover_unlabeled_set() {
    let b = bundle();
    let m = model();
    assert!(pseudo_label(&m, &[]).unwrap().is_empty());
    let pl = pseudo_label(&m, &b.unlabeled).unwrap();
    assert_eq!(pl.len(), b.unlabeled.len());
    for (p, u) in pl.iter().zip(&b.unlabeled) {
        assert_eq!(p.id, u.id);
        let probs = m.forward_cls(&u.tokens).unwrap();
        assert!(probs[p.label] >= probs[1 - p.label]);
    }
}

#[test]
fn stratified_sample_balances_labels() {
    let b = bundle();
    let mut r = rng::stream(1, &[]);
    let s = stratified_sample(&b.labeled, 30, 2, &mut r);
    assert_eq!(s.len(), 30);
    assert_eq!(s.iter().filter(|e| e.label == 0).count(), 15);
    let s = stratified_sample(&b.labeled, 7, 2, &mut r);
    assert_eq!(s.iter().filter(|e| e.label == 0).count(), 4);
    let one_label: Vec<LabeledExample> = b.labeled.iter().filter(|e| e.label == 1).cloned().collect();
    let s = stratified_sample(&one_label, 5, 2, &mut r);
    assert!(s.len() == 5 && s.iter().all(|e| e.label == 1));
    assert!(stratified_sample(&[], 5, 2, &mut r).is_empty());
}

#[test]
fn pseudo_text_counts_and_invariants() {
    let b = bundle();
    let m = model();
    let before = m.counters().get(Branch::Nag);
    let items = pseudo_text(&m, &b.labeled, 0.7, true, 0.9, 1, 1).unwrap();
    assert_eq!(items.len(), b.labeled.len());
    assert_eq!(m.counters().get(Branch::Nag) - before, b.labeled.len() as u64);
    for (it, src) in items.iter().zip(&b.labeled) {
        assert_eq!(it.source_example_id, src.id);
        assert_eq!(it.label, src.label);
        let soft = it.soft.as_ref().unwrap();
        assert!(it.mask.count() >= 1);
        for pos in it.mask.masked_positions() {
            // The hard token is the heaviest regular token of the soft row.
            let logits = m.forward_nag(&it.masked_input, it.label).unwrap();
            let p = softmax_rows(&logits);
            let best = (5..48).max_by(|&a, &c| p[(pos, a)].total_cmp(&p[(pos, c)]).then(c.cmp(&a))).unwrap();
            assert_eq!(it.hard_tokens.ids()[pos] as usize, best);
            assert_eq!(it.masked_input.ids()[pos], MASK);
        }
        assert_eq!(soft.matrix.shape(), (L_MAX, 16));
    }
    let tiny = pseudo_text(&m, &b.labeled, 1e-9, false, 0.9, 1, 2).unwrap();
    for (it, src) in tiny.iter().zip(&b.labeled) {
        let diff = it.hard_tokens.ids().iter().zip(src.tokens.ids()).filter(|(a, c)| a != c).count();
        assert!(diff <= 1);
        assert!(it.soft.is_none());
    }
}

fn ce_sample<'a>(ex: &'a LabeledExample, seed: u64) -> CeSample<'a> {
    let mut r = rng::stream(seed, &[ex.id as u64]);
    CeSample { tokens: &ex.tokens, label: ex.label, mask: sample_mask(ex.tokens.maskable_len(), 0.5, &mut r), generator: true }
}

#[test]
fn real_only_batch_equals_joint_loss() {
    let b = bundle();
    let m = model();
    let samples: Vec<CeSample<'_>> = b.labeled[..5].iter().map(|e| ce_sample(e, 1)).collect();
    let weights = LossWeights::base();
    let (parts, _) = batch_loss(&m, &BatchSpec { samples: samples.clone(), kernel_groups: vec![] }, &weights, 2, None).unwrap();
    let n = samples.len() as f64;
    let (mut lc, mut lag, mut lnag) = (0.0, 0.0, 0.0);
    for s in &samples {
        lc += loss_cls(&m.forward_cls(s.tokens).unwrap(), s.label) / n;
        lag += loss_ag(&m.forward_ag(s.tokens, s.label).unwrap(), s.tokens) / n;
        let masked = s.mask.apply(s.tokens).unwrap();
        lnag += loss_nag(&m.forward_nag(&masked, s.label).unwrap(), s.tokens, &s.mask).unwrap() / n;
    }
    let joint = loss_joint((lc, lag, lnag), &weights);
    assert!((parts.total - joint).abs() < 1e-10, "{} vs {joint}", parts.total);
    assert_eq!(parts.mmd, 0.0);
}

/// Independent soft NAG output: softmax rows at masked positions times E,
/// embedding rows of the masked input elsewhere.
fn nag_soft_oracle(m: &Model<f64>, it: &PseudoTextItem) -> Mat<f64> {
    let probs = softmax_rows(&m.forward_nag(&it.masked_input, it.label).unwrap());
    let mut p = Mat::<f64>::zeros(L_MAX, 48);
    for pos in 0..L_MAX {
        if it.mask.is_masked(pos) {
            p.row_mut(pos).copy_from_slice(probs.row(pos));
        } else {
            p[(pos, it.masked_input.ids()[pos] as usize)] = 1.0;
        }
    }
    m.soft_embed(&p, it.masked_input.len()).unwrap().matrix
}

fn ag_soft_oracle(m: &Model<f64>, it: &PseudoTextItem) -> Mat<f64> {
    let probs = softmax_rows(&m.forward_ag(&it.hard_tokens, it.label).unwrap());
    let len = it.hard_tokens.len();
    let mut p = Mat::<f64>::zeros(L_MAX, 48);
    for pos in 0..L_MAX {
        if (1..len).contains(&pos) {
            p.row_mut(pos).copy_from_slice(probs.row(pos - 1));
        } else {
            p[(pos, it.hard_tokens.ids()[pos] as usize)] = 1.0;
        }
    }
    m.soft_embed(&p, len).unwrap().matrix
}

fn soft_items(b: &DatasetBundle, m: &Model<f64>, label: usize) -> Vec<PseudoTextItem> {
    let src: Vec<LabeledExample> = b.labeled.iter().filter(|e| e.label == label).take(3).cloned().collect();
    pseudo_text(m, &src, 0.6, true, 0.9, 4, 1).unwrap()
}

#[test]
fn pseudo_text_only_batch_equals_kernel_loss() {
    let b = bundle();
    let base = model();
    // A moved generator so D_o differs from the stored targets.
    let items = soft_items(&b, &base, 0);
    let mut m = base.clone();
    for id in m.params().ids().collect::<Vec<_>>() {
        for v in m.params_mut().get_mut(id).data_mut().iter_mut().step_by(3) {
            *v += 0.05;
        }
    }
    let group: Vec<&PseudoTextItem> = items.iter().collect();
    let batch = BatchSpec { samples: vec![], kernel_groups: vec![group] };
    let (parts, _) = batch_loss(&m, &batch, &LossWeights::self_training(), 2, None).unwrap();
    assert_eq!(parts.ce, 0.0);
    assert_eq!(parts.dumps.len(), 2);
    let targets: Vec<SoftSequence> = items.iter().map(|it| it.soft.clone().unwrap()).collect();
    let mut expected = 0.0;
    for dump in &parts.dumps {
        let oracle: Vec<Mat<f64>> = items
            .iter()
            .map(|it| if dump.branch == Branch::Ag { ag_soft_oracle(&m, it) } else { nag_soft_oracle(&m, it) })
            .collect();
        for (a, o) in dump.generated.iter().zip(&oracle) {
            assert!(a.max_abs_diff(o) < 1e-12);
        }
        let d_o: Vec<SoftSequence> = oracle.into_iter().zip(&items).map(|(matrix, it)| SoftSequence { matrix, length: it.hard_tokens.len() }).collect();
        let cfg = crate::losses::median_bandwidths(&d_o, &targets, 2).unwrap();
        let v = loss_mmd(&d_o, &targets, &cfg).unwrap();
        assert!((v - dump.value).abs() < 1e-10);
        expected += v;
    }
    assert!((parts.total - expected).abs() < 1e-10);
    assert!((parts.mmd - expected).abs() < 1e-10);
}

#[test]
fn mixed_batch_is_sum_of_parts() {
    let b = bundle();
    let m = model();
    let items = soft_items(&b, &m, 1);
    let mut samples: Vec<CeSample<'_>> = b.labeled[..4].iter().map(|e| ce_sample(e, 2)).collect();
    for it in &items {
        samples.push(CeSample { tokens: &it.hard_tokens, label: it.label, mask: MaskVector::empty(it.hard_tokens.maskable_len()), generator: false });
    }
    let w = LossWeights::self_training();
    let batch = BatchSpec { samples: samples.clone(), kernel_groups: vec![items.iter().collect()] };
    let (mixed, _) = batch_loss(&m, &batch, &w, 2, None).unwrap();
    let (ce_only, _) = batch_loss(&m, &BatchSpec { samples, kernel_groups: vec![] }, &w, 2, None).unwrap();
    let (k_only, _) = batch_loss(&m, &BatchSpec { samples: vec![], kernel_groups: vec![items.iter().collect()] }, &w, 2, None).unwrap();
    assert!((mixed.total - (ce_only.total + k_only.total)).abs() < 1e-10);
    assert!((mixed.ce - ce_only.total).abs() < 1e-12);
    assert!((mixed.mmd - k_only.total).abs() < 1e-12);
}

#[test]
fn kernel_gradient_matches_finite_differences() {
    let b = bundle();
    let mut m = model();
    let items = soft_items(&b, &m, 0);
    m.set_embedding_frozen(true);
    let id = m.params().find("layer0.attn.wv").unwrap();
    for v in m.params_mut().get_mut(id).data_mut().iter_mut() {
        *v *= 3.0;
    }
    let group: Vec<&PseudoTextItem> = items.iter().collect();
    let batch = BatchSpec { samples: vec![], kernel_groups: vec![group] };
    let w = LossWeights::self_training();
    let (_, grads) = batch_loss(&m, &batch, &w, 1, None).unwrap();
    assert!(grads.get(m.embedding_id()).is_none());
    // Bandwidths are constants of the loss, so hold them fixed while probing.
    let fixed_value = |model: &Model<f64>| -> f64 {
        let mut g = Graph::new(model.params());
        let mut total = 0.0;
        for (bi, branch) in [Branch::Ag, Branch::Nag].into_iter().enumerate() {
            let nodes: Vec<NodeId> = items
                .iter()
                .map(|it| if branch == Branch::Ag { ag_soft_node(model, &mut g, it, None) } else { nag_soft_node(model, &mut g, it, None) })
                .collect();
            let targets: Vec<Mat<f64>> = items.iter().map(|it| it.soft.clone().unwrap().matrix).collect();
            let k = g.kernel_loss(&nodes, &targets, &batch_loss(&m, &batch, &w, 1, None).unwrap().0.dumps[bi].bandwidths);
            total += g.scalar(k);
        }
        total
    };
    let h = 1e-5;
    for name in ["layer0.attn.wv", "layer0.ffn.w2", "lm.bias", "label_emb"] {
        let pid = m.params().find(name).unwrap();
        let analytic = grads.get(pid).unwrap();
        for idx in [0usize, 3, 7] {
            let mut plus = m.clone();
            plus.params_mut().get_mut(pid).data_mut()[idx] += h;
            let mut minus = m.clone();
            minus.params_mut().get_mut(pid).data_mut()[idx] -= h;
            let numeric = (fixed_value(&plus) - fixed_value(&minus)) / (2.0 * h);
            let a = analytic.data()[idx];
            assert!((numeric - a).abs() <= 1e-6 + 1e-4 * numeric.abs(), "{name}[{idx}] {numeric} vs {a}");
        }
    }
}

#[test]
fn kernel_gradient_reaches_the_embedding() {
    let b = bundle();
    let m = model();
    let items = soft_items(&b, &m, 1);
    let group: Vec<&PseudoTextItem> = items.iter().collect();
    let mut moved = m.clone();
    let wv = moved.params().find("layer0.attn.wv").unwrap();
    for v in moved.params_mut().get_mut(wv).data_mut().iter_mut() {
        *v *= 3.0;
    }
    let e = moved.embedding_id();
    for branch in [Branch::Ag, Branch::Nag] {
        let bw = [0.7, 1.9];
        let (_, grads) = kernel_loss_fixed(&moved, &group, branch, &bw).unwrap();
        let analytic = grads.get(e).unwrap();
        let h = 1e-5;
        for idx in [0usize, 17, 80, 200, 400] {
            let mut plus = moved.clone();
            plus.params_mut().get_mut(e).data_mut()[idx] += h;
            let mut minus = moved.clone();
            minus.params_mut().get_mut(e).data_mut()[idx] -= h;
            let numeric = (kernel_loss_fixed(&plus, &group, branch, &bw).unwrap().0
                - kernel_loss_fixed(&minus, &group, branch, &bw).unwrap().0)
                / (2.0 * h);
            let a = analytic.data()[idx];
            assert!((numeric - a).abs() <= 1e-8 + 1e-5 * numeric.abs(), "{branch:?} E[{idx}] {numeric} vs {a}");
        }
    }
}

#[test]
fn base_training_is_deterministic_and_finite() {
    let b = bundle();
    let a = train_base::<f64>(&b, &model_config(), &st(Mode::Supervised), None).unwrap();
    let c = train_base::<f64>(&b, &model_config(), &st(Mode::Supervised), None).unwrap();
    assert_eq!(a.model.checksum(), c.model.checksum());
    assert_eq!(a.history, c.history);
    assert!(a.history.iter().all(|r| r.ce_loss.is_finite() && r.validation_loss.unwrap().is_finite()));
    assert!(a.history.first().unwrap().forward_passes_nag >= b.labeled.len() as u64);
}

#[test]
fn supervised_run_is_the_base_model() {
    let b = bundle();
    let base = train_base::<f64>(&b, &model_config(), &st(Mode::Supervised), None).unwrap();
    let out = run::<f64>(&b, &model_config(), &st(Mode::Supervised), &decode(), None).unwrap();
    assert_eq!(out.model.checksum(), base.model.checksum());
    assert_eq!(out.history.len(), 3);
}

#[test]
fn kest_epochs_keep_snapshot_discipline_and_frozen_embedding() {
    let b = bundle();
    let cfg = st(Mode::Kest);
    let base = train_base::<f64>(&b, &model_config(), &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_from_base(&base, &b, &cfg, &decode(), Some(dir.path())).unwrap();
    let st_rows: Vec<&EpochRecord> = out.history.iter().filter(|r| r.mode == "kest").collect();
    assert_eq!(st_rows.len(), 2);
    assert_eq!(st_rows[0].snapshot_checksum.as_deref(), Some(base.model.checksum().as_str()));
    assert_eq!(st_rows[1].snapshot_checksum.as_deref(), Some(st_rows[0].model_checksum.as_str()));
    let e0 = base.model.embedding_checksum();
    assert!(st_rows.iter().all(|r| r.embedding_checksum == e0));
    assert_ne!(out.model.checksum(), base.model.checksum());
    for r in &st_rows {
        assert_eq!(r.pool_sizes, [b.labeled.len(), b.unlabeled.len(), b.labeled.len()]);
        assert!(r.pl_accuracy.is_some());
        assert!(r.mmd_loss != 0.0);
    }
    assert!(out.bundle.pseudo_text.iter().all(|it| it.soft.is_some()));
    let soft = crate::selftrain::read_soft_dump(&dir.path().join("pt_epoch2.soft.bin")).unwrap();
    assert_eq!(soft.len(), b.labeled.len());
    assert_eq!(soft[0], out.bundle.pseudo_text[0].soft.clone().unwrap());
    assert!(dir.path().join("epoch2.ckpt").exists());
    assert!(dir.path().join("pl_epoch1.jsonl").exists());
}

#[test]
fn replay_is_deterministic() {
    let b = bundle();
    let cfg = st(Mode::Kest);
    let a = run::<f64>(&b, &model_config(), &cfg, &decode(), None).unwrap();
    let c = run::<f64>(&b, &model_config(), &cfg, &decode(), None).unwrap();
    assert_eq!(a.history, c.history);
    assert_eq!(a.model.checksum(), c.model.checksum());
}

#[test]
fn hard_baselines_carry_no_soft_text() {
    let b = bundle();
    let base = train_base::<f64>(&b, &model_config(), &st(Mode::Pt), None).unwrap();
    for mode in [Mode::Pt, Mode::PtNoise, Mode::PtNoisePl, Mode::PtSelectPl, Mode::KestNoKernel] {
        let cfg = STConfig { max_epochs: 1, ..st(mode) };
        let out = run_from_base(&base, &b, &cfg, &decode(), None).unwrap();
        assert_eq!(out.bundle.pseudo_text.len(), b.labeled.len(), "{mode}");
        assert!(out.bundle.pseudo_text.iter().all(|it| it.soft.is_none()));
        assert_eq!(out.bundle.pseudo_labeled.len(), if mode.uses_pseudo_labels() { b.unlabeled.len() } else { 0 });
        let last = out.history.last().unwrap();
        assert_eq!(last.mmd_loss, 0.0);
        assert!(last.ce_loss.is_finite());
    }
}

#[test]
fn undersized_groups_are_carried_then_dropped() {
    let b = bundle();
    let cfg = STConfig { batch_size: 1, max_epochs: 1, ..st(Mode::Kest) };
    let base = train_base::<f64>(&b, &model_config(), &cfg, None).unwrap();
    let out = run_from_base(&base, &b, &cfg, &decode(), None).unwrap();
    let last = out.history.last().unwrap();
    // With one entry per batch, groups only form through carry-over.
    assert!(last.mmd_loss != 0.0);
    assert!(last.dropped_kernel_items <= 2);
}
