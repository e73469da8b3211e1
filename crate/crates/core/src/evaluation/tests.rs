use super::*;
use crate::model::ModelConfig;

fn seq(content: &[TokenId]) -> TokenSequence {
    TokenSequence::from_content(content, 12)
}

fn gen(content: &[TokenId], label: usize) -> Generation {
    Generation { tokens: seq(content), label }
}

#[test]
fn dist_hand_counts() {
    // "a b a b"
    let t: Vec<TokenId> = vec![5, 6, 5, 6];
    assert_eq!(dist_n(&[&t], 1).unwrap(), 0.5);
    assert_eq!(dist_n(&[&t], 2).unwrap(), 2.0 / 3.0);
    let same: Vec<TokenId> = vec![7; 6];
    assert_eq!(dist_n(&[&same], 1).unwrap(), 1.0 / 6.0);
    let distinct: Vec<TokenId> = vec![5, 6, 7, 8];
    assert_eq!(dist_n(&[&distinct], 1).unwrap(), 1.0);
    // Shorter texts are skipped; an empty pool is an error.
    assert_eq!(dist_n(&[&t, &[9][..]], 2).unwrap(), 2.0 / 3.0);
    assert!(dist_n(&[&[9][..]], 2).is_err());
    let (d, geo) = dist_summary(&[&distinct]).unwrap();
    assert_eq!(d, [1.0; 4]);
    assert!((geo - 1.0).abs() < 1e-15);
}

#[test]
fn macro_f1_cases() {
    let truth = [0, 0, 1, 1];
    assert_eq!(macro_f1(&truth, &truth, 2), 1.0);
    // Always predicting class 0 on a balanced binary set.
    assert_eq!(macro_f1(&[0, 0, 0, 0], &truth, 2), 1.0 / 3.0);
    // Absent class counts as zero.
    assert_eq!(macro_f1(&[0, 0], &[0, 0], 2), 0.5);
    let a = macro_f1(&[0, 1, 1, 0, 1], &[0, 1, 0, 0, 1], 2);
    let b = macro_f1(&[1, 0, 0, 1, 1], &[1, 0, 0, 0, 1], 2);
    assert_eq!(a, b);
}

#[test]
fn self_bleu_cases() {
    let a: Vec<TokenId> = vec![5, 6, 7, 8, 9];
    assert!((self_bleu(&[&a, &a, &a]).unwrap() - 1.0).abs() < 1e-12);
    let b: Vec<TokenId> = vec![10, 11, 12, 13, 14];
    let c: Vec<TokenId> = vec![15, 16, 17, 18, 19];
    assert!(self_bleu(&[&a, &b, &c]).unwrap() <= 1e-3);
    assert!(self_bleu(&[&a]).is_err());
}

#[test]
fn self_bleu_hand_computation() {
    // x = a b c d, y = a b c e, z = a b
    let x: Vec<TokenId> = vec![5, 6, 7, 8];
    let y: Vec<TokenId> = vec![5, 6, 7, 9];
    let z: Vec<TokenId> = vec![5, 6];
    // x vs {y, z}: bigrams ab bc cd -> ab, bc matched: 2/3; trigrams abc bcd -> 1/2;
    // 4-gram abcd -> 0 -> eps. Closest reference length 4, so BP = 1.
    let bx = ((2.0f64 / 3.0).ln() + 0.5f64.ln() + 1e-9f64.ln()) / 3.0;
    // y is symmetric to x.
    // z vs {x, y}: bigram ab matched 1/1; no trigrams or 4-grams -> eps, eps.
    // Closest reference length 4 > 2: BP = exp(1 - 4/2).
    let bz = (1.0f64.ln() + 2.0 * 1e-9f64.ln()) / 3.0;
    let expected = (2.0 * bx.exp() + (-1.0f64).exp() * bz.exp()) / 3.0;
    let got = self_bleu(&[&x, &y, &z]).unwrap();
    assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
}

#[test]
fn self_bleu_does_not_increase_when_a_duplicate_is_replaced() {
    let a: Vec<TokenId> = vec![5, 6, 7, 8, 9];
    let b: Vec<TokenId> = vec![5, 6, 7, 10, 11];
    let fresh: Vec<TokenId> = vec![20, 21, 22, 23, 24];
    let before = self_bleu(&[&a, &a, &b]).unwrap();
    let after = self_bleu(&[&a, &fresh, &b]).unwrap();
    assert!(after <= before);
}

#[test]
fn metrics_are_order_invariant() {
    let texts: Vec<Vec<TokenId>> = vec![vec![5, 6, 7, 8, 9], vec![5, 6, 9, 9, 7], vec![8, 7, 6, 5, 5, 6], vec![9, 8, 7]];
    let fwd: Vec<&[TokenId]> = texts.iter().map(|t| t.as_slice()).collect();
    let rev: Vec<&[TokenId]> = texts.iter().rev().map(|t| t.as_slice()).collect();
    assert!((self_bleu(&fwd).unwrap() - self_bleu(&rev).unwrap()).abs() < 1e-14);
    for n in 1..=3 {
        assert_eq!(dist_n(&fwd, n).unwrap(), dist_n(&rev, n).unwrap());
    }
}

#[test]
fn oracle_accuracy_rules() {
    let lex = Lexicons::new(vec![vec![5, 6], vec![7, 8]]).unwrap();
    assert_eq!(oracle_control_acc(&[gen(&[5, 6, 5], 0)], &lex), 1.0);
    assert_eq!(oracle_control_acc(&[gen(&[9, 10], 0)], &lex), 0.0);
    assert_eq!(oracle_control_acc(&[gen(&[5, 9, 6, 7], 0)], &lex), 1.0);
    assert_eq!(oracle_control_acc(&[gen(&[5, 9, 6, 7], 1)], &lex), 0.0);
    assert_eq!(oracle_control_acc(&[gen(&[5, 7], 0), gen(&[5, 5, 7], 0)], &lex), 0.5);
}

fn tiny(num_classes: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_label: 4,
        d_ff: 16,
        cls_hidden: 6,
        vocab_size: 17,
        num_classes,
        l_max: 12,
        dropout_rate: 0.0,
    }
}

fn zeroed(config: ModelConfig) -> Model<f64> {
    let mut m = Model::<f64>::new(config, 1).unwrap();
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        for v in m.params_mut().get_mut(id).data_mut() {
            *v = 0.0;
        }
    }
    m
}

#[test]
fn uniform_model_perplexity_is_vocabulary_size() {
    let m = zeroed(tiny(2));
    let test = vec![
        LabeledExample { id: 0, tokens: seq(&[5, 6, 7]), label: 0 },
        LabeledExample { id: 1, tokens: seq(&[9, 9]), label: 1 },
    ];
    let ppl = model_ppl(&m, &test).unwrap();
    assert!((ppl - 17.0).abs() < 1e-6, "{ppl}");
    assert!(model_ppl(&m, &[]).is_err());
}

#[test]
fn two_way_next_token_gives_perplexity_two() {
    // Logits equal for exactly two tokens at every row: E = 0 and a bias
    // that is 0 on {5, EOS} and very negative elsewhere.
    let mut m = zeroed(tiny(1));
    let bias = m.params().find("lm.bias").unwrap();
    for (i, v) in m.params_mut().get_mut(bias).data_mut().iter_mut().enumerate() {
        *v = if i == 5 || i == 3 { 0.0 } else { -1e4 };
    }
    let test = vec![LabeledExample { id: 0, tokens: seq(&[5, 5, 5]), label: 0 }];
    assert!((model_ppl(&m, &test).unwrap() - 2.0).abs() < 1e-9);
    let gens = vec![seq(&[5, 5]), seq(&[]), seq(&[5])];
    let a = output_ppl(&m, &gens).unwrap();
    let b = output_ppl(&m, &[gens[2].clone(), gens[0].clone()]).unwrap();
    assert!((a - 2.0).abs() < 1e-9);
    assert_eq!(a, b);
    assert!(output_ppl(&m, &[seq(&[])]).is_err());
}

#[test]
fn perplexity_agrees_with_per_token_loss() {
    let m = crate::evaluation::verify::scrambled_model(tiny(2), 3, 0.5).unwrap();
    let test = vec![
        LabeledExample { id: 0, tokens: seq(&[5, 6, 7, 11]), label: 0 },
        LabeledExample { id: 1, tokens: seq(&[9, 12]), label: 1 },
    ];
    let mut nll = 0.0;
    let mut count = 0;
    for e in &test {
        let logits = m.forward_ag(&e.tokens, e.label).unwrap();
        let t = ag_targets(&e.tokens);
        for (row, target) in t.iter().enumerate() {
            if let Some(target) = target {
                let r: Vec<f64> = logits.row(row).to_vec();
                let lse = crate::tensor::log_sum_exp(&r);
                nll += lse - r[*target];
                count += 1;
            }
        }
    }
    assert!((model_ppl(&m, &test).unwrap() - (nll / count as f64).exp()).abs() < 1e-9);
}

#[test]
fn evaluator_always_right_scores_one() {
    // A classifier head that reads the BOS row cannot see labels, so build
    // one generation per class and check against its own predictions.
    let m = crate::evaluation::verify::scrambled_model(tiny(2), 5, 1.0).unwrap();
    let gens: Vec<Generation> = (0..12)
        .map(|i| {
            let tokens = seq(&[5 + (i % 7) as TokenId, 6 + (i % 5) as TokenId]);
            let label = argmax(&m.forward_cls(&tokens).unwrap());
            Generation { tokens, label }
        })
        .collect();
    if (0..2).all(|c| gens.iter().any(|g| g.label == c)) {
        assert_eq!(control_f1(&m, &gens).unwrap(), 1.0);
    }
}

#[test]
fn metrics_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let report = MetricsReport {
        model_ppl: 12.5,
        output_ppl: 20.25,
        macro_f1: 0.75,
        dist: 0.5,
        dist_n: [0.2, 0.4, 0.6, 0.8],
        self_bleu: 0.3,
        oracle_control_acc: 0.9,
    };
    let row = MetricsRow { run: "r".into(), mode: "kest".into(), seed: 3, epoch: "final".into(), report: report.clone() };
    write_metrics_csv(&path, &[row.clone()], Some("config_hash=ff")).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# config_hash=ff\nrun,mode,seed,epoch,model_ppl,"));
    assert!(text.contains("dist_x100,self_bleu_x100"));
    assert_eq!(read_metrics_csv(&path).unwrap(), vec![row]);
    report.check().unwrap();
    assert!(MetricsReport { self_bleu: 1.5, ..report }.check().is_err());
}
