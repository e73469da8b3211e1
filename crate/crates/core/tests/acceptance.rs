//! End-to-end acceptance: one PASS/FAIL line per criterion.
//!
//! Every tolerance and budget is pinned below. Criteria that are known to
//! fail at desk scale are listed in `EXPECTED_RED`; they still print FAIL
//! and the suite only tolerates exactly those. Artifacts go to a temporary
//! directory unless `KEST_ACCEPTANCE_OUT` names one to keep.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use kest_core::evaluation::verify::{self, Precision, VerifyReport};
use kest_core::evaluation::{dist_n, macro_f1, model_ppl, self_bleu};
use kest_core::corpus::LabeledExample;
use kest_core::model::{Model, ModelConfig};
use kest_core::runner::{summarize, sweep, timing_study, Experiment, ExperimentConfig, RunRecord, SummaryRow, SweepAxis};
use kest_core::selftrain::Mode;
use kest_core::tokenizer::{TokenId, TokenSequence};

const IDENTITY_TOL: f64 = 1e-10;
const GRADIENT_REL_TOL: f64 = 1e-4;
const ORACLE_TRIALS: usize = 200;
const IDENTITY_TRIALS: usize = 100;
const INVARIANT_TRIALS: usize = 1000;
const UNIFORM_PPL_TOL: f64 = 1e-6;
const TIMING_LENGTH: usize = 48;
const TIMING_LENGTHS: [usize; 4] = [8, 16, 32, TIMING_LENGTH];
const MIN_NAG_SPEEDUP: f64 = 2.0;
const MIN_KEST_OVER_PT: f64 = 0.03;
const SWEEP_VALUES: [f64; 4] = [0.3, 0.5, 0.7, 0.9];
const MIN_INTERIOR_SEEDS: usize = 3;

const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const IDENTITY_BUDGET: Duration = Duration::from_secs(30);
const GRADIENT_BUDGET: Duration = Duration::from_secs(5 * 60);
const TIMING_BUDGET: Duration = Duration::from_secs(5 * 60);
const INVARIANT_BUDGET: Duration = Duration::from_secs(2 * 60);
const DESK_BUDGET: Duration = Duration::from_secs(4 * 3600);

/// Criteria that fail at desk scale; see the README for the measurements.
/// 7: PT from D_l alone lands below supervised-only (0.737 vs 0.761).
/// 9: accuracy without the kernel loss is 0.002 above KEST.
const EXPECTED_RED: &[u32] = &[7, 9];

/// Writes past the test harness's output capture so the criterion lines
/// show up in a plain `cargo test` log.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, $($arg)*);
        let _ = out.flush();
    }};
}

struct Outcome {
    id: u32,
    passed: bool,
    line: String,
}

fn outcome(id: u32, name: &str, passed: bool, detail: String) -> Outcome {
    let line = format!("{} [{id}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    Outcome { id, passed, line }
}

fn within(elapsed: Duration, budget: Duration) -> (bool, String) {
    (elapsed < budget, format!("{:.1}s (budget {:.0}s)", elapsed.as_secs_f64(), budget.as_secs_f64()))
}

/// Every check passed at a tolerance no looser than `tol`.
fn reports_pass(reports: &[&VerifyReport], tol: f64) -> (bool, String) {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for r in reports {
        for c in &r.checks {
            ok &= c.passed && c.trials > 0 && c.tolerance <= tol;
            worst = worst.max(c.max_error);
            if !c.passed {
                say!("{}", r.render().trim_end());
            }
        }
    }
    (ok, format!("max error {worst:.2e} (tol {tol:.0e})"))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mode_row(rows: &[SummaryRow], mode: Mode) -> &SummaryRow {
    rows.iter().find(|r| r.mode == mode).unwrap_or_else(|| panic!("no {} runs", mode.name()))
}

fn kernel_oracle() -> Outcome {
    let t = Instant::now();
    let r = verify::verify_kernel_oracle(1, ORACLE_TRIALS);
    let (ok, detail) = reports_pass(&[&r], IDENTITY_TOL);
    let ok = ok && r.checks[0].trials == ORACLE_TRIALS;
    let (fast, time) = within(t.elapsed(), ORACLE_BUDGET);
    outcome(1, "kernel loss vs brute-force double sum", ok && fast, format!("{ORACLE_TRIALS} instances, {detail}, {time}"))
}

fn identities() -> Outcome {
    let t = Instant::now();
    let a = verify::verify_lemma1(2, IDENTITY_TRIALS);
    let b = verify::verify_mmd_identity(2, IDENTITY_TRIALS);
    let (ok, detail) = reports_pass(&[&a, &b], IDENTITY_TOL);
    // The lemma's side checks (shared distribution, alpha = 0) run on a
    // subset of trials; the main identity and all three MMD forms run on all.
    let counted = a.checks[0].trials == IDENTITY_TRIALS && b.checks.len() == 3 && b.checks.iter().all(|c| c.trials == IDENTITY_TRIALS);
    let ok = ok && counted;
    let (fast, time) = within(t.elapsed(), IDENTITY_BUDGET);
    outcome(2, "mixed cross-entropy and MMD identities", ok && fast, format!("{IDENTITY_TRIALS} instances each, {detail}, {time}"))
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let r = verify::verify_gradients(Precision::F64, 3).expect("gradient check runs");
    let names: Vec<&str> = r.checks.iter().map(|c| c.name.as_str()).collect();
    let (ok, detail) = reports_pass(&[&r], GRADIENT_REL_TOL);
    let (fast, time) = within(t.elapsed(), GRADIENT_BUDGET);
    let c = verify::check_model_config();
    let shape_ok = c.n_layers == 2 && c.d_model == 8 && r.checks.len() >= 4;
    outcome(
        3,
        "analytic gradients vs central differences (f64)",
        ok && fast && shape_ok,
        format!("{} losses [{}], {detail}, {time}", names.len(), names.join("; ")),
    )
}

fn nag_cost(desk: &ExperimentConfig) -> Outcome {
    let t = Instant::now();
    let data = kest_core::runner::PreparedData::new(desk).expect("desk data");
    let cfg = ModelConfig { l_max: TIMING_LENGTH + 2, ..data.model_config.clone() };
    let model = Model::<f32>::new(cfg, 5).expect("model");
    let st = &desk.selftrain;
    let rows = timing_study(&model, &data.bundle.labeled, &TIMING_LENGTHS, st.p_m_st, st.nag_top_p, 5).expect("timing study");
    let counts_ok = rows.iter().all(|r| r.nag_passes_per_item == 1.0 && r.ag_passes_per_item == r.ag_mean_generated_len && r.ag_mean_generated_len == r.length as f64);
    let last = rows.iter().find(|r| r.length == TIMING_LENGTH).expect("row at the longest length");
    let (fast, time) = within(t.elapsed(), TIMING_BUDGET);
    let per_len: Vec<String> = rows.iter().map(|r| format!("L={} {:.1}x", r.length, r.speedup())).collect();
    outcome(
        4,
        "NAG one pass per item, AG one per token, NAG speedup",
        counts_ok && last.speedup() >= MIN_NAG_SPEEDUP && fast,
        format!("passes exact={counts_ok}, speedup {} (need >= {MIN_NAG_SPEEDUP}x at L={TIMING_LENGTH}), {time}", per_len.join(", ")),
    )
}

fn invariants() -> Outcome {
    let t = Instant::now();
    let r = verify::verify_invariants(4, INVARIANT_TRIALS).expect("invariants run");
    let (ok, _) = reports_pass(&[&r], 0.0);
    let ok = ok && r.checks.iter().all(|c| c.trials >= INVARIANT_TRIALS);
    let (fast, time) = within(t.elapsed(), INVARIANT_BUDGET);
    outcome(5, "structural invariants", ok && fast && r.checks.len() == 6, format!("{} invariants x {INVARIANT_TRIALS} trials, {time}", r.checks.len()))
}

fn metric_oracles() -> Outcome {
    let abab: Vec<TokenId> = vec![5, 6, 5, 6];
    let dist_ok = dist_n(&[&abab], 1).unwrap() == 0.5 && dist_n(&[&abab], 2).unwrap() == 2.0 / 3.0;
    let same = vec![7; 6];
    let flat_ok = dist_n(&[&same], 1).unwrap() == 1.0 / 6.0;

    // x = a b c d, y = a b c e, z = a b against each other.
    let (x, y, z): (Vec<TokenId>, Vec<TokenId>, Vec<TokenId>) = (vec![5, 6, 7, 8], vec![5, 6, 7, 9], vec![5, 6]);
    let eps = kest_core::evaluation::BLEU_EPSILON;
    let bx = ((2.0f64 / 3.0).ln() + 0.5f64.ln() + eps.ln()) / 3.0;
    let bz = (1.0f64.ln() + 2.0 * eps.ln()) / 3.0;
    let expected = (2.0 * bx.exp() + (-1.0f64).exp() * bz.exp()) / 3.0;
    let got = self_bleu(&[&x, &y, &z]).unwrap();
    let bleu_ok = got == expected && (self_bleu(&[&x, &x, &x]).unwrap() - 1.0).abs() < 1e-15;

    let f1 = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2);
    let f1_ok = f1 == 1.0 / 3.0;

    let cfg = ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_label: 4, d_ff: 16, cls_hidden: 6, vocab_size: 23, num_classes: 2, l_max: 10, dropout_rate: 0.0 };
    let mut m = Model::<f64>::new(cfg, 1).unwrap();
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        m.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let test: Vec<LabeledExample> = [(vec![5, 6, 7], 0), (vec![9, 9, 12, 15], 1)]
        .into_iter()
        .enumerate()
        .map(|(id, (c, label))| LabeledExample { id, tokens: TokenSequence::from_content(&c, 10), label })
        .collect();
    let ppl = model_ppl(&m, &test).unwrap();
    let ppl_ok = (ppl - 23.0).abs() < UNIFORM_PPL_TOL;

    outcome(
        6,
        "metric hand oracles",
        dist_ok && flat_ok && bleu_ok && f1_ok && ppl_ok,
        format!("dist={} self_bleu={got:.6e} (hand {expected:.6e}) macro_f1={f1} uniform_ppl={ppl:.9} (V=23)", dist_ok && flat_ok),
    )
}

struct DeskRuns {
    rows: Vec<SummaryRow>,
    elapsed: Duration,
}

fn desk_runs(desk: &ExperimentConfig, root: &Path) -> DeskRuns {
    let t = Instant::now();
    let exp = Experiment::open(desk.clone(), root).expect("desk experiment");
    let records: Vec<RunRecord> = exp.run_all().expect("desk runs");
    let rows = summarize(&records);
    say!("desk summary ({} seeds):", desk.seeds.len());
    for r in &rows {
        let (acc, sd) = r.metric("oracle_control_acc").unwrap();
        let (sb, _) = r.metric("self_bleu").unwrap();
        say!("  {:<15} oracle_acc {acc:.4} +- {sd:.4}  self_bleu {sb:.4}", r.mode.name());
    }
    DeskRuns { rows, elapsed: t.elapsed() }
}

fn ordering(desk: &ExperimentConfig, runs: &DeskRuns) -> Outcome {
    let acc = |m| mode_row(&runs.rows, m).metric("oracle_control_acc").unwrap().0;
    let sb = |m| mode_row(&runs.rows, m).metric("self_bleu").unwrap().0;
    let (k, sel, pt, sup) = (acc(Mode::Kest), acc(Mode::PtSelectPl), acc(Mode::Pt), acc(Mode::Supervised));
    let chain = k >= sel && sel >= pt && pt >= sup;
    let margin = k - pt >= MIN_KEST_OVER_PT;
    let diversity = sb(Mode::Kest) <= sb(Mode::Pt);
    let (fast, time) = within(runs.elapsed, DESK_BUDGET);
    let sizes_ok = desk.seeds.len() == 5;
    outcome(
        7,
        "desk ordering KEST >= PT(select)+PL >= PT >= supervised",
        chain && margin && diversity && fast && sizes_ok,
        format!(
            "acc {k:.4} / {sel:.4} / {pt:.4} / {sup:.4}, chain={chain}, KEST-PT {:+.4} (need >= {MIN_KEST_OVER_PT}), self-BLEU KEST {:.4} vs PT {:.4}, {time}",
            k - pt,
            sb(Mode::Kest),
            sb(Mode::Pt)
        ),
    )
}

fn mask_sweep(desk: &ExperimentConfig, root: &Path) -> Outcome {
    let t = Instant::now();
    let config = ExperimentConfig { name: "desk-pm".into(), modes: vec![Mode::Kest], ..desk.clone() };
    let exp = Experiment::open(config, root).expect("sweep experiment");
    let out = sweep(&exp, SweepAxis::MaskRatio, &SWEEP_VALUES).expect("sweep");
    let mut interior = 0;
    let mut per_seed = Vec::new();
    for &seed in &desk.seeds {
        let accs: Vec<f64> = SWEEP_VALUES
            .iter()
            .map(|&v| {
                let variant = SweepAxis::MaskRatio.variant(v);
                out.records.iter().find(|r| r.seed == seed && r.variant == variant).expect("sweep record").metrics.oracle_control_acc
            })
            .collect();
        let inner = accs[1..accs.len() - 1].iter().cloned().fold(f64::MIN, f64::max);
        let ends = accs[0].max(accs[accs.len() - 1]);
        if inner > ends {
            interior += 1;
        }
        per_seed.push(format!("seed {seed} [{}]", accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")));
    }
    say!("p_m sweep {SWEEP_VALUES:?}: {}", per_seed.join("; "));
    let (fast, time) = within(t.elapsed(), DESK_BUDGET);
    outcome(
        8,
        "mask-ratio sweep has an interior maximum",
        interior >= MIN_INTERIOR_SEEDS && fast,
        format!("{interior}/{} seeds (need >= {MIN_INTERIOR_SEEDS}), {time}", desk.seeds.len()),
    )
}

fn ablation(runs: &DeskRuns) -> Outcome {
    let k = mode_row(&runs.rows, Mode::Kest);
    let nk = mode_row(&runs.rows, Mode::KestNoKernel);
    let (k_acc, nk_acc) = (k.metric("oracle_control_acc").unwrap().0, nk.metric("oracle_control_acc").unwrap().0);
    let (k_sb, nk_sb) = (k.metric("self_bleu").unwrap().0, nk.metric("self_bleu").unwrap().0);
    outcome(
        9,
        "removing the kernel loss does not help",
        nk_sb >= k_sb && nk_acc <= k_acc,
        format!("self-BLEU without kernel {nk_sb:.4} vs KEST {k_sb:.4}; accuracy {nk_acc:.4} vs {k_acc:.4}"),
    )
}

fn determinism(root: &Path) -> Outcome {
    let config = ExperimentConfig::load(&workspace_root().join("configs/tiny.toml")).expect("tiny config");
    let config = ExperimentConfig { seeds: vec![config.seeds[0]], ..config };
    let run = |sub: &str| -> Vec<RunRecord> {
        let exp = Experiment::open(config.clone(), &root.join(sub)).expect("tiny experiment");
        exp.run_all().expect("tiny runs")
    };
    let (a, b) = (run("first"), run("second"));
    let name = config.run_dir_name().unwrap();
    let mut same = a.len() == b.len() && !a.is_empty();
    let mut compared = 0;
    for (ra, rb) in a.iter().zip(&b) {
        let rel = Path::new(&name).join(format!("seed{}", ra.seed)).join(ra.mode.name()).join("history.csv");
        let ha = std::fs::read(root.join("first").join(&rel)).expect("history");
        let hb = std::fs::read(root.join("second").join(&rel)).expect("history");
        same &= ha == hb && ra.final_checksum == rb.final_checksum && !ra.final_checksum.is_empty();
        compared += 1;
    }
    outcome(10, "rerun reproduces history.csv and checksums byte for byte", same, format!("{compared} runs compared"))
}

#[test]
fn acceptance() {
    let keep = std::env::var_os("KEST_ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    let desk = ExperimentConfig::load(&workspace_root().join("configs/desk.toml")).expect("desk config");

    let mut outcomes = vec![kernel_oracle(), identities(), gradients(), nag_cost(&desk), invariants(), metric_oracles()];
    let runs = desk_runs(&desk, &root);
    outcomes.push(ordering(&desk, &runs));
    outcomes.push(mask_sweep(&desk, &root));
    outcomes.push(ablation(&runs));
    outcomes.push(determinism(&root));

    say!("\n== acceptance ==");
    for o in &outcomes {
        let note = match (o.passed, EXPECTED_RED.contains(&o.id)) {
            (false, true) => "  (known red)",
            (true, true) => "  (listed red, now passing)",
            _ => "",
        };
        say!("{}{note}", o.line);
    }
    let unexpected: Vec<u32> = outcomes.iter().filter(|o| !o.passed && !EXPECTED_RED.contains(&o.id)).map(|o| o.id).collect();
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
}
