//! Sweeps, the AG-vs-NAG timing study, cross-run reports and the full
//! verifier suite.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::experiment::{Experiment, RunRecord};
use super::plots::{line_chart, Series};
use crate::corpus::LabeledExample;
use crate::decode::{generate_ag, generate_nag, sample_mask, DecodeConfig};
use crate::error::{KestError, Result};
use crate::evaluation::verify::{
    verify_gradients, verify_invariants, verify_kernel_oracle, verify_lemma1, verify_mmd_identity, Precision,
};
use crate::evaluation::{VerifyReport, METRICS_COLUMNS};
use crate::model::{Branch, Model};
use crate::rng::{self, tag};
use crate::selftrain::{Mode, STConfig};
use crate::tensor::Scalar;
use crate::tokenizer::TokenSequence;

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_commented_csv(path: &Path, comment: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "# {comment}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn mean_std_header() -> Vec<String> {
    METRICS_COLUMNS.iter().flat_map(|c| [format!("{c}_mean"), format!("{c}_std")]).collect()
}

/// Seed-aggregated metrics for one (mode, variant) group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mode: Mode,
    pub variant: String,
    pub seeds: Vec<u64>,
    pub mean: [f64; 10],
    pub std: [f64; 10],
}

impl SummaryRow {
    pub fn metric(&self, column: &str) -> Option<(f64, f64)> {
        METRICS_COLUMNS.iter().position(|c| *c == column).map(|i| (self.mean[i], self.std[i]))
    }

    fn cells(&self) -> Vec<String> {
        self.mean.iter().zip(&self.std).flat_map(|(m, s)| [format!("{m:.10}"), format!("{s:.10}")]).collect()
    }
}

/// Groups records by (mode name, variant), sorted for reproducible output.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, &str), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.mode.name(), r.variant.as_str())).or_default().push(r);
    }
    groups
        .into_values()
        .map(|rs| {
            let mut mean = [0.0; 10];
            let mut std = [0.0; 10];
            for i in 0..10 {
                let xs: Vec<f64> = rs.iter().map(|r| r.metrics.values()[i]).collect();
                (mean[i], std[i]) = mean_std(&xs);
            }
            let mut seeds: Vec<u64> = rs.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            SummaryRow { mode: rs[0].mode, variant: rs[0].variant.clone(), seeds, mean, std }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    /// Self-training mask ratio.
    MaskRatio,
    /// |D_pt| / |D_l|.
    RatioPt,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::MaskRatio => "p_m",
            SweepAxis::RatioPt => "ratio_pt",
        }
    }

    pub fn apply(self, st: &STConfig, value: f64) -> STConfig {
        let mut st = st.clone();
        match self {
            SweepAxis::MaskRatio => st.p_m_st = value,
            SweepAxis::RatioPt => st.ratio_pt = value,
        }
        st
    }

    pub fn variant(self, value: f64) -> String {
        format!("{}={value}", self.name())
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = KestError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p_m" => Ok(SweepAxis::MaskRatio),
            "ratio_pt" => Ok(SweepAxis::RatioPt),
            other => Err(KestError::config(format!("unknown sweep axis {other:?}; expected p_m or ratio_pt"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub dir: PathBuf,
    pub records: Vec<RunRecord>,
    /// One row per (mode, value), values in the order given.
    pub summary: Vec<(f64, SummaryRow)>,
}

/// Runs every configured mode except `supervised` (which ignores both axes)
/// at every value, for every seed. One base model per seed is shared.
pub fn sweep(exp: &Experiment, axis: SweepAxis, values: &[f64]) -> Result<SweepOutput> {
    if values.is_empty() {
        return Err(KestError::config("sweep needs at least one value"));
    }
    let variants: Vec<(String, STConfig)> = values
        .iter()
        .map(|&v| {
            let st = axis.apply(&exp.config.selftrain, v);
            st.validate()?;
            Ok((axis.variant(v), st))
        })
        .collect::<Result<_>>()?;
    let mut modes: Vec<Mode> = exp.config.modes.iter().copied().filter(|m| *m != Mode::Supervised).collect();
    if modes.is_empty() {
        modes = exp.config.modes.clone();
    }
    let dir = exp.dir.join(format!("sweep_{}", axis.name()));
    std::fs::create_dir_all(&dir)?;
    let evaluators = exp.evaluators()?;
    let mut records = Vec::new();
    for &seed in &exp.config.seeds {
        records.extend(exp.run_seed(seed, &modes, &variants, &dir, &evaluators)?);
    }
    exp.write_metrics(&dir.join("metrics.csv"), &records)?;

    let groups = summarize(&records);
    let mut summary = Vec::new();
    for &mode in &modes {
        for &v in values {
            if let Some(row) = groups.iter().find(|g| g.mode == mode && g.variant == axis.variant(v)) {
                summary.push((v, row.clone()));
            }
        }
    }
    let mut header: Vec<String> = vec!["axis".into(), "value".into(), "mode".into(), "n_seeds".into()];
    header.extend(mean_std_header());
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|(v, r)| {
            let mut row = vec![axis.name().to_string(), v.to_string(), r.mode.name().to_string(), r.seeds.len().to_string()];
            row.extend(r.cells());
            row
        })
        .collect();
    write_commented_csv(&dir.join("sweep.csv"), &exp.header(), &header, &rows)?;

    for (i, column) in METRICS_COLUMNS.iter().enumerate() {
        let series: Vec<Series> = modes
            .iter()
            .map(|&m| Series {
                name: m.name().to_string(),
                points: summary.iter().filter(|(_, r)| r.mode == m).map(|(v, r)| (*v, r.mean[i])).collect(),
            })
            .collect();
        let caption = format!("{column} vs {} ({})", axis.name(), &exp.hash[..8]);
        line_chart(&dir.join(format!("sweep_{column}.svg")), &caption, axis.name(), column, &series)?;
    }
    Ok(SweepOutput { dir, records, summary })
}

/// Pseudo-text production cost at one sequence length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub length: usize,
    pub items: usize,
    pub ag_wall_s: f64,
    pub nag_wall_s: f64,
    pub ag_passes_per_item: f64,
    pub nag_passes_per_item: f64,
    pub ag_mean_generated_len: f64,
}

impl TimingRow {
    pub fn speedup(&self) -> f64 {
        self.ag_wall_s / self.nag_wall_s.max(1e-12)
    }
}

/// For each length `L`, produces one pseudo text per item via free-running
/// AG decoding of exactly `L` tokens and via one NAG pass over an `L`-token
/// input, timing each sequentially.
pub fn timing_study<T: Scalar>(
    model: &Model<T>,
    items: &[LabeledExample],
    lengths: &[usize],
    p_m: f64,
    top_p: f64,
    seed: u64,
) -> Result<Vec<TimingRow>> {
    let l_max = model.config().l_max;
    if items.is_empty() {
        return Err(KestError::precondition("timing needs at least one item"));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l == 0 || l + 2 > l_max) {
        return Err(KestError::config(format!("timing length {l} does not fit L_max {l_max}")));
    }
    let mut rows = Vec::new();
    for &length in lengths {
        let decode = DecodeConfig { top_p, min_len: length, max_len: length, repetition_penalty: 1.0, no_repeat_ngram: 0, seed };
        let empty = TokenSequence::from_content(&[], l_max);
        let passes0 = model.counters().get(Branch::Ag);
        let start = Instant::now();
        let mut generated = 0usize;
        for (i, ex) in items.iter().enumerate() {
            let mut r = rng::stream(seed, &[tag::DECODE, length as u64, i as u64]);
            generated += generate_ag(model, ex.label, &empty, &decode, &mut r)?.content().len();
        }
        let ag_wall_s = start.elapsed().as_secs_f64();
        let ag_passes = model.counters().get(Branch::Ag) - passes0;

        let inputs: Vec<TokenSequence> = items
            .iter()
            .map(|ex| {
                let content: Vec<_> = ex.tokens.content().iter().copied().cycle().take(length).collect();
                TokenSequence::from_content(&content, l_max)
            })
            .collect();
        let passes0 = model.counters().get(Branch::Nag);
        let start = Instant::now();
        for (i, (ex, seq)) in items.iter().zip(&inputs).enumerate() {
            let mut r = rng::stream(seed, &[tag::MASK, length as u64, i as u64]);
            let mask = sample_mask(seq.maskable_len(), p_m, &mut r);
            generate_nag(model, seq, &mask, ex.label, top_p, &mut r, true)?;
        }
        let nag_wall_s = start.elapsed().as_secs_f64();
        let nag_passes = model.counters().get(Branch::Nag) - passes0;
        let n = items.len() as f64;
        rows.push(TimingRow {
            length,
            items: items.len(),
            ag_wall_s,
            nag_wall_s,
            ag_passes_per_item: ag_passes as f64 / n,
            nag_passes_per_item: nag_passes as f64 / n,
            ag_mean_generated_len: generated as f64 / n,
        });
    }
    Ok(rows)
}

pub const TIMING_COLUMNS: [&str; 8] = [
    "length",
    "items",
    "ag_wall_s",
    "nag_wall_s",
    "speedup",
    "ag_passes_per_item",
    "nag_passes_per_item",
    "ag_mean_generated_len",
];

/// Writes `timing.csv` and `timing.svg` into `dir`.
pub fn write_timing(dir: &Path, rows: &[TimingRow], comment: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let header: Vec<String> = TIMING_COLUMNS.iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.length.to_string(),
                r.items.to_string(),
                format!("{:.6}", r.ag_wall_s),
                format!("{:.6}", r.nag_wall_s),
                format!("{:.3}", r.speedup()),
                format!("{:.3}", r.ag_passes_per_item),
                format!("{:.3}", r.nag_passes_per_item),
                format!("{:.3}", r.ag_mean_generated_len),
            ]
        })
        .collect();
    write_commented_csv(&dir.join("timing.csv"), comment, &header, &body)?;
    let series = vec![
        Series { name: "AG".into(), points: rows.iter().map(|r| (r.length as f64, r.ag_wall_s)).collect() },
        Series { name: "NAG".into(), points: rows.iter().map(|r| (r.length as f64, r.nag_wall_s)).collect() },
    ];
    line_chart(&dir.join("timing.svg"), &format!("pseudo-text wall-clock ({comment})"), "length", "seconds", &series)
}

/// Timing on the experiment's labeled set. Uses `checkpoint` when given,
/// otherwise a freshly initialized model whose `L_max` fits the longest
/// length (decoding cost does not depend on the weights).
pub fn timing(exp: &Experiment, lengths: &[usize], checkpoint: Option<&Path>, seed: u64) -> Result<Vec<TimingRow>> {
    let longest = *lengths.iter().max().ok_or_else(|| KestError::config("timing needs at least one length"))?;
    let model: Model<f32> = match checkpoint {
        Some(p) => crate::model::load_checkpoint(p, None)?,
        None => {
            let cfg = crate::model::ModelConfig { l_max: longest + 2, ..exp.data.model_config.clone() };
            Model::new(cfg, seed)?
        }
    };
    let st = &exp.config.selftrain;
    let rows = timing_study(&model, &exp.data.bundle.labeled, lengths, st.p_m_st, st.nag_top_p, seed)?;
    write_timing(&exp.dir.join("timing"), &rows, &exp.header())?;
    Ok(rows)
}

/// Every `run_record.json` below the given paths, in path order.
pub fn collect_records(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == "run_record.json") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    for p in paths {
        if p.is_file() {
            files.push(p.clone());
        } else if p.is_dir() {
            walk(p, &mut files)?;
        } else {
            return Err(KestError::config(format!("{} does not exist", p.display())));
        }
    }
    files.iter().map(|f| RunRecord::load(f)).collect()
}

/// Table of modes (mean and std over seeds) plus history line plots,
/// written to `out_dir`. Refuses records from different corpora.
pub fn report(records: &[RunRecord], out_dir: &Path) -> Result<Vec<SummaryRow>> {
    let first = records.first().ok_or_else(|| KestError::config("report needs at least one completed run"))?;
    if let Some(other) = records.iter().find(|r| r.corpus_hash != first.corpus_hash) {
        return Err(KestError::config(format!(
            "runs use different corpora ({} vs {}); refusing to compare them",
            &first.corpus_hash[..12],
            &other.corpus_hash[..12]
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut hashes: Vec<&str> = records.iter().map(|r| r.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    let comment = format!("config_hash={}", hashes.join(","));

    let rows = summarize(records);
    let mut header: Vec<String> = vec!["mode".into(), "variant".into(), "n_seeds".into()];
    header.extend(mean_std_header());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.mode.name().to_string(), r.variant.clone(), r.seeds.len().to_string()];
            row.extend(r.cells());
            row
        })
        .collect();
    write_commented_csv(&out_dir.join("report.csv"), &comment, &header, &body)?;

    let short: String = hashes.iter().map(|h| &h[..8]).collect::<Vec<_>>().join(",");
    for column in ["ce_loss", "mmd_loss", "pl_accuracy"] {
        let series: Vec<Series> = rows
            .iter()
            .map(|row| {
                let group: Vec<&RunRecord> =
                    records.iter().filter(|r| r.mode == row.mode && r.variant == row.variant).collect();
                let len = group.iter().map(|r| r.history.len()).max().unwrap_or(0);
                let points = (0..len)
                    .filter_map(|i| {
                        let xs: Vec<f64> = group
                            .iter()
                            .filter_map(|r| r.history.get(i))
                            .filter_map(|h| match column {
                                "ce_loss" => Some(h.ce_loss),
                                "mmd_loss" => Some(h.mmd_loss),
                                _ => h.pl_accuracy,
                            })
                            .collect();
                        (!xs.is_empty()).then(|| ((i + 1) as f64, mean_std(&xs).0))
                    })
                    .collect();
                let name = if row.variant.is_empty() { row.mode.name().to_string() } else { format!("{} {}", row.mode, row.variant) };
                Series { name, points }
            })
            .collect();
        line_chart(&out_dir.join(format!("history_{column}.svg")), &format!("{column} per epoch ({short})"), "epoch", column, &series)?;
    }
    Ok(rows)
}

/// Trial counts for the full verifier suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyPlan {
    pub identity_trials: usize,
    pub oracle_trials: usize,
    pub invariant_trials: usize,
}

impl Default for VerifyPlan {
    fn default() -> Self {
        Self { identity_trials: 100, oracle_trials: 200, invariant_trials: 1000 }
    }
}

/// Runs every verifier. Gradient checks need `f64`; `f32` is rejected
/// before anything runs.
pub fn verify_all(precision: Precision, seed: u64, plan: VerifyPlan) -> Result<Vec<VerifyReport>> {
    if precision != Precision::F64 {
        return Err(KestError::config("gradient checks require f64 precision"));
    }
    Ok(vec![
        verify_lemma1(seed, plan.identity_trials),
        verify_mmd_identity(seed, plan.identity_trials),
        verify_kernel_oracle(seed, plan.oracle_trials),
        verify_gradients(precision, seed)?,
        verify_invariants(seed, plan.invariant_trials)?,
    ])
}

pub fn render_reports(reports: &[VerifyReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&r.render());
        out.push('\n');
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    out.push_str(if failed == 0 { "OVERALL PASS\n" } else { "OVERALL FAIL\n" });
    out
}
