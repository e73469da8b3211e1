//! Per-epoch records and on-disk dumps of pseudo data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::decode::PseudoTextItem;
use crate::error::{KestError, Result};
use crate::losses::SoftSequence;
use crate::tensor::Mat;
use crate::tokenizer::TokenId;

pub const HISTORY_COLUMNS: [&str; 8] =
    ["epoch", "mode", "ce_loss", "mmd_loss", "pl_accuracy", "wall_clock_s", "forward_passes_ag", "forward_passes_nag"];

const SOFT_MAGIC: &[u8; 8] = b"KESTSOFT";
const SOFT_VERSION: u32 = 1;

/// One epoch of training, base or self-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: String,
    pub ce_loss: f64,
    pub mmd_loss: f64,
    pub pl_accuracy: Option<f64>,
    pub wall_clock_s: f64,
    pub forward_passes_ag: u64,
    pub forward_passes_nag: u64,
    /// Audit fields (not written to `history.csv`).
    pub snapshot_checksum: Option<String>,
    /// Checksum of the model at the end of the epoch.
    pub model_checksum: String,
    pub embedding_checksum: String,
    pub pool_sizes: [usize; 3],
    pub dropped_kernel_items: usize,
    pub validation_loss: Option<f64>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.10}")
}

/// `history.csv`, optionally preceded by a `# key=value` comment line.
pub fn write_history_csv(path: &Path, records: &[EpochRecord], header_comment: Option<&str>) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    if let Some(c) = header_comment {
        writeln!(file, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(HISTORY_COLUMNS)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.mode.clone(),
            fmt_f64(r.ce_loss),
            fmt_f64(r.mmd_loss),
            r.pl_accuracy.map(fmt_f64).unwrap_or_default(),
            format!("{:.3}", r.wall_clock_s),
            r.forward_passes_ag.to_string(),
            r.forward_passes_nag.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PlLine<'a> {
    id: usize,
    label: usize,
    tokens: &'a [TokenId],
}

#[derive(Serialize)]
struct PtLine<'a> {
    source: usize,
    label: usize,
    tokens: &'a [TokenId],
    masked_input: &'a [TokenId],
}

pub fn write_pseudo_labels(path: &Path, items: &[LabeledExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in items {
        serde_json::to_writer(&mut w, &PlLine { id: ex.id, label: ex.label, tokens: ex.tokens.active() })?;
        writeln!(w)?;
    }
    Ok(())
}

/// Writes `<stem>.jsonl` (tokens), `<stem>.mask` (one bit string per item)
/// and, when any item is soft, `<stem>.soft.bin`.
pub fn write_pseudo_text(dir: &Path, stem: &str, items: &[PseudoTextItem]) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join(format!("{stem}.jsonl")))?);
    let mut m = BufWriter::new(File::create(dir.join(format!("{stem}.mask")))?);
    for it in items {
        let line = PtLine {
            source: it.source_example_id,
            label: it.label,
            tokens: it.hard_tokens.active(),
            masked_input: it.masked_input.active(),
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
        writeln!(m, "{}", it.mask.to_bit_string())?;
    }
    let soft: Vec<&SoftSequence> = items.iter().filter_map(|i| i.soft.as_ref()).collect();
    if !soft.is_empty() {
        write_soft_dump(&dir.join(format!("{stem}.soft.bin")), &soft)?;
    }
    Ok(())
}

pub fn write_soft_dump(path: &Path, items: &[&SoftSequence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SOFT_MAGIC)?;
    w.write_all(&SOFT_VERSION.to_le_bytes())?;
    w.write_all(&(items.len() as u64).to_le_bytes())?;
    let (rows, cols) = items.first().map(|s| s.matrix.shape()).unwrap_or((0, 0));
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    for s in items {
        if s.matrix.shape() != (rows, cols) {
            return Err(KestError::integrity("soft dump items differ in shape"));
        }
        w.write_all(&(s.length as u64).to_le_bytes())?;
        for v in s.matrix.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_soft_dump(path: &Path) -> Result<Vec<SoftSequence>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SOFT_MAGIC {
        return Err(KestError::integrity("not a soft pseudo-text dump"));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    if u32::from_le_bytes(v) != SOFT_VERSION {
        return Err(KestError::integrity("unsupported soft dump version"));
    }
    let n = read_u64(&mut r)? as usize;
    let rows = read_u64(&mut r)? as usize;
    let cols = read_u64(&mut r)? as usize;
    (0..n)
        .map(|_| {
            let length = read_u64(&mut r)? as usize;
            let data = (0..rows * cols)
                .map(|_| read_u64(&mut r).map(f64::from_bits))
                .collect::<Result<Vec<f64>>>()?;
            Ok(SoftSequence { matrix: Mat::from_vec(rows, cols, data), length })
        })
        .collect()
}
