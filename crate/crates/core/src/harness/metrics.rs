use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_SCHEMA: &str = "mocolab.metrics";
pub const METRICS_SCHEMA_VERSION: u32 = 1;

pub const COLUMNS: [&str; 15] = [
    "kind",
    "config_hash",
    "mechanism",
    "shuffle_bn",
    "step",
    "epoch",
    "loss",
    "pretext_acc",
    "knn_val_acc",
    "probe_acc",
    "param_distance",
    "key_age",
    "negatives",
    "lr",
    "wall_ms",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// One optimizer step.
    Step,
    /// kNN monitor at the end of an epoch.
    Eval,
    /// Linear probe at the end of the run.
    Probe,
    /// Training stopped on a non-finite value.
    Diverged,
}

impl RowKind {
    fn name(self) -> &'static str {
        match self {
            RowKind::Step => "step",
            RowKind::Eval => "eval",
            RowKind::Probe => "probe",
            RowKind::Diverged => "diverged",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "step" => RowKind::Step,
            "eval" => RowKind::Eval,
            "probe" => RowKind::Probe,
            "diverged" => RowKind::Diverged,
            other => return Err(Error::Format(format!("unknown metrics row kind `{other}`"))),
        })
    }
}

/// One metrics line. Fields that do not apply to the row kind are `None`
/// and written as empty cells.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub kind: RowKind,
    pub step: u64,
    pub epoch: usize,
    pub loss: Option<f64>,
    pub pretext_acc: Option<f64>,
    pub knn_val_acc: Option<f64>,
    pub probe_acc: Option<f64>,
    pub param_distance: Option<f64>,
    /// Queue mean age or bank staleness.
    pub key_age: Option<f64>,
    pub negatives: Option<usize>,
    pub lr: Option<f64>,
    pub wall_ms: Option<f64>,
}

impl MetricsRecord {
    pub fn empty(kind: RowKind, step: u64, epoch: usize) -> Self {
        Self {
            kind,
            step,
            epoch,
            loss: None,
            pretext_acc: None,
            knn_val_acc: None,
            probe_acc: None,
            param_distance: None,
            key_age: None,
            negatives: None,
            lr: None,
            wall_ms: None,
        }
    }
}

/// First line of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsHeader {
    pub schema: String,
    pub schema_version: u32,
    pub config_hash: String,
    pub mechanism: String,
    pub shuffle_bn: bool,
    pub seed: u64,
    pub effective_k: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub columns: Vec<String>,
}

fn opt<T: std::fmt::Display>(out: &mut String, v: Option<T>) {
    out.push(',');
    if let Some(v) = v {
        let _ = write!(out, "{v}");
    }
}

/// Append-only writer for one run.
pub struct MetricsWriter {
    out: BufWriter<fs::File>,
    header: MetricsHeader,
}

impl MetricsWriter {
    pub fn create(path: &Path, header: MetricsHeader) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        writeln!(out, "{}", COLUMNS.join(","))?;
        Ok(Self { out, header })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        let mut line = format!(
            "{},{},{},{},{},{}",
            r.kind.name(),
            self.header.config_hash,
            self.header.mechanism,
            self.header.shuffle_bn,
            r.step,
            r.epoch
        );
        opt(&mut line, r.loss);
        opt(&mut line, r.pretext_acc);
        opt(&mut line, r.knn_val_acc);
        opt(&mut line, r.probe_acc);
        opt(&mut line, r.param_distance);
        opt(&mut line, r.key_age);
        opt(&mut line, r.negatives);
        opt(&mut line, r.lr);
        opt(&mut line, r.wall_ms);
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// A metrics file read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsFile {
    pub header: MetricsHeader,
    pub rows: Vec<MetricsRecord>,
}

fn cell<T: std::str::FromStr>(s: &str, col: &str, line: usize) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("line {line}: bad `{col}` value `{s}`")))
}

fn required<T: std::str::FromStr>(s: &str, col: &str, line: usize) -> Result<T> {
    cell(s, col, line)?.ok_or_else(|| Error::Format(format!("line {line}: `{col}` is empty")))
}

impl MetricsFile {
    pub fn read(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(fs::File::open(path)?).lines();
        let head = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Format(format!("{}: empty metrics file", path.display())))?;
        let header: MetricsHeader =
            serde_json::from_str(&head).map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
        if header.schema != METRICS_SCHEMA || header.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported metrics schema {} v{}",
                path.display(),
                header.schema,
                header.schema_version
            )));
        }
        let cols = lines.next().transpose()?.unwrap_or_default();
        if cols != COLUMNS.join(",") {
            return Err(Error::Format(format!("{}: unexpected column line", path.display())));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let n = i + 3;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != COLUMNS.len() {
                return Err(Error::Format(format!("line {n}: {} fields, expected {}", f.len(), COLUMNS.len())));
            }
            if f[1] != header.config_hash {
                return Err(Error::Consistency(format!("line {n}: row config hash differs from the header")));
            }
            rows.push(MetricsRecord {
                kind: RowKind::parse(f[0])?,
                step: required(f[4], "step", n)?,
                epoch: required(f[5], "epoch", n)?,
                loss: cell(f[6], "loss", n)?,
                pretext_acc: cell(f[7], "pretext_acc", n)?,
                knn_val_acc: cell(f[8], "knn_val_acc", n)?,
                probe_acc: cell(f[9], "probe_acc", n)?,
                param_distance: cell(f[10], "param_distance", n)?,
                key_age: cell(f[11], "key_age", n)?,
                negatives: cell(f[12], "negatives", n)?,
                lr: cell(f[13], "lr", n)?,
                wall_ms: cell(f[14], "wall_ms", n)?,
            });
        }
        Ok(Self { header, rows })
    }

    pub fn steps(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.rows.iter().filter(|r| r.kind == RowKind::Step)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps().filter_map(|r| r.loss).collect()
    }

    pub fn diverged(&self) -> bool {
        self.rows.iter().any(|r| r.kind == RowKind::Diverged)
    }

    /// kNN accuracy of the last eval row.
    pub fn final_knn(&self) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.kind == RowKind::Eval).and_then(|r| r.knn_val_acc)
    }

    pub fn probe(&self) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.kind == RowKind::Probe).and_then(|r| r.probe_acc)
    }

    pub fn oscillation(&self) -> Option<f64> {
        oscillation_score(&self.losses())
    }

    /// `(epoch, mean pretext accuracy over the epoch's steps, kNN at its end)`.
    pub fn epoch_curve(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for r in self.rows.iter().filter(|r| r.kind == RowKind::Eval) {
            let accs: Vec<f64> = self
                .steps()
                .filter(|s| s.epoch == r.epoch)
                .filter_map(|s| s.pretext_acc)
                .collect();
            let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
            out.push((r.epoch, mean, r.knn_val_acc.unwrap_or(f64::NAN)));
        }
        out
    }
}

/// Fraction of the run the oscillation score looks at.
pub const OSCILLATION_WINDOW: f64 = 0.2;
/// Score above which a run counts as diverged.
pub const OSCILLATION_DIVERGENCE: f64 = 0.5;

/// `std/mean` of the losses over the final 20% of steps (population std).
/// Infinite if any loss in the window is non-finite; `None` with fewer than 2 steps.
pub fn oscillation_score(losses: &[f64]) -> Option<f64> {
    if losses.len() < 2 {
        return None;
    }
    let w = ((losses.len() as f64 * OSCILLATION_WINDOW).ceil() as usize).clamp(2, losses.len());
    let tail = &losses[losses.len() - w..];
    if tail.iter().any(|l| !l.is_finite()) {
        return Some(f64::INFINITY);
    }
    let mean = tail.iter().sum::<f64>() / w as f64;
    let var = tail.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / w as f64;
    Some(if mean.abs() > 0.0 { var.sqrt() / mean.abs() } else if var > 0.0 { f64::INFINITY } else { 0.0 })
}
