use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::contrastive::MechanismKind;
use crate::error::{Error, Result};
use crate::shuffled_bn::{LeakageCurves, LeakageRow};

use super::config::{DataConfig, ExperimentConfig};
use super::metrics::{MetricsFile, OSCILLATION_DIVERGENCE};
use super::run::{run_experiment, RunSummary, METRICS_FILE};

pub const MANIFEST_FILE: &str = "sweep.json";
pub const TABLE_FILE: &str = "table.csv";

/// The quantity a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    K,
    Momentum,
    ShuffleBn,
}

/// One planned run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mechanism: MechanismKind,
    /// Swept value (K, m, or 1/0 for shuffle on/off).
    pub value: f64,
    pub seed: u64,
    /// Directory relative to the sweep root.
    pub dir: PathBuf,
    /// Set when the cell is not run (e.g. over the memory budget) or failed.
    pub note: Option<String>,
    #[serde(skip)]
    pub config: Option<ExperimentConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub axis: Axis,
    pub cells: Vec<Cell>,
}

/// Aggregate over the seeds of one (mechanism, value) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub mechanism: MechanismKind,
    pub value: f64,
    /// Negatives actually seen (`N − 1` for end-to-end).
    pub effective_k: Option<usize>,
    pub runs: usize,
    pub knn_mean: Option<f64>,
    pub knn_std: Option<f64>,
    pub probe_mean: Option<f64>,
    pub final_pretext_mean: Option<f64>,
    pub oscillation_mean: Option<f64>,
    pub diverged: usize,
    pub notes: Vec<String>,
    /// Per-run values behind the means.
    pub knn: Vec<f64>,
    pub probe: Vec<f64>,
    pub oscillation: Vec<f64>,
    pub final_pretext: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: Axis,
    pub rows: Vec<TableRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation (0 for a single value).
fn std(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Some(0.0);
    }
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

impl SweepTable {
    /// Rebuild the table from the manifest and metrics files under `root`.
    pub fn from_dir(root: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(root.join(MANIFEST_FILE))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad sweep manifest: {e}")))?;
        Self::aggregate(root, &manifest)
    }

    pub fn aggregate(root: &Path, manifest: &Manifest) -> Result<Self> {
        let mut groups: BTreeMap<(u8, u64), TableRow> = BTreeMap::new();
        for cell in &manifest.cells {
            let key = (cell.mechanism as u8, cell.value.to_bits());
            let row = groups.entry(key).or_insert_with(|| TableRow {
                mechanism: cell.mechanism,
                value: cell.value,
                effective_k: None,
                runs: 0,
                knn_mean: None,
                knn_std: None,
                probe_mean: None,
                final_pretext_mean: None,
                oscillation_mean: None,
                diverged: 0,
                notes: Vec::new(),
                knn: Vec::new(),
                probe: Vec::new(),
                oscillation: Vec::new(),
                final_pretext: Vec::new(),
            });
            if let Some(n) = &cell.note {
                row.notes.push(format!("seed {}: {n}", cell.seed));
            }
            let path = root.join(&cell.dir).join(METRICS_FILE);
            if cell.note.is_some() || !path.exists() {
                continue;
            }
            let f = MetricsFile::read(&path)?;
            row.runs += 1;
            row.effective_k = Some(f.header.effective_k);
            let osc = f.oscillation();
            if f.diverged() || osc.is_some_and(|o| o > OSCILLATION_DIVERGENCE) {
                row.diverged += 1;
            }
            if let Some(k) = f.final_knn() {
                row.knn.push(k);
            }
            row.probe.extend(f.probe());
            row.oscillation.extend(osc.filter(|o| o.is_finite()));
            row.final_pretext.extend(f.epoch_curve().last().map(|c| c.1));
        }
        let mut rows: Vec<TableRow> = groups.into_values().collect();
        for r in &mut rows {
            r.knn_mean = mean(&r.knn);
            r.knn_std = std(&r.knn);
            r.probe_mean = mean(&r.probe);
            r.oscillation_mean = mean(&r.oscillation);
            r.final_pretext_mean = mean(&r.final_pretext);
        }
        Ok(Self {
            axis: manifest.axis,
            rows,
        })
    }

    pub fn row(&self, mechanism: MechanismKind, value: f64) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.mechanism == mechanism && r.value == value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "mechanism,value,effective_k,runs,knn_mean,knn_std,probe_mean,final_pretext_mean,oscillation_mean,diverged,notes\n",
        );
        let o = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.mechanism.name(),
                r.value,
                r.effective_k.map(|k| k.to_string()).unwrap_or_default(),
                r.runs,
                o(r.knn_mean),
                o(r.knn_std),
                o(r.probe_mean),
                o(r.final_pretext_mean),
                o(r.oscillation_mean),
                r.diverged,
                r.notes.join("; ").replace(',', ";")
            );
        }
        s
    }

    /// Fixed-width rendering for terminals.
    pub fn render(&self) -> String {
        let axis = match self.axis {
            Axis::K => "K",
            Axis::Momentum => "m",
            Axis::ShuffleBn => "shuffle",
        };
        let mut s = format!(
            "{:<12} {:>8} {:>6} {:>4} {:>9} {:>8} {:>9} {:>9} {:>4}\n",
            "mechanism", axis, "K_eff", "runs", "knn", "±std", "probe", "osc", "div"
        );
        let p = |v: Option<f64>| v.map(|x| format!("{:.4}", x)).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>8} {:>6} {:>4} {:>9} {:>8} {:>9} {:>9} {:>4}{}",
                r.mechanism.name(),
                r.value,
                r.effective_k.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
                r.runs,
                p(r.knn_mean),
                p(r.knn_std),
                p(r.probe_mean),
                p(r.oscillation_mean),
                r.diverged,
                if r.notes.is_empty() { String::new() } else { format!("  [{}]", r.notes.join("; ")) }
            );
        }
        s
    }
}

/// Run every cell without a note, in parallel across available cores; a
/// failing cell gets its error recorded as a note and the sweep continues.
pub fn run_cells(root: &Path, cells: &mut [Cell]) -> Vec<Option<RunSummary>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(cells.len())
        .max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, std::result::Result<RunSummary, String>)>> = Mutex::new(Vec::new());
    let todo: Vec<(usize, &Cell)> = cells.iter().enumerate().filter(|(_, c)| c.note.is_none()).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(idx, cell)) = todo.get(i) else { break };
                let cfg = cell.config.as_ref().expect("planned cells carry a config");
                let r = run_experiment(cfg, &root.join(&cell.dir)).map_err(|e| e.to_string());
                results.lock().expect("results lock").push((idx, r));
            });
        }
    });
    let mut out = vec![None; cells.len()];
    for (idx, r) in results.into_inner().expect("results lock") {
        match r {
            Ok(s) => out[idx] = Some(s),
            Err(e) => cells[idx].note = Some(format!("failed: {e}")),
        }
    }
    out
}

fn finish_sweep(root: &Path, axis: Axis, mut cells: Vec<Cell>) -> Result<SweepTable> {
    std::fs::create_dir_all(root)?;
    run_cells(root, &mut cells);
    let manifest = Manifest { axis, cells };
    std::fs::write(
        root.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    let table = SweepTable::aggregate(root, &manifest)?;
    std::fs::write(root.join(TABLE_FILE), table.to_csv())?;
    Ok(table)
}

fn train_len(cfg: &ExperimentConfig) -> Option<usize> {
    match &cfg.data {
        DataConfig::Synthetic(s) => Some(s.train),
        DataConfig::Idx(_) => None,
    }
}

fn planned(mechanism: MechanismKind, value: f64, seed: u64, dir: String, cfg: ExperimentConfig) -> Cell {
    let note = cfg.validate().err().map(|e| format!("skipped: {e}"));
    Cell {
        mechanism,
        value,
        seed,
        dir: PathBuf::from(dir),
        note,
        config: Some(cfg),
    }
}

/// Cells of a dictionary-size sweep. MoCo and the memory bank take K as
/// their negative count; end-to-end realizes it through the batch, growing
/// `N` to the smallest shard multiple with `N − 1 ≥ K` and stopping at
/// `max_batch`.
pub fn plan_sweep_k(base: &ExperimentConfig, ks: &[usize], mechanisms: &[MechanismKind], seeds: &[u64]) -> Result<Vec<Cell>> {
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(Error::Config(format!("Ks must be positive and strictly ascending, got {ks:?}")));
    }
    if seeds.is_empty() || mechanisms.is_empty() {
        return Err(Error::Config("a sweep needs at least one seed and one mechanism".into()));
    }
    let mut cells = Vec::new();
    for &mech in mechanisms {
        for &k in ks {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.mechanism = mech;
                cfg.seed = seed;
                let dir = format!("{}/k{k}/seed{seed}", mech.name());
                let mut note = None;
                if mech == MechanismKind::EndToEnd {
                    let n = (k + 1).div_ceil(cfg.bn_shards) * cfg.bn_shards;
                    if n > cfg.max_batch {
                        note = Some(format!("skipped: N={n} exceeds the memory budget max_batch={}", cfg.max_batch));
                    } else if train_len(&cfg).is_some_and(|t| n > t) {
                        note = Some(format!("skipped: N={n} exceeds the training split"));
                    }
                    cfg.batch_size = n;
                } else {
                    cfg.queue_size = k;
                    if mech == MechanismKind::Moco && k < cfg.batch_size {
                        note = Some(format!("skipped: the queue (K={k}) must hold a batch (N={})", cfg.batch_size));
                    }
                }
                let mut cell = planned(mech, k as f64, seed, dir, cfg);
                if note.is_some() {
                    cell.note = note;
                }
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

pub fn sweep_k(
    base: &ExperimentConfig,
    ks: &[usize],
    mechanisms: &[MechanismKind],
    seeds: &[u64],
    root: &Path,
) -> Result<SweepTable> {
    let cells = plan_sweep_k(base, ks, mechanisms, seeds)?;
    finish_sweep(root, Axis::K, cells)
}

/// One MoCo run per (m, seed).
pub fn sweep_momentum(base: &ExperimentConfig, ms: &[f64], seeds: &[u64], root: &Path) -> Result<SweepTable> {
    if ms.is_empty() || ms.iter().any(|m| !(0.0..1.0).contains(m)) {
        return Err(Error::Config(format!("momenta must lie in [0, 1), got {ms:?}")));
    }
    if seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one seed".into()));
    }
    let mut cells = Vec::new();
    for &m in ms {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.mechanism = MechanismKind::Moco;
            cfg.momentum = m;
            cfg.seed = seed;
            cells.push(planned(MechanismKind::Moco, m, seed, format!("m{m}/seed{seed}"), cfg));
        }
    }
    finish_sweep(root, Axis::Momentum, cells)
}

/// Paired shuffle-on/off runs and their per-epoch curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub table: SweepTable,
    /// One pair of curves per seed.
    pub curves: Vec<(u64, LeakageCurves)>,
}

pub const CURVES_FILE: &str = "curves.json";

/// Two runs per seed differing only in the shuffle flag.
pub fn ablate_shuffle_bn(base: &ExperimentConfig, seeds: &[u64], root: &Path) -> Result<Ablation> {
    if !base.encoder.use_bn || base.bn_shards < 2 {
        return Err(Error::Config("the shuffle-BN ablation needs a BN encoder and bn_shards ≥ 2".into()));
    }
    if base.mechanism == MechanismKind::MemoryBank {
        return Err(Error::Config("the memory bank has no key encoder to shuffle".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one seed".into()));
    }
    let mut cells = Vec::new();
    for &seed in seeds {
        for shuffle in [true, false] {
            let mut cfg = base.clone();
            cfg.shuffle_bn = shuffle;
            cfg.seed = seed;
            let tag = if shuffle { "shuffle" } else { "no_shuffle" };
            cells.push(planned(cfg.mechanism, f64::from(u8::from(shuffle)), seed, format!("{tag}/seed{seed}"), cfg));
        }
    }
    let table = finish_sweep(root, Axis::ShuffleBn, cells)?;
    let curves = leakage_curves(root)?;
    std::fs::write(
        root.join(CURVES_FILE),
        serde_json::to_string_pretty(&curves).expect("curves serialize"),
    )?;
    Ok(Ablation { table, curves })
}

/// Per-seed paired curves, recomputed from the metrics files of an ablation.
pub fn leakage_curves(root: &Path) -> Result<Vec<(u64, LeakageCurves)>> {
    let text = std::fs::read_to_string(root.join(MANIFEST_FILE))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad sweep manifest: {e}")))?;
    let mut by_seed: BTreeMap<u64, LeakageCurves> = BTreeMap::new();
    for cell in &manifest.cells {
        let path = root.join(&cell.dir).join(METRICS_FILE);
        if cell.note.is_some() || !path.exists() {
            continue;
        }
        let f = MetricsFile::read(&path)?;
        let rows: Vec<LeakageRow> = f
            .epoch_curve()
            .into_iter()
            .map(|(epoch, pretext_acc, knn_val_acc)| LeakageRow {
                epoch,
                pretext_acc,
                knn_val_acc,
            })
            .collect();
        let entry = by_seed.entry(cell.seed).or_default();
        if f.header.shuffle_bn {
            entry.with_shuffle = rows;
        } else {
            entry.without_shuffle = rows;
        }
    }
    Ok(by_seed.into_iter().collect())
}
