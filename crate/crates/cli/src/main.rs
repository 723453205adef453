use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mocolab_core::data::write_idx;
use mocolab_core::eval::{extract_features, knn_monitor, linear_probe, Tap};
use mocolab_core::gradcheck;
use mocolab_core::harness::{
    ablate_shuffle_bn, encoder_from_checkpoint, load_data, resume_experiment, run_experiment, sweep_k,
    sweep_momentum, Checkpoint, DataConfig, ExperimentConfig, IdxPaths, SweepTable, SyntheticData,
};
use mocolab_core::{Error, MechanismKind, Result};

#[derive(Parser)]
#[command(name = "mocolab", version, about = "Contrastive dictionary learning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Zero wall-clock columns so the metrics file is a pure function of the config.
        #[arg(long)]
        deterministic: bool,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Dictionary-size sweep.
    SweepK {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "moco,end_to_end,memory_bank")]
        mechanisms: Vec<String>,
        #[command(flatten)]
        seeds: Seeds,
    },
    /// Key-encoder momentum sweep (MoCo only).
    SweepM {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        ms: Vec<f64>,
        #[command(flatten)]
        seeds: Seeds,
    },
    /// Paired runs with and without shuffled BN.
    AblateBn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
    },
    /// Rebuild a sweep table from the sweep directory's metrics files.
    Table {
        #[arg(long)]
        sweep: PathBuf,
    },
    /// Evaluate the query encoder stored in a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A directory written by `gen-data`, or a JSON data config.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "knn")]
        probe: bool,
        #[arg(long)]
        knn: bool,
    },
    /// Analytic vs finite-difference gradients for every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Write a synthetic corpus as IDX files.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Seeds {
    /// Seeds per cell; defaults to the config's seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

impl Seeds {
    fn resolve(&self, cfg: &ExperimentConfig) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![cfg.seed]
        } else {
            self.seeds.clone()
        }
    }
}

fn out_dir(out: &Option<PathBuf>, kind: &str, cfg: &ExperimentConfig) -> PathBuf {
    out.clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{kind}-{}", &cfg.hash()[..12])))
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn mechanism(name: &str) -> Result<MechanismKind> {
    serde_json::from_value(serde_json::Value::String(name.trim().to_string()))
        .map_err(|_| Error::Config(format!("unknown mechanism `{name}` (moco, end_to_end, memory_bank)")))
}

fn data_source(path: &Path) -> Result<DataConfig> {
    if path.is_dir() {
        return Ok(DataConfig::Idx(IdxPaths::in_dir(path)));
    }
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str::<DataConfig>(&text)
        .or_else(|_| serde_json::from_str::<SyntheticData>(&text).map(DataConfig::Synthetic))
        .map_err(|e| Error::Config(format!("{}: not a data config: {e}", path.display())))
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Train {
            common,
            seed,
            deterministic,
            resume,
        } => {
            let mut cfg = ExperimentConfig::load(&common.config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.deterministic |= deterministic;
            cfg.validate()?;
            for w in cfg.warnings() {
                eprintln!("warning: {w}");
            }
            let out = out_dir(&common.out, "train", &cfg);
            let summary = match resume {
                Some(p) => resume_experiment(&cfg, &Checkpoint::load(&p)?, &out)?,
                None => run_experiment(&cfg, &out)?,
            };
            print_json(&summary);
            Ok(if summary.diverged() { 3 } else { 0 })
        }
        Cmd::SweepK {
            common,
            ks,
            mechanisms,
            seeds,
        } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let mechs = mechanisms.iter().map(|m| mechanism(m)).collect::<Result<Vec<_>>>()?;
            let out = out_dir(&common.out, "sweep-k", &cfg);
            let table = sweep_k(&cfg, &ks, &mechs, &seeds.resolve(&cfg), &out)?;
            print!("{}", table.render());
            eprintln!("results in {}", out.display());
            Ok(0)
        }
        Cmd::SweepM { common, ms, seeds } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let out = out_dir(&common.out, "sweep-m", &cfg);
            let table = sweep_momentum(&cfg, &ms, &seeds.resolve(&cfg), &out)?;
            print!("{}", table.render());
            eprintln!("results in {}", out.display());
            Ok(0)
        }
        Cmd::AblateBn { common, seeds } => {
            let cfg = ExperimentConfig::load(&common.config)?;
            let out = out_dir(&common.out, "ablate-bn", &cfg);
            let ab = ablate_shuffle_bn(&cfg, &seeds.resolve(&cfg), &out)?;
            print!("{}", ab.table.render());
            for (seed, c) in &ab.curves {
                println!("seed {seed}: epoch, pretext(shuffle), knn(shuffle), pretext(no shuffle), knn(no shuffle)");
                for (a, b) in c.with_shuffle.iter().zip(&c.without_shuffle) {
                    println!(
                        "  {:>3} {:.4} {:.4} {:.4} {:.4}",
                        a.epoch, a.pretext_acc, a.knn_val_acc, b.pretext_acc, b.knn_val_acc
                    );
                }
            }
            eprintln!("results in {}", out.display());
            Ok(0)
        }
        Cmd::Table { sweep } => {
            print!("{}", SweepTable::from_dir(&sweep)?.render());
            Ok(0)
        }
        Cmd::Eval {
            checkpoint,
            data,
            probe,
            knn: _,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (mut cfg, enc) = encoder_from_checkpoint(&ck)?;
            cfg.data = data_source(&data)?;
            let (train, val) = load_data::<f64>(&cfg)?;
            let tap: Tap = cfg.eval.tap;
            let tr = extract_features(&enc, &train, tap)?;
            let va = extract_features(&enc, &val, tap)?;
            if probe {
                print_json(&linear_probe(&tr, &va, &cfg.eval.probe_config)?);
            } else {
                let acc = knn_monitor(&tr, &va, cfg.eval.knn_k, cfg.eval.knn_temperature)?;
                print_json(&serde_json::json!({ "knn_val_acc": acc, "k": cfg.eval.knn_k }));
            }
            Ok(0)
        }
        Cmd::Gradcheck { seed, instances } => {
            let reports = gradcheck::run_suite(seed, instances)?;
            let mut ok = true;
            for r in &reports {
                println!(
                    "{:<24} {:>3} instances  max rel err {:.3e}  (tol {:.0e})  {}",
                    r.op,
                    r.instances,
                    r.max_rel_err,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                ok &= r.passed();
            }
            Ok(if ok { 0 } else { 1 })
        }
        Cmd::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec)?;
            let s: SyntheticData = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            s.validate()?;
            let mut cfg = ExperimentConfig::default();
            cfg.encoder.input_shape = s.spec.shape.clone();
            cfg.batch_size = 2;
            cfg.eval.knn_k = 1;
            cfg.data = DataConfig::Synthetic(s);
            let (train, val) = load_data::<f64>(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let p = IdxPaths::in_dir(&out);
            write_idx(&train, &p.train_images, Some(&p.train_labels))?;
            write_idx(&val, &p.val_images, Some(&p.val_labels))?;
            eprintln!("wrote {} train and {} val samples to {}", train.len(), val.len(), out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
