use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::contrastive::{
    EndToEndState, KeyQueue, Mechanism, MechanismKind, MemoryBank, MemoryBankState, MocoState, StepMetrics,
};
use crate::data::{load_idx, make_views, minibatches, stream_rng, synth_clusters, Dataset};
use crate::encoder::{build_pair, Encoder};
use crate::engine::{Sgd, Tensor};
use crate::error::{Error, Result};
use crate::eval::{extract_features, knn_monitor, linear_probe, ProbeResult};
use crate::scalar::Scalar;
use crate::shuffled_bn::ShardSpec;

use super::checkpoint::{Checkpoint, RngState};
use super::config::{DataConfig, ExperimentConfig, Precision};
use super::metrics::{
    oscillation_score, MetricsHeader, MetricsRecord, MetricsWriter, RowKind, COLUMNS, METRICS_SCHEMA,
    METRICS_SCHEMA_VERSION, OSCILLATION_DIVERGENCE,
};

// Stream tags; paths of length 2 never collide with the 4-index view streams.
const INIT_STREAM: u64 = u64::MAX;
const STEP_STREAM: u64 = u64::MAX - 1;
const EPOCH_STREAM: u64 = u64::MAX - 2;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.dlck";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

/// Train and validation splits of the configured corpus.
pub fn load_data<T: Scalar>(cfg: &ExperimentConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    let (train, val) = match &cfg.data {
        DataConfig::Synthetic(s) => {
            s.validate()?;
            let all = synth_clusters::<T>(&s.spec)?;
            let (train, rest) = all.split(s.train);
            (train, rest.split(s.val).0)
        }
        DataConfig::Idx(p) => {
            // vectors are stored as 1 × d images
            let load = |img: &Path, lab: &Path| -> Result<Dataset<T>> {
                let ds = load_idx(img, Some(lab))?;
                let want = &cfg.encoder.input_shape;
                if ds.sample_shape() != want.as_slice() && ds.sample_len() == want.iter().product::<usize>() {
                    ds.with_sample_shape(want.clone())
                } else {
                    Ok(ds)
                }
            };
            (load(&p.train_images, &p.train_labels)?, load(&p.val_images, &p.val_labels)?)
        }
    };
    for ds in [&train, &val] {
        if ds.sample_shape() != cfg.encoder.input_shape.as_slice() {
            return Err(Error::Config(format!(
                "encoder input_shape {:?} differs from the data shape {:?}",
                cfg.encoder.input_shape,
                ds.sample_shape()
            )));
        }
    }
    if cfg.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training samples",
            cfg.batch_size,
            train.len()
        )));
    }
    if cfg.mechanism == MechanismKind::MemoryBank && cfg.queue_size + cfg.batch_size > train.len() {
        return Err(Error::Config("memory bank: K + N exceeds the training samples".into()));
    }
    if cfg.eval.knn_k > train.len() {
        return Err(Error::Config("eval.knn_k exceeds the training samples".into()));
    }
    Ok((train, val))
}

/// The three mechanisms behind one type, so runs and checkpoints can treat them alike.
#[derive(Clone, Debug)]
pub enum AnyMechanism<T> {
    Moco(MocoState<T>),
    EndToEnd(EndToEndState<T>),
    MemoryBank(MemoryBankState<T>),
}

impl<T: Scalar> AnyMechanism<T> {
    pub fn build(cfg: &ExperimentConfig, train_len: usize) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, &[INIT_STREAM, 0]);
        let opt = Sgd::new(
            T::lit(cfg.lr_at(0)),
            T::lit(cfg.optimizer.momentum),
            T::lit(cfg.optimizer.weight_decay),
        )?;
        let shards = ShardSpec::new(cfg.bn_shards)?;
        let tau = T::lit(cfg.temperature);
        let c = cfg.encoder.feature_dim;
        Ok(match cfg.mechanism {
            MechanismKind::Moco => {
                let (f_q, f_k) = build_pair(cfg.encoder.clone(), &mut rng)?;
                let queue = KeyQueue::new(cfg.queue_size, c, cfg.queue_init, &mut stream_rng(cfg.seed, &[INIT_STREAM, 1]))?;
                let mut s = MocoState::new(f_q, f_k, queue, T::lit(cfg.momentum), tau, opt, shards, cfg.shuffle_bn)?;
                s.bn_buffers = cfg.bn_buffers;
                AnyMechanism::Moco(s)
            }
            MechanismKind::EndToEnd => {
                let f_q = Encoder::new(cfg.encoder.clone(), &mut rng)?;
                AnyMechanism::EndToEnd(if cfg.two_tower {
                    EndToEndState::two_tower(f_q, tau, opt, shards, cfg.shuffle_bn)?
                } else {
                    EndToEndState::shared(f_q, tau, opt, shards, cfg.shuffle_bn)?
                })
            }
            MechanismKind::MemoryBank => {
                let f_q = Encoder::new(cfg.encoder.clone(), &mut rng)?;
                let bank = MemoryBank::new(train_len, c, T::lit(cfg.bank_momentum), &mut stream_rng(cfg.seed, &[INIT_STREAM, 1]))?;
                AnyMechanism::MemoryBank(MemoryBankState::new(f_q, bank, cfg.queue_size, tau, opt, shards)?)
            }
        })
    }

    pub fn as_dyn(&self) -> &dyn Mechanism<T> {
        match self {
            AnyMechanism::Moco(s) => s,
            AnyMechanism::EndToEnd(s) => s,
            AnyMechanism::MemoryBank(s) => s,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn Mechanism<T> {
        match self {
            AnyMechanism::Moco(s) => s,
            AnyMechanism::EndToEnd(s) => s,
            AnyMechanism::MemoryBank(s) => s,
        }
    }
}

fn push_encoder<T: Scalar>(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, enc: &Encoder<T>) {
    for p in enc.params.iter() {
        out.push((format!("{prefix}/{}", p.name), p.value.cast()));
    }
    for (i, bn) in enc.bn.iter().enumerate() {
        out.push((format!("{prefix}/bn{i}/running_mean"), bn.running_mean.cast()));
        out.push((format!("{prefix}/bn{i}/running_var"), bn.running_var.cast()));
    }
}

fn push_velocity<T: Scalar>(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, opt: &Sgd<T>) {
    for (i, v) in opt.velocity().iter().enumerate() {
        if let Some(v) = v {
            out.push((format!("opt/{prefix}/{i}"), v.cast()));
        }
    }
}

fn restored<T: Scalar>(ck: &Checkpoint, name: &str, like: &Tensor<T>) -> Result<Tensor<T>> {
    let t = ck.tensor(name)?;
    if t.shape() != like.shape() {
        return Err(Error::Consistency(format!(
            "checkpoint tensor `{name}` has shape {:?}, the config implies {:?}",
            t.shape(),
            like.shape()
        )));
    }
    Ok(t.cast())
}

fn restore_encoder<T: Scalar>(ck: &Checkpoint, prefix: &str, enc: &mut Encoder<T>) -> Result<()> {
    for p in enc.params.iter_mut() {
        p.value = restored(ck, &format!("{prefix}/{}", p.name), &p.value)?;
    }
    for (i, bn) in enc.bn.iter_mut().enumerate() {
        bn.running_mean = restored(ck, &format!("{prefix}/bn{i}/running_mean"), &bn.running_mean)?;
        bn.running_var = restored(ck, &format!("{prefix}/bn{i}/running_var"), &bn.running_var)?;
    }
    let expected = enc.params.len() + enc.bn.len() * 2;
    let present = ck
        .tensors
        .iter()
        .filter(|(n, _)| n.strip_prefix(prefix).is_some_and(|r| r.starts_with('/')))
        .count();
    if present != expected {
        return Err(Error::Consistency(format!(
            "checkpoint holds {present} `{prefix}` tensors, the config implies {expected}"
        )));
    }
    Ok(())
}

fn restore_velocity<T: Scalar>(ck: &Checkpoint, prefix: &str, opt: &mut Sgd<T>, enc: &Encoder<T>) -> Result<()> {
    let v = enc
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let name = format!("opt/{prefix}/{i}");
            if ck.has_tensor(&name) {
                restored(ck, &name, &p.value).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    opt.set_velocity(v);
    Ok(())
}

fn steps_of(ck: &Checkpoint) -> Result<u64> {
    Ok(*ck
        .index("mechanism/step")?
        .first()
        .ok_or_else(|| Error::Consistency("empty mechanism/step".into()))?)
}

/// A run in progress: data, mechanism state and the position in the schedule.
pub struct Trainer<T: Scalar> {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub mech: AnyMechanism<T>,
    steps_per_epoch: usize,
    batches: Option<(usize, Vec<Vec<usize>>)>,
    diverged: Option<String>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, val) = load_data::<T>(cfg)?;
        let mech = AnyMechanism::build(cfg, train.len())?;
        Ok(Self {
            cfg: cfg.clone(),
            hash: cfg.hash(),
            steps_per_epoch: train.len() / cfg.batch_size,
            train,
            val,
            mech,
            batches: None,
            diverged: None,
        })
    }

    /// Fresh trainer for `cfg` with the state stored in `ck`.
    pub fn resume(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        if ck.rng.seed != cfg.seed {
            return Err(Error::Consistency(format!(
                "checkpoint was written by a run with seed {}, the config has seed {}",
                ck.rng.seed, cfg.seed
            )));
        }
        let step = steps_of(ck)?;
        let audit = ck.index("audit")?.to_vec();
        match &mut t.mech {
            AnyMechanism::Moco(s) => {
                restore_encoder(ck, "query", &mut s.f_q)?;
                restore_encoder(ck, "key", &mut s.f_k)?;
                restore_velocity(ck, "query", &mut s.opt, &s.f_q)?;
                let st = ck.index("queue/state")?;
                let written = ck
                    .index("queue/written_at")?
                    .iter()
                    .map(|&w| (w != u64::MAX).then_some(w))
                    .collect();
                let buf = restored(ck, "queue/buffer", s.queue.buffer())?;
                if st.len() != 2 {
                    return Err(Error::Consistency("queue/state must hold cursor and fill".into()));
                }
                s.queue = KeyQueue::restore(buf, st[0] as usize, st[1] as usize, written)?;
                s.step = step;
                restore_audit(&mut s.audit, &audit)?;
            }
            AnyMechanism::EndToEnd(s) => {
                restore_encoder(ck, "query", &mut s.f_q)?;
                restore_velocity(ck, "query", &mut s.opt, &s.f_q)?;
                if let Some((enc, opt)) = &mut s.key_tower {
                    restore_encoder(ck, "key", enc)?;
                    restore_velocity(ck, "key", opt, enc)?;
                }
                s.step = step;
                restore_audit(&mut s.audit, &audit)?;
            }
            AnyMechanism::MemoryBank(s) => {
                restore_encoder(ck, "query", &mut s.f_q)?;
                restore_velocity(ck, "query", &mut s.opt, &s.f_q)?;
                let feats = restored(ck, "bank/features", s.bank.features())?;
                let last = ck.index("bank/last_update")?.to_vec();
                s.bank = MemoryBank::restore(feats, s.bank.feature_momentum(), last)?;
                s.step = step;
                restore_audit(&mut s.audit, &audit)?;
            }
        }
        if ck.step != step || ck.rng.counter != step {
            return Err(Error::Consistency("checkpoint step counters disagree".into()));
        }
        if step > t.total_steps() {
            return Err(Error::Consistency(format!(
                "checkpoint is at step {step}, past the configured {} steps",
                t.total_steps()
            )));
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut indices = Vec::new();
        let mech = self.mech.as_dyn();
        match &self.mech {
            AnyMechanism::Moco(s) => {
                push_encoder(&mut tensors, "query", &s.f_q);
                push_encoder(&mut tensors, "key", &s.f_k);
                push_velocity(&mut tensors, "query", &s.opt);
                tensors.push(("queue/buffer".into(), s.queue.buffer().cast()));
                indices.push(("queue/state".into(), vec![s.queue.cursor() as u64, s.queue.filled() as u64]));
                indices.push((
                    "queue/written_at".into(),
                    s.queue.written_at().iter().map(|w| w.unwrap_or(u64::MAX)).collect(),
                ));
            }
            AnyMechanism::EndToEnd(s) => {
                push_encoder(&mut tensors, "query", &s.f_q);
                push_velocity(&mut tensors, "query", &s.opt);
                if let Some((enc, opt)) = &s.key_tower {
                    push_encoder(&mut tensors, "key", enc);
                    push_velocity(&mut tensors, "key", opt);
                }
            }
            AnyMechanism::MemoryBank(s) => {
                push_encoder(&mut tensors, "query", &s.f_q);
                push_velocity(&mut tensors, "query", &s.opt);
                tensors.push(("bank/features".into(), s.bank.features().cast()));
                indices.push(("bank/last_update".into(), s.bank.last_update_step().to_vec()));
            }
        }
        let a = mech.audit();
        indices.push(("mechanism/step".into(), vec![mech.step()]));
        indices.push((
            "audit".into(),
            vec![a.steps, a.key_recipient_events, a.query_recipient_events, a.key_grad_norm.to_bits()],
        ));
        Checkpoint {
            step: mech.step(),
            rng: RngState {
                seed: self.cfg.seed,
                counter: mech.step(),
            },
            config_json: self.cfg.to_json(),
            tensors,
            indices,
        }
    }

    pub fn step(&self) -> u64 {
        self.mech.as_dyn().step()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch * self.cfg.epochs) as u64
    }

    pub fn finished(&self) -> bool {
        self.diverged.is_some() || self.step() >= self.total_steps()
    }

    pub fn divergence(&self) -> Option<&str> {
        self.diverged.as_deref()
    }

    pub fn query_encoder(&self) -> &Encoder<T> {
        self.mech.as_dyn().query_encoder()
    }

    fn batch_ids(&mut self, epoch: usize, b: usize) -> Result<Vec<usize>> {
        if self.batches.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let seed = stream_rng(self.cfg.seed, &[EPOCH_STREAM, epoch as u64]).next_u64();
            self.batches = Some((epoch, minibatches(self.train.len(), self.cfg.batch_size, seed)?));
        }
        Ok(self.batches.as_ref().expect("just set").1[b].clone())
    }

    /// kNN accuracy of the query encoder's features, validation against train.
    pub fn knn(&self) -> Result<f64> {
        let enc = self.query_encoder();
        let tr = extract_features(enc, &self.train, self.cfg.eval.tap)?;
        let va = extract_features(enc, &self.val, self.cfg.eval.tap)?;
        knn_monitor(&tr, &va, self.cfg.eval.knn_k, self.cfg.eval.knn_temperature)
    }

    pub fn probe(&self) -> Result<ProbeResult> {
        let enc = self.query_encoder();
        let tr = extract_features(enc, &self.train, self.cfg.eval.tap)?;
        let va = extract_features(enc, &self.val, self.cfg.eval.tap)?;
        linear_probe(&tr, &va, &self.cfg.eval.probe_config)
    }

    /// One optimizer step, plus the epoch's eval row when it closes an epoch.
    /// A non-finite loss or gradient ends the run with a `diverged` row.
    pub fn advance(&mut self) -> Result<Vec<MetricsRecord>> {
        if self.finished() {
            return Ok(Vec::new());
        }
        let s = self.step();
        let spe = self.steps_per_epoch;
        let (epoch, b) = (s as usize / spe, s as usize % spe);
        let ids = self.batch_ids(epoch, b)?;
        let lr = self.cfg.lr_at(epoch);
        self.mech.as_dyn_mut().set_lr(T::lit(lr));
        let views = make_views(&self.train, &ids, &self.cfg.augmentation, self.cfg.seed, epoch as u64, b as u64);
        let mut rng = stream_rng(self.cfg.seed, &[STEP_STREAM, s]);
        let mut rows = Vec::new();
        match self.mech.as_dyn_mut().train_step(&views, &mut rng) {
            Ok(m) => rows.push(self.step_row(s, epoch, lr, &m)),
            Err(Error::Divergence(msg)) => {
                let mut r = MetricsRecord::empty(RowKind::Diverged, s, epoch);
                r.lr = Some(lr);
                r.knn_val_acc = self.knn().ok();
                rows.push(r);
                self.diverged = Some(msg);
                return Ok(rows);
            }
            Err(e) => return Err(e),
        }
        let done = b + 1 == spe;
        let every = self.cfg.eval.knn_every;
        if done && ((every > 0 && (epoch + 1) % every == 0) || epoch + 1 == self.cfg.epochs) {
            let mut r = MetricsRecord::empty(RowKind::Eval, s + 1, epoch);
            match self.knn() {
                Ok(acc) => {
                    r.knn_val_acc = Some(acc);
                    rows.push(r);
                }
                // finite loss, non-finite weights
                Err(Error::Divergence(msg)) => {
                    let mut r = MetricsRecord::empty(RowKind::Diverged, s + 1, epoch);
                    r.lr = Some(lr);
                    rows.push(r);
                    self.diverged = Some(msg);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(rows)
    }

    fn step_row(&self, step: u64, epoch: usize, lr: f64, m: &StepMetrics) -> MetricsRecord {
        MetricsRecord {
            kind: RowKind::Step,
            step,
            epoch,
            loss: Some(m.loss),
            pretext_acc: Some(m.pretext_acc),
            knn_val_acc: None,
            probe_acc: None,
            param_distance: Some(m.param_distance),
            key_age: Some(m.key_age),
            negatives: Some(m.negatives),
            lr: Some(lr),
            wall_ms: Some(if self.cfg.deterministic { 0.0 } else { m.wall_ms }),
        }
    }

    pub fn header(&self) -> MetricsHeader {
        MetricsHeader {
            schema: METRICS_SCHEMA.into(),
            schema_version: METRICS_SCHEMA_VERSION,
            config_hash: self.hash.clone(),
            mechanism: self.cfg.mechanism.name().into(),
            shuffle_bn: self.cfg.shuffle_bn,
            seed: self.cfg.seed,
            effective_k: self.cfg.effective_k(),
            momentum: self.cfg.momentum,
            batch_size: self.cfg.batch_size,
            epochs: self.cfg.epochs,
            columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
        }
    }
}

fn restore_audit(a: &mut crate::contrastive::GradAudit, v: &[u64]) -> Result<()> {
    if v.len() != 4 {
        return Err(Error::Consistency("audit record must hold 4 words".into()));
    }
    a.steps = v[0];
    a.key_recipient_events = v[1];
    a.query_recipient_events = v[2];
    a.key_grad_norm = f64::from_bits(v[3]);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunStatus {
    Converged,
    Diverged { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub mechanism: MechanismKind,
    pub seed: u64,
    pub steps: u64,
    pub status: RunStatus,
    pub final_loss: Option<f64>,
    pub oscillation: Option<f64>,
    pub final_knn: Option<f64>,
    pub probe: Option<ProbeResult>,
    pub warnings: Vec<String>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl RunSummary {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }
}

/// Where a run starts: from scratch or from a checkpoint.
pub enum Start<'a> {
    Fresh,
    Resume(&'a Checkpoint),
}

/// Train `cfg` to completion, writing metrics, a final checkpoint, the
/// resolved config and a summary into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    run_from(cfg, out, Start::Fresh, None)
}

/// Continue the run stored in `ck`; metrics cover only the resumed steps.
pub fn resume_experiment(cfg: &ExperimentConfig, ck: &Checkpoint, out: &Path) -> Result<RunSummary> {
    run_from(cfg, out, Start::Resume(ck), None)
}

/// Like [`run_experiment`] but stop after `stop_at` total steps (no probe unless the run completes).
pub fn run_from(cfg: &ExperimentConfig, out: &Path, start: Start<'_>, stop_at: Option<u64>) -> Result<RunSummary> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, out, start, stop_at),
        Precision::F64 => run_typed::<f64>(cfg, out, start, stop_at),
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, out: &Path, start: Start<'_>, stop_at: Option<u64>) -> Result<RunSummary> {
    let mut t = match start {
        Start::Fresh => Trainer::<T>::new(cfg)?,
        Start::Resume(ck) => Trainer::<T>::resume(cfg, ck)?,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_json_pretty())?;
    let metrics_path = out.join(METRICS_FILE);
    let mut w = MetricsWriter::create(&metrics_path, t.header())?;
    let limit = stop_at.unwrap_or(u64::MAX).min(t.total_steps());
    let mut losses = Vec::new();
    let mut final_knn = None;
    while !t.finished() && t.step() < limit {
        for r in t.advance()? {
            if let Some(l) = r.loss {
                losses.push(l);
            }
            if r.knn_val_acc.is_some() {
                final_knn = r.knn_val_acc;
            }
            w.write(&r)?;
        }
    }
    let mut probe = None;
    if t.divergence().is_none() && t.step() >= t.total_steps() && cfg.eval.probe {
        let p = t.probe()?;
        let mut r = MetricsRecord::empty(RowKind::Probe, t.step(), cfg.epochs - 1);
        r.probe_acc = Some(p.accuracy);
        w.write(&r)?;
        probe = Some(p);
    }
    w.finish()?;
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    t.checkpoint().save(&checkpoint_path)?;
    let oscillation = oscillation_score(&losses);
    let status = match (t.divergence(), oscillation) {
        (Some(msg), _) => RunStatus::Diverged {
            reason: format!("non-finite values: {msg}"),
        },
        (None, Some(o)) if o > OSCILLATION_DIVERGENCE => RunStatus::Diverged {
            reason: format!("oscillation score {o:.3} above {OSCILLATION_DIVERGENCE}"),
        },
        _ => RunStatus::Converged,
    };
    let summary = RunSummary {
        config_hash: t.hash.clone(),
        mechanism: cfg.mechanism,
        seed: cfg.seed,
        steps: t.step(),
        status,
        final_loss: losses.last().copied(),
        oscillation,
        final_knn,
        probe,
        warnings: cfg.warnings(),
        metrics_path,
        checkpoint_path,
    };
    std::fs::write(
        out.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

/// Query encoder stored in a checkpoint, with the config it was trained under.
pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<(ExperimentConfig, Encoder<f64>)> {
    let cfg = ExperimentConfig::from_json(&ck.config_json)
        .map_err(|e| Error::Format(format!("checkpoint config is unreadable: {e}")))?;
    let mut enc = Encoder::<f64>::new(cfg.encoder.clone(), &mut stream_rng(0, &[]))?;
    restore_encoder(ck, "query", &mut enc)?;
    Ok((cfg, enc))
}
