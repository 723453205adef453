use std::time::Instant;

use rand::RngCore;

use crate::data::BatchViews;
use crate::encoder::{param_distance, Encoder};
use crate::engine::{BnMode, Sgd, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shuffled_bn::{make_shuffle, shuffled_forward, ShardSpec};

use super::{finite_loss, infonce_loss, logits_in_batch, pretext_accuracy, GradAudit, Mechanism, MechanismKind, StepMetrics};

/// In-batch keys with gradients flowing through both towers.
///
/// With `key_tower = None` the towers share the query encoder's weights.
#[derive(Clone, Debug)]
pub struct EndToEndState<T> {
    pub f_q: Encoder<T>,
    pub key_tower: Option<(Encoder<T>, Sgd<T>)>,
    pub tau: T,
    pub opt: Sgd<T>,
    pub shards: ShardSpec,
    pub shuffle_bn: bool,
    pub step: u64,
    pub audit: GradAudit,
}

impl<T: Scalar> EndToEndState<T> {
    pub fn shared(f_q: Encoder<T>, tau: T, opt: Sgd<T>, shards: ShardSpec, shuffle_bn: bool) -> Result<Self> {
        if !(tau > T::zero()) {
            return Err(Error::contract(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self {
            f_q,
            key_tower: None,
            tau,
            opt,
            shards,
            shuffle_bn,
            step: 0,
            audit: GradAudit::default(),
        })
    }

    /// Separate, trainable key tower starting from a copy of the query encoder.
    pub fn two_tower(f_q: Encoder<T>, tau: T, opt: Sgd<T>, shards: ShardSpec, shuffle_bn: bool) -> Result<Self> {
        let mut s = Self::shared(f_q, tau, opt.clone(), shards, shuffle_bn)?;
        s.key_tower = Some((s.f_q.clone(), opt));
        Ok(s)
    }
}

impl<T: Scalar> Mechanism<T> for EndToEndState<T> {
    fn kind(&self) -> MechanismKind {
        MechanismKind::EndToEnd
    }

    fn train_step(&mut self, views: &BatchViews<T>, rng: &mut dyn RngCore) -> Result<StepMetrics> {
        let start = Instant::now();
        let n = views.x_q.rows();
        if n < 2 {
            return Err(Error::contract("end-to-end needs N ≥ 2"));
        }
        let slices = self.shards.slices(n)?;
        let mut tape = Tape::new();
        let x_q = tape.constant(views.x_q.clone());
        let (q_out, q_handles) = self.f_q.forward(&mut tape, x_q, BnMode::Train(&slices), "query")?;

        let plan = if self.shuffle_bn { Some(make_shuffle(n, rng)?) } else { None };
        let key_enc = match &mut self.key_tower {
            Some((enc, _)) => enc,
            None => &mut self.f_q,
        };
        let (k, _, k_handles) = shuffled_forward(key_enc, &mut tape, &views.x_k, plan.as_ref(), self.shards, "key")?;

        let logits = logits_in_batch(&mut tape, q_out.features, k, self.tau)?;
        let loss = infonce_loss(&mut tape, logits)?;
        let loss_value = finite_loss(&tape, loss)?;
        let pretext_acc = pretext_accuracy(tape.value(logits));

        let grads = tape.backward(loss)?;
        self.audit.record(&grads);
        self.f_q.params.accumulate(&grads, &q_handles)?;
        let param_distance = match &mut self.key_tower {
            Some((enc, opt)) => {
                enc.params.accumulate(&grads, &k_handles)?;
                opt.step(&mut enc.params)?;
                self.opt.step(&mut self.f_q.params)?;
                param_distance(&self.f_q, enc)?.as_f64()
            }
            None => {
                self.f_q.params.accumulate(&grads, &k_handles)?;
                self.opt.step(&mut self.f_q.params)?;
                0.0
            }
        };
        self.step += 1;
        Ok(StepMetrics {
            loss: loss_value,
            pretext_acc,
            param_distance,
            key_age: 0.0,
            negatives: n - 1,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn query_encoder(&self) -> &Encoder<T> {
        &self.f_q
    }

    fn set_lr(&mut self, lr: T) {
        self.opt.lr = lr;
        if let Some((_, opt)) = &mut self.key_tower {
            opt.lr = lr;
        }
    }

    fn step(&self) -> u64 {
        self.step
    }

    fn audit(&self) -> &GradAudit {
        &self.audit
    }
}
