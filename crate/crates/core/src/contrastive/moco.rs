use std::time::Instant;

use rand::RngCore;

use crate::data::BatchViews;
use crate::encoder::{momentum_update, param_distance, BnBufferPolicy, Encoder};
use crate::engine::{BnMode, Sgd, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shuffled_bn::{make_shuffle, shuffled_forward, ShardSpec};

use super::{finite_loss, infonce_loss, logits_moco, pretext_accuracy, GradAudit, KeyQueue, Mechanism, MechanismKind, StepMetrics};

/// Query encoder, momentum key encoder and the key queue.
#[derive(Clone, Debug)]
pub struct MocoState<T> {
    pub f_q: Encoder<T>,
    pub f_k: Encoder<T>,
    pub queue: KeyQueue<T>,
    pub m: T,
    pub tau: T,
    pub opt: Sgd<T>,
    pub shards: ShardSpec,
    pub shuffle_bn: bool,
    pub bn_buffers: BnBufferPolicy,
    pub step: u64,
    pub audit: GradAudit,
}

impl<T: Scalar> MocoState<T> {
    pub fn new(
        f_q: Encoder<T>,
        f_k: Encoder<T>,
        queue: KeyQueue<T>,
        m: T,
        tau: T,
        opt: Sgd<T>,
        shards: ShardSpec,
        shuffle_bn: bool,
    ) -> Result<Self> {
        if !(m >= T::zero() && m < T::one()) {
            return Err(Error::contract(format!("momentum must be in [0, 1), got {m}")));
        }
        if !(tau > T::zero()) {
            return Err(Error::contract(format!("temperature must be positive, got {tau}")));
        }
        if queue.dim() != f_q.config.feature_dim {
            return Err(Error::contract("queue dimension differs from the feature dimension"));
        }
        Ok(Self {
            f_q,
            f_k,
            queue,
            m,
            tau,
            opt,
            shards,
            shuffle_bn,
            bn_buffers: BnBufferPolicy::default(),
            step: 0,
            audit: GradAudit::default(),
        })
    }
}

impl<T: Scalar> Mechanism<T> for MocoState<T> {
    fn kind(&self) -> MechanismKind {
        MechanismKind::Moco
    }

    /// Query pass, shuffled key pass (detached), InfoNCE against the queue,
    /// SGD on the query encoder, momentum update of the key encoder, enqueue.
    fn train_step(&mut self, views: &BatchViews<T>, rng: &mut dyn RngCore) -> Result<StepMetrics> {
        let start = Instant::now();
        let n = views.x_q.rows();
        let slices = self.shards.slices(n)?;
        let mut tape = Tape::new();

        let x_q = tape.constant(views.x_q.clone());
        let (q_out, q_handles) = self.f_q.forward(&mut tape, x_q, BnMode::Train(&slices), "query")?;

        let plan = if self.shuffle_bn { Some(make_shuffle(n, rng)?) } else { None };
        let (k, _, _) = shuffled_forward(&mut self.f_k, &mut tape, &views.x_k, plan.as_ref(), self.shards, "key")?;
        let k = tape.detach(k);

        let key_age = self.queue.mean_age(self.step);
        let (logits, negatives) = match self.queue.negatives() {
            Some(neg) => (logits_moco(&mut tape, q_out.features, k, &neg, self.tau)?, neg.shape()[1]),
            None => {
                // empty fill-first queue: the positive is the only candidate
                let l_pos = tape.batched_dot(q_out.features, k)?;
                (tape.scale(l_pos, T::one() / self.tau), 0)
            }
        };
        let loss = infonce_loss(&mut tape, logits)?;
        let loss_value = finite_loss(&tape, loss)?;
        let pretext_acc = pretext_accuracy(tape.value(logits));

        let grads = tape.backward(loss)?;
        self.audit.record(&grads);
        self.f_q.params.accumulate(&grads, &q_handles)?;
        self.opt.step(&mut self.f_q.params)?;
        momentum_update(&mut self.f_k, &self.f_q, self.m, self.bn_buffers)?;
        self.queue.enqueue(tape.value(k), self.step)?;
        self.step += 1;

        Ok(StepMetrics {
            loss: loss_value,
            pretext_acc,
            param_distance: param_distance(&self.f_q, &self.f_k)?.as_f64(),
            key_age,
            negatives,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn query_encoder(&self) -> &Encoder<T> {
        &self.f_q
    }

    fn set_lr(&mut self, lr: T) {
        self.opt.lr = lr;
    }

    fn step(&self) -> u64 {
        self.step
    }

    fn audit(&self) -> &GradAudit {
        &self.audit
    }
}
