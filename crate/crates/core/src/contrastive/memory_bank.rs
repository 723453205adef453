use std::time::Instant;

use rand::RngCore;

use crate::data::BatchViews;
use crate::encoder::Encoder;
use crate::engine::{BnMode, Sgd, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shuffled_bn::ShardSpec;

use super::{finite_loss, infonce_loss, pretext_accuracy, GradAudit, Mechanism, MechanismKind, MemoryBank, StepMetrics};

/// Query encoder plus a per-sample feature bank. Positives are the bank rows
/// of the batch's own samples; negatives are `k` other rows drawn at random.
#[derive(Clone, Debug)]
pub struct MemoryBankState<T> {
    pub f_q: Encoder<T>,
    pub bank: MemoryBank<T>,
    pub k: usize,
    pub tau: T,
    pub opt: Sgd<T>,
    pub shards: ShardSpec,
    pub step: u64,
    pub audit: GradAudit,
}

impl<T: Scalar> MemoryBankState<T> {
    pub fn new(f_q: Encoder<T>, bank: MemoryBank<T>, k: usize, tau: T, opt: Sgd<T>, shards: ShardSpec) -> Result<Self> {
        if !(tau > T::zero()) {
            return Err(Error::contract(format!("temperature must be positive, got {tau}")));
        }
        if bank.dim() != f_q.config.feature_dim {
            return Err(Error::contract("bank dimension differs from the feature dimension"));
        }
        Ok(Self {
            f_q,
            bank,
            k,
            tau,
            opt,
            shards,
            step: 0,
            audit: GradAudit::default(),
        })
    }
}

impl<T: Scalar> Mechanism<T> for MemoryBankState<T> {
    fn kind(&self) -> MechanismKind {
        MechanismKind::MemoryBank
    }

    fn train_step(&mut self, views: &BatchViews<T>, rng: &mut dyn RngCore) -> Result<StepMetrics> {
        let start = Instant::now();
        let n = views.x_q.rows();
        if self.k + n > self.bank.len() {
            return Err(Error::contract(format!(
                "K={} negatives with N={n} exceeds the bank size {}",
                self.k,
                self.bank.len()
            )));
        }
        let slices = self.shards.slices(n)?;
        let mut tape = Tape::new();
        let x_q = tape.constant(views.x_q.clone());
        let (q_out, q_handles) = self.f_q.forward(&mut tape, x_q, BnMode::Train(&slices), "query")?;
        let q = q_out.features;

        let positives = tape.constant(self.bank.rows(&views.ids));
        let (negatives, neg_ids) = self.bank.sample_negatives(&views.ids, self.k, rng)?;
        let key_age = self.bank.staleness(&neg_ids, self.step);
        let negatives = tape.constant(negatives);

        let l_pos = tape.batched_dot(q, positives)?;
        let l_neg = tape.matmul_nt(q, negatives)?;
        let logits = tape.concat_cols(&[l_pos, l_neg])?;
        let logits = tape.scale(logits, T::one() / self.tau);
        let loss = infonce_loss(&mut tape, logits)?;
        let loss_value = finite_loss(&tape, loss)?;
        let pretext_acc = pretext_accuracy(tape.value(logits));

        let grads = tape.backward(loss)?;
        self.audit.record(&grads);
        self.f_q.params.accumulate(&grads, &q_handles)?;
        self.opt.step(&mut self.f_q.params)?;
        self.bank.update(&views.ids, tape.value(q), self.step)?;
        self.step += 1;

        Ok(StepMetrics {
            loss: loss_value,
            pretext_acc,
            param_distance: 0.0,
            key_age,
            negatives: self.k,
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
