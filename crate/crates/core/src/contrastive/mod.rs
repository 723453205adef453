//! InfoNCE over a dictionary of keys, and the three ways of maintaining that
//! dictionary: a momentum-encoded FIFO queue, in-batch end-to-end keys, and a
//! per-sample memory bank.
//!
//! All three consume the same [`BatchViews`] and report the same
//! [`StepMetrics`]; they differ only in where the negatives come from and which
//! parameters receive gradients.

mod bank;
mod end_to_end;
mod memory_bank;
mod moco;
mod queue;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::BatchViews;
use crate::encoder::Encoder;
use crate::engine::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use bank::{MemoryBank, DEFAULT_BANK_MOMENTUM};
pub use end_to_end::EndToEndState;
pub use memory_bank::MemoryBankState;
pub use moco::MocoState;
pub use queue::{KeyQueue, QueueInit, DEFAULT_QUEUE_SIZE};

/// Softmax temperature applied to similarities.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Key-encoder momentum.
pub const DEFAULT_MOMENTUM: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Moco,
    EndToEnd,
    MemoryBank,
}

impl MechanismKind {
    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Moco => "moco",
            MechanismKind::EndToEnd => "end_to_end",
            MechanismKind::MemoryBank => "memory_bank",
        }
    }
}

/// What one train step reports, identical across mechanisms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    /// Fraction of rows whose largest logit is the positive.
    pub pretext_acc: f64,
    /// Distance between query and key encoder parameters (0 when they coincide).
    pub param_distance: f64,
    /// Mean age in steps of the negatives used (queue columns or bank rows).
    pub key_age: f64,
    /// Negatives per query.
    pub negatives: usize,
    pub wall_ms: f64,
}

/// Running tally of which parameter groups received gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradAudit {
    pub steps: u64,
    /// Sum over steps of the gradient norm that reached `key/…` leaves.
    pub key_grad_norm: f64,
    /// Number of (step, leaf) events where a `key/…` leaf received a gradient.
    pub key_recipient_events: u64,
    pub query_recipient_events: u64,
}

impl GradAudit {
    pub(crate) fn record<T: Scalar>(&mut self, grads: &Gradients<T>) {
        self.steps += 1;
        for (label, norm) in grads.recipients() {
            if label.starts_with("key/") {
                self.key_recipient_events += 1;
                self.key_grad_norm += norm.as_f64();
            } else {
                self.query_recipient_events += 1;
            }
        }
    }
}

/// A contrastive training mechanism driven one minibatch at a time.
pub trait Mechanism<T: Scalar> {
    fn kind(&self) -> MechanismKind;
    fn train_step(&mut self, views: &BatchViews<T>, rng: &mut dyn RngCore) -> Result<StepMetrics>;
    /// Encoder whose features are evaluated.
    fn query_encoder(&self) -> &Encoder<T>;
    fn set_lr(&mut self, lr: T);
    fn step(&self) -> u64;
    fn audit(&self) -> &GradAudit;
}

/// `N × (1+K)` logits: column 0 is `q·k₊`, columns `1..` are `q·queue`; all divided by `tau`.
///
/// `k_pos` and `negatives` (`C × K`) must not require gradients.
pub fn logits_moco<T: Scalar>(tape: &mut Tape<T>, q: Var, k_pos: Var, negatives: &Tensor<T>, tau: T) -> Result<Var> {
    if tape.requires_grad(k_pos) {
        return Err(Error::contract("positive keys must be detached"));
    }
    if !(tau > T::zero()) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let c = tape.value(q).shape().get(1).copied().unwrap_or(0);
    if negatives.rank() != 2 || negatives.shape()[0] != c {
        return Err(Error::dim("logits_moco", tape.value(q).shape(), negatives.shape()));
    }
    let l_pos = tape.batched_dot(q, k_pos)?;
    let queue = tape.constant(negatives.clone());
    let l_neg = tape.matmul(q, queue)?;
    let logits = tape.concat_cols(&[l_pos, l_neg])?;
    Ok(tape.scale(logits, T::one() / tau))
}

/// `N × N` in-batch logits in positive-first layout: row `i` is
/// `[q_i·k_i, q_i·k_j for j ≠ i]`, divided by `tau`. Both sides may carry gradients.
pub fn logits_in_batch<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, tau: T) -> Result<Var> {
    let n = tape.value(q).rows();
    if n < 2 {
        return Err(Error::contract("in-batch negatives need N ≥ 2"));
    }
    let sim = tape.matmul_nt(q, k)?;
    let flat = tape.reshape(sim, vec![n * n, 1])?;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        index.push(i * n + i);
        index.extend((0..n).filter(|&j| j != i).map(|j| i * n + j));
    }
    let gathered = tape.gather_rows(flat, &index)?;
    let logits = tape.reshape(gathered, vec![n, n])?;
    Ok(tape.scale(logits, T::one() / tau))
}

/// Cross-entropy with the positive at column 0, averaged over rows.
pub fn infonce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let n = tape.value(logits).rows();
    tape.softmax_cross_entropy(logits, &vec![0; n])
}

/// Fraction of rows whose first maximum is at column 0.
pub fn pretext_accuracy<T: Scalar>(logits: &Tensor<T>) -> f64 {
    let n = logits.rows();
    let hits = (0..n)
        .filter(|&i| {
            let row = logits.row(i);
            row[1..].iter().all(|&v| v <= row[0])
        })
        .count();
    hits as f64 / n as f64
}

pub(crate) fn finite_loss<T: Scalar>(tape: &Tape<T>, loss: Var) -> Result<f64> {
    let l = tape.value(loss).data()[0].as_f64();
    if l.is_finite() {
        Ok(l)
    } else {
        Err(Error::Divergence(format!("loss is {l}")))
    }
}
