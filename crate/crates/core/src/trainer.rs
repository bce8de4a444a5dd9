// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam training loop for an SAE pair around a frozen MLP.
//!
//! Learning rate: linear warm-up over the first `warmup_frac` of steps,
//! constant, then linear decay to zero over the final `decay_frac`. The
//! Jacobian coefficient ramps linearly from 0 over `lambda_warmup_frac`.
//! Decoder columns are projected back to unit norm after every update.

use ndarray::{ArrayD, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{JsaeError, Result};
use crate::loss::{evaluate_batch, LossBreakdown, SaeGradients};
use crate::mlp::MlpParams;
use crate::sae::{DeadLatentTracker, SaePair};
use crate::synthetic::ActivationSource;

/// Schedule and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_frac: f64,
    pub decay_frac: f64,
    pub lambda: f64,
    pub lambda_warmup_frac: f64,
    pub batch_tokens: usize,
    pub buffer_batches: usize,
    pub total_tokens: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub dead_window_tokens: u64,
    /// Worker threads for per-token work; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 5e-4,
            warmup_frac: 0.01,
            decay_frac: 0.20,
            lambda: 1.0,
            lambda_warmup_frac: 0.05,
            batch_tokens: 1024,
            buffer_batches: 32,
            total_tokens: 200_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            dead_window_tokens: 50_000,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(JsaeError::invalid(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        frac("warmup_frac", self.warmup_frac)?;
        frac("decay_frac", self.decay_frac)?;
        frac("lambda_warmup_frac", self.lambda_warmup_frac)?;
        if self.warmup_frac + self.decay_frac > 1.0 {
            return Err(JsaeError::invalid("warmup_frac + decay_frac must not exceed 1"));
        }
        for (name, v) in [
            ("batch_tokens", self.batch_tokens),
            ("buffer_batches", self.buffer_batches),
            ("total_tokens", self.total_tokens),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return Err(JsaeError::invalid(format!("{name} must be positive")));
            }
        }
        if self.dead_window_tokens == 0 {
            return Err(JsaeError::invalid("dead_window_tokens must be positive"));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(JsaeError::invalid("lr_max must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(JsaeError::invalid("lambda must be finite and ≥ 0"));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return Err(JsaeError::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(JsaeError::invalid("adam_eps must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_tokens / self.batch_tokens
    }
}

fn phase_steps(frac: f64, total_steps: usize) -> usize {
    (frac * total_steps as f64).round() as usize
}

/// Learning rate at `step` of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = phase_steps(cfg.warmup_frac, total_steps);
    let decay = phase_steps(cfg.decay_frac, total_steps);
    let mut scale: f64 = 1.0;
    if warmup > 0 {
        scale = scale.min(step as f64 / warmup as f64);
    }
    if decay > 0 {
        let remaining = total_steps.saturating_sub(step) as f64;
        scale = scale.min(remaining / decay as f64);
    }
    cfg.lr_max * scale.clamp(0.0, 1.0)
}

/// Jacobian coefficient at `step` of `total_steps`.
pub fn lambda_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = phase_steps(cfg.lambda_warmup_frac, total_steps);
    if warmup == 0 {
        return cfg.lambda;
    }
    cfg.lambda * (step as f64 / warmup as f64).min(1.0)
}

/// First and second moment estimates for every SAE tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<ArrayD<f64>>,
    pub second: Vec<ArrayD<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(pair: &SaePair, cfg: &TrainConfig) -> Self {
        let zeros: Vec<ArrayD<f64>> = pair
            .named_tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            second: zeros.clone(),
            first: zeros,
            step: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// One bias-corrected Adam update of `pair` in place.
pub fn adam_step(state: &mut AdamState, pair: &mut SaePair, grads: &SaeGradients, lr: f64) -> Result<()> {
    if !grads.shapes_match(pair) {
        return Err(JsaeError::invalid("gradient shapes do not match the SAE pair"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((mut p, g), m), v) in pair
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        Zip::from(&mut p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}

/// Metrics recorded for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub lambda: f64,
    pub mse_x: f64,
    pub mse_y: f64,
    pub jac_l1: f64,
    pub total: f64,
    pub dead_x: usize,
    pub dead_y: usize,
}

impl StepRecord {
    fn new(step: usize, lr: f64, loss: &LossBreakdown, dead_x: usize, dead_y: usize) -> Self {
        Self {
            step,
            lr,
            lambda: loss.lambda,
            mse_x: loss.mse_x,
            mse_y: loss.mse_y,
            jac_l1: loss.jac_l1,
            total: loss.total,
            dead_x,
            dead_y,
        }
    }
}

pub const TIMELINE_CSV_HEADER: &str = "step,lr,lambda,mse_x,mse_y,jac_l1,total,dead_x,dead_y";

/// Writes the metrics timeline as CSV. Floats use Rust's shortest
/// round-trip formatting, so equal runs give equal bytes.
pub fn write_timeline_csv(records: &[StepRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{TIMELINE_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
            r.step, r.lr, r.lambda, r.mse_x, r.mse_y, r.jac_l1, r.total, r.dead_x, r.dead_y
        )?;
    }
    Ok(())
}

/// Final state of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pair: SaePair,
    pub timeline: Vec<StepRecord>,
    pub dead_x: DeadLatentTracker,
    pub dead_y: DeadLatentTracker,
}

/// Shuffled activation buffer over a source.
///
/// Holds up to `buffer_batches · batch_tokens` activations; each refill is
/// shuffled with the trainer's seeded generator before batches are cut.
struct ShuffleBuffer<'a> {
    source: &'a mut dyn ActivationSource,
    rng: ChaCha8Rng,
    capacity: usize,
    rows: Vec<Vec<f64>>,
    cursor: usize,
    remaining: usize,
    consumed: usize,
    needed: usize,
}

impl<'a> ShuffleBuffer<'a> {
    fn next_batch(&mut self, batch: usize) -> Result<ndarray::Array2<f64>> {
        if self.cursor + batch > self.rows.len() {
            let leftover: Vec<Vec<f64>> = self.rows.drain(self.cursor..).collect();
            let want = self.capacity.min(self.remaining).saturating_sub(leftover.len());
            let fresh = self.source.next_batch(want)?;
            if fresh.nrows() < want {
                return Err(JsaeError::DataExhausted {
                    needed: self.needed,
                    available: self.consumed + leftover.len() + fresh.nrows(),
                });
            }
            self.remaining -= want;
            self.rows = leftover;
            self.rows.extend(fresh.rows().into_iter().map(|r| r.to_vec()));
            self.rows.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let width = self.source.width();
        let slice = &self.rows[self.cursor..self.cursor + batch];
        self.cursor += batch;
        self.consumed += batch;
        let flat: Vec<f64> = slice.iter().flatten().copied().collect();
        Ok(ndarray::Array2::from_shape_vec((batch, width), flat).expect("rows share the source width"))
    }
}

/// Trains `pair` on activations from `source` with the MLP frozen.
pub fn train(mlp: &MlpParams, source: &mut dyn ActivationSource, mut pair: SaePair, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    crate::jacobian::check_dims(mlp, &pair)?;
    if source.width() != mlp.m_x() {
        return Err(JsaeError::invalid(format!(
            "activation width {} does not match MLP input width {}",
            source.width(),
            mlp.m_x()
        )));
    }
    let total_steps = cfg.total_steps();
    let mut dead_x = DeadLatentTracker::new(pair.input.n(), cfg.dead_window_tokens);
    let mut dead_y = DeadLatentTracker::new(pair.output.n(), cfg.dead_window_tokens);
    let mut timeline = Vec::with_capacity(total_steps);
    if total_steps == 0 {
        return Ok(TrainOutcome {
            pair,
            timeline,
            dead_x,
            dead_y,
        });
    }

    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| JsaeError::invalid(format!("cannot build thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut buffer = ShuffleBuffer {
        source,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_B0FF),
        capacity: cfg.buffer_batches * cfg.batch_tokens,
        rows: Vec::new(),
        cursor: 0,
        remaining: total_steps * cfg.batch_tokens,
        consumed: 0,
        needed: total_steps * cfg.batch_tokens,
    };
    let mut adam = AdamState::new(&pair, cfg);

    for step in 0..total_steps {
        let batch = buffer.next_batch(cfg.batch_tokens)?;
        let lr = lr_at(step, total_steps, cfg);
        let lambda = lambda_at(step, total_steps, cfg);
        let outcome = evaluate_batch(mlp, &pair, batch.view(), lambda, true, pool.as_ref())?;
        let grads = outcome.grads.as_ref().expect("gradients were requested");
        adam_step(&mut adam, &mut pair, grads, lr)?;
        pair.input.renormalize_decoder()?;
        pair.output.renormalize_decoder()?;
        dead_x.observe(&outcome.input_codes);
        dead_y.observe(&outcome.output_codes);
        timeline.push(StepRecord::new(
            step,
            lr,
            &outcome.loss,
            dead_x.dead_count(),
            dead_y.dead_count(),
        ));
    }

    Ok(TrainOutcome {
        pair,
        timeline,
        dead_x,
        dead_y,
    })
}
