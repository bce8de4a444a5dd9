// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reconstruction quality, downstream recovery and Jacobian sparsity metrics.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::error::{JsaeError, Result};
use crate::jacobian::{active_jacobian_from_context, check_dims, ActiveJacobian, JacobianContext};
use crate::mlp::MlpParams;
use crate::sae::SaePair;
use crate::synthetic::DownstreamTask;

/// Thresholds reported by default; 0.01 is the headline value.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.001, 0.01, 0.1];

/// Norm orders reported by default.
pub const DEFAULT_NORMS: [f64; 4] = [1.0, 2.0, 4.0, f64::INFINITY];

/// Fraction of entries whose magnitude exceeds `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFraction {
    pub threshold: f64,
    pub fraction: f64,
}

/// Mean `L_p` norm; `p` is serialized as `"inf"` for the max norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpNorm {
    #[serde(with = "p_repr")]
    pub p: f64,
    pub value: f64,
}

mod p_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &f64, s: S) -> Result<S::Ok, S::Error> {
        if p.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*p)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("unknown norm order {t}"))),
        }
    }
}

/// Summary of an SAE pair on a set of tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub token_count: usize,
    pub mse_x: f64,
    pub mse_y: f64,
    pub explained_variance_x: f64,
    pub explained_variance_y: f64,
    pub cosine_sim_x: f64,
    pub cosine_sim_y: f64,
    /// Absent when no downstream task is supplied.
    pub ce_score_x: Option<f64>,
    pub ce_score_y: Option<f64>,
    pub jac_frac_above: Vec<ThresholdFraction>,
    pub jac_lp_norms: Vec<LpNorm>,
    pub global_jac_frac_above: Vec<ThresholdFraction>,
    /// Latents never selected on any evaluated token.
    pub dead_x: usize,
    pub dead_y: usize,
}

impl EvalReport {
    /// Fraction for `threshold` in `jac_frac_above`, if reported.
    pub fn frac_above(&self, threshold: f64) -> Option<f64> {
        self.jac_frac_above
            .iter()
            .find(|t| t.threshold == threshold)
            .map(|t| t.fraction)
    }

    pub fn write_json(&self, out: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// One row per threshold: `threshold,frac_above,global_frac_above`.
    pub fn write_threshold_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "threshold,frac_above,global_frac_above")?;
        for (local, global) in self.jac_frac_above.iter().zip(&self.global_jac_frac_above) {
            writeln!(out, "{:?},{:?},{:?}", local.threshold, local.fraction, global.fraction)?;
        }
        Ok(())
    }
}

fn check_same_shape(xs: ArrayView2<f64>, x_hats: ArrayView2<f64>) -> Result<()> {
    if xs.dim() != x_hats.dim() {
        return Err(JsaeError::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            xs.dim(),
            x_hats.dim()
        )));
    }
    if xs.nrows() == 0 {
        return Err(JsaeError::invalid("at least one token is required"));
    }
    Ok(())
}

/// Mean over tokens and coordinates of the squared error.
pub fn mse(xs: ArrayView2<f64>, x_hats: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(xs, x_hats)?;
    Ok((&xs - &x_hats).mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// `1 − MSE / Var`, with the variance taken around the per-coordinate mean.
pub fn explained_variance(xs: ArrayView2<f64>, x_hats: ArrayView2<f64>) -> Result<f64> {
    let err = mse(xs, x_hats)?;
    let mean = xs.mean_axis(Axis(0)).expect("non-empty");
    let var = (&xs - &mean).mapv(|v| v * v).mean().unwrap_or(0.0);
    if var <= 0.0 {
        return Err(JsaeError::NumericDegeneracy(
            "input activations have zero variance".into(),
        ));
    }
    Ok(1.0 - err / var)
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    match (na > 0.0, nb > 0.0) {
        (true, true) => a.dot(&b) / (na * nb),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

/// Mean per-token cosine similarity; two zero vectors count as identical.
pub fn cosine_similarity(xs: ArrayView2<f64>, x_hats: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(xs, x_hats)?;
    let total: f64 = xs
        .rows()
        .into_iter()
        .zip(x_hats.rows())
        .map(|(a, b)| cosine(a, b))
        .sum();
    Ok(total / xs.nrows() as f64)
}

/// `(L_ablated − L_recon) / (L_ablated − L_clean)`.
pub fn recovery_score(ablated: f64, recon: f64, clean: f64) -> Result<f64> {
    let denom = ablated - clean;
    if !(denom.abs() > 1e-12 * ablated.abs().max(1.0)) {
        return Err(JsaeError::NumericDegeneracy(
            "ablating the activations does not change the downstream loss".into(),
        ));
    }
    Ok((ablated - recon) / denom)
}

/// Downstream recovery of reconstructed MLP inputs: zero-ablation scores 0,
/// the true inputs score 1.
pub fn ce_score_analog(
    task: &DownstreamTask,
    xs: ArrayView2<f64>,
    x_hats: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<f64> {
    check_same_shape(xs, x_hats)?;
    let zeros = Array2::zeros(xs.raw_dim());
    recovery_score(
        task.loss_from_inputs(zeros.view(), targets)?,
        task.loss_from_inputs(x_hats, targets)?,
        task.loss_from_inputs(xs, targets)?,
    )
}

/// Same score for reconstructed MLP outputs, fed straight to the head.
pub fn ce_score_outputs(
    task: &DownstreamTask,
    ys: ArrayView2<f64>,
    y_hats: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<f64> {
    check_same_shape(ys, y_hats)?;
    let zeros = Array2::zeros(ys.raw_dim());
    recovery_score(
        task.loss_from_outputs(zeros.view(), targets),
        task.loss_from_outputs(y_hats, targets),
        task.loss_from_outputs(ys, targets),
    )
}

/// Mean over tokens of `#{|J| > t} / k²`, for every `t`.
pub fn jacobian_sparsity(jacs: &[ActiveJacobian], k: usize, thresholds: &[f64]) -> Result<Vec<ThresholdFraction>> {
    if jacs.is_empty() || k == 0 {
        return Err(JsaeError::invalid("jacobian_sparsity needs tokens and k ≥ 1"));
    }
    let cap = (k * k) as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let sum: f64 = jacs
                .iter()
                .map(|j| j.values.iter().filter(|v| v.abs() > t).count() as f64 / cap)
                .sum();
            ThresholdFraction {
                threshold: t,
                fraction: sum / jacs.len() as f64,
            }
        })
        .collect())
}

/// `L_p` norm of a flattened block; `p = ∞` is the largest magnitude.
pub fn lp_norm(values: impl IntoIterator<Item = f64>, p: f64) -> f64 {
    let abs = values.into_iter().map(f64::abs);
    if p.is_infinite() {
        abs.fold(0.0, f64::max)
    } else if p == 1.0 {
        abs.sum()
    } else {
        abs.map(|v| v.powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// Mean over tokens of the `L_p` norm of each flattened active block.
pub fn jacobian_lp_norms(jacs: &[ActiveJacobian], ps: &[f64]) -> Result<Vec<LpNorm>> {
    if jacs.is_empty() {
        return Err(JsaeError::invalid("jacobian_lp_norms needs at least one token"));
    }
    if let Some(p) = ps.iter().find(|&&p| !(p >= 1.0)) {
        return Err(JsaeError::invalid(format!("norm order {p} must be at least 1")));
    }
    Ok(ps
        .iter()
        .map(|&p| LpNorm {
            p,
            value: jacs.iter().map(|j| lp_norm(j.values.iter().copied(), p)).sum::<f64>() / jacs.len() as f64,
        })
        .collect())
}

/// Token-averaged Jacobian in which entry `(i, j)` averages only over the
/// tokens where output latent `i` was selected.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalJacobian {
    pub mean: Array2<f64>,
    /// Tokens on which each output latent was selected.
    pub row_counts: Vec<usize>,
}

impl GlobalJacobian {
    /// Fraction of all `n_y · n_x` entries with magnitude above each `t`.
    pub fn frac_above(&self, thresholds: &[f64]) -> Vec<ThresholdFraction> {
        let total = self.mean.len() as f64;
        thresholds
            .iter()
            .map(|&t| ThresholdFraction {
                threshold: t,
                fraction: self.mean.iter().filter(|v| v.abs() > t).count() as f64 / total,
            })
            .collect()
    }
}

pub fn global_mean_jacobian(jacs: &[ActiveJacobian]) -> Result<GlobalJacobian> {
    let first = jacs
        .first()
        .ok_or_else(|| JsaeError::invalid("global_mean_jacobian needs at least one token"))?;
    let (n_y, n_x) = (first.n_y, first.n_x);
    let mut sum = Array2::<f64>::zeros((n_y, n_x));
    let mut row_counts = vec![0usize; n_y];
    for jac in jacs {
        if (jac.n_y, jac.n_x) != (n_y, n_x) {
            return Err(JsaeError::invalid("Jacobians disagree on latent counts"));
        }
        for (r, &i) in jac.row_indices.iter().enumerate() {
            row_counts[i] += 1;
            for (c, &j) in jac.col_indices.iter().enumerate() {
                sum[[i, j]] += jac.values[[r, c]];
            }
        }
    }
    for (mut row, &count) in sum.rows_mut().into_iter().zip(&row_counts) {
        if count > 0 {
            row /= count as f64;
        }
    }
    Ok(GlobalJacobian { mean: sum, row_counts })
}

/// Per-token products of running the pair around the MLP.
#[derive(Debug, Clone)]
pub struct PairRun {
    pub x_hats: Array2<f64>,
    /// `f(x)` on the true inputs.
    pub ys: Array2<f64>,
    pub y_hats: Array2<f64>,
    pub jacobians: Vec<ActiveJacobian>,
    pub fired_x: Vec<bool>,
    pub fired_y: Vec<bool>,
}

struct TokenRun {
    x_hat: Array1<f64>,
    y: Array1<f64>,
    y_hat: Array1<f64>,
    jac: ActiveJacobian,
    rows_y: Vec<usize>,
}

fn run_token(mlp: &MlpParams, pair: &SaePair, x: ArrayView1<f64>) -> Result<TokenRun> {
    let ctx = JacobianContext::new(mlp, pair, x)?;
    let (jac, _) = active_jacobian_from_context(mlp, pair, &ctx);
    let y = mlp.apply(x)?;
    let s_y = pair.output.encode(y.view())?;
    let y_hat = pair.output.decode(&s_y)?;
    Ok(TokenRun {
        x_hat: ctx.x_hat,
        y,
        y_hat,
        jac,
        rows_y: s_y.indices,
    })
}

/// Runs every token of `xs` through the pair; parallel over `pool` when given.
pub fn run_pair(mlp: &MlpParams, pair: &SaePair, xs: ArrayView2<f64>, pool: Option<&ThreadPool>) -> Result<PairRun> {
    check_dims(mlp, pair)?;
    if xs.ncols() != mlp.m_x() || xs.nrows() == 0 {
        return Err(JsaeError::invalid(format!(
            "expected a non-empty batch of width {}, got {:?}",
            mlp.m_x(),
            xs.dim()
        )));
    }
    let rows: Vec<ArrayView1<f64>> = xs.rows().into_iter().collect();
    let run = |x: &ArrayView1<f64>| run_token(mlp, pair, x.view());
    let tokens: Vec<Result<TokenRun>> = match pool {
        Some(pool) if pool.current_num_threads() > 1 => pool.install(|| rows.par_iter().map(run).collect()),
        _ => rows.iter().map(run).collect(),
    };
    let count = xs.nrows();
    let mut out = PairRun {
        x_hats: Array2::zeros((count, mlp.m_x())),
        ys: Array2::zeros((count, mlp.m_y())),
        y_hats: Array2::zeros((count, mlp.m_y())),
        jacobians: Vec::with_capacity(count),
        fired_x: vec![false; pair.input.n()],
        fired_y: vec![false; pair.output.n()],
    };
    for (t, token) in tokens.into_iter().enumerate() {
        let token = token?;
        out.x_hats.row_mut(t).assign(&token.x_hat);
        out.ys.row_mut(t).assign(&token.y);
        out.y_hats.row_mut(t).assign(&token.y_hat);
        for &j in &token.jac.col_indices {
            out.fired_x[j] = true;
        }
        for &i in &token.rows_y {
            out.fired_y[i] = true;
        }
        out.jacobians.push(token.jac);
    }
    Ok(out)
}

/// Downstream task with reference targets, for the recovery scores.
#[derive(Debug, Clone, Copy)]
pub struct TaskTargets<'a> {
    pub task: &'a DownstreamTask,
    /// One row per evaluated token.
    pub targets: ArrayView2<'a, f64>,
}

/// Full evaluation of `pair` on the tokens `xs`.
pub fn evaluate(
    mlp: &MlpParams,
    pair: &SaePair,
    xs: ArrayView2<f64>,
    task: Option<TaskTargets<'_>>,
    thresholds: &[f64],
    pool: Option<&ThreadPool>,
) -> Result<EvalReport> {
    let run = run_pair(mlp, pair, xs, pool)?;
    let (ce_score_x, ce_score_y) = match task {
        Some(t) => {
            if t.targets.nrows() != xs.nrows() {
                return Err(JsaeError::invalid("one target row per token is required"));
            }
            (
                Some(ce_score_analog(t.task, xs, run.x_hats.view(), t.targets)?),
                Some(ce_score_outputs(t.task, run.ys.view(), run.y_hats.view(), t.targets)?),
            )
        }
        None => (None, None),
    };
    let global = global_mean_jacobian(&run.jacobians)?;
    Ok(EvalReport {
        token_count: xs.nrows(),
        mse_x: mse(xs, run.x_hats.view())?,
        mse_y: mse(run.ys.view(), run.y_hats.view())?,
        explained_variance_x: explained_variance(xs, run.x_hats.view())?,
        explained_variance_y: explained_variance(run.ys.view(), run.y_hats.view())?,
        cosine_sim_x: cosine_similarity(xs, run.x_hats.view())?,
        cosine_sim_y: cosine_similarity(run.ys.view(), run.y_hats.view())?,
        ce_score_x,
        ce_score_y,
        jac_frac_above: jacobian_sparsity(&run.jacobians, pair.input.k, thresholds)?,
        jac_lp_norms: jacobian_lp_norms(&run.jacobians, &DEFAULT_NORMS)?,
        global_jac_frac_above: global.frac_above(thresholds),
        dead_x: run.fired_x.iter().filter(|f| !**f).count(),
        dead_y: run.fired_y.iter().filter(|f| !**f).count(),
    })
}
