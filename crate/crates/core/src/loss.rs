// SPDX-License-Identifier: MIT OR Apache-2.0

//! Joint objective of an SAE pair and its hand-derived gradients.
//!
//! Per token `x` (one row of the batch):
//!
//! ```text
//! s_x = e_x(x),  x̂ = d_x(s_x)
//! y   = f(x),    s_y = e_y(y),  ŷ = d_y(s_y)
//! J   = active Jacobian of f_s at s_x (MLP evaluated on x̂)
//! L   = mean‖x̂ − x‖² + mean‖ŷ − y‖² + λ/k² · mean_t Σ|J|
//! ```
//!
//! Squared errors are averaged over tokens and coordinates, the Jacobian
//! term over tokens. TopK supports are treated as locally constant and
//! `sign(0) = 0` in the L1 subgradient.
//!
//! Tokens are processed in fixed chunks of [`TOKEN_CHUNK`] and chunk
//! partials are summed in chunk order, so results do not depend on the
//! thread count.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, Axis, Zip};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::error::{JsaeError, Result};
use crate::jacobian::{
    active_jacobian_from_context, check_dims, hidden_scales, JacobianContext, JacobianFactors,
};
use crate::mlp::{MlpKind, MlpParams};
use crate::sae::{topk_margin, SaePair, SaeParams, SparseActivation, SAE_TENSOR_NAMES};

/// Tokens per reduction chunk.
pub const TOKEN_CHUNK: usize = 32;

/// Floor on the denominator of [`grad_check`]'s relative error.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Fewest coordinates a gradient check samples (all of them if the pair is smaller).
pub const MIN_GRAD_CHECK_COORDS: usize = 200;

/// Components of the joint objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_x: f64,
    pub mse_y: f64,
    /// Mean over tokens of `Σ|J_active|`.
    pub jac_l1: f64,
    pub lambda: f64,
    pub k: usize,
    pub total: f64,
}

impl LossBreakdown {
    pub fn jacobian_weight(&self) -> f64 {
        self.lambda / (self.k * self.k) as f64
    }
}

/// Gradient arrays for one SAE, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeTensorGrads {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

impl SaeTensorGrads {
    pub fn zeros_like(sae: &SaeParams) -> Self {
        Self {
            w_enc: Array2::zeros(sae.w_enc.raw_dim()),
            b_enc: Array1::zeros(sae.b_enc.raw_dim()),
            w_dec: Array2::zeros(sae.w_dec.raw_dim()),
            b_dec: Array1::zeros(sae.b_dec.raw_dim()),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.w_enc += &other.w_enc;
        self.b_enc += &other.b_enc;
        self.w_dec += &other.w_dec;
        self.b_dec += &other.b_dec;
    }

    pub fn tensors(&self) -> [ArrayViewD<'_, f64>; 4] {
        [
            self.w_enc.view().into_dyn(),
            self.b_enc.view().into_dyn(),
            self.w_dec.view().into_dyn(),
            self.b_dec.view().into_dyn(),
        ]
    }
}

/// Gradients of [`LossBreakdown::total`] for both SAEs.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGradients {
    pub input: SaeTensorGrads,
    pub output: SaeTensorGrads,
}

impl SaeGradients {
    pub fn zeros_like(pair: &SaePair) -> Self {
        Self {
            input: SaeTensorGrads::zeros_like(&pair.input),
            output: SaeTensorGrads::zeros_like(&pair.output),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.input.add_assign(&other.input);
        self.output.add_assign(&other.output);
    }

    /// Eight tensors in the same order as [`SaePair::tensors_mut`].
    pub fn tensors(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out: Vec<_> = self.input.tensors().into_iter().collect();
        out.extend(self.output.tensors());
        out
    }

    pub fn shapes_match(&self, pair: &SaePair) -> bool {
        pair.named_tensors()
            .iter()
            .zip(self.tensors())
            .all(|((_, p), g)| p.shape() == g.shape())
    }
}

/// Everything one pass over a batch produces.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: LossBreakdown,
    pub grads: Option<SaeGradients>,
    /// `s_x` per token.
    pub input_codes: Vec<SparseActivation>,
    /// `s_y` per token (encoding of `f(x)`).
    pub output_codes: Vec<SparseActivation>,
}

#[derive(Debug, Clone, Copy)]
struct Scales {
    recon_x: f64,
    recon_y: f64,
    jac: f64,
}

struct Partial {
    sq_x: f64,
    sq_y: f64,
    jac_abs: f64,
    grads: Option<SaeGradients>,
    input_codes: Vec<SparseActivation>,
    output_codes: Vec<SparseActivation>,
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn scale_columns(m: &Array2<f64>, s: &Array1<f64>) -> Array2<f64> {
    m * &s.view().insert_axis(Axis(0))
}

fn scale_rows(m: &Array2<f64>, s: &Array1<f64>) -> Array2<f64> {
    m * &s.view().insert_axis(Axis(1))
}

/// Accumulates the reconstruction gradient of one SAE given `∂L/∂x̂`.
fn accumulate_reconstruction(
    sae: &SaeParams,
    g: &mut SaeTensorGrads,
    code: &SparseActivation,
    input: ArrayView1<f64>,
    d_recon: ArrayView1<f64>,
) {
    g.b_dec += &d_recon;
    for (&j, &v) in code.indices.iter().zip(&code.values) {
        g.w_dec.column_mut(j).scaled_add(v, &d_recon);
        let d_code = sae.w_dec.column(j).dot(&d_recon);
        g.w_enc.row_mut(j).scaled_add(d_code, &input);
        g.b_enc[j] += d_code;
    }
}

/// Backpropagates `∂L/∂J = sign_scaled` into the factors of the active block.
/// Adds to `d_x_hat` the part of `∂L/∂x̂` that flows through the hidden
/// pre-activations.
fn jacobian_backward(
    mlp: &MlpParams,
    ctx: &JacobianContext,
    fac: &JacobianFactors,
    sign_scaled: &Array2<f64>,
    grads: &mut SaeGradients,
    d_x_hat: &mut Array1<f64>,
) {
    let act = mlp.activation;
    let (a, b) = hidden_scales(mlp, &ctx.cache);
    let e = &fac.enc_w2;

    let g_d1t = sign_scaled.dot(&fac.w1_dec.t());
    let mut d_e = scale_columns(&g_d1t, &a);
    let d_a = (e * &g_d1t).sum_axis(Axis(0));
    let et_g = e.t().dot(sign_scaled);
    let mut d_dec = mlp.w1.t().dot(&scale_rows(&et_g, &a));

    match mlp.kind {
        MlpKind::Standard => {
            let mut d_z = d_a;
            Zip::from(&mut d_z).and(&ctx.cache.z).for_each(|d, &z| *d *= act.d2(z));
            *d_x_hat += &mlp.w1.t().dot(&d_z);
        }
        MlpKind::Glu => {
            let glu = ctx.cache.glu.as_ref().expect("GLU cache");
            let wg = mlp.wg.as_ref().expect("GLU gate weights");
            let wg_dec = fac.wg_dec.as_ref().expect("GLU factors");
            let gate = b.expect("GLU gate scale");

            let g_dgt = sign_scaled.dot(&wg_dec.t());
            d_e += &scale_columns(&g_dgt, &gate);
            let d_b = (e * &g_dgt).sum_axis(Axis(0));
            d_dec += &wg.t().dot(&scale_rows(&et_g, &gate));

            // a = s = φ(g), b = h ⊙ φ'(g)
            let mut d_h = Array1::zeros(d_b.len());
            let mut d_g = Array1::zeros(d_b.len());
            Zip::from(&mut d_h)
                .and(&mut d_g)
                .and(&d_a)
                .and(&d_b)
                .and(&glu.g)
                .and(&glu.h)
                .for_each(|dh, dg, &da, &db, &g, &h| {
                    let d1 = act.d1(g);
                    *dh = db * d1;
                    *dg = da * d1 + db * h * act.d2(g);
                });
            *d_x_hat += &mlp.w1.t().dot(&d_h);
            *d_x_hat += &wg.t().dot(&d_g);
        }
    }

    let d_enc_rows = d_e.dot(&mlp.w2.t());
    for (r, &i) in ctx.rows.iter().enumerate() {
        grads.output.w_enc.row_mut(i).scaled_add(1.0, &d_enc_rows.row(r));
    }
    for (c, &j) in ctx.s_x.indices.iter().enumerate() {
        grads.input.w_dec.column_mut(j).scaled_add(1.0, &d_dec.column(c));
    }
}

fn process_chunk(
    mlp: &MlpParams,
    pair: &SaePair,
    chunk: ArrayView2<f64>,
    scales: Scales,
    with_grads: bool,
) -> Result<Partial> {
    let mut part = Partial {
        sq_x: 0.0,
        sq_y: 0.0,
        jac_abs: 0.0,
        grads: with_grads.then(|| SaeGradients::zeros_like(pair)),
        input_codes: Vec::with_capacity(chunk.nrows()),
        output_codes: Vec::with_capacity(chunk.nrows()),
    };
    for x in chunk.rows() {
        let s_x = pair.input.encode(x)?;
        let ctx = JacobianContext::from_selection(mlp, pair, s_x)?;
        let resid_x = &ctx.x_hat - &x;
        part.sq_x += resid_x.dot(&resid_x);

        let y = mlp.apply(x)?;
        let s_y = pair.output.encode(y.view())?;
        let resid_y = pair.output.decode(&s_y)? - &y;
        part.sq_y += resid_y.dot(&resid_y);

        let (aj, fac) = active_jacobian_from_context(mlp, pair, &ctx);
        part.jac_abs += aj.abs_sum();

        if let Some(g) = part.grads.as_mut() {
            let d_y_hat = resid_y * scales.recon_y;
            accumulate_reconstruction(&pair.output, &mut g.output, &s_y, y.view(), d_y_hat.view());

            let mut d_x_hat = resid_x * scales.recon_x;
            if scales.jac != 0.0 && !aj.values.is_empty() {
                let sign_scaled = aj.values.mapv(|v| sign(v) * scales.jac);
                jacobian_backward(mlp, &ctx, &fac, &sign_scaled, g, &mut d_x_hat);
            }
            accumulate_reconstruction(&pair.input, &mut g.input, &ctx.s_x, x, d_x_hat.view());
        }
        part.input_codes.push(ctx.s_x);
        part.output_codes.push(s_y);
    }
    Ok(part)
}

fn check_batch(mlp: &MlpParams, pair: &SaePair, batch: ArrayView2<f64>, lambda: f64) -> Result<()> {
    check_dims(mlp, pair)?;
    if pair.input.k != pair.output.k {
        return Err(JsaeError::invalid(format!(
            "input and output SAEs must share k (got {} and {})",
            pair.input.k, pair.output.k
        )));
    }
    if batch.nrows() == 0 {
        return Err(JsaeError::invalid("batch is empty"));
    }
    if batch.ncols() != mlp.m_x() {
        return Err(JsaeError::invalid(format!(
            "batch width {} does not match MLP input width {}",
            batch.ncols(),
            mlp.m_x()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(JsaeError::invalid(format!("lambda must be finite and ≥ 0, got {lambda}")));
    }
    Ok(())
}

/// One pass over `batch` (tokens are rows), optionally with gradients.
///
/// With `pool`, chunks are spread over its workers; the result is identical
/// to the sequential pass.
pub fn evaluate_batch(
    mlp: &MlpParams,
    pair: &SaePair,
    batch: ArrayView2<f64>,
    lambda: f64,
    with_grads: bool,
    pool: Option<&ThreadPool>,
) -> Result<BatchOutcome> {
    check_batch(mlp, pair, batch, lambda)?;
    let tokens = batch.nrows() as f64;
    let k = pair.input.k;
    let scales = Scales {
        recon_x: 2.0 / (tokens * mlp.m_x() as f64),
        recon_y: 2.0 / (tokens * mlp.m_y() as f64),
        jac: lambda / ((k * k) as f64 * tokens),
    };
    let chunks: Vec<ArrayView2<f64>> = batch.axis_chunks_iter(Axis(0), TOKEN_CHUNK).collect();
    let run = |c: &ArrayView2<f64>| process_chunk(mlp, pair, c.view(), scales, with_grads);
    let partials: Vec<Result<Partial>> = match pool {
        Some(pool) if pool.current_num_threads() > 1 => pool.install(|| chunks.par_iter().map(run).collect()),
        _ => chunks.iter().map(run).collect(),
    };

    let mut sq_x = 0.0;
    let mut sq_y = 0.0;
    let mut jac_abs = 0.0;
    let mut grads: Option<SaeGradients> = None;
    let mut input_codes = Vec::with_capacity(batch.nrows());
    let mut output_codes = Vec::with_capacity(batch.nrows());
    for part in partials {
        let part = part?;
        sq_x += part.sq_x;
        sq_y += part.sq_y;
        jac_abs += part.jac_abs;
        if let Some(g) = part.grads {
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
        input_codes.extend(part.input_codes);
        output_codes.extend(part.output_codes);
    }

    let mse_x = sq_x / (tokens * mlp.m_x() as f64);
    let mse_y = sq_y / (tokens * mlp.m_y() as f64);
    let jac_l1 = jac_abs / tokens;
    let total = mse_x + mse_y + lambda / (k * k) as f64 * jac_l1;
    Ok(BatchOutcome {
        loss: LossBreakdown {
            mse_x,
            mse_y,
            jac_l1,
            lambda,
            k,
            total,
        },
        grads,
        input_codes,
        output_codes,
    })
}

/// Loss components of the joint objective on `batch`.
pub fn forward_losses(mlp: &MlpParams, pair: &SaePair, batch: ArrayView2<f64>, lambda: f64) -> Result<LossBreakdown> {
    evaluate_batch(mlp, pair, batch, lambda, false, None).map(|o| o.loss)
}

/// Gradient of the total loss with respect to all eight SAE tensors.
pub fn grads(mlp: &MlpParams, pair: &SaePair, batch: ArrayView2<f64>, lambda: f64) -> Result<SaeGradients> {
    let out = evaluate_batch(mlp, pair, batch, lambda, true, None)?;
    Ok(out.grads.expect("gradients were requested"))
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: (String, usize),
}

/// Discrete structure the finite differences must not cross.
#[derive(Debug, PartialEq)]
struct Signature {
    input_support: Vec<usize>,
    output_support: Vec<usize>,
    jacobian_rows: Vec<usize>,
    jacobian_signs: Vec<i8>,
    relu_mask: Vec<bool>,
}

fn signatures(mlp: &MlpParams, pair: &SaePair, batch: ArrayView2<f64>, with_signs: bool) -> Result<Vec<Signature>> {
    let mut out = Vec::with_capacity(batch.nrows());
    for x in batch.rows() {
        let ctx = JacobianContext::new(mlp, pair, x)?;
        let y = mlp.apply(x)?;
        let s_y = pair.output.encode(y.view())?;
        let (aj, _) = active_jacobian_from_context(mlp, pair, &ctx);
        let relu_mask = match (mlp.activation, &ctx.cache.glu) {
            (crate::ActivationKind::Relu, None) => ctx.cache.z.iter().map(|&z| z > 0.0).collect(),
            (crate::ActivationKind::Relu, Some(glu)) => glu.g.iter().map(|&g| g > 0.0).collect(),
            _ => Vec::new(),
        };
        out.push(Signature {
            input_support: ctx.s_x.indices.clone(),
            output_support: s_y.indices,
            jacobian_rows: ctx.rows.clone(),
            jacobian_signs: if with_signs {
                aj.values.iter().map(|&v| sign(v) as i8).collect()
            } else {
                Vec::new()
            },
            relu_mask,
        });
    }
    Ok(out)
}

/// Smallest of the three TopK gaps a token goes through: input selection,
/// output selection on `f(x̂)` and output selection on `f(x)`.
pub fn selection_margin(mlp: &MlpParams, pair: &SaePair, x: ArrayView1<f64>) -> Result<f64> {
    let gap_x = topk_margin(pair.input.pre_activations(x)?.view(), pair.input.k)?;
    let ctx = JacobianContext::new(mlp, pair, x)?;
    let gap_jac = topk_margin(ctx.out_pre.view(), pair.output.k)?;
    let y = mlp.apply(x)?;
    let gap_y = topk_margin(pair.output.pre_activations(y.view())?.view(), pair.output.k)?;
    Ok(gap_x.min(gap_jac).min(gap_y))
}

fn check_margins(mlp: &MlpParams, pair: &SaePair, batch: ArrayView2<f64>, eps: f64) -> Result<()> {
    let limit = 10.0 * eps;
    for (t, x) in batch.rows().into_iter().enumerate() {
        let gap = selection_margin(mlp, pair, x)?;
        if gap <= limit {
            return Err(JsaeError::DegenerateInput(format!(
                "token {t}: TopK gap {gap:e} is within 10·eps"
            )));
        }
    }
    Ok(())
}

/// Per-tensor sample counts: at least `per_tensor` each (capped by size),
/// topped up round-robin until `min_total` or every coordinate is taken.
fn sample_quotas(sizes: &[usize], per_tensor: usize, min_total: usize) -> Vec<usize> {
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| s.min(per_tensor)).collect();
    let capacity: usize = sizes.iter().sum();
    let target = min_total.min(capacity);
    while quotas.iter().sum::<usize>() < target {
        for (q, &s) in quotas.iter_mut().zip(sizes) {
            if *q < s {
                *q += 1;
            }
        }
    }
    quotas
}

/// Max relative error between [`grads`] and central differences of
/// [`forward_losses`] over a sample of coordinates from all eight tensors.
pub fn grad_check(mlp: &MlpParams, pair: &SaePair, batch: ArrayView2<f64>, lambda: f64, eps: f64) -> Result<f64> {
    grad_check_report(mlp, pair, batch, lambda, eps, 32, 0).map(|r| r.max_relative_error)
}

/// [`grad_check`] with explicit sample size per tensor and sampling seed.
///
/// Half of the sampled rows/columns of latent-indexed tensors are drawn
/// from latents active somewhere in the batch.
pub fn grad_check_report(
    mlp: &MlpParams,
    pair: &SaePair,
    batch: ArrayView2<f64>,
    lambda: f64,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(JsaeError::invalid(format!("eps must be positive and finite, got {eps}")));
    }
    check_batch(mlp, pair, batch, lambda)?;
    check_margins(mlp, pair, batch, eps)?;

    let with_signs = lambda > 0.0;
    let base_sig = signatures(mlp, pair, batch, with_signs)?;
    let analytic = grads(mlp, pair, batch, lambda)?;
    let analytic_tensors = analytic.tensors();

    let mut active_in: Vec<usize> = base_sig.iter().flat_map(|s| s.input_support.iter().copied()).collect();
    active_in.sort_unstable();
    active_in.dedup();
    let mut active_out: Vec<usize> = base_sig
        .iter()
        .flat_map(|s| s.output_support.iter().chain(&s.jacobian_rows).copied())
        .collect();
    active_out.sort_unstable();
    active_out.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = pair.named_tensors();
    let sizes: Vec<usize> = names.iter().map(|(_, t)| t.len()).collect();
    let quotas = sample_quotas(&sizes, per_tensor, MIN_GRAD_CHECK_COORDS);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (t, (_, tensor)) in names.iter().enumerate() {
        let active = if t < 4 { &active_in } else { &active_out };
        let shape = tensor.shape().to_vec();
        let total = tensor.len();
        let quota = quotas[t];
        if quota >= total {
            coords.extend((0..total).map(|i| (t, i)));
            continue;
        }
        let mut set = std::collections::BTreeSet::new();
        while set.len() < quota {
            let prefer_active = !active.is_empty() && rng.random_bool(0.5);
            let flat = match (SAE_TENSOR_NAMES[t % 4], prefer_active) {
                ("w_enc", true) => {
                    let row = *active.choose(&mut rng).expect("non-empty");
                    row * shape[1] + rng.random_range(0..shape[1])
                }
                ("w_dec", true) => {
                    let col = *active.choose(&mut rng).expect("non-empty");
                    rng.random_range(0..shape[0]) * shape[1] + col
                }
                ("b_enc", true) => *active.choose(&mut rng).expect("non-empty"),
                _ => rng.random_range(0..total),
            };
            set.insert(flat);
        }
        coords.extend(set.into_iter().map(|i| (t, i)));
    }

    let eval = |t: usize, flat: usize, delta: f64| -> Result<f64> {
        let mut p = pair.clone();
        {
            let mut tensors = p.tensors_mut();
            let slot = tensors[t]
                .as_slice_mut()
                .expect("parameters are stored in standard layout");
            slot[flat] += delta;
        }
        if signatures(mlp, &p, batch, with_signs)? != base_sig {
            return Err(JsaeError::DegenerateInput(format!(
                "perturbing {}[{flat}] by {delta:e} changes a TopK support or Jacobian sign",
                names[t].0
            )));
        }
        Ok(forward_losses(mlp, &p, batch, lambda)?.total)
    };

    let mut worst = (0.0f64, String::new(), 0usize);
    for &(t, flat) in &coords {
        let numeric = (eval(t, flat, eps)? - eval(t, flat, -eps)?) / (2.0 * eps);
        let exact = analytic_tensors[t]
            .as_slice()
            .expect("gradients are stored in standard layout")[flat];
        let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, names[t].0.clone(), flat);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        coordinates_checked: coords.len(),
        worst: (worst.1, worst.2),
    })
}
