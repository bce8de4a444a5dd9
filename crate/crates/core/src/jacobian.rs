// SPDX-License-Identifier: MIT OR Apache-2.0

//! Jacobian of the latent-to-latent map `f_s = e_y ∘ f ∘ d_x ∘ τ_k`.
//!
//! Only rows selected by the output SAE (`K₂`) and columns selected by the
//! input SAE (`K₁`) can be nonzero, so the kernel builds the `|K₂|×|K₁|`
//! block directly:
//!
//! ```text
//! Standard:  J = (W_enc_y[K₂]·W2) · diag(φ'(z)) · (W1·W_dec_x[:,K₁])
//! Glu:       J = (W_enc_y[K₂]·W2) · (diag(h⊙φ'(g))·Wg + diag(s)·W1) · W_dec_x[:,K₁]
//! ```
//!
//! `z`, `g`, `h`, `s` come from running the MLP on the reconstruction `x̂`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{JsaeError, Result};
use crate::mlp::{MlpCache, MlpKind, MlpParams};
use crate::sae::{topk, topk_margin, SaePair, SparseActivation};

/// Default finite-difference step for 64-bit verification.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// The nonzero block of `J_{f_s}` together with its row and column sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveJacobian {
    /// `|K₂| × |K₁|` block.
    pub values: Array2<f64>,
    /// `K₂`, ascending.
    pub row_indices: Vec<usize>,
    /// `K₁`, ascending.
    pub col_indices: Vec<usize>,
    pub n_y: usize,
    pub n_x: usize,
}

impl ActiveJacobian {
    pub fn empty(n_y: usize, n_x: usize) -> Self {
        Self {
            values: Array2::zeros((0, 0)),
            row_indices: Vec::new(),
            col_indices: Vec::new(),
            n_y,
            n_x,
        }
    }

    /// Number of entries that are not exactly zero.
    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn abs_sum(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let ascending_in = |idx: &[usize], n: usize| {
            idx.windows(2).all(|w| w[0] < w[1]) && idx.last().is_none_or(|&i| i < n)
        };
        if self.values.dim() != (self.row_indices.len(), self.col_indices.len()) {
            return Err(JsaeError::invalid("active block shape does not match index sets"));
        }
        if !ascending_in(&self.row_indices, self.n_y) || !ascending_in(&self.col_indices, self.n_x) {
            return Err(JsaeError::invalid("index sets must be ascending and in range"));
        }
        Ok(())
    }
}

/// Factors of the active block that the loss gradient reuses.
#[derive(Debug, Clone)]
pub(crate) struct JacobianFactors {
    /// `W_enc_y[K₂]·W2`, `|K₂| × d_mlp`.
    pub enc_w2: Array2<f64>,
    /// `W1·W_dec_x[:,K₁]`, `d_mlp × |K₁|`.
    pub w1_dec: Array2<f64>,
    /// `Wg·W_dec_x[:,K₁]` for GLU.
    pub wg_dec: Option<Array2<f64>>,
}

/// Everything the kernel derives from a single input token.
#[derive(Debug, Clone)]
pub(crate) struct JacobianContext {
    pub s_x: SparseActivation,
    pub x_hat: Array1<f64>,
    pub cache: MlpCache,
    pub out_pre: Array1<f64>,
    pub rows: Vec<usize>,
}

impl JacobianContext {
    pub fn new(mlp: &MlpParams, pair: &SaePair, x: ArrayView1<f64>) -> Result<Self> {
        let s_x = pair.input.encode(x)?;
        Self::from_selection(mlp, pair, s_x)
    }

    pub fn from_selection(mlp: &MlpParams, pair: &SaePair, s_x: SparseActivation) -> Result<Self> {
        let x_hat = pair.input.decode(&s_x)?;
        let (f_x_hat, cache) = mlp.forward(x_hat.view())?;
        let out_pre = pair.output.pre_activations(f_x_hat.view())?;
        let rows = topk(out_pre.view(), pair.output.k)?.indices;
        Ok(Self {
            s_x,
            x_hat,
            cache,
            out_pre,
            rows,
        })
    }
}

pub(crate) fn check_dims(mlp: &MlpParams, pair: &SaePair) -> Result<()> {
    mlp.validate()?;
    pair.validate()?;
    if pair.input.m() != mlp.m_x() || pair.output.m() != mlp.m_y() {
        return Err(JsaeError::invalid(format!(
            "SAE widths ({}, {}) do not match MLP widths ({}, {})",
            pair.input.m(),
            pair.output.m(),
            mlp.m_x(),
            mlp.m_y()
        )));
    }
    Ok(())
}

pub(crate) fn factors(mlp: &MlpParams, pair: &SaePair, rows: &[usize], cols: &[usize]) -> JacobianFactors {
    let enc_w2 = pair.output.encoder_rows(rows).dot(&mlp.w2);
    let dec = pair.input.decoder_columns(cols);
    let w1_dec = mlp.w1.dot(&dec);
    let wg_dec = mlp.wg.as_ref().map(|wg| wg.dot(&dec));
    JacobianFactors {
        enc_w2,
        w1_dec,
        wg_dec,
    }
}

/// Per-hidden-unit scales `(a, b)` with `J = E·diag(a)·D1 + E·diag(b)·Dg`.
///
/// Standard MLPs have `a = φ'(z)` and no gate term; GLUs have `a = s` and
/// `b = h ⊙ φ'(g)`.
pub(crate) fn hidden_scales(mlp: &MlpParams, cache: &MlpCache) -> (Array1<f64>, Option<Array1<f64>>) {
    let act = mlp.activation;
    match &cache.glu {
        None => (cache.z.mapv(|z| act.d1(z)), None),
        Some(glu) => {
            let gate = ndarray::Zip::from(&glu.h)
                .and(&glu.g)
                .map_collect(|&h, &g| h * act.d1(g));
            (glu.s.clone(), Some(gate))
        }
    }
}

fn scale_columns(m: &Array2<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for (mut col, &s) in out.axis_iter_mut(Axis(1)).zip(scale) {
        col *= s;
    }
    out
}

pub(crate) fn assemble(mlp: &MlpParams, f: &JacobianFactors, cache: &MlpCache) -> Array2<f64> {
    let (a, b) = hidden_scales(mlp, cache);
    match mlp.kind {
        MlpKind::Standard => scale_columns(&f.enc_w2, &a).dot(&f.w1_dec),
        MlpKind::Glu => {
            let gate = b.expect("GLU cache carries gate intermediates");
            let wg_dec = f.wg_dec.as_ref().expect("GLU factors carry Wg·W_dec");
            scale_columns(&f.enc_w2, &a).dot(&f.w1_dec) + scale_columns(&f.enc_w2, &gate).dot(wg_dec)
        }
    }
}

pub(crate) fn active_jacobian_from_context(
    mlp: &MlpParams,
    pair: &SaePair,
    ctx: &JacobianContext,
) -> (ActiveJacobian, JacobianFactors) {
    let cols = ctx.s_x.indices.clone();
    let f = factors(mlp, pair, &ctx.rows, &cols);
    let values = assemble(mlp, &f, &ctx.cache);
    (
        ActiveJacobian {
            values,
            row_indices: ctx.rows.clone(),
            col_indices: cols,
            n_y: pair.output.n(),
            n_x: pair.input.n(),
        },
        f,
    )
}

/// Active block of `J_{f_s}` at the encoding of `x`.
pub fn active_jacobian(mlp: &MlpParams, pair: &SaePair, x: ArrayView1<f64>) -> Result<ActiveJacobian> {
    check_dims(mlp, pair)?;
    let ctx = JacobianContext::new(mlp, pair, x)?;
    Ok(active_jacobian_from_context(mlp, pair, &ctx).0)
}

/// Places the active block into an otherwise zero `n_y × n_x` matrix.
pub fn scatter_to_full(aj: &ActiveJacobian) -> Array2<f64> {
    let mut full = Array2::zeros((aj.n_y, aj.n_x));
    for (r, &i) in aj.row_indices.iter().enumerate() {
        for (c, &j) in aj.col_indices.iter().enumerate() {
            full[[i, j]] = aj.values[[r, c]];
        }
    }
    full
}

/// `f_s` with both supports frozen: input coordinates outside `cols` are
/// zeroed, output coordinates outside `rows` read as zero and selected
/// ones read the output encoder's pre-activation.
pub(crate) fn frozen_f_s(
    mlp: &MlpParams,
    pair: &SaePair,
    s: ArrayView1<f64>,
    cols: &[usize],
    rows: &[usize],
) -> Result<(Array1<f64>, Array1<f64>)> {
    let mut x_hat = pair.input.b_dec.clone();
    for &j in cols {
        x_hat.scaled_add(s[j], &pair.input.w_dec.column(j));
    }
    let y = mlp.apply(x_hat.view())?;
    let pre = pair.output.pre_activations(y.view())?;
    let mut out = Array1::zeros(pair.output.n());
    for &i in rows {
        out[i] = pre[i];
    }
    Ok((out, pre))
}

/// Full `n_y × n_x` Jacobian by central differences on the frozen-support
/// `f_s`; the verification oracle for [`active_jacobian`].
pub fn full_jacobian_fd(mlp: &MlpParams, pair: &SaePair, x: ArrayView1<f64>, eps: f64) -> Result<Array2<f64>> {
    check_dims(mlp, pair)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(JsaeError::invalid(format!("eps must be positive, got {eps}")));
    }
    let pre_x = pair.input.pre_activations(x)?;
    let gap_x = topk_margin(pre_x.view(), pair.input.k)?;
    if gap_x <= 10.0 * eps {
        return Err(JsaeError::DegenerateInput(format!(
            "input TopK gap {gap_x:e} is within 10·eps"
        )));
    }
    let ctx = JacobianContext::new(mlp, pair, x)?;
    let gap_y = topk_margin(ctx.out_pre.view(), pair.output.k)?;
    if gap_y <= 10.0 * eps {
        return Err(JsaeError::DegenerateInput(format!(
            "output TopK gap {gap_y:e} is within 10·eps"
        )));
    }

    let (n_y, n_x) = (pair.output.n(), pair.input.n());
    let cols = &ctx.s_x.indices;
    let rows = &ctx.rows;
    let base = ctx.s_x.to_dense();
    let mut full = Array2::zeros((n_y, n_x));
    for j in 0..n_x {
        let mut plus = base.clone();
        plus[j] += eps;
        let mut minus = base.clone();
        minus[j] -= eps;
        let (fp, pre_p) = frozen_f_s(mlp, pair, plus.view(), cols, rows)?;
        let (fm, pre_m) = frozen_f_s(mlp, pair, minus.view(), cols, rows)?;
        for pre in [&pre_p, &pre_m] {
            if topk(pre.view(), pair.output.k)?.indices != *rows {
                return Err(JsaeError::DegenerateInput(format!(
                    "output TopK membership changes under a ±eps step on latent {j}"
                )));
            }
        }
        let col = (fp - fm) / (2.0 * eps);
        full.column_mut(j).assign(&col);
    }
    Ok(full)
}
