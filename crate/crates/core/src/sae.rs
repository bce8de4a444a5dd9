// SPDX-License-Identifier: MIT OR Apache-2.0

//! TopK sparse autoencoders.
//!
//! Encoding clamps the pre-activations with a ReLU and keeps the `k` largest
//! entries (ties go to the lower index). Latents that are zero after the
//! clamp are dropped, so an encoding can carry fewer than `k` indices.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

use crate::error::{JsaeError, Result};

/// A `k`-sparse latent vector stored as ascending `(index, value)` lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseActivation {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub n: usize,
    pub k: usize,
}

impl SparseActivation {
    pub fn empty(n: usize, k: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            n,
            k,
        }
    }

    /// Builds from parallel lists, validating the ordering and range invariants.
    pub fn new(indices: Vec<usize>, values: Vec<f64>, n: usize, k: usize) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(JsaeError::invalid(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        if indices.len() > k {
            return Err(JsaeError::invalid(format!(
                "{} active latents exceed k = {k}",
                indices.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(JsaeError::invalid("indices must be strictly ascending"));
        }
        if let Some(&last) = indices.last() {
            if last >= n {
                return Err(JsaeError::invalid(format!("index {last} out of range for n = {n}")));
            }
        }
        Ok(Self {
            indices,
            values,
            n,
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Value at latent `j`, zero when inactive.
    pub fn get(&self, j: usize) -> f64 {
        self.indices
            .binary_search(&j)
            .map(|p| self.values[p])
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Array1<f64> {
        let mut out = Array1::zeros(self.n);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }
}

/// Ordering used for selection: larger value first, then lower index.
#[inline]
fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

#[inline]
fn relu(v: f64) -> f64 {
    // NaN maps to 0 here, keeping the selection order total.
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn ranked_prefix(v: ArrayView1<f64>, count: usize) -> Vec<(usize, f64)> {
    let mut entries: Vec<(usize, f64)> = v.iter().map(|&x| relu(x)).enumerate().collect();
    if count < entries.len() {
        entries.select_nth_unstable_by(count, |a, b| rank_order(*a, *b));
        entries.truncate(count);
    }
    entries.sort_unstable_by(|a, b| rank_order(*a, *b));
    entries
}

/// Keeps the `k` largest entries of `max(v, 0)`; zeros are dropped.
pub fn topk(v: ArrayView1<f64>, k: usize) -> Result<SparseActivation> {
    let n = v.len();
    if k == 0 || k > n {
        return Err(JsaeError::invalid(format!("k = {k} must lie in [1, {n}]")));
    }
    let mut chosen: Vec<(usize, f64)> = ranked_prefix(v, k)
        .into_iter()
        .filter(|&(_, x)| x > 0.0)
        .collect();
    chosen.sort_unstable_by_key(|&(i, _)| i);
    let (indices, values) = chosen.into_iter().unzip();
    Ok(SparseActivation {
        indices,
        values,
        n,
        k,
    })
}

/// Gap separating the entries chosen by [`topk`] from the rest.
///
/// A perturbation of max-norm `δ` on `v` cannot change the selection when
/// the gap exceeds `2δ`.
/// Selected entries must stay above both zero and every unselected entry;
/// when fewer than `k` survive the clamp, unselected entries must stay
/// non-positive instead.
pub fn topk_margin(v: ArrayView1<f64>, k: usize) -> Result<f64> {
    let sel = topk(v, k)?;
    let min_selected = sel.values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut max_unselected = f64::NEG_INFINITY;
    let mut cursor = 0;
    for (i, &x) in v.iter().enumerate() {
        if cursor < sel.indices.len() && sel.indices[cursor] == i {
            cursor += 1;
            continue;
        }
        max_unselected = max_unselected.max(x);
    }
    let gap = if sel.len() == k {
        min_selected - max_unselected.max(0.0)
    } else {
        min_selected.min(-max_unselected)
    };
    Ok(gap)
}

/// Encoder/decoder weights of one TopK SAE.
///
/// `w_enc` is `n × m`, `w_dec` is `m × n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeParams {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub k: usize,
}

impl SaeParams {
    /// Activation width.
    pub fn m(&self) -> usize {
        self.w_enc.ncols()
    }

    /// Latent count.
    pub fn n(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.w_enc.dim();
        if self.b_enc.len() != n || self.w_dec.dim() != (m, n) || self.b_dec.len() != m {
            return Err(JsaeError::invalid(format!(
                "inconsistent SAE shapes: w_enc {:?}, b_enc {}, w_dec {:?}, b_dec {}",
                self.w_enc.dim(),
                self.b_enc.len(),
                self.w_dec.dim(),
                self.b_dec.len()
            )));
        }
        if self.k == 0 || self.k > n {
            return Err(JsaeError::invalid(format!("k = {} must lie in [1, {n}]", self.k)));
        }
        Ok(())
    }

    fn check_input(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.m() {
            return Err(JsaeError::invalid(format!(
                "input width {} does not match SAE width {}",
                x.len(),
                self.m()
            )));
        }
        Ok(())
    }

    /// `W_enc·x + b_enc`.
    pub fn pre_activations(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        Ok(self.w_enc.dot(&x) + &self.b_enc)
    }

    pub fn encode(&self, x: ArrayView1<f64>) -> Result<SparseActivation> {
        let pre = self.pre_activations(x)?;
        topk(pre.view(), self.k)
    }

    /// `W_dec·s + b_dec`, touching only the active columns.
    pub fn decode(&self, s: &SparseActivation) -> Result<Array1<f64>> {
        if s.n != self.n() {
            return Err(JsaeError::invalid(format!(
                "latent width {} does not match SAE latent count {}",
                s.n,
                self.n()
            )));
        }
        let mut out = self.b_dec.clone();
        for (&j, &v) in s.indices.iter().zip(&s.values) {
            if j >= self.n() {
                return Err(JsaeError::invalid(format!("latent index {j} out of range")));
            }
            out.scaled_add(v, &self.w_dec.column(j));
        }
        Ok(out)
    }

    /// Decoder columns restricted to `indices`, as an `m × |indices|` matrix.
    pub fn decoder_columns(&self, indices: &[usize]) -> Array2<f64> {
        self.w_dec.select(Axis(1), indices)
    }

    /// Encoder rows restricted to `indices`, as a `|indices| × m` matrix.
    pub fn encoder_rows(&self, indices: &[usize]) -> Array2<f64> {
        self.w_enc.select(Axis(0), indices)
    }

    /// Rescales every decoder column to unit Euclidean norm.
    pub fn renormalize_decoder(&mut self) -> Result<()> {
        for (j, mut col) in self.w_dec.axis_iter_mut(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(JsaeError::NumericDegeneracy(format!(
                    "decoder column {j} has norm {norm}"
                )));
            }
            col.mapv_inplace(|v| v / norm);
        }
        Ok(())
    }

    /// `[w_enc, b_enc, w_dec, b_dec]`, in [`SAE_TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [ArrayViewD<'_, f64>; 4] {
        [
            self.w_enc.view().into_dyn(),
            self.b_enc.view().into_dyn(),
            self.w_dec.view().into_dyn(),
            self.b_dec.view().into_dyn(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [ArrayViewMutD<'_, f64>; 4] {
        [
            self.w_enc.view_mut().into_dyn(),
            self.b_enc.view_mut().into_dyn(),
            self.w_dec.view_mut().into_dyn(),
            self.b_dec.view_mut().into_dyn(),
        ]
    }

    /// Largest deviation of any decoder column norm from 1.
    pub fn max_decoder_norm_deviation(&self) -> f64 {
        self.w_dec
            .axis_iter(Axis(1))
            .map(|c| (c.dot(&c).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub const SAE_TENSOR_NAMES: [&str; 4] = ["w_enc", "b_enc", "w_dec", "b_dec"];

/// Seeded initialization: encoder uniform in `±1/√m`, decoder is the
/// transposed encoder with unit-norm columns, biases zero.
pub fn init_sae(m: usize, n: usize, k: usize, seed: u64) -> Result<SaeParams> {
    if m == 0 || k == 0 || k > n {
        return Err(JsaeError::invalid(format!(
            "init_sae needs m ≥ 1 and 1 ≤ k ≤ n (got m = {m}, n = {n}, k = {k})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (m as f64).sqrt();
    let w_enc = Array2::from_shape_simple_fn((n, m), || rng.random_range(-bound..=bound));
    let mut sae = SaeParams {
        w_dec: w_enc.t().as_standard_layout().into_owned(),
        w_enc,
        b_enc: Array1::zeros(n),
        b_dec: Array1::zeros(m),
        k,
    };
    sae.renormalize_decoder()?;
    Ok(sae)
}

/// Input-side and output-side SAEs trained together around one MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaePair {
    pub input: SaeParams,
    pub output: SaeParams,
}

impl SaePair {
    pub fn init(m_x: usize, m_y: usize, n: usize, k: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            input: init_sae(m_x, n, k, seed)?,
            output: init_sae(m_y, n, k, seed.wrapping_add(0x9E37_79B9_7F4A_7C15))?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        self.output.validate()
    }

    /// All eight parameter tensors with `input.`/`output.` prefixed names.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        named(&self.input.tensors(), &self.output.tensors())
    }

    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let [a, b, c, d] = self.input.tensors_mut();
        let [e, f, g, h] = self.output.tensors_mut();
        vec![a, b, c, d, e, f, g, h]
    }
}

fn named<'a>(input: &[ArrayViewD<'a, f64>; 4], output: &[ArrayViewD<'a, f64>; 4]) -> Vec<(String, ArrayViewD<'a, f64>)> {
    let side = |prefix: &str, ts: &[ArrayViewD<'a, f64>; 4]| {
        SAE_TENSOR_NAMES
            .iter()
            .zip(ts.iter())
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect::<Vec<_>>()
    };
    let mut out = side("input", input);
    out.extend(side("output", output));
    out
}

/// Tokens elapsed since each latent last appeared in a TopK selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLatentTracker {
    last_fired: Vec<u64>,
    window: u64,
}

impl DeadLatentTracker {
    pub fn new(n: usize, window: u64) -> Self {
        Self {
            last_fired: vec![0; n],
            window,
        }
    }

    /// Records one batch of encodings, in token order.
    pub fn observe<'a>(&mut self, batch: impl IntoIterator<Item = &'a SparseActivation>) {
        let mut last_pos: Vec<Option<u64>> = vec![None; self.last_fired.len()];
        let mut len = 0u64;
        for (t, s) in batch.into_iter().enumerate() {
            for &i in &s.indices {
                last_pos[i] = Some(t as u64);
            }
            len = t as u64 + 1;
        }
        for (counter, pos) in self.last_fired.iter_mut().zip(last_pos) {
            *counter = match pos {
                Some(p) => len - 1 - p,
                None => counter.saturating_add(len),
            };
        }
    }

    pub fn since_last_fired(&self) -> &[u64] {
        &self.last_fired
    }

    pub fn dead(&self) -> Vec<usize> {
        self.last_fired
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c >= self.window)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn dead_count(&self) -> usize {
        self.last_fired.iter().filter(|&&c| c >= self.window).count()
    }
}
