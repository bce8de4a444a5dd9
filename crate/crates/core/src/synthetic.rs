// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale stand-ins for LLM activations.
//!
//! Activations are sparse non-negative combinations of unit-norm
//! ground-truth features. A "trained" MLP is fitted to a sparse feature
//! map in which every output feature reads at most three input features;
//! a "random" MLP is the same architecture at its seeded initialization.
//!
//! Generated activations are rounded to 32-bit precision so that a dump
//! file of the same samples drives exactly the same computation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{JsaeError, Result};
use crate::mlp::{MlpKind, MlpParams};

/// A stream of activation vectors of fixed width.
pub trait ActivationSource {
    fn width(&self) -> usize;

    /// Up to `count` further activations as rows; fewer once exhausted.
    fn next_batch(&mut self, count: usize) -> Result<Array2<f64>>;
}

/// Finite source backed by an in-memory matrix.
#[derive(Debug, Clone)]
pub struct MemorySource {
    data: Array2<f64>,
    cursor: usize,
}

impl MemorySource {
    pub fn new(data: Array2<f64>) -> Self {
        Self { data, cursor: 0 }
    }
}

impl ActivationSource for MemorySource {
    fn width(&self) -> usize {
        self.data.ncols()
    }

    fn next_batch(&mut self, count: usize) -> Result<Array2<f64>> {
        let end = (self.cursor + count).min(self.data.nrows());
        let out = self.data.slice(s![self.cursor..end, ..]).to_owned();
        self.cursor = end;
        Ok(out)
    }
}

fn unit_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut d = Array2::from_shape_simple_fn((rows, cols), || {
        // Box-Muller keeps directions uniform on the sphere.
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    for mut col in d.axis_iter_mut(Axis(1)) {
        let norm = col.dot(&col).sqrt();
        col /= norm;
    }
    d
}

/// Unit-norm feature directions and the law of their coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDictionary {
    /// `m × n_true`, unit-norm columns.
    pub directions: Array2<f64>,
    /// Expected number of active features per sample.
    pub sparsity: f64,
    pub value_lo: f64,
    pub value_hi: f64,
}

impl GroundTruthDictionary {
    /// Random directions, coefficients uniform in `[0.5, 3]`.
    pub fn random(m: usize, n_true: usize, sparsity: f64, seed: u64) -> Result<Self> {
        if m == 0 || n_true == 0 {
            return Err(JsaeError::invalid("dictionary dimensions must be positive"));
        }
        if !(sparsity >= 0.0 && sparsity <= n_true as f64) {
            return Err(JsaeError::invalid(format!(
                "sparsity {sparsity} must lie in [0, {n_true}]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            directions: unit_columns(m, n_true, &mut rng),
            sparsity,
            value_lo: 0.5,
            value_hi: 3.0,
        })
    }

    pub fn m(&self) -> usize {
        self.directions.nrows()
    }

    pub fn n_true(&self) -> usize {
        self.directions.ncols()
    }

    fn draw_codes(&self, count: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let n = self.n_true();
        let p = (self.sparsity / n as f64).clamp(0.0, 1.0);
        let mut codes = Array2::zeros((count, n));
        for mut row in codes.rows_mut() {
            for c in row.iter_mut() {
                if rng.random_bool(p) {
                    *c = rng.random_range(self.value_lo..=self.value_hi);
                }
            }
        }
        codes
    }

    /// `count` activations with their ground-truth codes (`count × n_true`).
    pub fn sample_with_codes(&self, count: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_from(count, &mut rng)
    }

    fn sample_from(&self, count: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
        let codes = self.draw_codes(count, rng);
        let xs = codes.dot(&self.directions.t()).mapv(|v| v as f32 as f64);
        (xs, codes)
    }
}

/// `count` samples `D·c`, one per row.
pub fn sample_activations(dict: &GroundTruthDictionary, count: usize, seed: u64) -> Result<Array2<f64>> {
    if count == 0 {
        return Err(JsaeError::invalid("count must be at least 1"));
    }
    Ok(dict.sample_with_codes(count, seed).0)
}

/// Unbounded seeded stream from a ground-truth dictionary.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    dict: GroundTruthDictionary,
    rng: ChaCha8Rng,
}

impl SyntheticSource {
    pub fn new(dict: GroundTruthDictionary, seed: u64) -> Self {
        Self {
            dict,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl ActivationSource for SyntheticSource {
    fn width(&self) -> usize {
        self.dict.m()
    }

    fn next_batch(&mut self, count: usize) -> Result<Array2<f64>> {
        Ok(self.dict.sample_from(count, &mut self.rng).0)
    }
}

/// Widths of an MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub m_x: usize,
    pub d_mlp: usize,
    pub m_y: usize,
}

/// Seeded uniform initialization, every tensor scaled by `1/√fan_in`.
pub fn make_random_mlp(dims: MlpDims, kind: MlpKind, activation: ActivationKind, seed: u64) -> Result<MlpParams> {
    if dims.m_x == 0 || dims.d_mlp == 0 || dims.m_y == 0 {
        return Err(JsaeError::invalid("MLP dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: (usize, usize), fan_in: usize| {
        let b = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_simple_fn(shape, || rng.random_range(-b..=b))
    };
    let w1 = uniform((dims.d_mlp, dims.m_x), dims.m_x);
    let b1 = uniform((1, dims.d_mlp), dims.m_x).remove_axis(Axis(0));
    let w2 = uniform((dims.m_y, dims.d_mlp), dims.d_mlp);
    let b2 = uniform((1, dims.m_y), dims.d_mlp).remove_axis(Axis(0));
    let (wg, bg) = match kind {
        MlpKind::Standard => (None, None),
        MlpKind::Glu => (
            Some(uniform((dims.d_mlp, dims.m_x), dims.m_x)),
            Some(uniform((1, dims.d_mlp), dims.m_x).remove_axis(Axis(0))),
        ),
    };
    Ok(MlpParams {
        kind,
        w1,
        b1,
        w2,
        b2,
        wg,
        bg,
        activation,
    })
}

/// Sparse ground-truth computation: output feature `o` is
/// `relu(Σ_{j ∈ S(o)} w_oj · c_j)` over at most three input features,
/// embedded in the output space along unit-norm directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseFeatureMap {
    /// `n_out × n_true`, at most three nonzeros per row.
    pub weights: Array2<f64>,
    /// `m_y × n_out`, unit-norm columns.
    pub out_directions: Array2<f64>,
}

impl SparseFeatureMap {
    pub fn random(n_true: usize, n_out: usize, m_y: usize, seed: u64) -> Result<Self> {
        if n_true == 0 || n_out == 0 || m_y == 0 {
            return Err(JsaeError::invalid("feature map dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Array2::zeros((n_out, n_true));
        for mut row in weights.rows_mut() {
            let fan = rng.random_range(1..=3usize.min(n_true));
            let picks = rand::seq::index::sample(&mut rng, n_true, fan);
            for (slot, j) in picks.into_iter().enumerate() {
                let mag = rng.random_range(0.5..1.5);
                // First input is excitatory so each output fires for some inputs.
                row[j] = if slot == 0 || rng.random_bool(0.5) { mag } else { -mag };
            }
        }
        Ok(Self {
            weights,
            out_directions: unit_columns(m_y, n_out, &mut rng),
        })
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }

    /// Output feature activations for ground-truth codes (rows).
    pub fn output_codes(&self, codes: ArrayView2<f64>) -> Array2<f64> {
        codes.dot(&self.weights.t()).mapv(|v| v.max(0.0))
    }

    /// Target MLP outputs for ground-truth codes (rows).
    pub fn targets(&self, codes: ArrayView2<f64>) -> Array2<f64> {
        self.output_codes(codes).dot(&self.out_directions.t())
    }
}

/// Linear readout of output-feature activations from MLP outputs; the
/// downstream task behind the reconstruction-recovery score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamTask {
    pub mlp: MlpParams,
    /// `n_out × m_y`.
    pub head: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl DownstreamTask {
    /// Head predictions from MLP outputs (rows).
    pub fn predict_from_outputs(&self, ys: ArrayView2<f64>) -> Array2<f64> {
        ys.dot(&self.head.t()) + &self.head_bias
    }

    /// Mean squared error of the head against `targets`, given MLP outputs.
    pub fn loss_from_outputs(&self, ys: ArrayView2<f64>, targets: ArrayView2<f64>) -> f64 {
        let diff = self.predict_from_outputs(ys) - targets;
        diff.mapv(|v| v * v).mean().unwrap_or(0.0)
    }

    /// Same loss, running the MLP on the given inputs first.
    pub fn loss_from_inputs(&self, xs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
        let ys = apply_rows(&self.mlp, xs)?;
        Ok(self.loss_from_outputs(ys.view(), targets))
    }
}

/// Runs `mlp` on every row of `xs`.
pub fn apply_rows(mlp: &MlpParams, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((xs.nrows(), mlp.m_y()));
    for (x, mut y) in xs.rows().into_iter().zip(out.rows_mut()) {
        y.assign(&mlp.apply(x)?);
    }
    Ok(out)
}

/// Plain gradient-descent settings for fitting a synthetic MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub batch: usize,
    pub lr: f64,
    pub max_steps: usize,
    /// Stop once the full training-set loss is below this value.
    pub loss_threshold: f64,
    /// Check the stopping rule every this many steps.
    pub check_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            train_samples: 4096,
            holdout_samples: 1024,
            batch: 256,
            lr: 0.5,
            max_steps: 4000,
            loss_threshold: 0.01,
            check_every: 100,
        }
    }
}

/// Outcome metadata of [`make_trained_mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub steps: usize,
    pub converged: bool,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
}

/// A fitted MLP with its readout head and fit diagnostics.
#[derive(Debug, Clone)]
pub struct TrainedMlp {
    pub task: DownstreamTask,
    pub report: FitReport,
}

fn fit_loss(mlp: &MlpParams, xs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    let ys = apply_rows(mlp, xs)?;
    Ok((ys - targets).mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// Fits the readout head by closed-form ridge regression.
fn fit_head(ys: ArrayView2<f64>, out_codes: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let (count, m_y) = ys.dim();
    // Augment with a constant column for the bias.
    let mut aug = Array2::ones((count, m_y + 1));
    aug.slice_mut(s![.., ..m_y]).assign(&ys);
    let mut gram = aug.t().dot(&aug);
    for i in 0..=m_y {
        gram[[i, i]] += 1e-6 * count as f64;
    }
    let rhs = aug.t().dot(&out_codes);
    let sol = cholesky_solve(gram, rhs)?;
    let head = sol.slice(s![..m_y, ..]).t().to_owned();
    let bias = sol.row(m_y).to_owned();
    Ok((head, bias))
}

fn cholesky_solve(mut a: Array2<f64>, mut b: Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if d <= 0.0 {
            return Err(JsaeError::NumericDegeneracy("readout normal equations are not positive definite".into()));
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / d;
        }
    }
    for mut col in b.axis_iter_mut(Axis(1)) {
        for i in 0..n {
            let mut v = col[i];
            for k in 0..i {
                v -= a[[i, k]] * col[k];
            }
            col[i] = v / a[[i, i]];
        }
        for i in (0..n).rev() {
            let mut v = col[i];
            for k in i + 1..n {
                v -= a[[k, i]] * col[k];
            }
            col[i] = v / a[[i, i]];
        }
    }
    Ok(b)
}

/// Fits a freshly initialized MLP to `map` by minibatch gradient descent on
/// the mean squared error between `f(D·c)` and the map's targets, then fits
/// the linear readout head. Non-convergence is reported, not fatal.
pub fn make_trained_mlp(
    dims: MlpDims,
    kind: MlpKind,
    activation: ActivationKind,
    dict: &GroundTruthDictionary,
    map: &SparseFeatureMap,
    fit: &FitConfig,
    seed: u64,
) -> Result<TrainedMlp> {
    if dict.m() != dims.m_x || map.out_directions.nrows() != dims.m_y || map.weights.ncols() != dict.n_true() {
        return Err(JsaeError::invalid("dictionary, feature map and MLP dimensions disagree"));
    }
    if fit.batch == 0 || fit.train_samples < fit.batch || fit.holdout_samples == 0 || fit.check_every == 0 {
        return Err(JsaeError::invalid("fit sample counts must be positive and cover one batch"));
    }
    let mut mlp = make_random_mlp(dims, kind, activation, seed)?;
    let (train_x, train_c) = dict.sample_with_codes(fit.train_samples, seed ^ 0xA11CE);
    let (hold_x, hold_c) = dict.sample_with_codes(fit.holdout_samples, seed ^ 0xB0B);
    let train_t = map.targets(train_c.view());
    let hold_t = map.targets(hold_c.view());

    let initial_train_loss = fit_loss(&mlp, train_x.view(), train_t.view())?;
    let initial_holdout_loss = fit_loss(&mlp, hold_x.view(), hold_t.view())?;
    let mut final_train_loss = initial_train_loss;
    let mut converged = final_train_loss < fit.loss_threshold;
    let batches = fit.train_samples / fit.batch;
    let mut steps = 0;
    while !converged && steps < fit.max_steps {
        let b = steps % batches;
        let xs = train_x.slice(s![b * fit.batch..(b + 1) * fit.batch, ..]);
        let ts = train_t.slice(s![b * fit.batch..(b + 1) * fit.batch, ..]);
        let mut grads = mlp.zero_grads();
        let scale = 2.0 / (fit.batch * dims.m_y) as f64;
        for (x, t) in xs.rows().into_iter().zip(ts.rows()) {
            let (y, cache) = mlp.forward(x)?;
            let dy = (y - t) * scale;
            mlp.backward_accumulate(x, &cache, dy.view(), &mut grads);
        }
        mlp.w1.scaled_add(-fit.lr, &grads.w1);
        mlp.b1.scaled_add(-fit.lr, &grads.b1);
        mlp.w2.scaled_add(-fit.lr, &grads.w2);
        mlp.b2.scaled_add(-fit.lr, &grads.b2);
        if let (Some(w), Some(g)) = (mlp.wg.as_mut(), grads.wg.as_ref()) {
            w.scaled_add(-fit.lr, g);
        }
        if let (Some(b), Some(g)) = (mlp.bg.as_mut(), grads.bg.as_ref()) {
            b.scaled_add(-fit.lr, g);
        }
        steps += 1;
        if steps % fit.check_every == 0 || steps == fit.max_steps {
            final_train_loss = fit_loss(&mlp, train_x.view(), train_t.view())?;
            converged = final_train_loss < fit.loss_threshold;
        }
    }
    let final_holdout_loss = fit_loss(&mlp, hold_x.view(), hold_t.view())?;

    let train_y = apply_rows(&mlp, train_x.view())?;
    let (head, head_bias) = fit_head(train_y.view(), map.output_codes(train_c.view()).view())?;
    Ok(TrainedMlp {
        task: DownstreamTask { mlp, head, head_bias },
        report: FitReport {
            steps,
            converged,
            initial_train_loss,
            final_train_loss,
            initial_holdout_loss,
            final_holdout_loss,
        },
    })
}

/// Readout head for an arbitrary (e.g. random) MLP on the same task.
pub fn fit_task_head(
    mlp: &MlpParams,
    dict: &GroundTruthDictionary,
    map: &SparseFeatureMap,
    samples: usize,
    seed: u64,
) -> Result<DownstreamTask> {
    let (xs, codes) = dict.sample_with_codes(samples, seed);
    let ys = apply_rows(mlp, xs.view())?;
    let (head, head_bias) = fit_head(ys.view(), map.output_codes(codes.view()).view())?;
    Ok(DownstreamTask {
        mlp: mlp.clone(),
        head,
        head_bias,
    })
}

/// Mean over tokens and coordinates of the squared deviation from the
/// per-coordinate mean of `f(x)`.
pub fn output_variance(mlp: &MlpParams, xs: ArrayView2<f64>) -> Result<f64> {
    let ys = apply_rows(mlp, xs)?;
    let mean = ys
        .mean_axis(Axis(0))
        .ok_or_else(|| JsaeError::invalid("at least one sample is required"))?;
    Ok((&ys - &mean).mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// Rescales the output layer so that `f(x)` has variance `target` on `xs`.
/// Returns the applied factor.
pub fn match_output_variance(mlp: &mut MlpParams, xs: ArrayView2<f64>, target: f64) -> Result<f64> {
    let current = output_variance(mlp, xs)?;
    if !(current > 0.0) || !(target > 0.0) {
        return Err(JsaeError::NumericDegeneracy("output variance must be positive".into()));
    }
    let factor = (target / current).sqrt();
    mlp.w2 *= factor;
    mlp.b2 *= factor;
    Ok(factor)
}

/// Mean number of nonzero coefficients per row.
pub fn mean_support(codes: ArrayView2<f64>) -> f64 {
    let nnz = codes.iter().filter(|&&c| c != 0.0).count();
    nnz as f64 / codes.nrows().max(1) as f64
}

/// Whether `v` is a non-negative multiple of `dir`, up to `tol`.
pub fn is_nonneg_multiple(v: ArrayView1<f64>, dir: ArrayView1<f64>, tol: f64) -> bool {
    let scale = v.dot(&dir) / dir.dot(&dir);
    scale >= 0.0 && (&v - &(&dir * scale)).iter().all(|r| r.abs() <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictionary_columns_are_unit_norm() {
        let d = GroundTruthDictionary::random(8, 20, 3.0, 1).unwrap();
        for c in d.directions.axis_iter(Axis(1)) {
            assert!((c.dot(&c).sqrt() - 1.0).abs() < 1e-12);
        }
        assert!(GroundTruthDictionary::random(8, 20, 21.0, 1).is_err());
    }

    #[test]
    fn zero_sparsity_gives_zero_vectors() {
        let d = GroundTruthDictionary::random(4, 10, 0.0, 2).unwrap();
        let xs = sample_activations(&d, 50, 3).unwrap();
        assert!(xs.iter().all(|&v| v == 0.0));
        assert!(sample_activations(&d, 0, 3).is_err());
    }

    #[test]
    fn single_feature_samples_are_positive_multiples() {
        let d = GroundTruthDictionary::random(5, 1, 1.0, 4).unwrap();
        let xs = sample_activations(&d, 40, 5).unwrap();
        for x in xs.rows() {
            // f32 rounding of the stored sample.
            assert!(is_nonneg_multiple(x, d.directions.column(0), 1e-6));
            assert!(x.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn mean_support_matches_sparsity() {
        let d = GroundTruthDictionary::random(16, 64, 4.0, 6).unwrap();
        let (_, codes) = d.sample_with_codes(10_000, 7);
        let mean = mean_support(codes.view());
        assert!((mean - 4.0).abs() / 4.0 < 0.05, "{mean}");
    }

    #[test]
    fn samples_are_f32_exact_and_deterministic() {
        let d = GroundTruthDictionary::random(6, 12, 2.0, 8).unwrap();
        let a = sample_activations(&d, 30, 9).unwrap();
        let b = sample_activations(&d, 30, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v as f32 as f64 == v));
    }

    #[test]
    fn synthetic_source_streams_consistently() {
        let d = GroundTruthDictionary::random(6, 12, 2.0, 8).unwrap();
        let mut one = SyntheticSource::new(d.clone(), 3);
        let mut two = SyntheticSource::new(d, 3);
        let whole = one.next_batch(20).unwrap();
        let mut parts = two.next_batch(7).unwrap().into_raw_vec_and_offset().0;
        parts.extend(two.next_batch(13).unwrap().into_raw_vec_and_offset().0);
        assert_eq!(whole.into_raw_vec_and_offset().0, parts);
    }

    #[test]
    fn random_mlp_is_seeded() {
        let dims = MlpDims { m_x: 4, d_mlp: 9, m_y: 3 };
        let a = make_random_mlp(dims, MlpKind::Glu, ActivationKind::GeluTanh, 5).unwrap();
        let b = make_random_mlp(dims, MlpKind::Glu, ActivationKind::GeluTanh, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.validate().is_ok());
        assert!(a.w1.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn feature_map_fan_in_is_at_most_three() {
        let map = SparseFeatureMap::random(20, 15, 6, 1).unwrap();
        for row in map.weights.rows() {
            let nnz = row.iter().filter(|&&w| w != 0.0).count();
            assert!((1..=3).contains(&nnz));
        }
    }

    #[test]
    fn trained_mlp_beats_its_initialization() {
        let dims = MlpDims { m_x: 8, d_mlp: 32, m_y: 8 };
        let dict = GroundTruthDictionary::random(8, 16, 2.0, 1).unwrap();
        let map = SparseFeatureMap::random(16, 16, 8, 2).unwrap();
        let fit = FitConfig {
            train_samples: 1024,
            holdout_samples: 512,
            batch: 128,
            max_steps: 600,
            ..FitConfig::default()
        };
        for kind in [MlpKind::Standard, MlpKind::Glu] {
            let trained = make_trained_mlp(dims, kind, ActivationKind::GeluTanh, &dict, &map, &fit, 3).unwrap();
            let r = &trained.report;
            assert!(r.final_holdout_loss < r.initial_holdout_loss, "{kind:?}: {r:?}");
            assert!(r.steps > 0);
        }
    }

    #[test]
    fn output_variance_matching() {
        let dims = MlpDims { m_x: 5, d_mlp: 7, m_y: 4 };
        let mut mlp = make_random_mlp(dims, MlpKind::Standard, ActivationKind::GeluTanh, 9).unwrap();
        let d = GroundTruthDictionary::random(5, 8, 2.0, 1).unwrap();
        let xs = sample_activations(&d, 300, 2).unwrap();
        match_output_variance(&mut mlp, xs.view(), 2.5).unwrap();
        assert!((output_variance(&mlp, xs.view()).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn head_fit_recovers_linear_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ys = Array2::from_shape_simple_fn((200, 3), || rng.random_range(-1.0..1.0));
        let true_head = ndarray::array![[1.0, -2.0, 0.5], [0.0, 1.0, 1.0]];
        let codes = ys.dot(&true_head.t()) + 0.25;
        let (head, bias) = fit_head(ys.view(), codes.view()).unwrap();
        for (a, b) in head.iter().zip(&true_head) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!(bias.iter().all(|b| (b - 0.25).abs() < 1e-3));
    }
}
