// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-dimensional slices of `f_s`.
//!
//! For a token with input code `s_x`, the scalar function `(i, j)` sweeps
//! input latent `j` over `[0, max(5, s_j + 1)]` and reads output latent `i`.
//! Both supports stay frozen during a sweep: the input support is
//! `K₁ ∪ {j}` and output coordinate `i` is read before the output TopK.

use ndarray::{Array1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{JsaeError, Result};
use crate::jacobian::{assemble, check_dims, factors, frozen_f_s, JacobianContext};
use crate::mlp::MlpParams;
use crate::sae::{SaePair, SparseActivation};

pub const DEFAULT_GRID_POINTS: usize = 256;
pub const DEFAULT_TOLERANCE: f64 = 0.01;
pub const DEFAULT_SECOND_DIFF_STEP: f64 = 0.005;

/// Dense copy of `s` with coordinate `j` replaced by `x_val`.
pub fn psi(s: &SparseActivation, j: usize, x_val: f64) -> Result<Array1<f64>> {
    if j >= s.n {
        return Err(JsaeError::invalid(format!("latent {j} out of range for n = {}", s.n)));
    }
    let mut dense = s.to_dense();
    dense[j] = x_val;
    Ok(dense)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarFunctionSample {
    pub i: usize,
    pub j: usize,
    pub base: SparseActivation,
    pub grid_x: Vec<f64>,
    pub grid_y: Vec<f64>,
    pub domain_hi: f64,
}

fn frozen_cols(s_x: &SparseActivation, j: usize) -> Vec<usize> {
    let mut cols = s_x.indices.clone();
    if !cols.contains(&j) {
        cols.push(j);
    }
    cols
}

fn check_indices(pair: &SaePair, s_x: &SparseActivation, i: usize, j: usize) -> Result<()> {
    if s_x.n != pair.input.n() {
        return Err(JsaeError::invalid(format!(
            "code has {} latents, input SAE has {}",
            s_x.n,
            pair.input.n()
        )));
    }
    if i >= pair.output.n() || j >= pair.input.n() {
        return Err(JsaeError::invalid(format!(
            "latent pair ({i}, {j}) out of range for ({}, {})",
            pair.output.n(),
            pair.input.n()
        )));
    }
    Ok(())
}

/// Value of the frozen-support scalar function `(i, j)` at `x`.
pub fn scalar_f_s(mlp: &MlpParams, pair: &SaePair, s_x: &SparseActivation, i: usize, j: usize, x: f64) -> Result<f64> {
    check_dims(mlp, pair)?;
    check_indices(pair, s_x, i, j)?;
    let cols = frozen_cols(s_x, j);
    let (out, _) = frozen_f_s(mlp, pair, psi(s_x, j, x)?.view(), &cols, &[i])?;
    Ok(out[i])
}

/// `max(5, s_j + 1)`.
pub fn domain_hi(s_x: &SparseActivation, j: usize) -> f64 {
    (s_x.get(j) + 1.0).max(5.0)
}

/// Evaluates the scalar function `(i, j)` on `grid_points` equally spaced
/// points spanning `[0, domain_hi]`.
pub fn sample_scalar_function(
    mlp: &MlpParams,
    pair: &SaePair,
    s_x: &SparseActivation,
    i: usize,
    j: usize,
    grid_points: usize,
) -> Result<ScalarFunctionSample> {
    check_dims(mlp, pair)?;
    check_indices(pair, s_x, i, j)?;
    if grid_points < 2 {
        return Err(JsaeError::invalid("at least two grid points are required"));
    }
    let hi = domain_hi(s_x, j);
    let cols = frozen_cols(s_x, j);
    let mut dense = s_x.to_dense();
    let mut grid_x = Vec::with_capacity(grid_points);
    let mut grid_y = Vec::with_capacity(grid_points);
    for p in 0..grid_points {
        let x = hi * p as f64 / (grid_points - 1) as f64;
        dense[j] = x;
        let (out, _) = frozen_f_s(mlp, pair, dense.view(), &cols, &[i])?;
        grid_x.push(x);
        grid_y.push(out[i]);
    }
    Ok(ScalarFunctionSample {
        i,
        j,
        base: s_x.clone(),
        grid_x,
        grid_y,
        domain_hi: hi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FunctionTag {
    Linear,
    JumpRelu,
    Other,
}

/// Best-fitting parameters of either family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FitParams {
    Line {
        slope: f64,
        intercept: f64,
    },
    /// Zero on one side of `jump_at`, `slope·x + intercept` on the other.
    Jump {
        jump_at: f64,
        active_above: bool,
        slope: f64,
        intercept: f64,
    },
}

impl FitParams {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            FitParams::Line { slope, intercept } => slope * x + intercept,
            FitParams::Jump {
                jump_at,
                active_above,
                slope,
                intercept,
            } => {
                if (x > jump_at) == active_above {
                    slope * x + intercept
                } else {
                    0.0
                }
            }
        }
    }

    /// `(a, b, c, d)` with `f(x) = a·JumpReLU_d(b·x + c)`, where
    /// `JumpReLU_d(u) = u` for `u > d` and `0` otherwise. Flat active
    /// pieces are outside the family and give `None`.
    pub fn jump_relu_form(&self) -> Option<(f64, f64, f64, f64)> {
        match *self {
            FitParams::Line { .. } => None,
            FitParams::Jump {
                jump_at,
                active_above,
                slope,
                intercept,
            } => {
                if slope == 0.0 {
                    return None;
                }
                // Orient b so that "u > d" selects the active side.
                let a = if (slope > 0.0) == active_above { 1.0 } else { -1.0 };
                let (b, c) = (slope / a, intercept / a);
                Some((a, b, c, b * jump_at + c))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionClass {
    pub tag: FunctionTag,
    /// Fit of the assigned family; for `Other`, the better of the two.
    pub fit: FitParams,
    /// Normalized residual of `fit`.
    pub residual: f64,
}

#[derive(Default, Clone, Copy)]
struct Sums {
    n: f64,
    x: f64,
    y: f64,
    xx: f64,
    xy: f64,
    yy: f64,
}

impl Sums {
    fn add(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.x += x;
        self.y += y;
        self.xx += x * x;
        self.xy += x * y;
        self.yy += y * y;
    }

    fn minus(&self, o: &Sums) -> Sums {
        Sums {
            n: self.n - o.n,
            x: self.x - o.x,
            y: self.y - o.y,
            xx: self.xx - o.xx,
            xy: self.xy - o.xy,
            yy: self.yy - o.yy,
        }
    }

    /// Least-squares line and its sum of squared errors.
    fn line(&self) -> (f64, f64, f64) {
        if self.n == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let var_x = self.xx - self.x * self.x / self.n;
        let cov = self.xy - self.x * self.y / self.n;
        let var_y = self.yy - self.y * self.y / self.n;
        let slope = if var_x > 1e-300 { cov / var_x } else { 0.0 };
        let intercept = (self.y - slope * self.x) / self.n;
        let sse = (var_y - slope * cov).max(0.0);
        (slope, intercept, sse)
    }
}

fn normalized_residual(sse: f64, n: usize, scale: f64) -> f64 {
    (sse / n as f64).sqrt() / (scale + 1e-12)
}

/// Direct least-squares line through the points.
fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    (slope, intercept, sse)
}

/// Best zero-then-affine fit with the jump at a grid midpoint.
fn fit_jump(xs: &[f64], ys: &[f64]) -> (FitParams, f64) {
    let n = xs.len();
    let mut prefix = vec![Sums::default(); n + 1];
    for p in 0..n {
        let mut s = prefix[p];
        s.add(xs[p], ys[p]);
        prefix[p + 1] = s;
    }
    let total = prefix[n];
    let mut best = (
        FitParams::Line {
            slope: 0.0,
            intercept: 0.0,
        },
        f64::INFINITY,
    );
    for split in 1..n {
        let below = prefix[split];
        let above = total.minus(&below);
        let jump_at = 0.5 * (xs[split - 1] + xs[split]);
        for active_above in [true, false] {
            let (active, zero) = if active_above { (above, below) } else { (below, above) };
            let (slope, intercept, sse) = active.line();
            let sse = sse + zero.yy;
            if sse < best.1 {
                best = (
                    FitParams::Jump {
                        jump_at,
                        active_above,
                        slope,
                        intercept,
                    },
                    sse,
                );
            }
        }
    }
    best
}

/// Assigns the sample to the first family whose normalized residual is
/// below `tol`: lines first, then the JumpReLU family.
pub fn classify(sample: &ScalarFunctionSample, tol: f64) -> FunctionClass {
    classify_points(&sample.grid_x, &sample.grid_y, tol)
}

pub fn classify_points(xs: &[f64], ys: &[f64], tol: f64) -> FunctionClass {
    let n = xs.len().max(1);
    let scale = ys.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    let (slope, intercept, sse) = fit_line(xs, ys);
    let line = FunctionClass {
        tag: FunctionTag::Linear,
        fit: FitParams::Line { slope, intercept },
        residual: normalized_residual(sse, n, scale),
    };
    if line.residual < tol {
        return line;
    }
    let (fit, sse) = fit_jump(xs, ys);
    let jump = FunctionClass {
        tag: FunctionTag::JumpRelu,
        fit,
        residual: normalized_residual(sse, n, scale),
    };
    if jump.residual < tol {
        return jump;
    }
    let better = if jump.residual < line.residual { jump } else { line };
    FunctionClass {
        tag: FunctionTag::Other,
        ..better
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondDerivativeStats {
    pub mean: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
    /// Grid points whose stencil fits inside the domain.
    pub points: usize,
}

/// Central second differences of `f` at the grid points of `xs` whose
/// stencil `x ± h` lies inside `[0, hi]`.
pub fn second_differences(
    mut f: impl FnMut(f64) -> Result<f64>,
    xs: &[f64],
    hi: f64,
    h: f64,
) -> Result<SecondDerivativeStats> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(JsaeError::invalid(format!("step h must be positive, got {h}")));
    }
    let (mut sum, mut sum_abs, mut max_abs, mut points) = (0.0, 0.0, 0.0f64, 0usize);
    for &x in xs {
        if x - h < 0.0 || x + h > hi {
            continue;
        }
        let d2 = (f(x + h)? - 2.0 * f(x)? + f(x - h)?) / (h * h);
        sum += d2;
        sum_abs += d2.abs();
        max_abs = max_abs.max(d2.abs());
        points += 1;
    }
    if points == 0 {
        return Err(JsaeError::invalid("no grid point has its stencil inside the domain"));
    }
    Ok(SecondDerivativeStats {
        mean: sum / points as f64,
        mean_abs: sum_abs / points as f64,
        max_abs,
        points,
    })
}

/// Second-difference statistics of a sampled scalar function.
pub fn second_derivative_stats(
    mlp: &MlpParams,
    pair: &SaePair,
    sample: &ScalarFunctionSample,
    h: f64,
) -> Result<SecondDerivativeStats> {
    let (i, j) = (sample.i, sample.j);
    second_differences(
        |x| scalar_f_s(mlp, pair, &sample.base, i, j, x),
        &sample.grid_x,
        sample.domain_hi,
        h,
    )
}

/// `∂ s_{y,i} / ∂ s_{x,j}` at `s_x` with the input support frozen to `K₁`.
fn jacobian_entry(mlp: &MlpParams, pair: &SaePair, ctx: &JacobianContext, i: usize, j: usize) -> f64 {
    let f = factors(mlp, pair, &[i], &[j]);
    assemble(mlp, &f, &ctx.cache)[[0, 0]]
}

/// Whether lowering `s_{x,j}` by one changes output `i` by about `|J_ij|`.
pub fn delta_agrees(mlp: &MlpParams, pair: &SaePair, s_x: &SparseActivation, i: usize, j: usize) -> Result<bool> {
    check_dims(mlp, pair)?;
    check_indices(pair, s_x, i, j)?;
    let s_j = s_x.get(j);
    if !s_x.indices.contains(&j) || s_j < 1.0 {
        return Err(JsaeError::invalid(format!(
            "latent {j} must be active with value at least 1, got {s_j}"
        )));
    }
    let ctx = JacobianContext::from_selection(mlp, pair, s_x.clone())?;
    let jac = jacobian_entry(mlp, pair, &ctx, i, j).abs();
    let cols = &s_x.indices;
    let base = frozen_f_s(mlp, pair, s_x.to_dense().view(), cols, &[i])?.0[i];
    let lowered = frozen_f_s(mlp, pair, psi(s_x, j, s_j - 1.0)?.view(), cols, &[i])?.0[i];
    let delta = (base - lowered).abs();
    Ok((delta - jac).abs() < 0.05 * jac.max(0.01))
}

/// Fraction of `(i, j)` pairs for which [`delta_agrees`] holds.
pub fn delta_prediction_check(
    mlp: &MlpParams,
    pair: &SaePair,
    s_x: &SparseActivation,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(JsaeError::invalid("at least one latent pair is required"));
    }
    let mut agree = 0usize;
    for &(i, j) in pairs {
        if delta_agrees(mlp, pair, s_x, i, j)? {
            agree += 1;
        }
    }
    Ok(agree as f64 / pairs.len() as f64)
}

/// Token and latent pair drawn for a population study.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationDraw {
    pub token: usize,
    pub s_x: SparseActivation,
    pub i: usize,
    pub j: usize,
}

/// Draws `count` tokens uniformly from `xs`, then `i` uniformly from the
/// token's active output latents and `j` from its active input latents.
/// Tokens with an empty support on either side are redrawn.
pub fn sample_population(
    mlp: &MlpParams,
    pair: &SaePair,
    xs: ArrayView2<f64>,
    count: usize,
    seed: u64,
) -> Result<Vec<PopulationDraw>> {
    check_dims(mlp, pair)?;
    if xs.nrows() == 0 || xs.ncols() != mlp.m_x() {
        return Err(JsaeError::invalid("a non-empty token matrix of MLP input width is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count.max(1) {
            return Err(JsaeError::DegenerateInput(
                "too few tokens with active latents on both sides".into(),
            ));
        }
        let token = rng.random_range(0..xs.nrows());
        let ctx = JacobianContext::new(mlp, pair, xs.row(token))?;
        if ctx.rows.is_empty() || ctx.s_x.is_empty() {
            continue;
        }
        let i = ctx.rows[rng.random_range(0..ctx.rows.len())];
        let j = ctx.s_x.indices[rng.random_range(0..ctx.s_x.len())];
        out.push(PopulationDraw {
            token,
            s_x: ctx.s_x,
            i,
            j,
        });
    }
    Ok(out)
}

/// Aggregate of a population study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub samples: usize,
    pub linear: f64,
    pub jump_relu: f64,
    pub other: f64,
    /// Per-sample second-difference statistics, in draw order.
    pub second_derivatives: Vec<SecondDerivativeStats>,
    /// Agreement fraction over draws with `s_{x,j} ≥ 1`; `None` if there are none.
    pub delta_agreement: Option<f64>,
    pub delta_pairs: usize,
}

impl LinearityReport {
    /// Histogram of `mean_abs` second differences: `bin_lo,bin_hi,count`
    /// over `bins` log-spaced bins from `1e-6` to `1e2`, plus under- and
    /// overflow rows.
    pub fn write_second_derivative_csv(&self, mut out: impl std::io::Write, bins: usize) -> std::io::Result<()> {
        let bins = bins.max(1);
        let (lo, hi) = (-6.0f64, 2.0f64);
        let mut counts = vec![0usize; bins + 2];
        for s in &self.second_derivatives {
            let v = s.mean_abs;
            let slot = if !(v > 10f64.powf(lo)) {
                0
            } else if v >= 10f64.powf(hi) {
                bins + 1
            } else {
                1 + (((v.log10() - lo) / (hi - lo)) * bins as f64).floor() as usize
            };
            counts[slot.min(bins + 1)] += 1;
        }
        writeln!(out, "bin_lo,bin_hi,count")?;
        writeln!(out, "0,{:?},{}", 10f64.powf(lo), counts[0])?;
        for b in 0..bins {
            let a = lo + (hi - lo) * b as f64 / bins as f64;
            let c = lo + (hi - lo) * (b + 1) as f64 / bins as f64;
            writeln!(out, "{:?},{:?},{}", 10f64.powf(a), 10f64.powf(c), counts[b + 1])?;
        }
        writeln!(out, "{:?},inf,{}", 10f64.powf(hi), counts[bins + 1])?;
        Ok(())
    }
}

/// Classifies `count` sampled scalar functions and runs the second
/// difference and intervention checks on the same draws.
pub fn analyze_population(
    mlp: &MlpParams,
    pair: &SaePair,
    xs: ArrayView2<f64>,
    count: usize,
    grid_points: usize,
    tol: f64,
    seed: u64,
) -> Result<LinearityReport> {
    if count == 0 {
        return Err(JsaeError::invalid("at least one sample is required"));
    }
    let draws = sample_population(mlp, pair, xs, count, seed)?;
    let (mut linear, mut jump, mut other) = (0usize, 0usize, 0usize);
    let mut second_derivatives = Vec::with_capacity(count);
    let (mut agree, mut delta_pairs) = (0usize, 0usize);
    for d in &draws {
        let sample = sample_scalar_function(mlp, pair, &d.s_x, d.i, d.j, grid_points)?;
        match classify(&sample, tol).tag {
            FunctionTag::Linear => linear += 1,
            FunctionTag::JumpRelu => jump += 1,
            FunctionTag::Other => other += 1,
        }
        second_derivatives.push(second_derivative_stats(mlp, pair, &sample, DEFAULT_SECOND_DIFF_STEP)?);
        if d.s_x.get(d.j) >= 1.0 {
            delta_pairs += 1;
            if delta_agrees(mlp, pair, &d.s_x, d.i, d.j)? {
                agree += 1;
            }
        }
    }
    let total = draws.len() as f64;
    Ok(LinearityReport {
        samples: draws.len(),
        linear: linear as f64 / total,
        jump_relu: jump as f64 / total,
        other: other as f64 / total,
        second_derivatives,
        delta_agreement: (delta_pairs > 0).then(|| agree as f64 / delta_pairs as f64),
        delta_pairs,
    })
}
