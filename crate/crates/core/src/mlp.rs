// SPDX-License-Identifier: MIT OR Apache-2.0

//! The frozen MLP sandwiched between the two SAEs.
//!
//! ```text
//! Standard:  z = W1·x + b1,               y = W2·φ(z) + b2
//! Glu:       g = Wg·x + bg,  s = φ(g),
//!            h = W1·x + b1,  z = h ⊙ s,    y = W2·z + b2
//! ```

use ndarray::{Array1, Array2, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{JsaeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum MlpKind {
    #[default]
    Standard,
    Glu,
}

impl MlpKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Glu => "glu",
        }
    }
}

/// MLP weights. `w1`/`wg` are `d_mlp × m_x`, `w2` is `m_y × d_mlp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub kind: MlpKind,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub wg: Option<Array2<f64>>,
    pub bg: Option<Array1<f64>>,
    pub activation: ActivationKind,
}

/// Gate-path intermediates of a GLU forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GluCache {
    pub g: Array1<f64>,
    pub s: Array1<f64>,
    pub h: Array1<f64>,
}

/// Hidden-layer intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    /// Pre-activation for `Standard`, gated product `h ⊙ s` for `Glu`.
    pub z: Array1<f64>,
    pub glu: Option<GluCache>,
}

/// Parameter gradients of the MLP, used only when fitting synthetic MLPs.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub wg: Option<Array2<f64>>,
    pub bg: Option<Array1<f64>>,
}

impl MlpParams {
    pub fn m_x(&self) -> usize {
        self.w1.ncols()
    }

    pub fn m_y(&self) -> usize {
        self.w2.nrows()
    }

    pub fn d_mlp(&self) -> usize {
        self.w1.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m_x) = self.w1.dim();
        let shapes_ok = self.b1.len() == d && self.w2.ncols() == d && self.b2.len() == self.m_y();
        if !shapes_ok {
            return Err(JsaeError::invalid(format!(
                "inconsistent MLP shapes: w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                self.w1.dim(),
                self.b1.len(),
                self.w2.dim(),
                self.b2.len()
            )));
        }
        match (self.kind, &self.wg, &self.bg) {
            (MlpKind::Standard, None, None) => Ok(()),
            (MlpKind::Glu, Some(wg), Some(bg)) if wg.dim() == (d, m_x) && bg.len() == d => Ok(()),
            (MlpKind::Glu, Some(_), Some(_)) => {
                Err(JsaeError::invalid("GLU gate weights do not match W1's shape"))
            }
            (kind, _, _) => Err(JsaeError::invalid(format!(
                "{} MLP must {} gate parameters",
                kind.name(),
                if kind == MlpKind::Glu { "carry" } else { "not carry" }
            ))),
        }
    }

    fn gate(&self) -> (&Array2<f64>, &Array1<f64>) {
        (
            self.wg.as_ref().expect("GLU MLP carries gate weights"),
            self.bg.as_ref().expect("GLU MLP carries gate bias"),
        )
    }

    /// Forward pass returning the output and the hidden intermediates.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<(Array1<f64>, MlpCache)> {
        if x.len() != self.m_x() {
            return Err(JsaeError::invalid(format!(
                "MLP input width {} does not match expected {}",
                x.len(),
                self.m_x()
            )));
        }
        let act = self.activation;
        let pre = self.w1.dot(&x) + &self.b1;
        match self.kind {
            MlpKind::Standard => {
                let hidden = pre.mapv(|v| act.value(v));
                let y = self.w2.dot(&hidden) + &self.b2;
                Ok((y, MlpCache { z: pre, glu: None }))
            }
            MlpKind::Glu => {
                let (wg, bg) = self.gate();
                let g = wg.dot(&x) + bg;
                let s = g.mapv(|v| act.value(v));
                let z = &pre * &s;
                let y = self.w2.dot(&z) + &self.b2;
                Ok((
                    y,
                    MlpCache {
                        z,
                        glu: Some(GluCache { g, s, h: pre }),
                    },
                ))
            }
        }
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Backpropagates `dy` through one forward pass, accumulating into `grads`.
    pub fn backward_accumulate(
        &self,
        x: ArrayView1<f64>,
        cache: &MlpCache,
        dy: ArrayView1<f64>,
        grads: &mut MlpGrads,
    ) {
        let act = self.activation;
        grads.b2 += &dy;
        match (&cache.glu, self.kind) {
            (None, _) => {
                let hidden = cache.z.mapv(|v| act.value(v));
                outer_add(&mut grads.w2, dy, hidden.view());
                let mut dz = self.w2.t().dot(&dy);
                Zip::from(&mut dz).and(&cache.z).for_each(|d, &z| *d *= act.d1(z));
                outer_add(&mut grads.w1, dz.view(), x);
                grads.b1 += &dz;
            }
            (Some(glu), _) => {
                outer_add(&mut grads.w2, dy, cache.z.view());
                let dz = self.w2.t().dot(&dy);
                let dh = &dz * &glu.s;
                let mut dg = &dz * &glu.h;
                Zip::from(&mut dg).and(&glu.g).for_each(|d, &g| *d *= act.d1(g));
                outer_add(&mut grads.w1, dh.view(), x);
                grads.b1 += &dh;
                if let (Some(wg), Some(bg)) = (grads.wg.as_mut(), grads.bg.as_mut()) {
                    outer_add(wg, dg.view(), x);
                    *bg += &dg;
                }
            }
        }
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            wg: self.wg.as_ref().map(|w| Array2::zeros(w.raw_dim())),
            bg: self.bg.as_ref().map(|b| Array1::zeros(b.raw_dim())),
        }
    }
}

/// `target += a ⊗ b`.
pub(crate) fn outer_add(target: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in target.rows_mut().into_iter().zip(a) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

/// Forward pass of `p` on `x`.
pub fn mlp_forward(p: &MlpParams, x: ArrayView1<f64>) -> Result<(Array1<f64>, MlpCache)> {
    p.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_simple_fn(len, || rng.random_range(-1.0..1.0))
    }

    fn random_mlp(kind: MlpKind, act: ActivationKind, seed: u64) -> MlpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m_x, d, m_y) = (5, 7, 4);
        MlpParams {
            kind,
            w1: random(d, m_x, &mut rng),
            b1: random_vec(d, &mut rng),
            w2: random(m_y, d, &mut rng),
            b2: random_vec(m_y, &mut rng),
            wg: (kind == MlpKind::Glu).then(|| random(d, m_x, &mut rng)),
            bg: (kind == MlpKind::Glu).then(|| random_vec(d, &mut rng)),
            activation: act,
        }
    }

    fn scalar_loop_forward(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let d = p.d_mlp();
        let mut hidden = vec![0.0; d];
        for l in 0..d {
            let mut h = p.b1[l];
            for (m, xm) in x.iter().enumerate() {
                h += p.w1[[l, m]] * xm;
            }
            hidden[l] = match p.kind {
                MlpKind::Standard => p.activation.value(h),
                MlpKind::Glu => {
                    let (wg, bg) = p.gate();
                    let mut g = bg[l];
                    for (m, xm) in x.iter().enumerate() {
                        g += wg[[l, m]] * xm;
                    }
                    h * p.activation.value(g)
                }
            };
        }
        (0..p.m_y())
            .map(|k| p.b2[k] + (0..d).map(|l| p.w2[[k, l]] * hidden[l]).sum::<f64>())
            .collect()
    }

    #[test]
    fn identity_network_is_identity() {
        let p = MlpParams {
            kind: MlpKind::Standard,
            w1: Array2::eye(3),
            b1: Array1::zeros(3),
            w2: Array2::eye(3),
            b2: Array1::zeros(3),
            wg: None,
            bg: None,
            activation: ActivationKind::Identity,
        };
        let x = array![1.0, -2.0, 0.5];
        assert_eq!(p.apply(x.view()).unwrap(), x);
        assert!(p.apply(array![1.0].view()).is_err());
    }

    #[test]
    fn glu_with_unit_gate_is_affine() {
        let mut p = random_mlp(MlpKind::Glu, ActivationKind::Identity, 3);
        p.wg = Some(Array2::zeros((7, 5)));
        p.bg = Some(Array1::ones(7));
        let x = array![0.2, -0.4, 1.0, 0.3, 0.0];
        let expected = p.w2.dot(&(p.w1.dot(&x) + &p.b1)) + &p.b2;
        let (y, cache) = p.forward(x.view()).unwrap();
        for (a, b) in y.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(cache.glu.is_some());
    }

    #[test]
    fn matches_scalar_loop() {
        for (seed, kind) in [(1, MlpKind::Standard), (2, MlpKind::Glu)] {
            for act in [ActivationKind::GeluTanh, ActivationKind::Relu, ActivationKind::GeluErf] {
                let p = random_mlp(kind, act, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
                let x = random_vec(5, &mut rng);
                let y = p.apply(x.view()).unwrap();
                let oracle = scalar_loop_forward(&p, x.as_slice().unwrap());
                for (a, b) in y.iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-13, "{kind:?} {act:?}");
                }
            }
        }
    }

    #[test]
    fn cache_is_reproducible() {
        let p = random_mlp(MlpKind::Glu, ActivationKind::GeluTanh, 4);
        let x = array![0.1, 0.2, 0.3, 0.4, 0.5];
        let (_, a) = p.forward(x.view()).unwrap();
        let (_, b) = p.forward(x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_standard_mlp_is_affine() {
        let p = random_mlp(MlpKind::Standard, ActivationKind::Identity, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_vec(5, &mut rng);
        let x2 = random_vec(5, &mut rng);
        let (a, b) = (0.7, -1.9);
        let lhs = p.apply((&x * a + &x2 * b).view()).unwrap();
        let f0 = p.apply(Array1::zeros(5).view()).unwrap();
        let rhs = p.apply(x.view()).unwrap() * a + p.apply(x2.view()).unwrap() * b - f0 * (a + b - 1.0);
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn validate_rejects_mismatched_gate() {
        let mut p = random_mlp(MlpKind::Standard, ActivationKind::Relu, 1);
        assert!(p.validate().is_ok());
        p.kind = MlpKind::Glu;
        assert!(p.validate().is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for kind in [MlpKind::Standard, MlpKind::Glu] {
            let p = random_mlp(kind, ActivationKind::GeluTanh, 12);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let x = random_vec(5, &mut rng);
            let w = random_vec(4, &mut rng);
            // Loss = w·y, so dy = w.
            let (_, cache) = p.forward(x.view()).unwrap();
            let mut grads = p.zero_grads();
            p.backward_accumulate(x.view(), &cache, w.view(), &mut grads);

            let loss = |q: &MlpParams| q.apply(x.view()).unwrap().dot(&w);
            let h = 1e-6;
            for (r, c) in [(0, 0), (3, 2), (6, 4)] {
                let mut plus = p.clone();
                plus.w1[[r, c]] += h;
                let mut minus = p.clone();
                minus.w1[[r, c]] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((fd - grads.w1[[r, c]]).abs() < 1e-8, "{kind:?} w1");
                if kind == MlpKind::Glu {
                    let mut plus = p.clone();
                    plus.wg.as_mut().unwrap()[[r, c]] += h;
                    let mut minus = p.clone();
                    minus.wg.as_mut().unwrap()[[r, c]] -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    assert!((fd - grads.wg.as_ref().unwrap()[[r, c]]).abs() < 1e-8);
                }
            }
            let mut plus = p.clone();
            plus.w2[[1, 3]] += h;
            let mut minus = p.clone();
            minus.w2[[1, 3]] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - grads.w2[[1, 3]]).abs() < 1e-8);
        }
    }
}
