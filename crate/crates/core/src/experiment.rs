// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end synthetic pipelines: build data and an MLP, train a pair,
//! evaluate it. Shared by the command-line tool and the acceptance suite.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{JsaeError, Result};
use crate::eval::{evaluate, EvalReport, TaskTargets, DEFAULT_THRESHOLDS};
use crate::loss::selection_margin;
use crate::mlp::{MlpKind, MlpParams};
use crate::sae::SaePair;
use crate::synthetic::{
    fit_task_head, make_random_mlp, make_trained_mlp, match_output_variance, output_variance, ActivationSource,
    DownstreamTask, FitConfig, FitReport, GroundTruthDictionary, MlpDims, SparseFeatureMap, SyntheticSource,
};
use crate::trainer::{train, StepRecord, TrainConfig};

/// Everything needed to reproduce a synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Activation width on both sides of the MLP.
    pub m: usize,
    pub d_mlp: usize,
    pub mlp_kind: MlpKind,
    pub activation: ActivationKind,
    /// Ground-truth input features.
    pub n_true: usize,
    /// Ground-truth output features of the sparse map.
    pub n_out: usize,
    pub sparsity: f64,
    /// SAE latents per side.
    pub n: usize,
    pub k: usize,
    pub fit: FitConfig,
    pub train: TrainConfig,
    pub eval_tokens: usize,
    /// Root seed; every component derives its own stream from it.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            m: 32,
            d_mlp: 64,
            mlp_kind: MlpKind::Standard,
            activation: ActivationKind::GeluTanh,
            n_true: 16,
            n_out: 16,
            sparsity: 2.0,
            n: 128,
            k: 8,
            fit: FitConfig::default(),
            train: TrainConfig {
                batch_tokens: 128,
                lr_max: 4e-3,
                ..TrainConfig::default()
            },
            eval_tokens: 4000,
            seed: 0,
        }
    }
}

/// Seeds of the individual components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub dictionary: u64,
    pub feature_map: u64,
    pub mlp: u64,
    pub sae: u64,
    pub stream: u64,
    pub eval: u64,
    pub head: u64,
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Seeds {
        let s = self.seed.wrapping_mul(1000);
        Seeds {
            dictionary: s,
            feature_map: s + 1,
            mlp: s + 2,
            sae: s + 3,
            stream: s + 4,
            eval: s + 5,
            head: s + 6,
        }
    }

    pub fn dims(&self) -> MlpDims {
        MlpDims {
            m_x: self.m,
            d_mlp: self.d_mlp,
            m_y: self.m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d_mlp == 0 || self.n_true == 0 || self.n_out == 0 || self.n == 0 {
            return Err(JsaeError::invalid("dimensions must be positive"));
        }
        if self.k == 0 || self.k > self.n {
            return Err(JsaeError::invalid(format!("k = {} must lie in [1, n = {}]", self.k, self.n)));
        }
        if self.eval_tokens < 2 {
            return Err(JsaeError::invalid("eval_tokens must be at least 2"));
        }
        self.train.validate()
    }

    /// Train-config seed tied to the root seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds().stream,
            ..self.train.clone()
        }
    }
}

/// Data, ground-truth map and fitted MLP of a synthetic world.
#[derive(Debug, Clone)]
pub struct World {
    pub dict: GroundTruthDictionary,
    pub map: SparseFeatureMap,
    pub task: DownstreamTask,
    pub fit: FitReport,
}

impl World {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seeds = cfg.seeds();
        let dict = GroundTruthDictionary::random(cfg.m, cfg.n_true, cfg.sparsity, seeds.dictionary)?;
        let map = SparseFeatureMap::random(cfg.n_true, cfg.n_out, cfg.m, seeds.feature_map)?;
        let trained = make_trained_mlp(cfg.dims(), cfg.mlp_kind, cfg.activation, &dict, &map, &cfg.fit, seeds.mlp)?;
        Ok(Self {
            dict,
            map,
            task: trained.task,
            fit: trained.report,
        })
    }

    pub fn source(&self, cfg: &ExperimentConfig) -> SyntheticSource {
        SyntheticSource::new(self.dict.clone(), cfg.seeds().stream)
    }

    /// The untrained MLP, rescaled so its output variance equals the
    /// trained MLP's, with its own fitted readout head.
    pub fn random_task(&self, cfg: &ExperimentConfig) -> Result<(DownstreamTask, f64)> {
        let seeds = cfg.seeds();
        let mut mlp = make_random_mlp(cfg.dims(), cfg.mlp_kind, cfg.activation, seeds.mlp)?;
        let probe = self.dict.sample_with_codes(cfg.eval_tokens, seeds.head).0;
        let target = output_variance(&self.task.mlp, probe.view())?;
        let factor = match_output_variance(&mut mlp, probe.view(), target)?;
        let task = fit_task_head(&mlp, &self.dict, &self.map, cfg.fit.train_samples, seeds.head)?;
        Ok((task, factor))
    }
}

/// A trained pair with its timeline and held-out evaluation.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub pair: SaePair,
    pub timeline: Vec<StepRecord>,
    pub report: EvalReport,
}

/// Trains a pair around `task.mlp` on `source` and evaluates it on fresh
/// samples from the world's dictionary.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    world: &World,
    task: &DownstreamTask,
    source: &mut dyn ActivationSource,
) -> Result<PipelineResult> {
    let seeds = cfg.seeds();
    let pair = SaePair::init(cfg.m, cfg.m, cfg.n, cfg.k, seeds.sae)?;
    let train_cfg = cfg.train_config();
    let outcome = train(&task.mlp, source, pair, &train_cfg)?;
    let report = evaluate_on_world(cfg, world, task, &outcome.pair)?;
    Ok(PipelineResult {
        pair: outcome.pair,
        timeline: outcome.timeline,
        report,
    })
}

/// Held-out evaluation with the task's recovery scores.
pub fn evaluate_on_world(cfg: &ExperimentConfig, world: &World, task: &DownstreamTask, pair: &SaePair) -> Result<EvalReport> {
    let (xs, codes) = world.dict.sample_with_codes(cfg.eval_tokens, cfg.seeds().eval);
    let targets = world.map.output_codes(codes.view());
    let pool = thread_pool(cfg.train.threads)?;
    evaluate(
        &task.mlp,
        pair,
        xs.view(),
        Some(TaskTargets {
            task,
            targets: targets.view(),
        }),
        &DEFAULT_THRESHOLDS,
        pool.as_ref(),
    )
}

pub(crate) fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| JsaeError::invalid(format!("cannot build thread pool: {e}")))
}

/// Both pipelines of the trained-versus-random comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub fit: FitReport,
    /// Factor applied to the random MLP's output layer.
    pub random_output_scale: f64,
    pub trained: EvalReport,
    pub random: EvalReport,
}

/// Runs the pipeline once around the fitted MLP and once around the
/// variance-matched random MLP, with identical data and SAE seeds.
pub fn compare_random(cfg: &ExperimentConfig) -> Result<Comparison> {
    let world = World::build(cfg)?;
    let trained = run_pipeline(cfg, &world, &world.task, &mut world.source(cfg))?;
    let (random_task, factor) = world.random_task(cfg)?;
    let random = run_pipeline(cfg, &world, &random_task, &mut world.source(cfg))?;
    Ok(Comparison {
        fit: world.fit,
        random_output_scale: factor,
        trained: trained.report,
        random: random.report,
    })
}

/// Random MLP, pair and tokens for gradient and Jacobian checks.
#[derive(Debug, Clone)]
pub struct CheckInstance {
    pub mlp: MlpParams,
    pub pair: SaePair,
    /// Tokens whose TopK selections all clear `min_margin`.
    pub batch: Array2<f64>,
}

/// Widths used by the command-line checks.
pub const CHECK_DIMS: MlpDims = MlpDims {
    m_x: 16,
    d_mlp: 32,
    m_y: 16,
};
pub const CHECK_N: usize = 64;
pub const CHECK_K: usize = 8;

/// Seeded check instance at [`CHECK_DIMS`]: a random MLP, a freshly
/// initialized pair with small random biases, and `tokens` Gaussian tokens
/// whose selection margins exceed `min_margin`.
pub fn check_instance(kind: MlpKind, seed: u64, tokens: usize, min_margin: f64) -> Result<CheckInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mlp = make_random_mlp(CHECK_DIMS, kind, ActivationKind::GeluTanh, rng.random())?;
    let mut pair = SaePair::init(CHECK_DIMS.m_x, CHECK_DIMS.m_y, CHECK_N, CHECK_K, rng.random())?;
    for b in [&mut pair.input.b_enc, &mut pair.output.b_enc] {
        b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    for b in [&mut pair.input.b_dec, &mut pair.output.b_dec] {
        b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    let mut rows = Vec::with_capacity(tokens);
    let mut attempts = 0;
    while rows.len() < tokens {
        attempts += 1;
        if attempts > 1000 * tokens.max(1) {
            return Err(JsaeError::DegenerateInput("no tokens clear the margin".into()));
        }
        let x = Array1::from_shape_fn(CHECK_DIMS.m_x, |_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let v: f64 = rng.random();
            (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        });
        if selection_margin(&mlp, &pair, x.view())? > min_margin {
            rows.push(x);
        }
    }
    let mut batch = Array2::zeros((tokens, CHECK_DIMS.m_x));
    for (mut row, x) in batch.rows_mut().into_iter().zip(rows) {
        row.assign(&x);
    }
    Ok(CheckInstance { mlp, pair, batch })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            m: 8,
            d_mlp: 16,
            n_true: 6,
            n_out: 6,
            n: 24,
            k: 3,
            fit: FitConfig {
                train_samples: 512,
                holdout_samples: 128,
                batch: 64,
                max_steps: 200,
                ..FitConfig::default()
            },
            train: TrainConfig {
                total_tokens: 2048,
                batch_tokens: 64,
                lr_max: 4e-3,
                ..TrainConfig::default()
            },
            eval_tokens: 256,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 4, "train": {"lambda": 0.0}}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.train.lambda, 0.0);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
        let bad = ExperimentConfig { k: 0, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn comparison_runs_and_is_reproducible() {
        let cfg = small();
        let a = compare_random(&cfg).unwrap();
        let b = compare_random(&cfg).unwrap();
        assert_eq!(a.trained, b.trained);
        assert_eq!(a.random, b.random);
        assert!(a.random_output_scale > 0.0);
        assert!(a.trained.ce_score_x.is_some());
    }

    #[test]
    fn check_instances_pass_grad_check() {
        for kind in [MlpKind::Standard, MlpKind::Glu] {
            let inst = check_instance(kind, 7, 4, 1e-3).unwrap();
            assert_eq!(inst.batch.nrows(), 4);
            let err = crate::loss::grad_check(&inst.mlp, &inst.pair, inst.batch.view(), 1.0, 1e-5).unwrap();
            assert!(err < 1e-5, "{kind:?}: {err}");
        }
    }
}
