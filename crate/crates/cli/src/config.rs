//! Run configuration: one TOML file, unknown keys rejected, hashed after defaults
//! are filled in.

use std::path::{Path, PathBuf};

use meshcast::datagen::{KsConfig, MeshDynamicsConfig};
use meshcast::denoiser::DenoiserConfig;
use meshcast::error::{Error, Result};
use meshcast::graphmesh::{MeshGraph, PoolingConfig};
use meshcast::schedules::{NoiseSchedule, SamplerConfig};
use meshcast::sensing::{DistanceMetric, ErrorTrainConfig, SensorBudget, Strategy};
use meshcast::training::{OptimizerConfig, RolloutConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    #[default]
    Ks,
    Mesh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DataKind,
    /// One trajectory per seed.
    pub seeds: Vec<u64>,
    /// Trailing trajectories held out for evaluation.
    pub test_trajectories: usize,
    /// Dataset directory; defaults to `<output_dir>/data`.
    pub dir: Option<PathBuf>,
    pub ks: KsConfig,
    pub mesh: MeshDynamicsConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Ks,
            seeds: vec![0, 1, 2, 3],
            test_trajectories: 1,
            dir: None,
            ks: KsConfig::default(),
            mesh: MeshDynamicsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub noise_dim: usize,
    pub fourier_features: usize,
    pub fourier_scale: f64,
    pub ffn_mult: usize,
    pub encoder_blocks: Vec<usize>,
    pub bottleneck_blocks: usize,
    /// Voxel side per level as multiples of the median edge length.
    pub voxel_edge_multiples: Vec<f64>,
    pub knn_k: usize,
    pub predict_increment: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            heads: 2,
            noise_dim: 32,
            fourier_features: 8,
            fourier_scale: 1.0,
            ffn_mult: 4,
            encoder_blocks: vec![1],
            bottleneck_blocks: 2,
            voxel_edge_multiples: vec![2.0],
            knn_k: 3,
            predict_increment: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    fn pooling(&self, graph: &MeshGraph<f64>) -> PoolingConfig<f64> {
        let edge = graph.median_edge_length();
        PoolingConfig::new(self.voxel_edge_multiples.iter().map(|m| m * edge).collect(), self.knn_k)
    }

    fn base(&self, graph: &MeshGraph<f64>, channels: usize) -> DenoiserConfig<f64> {
        DenoiserConfig {
            hidden: self.hidden,
            heads: self.heads,
            noise_dim: self.noise_dim,
            fourier_features: self.fourier_features,
            fourier_scale: self.fourier_scale,
            ffn_mult: self.ffn_mult,
            encoder_blocks: self.encoder_blocks.clone(),
            bottleneck_blocks: self.bottleneck_blocks,
            pooling: self.pooling(graph),
            seed: self.init_seed,
            ..DenoiserConfig::forecaster(graph.dim, channels, 1.0)
        }
    }

    /// Forecaster network configuration for `graph`; `sigma_data` is set by the caller.
    pub fn forecaster(&self, graph: &MeshGraph<f64>, channels: usize) -> DenoiserConfig<f64> {
        DenoiserConfig {
            predict_increment: self.predict_increment,
            ..self.base(graph, channels)
        }
    }

    pub fn error_predictor(&self, graph: &MeshGraph<f64>, channels: usize) -> DenoiserConfig<f64> {
        DenoiserConfig {
            cond_channels: 0,
            out_channels: 1,
            noise_conditioning: false,
            predict_increment: false,
            nonnegative_output: true,
            seed: self.init_seed.wrapping_add(1),
            ..self.base(graph, channels)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub budget_kimg: f64,
    /// Rollout horizon `K` of the multi-step objective.
    pub horizon: usize,
    /// Per-step weights; uniform when empty.
    pub step_weights: Vec<f64>,
    pub curriculum_kimg: f64,
    pub optimizer: OptimizerConfig<f64>,
    /// Optimizer steps between checkpoint writes (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            budget_kimg: 8.0,
            horizon: 1,
            step_weights: Vec::new(),
            curriculum_kimg: 0.0,
            optimizer: OptimizerConfig::default(),
            checkpoint_every: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensingConfig {
    pub strategy: Strategy,
    pub count: usize,
    /// Minimum sensor separation in median edge lengths.
    pub gap_edge_multiple: f64,
    pub metric: DistanceMetric,
    /// Observation noise variance in the likelihood.
    pub noise_var: f64,
    pub gamma_hat: f64,
}

impl Default for SensingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::None,
            count: 8,
            gap_edge_multiple: 2.0,
            metric: DistanceMetric::Euclidean,
            noise_var: 0.01,
            gamma_hat: 0.1,
        }
    }
}

impl SensingConfig {
    pub fn budget(&self, graph: &MeshGraph<f64>) -> Result<SensorBudget<f64>> {
        SensorBudget::new(self.count, self.gap_edge_multiple * graph.median_edge_length())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub ensemble: usize,
    pub horizon: usize,
    /// Rollout starts per held-out trajectory, evenly spaced.
    pub starts_per_trajectory: usize,
    /// Observations are assimilated at steps 1, 1 + n, 1 + 2n, ...
    pub assimilate_every: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            ensemble: 8,
            horizon: 10,
            starts_per_trajectory: 4,
            assimilate_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Affine-Gaussian pair used for the error-growth envelope.
    pub kernel: String,
    pub surrogate: String,
    pub horizon: usize,
    pub samples: usize,
    pub random_priors: usize,
    pub prior_dim: usize,
    pub mse_trials: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            kernel: "affine_gaussian(0.9,0,0.5)".into(),
            surrogate: "affine_gaussian(0.93,0.05,0.45)".into(),
            horizon: 20,
            samples: 20_000,
            random_priors: 100,
            prior_dim: 6,
            mse_trials: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub nodes: usize,
    pub counts: Vec<usize>,
    pub repeats: usize,
    pub gap_edge_multiple: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            nodes: 2000,
            counts: vec![8, 16, 32, 64],
            repeats: 5,
            gap_edge_multiple: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; the `MESHCAST_THREADS` environment variable overrides it.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Kind-specific defaults when absent.
    #[serde(default)]
    pub schedule: Option<NoiseSchedule<f64>>,
    #[serde(default)]
    pub sampler: Option<SamplerConfig<f64>>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub error_net: ErrorTrainConfig<f64>,
    #[serde(default)]
    pub sensing: SensingConfig,
    #[serde(default)]
    pub forecast: ForecastConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
}

impl RunConfig {
    pub fn new(seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        let mut c = Self {
            seed,
            output_dir: output_dir.into(),
            threads: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            schedule: None,
            sampler: None,
            training: TrainingConfig::default(),
            error_net: ErrorTrainConfig::default(),
            sensing: SensingConfig::default(),
            forecast: ForecastConfig::default(),
            verify: VerifyConfig::default(),
            benchmark: BenchmarkConfig::default(),
        };
        c.resolve();
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.resolve();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Fills kind-dependent defaults.
    pub fn resolve(&mut self) {
        let mesh = self.dataset.kind == DataKind::Mesh;
        if self.schedule.is_none() {
            self.schedule = Some(if mesh { NoiseSchedule::mesh_defaults() } else { NoiseSchedule::grid_defaults() });
        }
        if self.sampler.is_none() {
            self.sampler = Some(if mesh { SamplerConfig::mesh_defaults() } else { SamplerConfig::grid_defaults() });
        }
        if self.training.step_weights.is_empty() {
            self.training.step_weights = vec![1.0; self.training.horizon];
        }
    }

    pub fn schedule(&self) -> NoiseSchedule<f64> {
        self.schedule.expect("resolved")
    }

    pub fn sampler(&self) -> SamplerConfig<f64> {
        self.sampler.expect("resolved")
    }

    pub fn train_config(&self) -> TrainConfig<f64> {
        TrainConfig {
            batch_size: self.training.batch_size,
            budget_kimg: self.training.budget_kimg,
            rollout: RolloutConfig {
                horizon: self.training.horizon,
                step_weights: self.training.step_weights.clone(),
                curriculum_kimg: self.training.curriculum_kimg,
            },
            optimizer: self.training.optimizer.clone(),
            schedule: self.schedule(),
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    /// Checks every section before any compute.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.dataset.seeds.is_empty() {
            return bad("dataset.seeds must not be empty");
        }
        let mut sorted = self.dataset.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.dataset.seeds.len() {
            return bad("dataset.seeds must be distinct");
        }
        if self.dataset.test_trajectories >= self.dataset.seeds.len() {
            return bad("dataset.test_trajectories must leave at least one training trajectory");
        }
        match self.dataset.kind {
            DataKind::Ks => self.dataset.ks.validate()?,
            DataKind::Mesh => self.dataset.mesh.validate()?,
        }
        if self.model.voxel_edge_multiples.len() < self.model.encoder_blocks.len()
            || self.model.voxel_edge_multiples.iter().any(|m| !(*m > 0.0))
        {
            return bad("model.voxel_edge_multiples needs one positive entry per encoder level");
        }
        if self.model.hidden == 0 || self.model.heads == 0 || self.model.hidden % self.model.heads != 0 {
            return bad("model.hidden must be a positive multiple of model.heads");
        }
        self.schedule().validate()?;
        self.sampler().validate()?;
        self.train_config().validate()?;
        self.error_net.validate()?;
        if self.sensing.count == 0 || !(self.sensing.gap_edge_multiple >= 0.0) {
            return bad("sensing.count must be positive and gap_edge_multiple >= 0");
        }
        if !(self.sensing.noise_var > 0.0) || !(self.sensing.gamma_hat >= 0.0) {
            return bad("sensing.noise_var must be > 0 and gamma_hat >= 0");
        }
        let f = &self.forecast;
        if f.ensemble == 0 || f.horizon == 0 || f.starts_per_trajectory == 0 || f.assimilate_every == 0 {
            return bad("forecast ensemble, horizon, starts_per_trajectory and assimilate_every must be positive");
        }
        if self.sensing.strategy == Strategy::Uncertainty && self.forecast.ensemble < 2 {
            return bad("uncertainty placement needs forecast.ensemble >= 2");
        }
        if self.verify.horizon == 0 || self.verify.samples == 0 || self.verify.prior_dim < 2 || self.verify.mse_trials < 2 {
            return bad("verify section out of range");
        }
        if self.benchmark.nodes < 50 || self.benchmark.counts.is_empty() || self.benchmark.repeats == 0 {
            return bad("benchmark section out of range");
        }
        if self.threads == Some(0) {
            return bad("threads must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of `keys` (all sections when empty).
    /// Threads and paths never enter the hash since they do not change results.
    fn hash_of(&self, keys: &[&str]) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let o = v.as_object_mut().expect("config is a table");
        o.remove("threads");
        o.remove("output_dir");
        if let Some(d) = o.get_mut("dataset").and_then(|d| d.as_object_mut()) {
            d.remove("dir");
        }
        if !keys.is_empty() {
            o.retain(|k, _| keys.contains(&k.as_str()));
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }

    /// Hash of the whole run, embedded in every output.
    pub fn hash(&self) -> String {
        self.hash_of(&[])
    }

    /// Hash of the sections a dataset depends on.
    pub fn data_hash(&self) -> String {
        self.hash_of(&["dataset"])
    }

    /// Hash of the sections a trained forecaster depends on.
    pub fn model_hash(&self) -> String {
        self.hash_of(&["seed", "dataset", "model", "schedule", "training"])
    }

    /// Hash of the sections a trained error predictor depends on.
    pub fn error_net_hash(&self) -> String {
        self.hash_of(&["seed", "dataset", "model", "schedule", "training", "error_net"])
    }
}
