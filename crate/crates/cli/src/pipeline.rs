//! Experiment steps shared by the subcommands and the acceptance runs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use meshcast::datagen::{chaotic_pde_trajectories, mesh_dynamics, read_dataset, step_mesh, write_dataset, MeshDynamicsConfig, TrajectoryDataset};
use meshcast::denoiser::{load_checkpoint, save_checkpoint, DenoiserNet, NetDenoiser};
use meshcast::error::{Error, Result};
use meshcast::graphmesh::{MeshGraph, Topology};
use meshcast::sampler::{ensemble_step, rollout, EnsembleForecast, ObservationModel};
use meshcast::sensing::{
    greedy_select, place_sensors, train_error_predictor, ErrorPredictor, PlacementContext, ScoreField, SensorBudget, SensorSet, Strategy,
};
use meshcast::tensors::Tensor;
use meshcast::training::{diffused_std, train, TrainState, METRICS_HEADER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataKind, RunConfig};

pub type Net = DenoiserNet<f64>;
pub type Dataset = TrajectoryDataset<f64>;

pub const FORECASTER_FILE: &str = "forecaster.ckpt.json";
pub const ERROR_NET_FILE: &str = "error_net.ckpt.json";

/// Exclusive write access to a run directory for the lifetime of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(format!(
                "run directory {} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Stream-separated generator so independent tasks never share random numbers.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Provenance comment placed before the CSV header.
pub fn provenance(cfg: &RunConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    match cfg.dataset.kind {
        DataKind::Ks => chaotic_pde_trajectories(&cfg.dataset.ks, &cfg.dataset.seeds),
        DataKind::Mesh => mesh_dynamics(&cfg.dataset.mesh, &cfg.dataset.seeds),
    }
}

/// Generates the dataset and writes it to the configured directory.
pub fn generate_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = build_dataset(cfg)?;
    write_dataset(&cfg.dataset_dir(), &ds, &cfg.data_hash())?;
    Ok(ds)
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let (ds, hash) = read_dataset(&cfg.dataset_dir())?;
    if hash != cfg.data_hash() {
        return Err(Error::ConfigHashMismatch {
            found: hash,
            expected: cfg.data_hash(),
        });
    }
    Ok(ds)
}

/// Training and held-out trajectories.
pub fn split(cfg: &RunConfig, ds: &Dataset) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
    ds.split_last(cfg.dataset.test_trajectories)
}

/// Untrained forecaster with `sigma_data` fitted to the training split.
pub fn new_forecaster(cfg: &RunConfig, ds: &Dataset) -> Result<Net> {
    let (train_set, _) = split(cfg, ds)?;
    let mut nc = cfg.model.forecaster(&ds.graph, ds.channels);
    nc.sigma_data = diffused_std(&train_set, nc.predict_increment)?;
    Net::new(nc)
}

#[derive(Serialize, Deserialize)]
struct TrainExtra {
    state: TrainState<f64>,
    /// Position of the training generator, as a decimal string.
    rng_word_pos: String,
}

pub struct TrainOutcome {
    pub net: Net,
    pub state: TrainState<f64>,
    pub losses: Vec<f64>,
}

fn save_forecaster(path: &Path, net: &Net, hash: &str, state: &TrainState<f64>, rng: &ChaCha8Rng) -> Result<()> {
    let extra = TrainExtra {
        state: state.clone(),
        rng_word_pos: rng.get_word_pos().to_string(),
    };
    save_checkpoint(path, net, hash, serde_json::to_value(extra)?)
}

/// Trains the forecaster. With a run directory, writes `forecaster.ckpt.json`
/// and `metrics.csv` there, checkpointing every `checkpoint_every` steps; with
/// `resume` the run continues from the stored checkpoint. `stop_after` caps the
/// optimizer steps taken by this call; a later resume finishes the budget.
pub fn train_forecaster(cfg: &RunConfig, ds: &Dataset, run_dir: Option<&Path>, resume: bool, stop_after: Option<u64>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = cfg.train_config();
    let (train_set, _) = split(cfg, ds)?;
    let hash = cfg.model_hash();
    let ckpt = run_dir.map(|d| d.join(FORECASTER_FILE));
    let metrics = run_dir.map(|d| d.join("metrics.csv"));
    let mut rng = stream_rng(cfg.seed, 1);
    let (mut net, mut state) = match (&ckpt, resume) {
        (Some(p), true) if p.exists() => {
            let (net, extra) = load_checkpoint::<f64>(p, &hash)?;
            let extra: TrainExtra = serde_json::from_value(extra)?;
            let pos: u128 = extra
                .rng_word_pos
                .parse()
                .map_err(|_| Error::Parse("bad generator position in checkpoint".into()))?;
            rng.set_word_pos(pos);
            (net, extra.state)
        }
        (_, true) => return Err(Error::InvalidArgument("nothing to resume: no forecaster checkpoint in the run directory".into())),
        _ => {
            let net = new_forecaster(cfg, ds)?;
            let state = TrainState::new(&net.params);
            (net, state)
        }
    };
    if let Some(m) = &metrics {
        if !resume || !m.exists() {
            fs::write(m, format!("{}{METRICS_HEADER}\n", provenance(cfg)))?;
        }
    }
    let topo = net.topology(&ds.graph)?;
    let per_step = tc.batch_size as f64 / 1000.0;
    let mut remaining = stop_after.unwrap_or(u64::MAX);
    let mut losses = Vec::new();
    while remaining > 0 && state.kimg < tc.budget_kimg {
        let steps = match cfg.training.checkpoint_every {
            0 => remaining,
            n => n.min(remaining),
        };
        // Half a step of slack keeps the step count exact under rounding.
        let mut part = tc.clone();
        part.budget_kimg = (state.kimg + (steps as f64 - 0.5) * per_step).min(tc.budget_kimg);
        let rows = train(&mut net, &topo, &train_set, &part, &mut state, &mut rng, |_, _| Ok(()))?;
        if let Some(m) = &metrics {
            let mut f = fs::OpenOptions::new().append(true).open(m)?;
            for r in &rows {
                writeln!(f, "{}", r.csv())?;
            }
        }
        losses.extend(rows.iter().map(|r| r.loss));
        remaining = remaining.saturating_sub(rows.len() as u64);
        if let Some(p) = &ckpt {
            save_forecaster(p, &net, &hash, &state, &rng)?;
        }
        if rows.is_empty() {
            break;
        }
    }
    // A zero budget still leaves a loadable checkpoint.
    if let Some(p) = ckpt.as_ref().filter(|p| !p.exists()) {
        save_forecaster(p, &net, &hash, &state, &rng)?;
    }
    Ok(TrainOutcome { net, state, losses })
}

pub fn load_forecaster(cfg: &RunConfig, path: &Path) -> Result<Net> {
    Ok(load_checkpoint::<f64>(path, &cfg.model_hash())?.0)
}

/// Trains the error predictor against a frozen forecaster.
pub fn train_error_net(cfg: &RunConfig, ds: &Dataset, forecaster: &Net, run_dir: Option<&Path>) -> Result<(ErrorPredictor<f64>, Vec<f64>)> {
    let (train_set, _) = split(cfg, ds)?;
    let mut pred = ErrorPredictor::new(Net::new(cfg.model.error_predictor(&ds.graph, ds.channels))?)?;
    let pred_topo = pred.net.topology(&ds.graph)?;
    let f_topo = forecaster.topology(&ds.graph)?;
    let mut rng = stream_rng(cfg.seed, 2);
    let losses = train_error_predictor(
        &mut pred,
        &pred_topo,
        forecaster,
        &f_topo,
        &train_set,
        cfg.schedule().sigma_max,
        &cfg.error_net,
        &mut rng,
    )?;
    if let Some(d) = run_dir {
        let extra = serde_json::json!({ "target_scale": pred.target_scale });
        save_checkpoint(&d.join(ERROR_NET_FILE), &pred.net, &cfg.error_net_hash(), extra)?;
        let mut s = format!("{}step,loss\n", provenance(cfg));
        for (i, l) in losses.iter().enumerate() {
            s.push_str(&format!("{},{l:?}\n", i + 1));
        }
        fs::write(d.join("error_metrics.csv"), s)?;
    }
    Ok((pred, losses))
}

pub fn load_error_net(cfg: &RunConfig, path: &Path) -> Result<ErrorPredictor<f64>> {
    let (net, extra) = load_checkpoint::<f64>(path, &cfg.error_net_hash())?;
    let mut pred = ErrorPredictor::new(net)?;
    pred.target_scale = extra
        .get("target_scale")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Parse("error predictor checkpoint lacks target_scale".into()))?;
    Ok(pred)
}

pub const FORECAST_HEADER: &str = "trajectory,start,step,member_mean,member_std,mae";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub trajectory: usize,
    pub start: usize,
    pub step: usize,
    /// Node mean of the ensemble mean.
    pub member_mean: f64,
    /// Node mean of the ensemble standard deviation.
    pub member_std: f64,
    /// Mean absolute error of the ensemble mean against the truth.
    pub mae: f64,
}

impl EvalRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:?},{:?},{:?}",
            self.trajectory, self.start, self.step, self.member_mean, self.member_std, self.mae
        )
    }
}

pub const SENSOR_HEADER: &str = "trajectory,start,step,rank,node";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorLogRow {
    pub trajectory: usize,
    pub start: usize,
    pub step: usize,
    pub rank: usize,
    pub node: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub rows: Vec<EvalRow>,
    pub sensors: Vec<SensorLogRow>,
    /// MAE per lead time averaged over rollouts.
    pub per_step_mae: Vec<f64>,
    /// Mean of `per_step_mae`.
    pub mean_mae: f64,
}

/// Mean absolute error over all entries.
pub fn mae(forecast: &[f64], truth: &[f64]) -> f64 {
    forecast.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len().max(1) as f64
}

/// Start indices spread evenly over a trajectory leaving room for the horizon.
pub fn rollout_starts(len: usize, horizon: usize, count: usize) -> Vec<usize> {
    if len <= horizon {
        return Vec::new();
    }
    let last = len - 1 - horizon;
    if count <= 1 || last == 0 {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..count).map(|k| k * last / (count - 1)).collect();
    v.dedup();
    v
}

fn observe(set: &SensorSet<f64>, truth: &[f64], channels: usize, cfg: &RunConfig) -> Result<ObservationModel<f64>> {
    ObservationModel::from_state(&set.indices, truth, channels, cfg.sensing.noise_var, cfg.sensing.gamma_hat)
}

/// Chooses sensors for the step that follows `prev`.
#[allow(clippy::too_many_arguments)]
fn plan_sensors<R: Rng + ?Sized>(
    strategy: Strategy,
    cfg: &RunConfig,
    graph: &MeshGraph<f64>,
    budget: &SensorBudget<f64>,
    den: &NetDenoiser<'_, f64>,
    prev: &EnsembleForecast<f64>,
    error_net: Option<(&ErrorPredictor<f64>, &Topology<f64>)>,
    rng: &mut R,
) -> Result<Option<SensorSet<f64>>> {
    let metric = cfg.sensing.metric;
    let set = match strategy {
        Strategy::None => return Ok(None),
        Strategy::Random => place_sensors(PlacementContext::Random, graph, budget, metric, rng)?,
        Strategy::Uncertainty => {
            let unguided = ensemble_step(den, prev, &cfg.schedule(), &cfg.sampler(), None, rng)?;
            place_sensors(PlacementContext::Uncertainty(&unguided), graph, budget, metric, rng)?
        }
        Strategy::Predictive => {
            let (pred, topo) = error_net.ok_or_else(|| Error::InvalidArgument("predictive placement needs a trained error predictor".into()))?;
            let x = Tensor::from_vec(&[prev.nodes, prev.channels], prev.mean())?;
            let field = ScoreField::on_interior(pred.predict(topo, &x)?, graph)?;
            place_sensors(PlacementContext::Predictive(&field), graph, budget, metric, rng)?
        }
    };
    Ok(Some(set))
}

/// Ensemble rollouts from held-out states, assimilating observations of the
/// truth placed by `strategy`.
pub fn evaluate(cfg: &RunConfig, ds: &Dataset, net: &Net, strategy: Strategy, error_net: Option<&ErrorPredictor<f64>>) -> Result<EvalReport> {
    let (_, test) = split(cfg, ds)?;
    let fc = &cfg.forecast;
    let (nodes, channels) = (ds.num_nodes(), ds.channels);
    let topo = net.topology(&ds.graph)?.tile(fc.ensemble)?;
    let params = net.params.bind(false);
    let den = NetDenoiser {
        net,
        params: &params,
        topo: &topo,
    };
    let pred_topo = match error_net {
        Some(p) => Some(p.net.topology(&ds.graph)?),
        None => None,
    };
    let error_ctx = error_net.zip(pred_topo.as_ref());
    let budget = cfg.sensing.budget(&ds.graph)?;
    let mut rows = Vec::new();
    let mut sensors = Vec::new();
    let mut sums = vec![0.0; fc.horizon];
    let mut count = 0usize;
    for (ti, traj) in test.iter().enumerate() {
        for start in rollout_starts(traj.len(), fc.horizon, fc.starts_per_trajectory) {
            let mut rng = stream_rng(cfg.seed, 1000 + ((ti as u64) << 20) + start as u64);
            let mut logged = Vec::new();
            let out = rollout(
                &den,
                &traj[start],
                fc.ensemble,
                nodes,
                channels,
                fc.horizon,
                &cfg.schedule(),
                &cfg.sampler(),
                |step, prev, rng| {
                    if (step - 1) % fc.assimilate_every != 0 {
                        return Ok(None);
                    }
                    let Some(set) = plan_sensors(strategy, cfg, &ds.graph, &budget, &den, prev, error_ctx, rng)? else {
                        return Ok(None);
                    };
                    for (rank, &node) in set.indices.iter().enumerate() {
                        logged.push(SensorLogRow {
                            trajectory: ti,
                            start,
                            step,
                            rank,
                            node,
                        });
                    }
                    observe(&set, &traj[start + step], channels, cfg).map(Some)
                },
                &mut rng,
            )?;
            sensors.extend(logged);
            for (k, ens) in out.iter().enumerate() {
                let truth = &traj[start + k + 1];
                let mean = ens.mean();
                let std = ens.std();
                let len = mean.len() as f64;
                let mae = mae(&mean, truth);
                sums[k] += mae;
                rows.push(EvalRow {
                    trajectory: ti,
                    start,
                    step: k + 1,
                    member_mean: mean.iter().sum::<f64>() / len,
                    member_std: std.iter().sum::<f64>() / len,
                    mae,
                });
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("held-out trajectories are shorter than the forecast horizon".into()));
    }
    let per_step_mae: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let mean_mae = per_step_mae.iter().sum::<f64>() / per_step_mae.len() as f64;
    Ok(EvalReport {
        strategy,
        rows,
        sensors,
        per_step_mae,
        mean_mae,
    })
}

/// Writes `<stem>.csv`, `<stem>_summary.json` and, when sensors were placed,
/// `<stem>_sensors.csv` into `dir`.
pub fn write_eval(cfg: &RunConfig, dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = format!("{}{FORECAST_HEADER}\n", provenance(cfg));
    for r in &report.rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    fs::write(dir.join(format!("{stem}.csv")), s)?;
    let summary = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "strategy": report.strategy,
        "per_step_mae": report.per_step_mae,
        "mean_mae": report.mean_mae,
    });
    fs::write(dir.join(format!("{stem}_summary.json")), serde_json::to_string_pretty(&summary)? + "\n")?;
    if !report.sensors.is_empty() {
        let mut s = format!("{}{SENSOR_HEADER}\n", provenance(cfg));
        for r in &report.sensors {
            s.push_str(&format!("{},{},{},{},{}\n", r.trajectory, r.start, r.step, r.rank, r.node));
        }
        fs::write(dir.join(format!("{stem}_sensors.csv")), s)?;
    }
    Ok(())
}

/// Reads a sensor log and re-checks the gap within every placement.
pub fn read_sensor_log(path: &Path, graph: &MeshGraph<f64>, budget: &SensorBudget<f64>, cfg: &RunConfig) -> Result<Vec<SensorLogRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(SENSOR_HEADER) {
        return Err(Error::Parse(format!("{} lacks the sensor log header", path.display())));
    }
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<usize> = line
            .split(',')
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad sensor log row {line:?}"))))
            .collect::<Result<_>>()?;
        let [trajectory, start, step, rank, node] = f[..] else {
            return Err(Error::Parse(format!("sensor log row needs 5 fields: {line:?}")));
        };
        rows.push(SensorLogRow {
            trajectory,
            start,
            step,
            rank,
            node,
        });
    }
    let mut i = 0;
    while i < rows.len() {
        let key = (rows[i].trajectory, rows[i].start, rows[i].step);
        let mut j = i;
        while j < rows.len() && (rows[j].trajectory, rows[j].start, rows[j].step) == key {
            j += 1;
        }
        let set = SensorSet {
            indices: rows[i..j].iter().map(|r| r.node).collect(),
            strategy: cfg.sensing.strategy,
            budget: *budget,
            step: Some(key.2),
            truncated: false,
        };
        set.check(graph, cfg.sensing.metric)?;
        i = j;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub sensors: usize,
    /// Median wall-clock seconds of one greedy selection.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub nodes: usize,
    pub rows: Vec<BenchmarkRow>,
    /// Least-squares slope of log time against log sensor count.
    pub loglog_slope: f64,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Times greedy selection on a step mesh with random scores.
pub fn benchmark_placement(cfg: &RunConfig) -> Result<BenchmarkReport> {
    let b = &cfg.benchmark;
    let mesh_cfg = MeshDynamicsConfig {
        n_nodes: b.nodes,
        ..cfg.dataset.mesh.clone()
    };
    let graph = step_mesh::<f64>(&mesh_cfg)?;
    let gap = b.gap_edge_multiple * graph.median_edge_length();
    let mut rng = stream_rng(cfg.seed, 3);
    let scores: Vec<f64> = (0..graph.num_nodes()).map(|_| rng.random::<f64>()).collect();
    let field = ScoreField::on_interior(scores, &graph)?;
    let mut rows = Vec::new();
    for &s in &b.counts {
        let budget = SensorBudget::new(s, gap)?;
        let mut times = Vec::with_capacity(b.repeats);
        for _ in 0..b.repeats {
            let t = Instant::now();
            let set = greedy_select(&field, &graph.positions, graph.dim, &budget, cfg.sensing.metric)?;
            times.push(t.elapsed().as_secs_f64());
            if set.truncated {
                return Err(Error::InvalidArgument(format!("{s} sensors do not fit on the benchmark mesh")));
            }
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchmarkRow {
            sensors: s,
            seconds: times[times.len() / 2],
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.sensors as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.seconds).collect();
    Ok(BenchmarkReport {
        nodes: graph.num_nodes(),
        loglog_slope: loglog_slope(&xs, &ys),
        rows,
    })
}
