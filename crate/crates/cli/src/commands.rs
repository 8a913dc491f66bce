//! Subcommand bodies. Each validates the configuration before any compute and
//! writes its outputs under `output_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use meshcast::error::{Error, Result};
use meshcast::sampler::{ensemble_step, EnsembleForecast};
use meshcast::denoiser::NetDenoiser;
use meshcast::sensing::{place_sensors, PlacementContext, ScoreField, Strategy};
use meshcast::tensors::Tensor;

use crate::config::RunConfig;
use crate::pipeline::{self, RunLock, ERROR_NET_FILE, FORECASTER_FILE};
use crate::verify::{run_verify, VerifyReport};

/// Applies the thread override: `MESHCAST_THREADS`, else the config value.
pub fn configure_threads(cfg: &RunConfig) -> Result<()> {
    let from_env = match std::env::var("MESHCAST_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::InvalidConfig(format!("MESHCAST_THREADS={v:?} is not a positive integer")))?,
        ),
        Err(_) => None,
    };
    if let Some(n) = from_env.or(cfg.threads) {
        // A pool configured earlier in the process wins; that is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn checkpoint_or_default(cfg: &RunConfig, given: Option<&Path>, file: &str) -> PathBuf {
    given.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join(file))
}

pub fn generate_data(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    pipeline::generate_data(cfg)?;
    Ok(cfg.dataset_dir())
}

pub fn train(cfg: &RunConfig, resume: bool, stop_after: Option<u64>) -> Result<pipeline::TrainOutcome> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let ds = pipeline::load_data(cfg)?;
    pipeline::train_forecaster(cfg, &ds, Some(&cfg.output_dir), resume, stop_after)
}

pub fn train_error_net(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<f64>> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let ds = pipeline::load_data(cfg)?;
    let net = pipeline::load_forecaster(cfg, &checkpoint_or_default(cfg, checkpoint, FORECASTER_FILE))?;
    Ok(pipeline::train_error_net(cfg, &ds, &net, Some(&cfg.output_dir))?.1)
}

/// Shared body of `forecast` and `assimilate`; `forecast` is the no-sensor case.
pub fn assimilate(cfg: &RunConfig, checkpoint: Option<&Path>, error_net: Option<&Path>, stem: &str) -> Result<pipeline::EvalReport> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let ds = pipeline::load_data(cfg)?;
    let net = pipeline::load_forecaster(cfg, &checkpoint_or_default(cfg, checkpoint, FORECASTER_FILE))?;
    let pred = match cfg.sensing.strategy {
        Strategy::Predictive => Some(pipeline::load_error_net(cfg, &checkpoint_or_default(cfg, error_net, ERROR_NET_FILE))?),
        _ => None,
    };
    let report = pipeline::evaluate(cfg, &ds, &net, cfg.sensing.strategy, pred.as_ref())?;
    pipeline::write_eval(cfg, &cfg.output_dir, stem, &report)?;
    if !report.sensors.is_empty() {
        let budget = cfg.sensing.budget(&ds.graph)?;
        pipeline::read_sensor_log(&cfg.output_dir.join(format!("{stem}_sensors.csv")), &ds.graph, &budget, cfg)?;
    }
    Ok(report)
}

pub fn forecast(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<pipeline::EvalReport> {
    let mut c = cfg.clone();
    c.sensing.strategy = Strategy::None;
    assimilate(&c, checkpoint, None, "forecast")
}

/// Places one sensor set for the state at `index` of held-out trajectory `trajectory`.
pub fn place(cfg: &RunConfig, checkpoint: Option<&Path>, error_net: Option<&Path>, trajectory: usize, index: usize) -> Result<serde_json::Value> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let ds = pipeline::load_data(cfg)?;
    let (_, test) = pipeline::split(cfg, &ds)?;
    let state = test
        .get(trajectory)
        .and_then(|t| t.get(index))
        .ok_or_else(|| Error::InvalidArgument(format!("no held-out state {index} in trajectory {trajectory}")))?;
    let budget = cfg.sensing.budget(&ds.graph)?;
    let metric = cfg.sensing.metric;
    let mut rng = pipeline::stream_rng(cfg.seed, 5);
    let (nodes, channels) = (ds.num_nodes(), ds.channels);
    let set = match cfg.sensing.strategy {
        Strategy::None => return Err(Error::InvalidArgument("strategy none places no sensors".into())),
        Strategy::Random => place_sensors(PlacementContext::Random, &ds.graph, &budget, metric, &mut rng)?,
        Strategy::Uncertainty => {
            let net = pipeline::load_forecaster(cfg, &checkpoint_or_default(cfg, checkpoint, FORECASTER_FILE))?;
            let e = cfg.forecast.ensemble;
            let topo = net.topology(&ds.graph)?.tile(e)?;
            let params = net.params.bind(false);
            let den = NetDenoiser { net: &net, params: &params, topo: &topo };
            let prev = EnsembleForecast::replicate(state, e, nodes, channels)?;
            let ens = ensemble_step(&den, &prev, &cfg.schedule(), &cfg.sampler(), None, &mut rng)?;
            place_sensors(PlacementContext::Uncertainty(&ens), &ds.graph, &budget, metric, &mut rng)?
        }
        Strategy::Predictive => {
            let pred = pipeline::load_error_net(cfg, &checkpoint_or_default(cfg, error_net, ERROR_NET_FILE))?;
            let topo = pred.net.topology(&ds.graph)?;
            let x = Tensor::from_vec(&[nodes, channels], state.clone())?;
            let field = ScoreField::on_interior(pred.predict(&topo, &x)?, &ds.graph)?;
            place_sensors(PlacementContext::Predictive(&field), &ds.graph, &budget, metric, &mut rng)?
        }
    };
    set.check(&ds.graph, metric)?;
    let positions: Vec<&[f64]> = set.indices.iter().map(|&i| ds.graph.position(i)).collect();
    let out = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "trajectory": trajectory,
        "index": index,
        "sensors": set,
        "positions": positions,
    });
    fs::write(cfg.output_dir.join("sensors.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    Ok(out)
}

pub fn verify(cfg: &RunConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let report = run_verify(cfg)?;
    fs::write(cfg.output_dir.join("verify.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

pub fn benchmark(cfg: &RunConfig) -> Result<pipeline::BenchmarkReport> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let report = pipeline::benchmark_placement(cfg)?;
    let mut s = format!("{}sensors,seconds\n", pipeline::provenance(cfg));
    for r in &report.rows {
        s.push_str(&format!("{},{:?}\n", r.sensors, r.seconds));
    }
    fs::write(cfg.output_dir.join("benchmark.csv"), s)?;
    Ok(report)
}
