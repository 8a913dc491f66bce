use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::denoiser::{DenoiserConfig, FnDenoiser};
use crate::sampler::EnsembleForecast;

fn line_graph(n: usize) -> MeshGraph<f64> {
    let positions: Vec<f64> = (0..n).flat_map(|i| [i as f64, 0.0]).collect();
    let edges = (1..n).flat_map(|i| [(i - 1, i), (i, i - 1)]).collect();
    MeshGraph::new(2, positions, 0, vec![], edges, vec![false; n]).unwrap()
}

fn field(scores: &[f64]) -> ScoreField<f64> {
    ScoreField::new(scores.to_vec(), vec![true; scores.len()]).unwrap()
}

fn line_positions(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}

/// Greedy rule by scanning candidates in (score desc, index asc) order and
/// accepting each one that keeps every pairwise distance at least `gap`.
fn scan_oracle(scores: &[f64], eligible: &[bool], pos: &[f64], dim: usize, count: usize, gap: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| eligible[i]).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let dist = |a: usize, b: usize| {
        (0..dim).map(|k| (pos[a * dim + k] - pos[b * dim + k]).powi(2)).sum::<f64>().sqrt()
    };
    let mut picks: Vec<usize> = Vec::new();
    for i in order {
        if picks.len() == count {
            break;
        }
        if picks.iter().all(|&p| p != i && dist(p, i) >= gap) {
            picks.push(i);
        }
    }
    picks
}

#[test]
fn greedy_line_example() {
    let b = SensorBudget::new(2, 2.0).unwrap();
    let set = greedy_select(&field(&[5.0, 4.0, 3.0, 2.0, 1.0]), &line_positions(5), 1, &b, DistanceMetric::Euclidean).unwrap();
    assert_eq!(set.indices, vec![0, 2]);
    assert!(!set.truncated);
}

#[test]
fn zero_gap_takes_top_scores_and_single_pick_is_argmax() {
    let scores = [0.3, 2.0, 1.5, 2.0, 0.1, 1.9];
    let pos = line_positions(6);
    let top = greedy_select(&field(&scores), &pos, 1, &SensorBudget::new(3, 0.0).unwrap(), DistanceMetric::Euclidean).unwrap();
    assert_eq!(top.indices, vec![1, 3, 5]);
    let one = greedy_select(&field(&scores), &pos, 1, &SensorBudget::new(1, 10.0).unwrap(), DistanceMetric::Euclidean).unwrap();
    assert_eq!(one.indices, vec![1]);
}

#[test]
fn boundary_nodes_are_never_picked() {
    let mut g = line_graph(5);
    g.boundary[0] = true;
    let f = ScoreField::on_interior(vec![9.0, 1.0, 2.0, 3.0, 4.0], &g).unwrap();
    let set = greedy_select(&f, &g.positions, 2, &SensorBudget::new(2, 0.0).unwrap(), DistanceMetric::Euclidean).unwrap();
    assert_eq!(set.indices, vec![4, 3]);
}

#[test]
fn truncation_and_empty_eligibility() {
    let b = SensorBudget::new(4, 3.0).unwrap();
    let set = greedy_select(&field(&[1.0; 5]), &line_positions(5), 1, &b, DistanceMetric::Euclidean).unwrap();
    assert_eq!(set.indices, vec![0, 3]);
    assert!(set.truncated);
    let none = ScoreField::new(vec![1.0, 2.0], vec![false, false]).unwrap();
    assert!(greedy_select(&none, &[0.0, 1.0], 1, &b, DistanceMetric::Euclidean).is_err());
    assert!(ScoreField::new(vec![-1.0], vec![true]).is_err());
    assert!(SensorBudget::new(0, 1.0).is_err());
}

#[test]
fn chebyshev_metric_uses_largest_offset() {
    assert_eq!(DistanceMetric::Chebyshev.distance(&[0.0, 0.0], &[3.0, -4.0]), 4.0);
    assert_eq!(DistanceMetric::Euclidean.distance(&[0.0, 0.0], &[3.0, -4.0]), 5.0);
    // Diagonal neighbours on a grid are one index step apart under Chebyshev.
    let pos = [0.0, 0.0, 1.0, 1.0, 2.0, 0.0];
    let b = SensorBudget::new(3, 1.5).unwrap();
    let euc = greedy_select(&field(&[3.0, 2.0, 1.0]), &pos, 2, &b, DistanceMetric::Euclidean).unwrap();
    let che = greedy_select(&field(&[3.0, 2.0, 1.0]), &pos, 2, &b, DistanceMetric::Chebyshev).unwrap();
    assert_eq!(euc.indices, vec![0, 2]);
    assert_eq!(che.indices, vec![0, 2]);
    let b = SensorBudget::new(3, 1.2).unwrap();
    let euc = greedy_select(&field(&[3.0, 2.0, 1.0]), &pos, 2, &b, DistanceMetric::Euclidean).unwrap();
    let che = greedy_select(&field(&[3.0, 2.0, 1.0]), &pos, 2, &b, DistanceMetric::Chebyshev).unwrap();
    assert_eq!(euc.indices, vec![0, 1, 2]);
    assert_eq!(che.indices, vec![0, 2]);
}

#[test]
fn equal_scores_break_ties_by_index() {
    let scores = [1.0, 3.0, 3.0, 3.0, 0.5];
    let set = greedy_select(&field(&scores), &line_positions(5), 1, &SensorBudget::new(2, 0.0).unwrap(), DistanceMetric::Euclidean).unwrap();
    assert_eq!(set.indices, vec![1, 2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greedy_matches_scan_oracle_and_keeps_gap(
        seed in 0u64..10_000,
        n in 2usize..14,
        count in 1usize..5,
        gap in 0.0f64..0.6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.0..1.0)).collect();
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let eligible: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.8)).collect();
        let f = ScoreField::new(scores.clone(), eligible.clone()).unwrap();
        let b = SensorBudget::new(count, gap).unwrap();
        let set = greedy_select(&f, &pos, 2, &b, DistanceMetric::Euclidean).unwrap();
        prop_assert_eq!(&set.indices, &scan_oracle(&scores, &eligible, &pos, 2, count, gap));
        if let Some(d) = set.min_pairwise_distance(&pos, 2, DistanceMetric::Euclidean) {
            prop_assert!(d >= gap);
        }
    }

    #[test]
    fn every_strategy_keeps_the_gap(seed in 0u64..10_000, gap in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let positions: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.0..10.0)).collect();
        let g = MeshGraph::new(2, positions, 1, vec![0.0; n], vec![], vec![false; n]).unwrap();
        let b = SensorBudget::new(3, gap).unwrap();
        let scores = ScoreField::on_interior((0..n).map(|_| rng.random_range(0.0..1.0)).collect(), &g).unwrap();
        let members = (0..3).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ens = EnsembleForecast::new(members, n, 1).unwrap();
        for ctx in [PlacementContext::Random, PlacementContext::Predictive(&scores), PlacementContext::Uncertainty(&ens)] {
            // Infeasible budgets are reported as errors, never as crowded sets.
            if let Ok(set) = place_sensors(ctx, &g, &b, DistanceMetric::Euclidean, &mut rng) {
                set.check(&g, DistanceMetric::Euclidean).unwrap();
                prop_assert_eq!(set.indices.len(), 3);
            }
        }
    }
}

#[test]
fn random_placement_is_reproducible_and_uses_interior() {
    let mut g = line_graph(20);
    g.boundary[0] = true;
    g.boundary[19] = true;
    let b = SensorBudget::new(4, 2.0).unwrap();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        place_sensors(PlacementContext::Random, &g, &b, DistanceMetric::Euclidean, &mut rng).unwrap()
    };
    let a = run(3);
    assert_eq!(a, run(3));
    assert_eq!(a.strategy, Strategy::Random);
    assert!(a.indices.iter().all(|&i| i != 0 && i != 19));
    a.check(&g, DistanceMetric::Euclidean).unwrap();
    let infeasible = SensorBudget::new(10, 5.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(place_sensors(PlacementContext::Random, &g, &infeasible, DistanceMetric::Euclidean, &mut rng).is_err());
}

#[test]
fn predictive_and_uncertainty_pick_the_dominant_node_first() {
    let g = line_graph(10);
    let b = SensorBudget::new(3, 1.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut scores = vec![0.1; 10];
    scores[6] = 5.0;
    let f = ScoreField::on_interior(scores, &g).unwrap();
    let set = place_sensors(PlacementContext::Predictive(&f), &g, &b, DistanceMetric::Euclidean, &mut rng).unwrap();
    assert_eq!(set.indices[0], 6);
    assert!(!set.indices.contains(&5) && !set.indices.contains(&7));

    let mut a = vec![0.0; 10];
    let mut c = vec![0.0; 10];
    a[2] = 3.0;
    c[2] = -3.0;
    a[8] = 0.5;
    let ens = EnsembleForecast::new(vec![a, c], 10, 1).unwrap();
    let set = place_sensors(PlacementContext::Uncertainty(&ens), &g, &b, DistanceMetric::Euclidean, &mut rng).unwrap();
    assert_eq!(&set.indices[..2], &[2, 8]);
    assert_eq!(set.strategy, Strategy::Uncertainty);

    let single = EnsembleForecast::replicate(&[0.0; 10], 1, 10, 1).unwrap();
    assert!(uncertainty_field(&single, &g).is_err());
}

#[test]
fn strategy_names_parse() {
    for (s, v) in [("none", Strategy::None), ("random", Strategy::Random), ("predictive", Strategy::Predictive), ("uncertainty", Strategy::Uncertainty)] {
        assert_eq!(s.parse::<Strategy>().unwrap(), v);
    }
    assert!("best".parse::<Strategy>().is_err());
}

type Raw = fn(&Tensor<f64>, &[f64], Option<&Tensor<f64>>) -> crate::error::Result<Tensor<f64>>;

#[test]
fn ground_truth_error_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let zero: FnDenoiser<f64, Raw> = FnDenoiser {
        sigma_data: 1.0,
        f: |x, _, _| Ok(Tensor::zeros(x.shape())),
    };
    let x0 = Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
    assert_eq!(ground_truth_error_field(&zero, &x0, None, 80.0, 1, &mut rng).unwrap(), vec![1.0, 0.0]);
    let x0 = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
    assert_eq!(ground_truth_error_field(&zero, &x0, None, 80.0, 1, &mut rng).unwrap(), vec![12.5]);

    let target = vec![0.4, -1.0, 2.0];
    let oracle = FnDenoiser {
        sigma_data: 1.0,
        f: move |x: &Tensor<f64>, _: &[f64], _: Option<&Tensor<f64>>| Tensor::from_vec(x.shape(), target.clone()),
    };
    let x0 = Tensor::from_vec(&[3, 1], vec![0.4, -1.0, 2.0]).unwrap();
    assert_eq!(ground_truth_error_field(&oracle, &x0, None, 80.0, 1, &mut rng).unwrap(), vec![0.0; 3]);
}

#[test]
fn huber_branches() {
    let r = Tensor::from_vec(&[2], vec![0.5, 2.0]).unwrap();
    assert_eq!(r.huber(1.0).unwrap().data(), &[0.125, 1.5]);
}

fn small_predictor(seed: u64) -> ErrorPredictor<f64> {
    let mut cfg = DenoiserConfig::error_predictor(2, 1, 2.5);
    cfg.hidden = 8;
    cfg.noise_dim = 8;
    cfg.fourier_features = 4;
    cfg.bottleneck_blocks = 1;
    cfg.seed = seed;
    ErrorPredictor::new(DenoiserNet::new(cfg).unwrap()).unwrap()
}

#[test]
fn predictor_learns_a_constant_target() {
    let g = MeshGraph::<f64>::periodic_ring(12, 1).unwrap();
    let mut pred = small_predictor(1);
    let topo = pred.net.topology(&g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs: Vec<Vec<f64>> = (0..16).map(|_| (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let targets = vec![vec![0.7; 12]; 16];
    let cfg = ErrorTrainConfig {
        batch_size: 4,
        steps: 300,
        huber_delta: 1.0,
        optimizer: OptimizerConfig {
            lr: 1e-2,
            ..OptimizerConfig::default()
        },
    };
    let losses = fit_error_predictor(&mut pred, &topo, &inputs, &targets, &cfg, &mut rng).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    for x in &inputs[..4] {
        let out = pred.predict(&topo, &Tensor::from_vec(&[12, 1], x.clone()).unwrap()).unwrap();
        for v in out {
            assert!(v >= 0.0 && (v - 0.7).abs() < 1e-2, "{v}");
        }
    }
}

#[test]
fn predictor_rejects_conditioned_backbones() {
    let cfg = DenoiserConfig::<f64>::forecaster(2, 1, 2.5);
    assert!(ErrorPredictor::new(DenoiserNet::new(cfg).unwrap()).is_err());
}

#[test]
fn error_training_leaves_forecaster_untouched() {
    let g = MeshGraph::<f64>::periodic_ring(12, 1).unwrap();
    let mut fcfg = DenoiserConfig::forecaster(2, 1, 2.5);
    fcfg.hidden = 8;
    fcfg.noise_dim = 8;
    let forecaster = DenoiserNet::new(fcfg).unwrap();
    let before = forecaster.params.export();
    let ftopo = forecaster.topology(&g).unwrap();
    let mut pred = small_predictor(2);
    let ptopo = pred.net.topology(&g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let traj: Vec<Vec<f64>> = (0..5).map(|t| (0..12).map(|i| ((i + t) as f64 * 0.5).sin()).collect()).collect();
    let cfg = ErrorTrainConfig {
        steps: 3,
        batch_size: 2,
        ..ErrorTrainConfig::default()
    };
    let losses = train_error_predictor(&mut pred, &ptopo, &forecaster, &ftopo, &[traj], 80.0, &cfg, &mut rng).unwrap();
    assert_eq!(losses.len(), 3);
    assert!(pred.target_scale > 0.0);
    assert_eq!(forecaster.params.export(), before);
}
