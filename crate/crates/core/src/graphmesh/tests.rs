use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pool::voxel_pool_with;
use super::*;

fn cloud(n: usize, dim: usize, seed: u64) -> MeshGraph<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<f64> = (0..n * dim).map(|_| rng.random_range(0.0..1.0)).collect();
    let features: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    MeshGraph::new(dim, positions, 2, features, vec![], vec![false; n]).unwrap()
}

#[test]
fn two_points_in_one_voxel() {
    let g = MeshGraph::<f64>::new(2, vec![0.1, 0.1, 0.2, 0.2], 1, vec![1.0, 3.0], vec![], vec![false; 2]).unwrap();
    let (coarse, assign) = voxel_pool(&g, 0.5).unwrap();
    assert_eq!(coarse.num_nodes(), 1);
    assert_eq!(assign, vec![0, 0]);
    assert!((coarse.positions[0] - 0.15).abs() < 1e-15);
    assert!((coarse.positions[1] - 0.15).abs() < 1e-15);
    assert_eq!(coarse.features, vec![2.0]);
}

#[test]
fn singleton_clusters_copy_positions() {
    let g = MeshGraph::new(1, vec![0.1, 1.1, 2.1], 1, vec![1.0, 2.0, 3.0], vec![], vec![false; 3]).unwrap();
    let (coarse, _) = voxel_pool(&g, 1.0).unwrap();
    assert_eq!(coarse.positions, g.positions);
    assert_eq!(coarse.features, g.features);
}

#[test]
fn cell_faces_go_to_lower_cell() {
    assert_eq!(voxel_cell(&[1.0_f64], 0.5), vec![1]);
    assert_eq!(voxel_cell(&[0.9_f64], 0.5), vec![1]);
    assert_eq!(voxel_cell(&[1.01_f64], 0.5), vec![2]);
}

#[test]
fn pooled_centers_stay_inside_their_voxel() {
    let g = cloud(200, 2, 5);
    let r = 0.13;
    let (coarse, assign) = voxel_pool(&g, r).unwrap();
    let half_diag = r * 2f64.sqrt() / 2.0;
    for i in 0..g.num_nodes() {
        let cell = voxel_cell(g.position(i), r);
        let center: Vec<f64> = cell.iter().map(|&c| (c as f64 + 0.5) * r).collect();
        let p = coarse.position(assign[i]);
        assert!(distance(p, &center) <= half_diag + 1e-12);
    }
}

#[test]
fn pooling_preserves_weighted_feature_sum() {
    let g = cloud(150, 3, 6);
    let (coarse, assign) = voxel_pool(&g, 0.3).unwrap();
    let mut counts = vec![0usize; coarse.num_nodes()];
    for &a in &assign {
        counts[a] += 1;
    }
    for ch in 0..2 {
        let fine: f64 = (0..g.num_nodes()).map(|i| g.feature_row(i)[ch]).sum();
        let pooled: f64 = (0..coarse.num_nodes()).map(|c| coarse.feature_row(c)[ch] * counts[c] as f64).sum();
        assert!((fine - pooled).abs() < 1e-10);
    }
}

#[test]
fn constant_field_round_trips_exactly() {
    let g = cloud(120, 2, 7);
    let g = g.with_features(1, vec![0.1; 120]).unwrap();
    let (coarse, _) = voxel_pool(&g, 0.21).unwrap();
    assert!(coarse.features.iter().all(|&v| v == 0.1));
    let back = knn_unpool(&coarse.features, 1, &coarse.positions, &g.positions, 2, 3).unwrap();
    assert!(back.iter().all(|&v| v == 0.1));
}

#[test]
fn knn_equidistant_is_mean() {
    let coarse_pos: Vec<f64> = vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 5.0, 5.0];
    let feats = vec![1.0, 2.0, 6.0, 100.0];
    let out = knn_unpool(&feats, 1, &coarse_pos, &[0.0, 0.0], 2, 3).unwrap();
    assert!((out[0] - 3.0).abs() < 1e-14);
}

#[test]
fn knn_coincident_copies() {
    let coarse_pos = vec![0.0, 0.0, 1.0, 0.0];
    let feats = vec![7.0, -3.0];
    let out = knn_unpool(&feats, 1, &coarse_pos, &[1.0, 0.0], 2, 2).unwrap();
    assert_eq!(out, vec![-3.0]);
}

#[test]
fn knn_single_neighbor() {
    let coarse_pos = vec![0.0, 2.0, 5.0];
    let feats = vec![1.0, 2.0, 3.0];
    let out = knn_unpool(&feats, 1, &coarse_pos, &[1.9, 4.0], 1, 1).unwrap();
    assert_eq!(out, vec![2.0, 3.0]);
    assert!(knn_unpool(&feats, 1, &coarse_pos, &[0.0], 1, 4).is_err());
}

#[test]
fn knn_weights_are_a_partition_of_unity() {
    let fine = cloud(80, 2, 8);
    let coarse = cloud(20, 2, 9);
    let w = knn_weights(&coarse.positions, &fine.positions, 2, 4).unwrap();
    for row in w.weights.chunks(4) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn radius_edges_match_brute_force() {
    let g = cloud(100, 2, 10);
    let radius = 0.15;
    let fast = build_radius_edges(&g.positions, 2, radius).unwrap();
    let mut brute = Vec::new();
    for i in 0..100 {
        for j in 0..100 {
            if i != j && distance(g.position(i), g.position(j)) <= radius {
                brute.push((i, j));
            }
        }
    }
    assert_eq!(fast, brute);
    for &(i, j) in &fast {
        assert!(fast.binary_search(&(j, i)).is_ok());
    }
}

#[test]
fn radius_edges_inclusive_boundary() {
    let pos = vec![0.0, 1.0];
    assert!(build_radius_edges(&pos, 1, 0.5).unwrap().is_empty());
    assert_eq!(build_radius_edges(&pos, 1, 1.0).unwrap(), vec![(0, 1), (1, 0)]);
}

#[test]
fn empty_graph_cannot_pool() {
    let g = MeshGraph::<f64>::new(2, vec![], 1, vec![], vec![], vec![]).unwrap();
    assert!(voxel_pool(&g, 1.0).is_err());
}

#[test]
fn edge_attributes_are_relative_positions() {
    let g = MeshGraph::new(2, vec![0.0, 0.0, 3.0, 4.0], 0, vec![], vec![(0, 1), (1, 0)], vec![false; 2]).unwrap();
    assert_eq!(g.edge_attributes(), vec![3.0, 4.0, 5.0, -3.0, -4.0, 5.0]);
}

#[test]
fn invalid_edges_rejected() {
    let r = MeshGraph::new(1, vec![0.0, 1.0], 0, vec![], vec![(0, 2)], vec![false; 2]);
    assert!(matches!(r, Err(crate::Error::IndexOutOfRange { .. })));
}

#[test]
fn periodic_ring_is_connected_and_regular() {
    let g = MeshGraph::<f64>::periodic_ring(64, 1).unwrap();
    assert!(g.is_connected());
    assert_eq!(g.edges.len(), 128);
    let chord = g.median_edge_length();
    assert!((chord - 1.0).abs() < 1e-3);
}

#[test]
fn mesh_file_round_trip() {
    let mut g = cloud(30, 2, 11);
    g.edges = build_radius_edges(&g.positions, 2, 0.3).unwrap();
    g.boundary[3] = true;
    let mut buf = Vec::new();
    write_mesh(&g, &mut buf).unwrap();
    let back: MeshGraph<f64> = read_mesh(&buf[..]).unwrap();
    assert_eq!(back, g);
    let mut again = Vec::new();
    write_mesh(&back, &mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn mesh_file_rejects_garbage() {
    assert!(read_mesh::<f64, _>(&b"hello\n"[..]).is_err());
    let bad = format!("{MESH_MAGIC}\n1 1 0 0\nx\n\n0\n");
    assert!(read_mesh::<f64, _>(bad.as_bytes()).is_err());
}

#[test]
fn topology_levels_and_segments() {
    let mut g = cloud(60, 2, 12);
    g.edges = build_radius_edges(&g.positions, 2, 0.25).unwrap();
    let pooling = PoolingConfig::new(vec![0.2, 0.4], 3);
    let topo = Topology::build(&g, &pooling, 2).unwrap();
    assert_eq!(topo.levels.len(), 3);
    assert_eq!(topo.levels[0].num_edges(), g.edges.len());
    for lvl in &topo.levels {
        assert_eq!(*lvl.offsets.last().unwrap(), lvl.num_edges());
        for i in 0..lvl.num_nodes {
            for e in lvl.offsets[i]..lvl.offsets[i + 1] {
                assert_eq!(lvl.dst[e], i);
            }
        }
    }
    assert!(Topology::build(&g, &pooling, 3).is_err());
    let (_, map) = voxel_pool_with(&g, 0.2, 1.0).unwrap();
    assert_eq!(map.counts.iter().sum::<usize>(), 60);
}

#[test]
fn pooling_config_validation() {
    assert!(PoolingConfig::new(vec![0.2, 0.1], 3).validate().is_err());
    assert!(PoolingConfig::new(vec![0.1, 0.2], 0).validate().is_err());
    assert!(PoolingConfig::new(vec![0.1_f64, 0.2], 3).validate().is_ok());
}
