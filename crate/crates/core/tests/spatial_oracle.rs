use ffe_core::{bounding_grid, ParticleFrame, SpatialIndex, Vec3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight O(n) scan sorted by (squared distance, index).
fn scan(points: &[Vec3], q: Vec3, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter()
        .take(k)
        .map(|(d, i)| (i, d.sqrt()))
        .collect()
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
}

fn check(points: &[Vec3], queries: &[Vec3], k: usize) {
    let idx = SpatialIndex::from_points(points.to_vec()).unwrap();
    for q in queries {
        let got: Vec<(usize, f64)> = idx
            .knn(*q, k)
            .iter()
            .map(|n| (n.index, n.distance))
            .collect();
        assert_eq!(got, scan(points, *q, k));
    }
}

#[test]
fn uniform_512_k16_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = cloud(&mut rng, 512);
    let qs = cloud(&mut rng, 100);
    check(&pts, &qs, 16);
}

#[test]
fn random_256_k32_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts = cloud(&mut rng, 256);
    let qs = cloud(&mut rng, 50);
    check(&pts, &qs, 32);
}

#[test]
fn lattice_with_many_ties() {
    // integer lattice: plenty of exactly equal distances
    let mut pts = Vec::new();
    for i in 0..6 {
        for j in 0..6 {
            for l in 0..6 {
                pts.push([i as f64, j as f64, l as f64]);
            }
        }
    }
    let qs: Vec<Vec3> = pts
        .iter()
        .take(40)
        .copied()
        .chain([[2.5, 2.5, 2.5], [0.5, 3.0, 1.5]])
        .collect();
    for k in [1, 6, 7, 19, 27] {
        check(&pts, &qs, k);
    }
}

#[test]
fn index_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = cloud(&mut rng, 300);
    let a = SpatialIndex::from_points(pts.clone()).unwrap();
    let b = SpatialIndex::from_points(pts).unwrap();
    for q in cloud(&mut rng, 20) {
        assert_eq!(a.knn(q, 9), b.knn(q, 9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_equals_scan(seed in any::<u64>(), n in 1usize..1000, k in 1usize..40, quantize in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = cloud(&mut rng, n);
        if quantize {
            for p in &mut pts { for v in p.iter_mut() { *v = (*v * 4.0).round() / 4.0; } }
        }
        let qs = cloud(&mut rng, 8);
        let idx = SpatialIndex::from_points(pts.clone()).unwrap();
        for q in qs {
            let got: Vec<(usize, f64)> = idx.knn(q, k).iter().map(|n| (n.index, n.distance)).collect();
            prop_assert_eq!(got, scan(&pts, q, k));
        }
    }

    #[test]
    fn grid_encloses_particles(seed in any::<u64>(), n in 1usize..200, g in 2usize..16, margin in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec3> = (0..n).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(0.0..0.1), rng.gen_range(5.0..9.0)]).collect();
        let frame = ParticleFrame::new(pts).unwrap();
        let grid = bounding_grid(&frame, g, margin).unwrap();
        let hi = grid.max_corner();
        let tol = 1e-9;
        for p in frame.positions() {
            for a in 0..3 {
                prop_assert!(grid.origin[a] - tol <= p[a] && p[a] <= hi[a] + tol);
            }
        }
    }
}
