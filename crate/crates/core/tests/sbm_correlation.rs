use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdgae_core::encoder::standard_normal;
use vdgae_core::synth::{embedding_correlation, expected_degree, generate_sbm, tune_q, SbmSpec};
use vdgae_core::tape::Tensor;

#[test]
fn average_degree_concentrates() {
    let mut spec = SbmSpec::reference(0);
    spec.q_between = tune_q(&spec, 18.0, 20.0).unwrap();
    let expected = expected_degree(&spec);
    assert!((18.0..=20.0).contains(&expected));
    let degrees: Vec<f64> = (0..20)
        .map(|seed| generate_sbm(&SbmSpec { seed, ..spec.clone() }).unwrap().average_degree())
        .collect();
    let mean = degrees.iter().sum::<f64>() / 20.0;
    assert!((mean - expected).abs() <= 1.5, "{mean} vs {expected}");
    assert!(degrees.iter().all(|d| (18.0..=20.0).contains(d)), "{degrees:?}");
}

#[test]
fn planted_communities_are_denser() {
    let spec = SbmSpec {
        num_communities: 3,
        community_size: 40,
        p_within: vec![0.5, 0.4, 0.3],
        q_between: 0.01,
        seed: 9,
    };
    let g = generate_sbm(&spec).unwrap();
    let labels = g.labels().unwrap();
    let inside = g.edges().iter().filter(|&&(u, v)| labels[u] == labels[v]).count();
    assert!(inside as f64 > 0.8 * g.num_edges() as f64);
    let x = g.features().unwrap().to_dense();
    for &(u, v) in g.edges() {
        assert_eq!((x.get(u, v), x.get(v, u)), (1.0, 1.0));
    }
    assert_eq!(x.data().iter().sum::<f64>(), 2.0 * g.num_edges() as f64);
}

fn permute_cols(z: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_fn(z.rows(), z.cols(), |i, j| z.get(i, perm[j]))
}

#[test]
fn correlation_follows_column_permutation_and_ignores_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = standard_normal(200, 6, &mut rng);
    // mix some columns so correlations are not all small
    let z = Tensor::from_fn(200, 6, |i, j| base.get(i, j) + 0.7 * base.get(i, (j + 1) % 6));
    let r = embedding_correlation(&z, 3, 2).unwrap().corr;

    let perm = [4, 2, 0, 5, 1, 3];
    let rp = embedding_correlation(&permute_cols(&z, &perm), 3, 2).unwrap().corr;
    for a in 0..6 {
        for b in 0..6 {
            assert!((rp.get(a, b) - r.get(perm[a], perm[b])).abs() < 1e-12);
        }
    }

    let scales: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..100.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 }).collect();
    let shifted = Tensor::from_fn(200, 6, |i, j| scales[j] * z.get(i, j) + 3.0);
    let rs = embedding_correlation(&shifted, 3, 2).unwrap().corr;
    assert!(rs.max_abs_diff(&r) < 1e-12);
}

#[test]
fn independent_columns_are_nearly_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = standard_normal(5000, 8, &mut rng);
    let report = embedding_correlation(&z, 4, 2).unwrap();
    for a in 0..8 {
        assert_eq!(report.corr.get(a, a), 1.0);
        for b in 0..8 {
            if a != b {
                assert!(report.corr.get(a, b) < 0.05);
            }
        }
    }
    assert!(report.constant_columns.is_empty());
}

#[test]
fn block_structure_gives_high_contrast() {
    // each channel's dims share a latent factor plus small noise
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (k, d, n) = (4, 3, 2000);
    let factors = standard_normal(n, k, &mut rng);
    let noise = standard_normal(n, k * d, &mut rng);
    let z = Tensor::from_fn(n, k * d, |i, j| factors.get(i, j / d) + 0.5 * noise.get(i, j));
    let report = embedding_correlation(&z, k, d).unwrap();
    assert!(report.block_contrast.unwrap() > 3.0);

    // shuffling columns across blocks destroys it
    let perm: Vec<usize> = (0..k * d).map(|j| (j % k) * d + j / k).collect();
    let mixed = embedding_correlation(&permute_cols(&z, &perm), k, d).unwrap();
    assert!(mixed.block_contrast.unwrap() < 1.0);
}

#[test]
fn constant_columns_are_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut z = standard_normal(50, 4, &mut rng);
    for i in 0..50 {
        z.set(i, 2, 1e6);
    }
    let report = embedding_correlation(&z, 2, 2).unwrap();
    assert_eq!(report.constant_columns, vec![2]);
    assert_eq!(report.corr.get(2, 0), 0.0);
}
