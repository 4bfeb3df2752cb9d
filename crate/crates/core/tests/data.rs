mod common;

use fedfreeze_core::data::{generate_blobs, partition_dirichlet, partition_iid, BlobSpec};
use fedfreeze_core::{Dataset, FreezeMask, Model, OptimizerKind, OptimizerState, Partition};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn assert_disjoint_cover(ds: &Dataset, parts: &[Partition]) {
    let mut seen = vec![false; ds.len()];
    for p in parts {
        assert_eq!(p.data.len(), p.indices.len());
        for (row, &i) in p.indices.iter().enumerate() {
            assert!(!seen[i], "row {} assigned twice", i);
            seen[i] = true;
            assert_eq!(p.data.sample(row), ds.sample(i));
            assert_eq!(p.data.labels()[row], ds.labels()[i]);
        }
    }
    assert!(seen.iter().all(|&s| s));
    assert_eq!(parts.iter().map(|p| p.sample_count()).sum::<u64>(), ds.len() as u64);
}

/// Pearson statistic of a clients x classes contingency table.
fn independence_chi_square(parts: &[Partition], classes: usize) -> (f64, f64) {
    let table: Vec<Vec<usize>> = parts.iter().map(|p| p.data.class_counts()).collect();
    let n: usize = table.iter().flatten().sum();
    let mut stat = 0.0;
    for (k, row) in table.iter().enumerate() {
        let rk: usize = row.iter().sum();
        for c in 0..classes {
            let cc: usize = table.iter().map(|r| r[c]).sum();
            let e = rk as f64 * cc as f64 / n as f64;
            stat += (table[k][c] as f64 - e).powi(2) / e;
        }
    }
    let dof = ((parts.len() - 1) * (classes - 1)) as f64;
    (stat, ChiSquared::new(dof).unwrap().inverse_cdf(0.99))
}

fn max_class_share(p: &Partition) -> f64 {
    let counts = p.data.class_counts();
    *counts.iter().max().unwrap() as f64 / p.data.len() as f64
}

#[test]
fn iid_class_frequencies_match_the_global_ones() {
    let ds = generate_blobs(&BlobSpec::new(5, 3, 5000), 4).unwrap();
    let parts = partition_iid(&ds, 10, 4).unwrap();
    assert_disjoint_cover(&ds, &parts);
    let (stat, q99) = independence_chi_square(&parts, 5);
    assert!(stat < q99, "chi-square {} above {}", stat, q99);
}

#[test]
fn large_alpha_behaves_like_iid() {
    let ds = generate_blobs(&BlobSpec::new(4, 2, 8000), 5).unwrap();
    let parts = partition_dirichlet(&ds, 10, 1000.0, 5).unwrap();
    assert_disjoint_cover(&ds, &parts);
    for p in &parts {
        for share in p.data.class_counts().iter().map(|&c| c as f64 / p.data.len() as f64) {
            assert!((share - 0.25).abs() < 0.05, "share {}", share);
        }
        assert!((p.data.len() as f64 - 800.0).abs() < 120.0);
    }
}

#[test]
fn small_alpha_skews_labels() {
    let ds = generate_blobs(&BlobSpec::new(10, 2, 5000), 6).unwrap();
    let parts = partition_dirichlet(&ds, 10, 0.1, 6).unwrap();
    assert_disjoint_cover(&ds, &parts);
    let top = parts.iter().map(max_class_share).fold(0.0, f64::max);
    assert!(top > 0.6, "largest single-class share {}", top);
}

#[test]
fn too_many_clients_fail() {
    let ds = generate_blobs(&BlobSpec::new(2, 2, 5), 0).unwrap();
    assert!(partition_iid(&ds, 6, 0).is_err());
    assert!(partition_dirichlet(&ds, 6, 1.0, 0).is_err());
}

#[test]
fn separated_blobs_are_linearly_separable() {
    let spec = BlobSpec { classes: 2, dims: 2, samples: 2000, cluster_std: 1.0, center_box: 10.0 };
    let ds = generate_blobs(&spec, 3).unwrap();
    // Closed form: the perpendicular bisector of the two class means.
    let mut means = [[0.0f64; 2]; 2];
    let counts = ds.class_counts();
    for i in 0..ds.len() {
        let l = ds.labels()[i];
        for d in 0..2 {
            means[l][d] += ds.sample(i)[d] as f64 / counts[l] as f64;
        }
    }
    let dir = [means[1][0] - means[0][0], means[1][1] - means[0][1]];
    let gap = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    assert!(gap > 6.0, "this seed must give well separated means, got {}", gap);
    let mid = [(means[0][0] + means[1][0]) / 2.0, (means[0][1] + means[1][1]) / 2.0];
    let correct = (0..ds.len())
        .filter(|&i| {
            let x = ds.sample(i);
            let side = (x[0] as f64 - mid[0]) * dir[0] + (x[1] as f64 - mid[1]) * dir[1];
            usize::from(side > 0.0) == ds.labels()[i]
        })
        .count();
    assert!(correct as f64 / ds.len() as f64 > 0.99);

    // The engine's linear softmax model gets there too.
    let arch = common::mlp(&[2, 2]);
    let mut model: Model<f64> = common::init(arch, 3);
    let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.05).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for _ in 0..5 {
        for chunk in idx.chunks(32) {
            let (x, y) = ds.batch::<f64>(chunk);
            model.train_step(&x, &y, &FreezeMask::all(1), &mut opt).unwrap();
        }
    }
    let eval = fedfreeze_core::client::evaluate(&model, &ds, 512).unwrap();
    assert!(eval.accuracy > 99.0, "{}", eval.accuracy);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partitions_are_disjoint_covers_and_deterministic(
        samples in 20usize..400,
        clients in 1usize..10,
        classes in 1usize..6,
        alpha in 0.2f64..50.0,
        seed in any::<u64>(),
    ) {
        let ds = generate_blobs(&BlobSpec::new(classes, 3, samples), seed).unwrap();
        prop_assert_eq!(&ds, &generate_blobs(&BlobSpec::new(classes, 3, samples), seed).unwrap());
        let iid = partition_iid(&ds, clients, seed).unwrap();
        assert_disjoint_cover(&ds, &iid);
        let sizes: Vec<usize> = iid.iter().map(|p| p.data.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(&iid, &partition_iid(&ds, clients, seed).unwrap());
        if let Ok(dir) = partition_dirichlet(&ds, clients, alpha, seed) {
            assert_disjoint_cover(&ds, &dir);
            prop_assert!(dir.iter().all(|p| !p.data.is_empty()));
            prop_assert_eq!(dir, partition_dirichlet(&ds, clients, alpha, seed).unwrap());
        }
    }
}
