use proptest::prelude::*;
use vitclust::clustering::{
    cluster_model, distinct_count, lloyd_kmeans_1d, optimal_kmeans_1d_dp, ClusterMode, ClusteringConfig, Codebook,
};
use vitclust::model::{DenseModel, NamedTensor};
use vitclust::tensor::Tensor;

/// Minimum SSE over every labelling of `xs` into at most `k` groups.
fn brute_force_sse(xs: &[f64], k: usize) -> f64 {
    let n = xs.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut sse = 0.0;
        for g in 0..k {
            let members: Vec<f64> = xs.iter().zip(&labels).filter(|(_, &l)| l == g).map(|(&x, _)| x).collect();
            if !members.is_empty() {
                let m = members.iter().sum::<f64>() / members.len() as f64;
                sse += members.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
        }
        best = best.min(sse);
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

fn values(max_len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(prop_oneof![-3.0f32..3.0, (-20i32..20).prop_map(|i| i as f32 * 0.25)], 1..max_len)
}

fn cfg(k: usize, seed: u64) -> ClusteringConfig {
    ClusteringConfig::new(k, ClusterMode::PerLayer, seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lloyd_sse_never_increases(xs in values(2000), k_seed in 1usize..=256, seed in any::<u64>()) {
        let distinct = distinct_count(&xs);
        prop_assume!(distinct >= 2);
        let k = 2 + k_seed % (distinct.min(256) - 1);
        let fit = lloyd_kmeans_1d(&xs, &cfg(k, seed)).unwrap();
        for w in fit.sse_history.windows(2) {
            prop_assert!(w[1] <= w[0], "SSE rose from {} to {}", w[0], w[1]);
        }
    }

    #[test]
    fn assignments_are_nearest_with_low_ties(xs in values(300), raw in prop::collection::vec(-4.0f32..4.0, 1..40)) {
        let cb = Codebook::from_unsorted(raw).unwrap();
        let c = cb.centroids();
        for &v in &xs {
            let i = cb.nearest(v) as usize;
            let d = |j: usize| (f64::from(v) - f64::from(c[j])).abs();
            for j in 0..c.len() {
                prop_assert!(d(i) <= d(j));
                if j < i {
                    prop_assert!(d(j) > d(i), "tie at {} should go to lower index {}", v, j);
                }
            }
        }
    }

    #[test]
    fn lloyd_output_respects_nearest_rule(xs in values(500), k_seed in 1usize..=64, seed in any::<u64>()) {
        let distinct = distinct_count(&xs);
        prop_assume!(distinct >= 2);
        let k = 2 + k_seed % (distinct.min(256) - 1);
        let fit = lloyd_kmeans_1d(&xs, &cfg(k, seed)).unwrap();
        let c = fit.codebook.centroids();
        for (&v, &i) in xs.iter().zip(&fit.assignment.indices) {
            let di = (f64::from(v) - f64::from(c[i as usize])).abs();
            prop_assert!(c.iter().all(|&cj| di <= (f64::from(v) - f64::from(cj)).abs()));
        }
    }

    #[test]
    fn lloyd_never_beats_the_optimum(xs in values(200), k_seed in 1usize..=8, seed in any::<u64>()) {
        let distinct = distinct_count(&xs);
        prop_assume!(distinct >= 2);
        let k = 2 + k_seed % (distinct.min(256) - 1);
        let fit = lloyd_kmeans_1d(&xs, &cfg(k, seed)).unwrap();
        let (_, opt) = optimal_kmeans_1d_dp(&xs, k).unwrap();
        prop_assert!(fit.sse >= opt * (1.0 - 1e-12) - 1e-12, "lloyd {} < optimum {}", fit.sse, opt);
    }

    #[test]
    fn dp_matches_exhaustive_search(xs in prop::collection::vec((-12i32..12).prop_map(|i| i as f32 * 0.5), 1..8), k in 1usize..=3) {
        let distinct = distinct_count(&xs);
        prop_assume!(k <= distinct);
        let (_, dp) = optimal_kmeans_1d_dp(&xs, k).unwrap();
        let xs64: Vec<f64> = xs.iter().map(|&v| f64::from(v)).collect();
        let bf = brute_force_sse(&xs64, k);
        prop_assert!((dp - bf).abs() <= 1e-9 * (1.0 + bf), "dp {} vs brute force {}", dp, bf);
    }

    #[test]
    fn per_layer_optimum_refines_global(a in values(120), b in values(120), k in 1usize..=6) {
        prop_assume!(k <= distinct_count(&a) && k <= distinct_count(&b));
        let (_, sa) = optimal_kmeans_1d_dp(&a, k).unwrap();
        let (_, sb) = optimal_kmeans_1d_dp(&b, k).unwrap();
        let joint: Vec<f32> = a.iter().chain(&b).copied().collect();
        let (_, sj) = optimal_kmeans_1d_dp(&joint, k).unwrap();
        prop_assert!(sa + sb <= sj * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn clustering_is_deterministic(xs in values(1000), k_seed in 1usize..=32, seed in any::<u64>()) {
        let distinct = distinct_count(&xs);
        prop_assume!(distinct >= 2);
        let k = 2 + k_seed % (distinct.min(256) - 1);
        let a = lloyd_kmeans_1d(&xs, &cfg(k, seed)).unwrap();
        let b = lloyd_kmeans_1d(&xs, &cfg(k, seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn ramp(n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|i| lo + (hi - lo) * (i as f32 * 0.618_034).fract()).collect()
}

#[test]
fn disjoint_layers_favour_per_layer_tables() {
    let a = ramp(400, 0.0, 1.0);
    let b = ramp(400, 100.0, 101.0);
    let model = DenseModel::new(vec![
        NamedTensor::new("a.weight", Tensor::new(vec![20, 20], a.clone()).unwrap()),
        NamedTensor::new("b.weight", Tensor::new(vec![20, 20], b.clone()).unwrap()),
    ])
    .unwrap();

    // optimal solutions
    let (_, oa) = optimal_kmeans_1d_dp(&a, 16).unwrap();
    let (_, ob) = optimal_kmeans_1d_dp(&b, 16).unwrap();
    let joint: Vec<f32> = a.iter().chain(&b).copied().collect();
    let (_, oj) = optimal_kmeans_1d_dp(&joint, 16).unwrap();
    assert!(oa + ob <= oj);

    // the pipeline follows suit
    let (_, pl) = cluster_model(&model, &ClusteringConfig::new(16, ClusterMode::PerLayer, 3)).unwrap();
    let (_, em) = cluster_model(&model, &ClusteringConfig::new(16, ClusterMode::EntireModel, 3)).unwrap();
    assert!(pl.total_sse <= em.total_sse, "{} vs {}", pl.total_sse, em.total_sse);
    assert_eq!(em.codebook_count, 1);
    assert_eq!(pl.codebook_count, 2);
}

#[test]
fn oracle_worked_example() {
    let xs = [0.0f64, 1.0, 2.0, 10.0];
    assert_eq!(brute_force_sse(&xs, 2), 2.0);
    let (cb, sse) = optimal_kmeans_1d_dp(&[0.0, 1.0, 2.0, 10.0], 2).unwrap();
    assert_eq!(cb.centroids(), &[1.0, 10.0]);
    assert_eq!(sse, 2.0);
}
