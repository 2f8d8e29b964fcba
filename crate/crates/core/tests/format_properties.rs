use proptest::prelude::*;
use vitclust::clustering::{cluster_model, dequantize_model, ClusterMode, ClusteringConfig};
use vitclust::error::{Error, ParseErrorKind};
use vitclust::format::{
    clustered_size_bytes, compression_ratio, dense_size_bytes, load_clustered, load_dense, load_model,
    planned_size_bytes, save_clustered, save_dense,
};
use vitclust::model::{generate_toy_vit, is_clusterable, DenseModel, NamedTensor, VitConfig};
use vitclust::tensor::Tensor;

fn quick(clusters: usize, mode: ClusterMode, seed: u64) -> ClusteringConfig {
    ClusteringConfig {
        restarts: 1,
        max_iters: 10,
        ..ClusteringConfig::new(clusters, mode, seed)
    }
}

fn vit_config() -> impl Strategy<Value = VitConfig> {
    (
        prop_oneof![Just(8usize), Just(16)],
        1usize..=3,
        prop_oneof![Just(2usize), Just(4)],
        prop_oneof![Just(8usize), Just(16), Just(32), Just(64)],
        1usize..=4,
        prop_oneof![Just(1usize), Just(2), Just(4)],
        1usize..=2,
        2usize..=12,
    )
        .prop_map(|(image_size, channels, patch, dim, depth, heads, mlp_ratio, classes)| VitConfig {
            image_size,
            channels,
            patch,
            dim,
            depth,
            heads,
            mlp_ratio,
            classes,
        })
}

/// Arbitrary named tensors, some of them clusterable.
fn loose_model() -> impl Strategy<Value = DenseModel> {
    let tensor = (
        prop::collection::vec(1usize..=6, 1..=4),
        any::<bool>(),
        "[a-z]{1,6}",
        any::<u64>(),
    )
        .prop_map(|(shape, weight, stem, s)| (shape, weight, stem, s));
    prop::collection::vec(tensor, 1..8).prop_map(|specs| {
        let mut tensors: Vec<NamedTensor> = Vec::new();
        for (i, (mut shape, weight, stem, s)) in specs.into_iter().enumerate() {
            let name = if weight {
                shape.truncate(2);
                if shape.len() == 1 {
                    shape.push(3);
                }
                format!("{stem}{i}.weight")
            } else {
                format!("{stem}{i}.bias")
            };
            let n: usize = shape.iter().product();
            let data = (0..n).map(|j| ((s as f32 + j as f32) * 0.37).sin()).collect();
            tensors.push(NamedTensor::new(name, Tensor::new(shape, data).unwrap()));
        }
        tensors.push(NamedTensor::new("anchor.weight", Tensor::new(vec![2, 2], vec![0.5, -0.5, 0.25, 1.0]).unwrap()));
        DenseModel::new(tensors).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_models_roundtrip(cfg in vit_config(), seed in any::<u64>(), c in 2usize..=256, entire in any::<bool>()) {
        let dense = generate_toy_vit(cfg, seed).unwrap();
        let bytes = save_dense(&dense).unwrap();
        let back = load_dense(&bytes).unwrap();
        prop_assert_eq!(&back, &dense);
        prop_assert_eq!(save_dense(&back).unwrap(), bytes);

        let mode = if entire { ClusterMode::EntireModel } else { ClusterMode::PerLayer };
        let (cm, _) = cluster_model(&dense, &quick(c, mode, seed)).unwrap();
        let cbytes = save_clustered(&cm).unwrap();
        let cback = load_clustered(&cbytes).unwrap();
        prop_assert_eq!(save_clustered(&cback).unwrap(), cbytes);
        prop_assert_eq!(dequantize_model(&cback).unwrap(), dequantize_model(&cm).unwrap());
    }

    #[test]
    fn loose_models_roundtrip(model in loose_model(), c in 2usize..=16, entire in any::<bool>()) {
        let bytes = save_dense(&model).unwrap();
        prop_assert_eq!(save_dense(&load_dense(&bytes).unwrap()).unwrap(), bytes);
        let mode = if entire { ClusterMode::EntireModel } else { ClusterMode::PerLayer };
        let (cm, _) = cluster_model(&model, &quick(c, mode, 1)).unwrap();
        let cbytes = save_clustered(&cm).unwrap();
        prop_assert_eq!(save_clustered(&load_clustered(&cbytes).unwrap()).unwrap(), cbytes);
    }

    #[test]
    fn size_formula_holds(model in loose_model(), c in 2usize..=64, entire in any::<bool>()) {
        let mode = if entire { ClusterMode::EntireModel } else { ClusterMode::PerLayer };
        let (cm, _) = cluster_model(&model, &quick(c, mode, 2)).unwrap();
        let (mut n_cl, mut n_ex, mut tables) = (0u64, 0u64, 0u64);
        for t in model.tensors() {
            if is_clusterable(&t.name, t.tensor.shape()) {
                n_cl += t.tensor.len() as u64;
            } else {
                n_ex += t.tensor.len() as u64;
            }
        }
        let size = clustered_size_bytes(&cm);
        // short tables appear when a tensor has fewer distinct values than c
        let entries: u64 = match cm.shared_codebook() {
            Some(cb) => cb.len() as u64,
            None => cm
                .tensors()
                .iter()
                .filter_map(|t| match t {
                    vitclust::model::StoredTensor::Clustered(ct) => {
                        tables += 1;
                        Some(ct.codebook().len() as u64)
                    }
                    _ => None,
                })
                .sum(),
        };
        prop_assert_eq!(size.total, n_cl + 4 * entries + 4 * n_ex);
        prop_assert_eq!(dense_size_bytes(&model).total, 4 * (n_cl + n_ex));
        if entire {
            prop_assert!(entries <= c as u64);
        } else {
            prop_assert!(entries <= c as u64 * tables);
        }
    }

    #[test]
    fn truncation_is_always_a_parse_error(cfg in vit_config(), cut in any::<prop::sample::Index>()) {
        let cfg = VitConfig { dim: 8, heads: 2, depth: 1, ..cfg };
        let dense = generate_toy_vit(cfg, 3).unwrap();
        let (cm, _) = cluster_model(&dense, &quick(4, ClusterMode::PerLayer, 0)).unwrap();
        for bytes in [save_dense(&dense).unwrap(), save_clustered(&cm).unwrap()] {
            let at = cut.index(bytes.len());
            let res = load_model(&bytes[..at]);
            prop_assert!(
                matches!(res, Err(Error::Parse { kind: ParseErrorKind::Truncated, .. }) | Err(Error::Parse { kind: ParseErrorKind::BadMagic, .. })),
                "cut at {} gave {:?}", at, res.map(|_| ())
            );
        }
    }
}

fn leveled_model(n: usize) -> DenseModel {
    let data: Vec<f32> = (0..n).map(|i| (i % 256) as f32 / 64.0 - 2.0).collect();
    DenseModel::new(vec![NamedTensor::new("w.weight", Tensor::new(vec![n / 16, 16], data).unwrap())]).unwrap()
}

#[test]
fn ratio_approaches_four_from_below() {
    let mut prev = 0.0;
    for shift in 8..=16 {
        let n = 1usize << shift;
        let m = leveled_model(n);
        let (cm, _) = cluster_model(&m, &ClusteringConfig::new(256, ClusterMode::EntireModel, 0)).unwrap();
        let r = compression_ratio(dense_size_bytes(&m).total, clustered_size_bytes(&cm).total).unwrap();
        assert_eq!(r, 4.0 * n as f64 / (n as f64 + 1024.0));
        assert!(r > prev && r < 4.0, "n = {n}: {r}");
        prev = r;
    }
}

#[test]
fn ratio_only_moves_with_table_bytes() {
    let model = leveled_model(1 << 14);
    let mut index_bytes = None;
    for c in [16usize, 32, 64, 128, 256] {
        let (cm, _) = cluster_model(&model, &quick(c, ClusterMode::EntireModel, 0)).unwrap();
        let size = clustered_size_bytes(&cm);
        assert_eq!(size.codebook_bytes, 4 * c as u64);
        let rest = size.total - size.codebook_bytes;
        assert_eq!(*index_bytes.get_or_insert(rest), rest);
    }
}

#[test]
fn planned_size_agrees_with_real_models() {
    let cfg = VitConfig::default();
    let dense = generate_toy_vit(cfg, 5).unwrap();
    let mut cl = (0u64, 0u64);
    let mut ex = 0u64;
    for t in dense.tensors().iter().filter(|t| t.name != "vit.config") {
        if is_clusterable(&t.name, t.tensor.shape()) {
            cl = (cl.0 + t.tensor.len() as u64, cl.1 + 1);
        } else {
            ex += t.tensor.len() as u64;
        }
    }
    for mode in [ClusterMode::EntireModel, ClusterMode::PerLayer] {
        let (cm, rep) = cluster_model(&dense, &quick(64, mode, 0)).unwrap();
        assert!(rep.tensors.iter().all(|t| t.codebook_len == 64));
        assert_eq!(planned_size_bytes(cl.0, ex, mode, cl.1, 64), clustered_size_bytes(&cm));
    }
}

#[test]
fn deit_scale_arithmetic() {
    let n = 86_000_000u64;
    let s = planned_size_bytes(n, 0, ClusterMode::EntireModel, 1, 256);
    assert_eq!(4 * n, 344_000_000);
    assert_eq!(s.total, 86_001_024);
    let r = compression_ratio(4 * n, s.total).unwrap();
    assert!((r - 3.999_952_4).abs() < 1e-6, "{r}");
}
