//! Toy ViT inference over dense or clustered weights, plus fidelity metrics.
//!
//! Dense and clustered models run the same forward pass; each linear layer
//! dispatches to [`matmul`] or [`clustered_matmul`] depending on how its
//! weight is stored. Because the two kernels share one accumulation order, a
//! clustered model produces exactly the logits of its dequantized twin.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ClusteredTensor, Model, ModelGraph, StoredTensor};
use crate::tensor::{gelu, layer_norm, matmul, mha_attention, Tensor};

/// Layer-norm epsilon used throughout the encoder.
pub const LN_EPS: f32 = 1e-6;

/// `x[m×k] · dequantize(w)[k×n]` computed by centroid lookup.
///
/// Uses the same `i, t, j` loop nest and per-element summation order as
/// [`matmul`], so the result is bit-identical to
/// `matmul(x, &dequantize_tensor(w)?)`. Only one codebook row of `w` is ever
/// resolved at a time.
pub fn clustered_matmul(x: &Tensor, w: &ClusteredTensor) -> Result<Tensor> {
    let (m, k) = x.dims2()?;
    let (k2, n) = match w.shape() {
        &[r, c] => (r, c),
        s => {
            return Err(Error::Shape {
                op: "clustered_matmul",
                lhs: x.shape().to_vec(),
                rhs: s.to_vec(),
            })
        }
    };
    if k != k2 {
        return Err(Error::Shape {
            op: "clustered_matmul",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let table = w.codebook().centroids();
    let idx = w.indices();
    if let Some(&bad) = idx.iter().find(|&&i| usize::from(i) >= table.len()) {
        return Err(Error::Corrupt(format!(
            "{}: index {bad} out of range for codebook of {}",
            w.name(),
            table.len()
        )));
    }
    let xd = x.data();
    let mut out = vec![0.0f32; m * n];
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        let x_row = &xd[i * k..(i + 1) * k];
        for (t, &x_it) in x_row.iter().enumerate() {
            let w_row = &idx[t * n..(t + 1) * n];
            for (o, &q) in out_row.iter_mut().zip(w_row) {
                *o += x_it * table[q as usize];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// How a linear layer's weight is held.
#[derive(Debug, Clone, Copy)]
pub enum LinearWeight<'a> {
    Dense(&'a Tensor),
    Clustered(&'a ClusteredTensor),
}

impl LinearWeight<'_> {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            LinearWeight::Dense(w) => matmul(x, w),
            LinearWeight::Clustered(w) => clustered_matmul(x, w),
        }
    }
}

/// Read access to the parameters of a model, by tensor name.
pub trait WeightStore {
    /// A tensor that must be stored dense (bias, norm, embedding).
    fn dense(&self, name: &str) -> Result<&Tensor>;
    /// A linear weight, dense or clustered.
    fn linear(&self, name: &str) -> Result<LinearWeight<'_>>;
}

fn missing(name: &str) -> Error {
    Error::Graph(format!("model has no tensor {name:?}"))
}

impl WeightStore for Model {
    fn dense(&self, name: &str) -> Result<&Tensor> {
        self.dense_tensor(name).ok_or_else(|| missing(name))
    }

    fn linear(&self, name: &str) -> Result<LinearWeight<'_>> {
        match self {
            Model::Dense(m) => m.get(name).map(LinearWeight::Dense).ok_or_else(|| missing(name)),
            Model::Clustered(m) => match m.get(name) {
                Some(StoredTensor::Dense(t)) => Ok(LinearWeight::Dense(&t.tensor)),
                Some(StoredTensor::Clustered(t)) => Ok(LinearWeight::Clustered(t)),
                None => Err(missing(name)),
            },
        }
    }
}

fn linear<S: WeightStore>(store: &S, x: &Tensor, prefix: &str) -> Result<Tensor> {
    let y = store.linear(&format!("{prefix}.weight"))?.apply(x)?;
    y.add_row_vector(store.dense(&format!("{prefix}.bias"))?)
}

fn norm<S: WeightStore>(store: &S, x: &Tensor, prefix: &str) -> Result<Tensor> {
    layer_norm(
        x,
        store.dense(&format!("{prefix}.gamma"))?,
        store.dense(&format!("{prefix}.beta"))?,
        LN_EPS,
    )
}

/// Pixels in `[0, 1]` are mapped to `[-1, 1]` before the patch embedding.
pub fn normalize_pixel(v: f32) -> f32 {
    2.0 * v - 1.0
}

/// Splits one `H×W×C` image into flattened, normalized `p×p×C` patches,
/// row-major over the patch grid.
fn patchify(image: &[f32], size: usize, channels: usize, patch: usize) -> Result<Tensor> {
    let grid = size / patch;
    let pd = patch * patch * channels;
    let mut out = Vec::with_capacity(grid * grid * pd);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * size + gx * patch) * channels;
                out.extend(image[start..start + patch * channels].iter().map(|&v| normalize_pixel(v)));
            }
        }
    }
    Tensor::new(vec![grid * grid, pd], out)
}

fn forward_one<S: WeightStore>(graph: &ModelGraph, store: &S, image: &[f32]) -> Result<Vec<f32>> {
    let cfg = &graph.config;
    let patches = patchify(image, cfg.image_size, cfg.channels, cfg.patch)?;
    let emb = linear(store, &patches, "patch_embed")?;

    let cls = store.dense("cls_token")?;
    let mut seq = cls.data().to_vec();
    seq.extend_from_slice(emb.data());
    let mut x = Tensor::new(vec![cfg.tokens(), cfg.dim], seq)?.add(store.dense("pos_embed")?)?;

    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        let h = norm(store, &x, &format!("{p}.norm1"))?;
        let qkv = linear(store, &h, &format!("{p}.attn.qkv"))?;
        let q = qkv.column_slice(0, cfg.dim)?;
        let k = qkv.column_slice(cfg.dim, cfg.dim)?;
        let v = qkv.column_slice(2 * cfg.dim, cfg.dim)?;
        let attn = mha_attention(&q, &k, &v, cfg.heads)?;
        x = x.add(&linear(store, &attn, &format!("{p}.attn.proj"))?)?;

        let h = norm(store, &x, &format!("{p}.norm2"))?;
        let h = gelu(&linear(store, &h, &format!("{p}.mlp.fc1"))?);
        x = x.add(&linear(store, &h, &format!("{p}.mlp.fc2"))?)?;
    }

    let x = norm(store, &x, "norm")?;
    let cls_out = Tensor::new(vec![1, cfg.dim], x.row(0).to_vec())?;
    Ok(linear(store, &cls_out, "head")?.into_data())
}

/// Runs a batch `images[n×H×W×C]` through the ViT described by `graph`,
/// returning logits `[n×classes]`.
pub fn vit_forward_with<S: WeightStore>(graph: &ModelGraph, store: &S, images: &Tensor) -> Result<Tensor> {
    let cfg = &graph.config;
    let &[n, h, w, c] = images.shape() else {
        return Err(Error::Config(format!(
            "images must be [n, H, W, C], got {:?}",
            images.shape()
        )));
    };
    if h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(Error::Config(format!(
            "image {h}×{w} is not divisible into {}×{} patches",
            cfg.patch, cfg.patch
        )));
    }
    if h != cfg.image_size || w != cfg.image_size || c != cfg.channels {
        return Err(Error::Config(format!(
            "model expects {0}×{0}×{1} images, got {h}×{w}×{c}",
            cfg.image_size, cfg.channels
        )));
    }
    let per = h * w * c;
    let mut logits = Vec::with_capacity(n * cfg.classes);
    for img in images.data().chunks_exact(per) {
        logits.extend(forward_one(graph, store, img)?);
    }
    Tensor::new(vec![n, cfg.classes], logits)
}

/// [`vit_forward_with`] on a model that carries its own graph descriptor.
pub fn vit_forward(model: &Model, images: &Tensor) -> Result<Tensor> {
    let graph = model.graph()?;
    vit_forward_with(&graph, model, images)
}

/// Seeded stand-in for an image classification validation set.
///
/// Each image is an oriented sinusoidal grating whose orientation and
/// frequency depend on its label, with a random phase and additive noise,
/// clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub images: Tensor,
    pub labels: Option<Vec<u32>>,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn generate(seed: u64, n: usize, size: usize, channels: usize, classes: usize) -> Result<Self> {
        if n == 0 || size == 0 || channels == 0 || classes == 0 {
            return Err(Error::Config("dataset dimensions must be positive".into()));
        }
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * size * size * channels);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.random_range(0..classes as u64) as u32;
            labels.push(label);
            let theta = std::f64::consts::PI * f64::from(label) / classes as f64;
            let freq = 1.0 + (label % 3) as f64;
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let (s, c) = theta.sin_cos();
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * c + y as f64 * s) / size as f64;
                    let base = 0.5 + 0.35 * (std::f64::consts::TAU * freq * u + phase).sin();
                    for _ in 0..channels {
                        let noise = 0.3 * (rng.random::<f64>() - 0.5);
                        data.push((base + noise).clamp(0.0, 1.0) as f32);
                    }
                }
            }
        }
        Ok(Self {
            images: Tensor::new(vec![n, size, size, channels], data)?,
            labels: Some(labels),
            seed,
        })
    }

    /// Wraps raw images (`n×H×W×C`, values expected in `[0, 1]`).
    pub fn from_images(images: Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Config(format!(
                "images must be [n, H, W, C], got {:?}",
                images.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::Config(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.shape()[0]
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Index of the largest value; the lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fidelity {
    pub top1_agreement: f64,
    pub mean_logit_l2: f64,
}

/// Agreement between two logit batches of identical shape.
pub fn fidelity_from_logits(base: &Tensor, variant: &Tensor) -> Result<Fidelity> {
    let (n, classes) = base.dims2()?;
    let (n2, classes2) = variant.dims2()?;
    if classes != classes2 {
        return Err(Error::Config(format!(
            "class count mismatch: {classes} vs {classes2}"
        )));
    }
    if n != n2 {
        return Err(Error::Shape {
            op: "fidelity",
            lhs: base.shape().to_vec(),
            rhs: variant.shape().to_vec(),
        });
    }
    let mut agree = 0usize;
    let mut l2_sum = 0.0f64;
    for i in 0..n {
        let (a, b) = (base.row(i), variant.row(i));
        if argmax(a) == argmax(b) {
            agree += 1;
        }
        let sq: f64 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = f64::from(x) - f64::from(y);
                d * d
            })
            .sum();
        l2_sum += sq.sqrt();
    }
    Ok(Fidelity {
        top1_agreement: agree as f64 / n as f64,
        mean_logit_l2: l2_sum / n as f64,
    })
}

/// Runs both models on `data` and compares their predictions.
pub fn fidelity_eval(base: &Model, variant: &Model, data: &SyntheticDataset) -> Result<Fidelity> {
    let bl = vit_forward(base, &data.images)?;
    let vl = vit_forward(variant, &data.images)?;
    fidelity_from_logits(&bl, &vl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Rank of class `label` in `row` (0 = best), ties broken by lower class index.
fn rank_of(row: &[f32], label: usize) -> usize {
    let v = row[label];
    row.iter()
        .enumerate()
        .filter(|&(i, &x)| x > v || (x == v && i < label))
        .count()
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[u32]) -> Result<Accuracy> {
    let (n, classes) = logits.dims2()?;
    if classes < 5 {
        return Err(Error::Config(format!("top-5 needs at least 5 classes, got {classes}")));
    }
    if labels.len() != n {
        return Err(Error::Config(format!("{} labels for {n} logit rows", labels.len())));
    }
    let (mut top1, mut top5) = (0usize, 0usize);
    for (i, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if label >= classes {
            return Err(Error::Config(format!("label {label} out of range for {classes} classes")));
        }
        let r = rank_of(logits.row(i), label);
        top1 += usize::from(r == 0);
        top5 += usize::from(r < 5);
    }
    Ok(Accuracy {
        top1: top1 as f64 / n as f64,
        top5: top5 as f64 / n as f64,
    })
}

pub fn accuracy_eval(model: &Model, data: &SyntheticDataset) -> Result<Accuracy> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("accuracy needs labelled data".into()))?;
    accuracy_from_logits(&vit_forward(model, &data.images)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{cluster_model, dequantize_tensor, ClusterMode, ClusteringConfig, Codebook};
    use crate::model::{generate_toy_vit, VitConfig};
    use std::sync::Arc;

    #[test]
    fn zero_codebook_gives_zero_output() {
        let cb = Arc::new(Codebook::new(vec![0.0]).unwrap());
        let w = ClusteredTensor::new("w", vec![3, 2], cb, vec![0; 6]).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        assert!(clustered_matmul(&x, &w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clustered_matmul_matches_dequantized() {
        let cb = Arc::new(Codebook::new(vec![-0.7, 0.1, 0.33, 2.5]).unwrap());
        let idx: Vec<u8> = (0..24).map(|i| ((i * 7) % 4) as u8).collect();
        let w = ClusteredTensor::new("w", vec![8, 3], cb, idx).unwrap();
        let x = Tensor::new(vec![4, 8], (0..32).map(|i| (i as f32 * 0.77).sin()).collect()).unwrap();
        let a = clustered_matmul(&x, &w).unwrap();
        let b = matmul(&x, &dequantize_tensor(&w).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clustered_matmul_rejects_mismatch() {
        let cb = Arc::new(Codebook::new(vec![1.0]).unwrap());
        let w = ClusteredTensor::new("w", vec![3, 2], cb, vec![0; 6]).unwrap();
        let x = Tensor::zeros(vec![2, 4]).unwrap();
        assert!(matches!(clustered_matmul(&x, &w), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_shapes_and_lossless_equivalence() {
        let cfg = VitConfig {
            dim: 16,
            heads: 2,
            depth: 1,
            ..VitConfig::default()
        };
        let dense = generate_toy_vit(cfg, 11).unwrap();
        let data = SyntheticDataset::generate(1, 3, 16, 1, 10).unwrap();
        let dm: Model = dense.clone().into();
        let logits = vit_forward(&dm, &data.images).unwrap();
        assert_eq!(logits.shape(), &[3, 10]);

        // qkv of width 16 has 768 weights: c = 256 is lossy, so build a
        // lossless model by rounding weights to 2 levels first.
        let (cm, _) = cluster_model(&dense, &ClusteringConfig::new(256, ClusterMode::PerLayer, 0)).unwrap();
        let deq = crate::clustering::dequantize_model(&cm).unwrap();
        let (cm2, rep) = cluster_model(&deq, &ClusteringConfig::new(256, ClusterMode::PerLayer, 0)).unwrap();
        assert!(rep.tensors.iter().all(|t| t.exact));
        let a = vit_forward(&Model::Dense(deq), &data.images).unwrap();
        let b = vit_forward(&Model::Clustered(cm2), &data.images).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_indivisible_images() {
        let dm: Model = generate_toy_vit(VitConfig::default(), 1).unwrap().into();
        let imgs = Tensor::zeros(vec![1, 15, 15, 1]).unwrap();
        assert!(matches!(vit_forward(&dm, &imgs), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn fidelity_identity() {
        let t = Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.2, 3.0, 1.0, 2.0]).unwrap();
        let f = fidelity_from_logits(&t, &t).unwrap();
        assert_eq!(f.top1_agreement, 1.0);
        assert_eq!(f.mean_logit_l2, 0.0);
        let other = Tensor::zeros(vec![2, 4]).unwrap();
        assert!(matches!(fidelity_from_logits(&t, &other), Err(Error::Config(_))));
    }

    #[test]
    fn accuracy_one_hot_and_containment() {
        let labels = [3u32, 0, 9];
        let mut logits = vec![0.0f32; 30];
        for (i, &l) in labels.iter().enumerate() {
            logits[i * 10 + l as usize] = 1.0;
        }
        let t = Tensor::new(vec![3, 10], logits).unwrap();
        let acc = accuracy_from_logits(&t, &labels).unwrap();
        assert_eq!((acc.top1, acc.top5), (1.0, 1.0));

        // all-equal logits: ranks follow class index
        let z = Tensor::zeros(vec![3, 10]).unwrap();
        let acc = accuracy_from_logits(&z, &labels).unwrap();
        assert_eq!(acc.top1, 1.0 / 3.0);
        assert_eq!(acc.top5, 2.0 / 3.0);
    }

    #[test]
    fn accuracy_errors() {
        let t = Tensor::zeros(vec![2, 4]).unwrap();
        assert!(accuracy_from_logits(&t, &[0, 1]).is_err());
        let dm: Model = generate_toy_vit(VitConfig::default(), 1).unwrap().into();
        let mut data = SyntheticDataset::generate(0, 2, 16, 1, 10).unwrap();
        data.labels = None;
        assert!(matches!(accuracy_eval(&dm, &data), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_is_deterministic_and_bounded() {
        let a = SyntheticDataset::generate(5, 4, 16, 1, 10).unwrap();
        let b = SyntheticDataset::generate(5, 4, 16, 1, 10).unwrap();
        assert_eq!(a, b);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.labels.as_ref().unwrap().len(), 4);
    }
}
