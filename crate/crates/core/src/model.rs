//! Model containers and the toy ViT graph description.
//!
//! A model on disk is just an ordered list of named tensors. Which tensors
//! may be clustered is decided by name: every 2-D tensor whose name ends in
//! `.weight` (the linear projections). Everything else (biases, norm
//! parameters, embeddings, the class token) stays dense.
//!
//! ViT models additionally carry a small `vit.config` descriptor tensor so
//! the graph can be rebuilt from a file without side-channel flags.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::Serialize;

use crate::clustering::{ClusterMode, Codebook};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Name of the architecture descriptor tensor stored in ViT model files.
pub const CONFIG_TENSOR: &str = "vit.config";

pub fn is_clusterable(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && name.ends_with(".weight")
}

/// Metadata tensors are neither parameters nor clustered, and are left out of
/// size accounting.
pub fn is_metadata(name: &str) -> bool {
    name == CONFIG_TENSOR
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }
}

fn check_unique<'a>(names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Graph(format!("duplicate tensor name {n:?}")));
        }
    }
    Ok(())
}

/// Uncompressed FP32 model.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel {
    tensors: Vec<NamedTensor>,
}

impl DenseModel {
    pub fn new(tensors: Vec<NamedTensor>) -> Result<Self> {
        check_unique(tensors.iter().map(|t| t.name.as_str()))?;
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    /// Number of parameters, metadata excluded.
    pub fn param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| !is_metadata(&t.name))
            .map(|t| t.tensor.len())
            .sum()
    }
}

/// A weight tensor stored as u8 indices into a table of FP32 centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredTensor {
    pub(crate) name: String,
    pub(crate) shape: Vec<usize>,
    pub(crate) codebook: Arc<Codebook>,
    pub(crate) indices: Vec<u8>,
}

impl ClusteredTensor {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        codebook: Arc<Codebook>,
        indices: Vec<u8>,
    ) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!("invalid shape {shape:?} for {name}")));
        }
        let len: usize = shape.iter().product();
        if indices.len() != len {
            return Err(Error::Corrupt(format!(
                "{name}: {} indices for shape {shape:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| usize::from(i) >= codebook.len()) {
            return Err(Error::Corrupt(format!(
                "{name}: index {bad} out of range for codebook of {}",
                codebook.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            codebook,
            indices,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codebook(&self) -> &Arc<Codebook> {
        &self.codebook
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Dense(NamedTensor),
    Clustered(ClusteredTensor),
}

impl StoredTensor {
    pub fn name(&self) -> &str {
        match self {
            StoredTensor::Dense(t) => &t.name,
            StoredTensor::Clustered(t) => &t.name,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::Dense(t) => t.tensor.shape(),
            StoredTensor::Clustered(t) => &t.shape,
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Model whose clusterable weights are stored as codebook indices.
///
/// In [`ClusterMode::EntireModel`] all clustered tensors share one codebook;
/// in [`ClusterMode::PerLayer`] each clustered tensor owns its table.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredModel {
    mode: ClusterMode,
    shared: Option<Arc<Codebook>>,
    tensors: Vec<StoredTensor>,
}

impl ClusteredModel {
    pub fn new(
        mode: ClusterMode,
        shared: Option<Arc<Codebook>>,
        tensors: Vec<StoredTensor>,
    ) -> Result<Self> {
        check_unique(tensors.iter().map(|t| t.name()))?;
        match (mode, &shared) {
            (ClusterMode::EntireModel, None) => {
                return Err(Error::Config("entire-model clustering needs a shared codebook".into()))
            }
            (ClusterMode::PerLayer, Some(_)) => {
                return Err(Error::Config("per-layer clustering has no shared codebook".into()))
            }
            (ClusterMode::EntireModel, Some(cb)) => {
                for t in &tensors {
                    if let StoredTensor::Clustered(ct) = t {
                        if ct.codebook.as_ref() != cb.as_ref() {
                            return Err(Error::Corrupt(format!(
                                "{}: codebook differs from the shared table",
                                ct.name
                            )));
                        }
                    }
                }
            }
            (ClusterMode::PerLayer, None) => {}
        }
        Ok(Self {
            mode,
            shared,
            tensors,
        })
    }

    pub fn mode(&self) -> ClusterMode {
        self.mode
    }

    pub fn shared_codebook(&self) -> Option<&Arc<Codebook>> {
        self.shared.as_ref()
    }

    pub fn tensors(&self) -> &[StoredTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name() == name)
    }

    /// Number of distinct centroid tables the model stores.
    pub fn codebook_count(&self) -> usize {
        match self.mode {
            ClusterMode::EntireModel => 1,
            ClusterMode::PerLayer => self
                .tensors
                .iter()
                .filter(|t| matches!(t, StoredTensor::Clustered(_)))
                .count(),
        }
    }
}

/// Either kind of model, as read from a TDM1 or TCM1 file.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Dense(DenseModel),
    Clustered(ClusteredModel),
}

impl Model {
    /// `(name, shape)` of every stored tensor in file order.
    pub fn tensor_shapes(&self) -> Vec<(&str, &[usize])> {
        match self {
            Model::Dense(m) => m
                .tensors()
                .iter()
                .map(|t| (t.name.as_str(), t.tensor.shape()))
                .collect(),
            Model::Clustered(m) => m.tensors().iter().map(|t| (t.name(), t.shape())).collect(),
        }
    }

    pub fn dense_tensor(&self, name: &str) -> Option<&Tensor> {
        match self {
            Model::Dense(m) => m.get(name),
            Model::Clustered(m) => match m.get(name) {
                Some(StoredTensor::Dense(t)) => Some(&t.tensor),
                _ => None,
            },
        }
    }

    pub fn graph(&self) -> Result<ModelGraph> {
        ModelGraph::from_model(self)
    }
}

impl From<DenseModel> for Model {
    fn from(m: DenseModel) -> Self {
        Model::Dense(m)
    }
}

impl From<ClusteredModel> for Model {
    fn from(m: ClusteredModel) -> Self {
        Model::Clustered(m)
    }
}

/// Architecture hyperparameters of a toy ViT (square images).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            patch: 4,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            classes: 10,
        }
    }
}

impl VitConfig {
    /// DeiT-Base sized architecture (224×224 RGB, patch 16, width 768,
    /// 12 blocks, 1000 classes). Used only for analytic profiling.
    pub fn deit_base() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            classes: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.classes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, h, t, c) = (self.dim, self.hidden(), self.tokens(), self.classes);
        let embed = self.patch_dim() * d + d + d + t * d;
        let block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        embed + self.depth * block + 2 * d + d * c + c
    }

    fn to_descriptor(self) -> Vec<f32> {
        [
            self.image_size,
            self.channels,
            self.patch,
            self.dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.classes,
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }

    fn from_descriptor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if t.shape() != [8] {
            return Err(Error::Graph(format!(
                "{CONFIG_TENSOR} must have shape [8], got {:?}",
                t.shape()
            )));
        }
        let mut vals = [0usize; 8];
        for (slot, &v) in vals.iter_mut().zip(d) {
            if v < 0.0 || v.fract() != 0.0 || v > 16_777_216.0 {
                return Err(Error::Graph(format!("{CONFIG_TENSOR} holds non-integer {v}")));
            }
            *slot = v as usize;
        }
        let cfg = Self {
            image_size: vals[0],
            channels: vals[1],
            patch: vals[2],
            dim: vals[3],
            depth: vals[4],
            heads: vals[5],
            mlp_ratio: vals[6],
            classes: vals[7],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    PatchEmbed,
    Embedding,
    EncoderBlock,
    FinalNorm,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub clusterable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub tensors: Vec<TensorSpec>,
}

/// Ordered layer description of a toy ViT.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelGraph {
    pub config: VitConfig,
    pub layers: Vec<LayerSpec>,
}

fn spec(name: String, shape: Vec<usize>) -> TensorSpec {
    let clusterable = is_clusterable(&name, &shape);
    TensorSpec {
        name,
        shape,
        clusterable,
    }
}

impl ModelGraph {
    pub fn from_config(config: VitConfig) -> Result<Self> {
        config.validate()?;
        let (d, h, t) = (config.dim, config.hidden(), config.tokens());
        let mut layers = vec![
            LayerSpec {
                name: "patch_embed".into(),
                kind: LayerKind::PatchEmbed,
                tensors: vec![
                    spec("patch_embed.weight".into(), vec![config.patch_dim(), d]),
                    spec("patch_embed.bias".into(), vec![d]),
                ],
            },
            LayerSpec {
                name: "embed".into(),
                kind: LayerKind::Embedding,
                tensors: vec![
                    spec("cls_token".into(), vec![1, d]),
                    spec("pos_embed".into(), vec![t, d]),
                ],
            },
        ];
        for i in 0..config.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            layers.push(LayerSpec {
                name: format!("blocks.{i}"),
                kind: LayerKind::EncoderBlock,
                tensors: vec![
                    spec(p("norm1.gamma"), vec![d]),
                    spec(p("norm1.beta"), vec![d]),
                    spec(p("attn.qkv.weight"), vec![d, 3 * d]),
                    spec(p("attn.qkv.bias"), vec![3 * d]),
                    spec(p("attn.proj.weight"), vec![d, d]),
                    spec(p("attn.proj.bias"), vec![d]),
                    spec(p("norm2.gamma"), vec![d]),
                    spec(p("norm2.beta"), vec![d]),
                    spec(p("mlp.fc1.weight"), vec![d, h]),
                    spec(p("mlp.fc1.bias"), vec![h]),
                    spec(p("mlp.fc2.weight"), vec![h, d]),
                    spec(p("mlp.fc2.bias"), vec![d]),
                ],
            });
        }
        layers.push(LayerSpec {
            name: "norm".into(),
            kind: LayerKind::FinalNorm,
            tensors: vec![spec("norm.gamma".into(), vec![d]), spec("norm.beta".into(), vec![d])],
        });
        layers.push(LayerSpec {
            name: "head".into(),
            kind: LayerKind::Classifier,
            tensors: vec![
                spec("head.weight".into(), vec![d, config.classes]),
                spec("head.bias".into(), vec![config.classes]),
            ],
        });
        Ok(Self { config, layers })
    }

    /// Rebuilds the graph from a model's descriptor tensor and checks that the
    /// stored tensors match it exactly.
    pub fn from_model(model: &Model) -> Result<Self> {
        let desc = model.dense_tensor(CONFIG_TENSOR).ok_or_else(|| {
            Error::Graph(format!("model has no dense {CONFIG_TENSOR} descriptor"))
        })?;
        let graph = Self::from_config(VitConfig::from_descriptor(desc)?)?;
        let stored: Vec<(&str, &[usize])> = model
            .tensor_shapes()
            .into_iter()
            .filter(|(n, _)| !is_metadata(n))
            .collect();
        let expected: Vec<&TensorSpec> = graph.tensor_specs().collect();
        if stored.len() != expected.len() {
            return Err(Error::Graph(format!(
                "model has {} parameter tensors, architecture needs {}",
                stored.len(),
                expected.len()
            )));
        }
        for (s, (name, shape)) in expected.iter().zip(stored) {
            if s.name != name || s.shape != shape {
                return Err(Error::Graph(format!(
                    "expected {} {:?}, found {} {:?}",
                    s.name, s.shape, name, shape
                )));
            }
        }
        Ok(graph)
    }

    pub fn tensor_specs(&self) -> impl Iterator<Item = &TensorSpec> {
        self.layers.iter().flat_map(|l| l.tensors.iter())
    }

    pub fn param_count(&self) -> usize {
        self.tensor_specs().map(|t| t.shape.iter().product::<usize>()).sum()
    }
}

/// Generates a toy ViT with deterministic weights.
///
/// Linear weights and the class/positional embeddings are drawn uniformly
/// from `±1/√fan_in` (fan_in = first dimension for weights, width for the
/// embeddings); biases start at zero, norm gains at one and norm shifts at
/// zero.
pub fn generate_toy_vit(config: VitConfig, seed: u64) -> Result<DenseModel> {
    let graph = ModelGraph::from_config(config)?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut tensors = vec![NamedTensor::new(
        CONFIG_TENSOR,
        Tensor::new(vec![8], config.to_descriptor())?,
    )];
    for s in graph.tensor_specs() {
        let len: usize = s.shape.iter().product();
        let data: Vec<f32> = if s.clusterable {
            let bound = 1.0 / (s.shape[0] as f32).sqrt();
            (0..len).map(|_| rng.random_range(-bound..bound)).collect()
        } else if s.name == "cls_token" || s.name == "pos_embed" {
            let bound = 1.0 / (config.dim as f32).sqrt();
            (0..len).map(|_| rng.random_range(-bound..bound)).collect()
        } else if s.name.ends_with(".gamma") {
            vec![1.0; len]
        } else {
            vec![0.0; len]
        };
        tensors.push(NamedTensor::new(s.name.clone(), Tensor::new(s.shape.clone(), data)?));
    }
    DenseModel::new(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count_matches_shapes() {
        let cfg = VitConfig::default();
        let graph = ModelGraph::from_config(cfg).unwrap();
        assert_eq!(cfg.param_count(), graph.param_count());
        // 16·64+64 + 64 + 17·64 + 2·(128 + 12480 + 4160 + 128 + 16640 + 16448) + 128 + 650
        assert_eq!(cfg.param_count(), 102_986);
        let model = generate_toy_vit(cfg, 7).unwrap();
        assert_eq!(model.param_count(), 102_986);
    }

    #[test]
    fn graph_roundtrips_through_descriptor() {
        let cfg = VitConfig::default();
        let model: Model = generate_toy_vit(cfg, 1).unwrap().into();
        let graph = model.graph().unwrap();
        assert_eq!(graph.config, cfg);
        assert_eq!(graph.layers.len(), 2 + cfg.depth + 2);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let cfg = VitConfig::default();
        let a = generate_toy_vit(cfg, 3).unwrap();
        let b = generate_toy_vit(cfg, 3).unwrap();
        assert_eq!(a, b);
        let w = a.get("blocks.0.mlp.fc2.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 1.0 / 16.0));
        assert_ne!(a, generate_toy_vit(cfg, 4).unwrap());
    }

    #[test]
    fn depth_zero_is_rejected() {
        let cfg = VitConfig {
            depth: 0,
            ..VitConfig::default()
        };
        assert!(matches!(generate_toy_vit(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn clusterable_rule() {
        assert!(is_clusterable("blocks.0.attn.qkv.weight", &[4, 12]));
        assert!(!is_clusterable("blocks.0.attn.qkv.bias", &[12]));
        assert!(!is_clusterable("pos_embed", &[17, 64]));
        assert!(!is_clusterable("odd.weight", &[3]));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::scalar(1.0).unwrap();
        let r = DenseModel::new(vec![NamedTensor::new("a", t.clone()), NamedTensor::new("a", t)]);
        assert!(matches!(r, Err(Error::Graph(_))));
    }
}
