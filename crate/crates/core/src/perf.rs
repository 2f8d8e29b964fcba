//! Static workload profiling plus roofline time and linear energy estimates.
//!
//! FLOP conventions: `2·m·k·n` per matmul, 5 per softmax element, 8 per
//! layer-norm element, 10 per GELU element, 1 per element for bias adds,
//! residual adds, score scaling and the positional add. Activation traffic is
//! 4 bytes per produced element. Every inference streams every parameter (and
//! every codebook) from memory once.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::clustering::ClusterMode;
use crate::error::{Error, Result};
use crate::model::{is_clusterable, Model, ModelGraph, StoredTensor, VitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Matmul,
    Softmax,
    LayerNorm,
    Gelu,
    Elementwise,
    Codebook,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OpRow {
    pub layer: String,
    pub op: String,
    pub kind: OpKind,
    pub flops: u64,
    pub param_bytes: u64,
    pub activation_bytes: u64,
    pub lut_accesses: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkloadProfile {
    pub batch: u64,
    pub flops: u64,
    pub param_bytes: u64,
    pub activation_bytes: u64,
    pub lut_accesses: u64,
    pub per_layer: Vec<OpRow>,
}

impl WorkloadProfile {
    pub fn from_rows(batch: u64, rows: Vec<OpRow>) -> Self {
        let mut p = Self {
            batch,
            flops: 0,
            param_bytes: 0,
            activation_bytes: 0,
            lut_accesses: 0,
            per_layer: Vec::new(),
        };
        for r in &rows {
            p.flops += r.flops;
            p.param_bytes += r.param_bytes;
            p.activation_bytes += r.activation_bytes;
            p.lut_accesses += r.lut_accesses;
        }
        p.per_layer = rows;
        p
    }

    pub fn total_bytes(&self) -> u64 {
        self.param_bytes + self.activation_bytes
    }

    pub fn matmul_flops(&self) -> u64 {
        self.per_layer
            .iter()
            .filter(|r| r.kind == OpKind::Matmul)
            .map(|r| r.flops)
            .sum()
    }
}

/// Which parameters are stored clustered and with how many centroids.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamLayout {
    Dense,
    /// Every clusterable tensor clustered with `clusters` centroids. Lets
    /// large architectures be profiled without materialising weights.
    Uniform { mode: ClusterMode, clusters: usize },
    /// Read from an actual clustered model: clustered tensor name to
    /// codebook length.
    Stored {
        mode: ClusterMode,
        shared_len: Option<usize>,
        clustered: HashMap<String, usize>,
    },
}

impl ParamLayout {
    pub fn from_model(model: &Model) -> Self {
        match model {
            Model::Dense(_) => ParamLayout::Dense,
            Model::Clustered(m) => ParamLayout::Stored {
                mode: m.mode(),
                shared_len: m.shared_codebook().map(|c| c.len()),
                clustered: m
                    .tensors()
                    .iter()
                    .filter_map(|t| match t {
                        StoredTensor::Clustered(c) => Some((c.name().to_owned(), c.codebook().len())),
                        StoredTensor::Dense(_) => None,
                    })
                    .collect(),
            },
        }
    }

    fn mode(&self) -> Option<ClusterMode> {
        match self {
            ParamLayout::Dense => None,
            ParamLayout::Uniform { mode, .. } | ParamLayout::Stored { mode, .. } => Some(*mode),
        }
    }

    fn codebook_len(&self, name: &str, shape: &[usize]) -> Option<usize> {
        match self {
            ParamLayout::Dense => None,
            ParamLayout::Uniform { clusters, .. } => is_clusterable(name, shape).then_some(*clusters),
            ParamLayout::Stored { clustered, .. } => clustered.get(name).copied(),
        }
    }

    fn shared_len(&self) -> Option<usize> {
        match self {
            ParamLayout::Dense => None,
            ParamLayout::Uniform { mode, clusters } => {
                (*mode == ClusterMode::EntireModel).then_some(*clusters)
            }
            ParamLayout::Stored { shared_len, .. } => *shared_len,
        }
    }
}

struct Builder<'a> {
    layout: &'a ParamLayout,
    batch: u64,
    rows: Vec<OpRow>,
}

impl Builder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, layer: &str, op: &str, kind: OpKind, flops: usize, params: usize, act: usize, lut: usize) {
        let b = self.batch;
        self.rows.push(OpRow {
            layer: layer.to_owned(),
            op: op.to_owned(),
            kind,
            flops: flops as u64 * b,
            param_bytes: params as u64 * b,
            activation_bytes: act as u64 * 4 * b,
            lut_accesses: lut as u64 * b,
        });
    }

    fn linear(&mut self, layer: &str, prefix: &str, m: usize, k: usize, n: usize) {
        let name = format!("{prefix}.weight");
        let (params, lut) = match self.layout.codebook_len(&name, &[k, n]) {
            Some(len) => {
                let table = if self.layout.mode() == Some(ClusterMode::PerLayer) { 4 * len } else { 0 };
                (k * n + table, k * n)
            }
            None => (4 * k * n, 0),
        };
        self.push(layer, &format!("{prefix}.matmul"), OpKind::Matmul, 2 * m * k * n, params, m * n, lut);
        self.push(layer, &format!("{prefix}.bias"), OpKind::Elementwise, m * n, 4 * n, m * n, 0);
    }

    fn norm(&mut self, layer: &str, op: &str, rows: usize, d: usize) {
        self.push(layer, op, OpKind::LayerNorm, 8 * rows * d, 8 * d, rows * d, 0);
    }
}

/// Profiles `batch` inferences of the ViT `config` with parameters stored
/// per `layout`.
pub fn profile_config(config: &VitConfig, layout: &ParamLayout, batch: u64) -> Result<WorkloadProfile> {
    config.validate()?;
    if batch == 0 {
        return Err(Error::Config("batch must be at least 1".into()));
    }
    let (d, h, t, p) = (config.dim, config.hidden(), config.tokens(), config.num_patches());
    let heads = config.heads;
    let mut b = Builder {
        layout,
        batch,
        rows: Vec::new(),
    };

    b.linear("patch_embed", "patch_embed", p, config.patch_dim(), d);
    b.push("embed", "cls_pos", OpKind::Elementwise, t * d, 4 * (d + t * d), t * d, 0);
    for i in 0..config.depth {
        let l = format!("blocks.{i}");
        let pre = |s: &str| format!("{l}.{s}");
        b.norm(&l, &pre("norm1"), t, d);
        b.linear(&l, &pre("attn.qkv"), t, d, 3 * d);
        b.push(&l, &pre("attn.scores"), OpKind::Matmul, 2 * t * t * d, 0, heads * t * t, 0);
        b.push(&l, &pre("attn.scale"), OpKind::Elementwise, heads * t * t, 0, heads * t * t, 0);
        b.push(&l, &pre("attn.softmax"), OpKind::Softmax, 5 * heads * t * t, 0, heads * t * t, 0);
        b.push(&l, &pre("attn.context"), OpKind::Matmul, 2 * t * t * d, 0, t * d, 0);
        b.linear(&l, &pre("attn.proj"), t, d, d);
        b.push(&l, &pre("residual1"), OpKind::Elementwise, t * d, 0, t * d, 0);
        b.norm(&l, &pre("norm2"), t, d);
        b.linear(&l, &pre("mlp.fc1"), t, d, h);
        b.push(&l, &pre("mlp.gelu"), OpKind::Gelu, 10 * t * h, 0, t * h, 0);
        b.linear(&l, &pre("mlp.fc2"), t, h, d);
        b.push(&l, &pre("residual2"), OpKind::Elementwise, t * d, 0, t * d, 0);
    }
    b.norm("norm", "norm", t, d);
    b.linear("head", "head", 1, d, config.classes);
    if let Some(len) = layout.shared_len() {
        b.push("shared_codebook", "shared_codebook", OpKind::Codebook, 0, 4 * len, 0, 0);
    }
    Ok(WorkloadProfile::from_rows(batch, b.rows))
}

/// Profiles `batch` inferences of a concrete dense or clustered model.
pub fn profile_model(model: &Model, batch: u64) -> Result<WorkloadProfile> {
    let graph = ModelGraph::from_model(model)?;
    profile_config(&graph.config, &ParamLayout::from_model(model), batch)
}

/// Modelled hardware platform.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlatformConfig {
    pub name: String,
    pub bandwidth_bytes_per_s: f64,
    pub flops_per_s: f64,
    pub e_dram_j_per_byte: f64,
    pub e_flop_j: f64,
    pub e_lut_j: f64,
    pub p_static_w: f64,
    /// Overrides the memory-bound fraction used for the ideal-case speedup.
    pub mem_fraction: Option<f64>,
}

impl PlatformConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("bandwidth_bytes_per_s", self.bandwidth_bytes_per_s),
            ("flops_per_s", self.flops_per_s),
            ("e_dram_j_per_byte", self.e_dram_j_per_byte),
            ("e_flop_j", self.e_flop_j),
            ("e_lut_j", self.e_lut_j),
            ("p_static_w", self.p_static_w),
        ];
        for (k, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{}: {k} must be positive, got {v}", self.name)));
            }
        }
        if let Some(f) = self.mem_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{}: mem_fraction must be in [0, 1], got {f}", self.name)));
            }
        }
        if self.name.is_empty() {
            return Err(Error::Config("platform name is empty".into()));
        }
        Ok(())
    }

    /// Parses the `key = value` platform format. `#` starts a comment line.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let syntax = |line: usize, message: String| Error::Syntax {
            file: file.to_owned(),
            line,
            message,
        };
        let mut kv: HashMap<&str, (usize, &str)> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| syntax(i + 1, format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            const KEYS: [&str; 8] = [
                "name",
                "bandwidth_bytes_per_s",
                "flops_per_s",
                "e_dram_j_per_byte",
                "e_flop_j",
                "e_lut_j",
                "p_static_w",
                "mem_fraction",
            ];
            if !KEYS.contains(&k) {
                return Err(syntax(i + 1, format!("unknown key {k:?}")));
            }
            if kv.insert(k, (i + 1, v)).is_some() {
                return Err(syntax(i + 1, format!("duplicate key {k:?}")));
            }
        }
        let num = |k: &str| -> Result<Option<f64>> {
            match kv.get(k) {
                None => Ok(None),
                Some(&(line, v)) => v
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| syntax(line, format!("{k}: not a number: {v:?}"))),
            }
        };
        let req = |k: &str| -> Result<f64> {
            num(k)?.ok_or_else(|| syntax(0, format!("missing key {k:?}")))
        };
        let cfg = PlatformConfig {
            name: kv
                .get("name")
                .map(|&(_, v)| v.to_owned())
                .ok_or_else(|| syntax(0, "missing key \"name\"".into()))?,
            bandwidth_bytes_per_s: req("bandwidth_bytes_per_s")?,
            flops_per_s: req("flops_per_s")?,
            e_dram_j_per_byte: req("e_dram_j_per_byte")?,
            e_flop_j: req("e_flop_j")?,
            e_lut_j: req("e_lut_j")?,
            p_static_w: req("p_static_w")?,
            mem_fraction: num("mem_fraction")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Compute,
    Memory,
}

impl Bound {
    pub fn as_str(self) -> &'static str {
        match self {
            Bound::Compute => "compute",
            Bound::Memory => "memory",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeEstimate {
    pub t_total: f64,
    pub t_compute: f64,
    pub t_memory: f64,
    pub bound: Bound,
}

/// Roofline estimate assuming perfect overlap of compute and transfer.
pub fn estimate_time(p: &WorkloadProfile, hw: &PlatformConfig) -> TimeEstimate {
    let t_compute = p.flops as f64 / hw.flops_per_s;
    let t_memory = p.total_bytes() as f64 / hw.bandwidth_bytes_per_s;
    let bound = if t_compute > t_memory { Bound::Compute } else { Bound::Memory };
    TimeEstimate {
        t_total: t_compute.max(t_memory),
        t_compute,
        t_memory,
        bound,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyEstimate {
    pub e_dynamic: f64,
    pub e_static: f64,
    pub e_total: f64,
}

pub fn estimate_energy(p: &WorkloadProfile, hw: &PlatformConfig, t: f64) -> Result<EnergyEstimate> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Domain(format!("execution time must be positive, got {t}")));
    }
    let e_dynamic = hw.e_dram_j_per_byte * p.total_bytes() as f64
        + hw.e_flop_j * p.flops as f64
        + hw.e_lut_j * p.lut_accesses as f64;
    let e_static = hw.p_static_w * t;
    Ok(EnergyEstimate {
        e_dynamic,
        e_static,
        e_total: e_dynamic + e_static,
    })
}

/// Inputs to Amdahl's law: fraction `f` of the baseline that is accelerated
/// by factor `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AmdahlParams {
    pub mem_fraction: f64,
    pub reduction: f64,
}

impl AmdahlParams {
    pub fn new(mem_fraction: f64, reduction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mem_fraction) {
            return Err(Error::Domain(format!("f must be in [0, 1], got {mem_fraction}")));
        }
        if !(reduction.is_finite() && reduction > 0.0) {
            return Err(Error::Domain(format!("s must be positive, got {reduction}")));
        }
        Ok(Self {
            mem_fraction,
            reduction,
        })
    }
}

pub fn amdahl_speedup(a: &AmdahlParams) -> f64 {
    1.0 / ((1.0 - a.mem_fraction) + a.mem_fraction / a.reduction)
}

/// Dense-vs-clustered outcome on one platform.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub platform: String,
    pub dense_time: TimeEstimate,
    pub clustered_time: TimeEstimate,
    pub dense_energy: EnergyEstimate,
    pub clustered_energy: EnergyEstimate,
    pub speedup: f64,
    pub energy_ratio: f64,
    pub energy_reduction: f64,
    pub traffic_ratio: f64,
    pub mem_fraction: f64,
    pub ideal_speedup: f64,
}

/// Memory-bound fraction of the dense run: its parameter transfer time over
/// its total time, unless the platform pins it.
pub fn mem_fraction(dense: &WorkloadProfile, hw: &PlatformConfig) -> f64 {
    if let Some(f) = hw.mem_fraction {
        return f;
    }
    let t = estimate_time(dense, hw).t_total;
    if t == 0.0 {
        return 0.0;
    }
    (dense.param_bytes as f64 / hw.bandwidth_bytes_per_s / t).min(1.0)
}

pub fn compare_profiles(dense: &WorkloadProfile, clustered: &WorkloadProfile, hw: &PlatformConfig) -> Result<Comparison> {
    if clustered.param_bytes == 0 {
        return Err(Error::Domain("clustered profile moves no parameters".into()));
    }
    let dt = estimate_time(dense, hw);
    let ct = estimate_time(clustered, hw);
    let de = estimate_energy(dense, hw, dt.t_total)?;
    let ce = estimate_energy(clustered, hw, ct.t_total)?;
    let traffic_ratio = dense.param_bytes as f64 / clustered.param_bytes as f64;
    let f = mem_fraction(dense, hw);
    let energy_ratio = ce.e_total / de.e_total;
    Ok(Comparison {
        platform: hw.name.clone(),
        dense_time: dt,
        clustered_time: ct,
        dense_energy: de,
        clustered_energy: ce,
        speedup: dt.t_total / ct.t_total,
        energy_ratio,
        energy_reduction: 1.0 - energy_ratio,
        traffic_ratio,
        mem_fraction: f,
        ideal_speedup: amdahl_speedup(&AmdahlParams::new(f, traffic_ratio)?),
    })
}

/// Profiles both models and compares them on every platform.
pub fn compare_dense_vs_clustered(
    dense: &Model,
    clustered: &Model,
    platforms: &[PlatformConfig],
    batch: u64,
) -> Result<Vec<Comparison>> {
    let gd = ModelGraph::from_model(dense)?;
    let gc = ModelGraph::from_model(clustered)?;
    if gd != gc {
        return Err(Error::Graph("models do not share an architecture".into()));
    }
    let pd = profile_config(&gd.config, &ParamLayout::from_model(dense), batch)?;
    let pc = profile_config(&gc.config, &ParamLayout::from_model(clustered), batch)?;
    platforms.iter().map(|hw| compare_profiles(&pd, &pc, hw)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw(bw: f64, fl: f64) -> PlatformConfig {
        PlatformConfig {
            name: "t".into(),
            bandwidth_bytes_per_s: bw,
            flops_per_s: fl,
            e_dram_j_per_byte: 1e-10,
            e_flop_j: 1e-12,
            e_lut_j: 1e-13,
            p_static_w: 2.0,
            mem_fraction: None,
        }
    }

    fn single(flops: u64, params: u64, act: u64, lut: u64) -> WorkloadProfile {
        WorkloadProfile::from_rows(
            1,
            vec![OpRow {
                layer: "l".into(),
                op: "l".into(),
                kind: OpKind::Matmul,
                flops,
                param_bytes: params,
                activation_bytes: act,
                lut_accesses: lut,
            }],
        )
    }

    #[test]
    fn roofline_tie_is_memory_bound() {
        let t = estimate_time(&single(1_000_000_000, 1_000_000_000, 0, 0), &hw(1e9, 1e9));
        assert_eq!(t.t_total, 1.0);
        assert_eq!(t.bound, Bound::Memory);
        let t = estimate_time(&single(0, 500, 500, 0), &hw(1e3, 1e9));
        assert_eq!(t.t_total, t.t_memory);
    }

    #[test]
    fn amdahl_examples() {
        let s = |f, s| amdahl_speedup(&AmdahlParams::new(f, s).unwrap());
        assert_eq!(s(0.0, 4.0), 1.0);
        assert_eq!(s(1.0, 4.0), 4.0);
        assert_eq!(s(0.5, 4.0), 1.6);
        assert_eq!(s(0.8, 4.0), 2.5);
        assert!(AmdahlParams::new(1.5, 4.0).is_err());
        assert!(AmdahlParams::new(0.5, 0.0).is_err());
    }

    #[test]
    fn energy_of_zero_work_is_static() {
        let h = hw(1e9, 1e9);
        let e = estimate_energy(&single(0, 0, 0, 0), &h, 0.25).unwrap();
        assert_eq!(e.e_total, 0.5);
        assert!(estimate_energy(&single(0, 0, 0, 0), &h, 0.0).is_err());
    }

    #[test]
    fn platform_parse() {
        let text = "# fitted\nname = demo\nbandwidth_bytes_per_s = 1e9\nflops_per_s=2e9\n\
                    e_dram_j_per_byte = 1e-10\ne_flop_j = 1e-12\ne_lut_j = 1e-14\np_static_w = 1.5\n";
        let p = PlatformConfig::parse(text, "demo.cfg").unwrap();
        assert_eq!(p.name, "demo");
        assert_eq!(p.flops_per_s, 2e9);
        assert_eq!(p.mem_fraction, None);

        let missing = text.replace("p_static_w = 1.5\n", "");
        assert!(matches!(PlatformConfig::parse(&missing, "x"), Err(Error::Syntax { .. })));
        let bad = format!("{text}bogus = 1\n");
        assert!(matches!(PlatformConfig::parse(&bad, "x"), Err(Error::Syntax { line: 9, .. })));
        let neg = text.replace("p_static_w = 1.5", "p_static_w = -1");
        assert!(matches!(PlatformConfig::parse(&neg, "x"), Err(Error::Config(_))));
    }

    #[test]
    fn deit_base_counts() {
        let cfg = VitConfig::deit_base();
        let dense = profile_config(&cfg, &ParamLayout::Dense, 1).unwrap();
        assert_eq!(dense.param_bytes, 4 * cfg.param_count() as u64);
        let c = profile_config(
            &cfg,
            &ParamLayout::Uniform {
                mode: ClusterMode::PerLayer,
                clusters: 64,
            },
            1,
        )
        .unwrap();
        assert!(c.param_bytes < dense.param_bytes / 3);
        assert_eq!(c.flops, dense.flops);
        assert_eq!(c.activation_bytes, dense.activation_bytes);
        assert!(dense.matmul_flops() * 2 > dense.flops);
    }
}
