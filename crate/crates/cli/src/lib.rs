//! Pipeline pieces behind the `vitclust` binary: sweeps, perf tables and
//! report rendering.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use vitclust::clustering::{cluster_model, ClusterMode, ClusterReport, ClusteringConfig};
use vitclust::format::{clustered_size_bytes, compression_ratio, dense_size_bytes, SizeBreakdown};
use vitclust::inference::{fidelity_from_logits, vit_forward, SyntheticDataset};
use vitclust::model::{DenseModel, Model, VitConfig};
use vitclust::perf::{compare_profiles, profile_config, Comparison, ParamLayout, PlatformConfig, WorkloadProfile};
use vitclust::tensor::Tensor;
use vitclust::{Error, Result};

pub const DEFAULT_CLUSTER_COUNTS: [usize; 5] = [16, 32, 64, 128, 256];

/// Exit status for a library error: 3 for file and parse problems, 4 for
/// infeasible or invalid configurations.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Corrupt(_) | Error::Graph(_) | Error::Syntax { .. } => 3,
        Error::Config(_)
        | Error::Infeasible { .. }
        | Error::Shape { .. }
        | Error::Domain(_)
        | Error::InvalidTensor(_) => 4,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub cluster_counts: Vec<usize>,
    pub modes: Vec<ClusterMode>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cluster_counts.is_empty() || self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one count, mode and seed".into()));
        }
        if let Some(c) = self.cluster_counts.iter().find(|c| !(2..=256).contains(*c)) {
            return Err(Error::Config(format!("cluster count {c} outside [2, 256]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub clusters: usize,
    pub mode: ClusterMode,
    pub seed: u64,
    pub top1_agreement: f64,
    pub mean_logit_l2: f64,
    pub ratio: f64,
    pub param_bytes: u64,
}

/// Clusters `model` for every point of `spec` and scores each variant against
/// the dense model on `data`. Rows come back sorted by (clusters, mode, seed).
pub fn run_sweep(model: &DenseModel, data: &SyntheticDataset, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let dense = Model::Dense(model.clone());
    let base = vit_forward(&dense, &data.images)?;
    let dense_bytes = dense_size_bytes(model).total;

    let mut points = Vec::new();
    for &c in &spec.cluster_counts {
        for &m in &spec.modes {
            for &s in &spec.seeds {
                points.push((c, m, s));
            }
        }
    }
    points.sort_by_key(|&(c, m, s)| (c, m.as_str(), s));
    points.dedup();

    let mut rows = Vec::with_capacity(points.len());
    for (clusters, mode, seed) in points {
        let (cm, _) = cluster_model(model, &ClusteringConfig::new(clusters, mode, seed))?;
        let size = clustered_size_bytes(&cm).total;
        let logits = vit_forward(&Model::Clustered(cm), &data.images)?;
        let fid = fidelity_from_logits(&base, &logits)?;
        rows.push(SweepRow {
            clusters,
            mode,
            seed,
            top1_agreement: fid.top1_agreement,
            mean_logit_l2: fid.mean_logit_l2,
            ratio: compression_ratio(dense_bytes, size)?,
            param_bytes: size,
        });
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "clusters,mode,seed,top1_agreement,mean_logit_l2,ratio,param_bytes";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.clusters, r.mode, r.seed, r.top1_agreement, r.mean_logit_l2, r.ratio, r.param_bytes
        );
    }
    out
}

/// Report of a `cluster` run.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    #[serde(flatten)]
    pub report: ClusterReport,
    pub dense_size: SizeBreakdown,
    pub clustered_size: SizeBreakdown,
    pub compression_ratio: f64,
    /// Ratio over clusterable tensors and their tables only.
    pub clusterable_ratio: f64,
}

pub fn cluster_and_summarize(model: &DenseModel, cfg: &ClusteringConfig) -> Result<(Model, ClusterSummary)> {
    let (cm, report) = cluster_model(model, cfg)?;
    let dense_size = dense_size_bytes(model);
    let clustered_size = clustered_size_bytes(&cm);
    let summary = ClusterSummary {
        report,
        dense_size,
        clustered_size,
        compression_ratio: compression_ratio(dense_size.total, clustered_size.total)?,
        clusterable_ratio: compression_ratio(dense_size.clusterable_total(), clustered_size.clusterable_total())?,
    };
    Ok((Model::Clustered(cm), summary))
}

/// Named analytic workloads for `perf --workload`.
pub fn workload_config(name: &str) -> Result<VitConfig> {
    match name {
        "deit-base" => Ok(VitConfig::deit_base()),
        "toy" => Ok(VitConfig::default()),
        other => Err(Error::Config(format!("unknown workload {other:?} (expected deit-base or toy)"))),
    }
}

/// Dense and clustered profiles of an architecture with every clusterable
/// tensor clustered to `clusters` entries.
pub fn analytic_profiles(
    config: &VitConfig,
    mode: ClusterMode,
    clusters: usize,
    batch: u64,
) -> Result<(WorkloadProfile, WorkloadProfile)> {
    if !(2..=256).contains(&clusters) {
        return Err(Error::Config(format!("cluster count {clusters} outside [2, 256]")));
    }
    let dense = profile_config(config, &ParamLayout::Dense, batch)?;
    let clustered = profile_config(config, &ParamLayout::Uniform { mode, clusters }, batch)?;
    Ok((dense, clustered))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProfileTotals {
    pub flops: u64,
    pub matmul_flops: u64,
    pub param_bytes: u64,
    pub activation_bytes: u64,
    pub lut_accesses: u64,
}

impl From<&WorkloadProfile> for ProfileTotals {
    fn from(p: &WorkloadProfile) -> Self {
        Self {
            flops: p.flops,
            matmul_flops: p.matmul_flops(),
            param_bytes: p.param_bytes,
            activation_bytes: p.activation_bytes,
            lut_accesses: p.lut_accesses,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PerfReport {
    pub batch: u64,
    pub dense: ProfileTotals,
    pub clustered: ProfileTotals,
    pub platforms: Vec<Comparison>,
}

pub fn perf_report(dense: &WorkloadProfile, clustered: &WorkloadProfile, platforms: &[PlatformConfig]) -> Result<PerfReport> {
    Ok(PerfReport {
        batch: dense.batch,
        dense: dense.into(),
        clustered: clustered.into(),
        platforms: platforms
            .iter()
            .map(|hw| compare_profiles(dense, clustered, hw))
            .collect::<Result<_>>()?,
    })
}

pub const PERF_HEADER: &str = "platform,dense_bound,clustered_bound,speedup,energy_ratio,energy_reduction,traffic_ratio,mem_fraction,ideal_speedup";

pub fn perf_csv(report: &PerfReport) -> String {
    let mut out = format!("{PERF_HEADER}\n");
    for c in &report.platforms {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.platform,
            c.dense_time.bound.as_str(),
            c.clustered_time.bound.as_str(),
            c.speedup,
            c.energy_ratio,
            c.energy_reduction,
            c.traffic_ratio,
            c.mem_fraction,
            c.ideal_speedup
        );
    }
    out
}

pub fn load_platforms(paths: &[impl AsRef<Path>]) -> Result<Vec<PlatformConfig>> {
    if paths.is_empty() {
        return Err(Error::Config("at least one platform file is required".into()));
    }
    paths.iter().map(|p| PlatformConfig::load(p.as_ref())).collect()
}

/// Reads `n` raw little-endian f32 images of `size × size × channels`.
pub fn read_image_blob(path: &Path, n: usize, size: usize, channels: usize) -> Result<SyntheticDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let want = n * size * size * channels * 4;
    if bytes.len() != want {
        return Err(Error::Config(format!(
            "{}: expected {want} bytes for {n} images of {size}x{size}x{channels}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    SyntheticDataset::from_images(Tensor::new(vec![n, size, size, channels], data)?, None)
}

pub fn write_image_blob(path: &Path, images: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = images.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn logits_csv(logits: &Tensor) -> Result<String> {
    let (n, classes) = logits.dims2()?;
    let mut out = String::from("index,prediction");
    for c in 0..classes {
        let _ = write!(out, ",logit_{c}");
    }
    out.push('\n');
    for i in 0..n {
        let row = logits.row(i);
        let _ = write!(out, "{i},{}", vitclust::inference::argmax(row));
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}
