use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vitclust::clustering::{ClusterMode, ClusteringConfig};
use vitclust::format::{model_size_bytes, read_model_file, write_model_file};
use vitclust::inference::{accuracy_from_logits, fidelity_from_logits, vit_forward, Accuracy, SyntheticDataset};
use vitclust::model::{generate_toy_vit, Model, ModelGraph, StoredTensor, VitConfig};
use vitclust::perf::profile_model;
use vitclust::{Error, Result};
use vitclust_cli::*;

#[derive(Parser)]
#[command(name = "vitclust", version, about = "Weight clustering for toy vision transformers")]
struct Cli {
    /// Seed for model generation and clustering.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file. Reports go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format. Defaults to csv for sweep and perf, json otherwise.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy ViT and write it as TDM1.
    GenModel(ArchArgs),
    /// Generate a synthetic image set as a raw little-endian f32 blob.
    GenData {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        image_size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Cluster a TDM1 model into a TCM1 model.
    Cluster {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 256)]
        clusters: usize,
        #[arg(long, default_value = "entire-model")]
        mode: ClusterMode,
    },
    /// Describe the tensors of a TDM1 or TCM1 file.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run inference and print logits.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Compare a variant model's predictions with a base model.
    Fidelity {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        variant: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Sweep cluster counts, modes and seeds over a dense model.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CLUSTER_COUNTS)]
        clusters: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["entire-model", "per-layer"])]
        modes: Vec<ClusterMode>,
        /// Clustering seeds; defaults to the global --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Estimate speedup and energy of clustered over dense inference.
    Perf(PerfArgs),
}

#[derive(Args)]
struct ArchArgs {
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    patch: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    mlp_ratio: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

#[derive(Args)]
struct DataArgs {
    /// Seed of the generated dataset.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Number of images.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Raw f32 image blob to use instead of generated images.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args)]
struct PerfArgs {
    #[arg(long, required_unless_present = "workload", requires = "clustered")]
    dense: Option<PathBuf>,
    #[arg(long, requires = "dense")]
    clustered: Option<PathBuf>,
    /// Analytic workload (deit-base or toy) profiled without weights.
    #[arg(long, conflicts_with_all = ["dense", "clustered"])]
    workload: Option<String>,
    #[arg(long, default_value_t = 64)]
    clusters: usize,
    #[arg(long, default_value = "per-layer")]
    mode: ClusterMode,
    #[arg(long, default_value_t = 1)]
    batch: u64,
    /// Platform description files.
    #[arg(long = "platform", required = true)]
    platforms: Vec<PathBuf>,
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serialization cannot fail");
    s.push('\n');
    s
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p.display().to_string(), e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn require_out(out: Option<&Path>, cmd: &str) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .ok_or_else(|| Error::Config(format!("{cmd} needs --out")))
}

fn dataset(args: &DataArgs, graph: &ModelGraph) -> Result<SyntheticDataset> {
    let c = &graph.config;
    match &args.images {
        Some(p) => read_image_blob(p, args.n, c.image_size, c.channels),
        None => SyntheticDataset::generate(args.data_seed, args.n, c.image_size, c.channels, c.classes),
    }
}

fn load_dense(path: &Path) -> Result<vitclust::model::DenseModel> {
    match read_model_file(path)? {
        Model::Dense(m) => Ok(m),
        Model::Clustered(_) => Err(Error::Config(format!("{} is clustered; a dense model is needed", path.display()))),
    }
}

#[derive(Serialize)]
struct GenModelReport {
    path: String,
    config: VitConfig,
    param_count: usize,
    analytic_param_count: usize,
    size_bytes: u64,
}

#[derive(Serialize)]
struct GenDataReport {
    path: String,
    seed: u64,
    shape: Vec<usize>,
    labels: Vec<u32>,
}

#[derive(Serialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    storage: &'static str,
    codebook_len: Option<usize>,
}

#[derive(Serialize)]
struct InspectReport {
    kind: &'static str,
    mode: Option<ClusterMode>,
    codebook_count: usize,
    param_count: usize,
    size: vitclust::format::SizeBreakdown,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize)]
struct InferReport {
    predictions: Vec<usize>,
    logits: Vec<Vec<f32>>,
}

#[derive(Serialize)]
struct FidelityReport {
    n: usize,
    top1_agreement: f64,
    mean_logit_l2: f64,
    base_accuracy: Option<Accuracy>,
    variant_accuracy: Option<Accuracy>,
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_deref();
    let fmt = |default| cli.format.unwrap_or(default);
    match cli.cmd {
        Command::GenModel(a) => {
            let config = VitConfig {
                image_size: a.image_size,
                channels: a.channels,
                patch: a.patch,
                dim: a.dim,
                depth: a.depth,
                heads: a.heads,
                mlp_ratio: a.mlp_ratio,
                classes: a.classes,
            };
            config.validate()?;
            let path = require_out(out, "gen-model")?;
            let model = generate_toy_vit(config, cli.seed)?;
            let report = GenModelReport {
                path: path.display().to_string(),
                config,
                param_count: model.param_count(),
                analytic_param_count: config.param_count(),
                size_bytes: vitclust::format::dense_size_bytes(&model).total,
            };
            write_model_file(&path, &Model::Dense(model))?;
            print!("{}", to_json(&report));
        }
        Command::GenData {
            n,
            image_size,
            channels,
            classes,
        } => {
            let path = require_out(out, "gen-data")?;
            let data = SyntheticDataset::generate(cli.seed, n, image_size, channels, classes)?;
            write_image_blob(&path, &data.images)?;
            let labels = data.labels.clone().unwrap_or_default();
            match fmt(Format::Json) {
                Format::Json => print!(
                    "{}",
                    to_json(&GenDataReport {
                        path: path.display().to_string(),
                        seed: cli.seed,
                        shape: data.images.shape().to_vec(),
                        labels,
                    })
                ),
                Format::Csv => {
                    let mut s = String::from("index,label\n");
                    for (i, l) in labels.iter().enumerate() {
                        let _ = writeln!(s, "{i},{l}");
                    }
                    print!("{s}");
                }
            }
        }
        Command::Cluster { model, clusters, mode } => {
            let path = require_out(out, "cluster")?;
            let dense = load_dense(&model)?;
            let (cm, summary) = cluster_and_summarize(&dense, &ClusteringConfig::new(clusters, mode, cli.seed))?;
            write_model_file(&path, &cm)?;
            match fmt(Format::Json) {
                Format::Json => print!("{}", to_json(&summary)),
                Format::Csv => {
                    let mut s = String::from("name,codebook_len,sse,exact\n");
                    for t in &summary.report.tensors {
                        let _ = writeln!(s, "{},{},{},{}", t.name, t.codebook_len, t.sse, t.exact);
                    }
                    print!("{s}");
                }
            }
            for w in &summary.report.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Inspect { model } => {
            let m = read_model_file(&model)?;
            let graph = m.graph()?;
            let tensors: Vec<TensorInfo> = match &m {
                Model::Dense(d) => d
                    .tensors()
                    .iter()
                    .map(|t| TensorInfo {
                        name: t.name.clone(),
                        shape: t.tensor.shape().to_vec(),
                        storage: "dense",
                        codebook_len: None,
                    })
                    .collect(),
                Model::Clustered(c) => c
                    .tensors()
                    .iter()
                    .map(|t| match t {
                        StoredTensor::Dense(d) => TensorInfo {
                            name: d.name.clone(),
                            shape: d.tensor.shape().to_vec(),
                            storage: "dense",
                            codebook_len: None,
                        },
                        StoredTensor::Clustered(ct) => TensorInfo {
                            name: ct.name().to_owned(),
                            shape: ct.shape().to_vec(),
                            storage: "clustered",
                            codebook_len: Some(ct.codebook().len()),
                        },
                    })
                    .collect(),
            };
            let report = InspectReport {
                kind: if matches!(m, Model::Dense(_)) { "dense" } else { "clustered" },
                mode: match &m {
                    Model::Clustered(c) => Some(c.mode()),
                    Model::Dense(_) => None,
                },
                codebook_count: match &m {
                    Model::Clustered(c) => c.codebook_count(),
                    Model::Dense(_) => 0,
                },
                param_count: graph.param_count(),
                size: model_size_bytes(&m),
                tensors,
            };
            let text = match fmt(Format::Json) {
                Format::Json => to_json(&report),
                Format::Csv => {
                    let mut s = String::from("name,shape,storage,codebook_len\n");
                    for t in &report.tensors {
                        let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
                        let cb = t.codebook_len.map(|c| c.to_string()).unwrap_or_default();
                        let _ = writeln!(s, "{},{},{},{}", t.name, shape.join("x"), t.storage, cb);
                    }
                    s
                }
            };
            emit(out, &text)?;
        }
        Command::Infer { model, data } => {
            let m = read_model_file(&model)?;
            let ds = dataset(&data, &m.graph()?)?;
            let logits = vit_forward(&m, &ds.images)?;
            let text = match fmt(Format::Json) {
                Format::Json => {
                    let (n, _) = logits.dims2()?;
                    to_json(&InferReport {
                        predictions: (0..n).map(|i| vitclust::inference::argmax(logits.row(i))).collect(),
                        logits: (0..n).map(|i| logits.row(i).to_vec()).collect(),
                    })
                }
                Format::Csv => logits_csv(&logits)?,
            };
            emit(out, &text)?;
        }
        Command::Fidelity { base, variant, data } => {
            let b = read_model_file(&base)?;
            let v = read_model_file(&variant)?;
            let gb = b.graph()?;
            if gb != v.graph()? {
                return Err(Error::Graph("base and variant architectures differ".into()));
            }
            let ds = dataset(&data, &gb)?;
            let bl = vit_forward(&b, &ds.images)?;
            let vl = vit_forward(&v, &ds.images)?;
            let fid = fidelity_from_logits(&bl, &vl)?;
            let acc = |l| match &ds.labels {
                Some(labels) if gb.config.classes >= 5 => accuracy_from_logits(l, labels).map(Some),
                _ => Ok(None),
            };
            let report = FidelityReport {
                n: ds.len(),
                top1_agreement: fid.top1_agreement,
                mean_logit_l2: fid.mean_logit_l2,
                base_accuracy: acc(&bl)?,
                variant_accuracy: acc(&vl)?,
            };
            let text = match fmt(Format::Json) {
                Format::Json => to_json(&report),
                Format::Csv => format!(
                    "n,top1_agreement,mean_logit_l2\n{},{},{}\n",
                    report.n, report.top1_agreement, report.mean_logit_l2
                ),
            };
            emit(out, &text)?;
        }
        Command::Sweep {
            model,
            clusters,
            modes,
            seeds,
            data,
        } => {
            let dense = load_dense(&model)?;
            let graph = ModelGraph::from_model(&Model::Dense(dense.clone()))?;
            let ds = dataset(&data, &graph)?;
            let spec = SweepSpec {
                cluster_counts: clusters,
                modes,
                seeds: if seeds.is_empty() { vec![cli.seed] } else { seeds },
            };
            let rows = run_sweep(&dense, &ds, &spec)?;
            let text = match fmt(Format::Csv) {
                Format::Csv => sweep_csv(&rows),
                Format::Json => to_json(&rows),
            };
            emit(out, &text)?;
        }
        Command::Perf(a) => {
            let platforms = load_platforms(&a.platforms)?;
            let (dp, cp) = match (&a.workload, &a.dense, &a.clustered) {
                (Some(w), _, _) => analytic_profiles(&workload_config(w)?, a.mode, a.clusters, a.batch)?,
                (None, Some(d), Some(c)) => {
                    let dm = read_model_file(d)?;
                    let cm = read_model_file(c)?;
                    if dm.graph()? != cm.graph()? {
                        return Err(Error::Graph("dense and clustered architectures differ".into()));
                    }
                    (profile_model(&dm, a.batch)?, profile_model(&cm, a.batch)?)
                }
                _ => return Err(Error::Config("perf needs --workload or both --dense and --clustered".into())),
            };
            let report = perf_report(&dp, &cp, &platforms)?;
            let text = match fmt(Format::Csv) {
                Format::Csv => perf_csv(&report),
                Format::Json => to_json(&report),
            };
            emit(out, &text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
