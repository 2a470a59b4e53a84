//! Experiment orchestration: dataset resolution, per-(ratio, repeat) runs,
//! metrics aggregation, consolidated sweep output, and the artifact manifest.

use cgir_core::evaluation::{MetricScores, MetricsReport};
use cgir_core::graph::{apply_missing_mask, generate_sbm, load_graph, save_graph, AttributeGraph};
use cgir_core::matio;
use cgir_core::trainer::{mix_seed, train, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub struct CliError {
    pub message: String,
    pub exit_code: u8,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        CliError {
            message: message.into(),
            exit_code: 2,
        }
    }
}

impl From<cgir_core::Error> for CliError {
    fn from(e: cgir_core::Error) -> Self {
        CliError {
            exit_code: if e.is_numeric() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e.to_string())
    }
}

pub struct DatasetSource {
    pub edges: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub synth: Option<String>,
}

pub struct ExperimentSpec {
    pub dataset: DatasetSource,
    pub config_path: Option<PathBuf>,
    pub ratios: Vec<f64>,
    pub repeats: usize,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub jobs: usize,
    pub wo_gi: bool,
    pub wo_ea: bool,
    pub wo_sl: bool,
    pub consolidate: bool,
}

/// Compact synthetic-dataset description, e.g.
/// `n=300,c=3,p_in=0.1,p_out=0.01,d=16,sep=8,seed=7`.
fn parse_synth(spec: &str) -> Result<AttributeGraph, CliError> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for piece in spec.split(',') {
        let (k, v) = piece
            .split_once('=')
            .ok_or_else(|| CliError::input(format!("synth spec needs key=value, got {piece:?}")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |key: &str, default: &str| fields.get(key).copied().unwrap_or(default).to_string();
    let parse_usize = |key: &str, default: &str| -> Result<usize, CliError> {
        get(key, default)
            .parse()
            .map_err(|_| CliError::input(format!("synth spec: bad value for {key}")))
    };
    let parse_f64 = |key: &str, default: &str| -> Result<f64, CliError> {
        get(key, default)
            .parse()
            .map_err(|_| CliError::input(format!("synth spec: bad value for {key}")))
    };
    Ok(generate_sbm(
        parse_usize("n", "300")?,
        parse_usize("c", "3")?,
        parse_f64("p_in", "0.1")?,
        parse_f64("p_out", "0.01")?,
        parse_usize("d", "16")?,
        parse_f64("sep", "8")?,
        parse_usize("seed", "0")? as u64,
    )?)
}

fn load_dataset(source: &DatasetSource) -> Result<AttributeGraph, CliError> {
    if let Some(spec) = &source.synth {
        return parse_synth(spec);
    }
    match (&source.edges, &source.features) {
        (Some(edges), Some(features)) => {
            Ok(load_graph(edges, features, source.labels.as_deref())?)
        }
        _ => Err(CliError::input(
            "need either --synth or both --edges and --features",
        )),
    }
}

fn load_config(spec: &ExperimentSpec) -> Result<TrainConfig, CliError> {
    let mut config = match &spec.config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = spec.seed {
        config.seed = seed;
    }
    config.wo_gi |= spec.wo_gi;
    config.wo_ea |= spec.wo_ea;
    config.wo_sl |= spec.wo_sl;
    Ok(config)
}

fn variant_name(config: &TrainConfig) -> String {
    let mut parts = Vec::new();
    if config.wo_gi {
        parts.push("wo_gi");
    }
    if config.wo_ea {
        parts.push("wo_ea");
    }
    if config.wo_sl {
        parts.push("wo_sl");
    }
    if parts.is_empty() {
        "full".to_string()
    } else {
        parts.join("+")
    }
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    dataset: &'a str,
    variant: &'a str,
    missing_ratio: f64,
    seed_list: &'a [u64],
    per_run: &'a [MetricScores],
    mean: MetricScores,
    std: MetricScores,
}

struct RunOutput {
    seed: u64,
    metrics: MetricScores,
    files: Vec<PathBuf>,
}

fn ratio_tag(ratio: f64) -> String {
    format!("{ratio:.2}")
}

fn execute_single(
    graph: &AttributeGraph,
    config: &TrainConfig,
    ratio: f64,
    repeat: usize,
    base_seed: u64,
    out: &Path,
) -> Result<RunOutput, CliError> {
    let seed = mix_seed(mix_seed(base_seed, ratio.to_bits()), repeat as u64);
    let (_, mask) = apply_missing_mask(graph, ratio, seed)?;
    let run_config = TrainConfig {
        seed,
        ..config.clone()
    };
    let report = train(graph, &mask, &run_config).map_err(|e| CliError {
        exit_code: if e.is_numeric() { 3 } else { 2 },
        message: format!("run ratio={} repeat={repeat}: {e}", ratio_tag(ratio)),
    })?;
    let metrics = report.final_metrics.ok_or_else(|| {
        CliError::input("dataset has no labels; metrics need ground truth")
    })?;

    let tag = format!("r{}_rep{repeat}", ratio_tag(ratio));
    let history = out.join(format!("history_{tag}.csv"));
    report.write_history_csv(&history)?;
    let embedding = out.join(format!("embedding_{tag}.mat"));
    matio::write_binary(&embedding, &report.final_embedding)?;
    Ok(RunOutput {
        seed,
        metrics,
        files: vec![history, embedding],
    })
}

pub fn run(spec: ExperimentSpec) -> Result<(), CliError> {
    // validate before touching the filesystem
    for &ratio in &spec.ratios {
        if !(0.0..1.0).contains(&ratio) {
            return Err(CliError::input(format!(
                "missing ratio must lie in [0, 1), got {ratio}"
            )));
        }
    }
    if spec.repeats == 0 {
        return Err(CliError::input("repeats must be at least 1"));
    }
    let config = load_config(&spec)?;
    let graph = load_dataset(&spec.dataset)?;
    if graph.labels.is_none() && config.num_classes.is_none() {
        return Err(CliError::input(
            "dataset has no labels; supply num_classes in the config to train, labels to evaluate",
        ));
    }
    std::fs::create_dir_all(&spec.out)?;

    let base_seed = config.seed;
    let variant = variant_name(&config);
    let jobs: Vec<(usize, usize)> = (0..spec.ratios.len())
        .flat_map(|ri| (0..spec.repeats).map(move |rep| (ri, rep)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs)
        .build()
        .map_err(|e| CliError::input(e.to_string()))?;
    let results: Vec<Result<(usize, usize, RunOutput), CliError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(ri, rep)| {
                let out =
                    execute_single(&graph, &config, spec.ratios[ri], rep, base_seed, &spec.out)?;
                Ok((ri, rep, out))
            })
            .collect()
    });

    let mut per_ratio: Vec<Vec<Option<RunOutput>>> =
        (0..spec.ratios.len()).map(|_| (0..spec.repeats).map(|_| None).collect()).collect();
    for result in results {
        let (ri, rep, output) = result?;
        per_ratio[ri][rep] = Some(output);
    }

    let mut all_files: Vec<PathBuf> = Vec::new();
    let mut consolidated: Vec<(f64, MetricsReport)> = Vec::new();
    for (ri, outputs) in per_ratio.into_iter().enumerate() {
        let ratio = spec.ratios[ri];
        let outputs: Vec<RunOutput> = outputs.into_iter().map(|o| o.unwrap()).collect();
        let seeds: Vec<u64> = outputs.iter().map(|o| o.seed).collect();
        let report = MetricsReport::from_runs(outputs.iter().map(|o| o.metrics).collect());
        let json = MetricsJson {
            dataset: &graph.name,
            variant: &variant,
            missing_ratio: ratio,
            seed_list: &seeds,
            per_run: &report.per_run,
            mean: report.mean,
            std: report.std,
        };
        let path = spec.out.join(format!("metrics_r{}.json", ratio_tag(ratio)));
        std::fs::write(&path, serde_json::to_string_pretty(&json)? )?;
        all_files.push(path);
        for o in outputs {
            all_files.extend(o.files);
        }
        consolidated.push((ratio, report));
    }

    if spec.consolidate {
        let path = spec.out.join("sweep.csv");
        let mut text = String::from("ratio,variant,metric,mean,std\n");
        let mut rows: Vec<(f64, &MetricsReport)> =
            consolidated.iter().map(|(r, m)| (*r, m)).collect();
        rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (ratio, report) in rows {
            for (metric, mean, std) in [
                ("acc", report.mean.acc, report.std.acc),
                ("nmi", report.mean.nmi, report.std.nmi),
                ("ari", report.mean.ari, report.std.ari),
                ("f1", report.mean.f1, report.std.f1),
            ] {
                text.push_str(&format!("{},{variant},{metric},{mean},{std}\n", ratio_tag(ratio)));
            }
        }
        std::fs::write(&path, text)?;
        all_files.push(path);
    }

    write_manifest(&spec.out, &all_files)?;
    println!(
        "wrote {} artifacts to {}",
        all_files.len() + 1,
        spec.out.display()
    );
    Ok(())
}

fn write_manifest(out: &Path, files: &[PathBuf]) -> Result<(), CliError> {
    let mut entries: Vec<(String, String)> = Vec::new();
    for file in files {
        let bytes = std::fs::read(file)?;
        let digest = Sha256::digest(&bytes);
        let name = file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        entries.push((name, format!("{digest:x}")));
    }
    entries.sort();
    let mut text = String::new();
    for (name, hash) in entries {
        text.push_str(&format!("{hash}  {name}\n"));
    }
    std::fs::write(out.join("manifest.txt"), text)?;
    Ok(())
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::input(e.to_string())
    }
}

pub fn gen_synth(args: &crate::GenSynthArgs) -> Result<(), CliError> {
    let graph = generate_sbm(
        args.nodes,
        args.classes,
        args.p_in,
        args.p_out,
        args.dim,
        args.separation,
        args.seed,
    )?;
    std::fs::create_dir_all(&args.out)?;
    let edges = args.out.join("edges.txt");
    let features = args.out.join("features.csv");
    let labels = args.out.join("labels.txt");
    save_graph(&graph, &edges, &features, Some(&labels))?;
    println!(
        "wrote {} nodes, {} edges, {} classes to {}",
        graph.n,
        graph.g.nnz() / 2,
        graph.c.unwrap_or(0),
        args.out.display()
    );
    Ok(())
}
