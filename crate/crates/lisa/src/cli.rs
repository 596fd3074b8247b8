//! Command-line interface: data generation, training, evaluation, diversity
//! reports, and the structural-equation verifier.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure. Primary outputs are byte-identical across reruns with the same
//! arguments and seed; wall-clock timestamps live only in the `run_info.json`
//! sidecar.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::backbones::{BackboneConfig, BackboneKind, Checkpoint, Readout};
use crate::data::{
    load_dataset, save_dataset, spmotif_generate, synth_node_task, FeatureMode, NodeTask,
    SpMotifConfig,
};
use crate::error::{LisaError, Result};
use crate::eval::{
    compare_runs, diversity_report, metrics, render_comparison, write_comparison_csv,
    write_diversity_csv,
};
use crate::generator::GeneratorConfig;
use crate::graph::{load_graphs, load_manifest, Graph};
use crate::sem::{
    crossover_threshold, sweep, write_sweep_csv, Composition,
};
use crate::trainer::{
    read_metrics_log, train, train_node_mode, write_metrics_log, TaskMode, TrainConfig,
    TrainOutcome,
};

#[derive(Parser)]
#[command(name = "lisa", version, about = "Label-invariant subgraph augmentation for graph OOD learning")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets.
    Data {
        #[command(subcommand)]
        which: DataCommand,
    },
    /// Train a classifier (with or without augmentation) from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split, or compare run logs.
    Eval(EvalArgs),
    /// Environment-diversity report of a trained checkpoint.
    Diversity(DiversityArgs),
    /// Structural-equation risk oracle.
    Sem {
        #[command(subcommand)]
        which: SemCommand,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Motif-plus-base graphs with a controllable spurious correlation.
    Spmotif(SpmotifArgs),
    /// Two-community node task with a spurious feature shift.
    SynthNode(SynthNodeArgs),
}

#[derive(Args)]
struct SpmotifArgs {
    /// P(base class = motif class) on training graphs, in [0, 1].
    #[arg(long, default_value_t = 0.9)]
    bias: f64,
    #[arg(long, default_value_t = 3000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_val: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FeatureModeArg::RandomUniform)]
    feature_mode: FeatureModeArg,
    #[arg(long, default_value_t = 4)]
    feature_dim: usize,
    /// Output directory for dataset.jsonl and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureModeArg {
    RandomUniform,
    ConstantOne,
}

impl From<FeatureModeArg> for FeatureMode {
    fn from(v: FeatureModeArg) -> Self {
        match v {
            FeatureModeArg::RandomUniform => FeatureMode::RandomUniform,
            FeatureModeArg::ConstantOne => FeatureMode::ConstantOne,
        }
    }
}

#[derive(Args)]
struct SynthNodeArgs {
    /// Decorrelation of the spurious channel on test nodes, in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for graph.jsonl and node_task.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory for checkpoint, metrics log, and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Ablation switches applied on top of the config file.
    #[arg(long = "ablation", value_enum)]
    ablations: Vec<AblationArg>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel workers for the inner phase.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    NoInfo,
    NoEnergy,
    RexDiversity,
    LiteralEq15Sign,
    StandardConcrete,
}

#[derive(Args)]
struct EvalArgs {
    /// Compare run directories (containing metrics.jsonl + resolved_config.json).
    #[arg(long, num_args = 1.., conflicts_with_all = ["checkpoint", "dataset", "manifest"])]
    compare: Vec<PathBuf>,
    #[arg(long, required_unless_present = "compare")]
    checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "compare")]
    dataset: Option<PathBuf>,
    #[arg(long, required_unless_present = "compare")]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Optional CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiversityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// Cap on the number of sample graphs.
    #[arg(long, default_value_t = 256)]
    max_samples: usize,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SemCommand {
    /// Check the solved risk crossover against the reference expression.
    Verify(SemVerifyArgs),
    /// Closed-form and Monte-Carlo risks over a (q, p_aug) grid, as CSV.
    Sweep(SemSweepArgs),
}

#[derive(Args)]
struct SemVerifyArgs {
    #[arg(long)]
    q: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::NonCancelling)]
    mode: ModeArg,
}

#[derive(Args)]
struct SemSweepArgs {
    /// Noise grid; defaults to 0.05..=0.45 step 0.05.
    #[arg(long, num_args = 1..)]
    q: Vec<f64>,
    /// Number of evenly spaced p_aug grid points.
    #[arg(long, default_value_t = 11)]
    p_points: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum ModeArg {
    BinaryXor,
    NonCancelling,
    Both,
}

// --- run config file ----------------------------------------------------------

/// Backbone section of the run config; the output width is always derived
/// from the data, never configured.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub readout: Readout,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self { kind: BackboneKind::GinLike, num_layers: 2, hidden_dim: 32, readout: Readout::Sum }
    }
}

impl BackboneSpec {
    fn to_config(&self) -> BackboneConfig {
        BackboneConfig {
            kind: self.kind,
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            out_dim: 1, // placeholder; the trainer sets the real width
            readout: self.readout,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    /// Graph dataset file (graph task) or single-graph file (node task).
    pub dataset: PathBuf,
    /// Split manifest (graph task).
    pub manifest: Option<PathBuf>,
    /// Node-task file with labels and node splits (node task).
    pub node_task: Option<PathBuf>,
}

/// Declarative run configuration; unknown keys are rejected and every default
/// is echoed into the resolved config stored next to the outputs.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataSpec,
    pub model: BackboneSpec,
    /// Generator backbone; defaults to `model`.
    pub generator_model: Option<BackboneSpec>,
    pub train: TrainConfig,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| LisaError::ConfigError(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| LisaError::ConfigError(format!("serialize config: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Stable method label used in comparisons.
    pub fn method_label(&self) -> String {
        if self.train.n_generators == 0 {
            return "erm".into();
        }
        let mut label = String::from("lisa");
        let a = &self.train.ablation;
        if a.rex_diversity {
            label.push_str("-rex");
        }
        if a.no_info {
            label.push_str("-no-info");
        }
        if a.no_energy {
            label.push_str("-no-energy");
        }
        if a.literal_eq15_sign {
            label.push_str("-literal-sign");
        }
        if a.standard_concrete {
            label.push_str("-standard-concrete");
        }
        label
    }
}

fn split_indices<'a>(manifest: &'a crate::graph::SplitManifest, split: &str) -> Result<&'a [usize]> {
    match split {
        "train" => Ok(&manifest.train),
        "val" => Ok(&manifest.val),
        "test" => Ok(&manifest.test),
        other => Err(LisaError::ConfigError(format!("unknown split `{other}`"))),
    }
}

fn cmd_data(which: DataCommand) -> Result<()> {
    match which {
        DataCommand::Spmotif(args) => {
            let cfg = SpMotifConfig {
                bias: args.bias,
                n_train: args.n_train,
                n_val: args.n_val,
                n_test: args.n_test,
                seed: args.seed,
                feature_dim: args.feature_dim,
                feature_mode: args.feature_mode.into(),
            };
            let (graphs, manifest) = spmotif_generate(&cfg, args.workers)?;
            std::fs::create_dir_all(&args.out)?;
            let dpath = args.out.join("dataset.jsonl");
            let mpath = args.out.join("manifest.json");
            save_dataset(&dpath, &mpath, &graphs, &manifest)?;
            println!("wrote {} graphs to {}", graphs.len(), dpath.display());
            println!(
                "manifest {}: train={} val={} test={}",
                mpath.display(),
                manifest.train.len(),
                manifest.val.len(),
                manifest.test.len()
            );
            Ok(())
        }
        DataCommand::SynthNode(args) => {
            let (graph, task) = synth_node_task(args.seed, args.shift)?;
            std::fs::create_dir_all(&args.out)?;
            let gpath = args.out.join("graph.jsonl");
            let tpath = args.out.join("node_task.json");
            crate::graph::save_graphs(&gpath, std::slice::from_ref(&graph))?;
            task.save(&tpath)?;
            println!(
                "wrote node task to {}: {} nodes, train={} val={} test={}",
                args.out.display(),
                graph.num_nodes(),
                task.train.len(),
                task.val.len(),
                task.test.len()
            );
            Ok(())
        }
    }
}

fn apply_ablations(cfg: &mut TrainConfig, ablations: &[AblationArg]) {
    for a in ablations {
        match a {
            AblationArg::NoInfo => cfg.ablation.no_info = true,
            AblationArg::NoEnergy => cfg.ablation.no_energy = true,
            AblationArg::RexDiversity => cfg.ablation.rex_diversity = true,
            AblationArg::LiteralEq15Sign => cfg.ablation.literal_eq15_sign = true,
            AblationArg::StandardConcrete => cfg.ablation.standard_concrete = true,
        }
    }
}

/// Build the best-epoch checkpoint of a finished run.
pub fn checkpoint_from_outcome(outcome: &TrainOutcome, cfg: &TrainConfig) -> Checkpoint {
    let best = &outcome.state.best;
    let mut ckpt = Checkpoint::new(outcome.clf_config, cfg.seed, best.epoch);
    ckpt.generator_backbone = Some(outcome.gen_config);
    ckpt.num_classes = outcome.state.num_classes;
    ckpt.feature_dim = outcome.state.feature_dim;
    ckpt.n_generators = cfg.n_generators;
    ckpt.temperature = cfg.temperature;
    ckpt.task = match cfg.task {
        TaskMode::Graph => "graph".into(),
        TaskMode::Node => "node".into(),
    };
    ckpt.insert_group("clf", &best.classifier);
    for (i, g) in best.generators.iter().enumerate() {
        ckpt.insert_group(&format!("gen/{}", i + 1), g);
    }
    ckpt
}

/// Run training from a resolved config and write every artifact into
/// `run_dir`. Returns the outcome for callers that keep going (tests).
pub fn run_training(config: &RunConfigFile, run_dir: &Path) -> Result<TrainOutcome> {
    config.train.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let started = std::time::SystemTime::now();

    let gen_spec = config.generator_model.clone().unwrap_or_else(|| config.model.clone());
    let outcome = match config.train.task {
        TaskMode::Graph => {
            let manifest_path = config
                .data
                .manifest
                .as_ref()
                .ok_or_else(|| LisaError::ConfigError("graph task needs data.manifest".into()))?;
            let splits = load_dataset(&config.data.dataset, manifest_path)?;
            train(
                splits.train,
                splits.val,
                splits.test,
                config.model.to_config(),
                gen_spec.to_config(),
                config.train.clone(),
            )?
        }
        TaskMode::Node => {
            let task_path = config
                .data
                .node_task
                .as_ref()
                .ok_or_else(|| LisaError::ConfigError("node task needs data.node_task".into()))?;
            let graphs = load_graphs(&config.data.dataset)?;
            let graph = graphs
                .into_iter()
                .next()
                .ok_or_else(|| LisaError::DataError("node dataset file is empty".into()))?;
            let task = NodeTask::load(task_path)?;
            train_node_mode(
                graph,
                &task,
                config.model.to_config(),
                gen_spec.to_config(),
                config.train.clone(),
            )?
        }
    };

    config.save(&run_dir.join("resolved_config.json"))?;
    write_metrics_log(&run_dir.join("metrics.jsonl"), &outcome.records)?;
    checkpoint_from_outcome(&outcome, &config.train).save(&run_dir.join("checkpoint.json"))?;

    // Timestamps stay out of the primary outputs.
    let info = serde_json::json!({
        "started_unix_ms": started.duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
        "finished_unix_ms": std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
    });
    std::fs::write(run_dir.join("run_info.json"), info.to_string())?;
    Ok(outcome)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = RunConfigFile::load(&args.config)?;
    apply_ablations(&mut config.train, &args.ablations);
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(workers) = args.workers {
        config.train.workers = workers;
    }
    let outcome = run_training(&config, &args.out)?;
    let best = &outcome.state.best;
    println!(
        "run complete: best epoch {} val_acc {:.4} test_acc {:.4} (label violations: {})",
        best.epoch, best.val_acc, best.test_acc, outcome.state.label_violations
    );
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn load_split_graphs(dataset: &Path, manifest: &Path, split: &str) -> Result<Vec<Graph>> {
    let graphs = load_graphs(dataset)?;
    let manifest = load_manifest(manifest)?;
    manifest.validate(graphs.len())?;
    let idx = split_indices(&manifest, split)?;
    Ok(idx.iter().map(|&i| graphs[i].clone()).collect())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if !args.compare.is_empty() {
        let mut runs = Vec::new();
        for dir in &args.compare {
            let records = read_metrics_log(&dir.join("metrics.jsonl"))?;
            let config = RunConfigFile::load(&dir.join("resolved_config.json"))?;
            runs.push((config.method_label(), records));
        }
        let rows = compare_runs(&runs)?;
        print!("{}", render_comparison(&rows));
        if let Some(out) = &args.out {
            let mut file = std::fs::File::create(out)?;
            write_comparison_csv(&mut file, &rows)?;
        }
        return Ok(());
    }

    let ckpt = Checkpoint::load(args.checkpoint.as_ref().expect("required by clap"))?;
    let clf = ckpt.group("clf")?;
    let graphs = load_split_graphs(
        args.dataset.as_ref().expect("required by clap"),
        args.manifest.as_ref().expect("required by clap"),
        &args.split,
    )?;
    if graphs.is_empty() {
        return Err(LisaError::DataError(format!("split `{}` is empty", args.split)));
    }
    let mut logits = ndarray::Array2::zeros((graphs.len(), ckpt.backbone.out_dim));
    let mut labels = Vec::with_capacity(graphs.len());
    for (i, g) in graphs.iter().enumerate() {
        let row = crate::backbones::graph_logits(&ckpt.backbone, &clf, g)?;
        logits.row_mut(i).assign(&row);
        labels.push(
            g.label().ok_or_else(|| LisaError::DataError(format!("graph {i} has no label")))?,
        );
    }
    let m = metrics(&logits, &labels)?;
    println!(
        "split={} n={} accuracy={:.4} macro_f1={:.4} roc_auc={}",
        args.split,
        labels.len(),
        m.accuracy,
        m.macro_f1,
        m.roc_auc.map_or("n/a".into(), |v| format!("{v:.4}")),
    );
    if let Some(out) = &args.out {
        let mut file = std::fs::File::create(out)?;
        use std::io::Write;
        writeln!(file, "split,n,accuracy,macro_f1,roc_auc")?;
        writeln!(
            file,
            "{},{},{},{},{}",
            args.split,
            labels.len(),
            m.accuracy,
            m.macro_f1,
            m.roc_auc.map_or(String::new(), |v| v.to_string())
        )?;
    }
    Ok(())
}

fn cmd_diversity(args: DiversityArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let clf = ckpt.group("clf")?;
    if ckpt.n_generators == 0 {
        return Err(LisaError::ConfigError(
            "checkpoint has no generators; diversity needs an augmented run".into(),
        ));
    }
    let gen_bb = ckpt
        .generator_backbone
        .ok_or_else(|| LisaError::DataError("checkpoint lacks generator backbone".into()))?;
    let mut gen_cfgs = Vec::new();
    let mut gen_params = Vec::new();
    for i in 1..=ckpt.n_generators {
        gen_cfgs.push(GeneratorConfig {
            temperature: ckpt.temperature,
            backbone: gen_bb,
            generator_id: i,
            standard_concrete: false,
        });
        gen_params.push(ckpt.group(&format!("gen/{i}"))?);
    }
    let graphs = load_split_graphs(&args.dataset, &args.manifest, &args.split)?;
    let sample: Vec<Arc<Graph>> =
        graphs.into_iter().take(args.max_samples).map(Arc::new).collect();
    let report = diversity_report(&ckpt.backbone, &clf, &gen_cfgs, &gen_params, &sample)?;
    if report.degenerate {
        eprintln!("warning: pooled energy scores are constant; distances are all zero");
    }
    let mut file = std::fs::File::create(&args.out)?;
    write_diversity_csv(&mut file, &report)?;
    println!(
        "diversity over {} samples: d_intra={} ({} augmented environments)",
        sample.len(),
        report.d_intra.map_or("n/a".into(), |v| format!("{v:.4}")),
        report.d_orig_to_aug.len()
    );
    Ok(())
}

fn cmd_sem(which: SemCommand) -> Result<()> {
    match which {
        SemCommand::Verify(args) => {
            let mode = match args.mode {
                ModeArg::BinaryXor => Composition::BinaryXor,
                ModeArg::NonCancelling => Composition::NonCancelling,
                ModeArg::Both => {
                    return Err(LisaError::ConfigError("verify needs a single mode".into()))
                }
            };
            let c = crossover_threshold(args.q, mode)?;
            let verdict = if c.matches_reference { "PASS" } else { "MISMATCH" };
            println!(
                "q={} mode={} threshold_solved={:.10} threshold_reference={:.10} verdict={}",
                args.q,
                mode,
                c.solved,
                c.reference,
                verdict
            );
            Ok(())
        }
        SemCommand::Sweep(args) => {
            let q_grid: Vec<f64> = if args.q.is_empty() {
                (1..=9).map(|i| i as f64 * 0.05).collect()
            } else {
                args.q.clone()
            };
            if args.p_points < 2 {
                return Err(LisaError::ConfigError("p-points must be >= 2".into()));
            }
            let p_grid: Vec<f64> =
                (0..args.p_points).map(|i| i as f64 / (args.p_points - 1) as f64).collect();
            let modes: Vec<Composition> = match args.mode {
                ModeArg::BinaryXor => vec![Composition::BinaryXor],
                ModeArg::NonCancelling => vec![Composition::NonCancelling],
                ModeArg::Both => vec![Composition::BinaryXor, Composition::NonCancelling],
            };
            let rows = sweep(&q_grid, &p_grid, &modes, args.samples, args.seed, args.workers)?;
            match &args.out {
                Some(path) => {
                    let mut file = std::fs::File::create(path)?;
                    write_sweep_csv(&mut file, &rows)?;
                    println!("wrote {} rows to {}", rows.len(), path.display());
                }
                None => {
                    let mut stdout = std::io::stdout();
                    write_sweep_csv(&mut stdout, &rows)?;
                }
            }
            Ok(())
        }
    }
}

/// Exit code for an error, per the documented convention.
pub fn exit_code(err: &LisaError) -> i32 {
    match err {
        LisaError::ConfigError(_) | LisaError::DomainError { .. } => 2,
        LisaError::NonFiniteGradient { .. } | LisaError::NonFiniteActivation { .. } => 4,
        _ => 3,
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Data { which } => cmd_data(which),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Diversity(args) => cmd_diversity(args),
        Command::Sem { which } => cmd_sem(which),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}
