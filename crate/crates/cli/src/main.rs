//! Command-line driver: synthetic dataset generation, graph building,
//! training, evaluation, the ablation matrix, gradient checking, RSA, and
//! feature export.
//!
//! Exit codes: 0 on success, 1 on validation/configuration errors, 2 on
//! numerical failures (training divergence, eigensolver non-convergence).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use egt_core::config::{ConfigError, KvConfig};
use egt_core::data::{
    generate_synthetic_dataset, load_dataset, make_split, save_dataset, DataError, Dataset,
    DatasetSplit, Protocol, SynthConfig,
};
use egt_core::encoder::{
    read_model, EgtConfig, EncoderError, ModelParams, Neighborhood,
};
use egt_core::eval::{
    class_separation, encode_split, evaluate_topk, export_features, rsa_matrix, EvalError,
};
use egt_core::graph::{
    build_functional_adjacency, build_spatial_adjacency, normalized_laplacian,
    positional_encodings, Adjacency, ElectrodeLayout, GraphError, GraphLaplacian,
    PositionalEncodings, SpatialRule,
};
use egt_core::objectives::{ClassEmbeddingTable, LossError};
use egt_core::tensor::TensorError;
use egt_core::trainer::{
    continue_training, read_train_state, run_ablation, tiny_model_gradcheck, train, Ablation,
    OptimizerKind, TrainConfig, TrainError, TrainInputs,
};

/// Salt mixed into the seed for the class-embedding table, so data splits
/// and embeddings draw from distinct streams.
const TABLE_SEED_SALT: u64 = 0xC1A5;
const DEFAULT_SEED: u64 = 42;
const GRADCHECK_DEFAULT_SEED: u64 = 7;

#[derive(Parser)]
#[command(name = "egt", about = "EEG graph transformer training and evaluation", version)]
struct Cli {
    /// key=value configuration file applied before flag overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for data generation, splits, init, and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all written artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file (EEGD container).
    #[arg(long)]
    data: PathBuf,
    /// Electrode layout CSV; defaults to the synthetic cap layout.
    #[arg(long)]
    layout: Option<PathBuf>,
}

#[derive(Args, Default)]
struct SynthOverrides {
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Sequences per (subject, class) pair.
    #[arg(long)]
    sequences_per: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    subject_shift: Option<f64>,
    #[arg(long)]
    sample_rate: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its electrode layout.
    GenData {
        #[command(flatten)]
        overrides: SynthOverrides,
    },
    /// Build the channel graph and export its adjacency matrix.
    BuildGraph {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a model on the configured split.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Resume from a previously written training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Zero-shot top-k evaluation of a trained model.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Model container to evaluate.
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the four-row ablation matrix.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Verify analytic gradients against finite differences on a tiny model.
    Gradcheck,
    /// Representational similarity matrix over test-split concept means.
    Rsa {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Export sequence features as CSV.
    ExportFeatures {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        /// Which sequences to export: train, test, or all.
        #[arg(long, default_value = "all")]
        which: String,
    },
}

struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        Self { message: message.into(), code: 1 }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Self { message: message.into(), code: 2 }
    }
}

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::NoConvergence { .. } | TensorError::NonFinite { .. } => 2,
        _ => 1,
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self { code: tensor_code(&e), message: e.to_string() }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        let code = match &e {
            GraphError::Tensor(t) => tensor_code(t),
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Diverged { .. } => 2,
            TrainError::Tensor(t) => tensor_code(t),
            TrainError::Graph(GraphError::Tensor(t)) => tensor_code(t),
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

macro_rules! validation_error {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::validation(e.to_string())
            }
        }
    )*};
}

validation_error!(
    ConfigError,
    DataError,
    EncoderError,
    LossError,
    EvalError,
    egt_core::encoder::CheckpointError,
    std::io::Error
);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "seed",
    // synthetic data
    "subjects",
    "classes",
    "sequences_per",
    "channels",
    "samples",
    "noise_sigma",
    "subject_shift",
    "sample_rate",
    // graph
    "graph_mode",
    "knn_k",
    "radius",
    "corr_threshold",
    "functional_weighted",
    // encoder
    "embed_dim",
    "n_heads",
    "n_layers",
    "pe_dim",
    "head_dim",
    "snapshots",
    // training
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "sgd_momentum",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "ablation",
    "alpha",
    "tau1",
    "tau2",
    "tau_align",
    "beta_gac",
    "beta_align",
    "window_length",
    "masked_attention",
    "align_dim",
    // evaluation protocol
    "protocol",
    "subject",
];

struct Settings {
    kv: KvConfig,
    seed: u64,
    out: PathBuf,
}

fn settings(cli: &Cli) -> Result<Settings, CliError> {
    let kv = match &cli.config {
        Some(path) => KvConfig::from_path(path)?,
        None => KvConfig::default(),
    };
    kv.ensure_known(CONFIG_KEYS)?;
    let seed = match cli.seed {
        Some(s) => s,
        None => kv.get_u64("seed")?.unwrap_or(DEFAULT_SEED),
    };
    Ok(Settings { kv, seed, out: cli.out.clone() })
}

fn synth_config(s: &Settings) -> Result<SynthConfig, CliError> {
    let mut cfg = SynthConfig { seed: s.seed, ..SynthConfig::default() };
    s.kv.apply_usize("subjects", &mut cfg.subjects)?;
    s.kv.apply_usize("classes", &mut cfg.classes)?;
    s.kv.apply_usize("sequences_per", &mut cfg.sequences_per)?;
    s.kv.apply_usize("channels", &mut cfg.channels)?;
    s.kv.apply_usize("samples", &mut cfg.samples)?;
    s.kv.apply_f64("noise_sigma", &mut cfg.noise_sigma)?;
    s.kv.apply_f64("subject_shift", &mut cfg.subject_shift)?;
    s.kv.apply_f64("sample_rate", &mut cfg.sample_rate)?;
    cfg.validate()?;
    Ok(cfg)
}

fn egt_config(s: &Settings) -> Result<EgtConfig, CliError> {
    let mut cfg = EgtConfig::default();
    s.kv.apply_usize("embed_dim", &mut cfg.embed_dim)?;
    s.kv.apply_usize("n_heads", &mut cfg.n_heads)?;
    s.kv.apply_usize("n_layers", &mut cfg.n_layers)?;
    s.kv.apply_usize("pe_dim", &mut cfg.pe_dim)?;
    s.kv.apply_usize("head_dim", &mut cfg.head_dim)?;
    s.kv.apply_usize("snapshots", &mut cfg.snapshots)?;
    cfg.validate().map_err(|e| CliError::validation(e.to_string()))?;
    Ok(cfg)
}

fn train_config(s: &Settings) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig { seed: s.seed, ..TrainConfig::default() };
    s.kv.apply_usize("epochs", &mut cfg.epochs)?;
    s.kv.apply_usize("batch_size", &mut cfg.batch_size)?;
    s.kv.apply_f64("learning_rate", &mut cfg.learning_rate)?;
    if let Some(name) = s.kv.get("optimizer") {
        cfg.optimizer = match name {
            "adam" => OptimizerKind::Adam {
                beta1: s.kv.get_f64("adam_beta1")?.unwrap_or(0.9),
                beta2: s.kv.get_f64("adam_beta2")?.unwrap_or(0.999),
                eps: s.kv.get_f64("adam_eps")?.unwrap_or(1e-8),
            },
            "sgd" => OptimizerKind::Sgd {
                momentum: s.kv.get_f64("sgd_momentum")?.unwrap_or(0.9),
            },
            other => {
                return Err(CliError::validation(format!(
                    "unknown optimizer {other:?} (expected adam or sgd)"
                )))
            }
        };
    }
    if let Some(name) = s.kv.get("ablation") {
        cfg.ablation = Ablation::parse(name).ok_or_else(|| {
            CliError::validation(format!(
                "unknown ablation {name:?} (expected baseline, NC, EGT_NC, EGT_GAC)"
            ))
        })?;
    }
    s.kv.apply_f64("alpha", &mut cfg.loss.alpha)?;
    s.kv.apply_f64("tau1", &mut cfg.loss.tau1)?;
    s.kv.apply_f64("tau2", &mut cfg.loss.tau2)?;
    s.kv.apply_f64("tau_align", &mut cfg.loss.tau_align)?;
    s.kv.apply_f64("beta_gac", &mut cfg.loss.beta_gac)?;
    s.kv.apply_f64("beta_align", &mut cfg.loss.beta_align)?;
    if let Some(w) = s.kv.get_usize("window_length")? {
        cfg.window_length = Some(w);
    }
    s.kv.apply_bool("masked_attention", &mut cfg.masked_attention)?;
    s.kv.apply_usize("align_dim", &mut cfg.align_dim)?;
    cfg.validate()?;
    Ok(cfg)
}

fn protocol(s: &Settings) -> Result<Protocol, CliError> {
    let subject = s.kv.get_usize("subject")?.unwrap_or(0);
    match s.kv.get("protocol").unwrap_or("subject_dependent") {
        "subject_dependent" => Ok(Protocol::SubjectDependent { subject }),
        "loso" | "leave_one_subject_out" => Ok(Protocol::LeaveOneSubjectOut { held_out: subject }),
        other => Err(CliError::validation(format!(
            "unknown protocol {other:?} (expected subject_dependent or loso)"
        ))),
    }
}

fn load_layout(args: &DataArgs, dataset: &Dataset) -> Result<ElectrodeLayout, CliError> {
    let layout = match &args.layout {
        Some(path) => ElectrodeLayout::from_csv_path(path)?,
        None => ElectrodeLayout::synthetic_cap(dataset.channels),
    };
    dataset.validate_layout(&layout)?;
    Ok(layout)
}

/// The static per-dataset graph: spatial kNN united with thresholded
/// functional connectivity by default, each selectable on its own.
fn build_graph(
    s: &Settings,
    dataset: &Dataset,
    layout: &ElectrodeLayout,
) -> Result<(Adjacency, GraphLaplacian, PositionalEncodings), CliError> {
    let mode = s.kv.get("graph_mode").unwrap_or("combined");
    let threshold = s.kv.get_f64("corr_threshold")?.unwrap_or(0.7);
    let weighted = s.kv.get_bool("functional_weighted")?.unwrap_or(false);
    let spatial_rule = match s.kv.get_f64("radius")? {
        Some(r) => SpatialRule::Radius(r),
        None => SpatialRule::Knn(s.kv.get_usize("knn_k")?.unwrap_or(4)),
    };
    let functional = |weighted: bool| -> Result<Adjacency, CliError> {
        let all: Vec<usize> = (0..dataset.sequences.len()).collect();
        let signals = dataset.concat_signals(&all)?;
        Ok(build_functional_adjacency(&signals, threshold, weighted)?)
    };
    let adjacency = match mode {
        "spatial" => build_spatial_adjacency(layout, spatial_rule)?,
        "functional" => functional(weighted)?,
        "combined" => {
            let spatial = build_spatial_adjacency(layout, spatial_rule)?;
            spatial.union(&functional(false)?)?
        }
        other => {
            return Err(CliError::validation(format!(
                "unknown graph_mode {other:?} (expected spatial, functional, combined)"
            )))
        }
    };
    let laplacian = normalized_laplacian(&adjacency)?;
    let pe_dim = egt_config(s)?.pe_dim;
    let pe = positional_encodings(&laplacian, pe_dim)?;
    Ok((adjacency, laplacian, pe))
}

struct Pipeline {
    dataset: Dataset,
    split: DatasetSplit,
    pe: PositionalEncodings,
    neighborhood: Neighborhood,
    table: ClassEmbeddingTable,
    egt: EgtConfig,
    train_cfg: TrainConfig,
}

impl Pipeline {
    fn inputs(&self) -> TrainInputs<'_> {
        TrainInputs {
            dataset: &self.dataset,
            split: &self.split,
            pe: &self.pe,
            neighborhood: &self.neighborhood,
            table: &self.table,
        }
    }

    fn window_length(&self) -> usize {
        self.train_cfg
            .window_length
            .unwrap_or(self.dataset.samples / self.egt.snapshots)
    }
}

fn build_pipeline(s: &Settings, args: &DataArgs) -> Result<Pipeline, CliError> {
    let dataset = load_dataset(&args.data)?;
    let layout = load_layout(args, &dataset)?;
    let (adjacency, _laplacian, pe) = build_graph(s, &dataset, &layout)?;
    let egt = egt_config(s)?;
    let train_cfg = train_config(s)?;
    let split = make_split(&dataset, protocol(s)?, s.seed)?;
    let neighborhood = if train_cfg.masked_attention {
        Neighborhood::masked_from(&adjacency)
    } else {
        Neighborhood::Full
    };
    let table = ClassEmbeddingTable::seeded(
        dataset.n_classes(),
        train_cfg.align_dim,
        s.seed ^ TABLE_SEED_SALT,
    );
    Ok(Pipeline { dataset, split, pe, neighborhood, table, egt, train_cfg })
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let s = settings(&cli)?;
    match &cli.command {
        Command::GenData { overrides } => cmd_gen_data(&s, overrides),
        Command::BuildGraph { data } => cmd_build_graph(&s, data),
        Command::Train { data, resume } => cmd_train(&s, data, resume.as_deref()),
        Command::Eval { data, model } => cmd_eval(&s, data, model),
        Command::Ablate { data } => cmd_ablate(&s, data),
        Command::Gradcheck => cmd_gradcheck(&s, cli.seed),
        Command::Rsa { data, model } => cmd_rsa(&s, data, model),
        Command::ExportFeatures { data, model, which } => {
            cmd_export_features(&s, data, model, which)
        }
    }
}

fn cmd_gen_data(s: &Settings, overrides: &SynthOverrides) -> Result<(), CliError> {
    let mut cfg = synth_config(s)?;
    // Flags outrank the configuration file.
    macro_rules! apply {
        ($($field:ident),*) => {$(
            if let Some(v) = overrides.$field {
                cfg.$field = v;
            }
        )*};
    }
    apply!(subjects, classes, sequences_per, channels, samples, noise_sigma, subject_shift, sample_rate);
    cfg.validate()?;
    let layout = ElectrodeLayout::synthetic_cap(cfg.channels);
    let dataset = generate_synthetic_dataset(&cfg, &layout)?;
    create_out(&s.out)?;
    let data_path = s.out.join("dataset.eegd");
    save_dataset(&dataset, &data_path)?;
    let layout_path = s.out.join("layout.csv");
    layout.write_csv(std::fs::File::create(&layout_path)?)?;
    println!(
        "wrote {} ({} sequences: {} subjects x {} classes x {}, {} channels, {} samples)",
        data_path.display(),
        dataset.sequences.len(),
        cfg.subjects,
        cfg.classes,
        cfg.sequences_per,
        cfg.channels,
        cfg.samples
    );
    println!("wrote {}", layout_path.display());
    Ok(())
}

fn cmd_build_graph(s: &Settings, args: &DataArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&args.data)?;
    let layout = load_layout(args, &dataset)?;
    let (adjacency, laplacian, pe) = build_graph(s, &dataset, &layout)?;
    create_out(&s.out)?;
    let path = s.out.join("adjacency.csv");
    adjacency.write_csv(std::fs::File::create(&path)?)?;
    let n_edges: f64 = adjacency.matrix.data().iter().filter(|&&v| v != 0.0).count() as f64 / 2.0;
    println!(
        "graph: {} nodes, {} edges, {} connected component(s)",
        adjacency.n_nodes(),
        n_edges,
        adjacency.n_components()
    );
    let ev = &laplacian.eig.eigenvalues;
    println!(
        "laplacian spectrum: min {:.3e}, max {:.6}, trivial {}",
        ev[0],
        ev[ev.len() - 1],
        laplacian.n_trivial()
    );
    println!("positional encodings: {} dims over {} nodes", pe.k, pe.n_nodes());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train(s: &Settings, args: &DataArgs, resume: Option<&Path>) -> Result<(), CliError> {
    let p = build_pipeline(s, args)?;
    create_out(&s.out)?;
    let run = match resume {
        None => train(p.inputs(), p.egt, &p.train_cfg, Some(&s.out))?,
        Some(path) => {
            let state = read_train_state(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
            println!(
                "resuming from {} (epoch {}, step {})",
                path.display(),
                state.epoch,
                state.step
            );
            continue_training(p.inputs(), &p.train_cfg, state, p.train_cfg.epochs, Some(&s.out))?
        }
    };
    for e in &run.epochs {
        println!("epoch {:>4}  test top-1 {:.4}", e.epoch, e.test_top1);
    }
    if let Some(best) = run.state.best {
        println!("best: top-1 {:.4} at epoch {}", best.top1, best.epoch);
    }
    println!(
        "final: step {}, loss {:.6}",
        run.state.step,
        run.steps.last().map_or(f64::NAN, |r| r.loss_total)
    );
    println!("artifacts in {}", s.out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    Ok(read_model(&mut std::io::BufReader::new(std::fs::File::open(path)?))?)
}

fn cmd_eval(s: &Settings, args: &DataArgs, model: &Path) -> Result<(), CliError> {
    let p = build_pipeline(s, args)?;
    let params = load_model(model)?;
    let encoded = encode_split(
        &params,
        &p.pe,
        &p.neighborhood,
        &p.dataset,
        &p.split.test,
        p.window_length(),
    )?;
    let k_list = [1usize, 5];
    let report = evaluate_topk(&encoded, &params.align_w, &params.align_b, &p.table, &k_list)?;
    println!("test sequences: {}", report.n_sequences);
    println!("{:<12} {:>8} {:>8}", "scope", "top-1", "top-5");
    let fmt = |per: &[(usize, f64)]| {
        (per.iter().find(|(k, _)| *k == 1).map_or(f64::NAN, |(_, a)| *a),
         per.iter().find(|(k, _)| *k == 5).map_or(f64::NAN, |(_, a)| *a))
    };
    let (t1, t5) = fmt(&report.per_k);
    println!("{:<12} {:>8.4} {:>8.4}", "all", t1, t5);
    for (subject, per) in &report.per_subject {
        let (t1, t5) = fmt(per);
        println!("{:<12} {:>8.4} {:>8.4}", format!("subject_{subject}"), t1, t5);
    }
    create_out(&s.out)?;
    let path = s.out.join("metrics.csv");
    let mut w = std::fs::File::create(&path)?;
    writeln!(w, "scope,k,accuracy")?;
    for (k, acc) in &report.per_k {
        writeln!(w, "all,{k},{acc}")?;
    }
    for (subject, per) in &report.per_subject {
        for (k, acc) in per {
            writeln!(w, "subject_{subject},{k},{acc}")?;
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_ablate(s: &Settings, args: &DataArgs) -> Result<(), CliError> {
    let p = build_pipeline(s, args)?;
    create_out(&s.out)?;
    let table = run_ablation(p.inputs(), p.egt, &p.train_cfg, Some(&s.out))?;
    print!("{}", table.render());
    println!("wrote {}", s.out.join("ablation.csv").display());
    Ok(())
}

fn cmd_gradcheck(s: &Settings, explicit_seed: Option<u64>) -> Result<(), CliError> {
    let seed = explicit_seed.unwrap_or(GRADCHECK_DEFAULT_SEED);
    let _ = s;
    let outcome = tiny_model_gradcheck(seed, 1e-5)?;
    println!(
        "checked {} parameters in {:?}; loss {:.6}",
        outcome.n_params, outcome.elapsed, outcome.loss_value
    );
    println!(
        "max relative error {:.3e} (tolerance 1e-4), max near-zero absolute error {:.3e} (tolerance 1e-7)",
        outcome.report.max_rel_err, outcome.report.max_abs_err_small
    );
    if outcome.report.passed() {
        println!("gradcheck PASS");
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradcheck FAIL: {} of {} coordinates out of tolerance (worst at {})",
            outcome.report.n_failed, outcome.n_params, outcome.worst_tensor
        )))
    }
}

fn cmd_rsa(s: &Settings, args: &DataArgs, model: &Path) -> Result<(), CliError> {
    let p = build_pipeline(s, args)?;
    let params = load_model(model)?;
    let encoded = encode_split(
        &params,
        &p.pe,
        &p.neighborhood,
        &p.dataset,
        &p.split.test,
        p.window_length(),
    )?;
    let features: Vec<Vec<f64>> = encoded.iter().map(|e| e.sequence.clone()).collect();
    let labels: Vec<usize> = encoded.iter().map(|e| e.label).collect();
    let mut classes: Vec<usize> = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let rsa = rsa_matrix(&features, &labels, &classes)?;
    let (within, between) = class_separation(&features, &labels);
    println!("classes: {classes:?}");
    println!("within-class mean cosine {within:.4}, between-class {between:.4}");
    create_out(&s.out)?;
    let path = s.out.join("rsa.csv");
    rsa.write_csv(std::fs::File::create(&path)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_export_features(
    s: &Settings,
    args: &DataArgs,
    model: &Path,
    which: &str,
) -> Result<(), CliError> {
    let p = build_pipeline(s, args)?;
    let params = load_model(model)?;
    let all: Vec<usize> = (0..p.dataset.sequences.len()).collect();
    let indices: &[usize] = match which {
        "train" => &p.split.train,
        "test" => &p.split.test,
        "all" => &all,
        other => {
            return Err(CliError::validation(format!(
                "unknown --which {other:?} (expected train, test, all)"
            )))
        }
    };
    let encoded = encode_split(
        &params,
        &p.pe,
        &p.neighborhood,
        &p.dataset,
        indices,
        p.window_length(),
    )?;
    create_out(&s.out)?;
    let path = s.out.join("features.csv");
    export_features(&encoded, std::fs::File::create(&path)?)?;
    println!("wrote {} ({} rows)", path.display(), encoded.len());
    Ok(())
}
