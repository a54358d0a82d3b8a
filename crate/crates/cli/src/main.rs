//! `degta` command line: encoding export, training, evaluation,
//! interpretability export, gradient verification, synthetic data
//! generation and the scaling bench.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric
//! failure. Errors print to stderr as `ERROR <code>: <message>`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use degta::attention::global::SamplingStrategy;
use degta::bench::{growth_ratios, scaling_bench};
use degta::checkpoint::{load_checkpoint, save_checkpoint};
use degta::data::{
    generate, load_graph, load_graph_dataset, load_node_dataset, save_graph,
    save_node_dataset, GenKind, Generated, GraphSplit,
};
use degta::encodings::{EncodingSet, PeKind, SeKind};
use degta::error::DegtaError;
use degta::graph::Graph;
use degta::model::{Ablation, DeGTAConfig, DeGTAModel, Task};
use degta::report::export_report;
use degta::train::{eval_graph, eval_node, train_graph, train_node, TrainOutcome};
use degta::verify::gradcheck_suite;

#[derive(Parser)]
#[command(name = "degta", version, about = "Decoupled graph triple attention toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PeArg {
    Jaccard,
    Lappe,
    Rwpe,
}

impl From<PeArg> for PeKind {
    fn from(a: PeArg) -> PeKind {
        match a {
            PeArg::Jaccard => PeKind::Jaccard,
            PeArg::Lappe => PeKind::LapPe,
            PeArg::Rwpe => PeKind::Rwpe,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SeArg {
    Rwse,
    Dse,
    Tcse,
}

impl From<SeArg> for SeKind {
    fn from(a: SeArg) -> SeKind {
        match a {
            SeArg::Rwse => SeKind::Rwse,
            SeArg::Dse => SeKind::Dse,
            SeArg::Tcse => SeKind::Tcse,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Node,
    Graph,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleArg {
    Topk,
    Threshold,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    CoupledAttention,
    SummedIntegration,
    NoGlobal,
    DenseGlobal,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Ablation {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::CoupledAttention => Ablation::CoupledAttention,
            AblationArg::SummedIntegration => Ablation::SummedIntegration,
            AblationArg::NoGlobal => Ablation::NoGlobal,
            AblationArg::DenseGlobal => Ablation::DenseGlobal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKindArg {
    Sbm,
    Cycle,
    DisjointCycles,
    Csl,
}

#[derive(Subcommand)]
enum Command {
    /// Compute positional and structural encodings; write P.csv, S.csv and
    /// meta.json.
    Encode {
        /// Dataset or graph directory (edges.tsv + features.csv).
        #[arg(long)]
        data: PathBuf,
        /// Positional encoding strategy.
        #[arg(long, value_enum, default_value = "jaccard")]
        pe: PeArg,
        /// Structural encoding strategy.
        #[arg(long, value_enum, default_value = "rwse")]
        se: SeArg,
        /// Receptive field K.
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Gaussian bandwidth of the Jaccard decay.
        #[arg(long, default_value_t = 1.0)]
        h: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint and `<ckpt>.metrics.csv`.
    Train(TrainArgs),
    /// Print the test-split metric of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write the attention report JSON for a trained checkpoint.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference verification suite.
    Gradcheck {
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset or graph.
    Gen {
        #[arg(long, value_enum)]
        kind: GenKindArg,
        /// Nodes (per cycle for disjoint-cycles).
        #[arg(long, default_value_t = 60)]
        n: usize,
        /// Blocks (sbm).
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        /// Within-block edge probability (sbm).
        #[arg(long, default_value_t = 0.3)]
        p_in: f64,
        /// Cross-block edge probability (sbm).
        #[arg(long, default_value_t = 0.02)]
        p_out: f64,
        /// Feature noise sigma (sbm).
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        /// Cycle count (disjoint-cycles).
        #[arg(long, default_value_t = 2)]
        count: usize,
        /// Skip length (csl).
        #[arg(long, default_value_t = 2)]
        skip: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the local and global channels across doubling graph sizes.
    Bench {
        #[arg(long, default_value_t = 64)]
        min_n: usize,
        #[arg(long, default_value_t = 512)]
        max_n: usize,
        /// Average degree (edges scale linearly with nodes).
        #[arg(long, default_value_t = 4)]
        avg_degree: usize,
        /// Timing repetitions per size (median reported).
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "node")]
    task: TaskArg,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Receptive field K (also the encoded SE/PE widths and top-k default).
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Attribute width d.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, value_enum, default_value = "topk")]
    sample: SampleArg,
    /// Top-k sampling cardinality (defaults to K).
    #[arg(long)]
    kg: Option<usize>,
    /// Threshold-sampling tau in (0,1); defaults to 2/#candidates per row.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "full")]
    ablation: AblationArg,
    #[arg(long, value_enum, default_value = "jaccard")]
    pe: PeArg,
    #[arg(long, value_enum, default_value = "rwse")]
    se: SeArg,
    /// Jaccard bandwidth.
    #[arg(long, default_value_t = 1.0)]
    h: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = false)]
    residual: bool,
    /// Checkpoint output path.
    #[arg(long)]
    ckpt: PathBuf,
}

struct CliError {
    code: i32,
    msg: String,
}

impl From<DegtaError> for CliError {
    fn from(e: DegtaError) -> CliError {
        let code = match e {
            DegtaError::NonFinite(_) | DegtaError::EigenNoConvergence { .. } => 3,
            _ => 2,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) =>
        {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprintln!("ERROR 1: {e}");
            return 1;
        }
    };
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.code, e.msg);
            e.code
        }
    }
}

fn load_any_graph(dir: &Path) -> Result<Graph, DegtaError> {
    match load_node_dataset(dir) {
        Ok(ds) => Ok(ds.graph),
        Err(_) => load_graph(dir),
    }
}

fn matrix_csv(m: &degta::linalg::Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Encode {
            data,
            pe,
            se,
            k,
            h,
            out,
        } => {
            let g = load_any_graph(&data)?;
            let enc = EncodingSet::compute(&g, pe.into(), se.into(), k, h)?;
            std::fs::create_dir_all(&out).map_err(DegtaError::from)?;
            std::fs::write(out.join("P.csv"), matrix_csv(&enc.p)).map_err(DegtaError::from)?;
            std::fs::write(out.join("S.csv"), matrix_csv(&enc.s)).map_err(DegtaError::from)?;
            let meta = serde_json::json!({
                "pe": enc.pe_kind.to_string(),
                "se": enc.se_kind.to_string(),
                "k": enc.k,
                "h": h,
            });
            std::fs::write(
                out.join("meta.json"),
                serde_json::to_string_pretty(&meta).map_err(DegtaError::from)?,
            )
            .map_err(DegtaError::from)?;
            Ok(())
        }
        Command::Train(args) => train_cmd(args),
        Command::Eval { ckpt, data } => {
            let model = load_checkpoint(&ckpt)?;
            let (metric_name, value) = match model.task {
                Task::NodeClassification => {
                    let ds = load_node_dataset(&data)?;
                    let test = ds.graph.splits().unwrap().test.clone();
                    ("accuracy", eval_node(&model, &ds, &test)?)
                }
                Task::GraphClassification => {
                    let ds = load_graph_dataset(&data)?;
                    ("accuracy", eval_graph(&model, &ds, GraphSplit::Test)?)
                }
                Task::GraphRegression => {
                    let ds = load_graph_dataset(&data)?;
                    ("mae", eval_graph(&model, &ds, GraphSplit::Test)?)
                }
            };
            let json = serde_json::json!({
                "task": model.task,
                "split": "test",
                "metric": metric_name,
                "value": value,
            });
            println!("{json}");
            Ok(())
        }
        Command::ExportAttention { ckpt, data, out } => {
            let model = load_checkpoint(&ckpt)?;
            let g = load_any_graph(&data)?;
            let report = export_report(&model, &g)?;
            std::fs::write(
                &out,
                serde_json::to_string_pretty(&report).map_err(DegtaError::from)?,
            )
            .map_err(DegtaError::from)?;
            Ok(())
        }
        Command::Gradcheck { eps, seed } => {
            let reports = gradcheck_suite(eps, seed)?;
            let mut worst = 0.0f64;
            let mut failed = 0usize;
            for r in &reports {
                println!(
                    "{:45} max_rel_err {:10.3e}  (tolerance {:.0e})  {}",
                    r.name,
                    r.max_rel_err,
                    r.threshold,
                    if r.pass() { "PASS" } else { "FAIL" }
                );
                worst = worst.max(r.max_rel_err);
                if !r.pass() {
                    failed += 1;
                }
            }
            println!("overall max relative error: {worst:.3e}");
            if failed > 0 {
                return Err(CliError {
                    code: 3,
                    msg: format!("{failed} gradient check component(s) failed"),
                });
            }
            Ok(())
        }
        Command::Gen {
            kind,
            n,
            blocks,
            p_in,
            p_out,
            noise,
            count,
            skip,
            seed,
            out,
        } => {
            let kind = match kind {
                GenKindArg::Sbm => GenKind::Sbm {
                    n,
                    blocks,
                    p_in,
                    p_out,
                    noise,
                },
                GenKindArg::Cycle => GenKind::Cycle { n },
                GenKindArg::DisjointCycles => GenKind::DisjointCycles { n, count },
                GenKindArg::Csl => GenKind::Csl { n, skip },
            };
            match generate(&kind, seed)? {
                Generated::Node(ds) => save_node_dataset(&out, &ds)?,
                Generated::Graph(g) => save_graph(&out, &g)?,
            }
            Ok(())
        }
        Command::Bench {
            min_n,
            max_n,
            avg_degree,
            reps,
            seed,
        } => {
            let records = scaling_bench(min_n, max_n, avg_degree, reps, seed)?;
            println!("n,edges,local_ms,global_ms");
            for r in &records {
                println!("{},{},{:.3},{:.3}", r.n, r.edges, r.local_ms, r.global_ms);
            }
            for (i, (local, global)) in growth_ratios(&records).iter().enumerate() {
                println!(
                    "doubling {} -> {}: local x{:.2}, global x{:.2}",
                    records[i].n,
                    records[i + 1].n,
                    local,
                    global
                );
            }
            Ok(())
        }
    }
}

fn train_cmd(args: TrainArgs) -> Result<(), CliError> {
    let sampling = match args.sample {
        SampleArg::Topk => SamplingStrategy::TopK {
            k: args.kg.unwrap_or(args.k),
        },
        SampleArg::Threshold => SamplingStrategy::Threshold { tau: args.tau },
    };
    let config = DeGTAConfig {
        k: args.k,
        d: args.hidden,
        d_s: args.k,
        d_p: args.k,
        layers: args.layers,
        pe_kind: args.pe.into(),
        se_kind: args.se.into(),
        jaccard_bandwidth: args.h,
        sampling,
        learning_rate: args.lr,
        weight_decay: args.weight_decay,
        epochs: args.epochs,
        seed: args.seed,
        dropout: args.dropout,
        residual: args.residual,
        ablation: args.ablation.into(),
        ..DeGTAConfig::default()
    };
    config.validate()?;

    let outcome: TrainOutcome = match args.task {
        TaskArg::Node => {
            let ds = load_node_dataset(&args.data)?;
            let model = DeGTAModel::new_seeded(
                config,
                ds.graph.features().cols(),
                ds.num_classes(),
                Task::NodeClassification,
            )?;
            train_node(model, &ds)?
        }
        TaskArg::Graph => {
            let ds = load_graph_dataset(&args.data)?;
            let (task, outputs) = if ds.is_regression() {
                (Task::GraphRegression, 1)
            } else {
                (Task::GraphClassification, ds.num_classes())
            };
            let model = DeGTAModel::new_seeded(config, ds.feature_width(), outputs, task)?;
            train_graph(model, &ds)?
        }
    };

    save_checkpoint(&args.ckpt, &outcome.model)?;
    let mut csv = String::from("epoch,train_loss,val_metric\n");
    for rec in &outcome.history {
        let _ = writeln!(csv, "{},{},{}", rec.epoch, rec.train_loss, rec.val_metric);
    }
    let metrics_path = PathBuf::from(format!("{}.metrics.csv", args.ckpt.display()));
    std::fs::write(&metrics_path, csv).map_err(DegtaError::from)?;

    let summary = serde_json::json!({
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_metric": outcome.best_val,
        "checkpoint": args.ckpt.display().to_string(),
        "metrics": metrics_path.display().to_string(),
    });
    println!("{summary}");
    Ok(())
}
