use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sessgraph::config::RunConfig;
use sessgraph::evalkit::{render_structured, render_table, Comparison, MetricReport};
use sessgraph::pipeline::{self, Manifest, ReportFormat, Workspace};
use sessgraph::sessiondata::write_interactions;
use sessgraph::synth::{clustered_interactions, synthetic_schema, ClusterCorpusConfig};
use sessgraph::{Error, Result};

#[derive(Parser)]
#[command(name = "sessgraph", version, about = "Co-occurrence graph embeddings for session-based recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Structured,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `eval.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Sessionize, filter and split the interaction log.
    Preprocess(Common),
    /// Build the item co-occurrence graph from the training split.
    BuildGraph(Common),
    /// Train one embedding matrix per run.
    TrainEmbed(Common),
    /// Evaluate the nearest-neighbor recommender on the test split.
    EvalKnn(Common),
    /// Train and evaluate the next-item model.
    TrainNext(Common),
    /// Run two configurations end to end and test the difference.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Second configuration.
        #[arg(long)]
        against: PathBuf,
    },
    /// Evaluate the declared parameter lattice on the validation split.
    Grid(Common),
    #[command(hide = true)]
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "smoke")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.eval.master_seed = seed;
    }
    if let Some(n) = common.workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(cfg)
}

fn format_of(common: &Common) -> ReportFormat {
    match common.format {
        Format::Text => ReportFormat::Text,
        Format::Structured => ReportFormat::Structured,
    }
}

fn announce(ws: &Workspace, m: &Manifest) {
    let dir = ws.stage(match m.stage.as_str() {
        "build-graph" => "graph",
        "train-embed" => "embed",
        s => s,
    });
    println!("{}: wrote {} artifacts to {}", m.stage, m.outputs.len(), dir.display());
}

fn print_report(ws: &Workspace, stage: &str, format: ReportFormat) -> Result<()> {
    let text = std::fs::read_to_string(ws.stage(stage).join("report.json"))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let reports: Vec<MetricReport> =
        serde_json::from_value(doc["reports"].clone()).map_err(|e| Error::Format(e.to_string()))?;
    let refs: Vec<&MetricReport> = reports.iter().collect();
    let cmp: Option<Comparison> = serde_json::from_value(doc["comparison"].clone()).map_err(|e| Error::Format(e.to_string()))?;
    match format {
        ReportFormat::Text => print!("{}", render_table(&refs, cmp.as_ref())),
        ReportFormat::Structured => print!("{}", render_structured(&refs, cmp.as_ref())),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(c) => {
            let ws = Workspace::new(&c.out);
            announce(&ws, &pipeline::stage_preprocess(&load(&c)?, &ws)?);
        }
        Command::BuildGraph(c) => {
            let ws = Workspace::new(&c.out);
            announce(&ws, &pipeline::stage_build_graph(&load(&c)?, &ws)?);
        }
        Command::TrainEmbed(c) => {
            let ws = Workspace::new(&c.out);
            announce(&ws, &pipeline::stage_train_embed(&load(&c)?, &ws)?);
        }
        Command::EvalKnn(c) => {
            let ws = Workspace::new(&c.out);
            pipeline::stage_eval_knn(&load(&c)?, &ws, format_of(&c))?;
            print_report(&ws, "eval-knn", format_of(&c))?;
        }
        Command::TrainNext(c) => {
            let ws = Workspace::new(&c.out);
            pipeline::stage_train_next(&load(&c)?, &ws, format_of(&c))?;
            print_report(&ws, "train-next", format_of(&c))?;
        }
        Command::Compare { common, against } => {
            let a = load(&common)?;
            let mut b = RunConfig::load(&against)?;
            if let Some(seed) = common.seed {
                b.eval.master_seed = seed;
            }
            let ws = Workspace::new(&common.out);
            pipeline::stage_compare(&a, &b, &ws, format_of(&common))?;
            print_report(&ws, "compare", format_of(&common))?;
        }
        Command::Grid(c) => {
            let cfg = load(&c)?;
            let ws = Workspace::new(&c.out);
            let workers = c.workers.unwrap_or_else(rayon::current_num_threads);
            let (_, entries) = pipeline::stage_grid(&cfg, &ws, workers)?;
            print!("{}", std::fs::read_to_string(ws.stage("grid").join("summary.tsv"))?);
            if entries.is_empty() {
                eprintln!("grid: no parameters declared under [grid.params]");
            }
        }
        Command::GenSynthetic { out, preset, seed } => {
            let cfg = match preset.as_str() {
                "smoke" => ClusterCorpusConfig::smoke(seed),
                "clustered" => ClusterCorpusConfig::clustered(seed),
                other => return Err(Error::config(format!("unknown preset {other}"))),
            };
            let rows = clustered_interactions(&cfg);
            let w = BufWriter::new(File::create(&out)?);
            write_interactions(w, &synthetic_schema(), Default::default(), &rows)?;
            println!("wrote {} interactions to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::Config(errs) if errs.len() > 1 => {
                    eprintln!("configuration errors:");
                    for msg in errs {
                        eprintln!("  - {msg}");
                    }
                }
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
