use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sparc::config::ExperimentConfig;
use sparc::experiment::{run_batch, run_classify, run_cluster, run_embed, run_linkpred, run_sweep};
use sparc::graph::{import_linqs, Graph};
use sparc::{Result, SparcError};

/// Spectral embeddings for graphs whose new nodes arrive without edges.
#[derive(Parser)]
#[command(name = "sparc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config `out` key.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the spectral map on the whole graph and embed every node.
    Embed(Common),
    /// Cold-start node classification.
    Classify(Common),
    /// k-means clustering of training and cold nodes.
    Cluster(Common),
    /// Link prediction and neighborhood overlap for cold nodes.
    Linkpred(Common),
    /// Spectral against random minibatches.
    Batch(Common),
    /// Classification over several cold fractions, with the feature-token baseline.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated cold fractions; overrides the config `fractions` key.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Write the configured dataset (typically a synthetic one) as text files.
    Generate(Common),
    /// Convert a LINQS `.content` / `.cites` pair into the text dataset format.
    ImportLinqs {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        cites: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct StepLoss {
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct MapStep {
    step: usize,
    loss: f64,
    ortho_deviation: f64,
}

#[derive(Serialize)]
struct MethodStep<'a> {
    method: &'a str,
    step: usize,
    loss: f64,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(common: &Common, cold_fractions: &[f64]) -> Result<(ExperimentConfig, Graph)> {
    let cfg = load_config(common)?;
    let g = cfg.dataset.load()?;
    for &f in cold_fractions {
        cfg.validate_for_graph(&g, f)?;
    }
    fs::create_dir_all(&cfg.out)?;
    Ok((cfg, g))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, &text)?;
    print!("{text}");
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> SparcError {
    SparcError::Io(std::io::Error::other(e))
}

fn step_losses(losses: &[f64]) -> impl Iterator<Item = StepLoss> + '_ {
    losses.iter().enumerate().map(|(step, &loss)| StepLoss { step, loss })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Embed(c) => {
            let (cfg, g) = prepare(&c, &[])?;
            cfg.map.validate(g.node_count())?;
            let out = run_embed(&cfg, &g)?;
            out.map.save(&cfg.out.join("map.bin"))?;
            out.embedding.write_text(&cfg.out.join("embedding.txt"))?;
            let t = &out.trace;
            write_csv(
                &cfg.out.join("map_loss.csv"),
                (0..t.step_losses.len()).map(|step| MapStep {
                    step,
                    loss: t.step_losses[step],
                    ortho_deviation: t.ortho_deviations[step],
                }),
            )?;
            write_json(&cfg.out.join("summary.json"), &out.summary)
        }
        Command::Classify(c) => {
            let (cfg, g) = prepare(&c, &[])?;
            cfg.validate_for_graph(&g, cfg.cold_fraction)?;
            let out = run_classify(&cfg, &g)?;
            write_csv(&cfg.out.join("model_loss.csv"), step_losses(&out.model_losses))?;
            if let Some(t) = &out.map_trace {
                write_csv(&cfg.out.join("map_loss.csv"), step_losses(&t.step_losses))?;
            }
            write_json(&cfg.out.join("metrics.json"), &out.report)
        }
        Command::Cluster(c) => {
            let (cfg, g) = prepare(&c, &[])?;
            cfg.validate_for_graph(&g, cfg.cold_fraction)?;
            write_json(&cfg.out.join("metrics.json"), &run_cluster(&cfg, &g)?)
        }
        Command::Linkpred(c) => {
            let (cfg, g) = prepare(&c, &[])?;
            cfg.validate_for_graph(&g, cfg.cold_fraction)?;
            write_json(&cfg.out.join("metrics.json"), &run_linkpred(&cfg, &g)?)
        }
        Command::Batch(c) => {
            let (cfg, g) = prepare(&c, &[])?;
            cfg.map.validate(g.node_count())?;
            let out = run_batch(&cfg, &g)?;
            let rows = [("spectral", &out.spectral_losses), ("random", &out.random_losses)]
                .into_iter()
                .flat_map(|(method, losses)| {
                    losses.iter().enumerate().map(move |(step, &loss)| MethodStep { method, step, loss })
                });
            write_csv(&cfg.out.join("convergence.csv"), rows)?;
            write_json(&cfg.out.join("metrics.json"), &out.report)
        }
        Command::Sweep { common, fractions } => {
            let mut cfg = load_config(&common)?;
            if let Some(f) = fractions {
                cfg.fractions = f;
                cfg.validate()?;
            }
            let g = cfg.dataset.load()?;
            for &f in &cfg.fractions {
                cfg.validate_for_graph(&g, f)?;
            }
            fs::create_dir_all(&cfg.out)?;
            let rows = run_sweep(&cfg, &g)?;
            write_csv(&cfg.out.join("sweep.csv"), &rows)?;
            write_json(&cfg.out.join("sweep.json"), &rows)
        }
        Command::Generate(c) => {
            let cfg = load_config(&c)?;
            let g = cfg.dataset.load()?;
            g.write_dataset(&cfg.out)?;
            println!("wrote {} nodes, {} edges to {}", g.node_count(), g.edge_count(), cfg.out.display());
            Ok(())
        }
        Command::ImportLinqs { content, cites, out } => {
            let imp = import_linqs(&fs::read_to_string(&content)?, &fs::read_to_string(&cites)?)?;
            imp.graph.write_dataset(&out)?;
            fs::write(out.join("classes.txt"), imp.class_names.join("\n") + "\n")?;
            println!(
                "wrote {} nodes, {} edges, {} classes to {} ({} citations to unknown papers dropped)",
                imp.graph.node_count(),
                imp.graph.edge_count(),
                imp.class_names.len(),
                out.display(),
                imp.dropped_citations
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ SparcError::Config(_)) => {
            eprintln!("sparc: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("sparc: {e}");
            ExitCode::from(3)
        }
    }
}
