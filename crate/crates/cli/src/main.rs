// SPDX-License-Identifier: MIT OR Apache-2.0

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use probegraph_acquisition::concepts::Concept;
use probegraph_cli::config::LoadedConfig;
use probegraph_cli::pipeline::{json_bytes, Pipeline, SelectedFeatures, Stage, CONCEPTS};
use probegraph_core::graph::{parse_graph, GraphFormat};
use probegraph_core::selection::select_nodes_by_cumulative_influence;

#[derive(Parser)]
#[command(name = "probegraph", version, about = "Probe-prompted attribution-graph analysis")]
struct Cli {
    /// Log every decision and service call.
    #[arg(long, global = true)]
    debug: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration (YAML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory for artifacts and the manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Download or copy the attribution graph into the run directory.
    GraphFetch(RunArgs),
    /// Select features by cumulative influence.
    Select {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Standalone mode: graph file to select from.
        #[arg(long, conflicts_with = "config")]
        graph: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Run directory, or the output JSON file in standalone mode.
        #[arg(long)]
        out: PathBuf,
        /// Standalone mode: where to write the influence curve CSV.
        #[arg(long, requires = "graph")]
        curve: Option<PathBuf>,
    },
    /// Propose candidate concepts for the seed prompt.
    Concepts {
        #[command(flatten)]
        run: RunArgs,
        /// Accept every proposed concept.
        #[arg(long)]
        auto_accept: bool,
        /// Accept exactly these labels (comma separated) in the existing concept file.
        #[arg(long, value_delimiter = ',')]
        accept: Option<Vec<String>>,
    },
    /// Synthesize probe prompts from the accepted concepts.
    Probes(RunArgs),
    /// Measure activations of selected features on every probe.
    Measure(RunArgs),
    /// Build activation signatures.
    Signatures(RunArgs),
    /// Classify features and name supernodes.
    Classify(RunArgs),
    /// Score the graph and the pinned subgraph and export it.
    Subgraph(RunArgs),
    /// Compare the grouping with geometric baselines.
    Evaluate(RunArgs),
    /// Entity-swap transfer against the configured target circuit.
    Transfer(RunArgs),
    /// Serve the local HTTP facade for the run.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "127.0.0.1:8787")]
        addr: SocketAddr,
    },
    /// Run every stage that is not up to date.
    RunAll {
        #[command(flatten)]
        run: RunArgs,
        /// Rerun stages even when fresh.
        #[arg(long)]
        force: bool,
    },
}

fn open(run: &RunArgs) -> anyhow::Result<Pipeline> {
    let cfg = LoadedConfig::load(&run.config)?;
    Ok(Pipeline::open(cfg, &run.out)?)
}

fn stage(run: &RunArgs, st: Stage) -> anyhow::Result<()> {
    let mut p = open(run)?;
    p.run(st)?;
    println!("{st}: done");
    Ok(())
}

fn select_standalone(graph: &Path, tau: f64, out: &Path, curve: Option<&Path>) -> anyhow::Result<()> {
    let bytes = std::fs::read(graph).with_context(|| format!("reading {}", graph.display()))?;
    let g = parse_graph(&bytes, GraphFormat::Json)?;
    let sel = select_nodes_by_cumulative_influence(&g, tau)?;
    let out_file = SelectedFeatures {
        tau,
        n_selected: sel.selected.len(),
        n_features: sel.cumulative_curve.len(),
        cumulative_fraction: sel.cumulative_curve[sel.selected.len() - 1].cumulative_fraction,
        selected: sel.selected.clone(),
    };
    std::fs::write(out, json_bytes(&out_file))?;
    if let Some(c) = curve {
        sel.write_curve_csv(std::fs::File::create(c)?)?;
    }
    println!("selected {} of {} features at tau {tau}", out_file.n_selected, out_file.n_features);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GraphFetch(r) => stage(&r, Stage::GraphFetch),
        Command::Select { config, graph, tau, out, curve } => match (graph, config) {
            (Some(g), _) => select_standalone(&g, tau.unwrap_or(0.8), &out, curve.as_deref()),
            (None, Some(config)) => {
                let mut cfg = LoadedConfig::load(&config)?;
                if let Some(t) = tau {
                    cfg.config.tau = t;
                    cfg = LoadedConfig::from_config(cfg.config, cfg.base_dir)?;
                }
                let mut p = Pipeline::open(cfg, &out)?;
                p.run(Stage::Select)?;
                println!("select: done");
                Ok(())
            }
            (None, None) => anyhow::bail!("select needs --config or --graph"),
        },
        Command::Concepts { run, auto_accept, accept } => {
            let mut cfg = LoadedConfig::load(&run.config)?;
            match accept {
                Some(labels) => {
                    let mut p = Pipeline::open(cfg, &run.out)?;
                    let bytes = std::fs::read(p.path(CONCEPTS)).context("concepts missing")?;
                    let mut concepts: Vec<Concept> = serde_json::from_slice(&bytes)?;
                    let wanted: Vec<String> = labels.iter().map(|l| l.trim().to_lowercase()).collect();
                    for c in &mut concepts {
                        c.accepted = wanted.contains(&c.label.to_lowercase());
                    }
                    if !concepts.iter().any(|c| c.accepted) {
                        anyhow::bail!("empty accepted set");
                    }
                    p.replace_outputs(Stage::Concepts, &[(CONCEPTS, json_bytes(&concepts))])?;
                    println!("concepts: {} accepted", concepts.iter().filter(|c| c.accepted).count());
                }
                None => {
                    if auto_accept {
                        cfg.config.concepts.auto_accept = true;
                        cfg = LoadedConfig::from_config(cfg.config, cfg.base_dir)?;
                    }
                    let mut p = Pipeline::open(cfg, &run.out)?;
                    p.run(Stage::Concepts)?;
                    println!("concepts: done");
                }
            }
            Ok(())
        }
        Command::Probes(r) => stage(&r, Stage::Probes),
        Command::Measure(r) => stage(&r, Stage::Measure),
        Command::Signatures(r) => stage(&r, Stage::Signatures),
        Command::Classify(r) => stage(&r, Stage::Classify),
        Command::Subgraph(r) => stage(&r, Stage::Subgraph),
        Command::Evaluate(r) => stage(&r, Stage::Evaluate),
        Command::Transfer(r) => stage(&r, Stage::Transfer),
        Command::Serve { run, addr } => {
            let p = open(&run)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(probegraph_cli::server::serve(p, addr))?;
            Ok(())
        }
        Command::RunAll { run, force } => {
            let mut p = open(&run)?;
            let ran = p.run_all(force)?;
            let names: Vec<&str> = ran.iter().map(|s| s.name()).collect();
            println!("ran: {}", if names.is_empty() { "nothing (all fresh)".into() } else { names.join(", ") });
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = if cli.debug { "debug" } else { "info" };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| filter.into()))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
