use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use emvlab::accessibility::{run_access, write_access_outputs, AccessParams};
use emvlab::dynamics::write_metrics_csv;
use emvlab::harness::{
    curve_from_csv, emit_learning_plot, run_matrix, sim_run, worker_count, MatrixSpec, Scenario,
    ScenarioRef, TrainJob,
};
use emvlab::network::{save_network, GridSpec};

/// Emergency-vehicle traffic laboratory.
#[derive(Parser)]
#[command(name = "emvlab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Network generation.
    #[command(subcommand)]
    Net(NetCmd),
    /// Single-scenario simulation.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Train EMVLight agents.
    Train(TrainArgs),
    /// Run a controller × router benchmark matrix.
    Eval(EvalArgs),
    /// Accessibility analysis.
    #[command(subcommand)]
    Access(AccessCmd),
    /// Reporting utilities.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Subcommand)]
enum NetCmd {
    /// Write a rectangular grid network as JSON.
    Gen(NetGen),
}

#[derive(Args)]
struct NetGen {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    /// Link length in metres.
    #[arg(long = "len", default_value_t = 200.0)]
    len: f64,
    #[arg(long, default_value_t = 2)]
    lanes: usize,
    /// Emergency capacity as a fraction of jam capacity.
    #[arg(long, default_value_t = 0.0)]
    ec: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Subcommand)]
enum SimCmd {
    /// Simulate every repetition of a scenario.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long, default_value = "out/sim")]
        output: PathBuf,
    },
    /// Print a builtin scenario (`grid3x3-smoke`, `grid5x5-config1`..`4`) as JSON.
    Template {
        name: String,
        #[arg(long, default_value_t = 0)]
        od_seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(short, long, default_value = "out/train")]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(short, long, default_value = "out/eval")]
    output: PathBuf,
}

#[derive(Subcommand)]
enum AccessCmd {
    /// Compute adjusted travel times, coverage curves and vulnerable nodes.
    Run {
        #[arg(long)]
        graph: PathBuf,
        /// Intersection delay coefficient in s·m².
        #[arg(long, default_value_t = 15.0)]
        alpha: f64,
        /// Coverage threshold in seconds.
        #[arg(long, default_value_t = 240.0)]
        tau: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Render CSV columns as an SVG line chart.
    Plot {
        /// CSV inputs, optionally suffixed with `=label`.
        #[arg(short, long = "input", required = true)]
        inputs: Vec<String>,
        #[arg(long, default_value = "episode")]
        x: String,
        #[arg(long, default_value = "mean_reward")]
        y: String,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn base_dir(config: &Path) -> PathBuf {
    config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Net(NetCmd::Gen(a)) => {
            let spec = GridSpec {
                link_length: a.len,
                lanes: a.lanes,
                ec_ratio: a.ec,
                ..GridSpec::new(a.rows, a.cols)
            };
            let net = spec.build()?;
            save_network(&net, &a.output)
                .with_context(|| format!("writing {}", a.output.display()))?;
            println!(
                "{} nodes, {} links -> {}",
                net.node_count(),
                net.link_count(),
                a.output.display()
            );
        }
        Cmd::Sim(SimCmd::Run { config, output }) => {
            let scenario = Scenario::load(&config)?;
            let rows = sim_run(&scenario, &base_dir(&config), &output)?;
            write_metrics_csv(&rows, std::io::stdout().lock())?;
        }
        Cmd::Sim(SimCmd::Template { name, od_seed }) => {
            let (scenario, _) = ScenarioRef::Builtin {
                builtin: name,
                od_seed,
            }
            .load(Path::new("."))?;
            println!("{}", serde_json::to_string_pretty(&scenario)?);
        }
        Cmd::Train(a) => {
            let job = TrainJob::load(&a.config)?;
            let out = job.run(&base_dir(&a.config), &a.output)?;
            if let (Some(first), Some(last)) = (out.curve.first(), out.curve.last()) {
                println!(
                    "{} episodes, mean reward {:.4} -> {:.4}; policy in {}",
                    out.curve.len(),
                    first.mean_reward,
                    last.mean_reward,
                    a.output.join("policy.json").display()
                );
            }
        }
        Cmd::Eval(a) => {
            let spec = MatrixSpec::load(&a.matrix)?;
            eprintln!("workers: {}", worker_count());
            let table = run_matrix(&spec, &base_dir(&a.matrix))?;
            std::fs::create_dir_all(&a.output)?;
            table.write_summary_csv(BufWriter::new(File::create(a.output.join("summary.csv"))?))?;
            write_metrics_csv(
                &table.metrics_rows(),
                BufWriter::new(File::create(a.output.join("metrics.csv"))?),
            )?;
            let text = table.to_text();
            std::fs::write(a.output.join("table.txt"), &text)?;
            print!("{text}");
        }
        Cmd::Access(AccessCmd::Run {
            graph,
            alpha,
            tau,
            output,
        }) => {
            let params = AccessParams::new(alpha, tau);
            let (g, res) = run_access(&graph, &params)?;
            write_access_outputs(&g, &res, &output)?;
            println!("{} nodes -> {}", g.nodes.len(), output.display());
        }
        Cmd::Report(ReportCmd::Plot {
            inputs,
            x,
            y,
            title,
            output,
        }) => {
            let mut curves = Vec::new();
            for spec in &inputs {
                let (path, label) = match spec.split_once('=') {
                    Some((p, l)) => (PathBuf::from(p), l.to_string()),
                    None => {
                        let p = PathBuf::from(spec);
                        let l = p
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| spec.clone());
                        (p, l)
                    }
                };
                curves.push(curve_from_csv(&path, &x, &y, &label)?);
            }
            if curves.iter().all(|c| c.points.is_empty()) {
                bail!("no numeric ({x}, {y}) pairs in the inputs");
            }
            let svg = emit_learning_plot(&curves, &title, &x, &y)?;
            if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&output, svg)?;
        }
    }
    Ok(())
}
