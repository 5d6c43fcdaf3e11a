use clap::{Parser, Subcommand};
use patchflow::cli::{self, Overrides};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "patchflow", version, about = "Lagrangian flow-map solver for nonlinear transport")]
struct Cli {
    /// Output directory (overrides config and PATCHFLOW_OUTPUT)
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Size of the worker thread pool (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// RNG seed override
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured scenario to t_end
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Resume from an earlier snapshot instead of the configured initial data
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the self-check table for the configured kernel and dimension
    Verify {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print homogeneity, sphere-integral and divergence data for a kernel
    KernelInfo {
        name: String,
        n: usize,
        #[arg(long)]
        a: Option<f64>,
        #[arg(long)]
        b: Option<f64>,
    },
    /// Convert a diagnostics CSV into a plot-ready long-format table
    Report {
        csv: PathBuf,
        /// Write the table here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("patchflow: thread pool: {e}");
            std::process::exit(cli::EXIT_CONFIG);
        }
    }
    let ov = Overrides {
        output: cli.output.clone(),
        seed: cli.seed,
    };
    let code = match &cli.command {
        Command::Simulate { config, resume } => {
            cli::cmd_simulate(config, &ov, resume.as_deref())
        }
        Command::Verify { config } => cli::cmd_verify(config, &ov),
        Command::KernelInfo { name, n, a, b } => {
            cli::cmd_kernel_info(name, *n, *a, *b, cli.output.as_deref())
        }
        Command::Report { csv, out } => {
            let out = out.clone().or_else(|| cli.output.clone().map(|d| d.join("report.csv")));
            cli::cmd_report(csv, out.as_deref())
        }
    };
    std::process::exit(code);
}
