use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use featbench::featfind::Method;
use featbench::taskgen::sample_pair;
use featbench_cli::config::load_task;
use featbench_cli::heatmap::{emit_heatmap, HeatmapSpec};
use featbench_cli::report::{grid_from_sites, read_csv, SiteRow};
use featbench_cli::{run_benchmark, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "bench",
    version,
    about = "Causal evaluation of feature directions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the benchmark sweep.
    Run(RunArgs),
    /// Print sampled pairs of a task as TSV.
    Generate {
        /// Bundled task name or spec file.
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render one task/method grid from a site CSV.
    Heatmap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        method: String,
        /// Needed when the CSV holds several checkpoints.
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags override values from `--config`.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<PathBuf>>,
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    train_pairs: Option<usize>,
    #[arg(long)]
    eval_pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    probe_l2: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn into_config(self) -> featbench_cli::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.model_dir {
            cfg.model_dir = v;
        }
        if let Some(v) = self.checkpoints {
            cfg.checkpoints = v;
        }
        if let Some(v) = self.tasks {
            cfg.tasks = v;
        }
        if let Some(v) = self.methods {
            cfg.methods = v;
        }
        if let Some(v) = self.train_pairs {
            cfg.n_train_pairs = v;
        }
        if let Some(v) = self.eval_pairs {
            cfg.n_eval_pairs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.data_seed {
            cfg.data_seed = v;
        }
        if let Some(v) = self.probe_l2 {
            cfg.probe_l2 = Some(v);
        }
        if let Some(v) = self.out {
            cfg.out_dir = v;
        }
        if let Some(v) = self.jobs {
            cfg.jobs = v;
        }
        Ok(cfg)
    }
}

fn tsv_field(s: &str) -> String {
    s.replace(['\t', '\n'], " ")
}

fn run(cli: Cli) -> featbench_cli::Result<bool> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.into_config()?;
            let report = run_benchmark(&cfg)?;
            for f in &report.failures {
                log::error!(
                    "failed: {} {} {} {:?} {}: {}",
                    f.checkpoint,
                    f.task,
                    f.method,
                    f.layer,
                    f.region,
                    f.error
                );
            }
            println!(
                "{} summary rows, {} site rows, {} failures, {} skipped tasks -> {}",
                report.summary.len(),
                report.sites.len(),
                report.failures.len(),
                report.skipped.len(),
                cfg.out_dir.display()
            );
            Ok(!report.failed())
        }
        Command::Generate { task, n, seed } => {
            let template = load_task(&task)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            println!("base\tsource\tbase_label\tsource_label\tbase_type\tsource_type");
            for _ in 0..n {
                let e = sample_pair(&template, &mut rng);
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    tsv_field(&e.base),
                    tsv_field(&e.source),
                    tsv_field(&e.base_label),
                    tsv_field(&e.source_label),
                    e.base_type,
                    e.source_type
                );
            }
            Ok(true)
        }
        Command::Heatmap {
            input,
            task,
            method,
            checkpoint,
            out,
        } => {
            let rows: Vec<SiteRow> = read_csv(&input)?;
            let grid = grid_from_sites(&rows, &task, &method, checkpoint.as_deref())?;
            let spec = HeatmapSpec::for_grid(grid, format!("{task} / {method}"))?;
            emit_heatmap(&spec, &out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
