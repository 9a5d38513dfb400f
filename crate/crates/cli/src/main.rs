use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acl::data::data_dir;
use acl::harness::{
    replay_sweep, run, run_ablation_grid, write_ablation_csv, write_sweep_csv, EpochLog,
    ExperimentConfig, RunRecord, TaskSource,
};
use acl::metrics::{acc, bwt, ResultMatrix};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod output;
mod settings;

use output::{report_rows, table, write_rows_csv, write_run, Row};
use settings::ConfigError;

#[derive(Parser)]
#[command(name = "acl", version, about = "Continual learning experiments with adversarially trained shared features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method once per seed.
    Train(RunArgs),
    /// Run the eleven-row component ablation.
    Ablate(RunArgs),
    /// Repeat the run for several replay sizes.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Samples stored per class, comma separated; 0 disables replay.
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        samples: Vec<usize>,
    },
    /// Recompute ACC and BWT from a saved accuracy matrix.
    Metrics {
        #[arg(long)]
        r_matrix: PathBuf,
    },
    /// Merge completed runs into one comparison table.
    Report {
        /// Output directories (searched recursively for run.json).
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the merged table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set lr.shared=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seeds, comma separated; replaces the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Directory holding the MNIST IDX files (else ACL_DATA_DIR, else ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut overrides = self.overrides.clone();
        if let Some(seeds) = &self.seeds {
            overrides.push(format!("seeds={}", serde_json::to_string(seeds).expect("seed list")));
        }
        settings::load(self.config.as_deref(), &overrides)
    }

    fn source(&self, config: &ExperimentConfig) -> Result<TaskSource> {
        let dir = data_dir(self.data_dir.as_deref());
        TaskSource::for_config(config, &dir).with_context(|| format!("loading data from {}", dir.display()))
    }

    fn progress(&self) -> impl FnMut(&EpochLog) + '_ {
        move |l: &EpochLog| {
            if !self.quiet {
                eprintln!(
                    "task {} epoch {} loss {:.4} valid {} lr {:.4} ({:.1}s)",
                    l.task,
                    l.epoch,
                    l.train_loss,
                    l.valid_loss.map_or("-".into(), |v| format!("{v:.4}")),
                    l.lr,
                    l.seconds
                );
            }
        }
    }
}

fn write_aggregate(out: &Path, name: &str, recs: &[RunRecord]) -> Result<String> {
    let text = table(&[Row::from_records(recs)]);
    let dir = out.join(name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(output::SUMMARY), &text)?;
    Ok(text)
}

fn train(args: &RunArgs) -> Result<()> {
    let config = args.config()?;
    let source = args.source(&config)?;
    let mut progress = args.progress();
    let mut recs = Vec::new();
    for &seed in &config.seeds {
        let tasks = source.tasks(&config, seed)?;
        let rec = run(&config, &tasks, seed, &mut progress).with_context(|| format!("seed {seed}"))?;
        let dir = write_run(&args.out, &rec)?;
        eprintln!("wrote {}", dir.display());
        recs.push(rec);
    }
    print!("{}", write_aggregate(&args.out, &config.name, &recs)?);
    Ok(())
}

fn ablate(args: &RunArgs) -> Result<()> {
    let config = args.config()?;
    let source = args.source(&config)?;
    let rows = run_ablation_grid(&config, &source, &mut args.progress())?;
    let dir = args.out.join(&config.name);
    fs::create_dir_all(&dir)?;
    for row in &rows {
        for rec in &row.records {
            let mut rec = rec.clone();
            rec.experiment = format!("{}/row{:02}", config.name, row.row);
            write_run(&args.out, &rec)?;
        }
    }
    write_ablation_csv(&rows, fs::File::create(dir.join("ablation.csv"))?)?;
    let mut text = format!("{:>3}  {:<16}  {:>14}  {:>14}\n", "#", "components", "ACC%", "BWT%");
    for r in &rows {
        let bwt = if r.structural_zero { "Zero".into() } else { r.bwt.percent() };
        text += &format!("{:>3}  {:<16}  {:>14}  {:>14}\n", r.row, r.switches.label(), r.acc.percent(), bwt);
    }
    fs::write(dir.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn sweep(args: &RunArgs, samples: &[usize]) -> Result<()> {
    let config = args.config()?;
    let source = args.source(&config)?;
    let rows = replay_sweep(&config, samples, &source, &mut args.progress())?;
    let dir = args.out.join(&config.name);
    fs::create_dir_all(&dir)?;
    for row in &rows {
        for rec in &row.records {
            let mut rec = rec.clone();
            rec.experiment = format!("{}/s{}", config.name, row.samples_per_class);
            write_run(&args.out, &rec)?;
        }
    }
    write_sweep_csv(&rows, fs::File::create(dir.join("sweep.csv"))?)?;
    let mut text = format!("{:>17}  {:>14}  {:>14}\n", "samples per class", "ACC%", "BWT%");
    for r in &rows {
        text += &format!("{:>17}  {:>14}  {:>14}\n", r.samples_per_class, r.acc.percent(), r.bwt.percent());
    }
    fs::write(dir.join("sweep.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn metrics(path: &Path) -> Result<()> {
    let r = ResultMatrix::read_csv(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?)?;
    println!("tasks {}", r.tasks());
    println!("acc {:?}", acc(&r)?);
    match bwt(&r) {
        Ok(b) => println!("bwt {b:?}"),
        Err(acl::Error::UndefinedMetric(_)) => println!("bwt undefined"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn report(dirs: &[PathBuf], csv: Option<&Path>) -> Result<()> {
    let rows = report_rows(dirs)?;
    print!("{}", table(&rows));
    if let Some(p) = csv {
        write_rows_csv(&rows, fs::File::create(p)?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep { run, samples } => sweep(run, samples),
        Command::Metrics { r_matrix } => metrics(r_matrix),
        Command::Report { dirs, csv } => report(dirs, csv.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
