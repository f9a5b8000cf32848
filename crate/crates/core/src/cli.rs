//! The `law` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::ablation::{ablation_run, desk_config, runs_csv, suite_rows, summary_csv, SUITES};
use crate::eval::closed_loop::{closed_loop_eval, ExpertDriver, ModelDriver, Policy, RoutesConfig};
use crate::eval::open_loop::open_loop_eval;
use crate::eval::Dataset;
use crate::gradcheck_suite;
use crate::sim::episode::DatasetConfig;
use crate::trainer::{train_run_with, write_metrics, Checkpoint, ExperimentConfig, LawModel};

#[derive(Parser, Debug)]
#[command(
    name = "law",
    version,
    about = "Latent world model training and evaluation on a driving micro-simulator"
)]
struct Cli {
    /// Overrides the seed of every config read by the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate expert episodes and write a dataset file.
    GenData {
        /// Experiment config with a `dataset` section, or a bare dataset config.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file; defaults to the config's `dataset_path`, or
        /// in-memory generation from its `dataset` section.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Print every metrics record.
        #[arg(long)]
        verbose: bool,
    },
    /// Open-loop L2 and collision rate on the held-out episodes.
    EvalOpen {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop driving score on seeded routes.
    EvalClosed(EvalClosed),
    /// Train and evaluate every row of an ablation suite.
    Ablate {
        /// One of inputs, horizon, architecture, autoregressive, multiframe.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Base experiment config; defaults to the desk-scale settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Write the row configs only.
        #[arg(long)]
        dry_run: bool,
    },
    /// Finite-difference gradient checks of every operation and block.
    Gradcheck,
}

#[derive(Args, Debug)]
struct EvalClosed {
    /// Checkpoint to drive with; omit together with `--expert`.
    #[arg(long, required_unless_present = "expert")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    routes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Drive the privileged expert instead of a model.
    #[arg(long, conflicts_with = "ckpt")]
    expert: bool,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let mut dc = match serde_json::from_str::<DatasetConfig>(&text) {
        Ok(d) => d,
        Err(_) => ExperimentConfig::from_json(&text)?
            .dataset
            .ok_or_else(|| Error::Config(format!("{} has no dataset section", config.display())))?,
    };
    if let Some(s) = seed {
        dc.seed = s;
    }
    let (data, violations) = Dataset::generate(&dc)?;
    data.save(out)?;
    let frames: usize = data.episodes.iter().map(|e| e.len()).sum();
    println!(
        "wrote {} episodes ({frames} frames, {violations} regenerated) to {}",
        data.episodes.len(),
        out.display()
    );
    Ok(())
}

fn dataset_for(config: &ExperimentConfig, data: Option<&Path>) -> Result<Dataset> {
    if let Some(p) = data.or(config.dataset_path.as_deref().map(Path::new)) {
        return Dataset::load(p);
    }
    match &config.dataset {
        Some(d) => Ok(Dataset::generate(d)?.0),
        None => Err(Error::usage(
            "no dataset: pass --data or set dataset_path or dataset in the config",
        )),
    }
}

fn train(
    config: &Path,
    data: Option<&Path>,
    out: &Path,
    metrics: Option<&Path>,
    verbose: bool,
    seed: Option<u64>,
) -> Result<()> {
    let config = load_config(config, seed)?;
    let dataset = dataset_for(&config, data)?;
    let result = train_run_with(&config, &dataset.episodes, |r| {
        if verbose {
            println!("{}", r.csv_line());
        }
    })?;
    result.checkpoint.save(out)?;
    let metrics_path = metrics
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("csv"));
    write_metrics(&metrics_path, &result.metrics)?;
    let last = result
        .metrics
        .last()
        .map(|m| m.losses.total)
        .unwrap_or(f64::NAN);
    println!(
        "trained {} steps (final loss {last:.5}, {} frames without context) -> {}, {}",
        result.checkpoint.step,
        result.skipped,
        out.display(),
        metrics_path.display()
    );
    Ok(())
}

fn eval_open(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let c = Checkpoint::load(ckpt)?;
    let model = LawModel::new(&c.config)?;
    c.check_fits(&c.config)?;
    let dataset = Dataset::load(data)?;
    let r = open_loop_eval(&model, &c.params, &dataset.episodes)?;
    write(out, &r.to_csv())?;
    println!(
        "L2 {:.4} {:.4} {:.4} avg {:.4} | collision {:.4} {:.4} {:.4} avg {:.4} | {} frames, {} skipped",
        r.l2_at[0],
        r.l2_at[1],
        r.l2_at[2],
        r.l2_avg,
        r.collision_at[0],
        r.collision_at[1],
        r.collision_at[2],
        r.collision_avg,
        r.samples,
        r.skipped
    );
    Ok(())
}

fn eval_closed(args: &EvalClosed, seed: Option<u64>) -> Result<()> {
    let mut routes = RoutesConfig::load(&args.routes)?;
    if let Some(s) = seed {
        let n = routes.seeds.len() as u64;
        routes.seeds = (s..s + n).collect();
    }
    let checkpoint;
    let model;
    let mut expert = ExpertDriver::default();
    let mut driver;
    let policy: &mut dyn Policy = match &args.ckpt {
        Some(path) => {
            checkpoint = Checkpoint::load(path)?;
            model = LawModel::new(&checkpoint.config)?;
            checkpoint.check_fits(&checkpoint.config)?;
            driver = ModelDriver {
                model: &model,
                store: &checkpoint.params,
            };
            &mut driver
        }
        None => &mut expert,
    };
    let r = closed_loop_eval(policy, &routes)?;
    write(&args.out, &r.to_csv())?;
    println!(
        "RC {:.4} IS {:.4} DS {:.4} over {} routes ({} collisions, {} off-road)",
        r.route_completion,
        r.infraction_score,
        r.driving_score,
        r.routes.len(),
        r.collisions,
        r.offroad
    );
    Ok(())
}

fn ablate(
    suite: &str,
    out: &Path,
    config: Option<&Path>,
    seeds: u64,
    dry_run: bool,
    seed: Option<u64>,
) -> Result<()> {
    if !SUITES.contains(&suite) {
        return Err(Error::usage(format!(
            "unknown suite '{suite}', expected one of {}",
            SUITES.join(", ")
        )));
    }
    let base = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => desk_config(),
    };
    let rows = suite_rows(suite, &base)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (_, c) in &rows {
        let pretty = serde_json::to_string_pretty(c)?;
        write(&out.join(format!("{}.json", c.name)), &(pretty + "\n"))?;
    }
    if dry_run {
        println!("wrote {} row configs to {}", rows.len(), out.display());
        return Ok(());
    }
    let dc = base
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("the base config needs a dataset section".into()))?;
    let (data, _) = Dataset::generate(&dc)?;
    let first = seed.unwrap_or(base.seed);
    let seed_list: Vec<u64> = (first..first + seeds).collect();
    let results = ablation_run(&rows, &seed_list, &data.episodes, |row, s, r| match r {
        Ok(m) => println!(
            "{suite}/{row} seed {s}: L2 avg {:.4}, collision avg {:.4}{} ({:.0} s)",
            m.open_loop.l2_avg,
            m.open_loop.collision_avg,
            m.latent_mse
                .map(|l| format!(", latent MSE {l:.5}"))
                .unwrap_or_default(),
            m.seconds
        ),
        Err(e) => eprintln!("{suite}/{row} seed {s}: failed: {e}"),
    });
    write(&out.join("summary.csv"), &summary_csv(&results))?;
    write(&out.join("runs.csv"), &runs_csv(&results))?;
    println!("wrote {}", out.join("summary.csv").display());
    Ok(())
}

fn gradcheck() -> Result<bool> {
    let lines = gradcheck_suite::run()?;
    let mut ok = true;
    for l in &lines {
        println!(
            "{:<36} max rel err {:.3e} over {:>4} entries  {}",
            l.name,
            l.max_rel_err,
            l.components,
            if l.passed() { "ok" } else { "FAIL" }
        );
        ok &= l.passed();
    }
    Ok(ok)
}

/// Parses `args` and runs the command. Returns the process exit code: 0 on
/// success, 1 on usage errors, 2 on runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let seed = cli.seed;
    let result = match &cli.command {
        Command::GenData { config, out } => gen_data(config, out, seed),
        Command::Train {
            config,
            data,
            out,
            metrics,
            verbose,
        } => train(
            config,
            data.as_deref(),
            out,
            metrics.as_deref(),
            *verbose,
            seed,
        ),
        Command::EvalOpen { ckpt, data, out } => eval_open(ckpt, data, out),
        Command::EvalClosed(args) => eval_closed(args, seed),
        Command::Ablate {
            suite,
            out,
            config,
            seeds,
            dry_run,
        } => ablate(suite, out, config.as_deref(), *seeds, *dry_run, seed),
        Command::Gradcheck => match gradcheck() {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: relative error above tolerance");
                return 2;
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(Error::Usage(msg)) if msg.starts_with("unknown suite") => {
            eprintln!("error: {msg}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
