use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dkmpp::checkpoint::Checkpoint;
use dkmpp::config::{RunConfig, SweepAxis, SweepSpec};
use dkmpp::estimators::EstimatorKind;
use dkmpp::experiment::{fit, output_dir, run_experiment, Dataset};
use dkmpp::metrics::{evaluate, export_intensity_grid};
use dkmpp::simulator::{generate_dataset, SyntheticScenario};

#[derive(Parser)]
#[command(name = "dkmpp", version, about = "Deep kernel mixture point processes")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate sequences from the synthetic scenario.
    Simulate {
        /// Scenario TOML; defaults to the built-in scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one model and write its checkpoint, history and test metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; simulated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `estimator.kind`.
        #[arg(long)]
        estimator: Option<EstimatorKind>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1000)]
        mc: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Subset::All)]
        split: Subset,
        /// Train/validation/test ratios used with `--split test`.
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.4,0.1")]
        ratios: Vec<f64>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the curves and sweep described by a config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `sweep.axis` (representative_points, layers, batch_size).
        #[arg(long)]
        axis: Option<SweepAxis>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Write the intensity on a spatial grid at time `t`.
    ExportGrid {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        t: f64,
        /// Grid resolution as `N1xN2`.
        #[arg(long, default_value = "50x50")]
        resolution: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    All,
    Test,
}

fn load_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    Ok(match dir {
        Some(d) => Dataset::load(d, &cfg.scenario.window)?,
        None => Dataset::simulate(&cfg.scenario, cfg.data.n_sequences, cfg.data.seed)?,
    })
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| dkmpp::Error::InvalidArgument(format!("resolution '{s}' is not of the form N1xN2")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| dkmpp::Error::InvalidArgument(format!("bad resolution component '{v}'")))
    };
    Ok((parse(a)?, parse(b)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| dkmpp::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { scenario, n, seed, out } => {
            let sc = match scenario {
                Some(p) => SyntheticScenario::load(p)?,
                None => SyntheticScenario::default(),
            };
            let (data, _) = generate_dataset(&sc, n, seed, Some(&out))?;
            println!(
                "wrote {} sequences ({} events, {:.2} per sequence) to {}",
                data.len(),
                data.n_events(),
                data.mean_events(),
                out.display()
            );
        }
        Command::Train { config, data, out, estimator } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(k) = estimator {
                cfg.estimator.kind = k;
            }
            let out = out.unwrap_or_else(|| output_dir(&cfg, Path::new("out")));
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let data = load_data(&cfg, data.as_deref())?;
            let splits = data.split(cfg.data.split)?;
            let o = fit(&cfg, &cfg.estimator, &data, &splits)?;
            Checkpoint::from_any(o.model, data.window).save(out.join("model.ckpt"))?;
            o.history.write_csv(out.join("history.csv"))?;
            write_text(&out.join("metrics.json"), &o.metrics.to_json()?)?;
            println!(
                "{}: tll {:.4} acc {:.4} rmse {} best epoch {} ({:.1}s)",
                o.metrics.model,
                o.metrics.tll,
                o.metrics.acc,
                o.metrics.rmse.map_or("n/a".into(), |r| format!("{r:.4}")),
                o.history.best_epoch,
                o.train_seconds
            );
        }
        Command::Eval { model, data, mc, seed, split, ratios, out } => {
            let ck = Checkpoint::load(&model)?;
            let data = Dataset::load(&data, ck.window())?;
            let set = match split {
                Subset::All => data.sequences.clone(),
                Subset::Test => {
                    let r: [f64; 3] = ratios
                        .as_slice()
                        .try_into()
                        .map_err(|_| dkmpp::Error::InvalidArgument("--ratios needs three values".into()))?;
                    data.split(r)?.test
                }
            };
            let grid = dkmpp::metrics::DEFAULT_RMSE_GRID;
            let report = evaluate(ck.model.name(), &ck.model, &set, &data.window, mc, seed, data.truth_fn(), grid)?;
            let json = report.to_json()?;
            match out {
                Some(p) => write_text(&p, &json)?,
                None => println!("{json}"),
            }
        }
        Command::Sweep { config, data, out, axis, repeats } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(a) = axis {
                let r = repeats.or(cfg.sweep.as_ref().map(|s| s.repeats)).unwrap_or(1);
                cfg.sweep = Some(SweepSpec::new(a, r));
            } else if let (Some(r), Some(s)) = (repeats, cfg.sweep.as_mut()) {
                s.repeats = r;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| output_dir(&cfg, Path::new("out")));
            let data = load_data(&cfg, data.as_deref())?;
            let report = run_experiment(&cfg, &data, Some(&out))?;
            for s in &report.sweep_summary {
                println!(
                    "{}={}: rmse {:.4} +- {:.4}, tll {:.4} +- {:.4}",
                    report.sweep_axis.as_deref().unwrap_or("value"),
                    s.value,
                    s.mean_rmse,
                    s.std_rmse,
                    s.mean_tll,
                    s.std_tll
                );
            }
            println!("results in {}", out.display());
        }
        Command::ExportGrid { model, t, resolution, out } => {
            let ck = Checkpoint::load(&model)?;
            export_intensity_grid(&ck.model, ck.window(), t, parse_resolution(&resolution)?, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<dkmpp::Error>() {
                Some(de) => eprintln!("error [{}]: {de}", de.category()),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
