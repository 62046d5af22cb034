//! `microphys` command line.
//!
//! Exit status: 0 on success, 1 for usage or config errors, 2 for failures
//! while running.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::agents::{Policy, Replay};
use crate::architecture::Dimension;
use crate::config::{self, ConfigDocument};
use crate::engine::{self, run_experiment, run_experiment_using, Execution, ExperimentConfig, ParameterGrid, RunArtifact};
use crate::error::{ConfigError, Error};
use crate::feed::ItemId;
use crate::interventions::{self, Intervention, Pin, RoundRange};
use crate::io;
use crate::metrics::{self, AttentionDistribution};
use crate::validation::{self, Comparison, PermutationTest, ReferenceTrace, Statistic};

#[derive(Parser, Debug)]
#[command(name = "microphys", version, about = "Social-feed interaction microphysics simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config document (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides MICROPHYS_SEED and the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Only run the named condition.
    #[arg(long)]
    condition: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every condition and write artifacts under OUT/<condition>/.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a parameter grid; one artifact directory per cell.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `path=v1,v2,...` with a dotted config path; repeatable.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired pinned-ranking attack; prints the lift report as CSV.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `ITEM:SLOT`, slot 1-based; repeatable.
        #[arg(long = "pin", required = true)]
        pins: Vec<String>,
        /// Item whose selection rate is measured (defaults to the first pin).
        #[arg(long)]
        target: Option<ItemId>,
        /// Active rounds `START:END` (END optional).
        #[arg(long)]
        rounds: Option<String>,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perturb architecture dimensions and report detector changes as CSV.
    Sense {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated: visibility, turn_order, memory, snapshot.
        #[arg(long, value_delimiter = ',', default_value = "visibility,turn_order,memory,snapshot")]
        dims: Vec<Dimension>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the adequacy report for a recorded run.
    Validate {
        #[arg(long)]
        run: PathBuf,
        /// Reference trace CSV for the observational comparison.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        statistic: Option<Statistic>,
        /// Observational pass threshold on the distance.
        #[arg(long = "max-distance")]
        max_distance: Option<f64>,
        /// Dimensions for the explanatory part; omitted means not evaluated.
        #[arg(long, value_delimiter = ',')]
        dims: Vec<Dimension>,
        #[arg(long)]
        resamples: Option<u32>,
        /// Reference condition label (defaults to the run's).
        #[arg(long = "reference-condition")]
        reference_condition: Option<String>,
    },
    /// Re-run a recorded run from its logged decisions and check the events match.
    Replay {
        #[arg(long)]
        run: PathBuf,
    },
    /// Export a recorded run as a reference trace CSV.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub const DEFAULT_MAX_DISTANCE: f64 = 0.05;

pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_to(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn dispatch_to<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

fn load(args: &ConfigArgs) -> Result<(ConfigDocument, Vec<ExperimentConfig>), Error> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let doc = config::parse_document(&text)?;
    let env = config::seed_from_env();
    let mut configs = doc.configs();
    for c in &mut configs {
        c.master_seed = config::resolve_seed(c.master_seed, args.seed, env.as_deref())?;
    }
    if let Some(label) = &args.condition {
        configs.retain(|c| &c.condition_label == label);
        if configs.is_empty() {
            return Err(ConfigError::new(format!("no condition labelled `{label}`")).into());
        }
    }
    Ok((doc, configs))
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn mean_of(run: &RunArtifact, metric: &str) -> Option<f64> {
    let vals: Vec<f64> = run.summary.iter().filter(|r| r.metric == metric).filter_map(|r| r.value).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn report_run(run: &RunArtifact, dir: &Path, out: &mut dyn Write) -> Result<(), Error> {
    writeln!(out, "{} -> {}", run.config.condition_label, dir.display()).map_err(out_err)?;
    for m in metrics::REGISTERED_METRICS {
        let v = mean_of(run, m).map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
        writeln!(out, "  mean {m}: {v}").map_err(out_err)?;
    }
    for d in run.config.effective_detectors() {
        match metrics::detect_phenomenon(run, &d) {
            Ok(r) => writeln!(
                out,
                "  {} ({}): {} (statistic {:.4}, effect {:.4})",
                r.detector,
                r.level,
                if r.detected { "detected" } else { "not detected" },
                r.statistic,
                r.effect_size
            ),
            Err(e) => writeln!(out, "  {}: {e}", d.name()),
        }
        .map_err(out_err)?;
    }
    Ok(())
}

fn parse_grid(specs: &[String]) -> Result<ParameterGrid, ConfigError> {
    let mut grid = ParameterGrid::default();
    let mut bad = Vec::new();
    for s in specs {
        let Some((path, values)) = s.split_once('=') else {
            bad.push(format!("--grid `{s}`: expected path=v1,v2,..."));
            continue;
        };
        let vals = values
            .split(',')
            .map(|v| serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string())))
            .collect();
        grid = grid.axis(path.trim(), vals);
    }
    ConfigError::from_violations(bad)?;
    Ok(grid)
}

fn parse_pin(s: &str) -> Result<Pin, ConfigError> {
    let bad = || ConfigError::new(format!("--pin `{s}`: expected ITEM:SLOT"));
    let (item, slot) = s.split_once(':').ok_or_else(bad)?;
    Ok(Pin {
        item: item.trim().parse().map_err(|_| bad())?,
        slot: slot.trim().parse().map_err(|_| bad())?,
    })
}

fn parse_rounds(s: &str) -> Result<RoundRange, ConfigError> {
    let bad = || ConfigError::new(format!("--rounds `{s}`: expected START:END or START:"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok(RoundRange {
        start: a.trim().parse().map_err(|_| bad())?,
        end: match b.trim() {
            "" => None,
            e => Some(e.parse().map_err(|_| bad())?),
        },
    })
}

fn emit(out: &mut dyn Write, file: Option<&Path>, text: &str) -> Result<(), Error> {
    if let Some(p) = file {
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    out.write_all(text.as_bytes()).map_err(out_err)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<(), Error> {
    match cmd {
        Command::Run { cfg, out: dir } => {
            let (_, configs) = load(&cfg)?;
            for c in &configs {
                let run = run_experiment(c)?;
                let sub = dir.join(&c.condition_label);
                io::write_trajectories(&run, &sub)?;
                report_run(&run, &sub, out)?;
            }
            Ok(())
        }
        Command::Sweep { cfg, grid, out: dir } => {
            let (_, configs) = load(&cfg)?;
            let grid = parse_grid(&grid)?;
            for c in &configs {
                for run in engine::run_sweep(c, &grid)? {
                    let sub = dir.join(&run.config.condition_label);
                    io::write_trajectories(&run, &sub)?;
                    report_run(&run, &sub, out)?;
                }
            }
            Ok(())
        }
        Command::Attack {
            cfg,
            pins,
            target,
            rounds,
            out: file,
        } => {
            let (_, configs) = load(&cfg)?;
            let pins = pins.iter().map(|p| parse_pin(p)).collect::<Result<Vec<_>, _>>()?;
            let target = target.unwrap_or(pins[0].item);
            let mut intervention = Intervention::pin(pins);
            if let (Some(r), Intervention::PinRanking { active_rounds, .. }) = (rounds, &mut intervention) {
                *active_rounds = parse_rounds(&r)?;
            }
            let mut reports = Vec::new();
            for c in &configs {
                let (_, _, lift) = interventions::paired_attack(c, intervention.clone(), target)?;
                reports.push(lift);
            }
            emit(out, file.as_deref(), &io::lift_csv(&reports))
        }
        Command::Sense { cfg, dims, out: file } => {
            let (_, configs) = load(&cfg)?;
            for c in &configs {
                let report = interventions::sensitivity_analysis(c, &dims)?;
                let target = file.as_ref().map(|f| {
                    if configs.len() > 1 {
                        f.with_file_name(format!(
                            "{}_{}",
                            c.condition_label,
                            f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
                        ))
                    } else {
                        f.clone()
                    }
                });
                emit(out, target.as_deref(), &io::sensitivity_csv(&report))?;
            }
            Ok(())
        }
        Command::Validate {
            run,
            reference,
            statistic,
            max_distance,
            dims,
            resamples,
            reference_condition,
        } => {
            let artifact = io::read_run(&run)?;
            let cfg = &artifact.config;
            let detections = cfg
                .effective_detectors()
                .iter()
                .map(|d| metrics::detect_phenomenon(&artifact, d))
                .collect::<Result<Vec<_>, _>>()?;
            let sensitivity = if dims.is_empty() {
                None
            } else {
                Some(interventions::sensitivity_analysis(cfg, &dims)?)
            };
            let distance = match &reference {
                Some(path) => {
                    let trace = ReferenceTrace::read_csv(path)?;
                    let sim = AttentionDistribution::from_trajectories(&artifact.trajectories, cfg.slate_size as usize);
                    let cond = reference_condition.as_deref().unwrap_or(&cfg.condition_label);
                    let test = PermutationTest {
                        resamples: resamples.unwrap_or(validation::DEFAULT_RESAMPLES),
                        ..PermutationTest::default()
                    };
                    Some(validation::compare_distributions(
                        &sim,
                        cond,
                        &trace,
                        statistic.unwrap_or(Statistic::Tvd),
                        test,
                    )?)
                }
                None => None,
            };
            let threshold = max_distance.unwrap_or(DEFAULT_MAX_DISTANCE);
            if !(threshold.is_finite() && threshold >= 0.0) {
                return Err(ConfigError::new("--max-distance must be a non-negative number").into());
            }
            let report = validation::build_adequacy_report(
                &cfg.condition_label,
                &detections,
                sensitivity.as_ref(),
                distance.as_ref().map(|d| Comparison {
                    report: d,
                    max_distance: threshold,
                }),
            )?;
            out.write_all(report.render_text().as_bytes()).map_err(out_err)
        }
        Command::Replay { run } => {
            let artifact = io::read_run(&run)?;
            let traces: Vec<_> = artifact.trajectories.iter().map(|t| t.decisions()).collect();
            let mut config = artifact.config.clone();
            config.replications = traces.len() as u32;
            let replayed = run_experiment_using(&config, Execution::Sequential, |r| {
                Ok(Box::new(Replay {
                    trace: traces[r as usize].clone(),
                }) as Box<dyn Policy + Send>)
            })?;
            let mismatches: Vec<u32> = replayed
                .trajectories
                .iter()
                .zip(&artifact.trajectories)
                .filter(|(a, b)| a.events != b.events)
                .map(|(a, _)| a.replication)
                .collect();
            if !mismatches.is_empty() {
                return Err(Error::Format(format!(
                    "replay diverged from the recording in replications {mismatches:?}"
                )));
            }
            let n: usize = replayed.trajectories.iter().map(|t| t.events.len()).sum();
            writeln!(
                out,
                "replay of {} matches: {} replications, {n} events",
                run.display(),
                replayed.trajectories.len()
            )
            .map_err(out_err)
        }
        Command::Export { run, out: path } => {
            let artifact = io::read_run(&run)?;
            let trace = ReferenceTrace::from_trajectories(&artifact.trajectories, &artifact.config.condition_label);
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            trace.write_csv(std::io::BufWriter::new(f))?;
            writeln!(out, "wrote {} rows to {}", trace.rows.len(), path.display()).map_err(out_err)
        }
    }
}
